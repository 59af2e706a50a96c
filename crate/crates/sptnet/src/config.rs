//! Experiment configuration: flat dotted keys (`prompt.m=1`) with documented
//! defaults, file + command-line override parsing (precedence: CLI over file
//! over defaults), schema validation, and a deterministic resolved echo.

use crate::data::{AugConfig, SyntheticSpec};
use crate::losses::{LossConfig, NceDenominator};
use crate::model::VitConfig;
use crate::prompts::{PromptConfig, SpatialKind};
use crate::schedule::{RunOptions, ScheduleConfig, Strategy};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value} (expected {expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("bad config line (want key=value): {0}")]
    BadLine(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_seed: u64,
    pub run_out_dir: String,
    pub data_dir: String,
    pub data_image: usize,
    pub data_classes: usize,
    pub data_old_classes: usize,
    pub data_instances_per_class: usize,
    pub data_noise: f64,
    pub data_rho: f64,
    pub data_seed: u64,
    pub model_image: usize,
    pub model_patch: usize,
    pub model_depth: usize,
    pub model_dim: usize,
    pub model_heads: usize,
    pub model_mlp_ratio: f64,
    pub model_proj_dim: usize,
    pub model_classes: usize,
    pub model_train_last_norm: bool,
    pub prompt_spatial: SpatialKind,
    pub prompt_m: usize,
    pub prompt_global: bool,
    pub prompt_m_plus: usize,
    pub prompt_vpt_len: usize,
    pub prompt_vpt_deep: bool,
    pub loss_lambda: f64,
    pub loss_epsilon: f64,
    pub loss_tau_u: f64,
    pub loss_tau_c: f64,
    pub loss_tau_s: f64,
    pub loss_tau_t: f64,
    pub loss_nce_denominator: NceDenominator,
    pub sched_strategy: Strategy,
    pub sched_k: usize,
    pub sched_lr_b: f64,
    pub sched_wd_b: f64,
    pub sched_lr_p: f64,
    pub sched_wd_p: f64,
    pub sched_momentum: f64,
    pub sched_cosine_lr: bool,
    pub sched_epochs: usize,
    pub sched_batch_size: usize,
    pub aug_enabled: bool,
    pub aug_crop_min: f64,
    pub aug_crop_max: f64,
    pub aug_flip: bool,
    pub aug_jitter: f64,
    pub eval_every: usize,
    pub eval_k_pred: usize,
    pub eval_batch: usize,
    pub ckpt_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_seed: 0,
            run_out_dir: "runs/out".into(),
            data_dir: "data".into(),
            data_image: 224,
            data_classes: 8,
            data_old_classes: 4,
            data_instances_per_class: 48,
            data_noise: 0.15,
            data_rho: 0.5,
            data_seed: 0,
            model_image: 224,
            model_patch: 16,
            model_depth: 2,
            model_dim: 32,
            model_heads: 4,
            model_mlp_ratio: 2.0,
            model_proj_dim: 16,
            model_classes: 8,
            model_train_last_norm: true,
            prompt_spatial: SpatialKind::PerPatch,
            prompt_m: 1,
            prompt_global: true,
            prompt_m_plus: 30,
            prompt_vpt_len: 0,
            prompt_vpt_deep: true,
            loss_lambda: 0.35,
            loss_epsilon: 1.0,
            loss_tau_u: 0.07,
            loss_tau_c: 1.0,
            loss_tau_s: 0.1,
            loss_tau_t: 0.07,
            loss_nce_denominator: NceDenominator::Full,
            sched_strategy: Strategy::Alternate,
            sched_k: 20,
            sched_lr_b: 0.05,
            sched_wd_b: 5e-4,
            sched_lr_p: 1.0,
            sched_wd_p: 0.0,
            sched_momentum: 0.9,
            sched_cosine_lr: false,
            sched_epochs: 200,
            sched_batch_size: 128,
            aug_enabled: true,
            aug_crop_min: 0.7,
            aug_crop_max: 1.0,
            aug_flip: true,
            aug_jitter: 0.1,
            eval_every: 25,
            eval_k_pred: 0,
            eval_batch: 256,
            ckpt_every: 0,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $fn:ident) => {
        $fn!("run.seed", run_seed, u64, "training RNG seed");
        $fn!("run.out_dir", run_out_dir, String, "run output directory");
        $fn!("data.dir", data_dir, String, "dataset directory");
        $fn!("data.image", data_image, usize, "synthetic image side in pixels");
        $fn!("data.classes", data_classes, usize, "synthetic class count");
        $fn!("data.old_classes", data_old_classes, usize, "old (labelled-pool) class count");
        $fn!(
            "data.instances_per_class",
            data_instances_per_class,
            usize,
            "instances generated per class"
        );
        $fn!("data.noise", data_noise, f64, "pixel noise standard deviation");
        $fn!("data.rho", data_rho, f64, "labelled fraction per old class, in (0,1]");
        $fn!("data.seed", data_seed, u64, "generation and split seed");
        $fn!("model.image", model_image, usize, "model input side in pixels");
        $fn!("model.patch", model_patch, usize, "patch side in pixels");
        $fn!("model.depth", model_depth, usize, "encoder layer count");
        $fn!("model.dim", model_dim, usize, "embedding width");
        $fn!("model.heads", model_heads, usize, "attention heads");
        $fn!("model.mlp_ratio", model_mlp_ratio, f64, "MLP expansion ratio");
        $fn!("model.proj_dim", model_proj_dim, usize, "projection head width");
        $fn!("model.classes", model_classes, usize, "prototype (class-slot) count");
        $fn!(
            "model.train_last_norm",
            model_train_last_norm,
            bool,
            "final norm joins the trainable model group"
        );
        $fn!(
            "prompt.spatial",
            prompt_spatial,
            SpatialKind,
            "spatial prompt kind: per_patch | shared | none"
        );
        $fn!("prompt.m", prompt_m, usize, "patch border width m");
        $fn!("prompt.global", prompt_global, bool, "enable the global border prompt");
        $fn!("prompt.m_plus", prompt_m_plus, usize, "image border width m+");
        $fn!("prompt.vpt_len", prompt_vpt_len, usize, "VPT tokens per layer (0 = off)");
        $fn!("prompt.vpt_deep", prompt_vpt_deep, bool, "deep (per-layer) VPT insertion");
        $fn!("loss.lambda", loss_lambda, f64, "supervised/unsupervised balance");
        $fn!("loss.epsilon", loss_epsilon, f64, "mean-entropy regularizer weight");
        $fn!("loss.tau_u", loss_tau_u, f64, "instance contrastive temperature");
        $fn!("loss.tau_c", loss_tau_c, f64, "supervised contrastive temperature");
        $fn!("loss.tau_s", loss_tau_s, f64, "student classification temperature");
        $fn!("loss.tau_t", loss_tau_t, f64, "teacher sharpening temperature");
        $fn!(
            "loss.nce_denominator",
            loss_nce_denominator,
            NceDenominator,
            "InfoNCE denominator: full | negatives_only"
        );
        $fn!(
            "sched.strategy",
            sched_strategy,
            Strategy,
            "alternate | end_to_end | data_first | model_first"
        );
        $fn!("sched.k", sched_k, usize, "iterations per stage when alternating");
        $fn!("sched.lr_b", sched_lr_b, f64, "model-group learning rate");
        $fn!("sched.wd_b", sched_wd_b, f64, "model-group weight decay");
        $fn!("sched.lr_p", sched_lr_p, f64, "prompt-group learning rate");
        $fn!("sched.wd_p", sched_wd_p, f64, "prompt-group weight decay");
        $fn!("sched.momentum", sched_momentum, f64, "SGD momentum for both groups");
        $fn!("sched.cosine_lr", sched_cosine_lr, bool, "cosine learning-rate decay");
        $fn!("sched.epochs", sched_epochs, usize, "training epochs");
        $fn!("sched.batch_size", sched_batch_size, usize, "mini-batch size");
        $fn!("aug.enabled", aug_enabled, bool, "stochastic view augmentation");
        $fn!("aug.crop_min", aug_crop_min, f64, "crop area-scale lower bound");
        $fn!("aug.crop_max", aug_crop_max, f64, "crop area-scale upper bound");
        $fn!("aug.flip", aug_flip, bool, "random horizontal flip");
        $fn!("aug.jitter", aug_jitter, f64, "per-channel jitter amplitude");
        $fn!("eval.every", eval_every, usize, "epochs between ACC evaluations (0 = final only)");
        $fn!("eval.k_pred", eval_k_pred, usize, "cluster count at evaluation (0 = model.classes)");
        $fn!("eval.batch", eval_batch, usize, "evaluation forward batch size");
        $fn!("ckpt.every", ckpt_every, usize, "epochs between checkpoints (0 = final only)");
    };
}

trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for u64 {
    const EXPECTED: &'static str = "unsigned integer";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    const EXPECTED: &'static str = "unsigned integer";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "number";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for bool {
    const EXPECTED: &'static str = "true | false";
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    const EXPECTED: &'static str = "string";
    fn parse_value(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for SpatialKind {
    const EXPECTED: &'static str = "per_patch | shared | none";
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "per_patch" => Some(SpatialKind::PerPatch),
            "shared" => Some(SpatialKind::Shared),
            "none" => Some(SpatialKind::None),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            SpatialKind::PerPatch => "per_patch",
            SpatialKind::Shared => "shared",
            SpatialKind::None => "none",
        }
        .into()
    }
}

impl ConfigValue for NceDenominator {
    const EXPECTED: &'static str = "full | negatives_only";
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "full" => Some(NceDenominator::Full),
            "negatives_only" => Some(NceDenominator::NegativesOnly),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            NceDenominator::Full => "full",
            NceDenominator::NegativesOnly => "negatives_only",
        }
        .into()
    }
}

impl ConfigValue for Strategy {
    const EXPECTED: &'static str = "alternate | end_to_end | data_first | model_first";
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "alternate" => Some(Strategy::Alternate),
            "end_to_end" => Some(Strategy::EndToEnd),
            "data_first" => Some(Strategy::DataFirst),
            "model_first" => Some(Strategy::ModelFirst),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            Strategy::Alternate => "alternate",
            Strategy::EndToEnd => "end_to_end",
            Strategy::DataFirst => "data_first",
            Strategy::ModelFirst => "model_first",
        }
        .into()
    }
}

impl ExperimentConfig {
    /// Set one `key` to a parsed `value`; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! setter {
            ($name:literal, $field:ident, $ty:ty, $doc:literal) => {
                if key == $name {
                    self.$field = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                        ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: <$ty as ConfigValue>::EXPECTED,
                        }
                    })?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, setter);
        Err(ConfigError::UnknownKey(key.into()))
    }

    /// Resolved `key=value` lines, sorted, one per key (the config echo).
    pub fn to_sorted_lines(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        macro_rules! getter {
            ($name:literal, $field:ident, $ty:ty, $doc:literal) => {
                lines.push(format!("{}={}", $name, ConfigValue::render(&self.$field)));
            };
        }
        config_keys!(self, getter);
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// `(key, default, doc)` rows for every known key.
    pub fn schema() -> Vec<(&'static str, String, &'static str)> {
        let d = ExperimentConfig::default();
        let mut rows = Vec::new();
        macro_rules! row {
            ($name:literal, $field:ident, $ty:ty, $doc:literal) => {
                rows.push(($name, ConfigValue::render(&d.$field), $doc));
            };
        }
        config_keys!(d, row);
        rows.sort_by_key(|r| r.0);
        rows
    }

    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn from_sources(file: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            for raw in text.lines() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| ConfigError::BadLine(line.into()))?;
                config.apply(key.trim(), value.trim())?;
            }
        }
        for set in sets {
            let (key, value) = set
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(set.clone()))?;
            config.apply(key.trim(), value.trim())?;
        }
        config.check()?;
        Ok(config)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !(self.data_rho > 0.0 && self.data_rho <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "data.rho {} outside (0, 1]",
                self.data_rho
            )));
        }
        if self.aug_crop_min <= 0.0 || self.aug_crop_max > 1.0 || self.aug_crop_min > self.aug_crop_max {
            return Err(ConfigError::Invalid("aug crop bounds need 0 < min <= max <= 1".into()));
        }
        Ok(())
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            image: self.model_image,
            patch: self.model_patch,
            depth: self.model_depth,
            dim: self.model_dim,
            heads: self.model_heads,
            mlp_ratio: self.model_mlp_ratio,
            num_classes: self.model_classes,
            proj_dim: self.model_proj_dim,
            train_last_norm: self.model_train_last_norm,
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            spatial: self.prompt_spatial,
            m: self.prompt_m,
            use_global: self.prompt_global,
            m_plus: self.prompt_m_plus,
            vpt_len: self.prompt_vpt_len,
            vpt_deep: self.prompt_vpt_deep,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.loss_lambda,
            epsilon: self.loss_epsilon,
            tau_u: self.loss_tau_u,
            tau_c: self.loss_tau_c,
            tau_s: self.loss_tau_s,
            tau_t: self.loss_tau_t,
            nce_denominator: self.loss_nce_denominator,
        }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            strategy: self.sched_strategy,
            k: self.sched_k,
            lr_b: self.sched_lr_b,
            wd_b: self.sched_wd_b,
            lr_p: self.sched_lr_p,
            wd_p: self.sched_wd_p,
            momentum: self.sched_momentum,
            cosine_lr: self.sched_cosine_lr,
            epochs: self.sched_epochs,
            batch_size: self.sched_batch_size,
            seed: self.run_seed,
        }
    }

    pub fn aug_config(&self) -> AugConfig {
        AugConfig {
            enabled: self.aug_enabled,
            crop_min: self.aug_crop_min,
            crop_max: self.aug_crop_max,
            flip: self.aug_flip,
            jitter: self.aug_jitter,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image: self.data_image,
            classes: self.data_classes,
            old_classes: self.data_old_classes,
            instances_per_class: self.data_instances_per_class,
            noise: self.data_noise,
            seed: self.data_seed,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            eval_every: self.eval_every,
            eval_batch: self.eval_batch,
            k_pred: self.eval_k_pred,
        }
    }
}
