//! The two-stage training engine: SGD with momentum over two parameter
//! groups (data parameters = prompts, model parameters = last block + head +
//! prototypes) under four strategies — period-k alternation, end-to-end,
//! data-first, and model-first.
//!
//! Each step builds two stochastic views of the raw batch; view A stays raw
//! while view B receives the pixel prompts, so the learned prompt acts as one
//! member of the augmentation pair for every loss term. VPT tokens, when
//! enabled, enter both views (they prompt the network, not the pixels).

use crate::autodiff::{backward, Graph};
use crate::data::{epoch_batches, two_views, AugConfig, DataError, EvalLabels, TrainSet};
use crate::eval::{assign_clusters, hungarian_acc, AccReport, EvalError};
use crate::geometry::{attach_global, attach_spatial, patchify, GeometryError, CHANNELS};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossError, ViewVars};
use crate::model::{forward, ModelError, ModelParams, ModelVars};
use crate::prompts::{PromptSet, PromptVars};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}: {breakdown:?}")]
    NonFinite {
        iteration: u64,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Alternate,
    EndToEnd,
    DataFirst,
    ModelFirst,
}

/// Which parameter group(s) a step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Data,
    Model,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub strategy: Strategy,
    /// Iterations per stage under the alternate strategy.
    pub k: usize,
    pub lr_b: f64,
    pub wd_b: f64,
    pub lr_p: f64,
    pub wd_p: f64,
    pub momentum: f64,
    pub cosine_lr: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            strategy: Strategy::Alternate,
            k: 20,
            lr_b: 0.05,
            wd_b: 5e-4,
            lr_p: 1.0,
            wd_p: 0.0,
            momentum: 0.9,
            cosine_lr: false,
            epochs: 200,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 {
            return Err(TrainError::InvalidConfig("k must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch size must be >= 2".into()));
        }
        for (name, v) in [
            ("lr_b", self.lr_b),
            ("lr_p", self.lr_p),
            ("wd_b", self.wd_b),
            ("wd_p", self.wd_p),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrainError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Active group(s) for the step performed after `iteration` completed
    /// steps in `epoch` (both counters zero-based).
    pub fn stage_at(&self, iteration: u64, epoch: u64) -> StageKind {
        match self.strategy {
            Strategy::EndToEnd => StageKind::Both,
            Strategy::Alternate => {
                if (iteration / self.k as u64) % 2 == 0 {
                    StageKind::Data
                } else {
                    StageKind::Model
                }
            }
            // halves split epochs/2 then the remainder
            Strategy::DataFirst => {
                if epoch < (self.epochs / 2) as u64 {
                    StageKind::Data
                } else {
                    StageKind::Model
                }
            }
            Strategy::ModelFirst => {
                if epoch < (self.epochs / 2) as u64 {
                    StageKind::Model
                } else {
                    StageKind::Data
                }
            }
        }
    }
}

/// Per-tensor SGD momentum buffers, keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: BTreeMap<String, ArrayD<f32>>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub prompts: PromptSet,
    pub opt: SgdState,
    /// Completed optimizer steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(model: ModelParams, prompts: PromptSet) -> Self {
        TrainState {
            model,
            prompts,
            opt: SgdState::default(),
            iteration: 0,
            epoch: 0,
        }
    }
}

pub struct StepOutcome {
    pub stage: StageKind,
    pub breakdown: LossBreakdown,
}

fn stack_views(views: Vec<ArrayD<f32>>, image: usize) -> ArrayD<f32> {
    let b = views.len();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[b, CHANNELS, image, image]));
    for (i, v) in views.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&v);
    }
    out
}

fn sgd_update(
    opt: &mut SgdState,
    tensor: &mut ArrayD<f32>,
    grad: &ArrayD<f32>,
    name: &str,
    lr: f64,
    wd: f64,
    momentum: f64,
) {
    let v = opt
        .velocity
        .entry(name.to_string())
        .or_insert_with(|| ArrayD::zeros(tensor.raw_dim()));
    let (lr, wd, mu) = (lr as f32, wd as f32, momentum as f32);
    ndarray::Zip::from(v.view_mut())
        .and(tensor.view())
        .and(grad.view())
        .for_each(|v, &w, &g| *v = mu * *v + g + wd * w);
    ndarray::Zip::from(tensor.view_mut())
        .and(v.view())
        .for_each(|w, &v| *w -= lr * v);
}

/// One optimizer step over a raw mini-batch. Builds the two views, computes
/// the composed loss, and updates only the active group's tensors; the other
/// group stays bit-identical.
pub fn step(
    state: &mut TrainState,
    train: &TrainSet,
    batch: &[usize],
    schedule: &ScheduleConfig,
    loss_config: &LossConfig,
    aug: &AugConfig,
    lr_scale: f64,
) -> Result<StepOutcome, TrainError> {
    let stage = schedule.stage_at(state.iteration, state.epoch);
    let layout = state.model.config.layout()?;
    let pc = state.prompts.config;

    let mut views_a = Vec::with_capacity(batch.len());
    let mut views_b = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &idx in batch {
        let (a, b) = two_views(
            &train.instance(idx),
            aug,
            schedule.seed,
            idx as u64,
            state.epoch,
        );
        views_a.push(a);
        views_b.push(b);
        labels.push(train.labels[idx]);
    }
    let images_a = stack_views(views_a, train.image);
    let images_b = stack_views(views_b, train.image);

    let g = Graph::<f32>::new();
    let model_vars = ModelVars::inject(&g, &state.model);
    let prompt_vars = PromptVars::inject(&g, &state.prompts);

    // view A: raw pixels (patch grid enters as data)
    let patches_a = g.constant(patchify(&images_a, &layout)?);
    // view B: prompted pixels (gradient reaches the compact prompts)
    let images_b_var = g.constant(images_b);
    let patches_b = prompt_vars.prompted_patches(&images_b_var, &layout, &pc)?;

    let vpt = prompt_vars.vpt.as_ref();
    let vpt_cfg = vpt.map(|_| &pc);
    let out_a = forward(&model_vars, &state.model.config, &patches_a, vpt, vpt_cfg, false)?;
    let out_b = forward(&model_vars, &state.model.config, &patches_b, vpt, vpt_cfg, false)?;

    let batch_vars = ViewVars {
        features_a: &out_a.features,
        features_b: &out_b.features,
        cosines_a: &out_a.cosines,
        cosines_b: &out_b.cosines,
        labels: &labels,
    };
    let (loss, breakdown) = total_loss(&batch_vars, loss_config)?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite {
            iteration: state.iteration,
            breakdown,
        });
    }
    let grads = backward(&loss);

    if matches!(stage, StageKind::Model | StageKind::Both) {
        let names = state.model.trainable_names();
        let lr = schedule.lr_b * lr_scale;
        for name in names {
            let grad = grads.get(model_vars.get(&name));
            let tensor = state.model.tensors.get_mut(&name).unwrap();
            sgd_update(&mut state.opt, tensor, &grad, &name, lr, schedule.wd_b, schedule.momentum);
        }
    }
    if matches!(stage, StageKind::Data | StageKind::Both) {
        let lr = schedule.lr_p * lr_scale;
        let mut updates: Vec<(String, ArrayD<f32>)> = Vec::new();
        if let Some(v) = &prompt_vars.spatial {
            updates.push(("prompt.spatial".into(), grads.get(v)));
        }
        if let Some(v) = &prompt_vars.global {
            updates.push(("prompt.global".into(), grads.get(v)));
        }
        if let Some(v) = &prompt_vars.vpt {
            updates.push(("prompt.vpt".into(), grads.get(v)));
        }
        let opt = &mut state.opt;
        for (name, grad) in &updates {
            state.prompts.for_each_tensor_mut(|tname, tensor| {
                if tname == name {
                    sgd_update(opt, tensor, grad, name, lr, schedule.wd_p, schedule.momentum);
                }
            });
        }
    }

    state.iteration += 1;
    Ok(StepOutcome { stage, breakdown })
}

/// Classify the unlabelled pool with the current parameters (prompted, no
/// stochastic augmentation) and score it against the hidden labels.
pub fn evaluate_split(
    model: &ModelParams,
    prompts: &PromptSet,
    train: &TrainSet,
    eval: &EvalLabels,
    k_pred: usize,
    eval_batch: usize,
) -> Result<AccReport, TrainError> {
    let layout = model.config.layout()?;
    let pc = prompts.config;
    let mut predicted = Vec::with_capacity(eval.hidden.len());
    for chunk in eval.hidden.chunks(eval_batch.max(1)) {
        let views: Vec<ArrayD<f32>> = chunk
            .iter()
            .map(|&(idx, _)| train.instance(idx).to_owned())
            .collect();
        let mut images = stack_views(views, train.image);
        if let Some(gp) = &prompts.global {
            images = attach_global(&images, gp, &layout, pc.m_plus)?;
        }
        let mut patches = patchify(&images, &layout)?;
        if let Some(sp) = &prompts.spatial {
            patches = attach_spatial(&patches, sp, &layout, pc.m)?;
        }
        let g = Graph::<f32>::new();
        let model_vars = ModelVars::inject(&g, model);
        let patches_var = g.constant(patches);
        let vpt_var = prompts.vpt.as_ref().map(|t| g.constant(t.clone()));
        let out = forward(
            &model_vars,
            &model.config,
            &patches_var,
            vpt_var.as_ref(),
            vpt_var.as_ref().map(|_| &pc),
            false,
        )?;
        predicted.extend(assign_clusters(&out.cosines.value())?);
    }
    let preds = crate::eval::PredictionSet {
        predicted,
        hidden: eval.hidden.iter().map(|&(_, c)| c).collect(),
        is_old: eval
            .hidden
            .iter()
            .map(|&(_, c)| c < eval.old_classes)
            .collect(),
    };
    Ok(hungarian_acc(&preds, k_pred, eval.num_classes)?)
}

/// Per-epoch summary written to the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub iteration: u64,
    pub mean_total: f64,
    pub mean_un_nce: f64,
    pub mean_un_cls: f64,
    pub mean_sup_nce: f64,
    pub mean_sup_cls: f64,
    pub mean_entropy: f64,
    pub acc_all: Option<f64>,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
}

pub enum RunEvent<'a> {
    Step {
        iteration: u64,
        epoch: u64,
        stage: StageKind,
        breakdown: &'a LossBreakdown,
    },
    Epoch(&'a EpochRecord),
}

pub struct RunOptions {
    /// Epoch interval between accuracy evaluations (the final epoch is always
    /// evaluated); 0 disables intermediate evaluation.
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Prototype-slot count used at evaluation time.
    pub k_pred: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            eval_every: 25,
            eval_batch: 256,
            k_pred: 0,
        }
    }
}

pub struct RunResult {
    pub history: Vec<EpochRecord>,
    pub final_acc: Option<AccReport>,
}

/// Drive training from the state's current epoch up to the configured epoch
/// count, emitting step and epoch events through `observer`. Resuming from a
/// loaded state replays the identical remaining schedule.
pub fn run(
    state: &mut TrainState,
    train: &TrainSet,
    eval: Option<&EvalLabels>,
    schedule: &ScheduleConfig,
    loss_config: &LossConfig,
    aug: &AugConfig,
    options: &RunOptions,
    observer: &mut dyn FnMut(RunEvent<'_>, &TrainState) -> Result<(), TrainError>,
) -> Result<RunResult, TrainError> {
    schedule.validate()?;
    loss_config.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    let batches_per_epoch = train.len().div_ceil(schedule.batch_size) as u64;
    let total_iterations = (schedule.epochs as u64 * batches_per_epoch).max(1);
    let k_pred = if options.k_pred == 0 {
        state.model.config.num_classes
    } else {
        options.k_pred
    };

    let mut history = Vec::new();
    let mut final_acc = None;
    while state.epoch < schedule.epochs as u64 {
        let epoch = state.epoch;
        let batches = epoch_batches(&train.labels, schedule.batch_size, schedule.seed, epoch);
        let mut sums = [0.0f64; 6];
        let mut steps_in_epoch = 0u64;
        for batch in &batches {
            let lr_scale = if schedule.cosine_lr {
                let t = state.iteration as f64 / total_iterations as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            } else {
                1.0
            };
            let outcome = step(state, train, batch, schedule, loss_config, aug, lr_scale)?;
            let b = &outcome.breakdown;
            for (slot, v) in sums.iter_mut().zip([
                b.total, b.un_nce, b.un_cls, b.sup_nce, b.sup_cls, b.entropy,
            ]) {
                *slot += v;
            }
            steps_in_epoch += 1;
            observer(
                RunEvent::Step {
                    iteration: state.iteration,
                    epoch,
                    stage: outcome.stage,
                    breakdown: b,
                },
                state,
            )?;
        }
        state.epoch += 1;

        let is_final = state.epoch == schedule.epochs as u64;
        let evaluate = eval.is_some()
            && (is_final || (options.eval_every > 0 && state.epoch % options.eval_every as u64 == 0));
        let acc = if evaluate {
            let report = evaluate_split(
                &state.model,
                &state.prompts,
                train,
                eval.unwrap(),
                k_pred,
                options.eval_batch,
            )?;
            if is_final {
                final_acc = Some(report.clone());
            }
            Some(report)
        } else {
            None
        };

        let denom = steps_in_epoch.max(1) as f64;
        let record = EpochRecord {
            epoch: state.epoch,
            iteration: state.iteration,
            mean_total: sums[0] / denom,
            mean_un_nce: sums[1] / denom,
            mean_un_cls: sums[2] / denom,
            mean_sup_nce: sums[3] / denom,
            mean_sup_cls: sums[4] / denom,
            mean_entropy: sums[5] / denom,
            acc_all: acc.as_ref().map(|a| a.all),
            acc_old: acc.as_ref().and_then(|a| a.old),
            acc_new: acc.as_ref().and_then(|a| a.new),
        };
        observer(RunEvent::Epoch(&record), state)?;
        history.push(record);
    }
    Ok(RunResult { history, final_acc })
}
