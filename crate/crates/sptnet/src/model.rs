//! Minimal configurable Vision Transformer: patch embedding, pre-norm
//! encoder blocks, CLS readout, MLP projection head, and cosine prototype
//! classifier. Supports VPT token prompts and final-layer attention capture.

use crate::autodiff::{Graph, Scalar, Var};
use crate::geometry::{GeometryError, PatchLayout, CHANNELS};
use crate::prompts::PromptConfig;
use ndarray::{ArrayD, IxDyn};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("top fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("query index {index} out of range for {n} patches")]
    BadQuery { index: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    /// Input height and width (square images).
    pub image: usize,
    /// Patch height and width (square patches).
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Class-slot count (prototype rows).
    pub num_classes: usize,
    pub proj_dim: usize,
    /// Whether the final normalization joins the trainable model group.
    pub train_last_norm: bool,
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 1 {
            return Err(ModelError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("need at least 2 class slots".into()));
        }
        if self.proj_dim == 0 || self.mlp_ratio <= 0.0 {
            return Err(ModelError::InvalidConfig("proj_dim and mlp_ratio must be positive".into()));
        }
        self.layout()?;
        Ok(())
    }

    pub fn layout(&self) -> Result<PatchLayout, GeometryError> {
        PatchLayout::new(self.image, self.image, self.patch, self.patch)
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// All network weights as named tensors, plus the frozen/trainable split.
///
/// The trainable model group is exactly the last encoder block, the final
/// normalization (by config flag), the projection head, and the prototypes.
/// Everything earlier stays frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: VitConfig,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl ModelParams {
    pub fn init(config: VitConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let mlp = config.mlp_dim();
        let patch_in = CHANNELS * config.patch * config.patch;
        let mut tensors = BTreeMap::new();
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0f64, std).unwrap();
            ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng) as f32)
        };
        tensors.insert("embed.w".into(), normal(&[patch_in, d], 1.0 / (patch_in as f64).sqrt()));
        tensors.insert("embed.b".into(), ArrayD::zeros(IxDyn(&[d])));
        tensors.insert("cls".into(), normal(&[d], 0.02));
        for i in 0..config.depth {
            let p = |s: &str| format!("blk{i}.{s}");
            tensors.insert(p("ln1.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
            tensors.insert(p("ln1.b"), ArrayD::zeros(IxDyn(&[d])));
            tensors.insert(p("qkv.w"), normal(&[d, 3 * d], 1.0 / (d as f64).sqrt()));
            tensors.insert(p("qkv.b"), ArrayD::zeros(IxDyn(&[3 * d])));
            tensors.insert(p("proj.w"), normal(&[d, d], 1.0 / (d as f64).sqrt()));
            tensors.insert(p("proj.b"), ArrayD::zeros(IxDyn(&[d])));
            tensors.insert(p("ln2.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
            tensors.insert(p("ln2.b"), ArrayD::zeros(IxDyn(&[d])));
            tensors.insert(p("fc1.w"), normal(&[d, mlp], 1.0 / (d as f64).sqrt()));
            tensors.insert(p("fc1.b"), ArrayD::zeros(IxDyn(&[mlp])));
            tensors.insert(p("fc2.w"), normal(&[mlp, d], 1.0 / (mlp as f64).sqrt()));
            tensors.insert(p("fc2.b"), ArrayD::zeros(IxDyn(&[d])));
        }
        tensors.insert("norm.g".into(), ArrayD::from_elem(IxDyn(&[d]), 1.0));
        tensors.insert("norm.b".into(), ArrayD::zeros(IxDyn(&[d])));
        let pd = config.proj_dim;
        tensors.insert("head.fc1.w".into(), normal(&[d, pd], 1.0 / (d as f64).sqrt()));
        tensors.insert("head.fc1.b".into(), ArrayD::zeros(IxDyn(&[pd])));
        tensors.insert("head.fc2.w".into(), normal(&[pd, pd], 1.0 / (pd as f64).sqrt()));
        tensors.insert("head.fc2.b".into(), ArrayD::zeros(IxDyn(&[pd])));
        tensors.insert("head.fc3.w".into(), normal(&[pd, pd], 1.0 / (pd as f64).sqrt()));
        tensors.insert("head.fc3.b".into(), ArrayD::zeros(IxDyn(&[pd])));
        tensors.insert("protos".into(), normal(&[config.num_classes, pd], 1.0));
        Ok(ModelParams { config, tensors })
    }

    /// Trainable-mask predicate for the model parameter group.
    pub fn is_trainable(&self, name: &str) -> bool {
        let last = format!("blk{}.", self.config.depth - 1);
        name.starts_with(&last)
            || name.starts_with("head.")
            || name == "protos"
            || (self.config.train_last_norm && name.starts_with("norm."))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| self.is_trainable(k))
            .cloned()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Model tensors injected on a tape.
pub struct ModelVars<F: Scalar> {
    vars: BTreeMap<String, Var<F>>,
}

impl<F: Scalar> ModelVars<F> {
    pub fn inject(g: &Graph<F>, params: &ModelParams) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.input(t.mapv(|x| F::from_f64(x as f64)))))
            .collect();
        ModelVars { vars }
    }

    pub fn get(&self, name: &str) -> &Var<F> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("missing model tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<F>)> {
        self.vars.iter()
    }
}

pub struct ForwardOut<F: Scalar> {
    /// `(B, proj_dim)`, l2-normalized.
    pub features: Var<F>,
    /// `(B, C)` raw cosines against l2-normalized prototypes.
    pub cosines: Var<F>,
    /// `(B, dim)` CLS embedding after the final normalization.
    pub cls: Var<F>,
    /// `(B, heads, S, S)` final-layer attention, when requested.
    pub attention: Option<ArrayD<F>>,
}

fn layernorm_seq<F: Scalar>(x: &Var<F>, g: &Var<F>, b: &Var<F>, rows: usize, d: usize) -> Var<F> {
    x.reshape(&[rows, d]).layernorm_rows(g, b, F::from_f64(LN_EPS))
}

/// Full forward pass over an already-prompted patch grid.
///
/// VPT prompts, when given, are prepended per layer as `[CLS; P_i; E_i]` and
/// stripped from the output sequence, so the CLS readout keeps its shape.
pub fn forward<F: Scalar>(
    vars: &ModelVars<F>,
    config: &VitConfig,
    patches: &Var<F>,
    vpt: Option<&Var<F>>,
    vpt_config: Option<&PromptConfig>,
    want_attention: bool,
) -> Result<ForwardOut<F>, ModelError> {
    config.validate()?;
    let layout = config.layout()?;
    let n = layout.num_patches();
    let d = config.dim;
    let shape = patches.shape();
    let batch = *shape.first().unwrap_or(&0);
    let expected = [batch, n, CHANNELS, config.patch, config.patch];
    if shape != expected {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{shape:?}"),
        });
    }
    if batch == 0 {
        return Err(ModelError::ShapeMismatch {
            expected: "nonempty batch".into(),
            got: "B=0".into(),
        });
    }
    let (vpt_len, vpt_deep) = match (vpt, vpt_config) {
        (Some(v), Some(pc)) => {
            let layers = if pc.vpt_deep { config.depth } else { 1 };
            if v.shape() != [layers, pc.vpt_len, d] {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("[{layers}, {}, {d}]", pc.vpt_len),
                    got: format!("{:?}", v.shape()),
                });
            }
            (pc.vpt_len, pc.vpt_deep)
        }
        (None, _) => (0, true),
        (Some(_), None) => {
            return Err(ModelError::InvalidConfig("vpt tokens given without prompt config".into()))
        }
    };

    let patch_in = CHANNELS * config.patch * config.patch;
    let tokens = patches
        .reshape(&[batch * n, patch_in])
        .matmul(vars.get("embed.w"))
        .add_bias(vars.get("embed.b"))
        .reshape(&[batch, n, d]);
    let cls_tok = vars.get("cls").reshape(&[1, d]).broadcast_axis0(batch);
    let mut seq = Var::concat_axis(1, &[&cls_tok, &tokens]);
    let mut seq_len = 1 + n;
    let mut attention = None;

    // shallow VPT: prompts enter once and ride through every layer
    if vpt_len > 0 && !vpt_deep {
        seq = insert_vpt(&seq, vpt.unwrap(), 0, vpt_len, batch, d, n);
        seq_len += vpt_len;
    }

    for i in 0..config.depth {
        if vpt_len > 0 && vpt_deep {
            seq = insert_vpt(&seq, vpt.unwrap(), i, vpt_len, batch, d, n);
            seq_len += vpt_len;
        }
        let p = |s: &str| format!("blk{i}.{s}");
        let rows = batch * seq_len;
        let heads = config.heads;
        let dh = d / heads;

        let normed = layernorm_seq(&seq, vars.get(&p("ln1.g")), vars.get(&p("ln1.b")), rows, d);
        let qkv = normed.matmul(vars.get(&p("qkv.w"))).add_bias(vars.get(&p("qkv.b")));
        let split = |start: usize| {
            qkv.slice_axis(1, start, d)
                .reshape(&[batch, seq_len, heads, dh])
                .permute_axes(&[0, 2, 1, 3])
                .reshape(&[batch * heads, seq_len, dh])
        };
        let q = split(0);
        let k = split(d);
        let v = split(2 * d);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let scores = q.batch_matmul(&k.permute_axes(&[0, 2, 1])).mul_scalar(scale);
        let attn = scores
            .reshape(&[batch * heads * seq_len, seq_len])
            .softmax_rows()
            .reshape(&[batch * heads, seq_len, seq_len]);
        if want_attention && i == config.depth - 1 {
            attention = Some(
                attn.value()
                    .into_shape_with_order(IxDyn(&[batch, heads, seq_len, seq_len]))
                    .unwrap(),
            );
        }
        let ctx = attn
            .batch_matmul(&v)
            .reshape(&[batch, heads, seq_len, dh])
            .permute_axes(&[0, 2, 1, 3])
            .reshape(&[rows, d]);
        let projected = ctx
            .matmul(vars.get(&p("proj.w")))
            .add_bias(vars.get(&p("proj.b")))
            .reshape(&[batch, seq_len, d]);
        seq = seq.add(&projected);

        let normed2 = layernorm_seq(&seq, vars.get(&p("ln2.g")), vars.get(&p("ln2.b")), rows, d);
        let hidden = normed2
            .matmul(vars.get(&p("fc1.w")))
            .add_bias(vars.get(&p("fc1.b")))
            .gelu();
        let mlp_out = hidden
            .matmul(vars.get(&p("fc2.w")))
            .add_bias(vars.get(&p("fc2.b")))
            .reshape(&[batch, seq_len, d]);
        seq = seq.add(&mlp_out);

        if vpt_len > 0 && vpt_deep {
            seq = strip_vpt(&seq, vpt_len, n);
            seq_len -= vpt_len;
        }
    }
    if vpt_len > 0 && !vpt_deep {
        seq = strip_vpt(&seq, vpt_len, n);
    }

    let cls = seq
        .slice_axis(1, 0, 1)
        .reshape(&[batch, d])
        .layernorm_rows(vars.get("norm.g"), vars.get("norm.b"), F::from_f64(LN_EPS));
    let h1 = cls.matmul(vars.get("head.fc1.w")).add_bias(vars.get("head.fc1.b")).gelu();
    let h2 = h1.matmul(vars.get("head.fc2.w")).add_bias(vars.get("head.fc2.b")).gelu();
    let h3 = h2.matmul(vars.get("head.fc3.w")).add_bias(vars.get("head.fc3.b"));
    let features = h3.l2_normalize_rows(F::from_f64(L2_EPS));
    let protos = vars.get("protos").l2_normalize_rows(F::from_f64(L2_EPS));
    let cosines = features.matmul(&protos.permute_axes(&[1, 0]));

    if !cosines.value().iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("prototype cosines".into()));
    }
    Ok(ForwardOut {
        features,
        cosines,
        cls,
        attention,
    })
}

fn insert_vpt<F: Scalar>(
    seq: &Var<F>,
    vpt: &Var<F>,
    layer: usize,
    vpt_len: usize,
    batch: usize,
    d: usize,
    n: usize,
) -> Var<F> {
    let tokens = vpt
        .slice_axis(0, layer, 1)
        .reshape(&[vpt_len, d])
        .broadcast_axis0(batch);
    let cls_part = seq.slice_axis(1, 0, 1);
    let patch_part = seq.slice_axis(1, seq.shape()[1] - n, n);
    Var::concat_axis(1, &[&cls_part, &tokens, &patch_part])
}

fn strip_vpt<F: Scalar>(seq: &Var<F>, vpt_len: usize, n: usize) -> Var<F> {
    let cls_part = seq.slice_axis(1, 0, 1);
    let patch_part = seq.slice_axis(1, 1 + vpt_len, n);
    Var::concat_axis(1, &[&cls_part, &patch_part])
}

/// Attention query position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    Cls,
    Patch(usize),
}

/// Per-head boolean masks over patches: the `ceil(top_fraction * n)` most
/// attended patches from `query` in the final layer. Ties break toward the
/// lower patch index.
pub fn extract_attention(
    params: &ModelParams,
    patches: &ArrayD<f32>,
    vpt: Option<(&ArrayD<f32>, &PromptConfig)>,
    query: Query,
    top_fraction: f64,
) -> Result<Vec<Vec<Vec<bool>>>, ModelError> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(ModelError::InvalidFraction(top_fraction));
    }
    let layout = params.config.layout()?;
    let n = layout.num_patches();
    if let Query::Patch(j) = query {
        if j >= n {
            return Err(ModelError::BadQuery { index: j, n });
        }
    }
    let g = Graph::<f32>::new();
    let vars = ModelVars::inject(&g, params);
    let patches_var = g.constant(patches.clone());
    let (vpt_var, vpt_cfg) = match vpt {
        Some((t, pc)) => (Some(g.constant(t.clone())), Some(pc)),
        None => (None, None),
    };
    let out = forward(&vars, &params.config, &patches_var, vpt_var.as_ref(), vpt_cfg, true)?;
    let attn = out.attention.expect("attention requested");
    let heads = params.config.heads;
    let seq_len = attn.shape()[2];
    // with deep VPT the final-layer sequence still carries the prompts
    let vpt_prefix = seq_len - 1 - n;
    let qpos = match query {
        Query::Cls => 0,
        Query::Patch(j) => 1 + vpt_prefix + j,
    };
    let count = (top_fraction * n as f64).ceil() as usize;
    let count = count.clamp(1, n);
    let batch = attn.shape()[0];
    let mut masks = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut scored: Vec<(usize, f32)> = (0..n)
                .map(|j| (j, attn[[b, h, qpos, 1 + vpt_prefix + j]]))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut mask = vec![false; n];
            for &(j, _) in scored.iter().take(count) {
                mask[j] = true;
            }
            per_head.push(mask);
        }
        masks.push(per_head);
    }
    Ok(masks)
}
