//! Loss terms and their weighted composition: instance-level InfoNCE,
//! supervised contrastive, cosine-softmax cross-entropy, teacher-student
//! self-distillation, and the mean-entropy regularizer.

use crate::autodiff::{Scalar, Var};
use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Large negative used to mask entries out of a row softmax.
const MASK: f64 = -1e30;
const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch of {0} gives no negatives; need at least 2 instances")]
    BatchTooSmall(usize),
    #[error("feature rows must be l2-normalized (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("label {label} outside the {classes} class slots")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Which entries form the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceDenominator {
    /// Positive pair plus all other instances from both views (standard).
    Full,
    /// Other instances only; the positive is excluded.
    NegativesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Supervised/unsupervised balance in `[0, 1]`.
    pub lambda: f64,
    /// Mean-entropy regularizer weight.
    pub epsilon: f64,
    pub tau_u: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub nce_denominator: NceDenominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.35,
            epsilon: 1.0,
            tau_u: 0.07,
            tau_c: 1.0,
            tau_s: 0.1,
            tau_t: 0.07,
            nce_denominator: NceDenominator::Full,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidConfig(format!("lambda {} not in [0,1]", self.lambda)));
        }
        if self.epsilon < 0.0 {
            return Err(LossError::InvalidConfig("epsilon must be >= 0".into()));
        }
        for (name, t) in [
            ("tau_u", self.tau_u),
            ("tau_c", self.tau_c),
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
        ] {
            if !(t > 0.0) {
                return Err(LossError::InvalidConfig(format!("{name} must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// A loss term that may be degenerate (no contributing anchors).
pub struct Term<F: Scalar> {
    pub value: Var<F>,
    pub degenerate: bool,
}

/// Two views of one mini-batch on the tape, with per-instance labels
/// (`None` marks unlabelled instances).
pub struct ViewVars<'a, F: Scalar> {
    pub features_a: &'a Var<F>,
    pub features_b: &'a Var<F>,
    pub cosines_a: &'a Var<F>,
    pub cosines_b: &'a Var<F>,
    pub labels: &'a [Option<usize>],
}

/// Numeric per-term breakdown of one composed loss evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub un_nce: f64,
    pub un_cls: f64,
    pub sup_nce: f64,
    pub sup_cls: f64,
    pub entropy: f64,
    pub total: f64,
    pub sup_nce_degenerate: bool,
    pub sup_cls_degenerate: bool,
}

fn check_normalized<F: Scalar>(f: &ArrayD<F>, what: &str) -> Result<(), LossError> {
    if f.ndim() != 2 {
        return Err(LossError::ShapeMismatch(format!("{what} must be (B, D)")));
    }
    for (row, r) in f.rows().into_iter().enumerate() {
        let norm = r.iter().map(|&x| (x.to_f64()).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(LossError::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Instance-discrimination InfoNCE over two views.
///
/// Every one of the `2B` rows serves as an anchor; its positive is the other
/// view of the same instance and the candidate set holds all other rows of
/// both views (the anchor itself is always excluded).
pub fn info_nce<F: Scalar>(
    features_a: &Var<F>,
    features_b: &Var<F>,
    tau_u: f64,
    denominator: NceDenominator,
) -> Result<Var<F>, LossError> {
    let (fa, fb) = (features_a.value(), features_b.value());
    check_normalized(&fa, "view A features")?;
    check_normalized(&fb, "view B features")?;
    if fa.shape() != fb.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "views disagree: {:?} vs {:?}",
            fa.shape(),
            fb.shape()
        )));
    }
    let b = fa.shape()[0];
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let rows = 2 * b;
    let all = Var::concat_axis(0, &[features_a, features_b]);
    let logits = all
        .matmul(&all.permute_axes(&[1, 0]))
        .mul_scalar(F::from_f64(1.0 / tau_u));
    let mut mask = Array2::<F>::zeros((rows, rows));
    let positive: Vec<usize> = (0..rows).map(|i| (i + b) % rows).collect();
    for i in 0..rows {
        mask[[i, i]] = F::from_f64(MASK);
        if denominator == NceDenominator::NegativesOnly {
            mask[[i, positive[i]]] = F::from_f64(MASK);
        }
    }
    let lse = logits.add_const(&mask.into_dyn()).logsumexp_rows();
    let pos = logits.gather_cols(&positive);
    Ok(lse.sub(&pos).mean_all())
}

/// Supervised contrastive loss over the labelled rows of both views
/// ("out" form: the positive average sits outside the log).
///
/// Positives of an anchor are all other same-label rows across both views;
/// candidates are all other labelled rows. Anchors without a positive are
/// skipped; a batch where no anchor has one is degenerate and scores zero.
pub fn sup_con<F: Scalar>(
    features_a: &Var<F>,
    features_b: &Var<F>,
    labels: &[Option<usize>],
    tau_c: f64,
) -> Result<Term<F>, LossError> {
    let (fa, fb) = (features_a.value(), features_b.value());
    check_normalized(&fa, "view A features")?;
    check_normalized(&fb, "view B features")?;
    if fa.shape() != fb.shape() || fa.shape()[0] != labels.len() {
        return Err(LossError::ShapeMismatch(format!(
            "features {:?}/{:?} vs {} labels",
            fa.shape(),
            fb.shape(),
            labels.len()
        )));
    }
    let lidx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let graph = features_a.graph().clone();
    let degenerate = |graph: &crate::autodiff::Graph<F>| Term {
        value: graph.scalar(F::zero()),
        degenerate: true,
    };
    if lidx.len() < 2 {
        return Ok(degenerate(&graph));
    }
    let mut anchor_labels: Vec<usize> = lidx.iter().map(|&i| labels[i].unwrap()).collect();
    anchor_labels.extend(anchor_labels.clone());
    let rows = anchor_labels.len();

    let mut weights = Array2::<F>::zeros((rows, rows));
    let mut anchor_w = Array1::<F>::zeros(rows);
    let mut contributing = 0usize;
    for i in 0..rows {
        let pos: Vec<usize> = (0..rows)
            .filter(|&j| j != i && anchor_labels[j] == anchor_labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        contributing += 1;
        anchor_w[i] = F::one();
        let w = F::from_f64(1.0 / pos.len() as f64);
        for j in pos {
            weights[[i, j]] = w;
        }
    }
    if contributing == 0 {
        return Ok(degenerate(&graph));
    }
    anchor_w.mapv_inplace(|x| x / F::from_f64(contributing as f64));

    let feats = Var::concat_axis(
        0,
        &[&features_a.select_rows(&lidx), &features_b.select_rows(&lidx)],
    );
    let logits = feats
        .matmul(&feats.permute_axes(&[1, 0]))
        .mul_scalar(F::from_f64(1.0 / tau_c));
    let mut mask = Array2::<F>::zeros((rows, rows));
    for i in 0..rows {
        mask[[i, i]] = F::from_f64(MASK);
    }
    let lse = logits.add_const(&mask.into_dyn()).logsumexp_rows();
    let mean_pos = logits.mul_const(&weights.into_dyn()).sum_axis1();
    let value = lse.sub(&mean_pos).dot_const(&anchor_w);
    Ok(Term {
        value,
        degenerate: false,
    })
}

/// Cosine-softmax cross-entropy on the labelled rows of both views.
pub fn cls_sup<F: Scalar>(
    cosines_a: &Var<F>,
    cosines_b: &Var<F>,
    labels: &[Option<usize>],
    tau_s: f64,
) -> Result<Term<F>, LossError> {
    let shape = cosines_a.shape();
    if shape != cosines_b.shape() || shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::ShapeMismatch(format!(
            "cosines {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let classes = shape[1];
    let lidx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if lidx.is_empty() {
        return Ok(Term {
            value: cosines_a.graph().scalar(F::zero()),
            degenerate: true,
        });
    }
    let mut cols = Vec::with_capacity(2 * lidx.len());
    for &i in &lidx {
        let label = labels[i].unwrap();
        if label >= classes {
            return Err(LossError::LabelOutOfRange { label, classes });
        }
        cols.push(label);
    }
    cols.extend(cols.clone());
    let logits = Var::concat_axis(
        0,
        &[&cosines_a.select_rows(&lidx), &cosines_b.select_rows(&lidx)],
    )
    .mul_scalar(F::from_f64(1.0 / tau_s));
    let value = logits.logsumexp_rows().sub(&logits.gather_cols(&cols)).mean_all();
    Ok(Term {
        value,
        degenerate: false,
    })
}

/// Sharpened teacher distribution as a plain array: `softmax(cosines / tau_t)`.
pub fn teacher_probs<F: Scalar>(cosines: &ArrayD<F>, tau_t: f64) -> ArrayD<F> {
    let rows = cosines.shape()[0];
    let cols = cosines.shape()[1];
    let mut out = cosines.clone();
    for i in 0..rows {
        let m = (0..cols)
            .map(|j| cosines[[i, j]].to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0f64;
        let mut e = vec![0.0f64; cols];
        for j in 0..cols {
            e[j] = (cosines[[i, j]].to_f64() / tau_t - m / tau_t).exp();
            s += e[j];
        }
        for j in 0..cols {
            out[[i, j]] = F::from_f64(e[j] / s);
        }
    }
    out
}

/// One direction of self-distillation: cross-entropy of the student softmax
/// (at `tau_s`) against the detached, sharpened teacher softmax (at `tau_t`).
/// Gradient never flows into the teacher branch.
pub fn distill_ce<F: Scalar>(
    teacher_cosines: &Var<F>,
    student_cosines: &Var<F>,
    tau_s: f64,
    tau_t: f64,
) -> Result<Var<F>, LossError> {
    if teacher_cosines.shape() != student_cosines.shape() {
        return Err(LossError::ShapeMismatch("teacher/student cosines disagree".into()));
    }
    let probs = teacher_probs(&teacher_cosines.value(), tau_t);
    distill_ce_fixed(&probs, student_cosines, tau_s)
}

/// Cross-entropy of the student softmax against an already-computed teacher
/// distribution. The teacher enters as data, never as a gradient path; the
/// finite-difference oracle drives this form with the teacher pinned at the
/// unperturbed parameters.
pub fn distill_ce_fixed<F: Scalar>(
    teacher: &ArrayD<F>,
    student_cosines: &Var<F>,
    tau_s: f64,
) -> Result<Var<F>, LossError> {
    if teacher.shape() != student_cosines.shape().as_slice() {
        return Err(LossError::ShapeMismatch("teacher/student cosines disagree".into()));
    }
    let logits = student_cosines.mul_scalar(F::from_f64(1.0 / tau_s));
    let log_probs = logits.sub_per_row(&logits.logsumexp_rows());
    Ok(log_probs.mul_const(teacher).sum_axis1().mean_all().neg())
}

/// Symmetric self-distillation across the two views: each view's detached
/// prediction teaches the other, and the two directions are averaged.
pub fn cls_selfdistill<F: Scalar>(
    cosines_a: &Var<F>,
    cosines_b: &Var<F>,
    tau_s: f64,
    tau_t: f64,
) -> Result<Var<F>, LossError> {
    let a_from_b = distill_ce(cosines_b, cosines_a, tau_s, tau_t)?;
    let b_from_a = distill_ce(cosines_a, cosines_b, tau_s, tau_t)?;
    Ok(a_from_b.add(&b_from_a).mul_scalar(F::from_f64(0.5)))
}

/// [`cls_selfdistill`] with both teacher distributions supplied by the caller.
pub fn cls_selfdistill_fixed<F: Scalar>(
    cosines_a: &Var<F>,
    cosines_b: &Var<F>,
    teacher_a: &ArrayD<F>,
    teacher_b: &ArrayD<F>,
    tau_s: f64,
) -> Result<Var<F>, LossError> {
    let a_from_b = distill_ce_fixed(teacher_b, cosines_a, tau_s)?;
    let b_from_a = distill_ce_fixed(teacher_a, cosines_b, tau_s)?;
    Ok(a_from_b.add(&b_from_a).mul_scalar(F::from_f64(0.5)))
}

/// Entropy of the batch-mean prediction over the concatenated views.
pub fn mean_entropy<F: Scalar>(
    cosines_a: &Var<F>,
    cosines_b: &Var<F>,
    tau_s: f64,
) -> Result<Var<F>, LossError> {
    if cosines_a.shape() != cosines_b.shape() {
        return Err(LossError::ShapeMismatch("view cosines disagree".into()));
    }
    if cosines_a.shape()[0] == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let mean_pred = Var::concat_axis(0, &[cosines_a, cosines_b])
        .mul_scalar(F::from_f64(1.0 / tau_s))
        .softmax_rows()
        .mean_axis0();
    Ok(mean_pred.mul(&mean_pred.ln()).sum_all().neg())
}

/// Weighted composition of all terms:
/// `(1-λ)(un_nce + un_cls) + λ(sup_nce + sup_cls) - ε·Δ`.
pub fn total_loss<F: Scalar>(
    batch: &ViewVars<'_, F>,
    config: &LossConfig,
) -> Result<(Var<F>, LossBreakdown), LossError> {
    total_loss_with_teachers(batch, config, None)
}

/// [`total_loss`] with optional externally-fixed self-distillation teachers.
/// Passing `None` sharpens and detaches the current view predictions, which
/// is the training path; fixed teachers exist for gradient oracles.
pub fn total_loss_with_teachers<F: Scalar>(
    batch: &ViewVars<'_, F>,
    config: &LossConfig,
    teachers: Option<(&ArrayD<F>, &ArrayD<F>)>,
) -> Result<(Var<F>, LossBreakdown), LossError> {
    config.validate()?;
    let un_nce = info_nce(batch.features_a, batch.features_b, config.tau_u, config.nce_denominator)?;
    let un_cls = match teachers {
        None => cls_selfdistill(batch.cosines_a, batch.cosines_b, config.tau_s, config.tau_t)?,
        Some((ta, tb)) => {
            cls_selfdistill_fixed(batch.cosines_a, batch.cosines_b, ta, tb, config.tau_s)?
        }
    };
    let sup_nce = sup_con(batch.features_a, batch.features_b, batch.labels, config.tau_c)?;
    let sup_cls = cls_sup(batch.cosines_a, batch.cosines_b, batch.labels, config.tau_s)?;
    let entropy = mean_entropy(batch.cosines_a, batch.cosines_b, config.tau_s)?;

    let lambda = F::from_f64(config.lambda);
    let one_minus = F::from_f64(1.0 - config.lambda);
    let total = un_nce
        .add(&un_cls)
        .mul_scalar(one_minus)
        .add(&sup_nce.value.add(&sup_cls.value).mul_scalar(lambda))
        .sub(&entropy.mul_scalar(F::from_f64(config.epsilon)));

    let breakdown = LossBreakdown {
        un_nce: un_nce.scalar_value().to_f64(),
        un_cls: un_cls.scalar_value().to_f64(),
        sup_nce: sup_nce.value.scalar_value().to_f64(),
        sup_cls: sup_cls.value.scalar_value().to_f64(),
        entropy: entropy.scalar_value().to_f64(),
        total: total.scalar_value().to_f64(),
        sup_nce_degenerate: sup_nce.degenerate,
        sup_cls_degenerate: sup_cls.degenerate,
    };
    Ok((total, breakdown))
}

/// Normalize rows of a raw matrix (helper for building loss inputs).
pub fn l2_normalize_rows_arr<F: Scalar>(a: &mut ArrayD<F>) {
    let cols = a.shape()[1];
    let rows = a.shape()[0];
    for i in 0..rows {
        let mut norm = F::zero();
        for j in 0..cols {
            let v = a[[i, j]];
            norm = norm + v * v;
        }
        let norm = norm.sqrt().max(F::from_f64(1e-12));
        for j in 0..cols {
            a[[i, j] ] = a[[i, j]] / norm;
        }
    }
}
