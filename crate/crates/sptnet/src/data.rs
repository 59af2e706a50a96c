//! Synthetic dataset generation, GCD split construction, the two-view
//! augmentation pipeline, and the on-disk dataset format.
//!
//! Label hygiene: the training side only ever sees `Option<usize>` labels
//! (`None` marks unlabelled instances). Hidden ground-truth labels for the
//! unlabelled pool live in a separate [`EvalLabels`] value that only the
//! evaluation path consumes.

use crate::geometry::CHANNELS;
use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("classes not separable: min template distance {min_dist:.4} <= 3 sigma = {threshold:.4}")]
    Inseparable { min_dist: f64, threshold: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
}

/// Generative description of a synthetic desk-scale dataset: one smooth
/// spatial template per class plus i.i.d. pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Square image size.
    pub image: usize,
    pub classes: usize,
    pub old_classes: usize,
    pub instances_per_class: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

/// A fully-labelled dataset (labels are hidden downstream by `make_split`).
#[derive(Debug)]
pub struct Dataset {
    pub image: usize,
    pub classes: usize,
    pub old_classes: usize,
    /// `(N, 3, H, W)`.
    pub images: ArrayD<f32>,
    pub labels: Vec<usize>,
    /// `(classes, 3, H, W)` clean class templates (kept for oracle tests).
    pub templates: ArrayD<f32>,
}

/// Training-visible side of a GCD split.
pub struct TrainSet {
    pub image: usize,
    pub num_classes: usize,
    pub old_classes: usize,
    /// `(N, 3, H, W)`, all instances (labelled and unlabelled).
    pub images: ArrayD<f32>,
    /// `Some(label)` only for the labelled subset; labels lie in the old set.
    pub labels: Vec<Option<usize>>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn instance(&self, i: usize) -> ArrayViewD<'_, f32> {
        self.images.index_axis(ndarray::Axis(0), i)
    }
}

/// Hidden ground truth for the unlabelled pool, for evaluation only.
pub struct EvalLabels {
    /// `(instance index, true label)` for every unlabelled instance.
    pub hidden: Vec<(usize, usize)>,
    pub old_classes: usize,
    pub num_classes: usize,
}

pub struct GcdSplit {
    pub train: TrainSet,
    pub eval: EvalLabels,
    /// True when the unlabelled pool is empty.
    pub degenerate: bool,
}

/// Derive an independent stream seed from tagged parts.
pub fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the concatenated parts
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Generate the synthetic dataset: low-frequency cosine-basis templates
/// (zero mean, unit RMS) plus Gaussian pixel noise. Classes must stay
/// separable: the minimum pairwise template distance has to exceed 3 sigma.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 || spec.old_classes == 0 || spec.old_classes > spec.classes {
        return Err(DataError::InvalidSpec(format!(
            "need 2+ classes and 1..=classes old classes, got {}/{}",
            spec.old_classes, spec.classes
        )));
    }
    if spec.instances_per_class == 0 || spec.image == 0 {
        return Err(DataError::InvalidSpec("empty image or class".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(DataError::InvalidSpec(format!("noise {} must be >= 0", spec.noise)));
    }
    let hw = spec.image;
    let pixels = CHANNELS * hw * hw;

    // low-frequency basis: cos(pi u y / H) * cos(pi v x / W), u,v <= 3
    const FREQS: usize = 4;
    let mut templates = ArrayD::<f32>::zeros(IxDyn(&[spec.classes, CHANNELS, hw, hw]));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 2]));
    for c in 0..spec.classes {
        let mut coeff = [[[0.0f64; FREQS]; FREQS]; CHANNELS];
        for ch_row in coeff.iter_mut() {
            for u_row in ch_row.iter_mut() {
                for v in u_row.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut raw = vec![0.0f64; pixels];
        for ch in 0..CHANNELS {
            for y in 0..hw {
                for x in 0..hw {
                    let mut v = 0.0;
                    for (u, urow) in coeff[ch].iter().enumerate() {
                        for (w, &a) in urow.iter().enumerate() {
                            let fy = (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / hw as f64).cos();
                            let fx = (std::f64::consts::PI * w as f64 * (x as f64 + 0.5) / hw as f64).cos();
                            v += a * fy * fx;
                        }
                    }
                    raw[ch * hw * hw + y * hw + x] = v;
                    sum += v;
                    sumsq += v * v;
                }
            }
        }
        let mean = sum / pixels as f64;
        let rms = ((sumsq / pixels as f64) - mean * mean).sqrt().max(1e-9);
        for (k, &v) in raw.iter().enumerate() {
            let ch = k / (hw * hw);
            let rem = k % (hw * hw);
            templates[[c, ch, rem / hw, rem % hw]] = (((v - mean) / rms) as f32).clamp(-6.0, 6.0);
        }
    }

    // separability: min pairwise distance must clear 3 sigma
    let mut min_dist = f64::INFINITY;
    for a in 0..spec.classes {
        for b in a + 1..spec.classes {
            let mut d = 0.0f64;
            for ch in 0..CHANNELS {
                for y in 0..hw {
                    for x in 0..hw {
                        let diff = (templates[[a, ch, y, x]] - templates[[b, ch, y, x]]) as f64;
                        d += diff * diff;
                    }
                }
            }
            min_dist = min_dist.min(d.sqrt());
        }
    }
    let threshold = 3.0 * spec.noise;
    if min_dist <= threshold {
        return Err(DataError::Inseparable { min_dist, threshold });
    }

    let n = spec.classes * spec.instances_per_class;
    let mut images = ArrayD::<f32>::zeros(IxDyn(&[n, CHANNELS, hw, hw]));
    let mut labels = Vec::with_capacity(n);
    let normal = Normal::new(0.0f64, spec.noise.max(0.0)).unwrap();
    for c in 0..spec.classes {
        for i in 0..spec.instances_per_class {
            let id = c * spec.instances_per_class + i;
            labels.push(c);
            let mut nrng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 1, c as u64, i as u64]));
            for ch in 0..CHANNELS {
                for y in 0..hw {
                    for x in 0..hw {
                        let noise = if spec.noise > 0.0 { normal.sample(&mut nrng) as f32 } else { 0.0 };
                        images[[id, ch, y, x]] = templates[[c, ch, y, x]] + noise;
                    }
                }
            }
        }
    }
    Ok(Dataset {
        image: hw,
        classes: spec.classes,
        old_classes: spec.old_classes,
        images,
        labels,
        templates,
    })
}

/// Partition a labelled dataset into the GCD split: a labelled subset drawn
/// only from the first `old_classes` classes at fraction `rho` per class,
/// with everything else unlabelled.
pub fn make_split(dataset: &Dataset, old_classes: usize, rho: f64, seed: u64) -> Result<GcdSplit, DataError> {
    if old_classes == 0 || old_classes > dataset.classes {
        return Err(DataError::InvalidSpec(format!(
            "old class count {old_classes} out of range 1..={}",
            dataset.classes
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(DataError::InvalidSpec(format!("rho {rho} outside (0, 1]")));
    }
    let n = dataset.labels.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    for c in 0..old_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3, c as u64]));
        members.shuffle(&mut rng);
        let take = ((members.len() as f64) * rho).round() as usize;
        for &i in members.iter().take(take) {
            labels[i] = Some(c);
        }
    }
    let hidden: Vec<(usize, usize)> = (0..n)
        .filter(|&i| labels[i].is_none())
        .map(|i| (i, dataset.labels[i]))
        .collect();
    let degenerate = hidden.is_empty();
    Ok(GcdSplit {
        train: TrainSet {
            image: dataset.image,
            num_classes: dataset.classes,
            old_classes,
            images: dataset.images.clone(),
            labels,
        },
        eval: EvalLabels {
            hidden,
            old_classes,
            num_classes: dataset.classes,
        },
        degenerate,
    })
}

/// Stochastic view augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    pub enabled: bool,
    /// Area-scale bounds for the crop+pad translation (no interpolation).
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip: bool,
    /// Per-channel multiplicative/additive jitter amplitude.
    pub jitter: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            enabled: true,
            crop_min: 0.7,
            crop_max: 1.0,
            flip: true,
            jitter: 0.1,
        }
    }
}

fn augment_one(image: &ArrayViewD<'_, f32>, config: &AugConfig, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let h = image.shape()[1];
    let w = image.shape()[2];
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[CHANNELS, h, w]));

    // crop+pad: lift a random sub-rectangle and drop it at a random offset
    let scale = rng.random_range(config.crop_min..=config.crop_max);
    let side = scale.sqrt();
    let ch_ = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let sy = rng.random_range(0..=(h - ch_));
    let sx = rng.random_range(0..=(w - cw));
    let dy = rng.random_range(0..=(h - ch_));
    let dx = rng.random_range(0..=(w - cw));
    for c in 0..CHANNELS {
        for y in 0..ch_ {
            for x in 0..cw {
                out[[c, dy + y, dx + x]] = image[[c, sy + y, sx + x]];
            }
        }
    }

    if config.flip && rng.random_bool(0.5) {
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w / 2 {
                    let tmp = out[[c, y, x]];
                    out[[c, y, x]] = out[[c, y, w - 1 - x]];
                    out[[c, y, w - 1 - x]] = tmp;
                }
            }
        }
    }

    if config.jitter > 0.0 {
        for c in 0..CHANNELS {
            let gain = 1.0 + rng.random_range(-config.jitter..=config.jitter) as f32;
            let bias = rng.random_range(-config.jitter..=config.jitter) as f32;
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] = out[[c, y, x]] * gain + bias;
                }
            }
        }
    }
    out
}

/// Two independently augmented views of one instance, deterministic per
/// `(seed, instance, epoch)`.
pub fn two_views(
    image: &ArrayViewD<'_, f32>,
    config: &AugConfig,
    seed: u64,
    instance: u64,
    epoch: u64,
) -> (ArrayD<f32>, ArrayD<f32>) {
    if !config.enabled {
        return (image.to_owned(), image.to_owned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 4, instance, epoch]));
    let a = augment_one(image, config, &mut rng);
    let b = augment_one(image, config, &mut rng);
    (a, b)
}

/// Deterministic per-epoch batch order. Labelled and unlabelled instances are
/// shuffled separately and dealt proportionally, so every batch carries both
/// at roughly the global ratio.
pub fn epoch_batches(labels: &[Option<usize>], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0);
    let mut labelled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let mut unlabelled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 5, epoch]));
    labelled.shuffle(&mut rng);
    unlabelled.shuffle(&mut rng);
    let n = labels.len();
    let num_batches = n.div_ceil(batch_size);
    let mut batches = Vec::with_capacity(num_batches);
    for k in 0..num_batches {
        let lab_lo = k * labelled.len() / num_batches;
        let lab_hi = (k + 1) * labelled.len() / num_batches;
        let unl_lo = k * unlabelled.len() / num_batches;
        let unl_hi = (k + 1) * unlabelled.len() / num_batches;
        let mut batch: Vec<usize> = labelled[lab_lo..lab_hi].to_vec();
        batch.extend_from_slice(&unlabelled[unl_lo..unl_hi]);
        batches.push(batch);
    }
    batches.retain(|b| !b.is_empty());
    batches
}

// ---- on-disk format: text manifest + flat little-endian f32 blob ----

const MANIFEST_HEADER: &str = "sptnet-dataset v1";
const UNLABELLED: &str = "UNLABELLED";

/// Write the split as `manifest.txt` + `images.bin` under `dir`.
pub fn save_split(dir: &Path, split: &GcdSplit) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let train = &split.train;
    let hw = train.image;
    let instance_bytes = CHANNELS * hw * hw * 4;

    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
    let flat = train.images.as_slice().expect("standard layout");
    for &v in flat {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;

    let mut man = String::new();
    man.push_str(MANIFEST_HEADER);
    man.push('\n');
    man.push_str(&format!("image {hw}\n"));
    man.push_str(&format!("classes {}\n", train.num_classes));
    man.push_str(&format!("old_classes {}\n", train.old_classes));
    man.push_str(&format!("count {}\n", train.len()));
    man.push_str("instances\n");
    for (i, label) in train.labels.iter().enumerate() {
        let tag = match label {
            Some(c) => c.to_string(),
            None => UNLABELLED.to_string(),
        };
        man.push_str(&format!("{i} {} {tag}\n", i * instance_bytes));
    }
    man.push_str("hidden\n");
    for &(i, label) in &split.eval.hidden {
        man.push_str(&format!("{i} {label}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), man)?;
    Ok(())
}

struct ManifestHead {
    image: usize,
    classes: usize,
    old_classes: usize,
    count: usize,
    lines: Vec<String>,
    instances_at: usize,
    hidden_at: usize,
}

fn read_manifest(dir: &Path) -> Result<ManifestHead, DataError> {
    let file = std::fs::File::open(dir.join("manifest.txt"))?;
    let lines: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()?;
    if lines.first().map(String::as_str) != Some(MANIFEST_HEADER) {
        return Err(DataError::Malformed("missing header".into()));
    }
    let field = |name: &str, idx: usize| -> Result<usize, DataError> {
        let line = lines
            .get(idx)
            .ok_or_else(|| DataError::Malformed(format!("missing {name}")))?;
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| DataError::Malformed(format!("bad {name} line")))?;
        if key != name {
            return Err(DataError::Malformed(format!("expected {name}, got {key}")));
        }
        value
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad {name} value")))
    };
    let image = field("image", 1)?;
    let classes = field("classes", 2)?;
    let old_classes = field("old_classes", 3)?;
    let count = field("count", 4)?;
    let instances_at = lines
        .iter()
        .position(|l| l == "instances")
        .ok_or_else(|| DataError::Malformed("missing instances section".into()))?;
    let hidden_at = lines
        .iter()
        .position(|l| l == "hidden")
        .ok_or_else(|| DataError::Malformed("missing hidden section".into()))?;
    Ok(ManifestHead {
        image,
        classes,
        old_classes,
        count,
        lines,
        instances_at,
        hidden_at,
    })
}

/// Load the training-visible side (never touches the hidden section).
pub fn load_train(dir: &Path) -> Result<TrainSet, DataError> {
    let head = read_manifest(dir)?;
    let hw = head.image;
    let instance_vals = CHANNELS * hw * hw;
    let mut labels = vec![None; head.count];
    for line in &head.lines[head.instances_at + 1..head.hidden_at] {
        let mut parts = line.split(' ');
        let id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Malformed(format!("bad instance line: {line}")))?;
        let _offset: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Malformed(format!("bad offset: {line}")))?;
        let tag = parts
            .next()
            .ok_or_else(|| DataError::Malformed(format!("missing label: {line}")))?;
        if id >= head.count {
            return Err(DataError::Malformed(format!("instance id {id} out of range")));
        }
        labels[id] = if tag == UNLABELLED {
            None
        } else {
            Some(
                tag.parse()
                    .map_err(|_| DataError::Malformed(format!("bad label: {line}")))?,
            )
        };
    }

    let mut file = std::fs::File::open(dir.join("images.bin"))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != head.count * instance_vals * 4 {
        return Err(DataError::Malformed(format!(
            "images.bin holds {} bytes, expected {}",
            bytes.len(),
            head.count * instance_vals * 4
        )));
    }
    let mut values = Vec::with_capacity(head.count * instance_vals);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let images = ArrayD::from_shape_vec(IxDyn(&[head.count, CHANNELS, hw, hw]), values).unwrap();
    Ok(TrainSet {
        image: hw,
        num_classes: head.classes,
        old_classes: head.old_classes,
        images,
        labels,
    })
}

/// Load only the hidden ground truth (evaluation side).
pub fn load_eval_labels(dir: &Path) -> Result<EvalLabels, DataError> {
    let head = read_manifest(dir)?;
    let mut hidden = Vec::new();
    for line in &head.lines[head.hidden_at + 1..] {
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(' ')
            .ok_or_else(|| DataError::Malformed(format!("bad hidden line: {line}")))?;
        hidden.push((
            id.parse()
                .map_err(|_| DataError::Malformed(format!("bad hidden id: {line}")))?,
            label
                .parse()
                .map_err(|_| DataError::Malformed(format!("bad hidden label: {line}")))?,
        ));
    }
    Ok(EvalLabels {
        hidden,
        old_classes: head.old_classes,
        num_classes: head.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> SyntheticSpec {
        SyntheticSpec {
            image: 16,
            classes: 6,
            old_classes: 3,
            instances_per_class: 20,
            noise: 0.15,
            seed: 11,
        }
    }

    fn nearest_template_acc(ds: &Dataset) -> f64 {
        let n = ds.labels.len();
        let hw = ds.image;
        let mut hits = 0usize;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..ds.classes {
                let mut d = 0.0f64;
                for ch in 0..CHANNELS {
                    for y in 0..hw {
                        for x in 0..hw {
                            let diff = (ds.images[[i, ch, y, x]] - ds.templates[[c, ch, y, x]]) as f64;
                            d += diff * diff;
                        }
                    }
                }
                if d < best.0 {
                    best = (d, c);
                }
            }
            hits += (best.1 == ds.labels[i]) as usize;
        }
        hits as f64 / n as f64
    }

    #[test]
    fn synthetic_counts_and_learnability() {
        let ds = gen_synthetic(&toy_spec()).unwrap();
        assert_eq!(ds.labels.len(), 120);
        for c in 0..6 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 20);
        }
        // noiseless data classifies perfectly by nearest template
        let clean = gen_synthetic(&SyntheticSpec { noise: 0.0, ..toy_spec() }).unwrap();
        assert_eq!(nearest_template_acc(&clean), 1.0);
        // moderate noise stays comfortably learnable
        assert!(nearest_template_acc(&ds) >= 0.95);
    }

    #[test]
    fn synthetic_rejects_inseparable_noise() {
        let err = gen_synthetic(&SyntheticSpec { noise: 40.0, ..toy_spec() }).unwrap_err();
        assert!(matches!(err, DataError::Inseparable { .. }));
    }

    #[test]
    fn split_counts_balanced() {
        // 10 classes, 100 per class, half labelled from the first 5
        let spec = SyntheticSpec {
            image: 8,
            classes: 10,
            old_classes: 5,
            instances_per_class: 100,
            noise: 0.1,
            seed: 3,
        };
        let ds = gen_synthetic(&spec).unwrap();
        let split = make_split(&ds, 5, 0.5, 7).unwrap();
        let labelled = split.train.labels.iter().filter(|l| l.is_some()).count();
        assert_eq!(labelled, 250);
        assert_eq!(split.eval.hidden.len(), 750);
        assert!(!split.degenerate);
        // labelled labels never leave the old set, balanced per class
        for c in 0..5 {
            let count = split
                .train
                .labels
                .iter()
                .filter(|l| **l == Some(c))
                .count();
            assert_eq!(count, 50);
        }
        assert!(split.train.labels.iter().flatten().all(|&c| c < 5));
        // hidden side covers all ten classes
        let mut seen = vec![false; 10];
        for &(_, c) in &split.eval.hidden {
            seen[c] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn split_degenerate_and_seed_behavior() {
        let ds = gen_synthetic(&toy_spec()).unwrap();
        let full = make_split(&ds, 6, 1.0, 1).unwrap();
        assert!(full.degenerate);
        assert!(full.eval.hidden.is_empty());

        assert!(make_split(&ds, 0, 0.5, 1).is_err());
        assert!(make_split(&ds, 7, 0.5, 1).is_err());
        assert!(make_split(&ds, 3, 1.5, 1).is_err());

        // different seeds move membership but keep per-class counts
        let a = make_split(&ds, 3, 0.5, 1).unwrap();
        let mut any_difference = false;
        for seed in 2..12 {
            let b = make_split(&ds, 3, 0.5, seed).unwrap();
            for c in 0..3 {
                let ca = a.train.labels.iter().filter(|l| **l == Some(c)).count();
                let cb = b.train.labels.iter().filter(|l| **l == Some(c)).count();
                assert_eq!(ca, cb);
            }
            any_difference |= a.train.labels != b.train.labels;
        }
        assert!(any_difference);

        // same seed reproduces the same membership
        let c = make_split(&ds, 3, 0.5, 1).unwrap();
        assert_eq!(a.train.labels, c.train.labels);
    }

    #[test]
    fn two_views_deterministic_and_shaped() {
        let ds = gen_synthetic(&toy_spec()).unwrap();
        let img = ds.images.index_axis(ndarray::Axis(0), 5);
        let config = AugConfig {
            crop_min: 0.3,
            crop_max: 1.0,
            ..AugConfig::default()
        };
        for draw in 0..100 {
            let (a, b) = two_views(&img, &config, 9, 5, draw);
            assert_eq!(a.shape(), &[CHANNELS, 16, 16]);
            assert_eq!(b.shape(), &[CHANNELS, 16, 16]);
            assert!(a.iter().all(|v| v.is_finite()));
            assert!(b.iter().all(|v| v.is_finite()));
        }
        let (a1, b1) = two_views(&img, &config, 9, 5, 0);
        let (a2, b2) = two_views(&img, &config, 9, 5, 0);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        // views differ from each other under augmentation
        assert_ne!(a1, b1);

        let off = AugConfig {
            enabled: false,
            ..AugConfig::default()
        };
        let (a, b) = two_views(&img, &off, 9, 5, 0);
        assert_eq!(a, img.to_owned());
        assert_eq!(b, img.to_owned());
    }

    #[test]
    fn batches_are_stratified_and_cover_everything() {
        let labels: Vec<Option<usize>> = (0..100)
            .map(|i| (i % 4 == 0).then_some(0usize))
            .collect();
        let batches = epoch_batches(&labels, 20, 1, 0);
        let mut seen = vec![false; 100];
        for batch in &batches {
            let lab = batch.iter().filter(|&&i| labels[i].is_some()).count();
            // global ratio is 25%; every batch of 20 carries 5 labelled
            assert_eq!(lab, 5);
            for &i in batch {
                assert!(!seen[i], "instance repeated within epoch");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // determinism per (seed, epoch); new epoch reshuffles
        assert_eq!(batches, epoch_batches(&labels, 20, 1, 0));
        assert_ne!(batches, epoch_batches(&labels, 20, 1, 1));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = gen_synthetic(&toy_spec()).unwrap();
        let split = make_split(&ds, 3, 0.5, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_split(dir.path(), &split).unwrap();

        let train = load_train(dir.path()).unwrap();
        assert_eq!(train.labels, split.train.labels);
        assert_eq!(train.images, split.train.images);
        assert_eq!(train.old_classes, 3);

        let eval = load_eval_labels(dir.path()).unwrap();
        assert_eq!(eval.hidden, split.eval.hidden);

        // byte-identical on re-save
        let before = std::fs::read(dir.path().join("manifest.txt")).unwrap();
        save_split(dir.path(), &split).unwrap();
        let after = std::fs::read(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(before, after);
    }
}
