//! Checkpoint format: a text manifest (tensor name, shape, offset) plus one
//! flat little-endian 32-bit float blob. Round-trips bit-exactly, including
//! optimizer momentum and the iteration/epoch counters, so a resumed run
//! replays the identical remaining history.

use crate::model::{ModelParams, VitConfig};
use crate::prompts::{PromptConfig, PromptSet, SpatialKind};
use crate::schedule::{SgdState, TrainState};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const HEADER: &str = "sptnet-checkpoint v1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Write `<stem>.manifest` and `<stem>.bin`.
pub fn save_state(stem: &Path, state: &TrainState) -> Result<(), CkptError> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut manifest = String::new();
    manifest.push_str(HEADER);
    manifest.push('\n');
    manifest.push_str(&format!("meta iteration {}\n", state.iteration));
    manifest.push_str(&format!("meta epoch {}\n", state.epoch));
    let mc = &state.model.config;
    manifest.push_str(&format!("meta model.image {}\n", mc.image));
    manifest.push_str(&format!("meta model.patch {}\n", mc.patch));
    manifest.push_str(&format!("meta model.depth {}\n", mc.depth));
    manifest.push_str(&format!("meta model.dim {}\n", mc.dim));
    manifest.push_str(&format!("meta model.heads {}\n", mc.heads));
    manifest.push_str(&format!("meta model.mlp_ratio {}\n", mc.mlp_ratio));
    manifest.push_str(&format!("meta model.classes {}\n", mc.num_classes));
    manifest.push_str(&format!("meta model.proj_dim {}\n", mc.proj_dim));
    manifest.push_str(&format!("meta model.train_last_norm {}\n", mc.train_last_norm));
    let pc = &state.prompts.config;
    let spatial = match pc.spatial {
        SpatialKind::None => "none",
        SpatialKind::PerPatch => "per_patch",
        SpatialKind::Shared => "shared",
    };
    manifest.push_str(&format!("meta prompt.spatial {spatial}\n"));
    manifest.push_str(&format!("meta prompt.m {}\n", pc.m));
    manifest.push_str(&format!("meta prompt.global {}\n", pc.use_global));
    manifest.push_str(&format!("meta prompt.m_plus {}\n", pc.m_plus));
    manifest.push_str(&format!("meta prompt.vpt_len {}\n", pc.vpt_len));
    manifest.push_str(&format!("meta prompt.vpt_deep {}\n", pc.vpt_deep));

    let mut blob: Vec<f32> = Vec::new();
    let mut offset = 0usize;
    let mut tensor_line = |name: &str, t: &ArrayD<f32>, blob: &mut Vec<f32>| -> String {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let line = format!("tensor {name} {} {offset} {}\n", shape.join(","), t.len());
        offset += t.len();
        blob.extend(t.iter().copied());
        line
    };
    for (name, t) in &state.model.tensors {
        manifest.push_str(&tensor_line(&format!("model.{name}"), t, &mut blob));
    }
    state.prompts.for_each_tensor(|name, t| {
        manifest.push_str(&tensor_line(name, t, &mut blob));
    });
    for (name, t) in &state.opt.velocity {
        manifest.push_str(&tensor_line(&format!("opt.{name}"), t, &mut blob));
    }

    std::fs::write(manifest_path(stem), manifest)?;
    let mut bin = std::io::BufWriter::new(std::fs::File::create(blob_path(stem))?);
    for v in blob {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;
    Ok(())
}

struct RawCheckpoint {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, ArrayD<f32>>,
}

fn read_raw(stem: &Path) -> Result<RawCheckpoint, CkptError> {
    let file = std::fs::File::open(manifest_path(stem))?;
    let lines: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()?;
    if lines.first().map(String::as_str) != Some(HEADER) {
        return Err(CkptError::Malformed("missing header".into()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(blob_path(stem))?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(CkptError::Malformed("blob length not a multiple of 4".into()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut meta = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    for line in &lines[1..] {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        match fields.as_slice() {
            ["meta", key, value] => {
                meta.insert(key.to_string(), value.to_string());
            }
            ["tensor", name, shape, offset, len] => {
                let shape: Vec<usize> = if shape.is_empty() {
                    vec![]
                } else {
                    shape
                        .split(',')
                        .map(|d| d.parse().map_err(|_| CkptError::Malformed(format!("bad shape in {line}"))))
                        .collect::<Result<_, _>>()?
                };
                let offset: usize = offset
                    .parse()
                    .map_err(|_| CkptError::Malformed(format!("bad offset in {line}")))?;
                let len: usize = len
                    .parse()
                    .map_err(|_| CkptError::Malformed(format!("bad len in {line}")))?;
                if shape.iter().product::<usize>() != len || offset + len > values.len() {
                    return Err(CkptError::Malformed(format!("tensor bounds in {line}")));
                }
                let data = values[offset..offset + len].to_vec();
                tensors.insert(
                    name.to_string(),
                    ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(),
                );
            }
            _ => return Err(CkptError::Malformed(format!("unrecognized line: {line}"))),
        }
    }
    Ok(RawCheckpoint { meta, tensors })
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, CkptError> {
    meta.get(key)
        .ok_or_else(|| CkptError::Malformed(format!("missing meta {key}")))?
        .parse()
        .map_err(|_| CkptError::Malformed(format!("bad meta {key}")))
}

/// Load a full training state.
pub fn load_state(stem: &Path) -> Result<TrainState, CkptError> {
    let raw = read_raw(stem)?;
    let config = VitConfig {
        image: meta_parse(&raw.meta, "model.image")?,
        patch: meta_parse(&raw.meta, "model.patch")?,
        depth: meta_parse(&raw.meta, "model.depth")?,
        dim: meta_parse(&raw.meta, "model.dim")?,
        heads: meta_parse(&raw.meta, "model.heads")?,
        mlp_ratio: meta_parse(&raw.meta, "model.mlp_ratio")?,
        num_classes: meta_parse(&raw.meta, "model.classes")?,
        proj_dim: meta_parse(&raw.meta, "model.proj_dim")?,
        train_last_norm: meta_parse(&raw.meta, "model.train_last_norm")?,
    };
    let spatial = match raw.meta.get("prompt.spatial").map(String::as_str) {
        Some("none") => SpatialKind::None,
        Some("per_patch") => SpatialKind::PerPatch,
        Some("shared") => SpatialKind::Shared,
        other => return Err(CkptError::Malformed(format!("bad prompt.spatial {other:?}"))),
    };
    let prompt_config = PromptConfig {
        spatial,
        m: meta_parse(&raw.meta, "prompt.m")?,
        use_global: meta_parse(&raw.meta, "prompt.global")?,
        m_plus: meta_parse(&raw.meta, "prompt.m_plus")?,
        vpt_len: meta_parse(&raw.meta, "prompt.vpt_len")?,
        vpt_deep: meta_parse(&raw.meta, "prompt.vpt_deep")?,
    };

    let mut model_tensors = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    let mut prompts = PromptSet {
        config: prompt_config,
        spatial: None,
        global: None,
        vpt: None,
    };
    for (name, tensor) in raw.tensors {
        if let Some(rest) = name.strip_prefix("model.") {
            model_tensors.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("opt.") {
            velocity.insert(rest.to_string(), tensor);
        } else if name == "prompt.spatial" {
            prompts.spatial = Some(tensor);
        } else if name == "prompt.global" {
            prompts.global = Some(tensor);
        } else if name == "prompt.vpt" {
            prompts.vpt = Some(tensor);
        } else {
            return Err(CkptError::Malformed(format!("unexpected tensor {name}")));
        }
    }
    let model = ModelParams {
        config,
        tensors: model_tensors,
    };
    Ok(TrainState {
        model,
        prompts,
        opt: SgdState { velocity },
        iteration: meta_parse(&raw.meta, "iteration")?,
        epoch: meta_parse(&raw.meta, "epoch")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_state() -> TrainState {
        let config = VitConfig {
            image: 16,
            patch: 8,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 1.5,
            num_classes: 4,
            proj_dim: 6,
            train_last_norm: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelParams::init(config, &mut rng).unwrap();
        let pc = PromptConfig {
            spatial: SpatialKind::Shared,
            m: 1,
            use_global: true,
            m_plus: 3,
            vpt_len: 2,
            vpt_deep: false,
        };
        let prompts =
            PromptSet::init(pc, &config.layout().unwrap(), config.depth, config.dim, &mut rng).unwrap();
        let mut state = TrainState::new(model, prompts);
        state.iteration = 77;
        state.epoch = 5;
        state.opt.velocity.insert(
            "head.fc1.w".into(),
            ArrayD::from_elem(IxDyn(&[8, 6]), 0.25f32),
        );
        state
    }

    #[test]
    fn round_trip_bit_exact() {
        let state = sample_state();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_state(&stem, &state).unwrap();
        let loaded = load_state(&stem).unwrap();
        assert_eq!(loaded.iteration, 77);
        assert_eq!(loaded.epoch, 5);
        assert_eq!(loaded.model.config, state.model.config);
        assert_eq!(loaded.prompts.config, state.prompts.config);
        for (name, t) in &state.model.tensors {
            let l = &loaded.model.tensors[name];
            assert_eq!(
                t.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                l.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{name}"
            );
        }
        assert_eq!(loaded.prompts.spatial, state.prompts.spatial);
        assert_eq!(loaded.prompts.global, state.prompts.global);
        assert_eq!(loaded.prompts.vpt, state.prompts.vpt);
        assert_eq!(loaded.opt.velocity, state.opt.velocity);

        // resaving the loaded state produces identical bytes
        let stem2 = dir.path().join("ckpt2");
        save_state(&stem2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(manifest_path(&stem)).unwrap(),
            std::fs::read(manifest_path(&stem2)).unwrap()
        );
        assert_eq!(
            std::fs::read(blob_path(&stem)).unwrap(),
            std::fs::read(blob_path(&stem2)).unwrap()
        );
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_state(&dir.path().join("absent")).unwrap_err();
        assert!(matches!(err, CkptError::Io(_)));
    }
}
