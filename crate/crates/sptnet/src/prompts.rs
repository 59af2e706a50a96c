//! Learnable data parameters: spatial per-patch border prompts (optionally
//! shared across patches), a global image-border prompt, and VPT token
//! prompts. Stored compactly; scattered into pixel space on attach.

use crate::autodiff::{Graph, Scalar, Var};
use crate::geometry::{
    attach_global_var, attach_spatial_var, count_global_params, count_spatial_params, patchify_var,
    GeometryError, PatchLayout,
};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Spatial prompt variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialKind {
    None,
    PerPatch,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub spatial: SpatialKind,
    /// Patch border width m.
    pub m: usize,
    pub use_global: bool,
    /// Image border width m⁺.
    pub m_plus: usize,
    /// VPT tokens per layer; 0 disables VPT.
    pub vpt_len: usize,
    /// Deep VPT inserts (and strips) prompts at every layer; shallow inserts
    /// them once before the first layer.
    pub vpt_deep: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            spatial: SpatialKind::PerPatch,
            m: 1,
            use_global: true,
            m_plus: 30,
            vpt_len: 0,
            vpt_deep: true,
        }
    }
}

/// Parameter budget per prompt kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub spatial: usize,
    pub global: usize,
    pub vpt: usize,
    pub total: usize,
}

impl PromptConfig {
    /// Exact learnable parameter counts for the enabled prompt kinds.
    pub fn budget(
        &self,
        layout: &PatchLayout,
        depth: usize,
        dim: usize,
    ) -> Result<PromptBudget, GeometryError> {
        let spatial = match self.spatial {
            SpatialKind::None => 0,
            SpatialKind::PerPatch => count_spatial_params(
                layout.num_patches(),
                layout.patch_h,
                layout.patch_w,
                self.m,
                false,
            )?,
            SpatialKind::Shared => {
                count_spatial_params(layout.num_patches(), layout.patch_h, layout.patch_w, self.m, true)?
            }
        };
        let global = if self.use_global {
            count_global_params(layout.img_h, layout.img_w, self.m_plus)?
        } else {
            0
        };
        let vpt = if self.vpt_len > 0 {
            let layers = if self.vpt_deep { depth } else { 1 };
            layers * self.vpt_len * dim
        } else {
            0
        };
        Ok(PromptBudget {
            spatial,
            global,
            vpt,
            total: spatial + global + vpt,
        })
    }

    pub fn any_enabled(&self) -> bool {
        self.spatial != SpatialKind::None || self.use_global || self.vpt_len > 0
    }
}

/// Learnable prompt values, stored compactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub config: PromptConfig,
    /// `(n, c_m)` or `(1, c_m)` for the shared variant.
    pub spatial: Option<ArrayD<f32>>,
    /// `(c⁺,)`.
    pub global: Option<ArrayD<f32>>,
    /// `(layers, vpt_len, dim)`.
    pub vpt: Option<ArrayD<f32>>,
}

const INIT_RANGE: f32 = 0.03;

impl PromptSet {
    /// Initialize enabled prompts uniformly in `[-0.03, 0.03]`.
    pub fn init(
        config: PromptConfig,
        layout: &PatchLayout,
        depth: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, GeometryError> {
        let budget = config.budget(layout, depth, dim)?;
        let mut uniform = |shape: &[usize]| {
            ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        };
        let spatial = match config.spatial {
            SpatialKind::None => None,
            SpatialKind::PerPatch => {
                let c_m = budget.spatial / layout.num_patches();
                Some(uniform(&[layout.num_patches(), c_m]))
            }
            SpatialKind::Shared => Some(uniform(&[1, budget.spatial])),
        };
        let global = config.use_global.then(|| uniform(&[budget.global]));
        let vpt = (config.vpt_len > 0).then(|| {
            let layers = if config.vpt_deep { depth } else { 1 };
            uniform(&[layers, config.vpt_len, dim])
        });
        Ok(PromptSet {
            config,
            spatial,
            global,
            vpt,
        })
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &ArrayD<f32>)) {
        if let Some(t) = &self.spatial {
            f("prompt.spatial", t);
        }
        if let Some(t) = &self.global {
            f("prompt.global", t);
        }
        if let Some(t) = &self.vpt {
            f("prompt.vpt", t);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut ArrayD<f32>)) {
        if let Some(t) = &mut self.spatial {
            f("prompt.spatial", t);
        }
        if let Some(t) = &mut self.global {
            f("prompt.global", t);
        }
        if let Some(t) = &mut self.vpt {
            f("prompt.vpt", t);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.for_each_tensor(|_, t| total += t.len());
        total
    }
}

/// Prompt tensors injected on a tape.
pub struct PromptVars<F: Scalar> {
    pub spatial: Option<Var<F>>,
    pub global: Option<Var<F>>,
    pub vpt: Option<Var<F>>,
}

impl<F: Scalar> PromptVars<F> {
    pub fn inject(g: &Graph<F>, prompts: &PromptSet) -> Self {
        let conv = |t: &ArrayD<f32>| g.input(t.mapv(|x| F::from_f64(x as f64)));
        PromptVars {
            spatial: prompts.spatial.as_ref().map(conv),
            global: prompts.global.as_ref().map(conv),
            vpt: prompts.vpt.as_ref().map(conv),
        }
    }

    /// Compose the prompted patch view of a raw image batch: optional global
    /// border add, patchify, optional spatial border add.
    pub fn prompted_patches(
        &self,
        images: &Var<F>,
        layout: &PatchLayout,
        config: &PromptConfig,
    ) -> Result<Var<F>, GeometryError> {
        let with_global = match &self.global {
            Some(gp) => attach_global_var(images, gp, layout, config.m_plus)?,
            None => images.clone(),
        };
        let patches = patchify_var(&with_global, layout)?;
        match &self.spatial {
            Some(sp) => attach_spatial_var(&patches, sp, layout, config.m),
            None => Ok(patches),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn budget_matches_storage() {
        let layout = PatchLayout::new(32, 32, 8, 8).unwrap();
        for spatial in [SpatialKind::None, SpatialKind::PerPatch, SpatialKind::Shared] {
            for use_global in [false, true] {
                for vpt_len in [0usize, 3] {
                    let config = PromptConfig {
                        spatial,
                        m: 1,
                        use_global,
                        m_plus: 4,
                        vpt_len,
                        vpt_deep: true,
                    };
                    let budget = config.budget(&layout, 2, 16).unwrap();
                    let mut rng = ChaCha8Rng::seed_from_u64(1);
                    let set = PromptSet::init(config, &layout, 2, 16, &mut rng).unwrap();
                    assert_eq!(set.num_params(), budget.total);
                }
            }
        }
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let layout = PatchLayout::new(16, 16, 8, 8).unwrap();
        let config = PromptConfig {
            spatial: SpatialKind::PerPatch,
            m: 1,
            use_global: true,
            m_plus: 2,
            vpt_len: 2,
            vpt_deep: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = PromptSet::init(config, &layout, 3, 8, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let b = PromptSet::init(config, &layout, 3, 8, &mut rng).unwrap();
        assert_eq!(a, b);
        a.for_each_tensor(|_, t| {
            assert!(t.iter().all(|v| v.abs() <= INIT_RANGE));
        });
        assert_eq!(a.vpt.as_ref().unwrap().shape(), &[1, 2, 8]);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let layout = PatchLayout::new(16, 16, 4, 4).unwrap();
        let config = PromptConfig {
            spatial: SpatialKind::PerPatch,
            m: 2, // 2m = 4 >= min(h, w)
            use_global: false,
            m_plus: 30,
            vpt_len: 0,
            vpt_deep: true,
        };
        assert!(config.budget(&layout, 2, 8).is_err());
    }
}
