//! Patch decomposition and additive pixel-border prompts.
//!
//! Images are split into an exact grid of patches (row-major). Prompts are
//! stored compactly: only the border entries exist as parameters, and they are
//! scattered into patch- or image-shaped buffers when attached. Compact
//! border ordering is channel-major, then top rows, bottom rows, remaining
//! left columns, remaining right columns, row-major within each band. The
//! ordering is part of the checkpoint format.

use crate::autodiff::{Scalar, Var};
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("image {h}x{w} is not divisible by patch {ph}x{pw}")]
    NotDivisible { h: usize, w: usize, ph: usize, pw: usize },
    #[error("border width {m} too large for {h}x{w} (need 2m < min(h, w))")]
    BorderTooWide { m: usize, h: usize, w: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

/// Image and patch extents for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub img_h: usize,
    pub img_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchLayout {
    pub fn new(img_h: usize, img_w: usize, patch_h: usize, patch_w: usize) -> Result<Self, GeometryError> {
        if patch_h == 0 || patch_w == 0 || img_h % patch_h != 0 || img_w % patch_w != 0 {
            return Err(GeometryError::NotDivisible {
                h: img_h,
                w: img_w,
                ph: patch_h,
                pw: patch_w,
            });
        }
        Ok(PatchLayout {
            img_h,
            img_w,
            patch_h,
            patch_w,
        })
    }

    pub fn grid_rows(&self) -> usize {
        self.img_h / self.patch_h
    }

    pub fn grid_cols(&self) -> usize {
        self.img_w / self.patch_w
    }

    /// Patch count n.
    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }
}

/// Compact border size for a `h x w` patch with border width `m`,
/// over all three channels: `6m(h + w - 2m)`.
pub fn spatial_prompt_len(h: usize, w: usize, m: usize) -> Result<usize, GeometryError> {
    if m == 0 || 2 * m >= h.min(w) {
        return Err(GeometryError::BorderTooWide { m, h, w });
    }
    Ok(6 * m * (h + w - 2 * m))
}

/// Learnable parameter count for the spatial prompt kind.
pub fn count_spatial_params(n: usize, h: usize, w: usize, m: usize, shared: bool) -> Result<usize, GeometryError> {
    let per_patch = spatial_prompt_len(h, w, m)?;
    Ok(if shared { per_patch } else { n * per_patch })
}

/// Learnable parameter count for the global border prompt: `6m⁺(H + W - 2m⁺)`.
pub fn count_global_params(img_h: usize, img_w: usize, m_plus: usize) -> Result<usize, GeometryError> {
    spatial_prompt_len(img_h, img_w, m_plus)
}

/// Flat offsets (into a `3 x h x w` buffer) of the border band of width `m`,
/// in compact storage order.
pub fn border_offsets(h: usize, w: usize, m: usize) -> Result<Vec<usize>, GeometryError> {
    let len = spatial_prompt_len(h, w, m)?;
    let mut offsets = Vec::with_capacity(len);
    for c in 0..CHANNELS {
        let base = c * h * w;
        for y in 0..m {
            for x in 0..w {
                offsets.push(base + y * w + x);
            }
        }
        for y in h - m..h {
            for x in 0..w {
                offsets.push(base + y * w + x);
            }
        }
        for y in m..h - m {
            for x in 0..m {
                offsets.push(base + y * w + x);
            }
        }
        for y in m..h - m {
            for x in w - m..w {
                offsets.push(base + y * w + x);
            }
        }
    }
    debug_assert_eq!(offsets.len(), len);
    Ok(offsets)
}

/// Scatter a compact border vector into a zeroed `3 x h x w` buffer.
pub fn scatter_border<F: Scalar>(compact: &[F], h: usize, w: usize, m: usize) -> Result<ArrayD<F>, GeometryError> {
    let offsets = border_offsets(h, w, m)?;
    if compact.len() != offsets.len() {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("compact border of {}", offsets.len()),
            got: format!("{}", compact.len()),
        });
    }
    let mut out = vec![F::zero(); CHANNELS * h * w];
    for (&o, &v) in offsets.iter().zip(compact) {
        out[o] = v;
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[CHANNELS, h, w]), out).unwrap())
}

fn expect_shape(a: &ArrayD<impl Scalar>, shape: &[usize]) -> Result<(), GeometryError> {
    if a.shape() != shape {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("{shape:?}"),
            got: format!("{:?}", a.shape()),
        });
    }
    Ok(())
}

/// Split `(B, 3, H, W)` images into `(B, n, 3, h, w)` patches, row-major grid order.
pub fn patchify<F: Scalar>(images: &ArrayD<F>, layout: &PatchLayout) -> Result<ArrayD<F>, GeometryError> {
    if images.ndim() != 4 {
        return Err(GeometryError::ShapeMismatch {
            expected: "(B, 3, H, W)".into(),
            got: format!("{:?}", images.shape()),
        });
    }
    let b = images.shape()[0];
    expect_shape(images, &[b, CHANNELS, layout.img_h, layout.img_w])?;
    let (ph, pw) = (layout.patch_h, layout.patch_w);
    let (gr, gc) = (layout.grid_rows(), layout.grid_cols());
    let n = layout.num_patches();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, n, CHANNELS, ph, pw]));
    for bi in 0..b {
        for gy in 0..gr {
            for gx in 0..gc {
                let j = gy * gc + gx;
                for c in 0..CHANNELS {
                    for y in 0..ph {
                        for x in 0..pw {
                            out[[bi, j, c, y, x]] = images[[bi, c, gy * ph + y, gx * pw + x]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reassemble patches back into images; exact inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(patches: &ArrayD<F>, layout: &PatchLayout) -> Result<ArrayD<F>, GeometryError> {
    if patches.ndim() != 5 {
        return Err(GeometryError::ShapeMismatch {
            expected: "(B, n, 3, h, w)".into(),
            got: format!("{:?}", patches.shape()),
        });
    }
    let b = patches.shape()[0];
    let (ph, pw) = (layout.patch_h, layout.patch_w);
    let (gr, gc) = (layout.grid_rows(), layout.grid_cols());
    expect_shape(patches, &[b, layout.num_patches(), CHANNELS, ph, pw])?;
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, CHANNELS, layout.img_h, layout.img_w]));
    for bi in 0..b {
        for gy in 0..gr {
            for gx in 0..gc {
                let j = gy * gc + gx;
                for c in 0..CHANNELS {
                    for y in 0..ph {
                        for x in 0..pw {
                            out[[bi, c, gy * ph + y, gx * pw + x]] = patches[[bi, j, c, y, x]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Add scattered per-patch (or shared) border prompts to a patch grid.
/// `prompt` has shape `(n, c_m)` or `(1, c_m)` for the shared variant.
pub fn attach_spatial<F: Scalar>(
    patches: &ArrayD<F>,
    prompt: &ArrayD<F>,
    layout: &PatchLayout,
    m: usize,
) -> Result<ArrayD<F>, GeometryError> {
    let (offsets, n) = validate_spatial(patches, prompt, layout, m)?;
    let b = patches.shape()[0];
    let mut out = patches.clone();
    let patch_elems = CHANNELS * layout.patch_h * layout.patch_w;
    {
        let flat = out.as_slice_mut().expect("standard layout");
        let p = prompt.as_slice().expect("standard layout");
        let c_m = offsets.len();
        let shared = prompt.shape()[0] == 1;
        for bi in 0..b {
            for j in 0..n {
                let row = if shared { 0 } else { j };
                let base = (bi * n + j) * patch_elems;
                for (k, &o) in offsets.iter().enumerate() {
                    flat[base + o] = flat[base + o] + p[row * c_m + k];
                }
            }
        }
    }
    Ok(out)
}

/// Add a scattered global border prompt to whole images.
/// `prompt` has shape `(c⁺,)` with `c⁺ = 6m⁺(H + W - 2m⁺)`.
pub fn attach_global<F: Scalar>(
    images: &ArrayD<F>,
    prompt: &ArrayD<F>,
    layout: &PatchLayout,
    m_plus: usize,
) -> Result<ArrayD<F>, GeometryError> {
    let offsets = validate_global(images, prompt, layout, m_plus)?;
    let b = images.shape()[0];
    let img_elems = CHANNELS * layout.img_h * layout.img_w;
    let mut out = images.clone();
    {
        let flat = out.as_slice_mut().expect("standard layout");
        let p = prompt.as_slice().expect("standard layout");
        for bi in 0..b {
            let base = bi * img_elems;
            for (k, &o) in offsets.iter().enumerate() {
                flat[base + o] = flat[base + o] + p[k];
            }
        }
    }
    Ok(out)
}

fn validate_spatial<F: Scalar>(
    patches: &ArrayD<F>,
    prompt: &ArrayD<F>,
    layout: &PatchLayout,
    m: usize,
) -> Result<(Vec<usize>, usize), GeometryError> {
    let offsets = border_offsets(layout.patch_h, layout.patch_w, m)?;
    let n = layout.num_patches();
    if patches.ndim() != 5 {
        return Err(GeometryError::ShapeMismatch {
            expected: "(B, n, 3, h, w)".into(),
            got: format!("{:?}", patches.shape()),
        });
    }
    let b = patches.shape()[0];
    expect_shape(patches, &[b, n, CHANNELS, layout.patch_h, layout.patch_w])?;
    let rows = prompt.shape().first().copied().unwrap_or(0);
    if prompt.ndim() != 2 || (rows != n && rows != 1) || prompt.shape()[1] != offsets.len() {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("({n} or 1, {})", offsets.len()),
            got: format!("{:?}", prompt.shape()),
        });
    }
    Ok((offsets, n))
}

fn validate_global<F: Scalar>(
    images: &ArrayD<F>,
    prompt: &ArrayD<F>,
    layout: &PatchLayout,
    m_plus: usize,
) -> Result<Vec<usize>, GeometryError> {
    let offsets = border_offsets(layout.img_h, layout.img_w, m_plus)?;
    if images.ndim() != 4 {
        return Err(GeometryError::ShapeMismatch {
            expected: "(B, 3, H, W)".into(),
            got: format!("{:?}", images.shape()),
        });
    }
    let b = images.shape()[0];
    expect_shape(images, &[b, CHANNELS, layout.img_h, layout.img_w])?;
    if prompt.ndim() != 1 || prompt.len() != offsets.len() {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("({},)", offsets.len()),
            got: format!("{:?}", prompt.shape()),
        });
    }
    Ok(offsets)
}

// ---- tape-level versions (gradients flow into the compact prompts) ----

/// Differentiable [`patchify`].
pub fn patchify_var<F: Scalar>(images: &Var<F>, layout: &PatchLayout) -> Result<Var<F>, GeometryError> {
    let value = patchify(&images.value(), layout)?;
    let layout = *layout;
    Ok(images.graph().custom(value, &[images], move |g| {
        vec![unpatchify(g, &layout).expect("patchify backward")]
    }))
}

/// Differentiable [`attach_spatial`].
pub fn attach_spatial_var<F: Scalar>(
    patches: &Var<F>,
    prompt: &Var<F>,
    layout: &PatchLayout,
    m: usize,
) -> Result<Var<F>, GeometryError> {
    let pv = patches.value();
    let pr = prompt.value();
    let (offsets, n) = validate_spatial(&pv, &pr, layout, m)?;
    let value = attach_spatial(&pv, &pr, layout, m)?;
    let b = pv.shape()[0];
    let shared = pr.shape()[0] == 1;
    let c_m = offsets.len();
    let patch_elems = CHANNELS * layout.patch_h * layout.patch_w;
    let rows = pr.shape()[0];
    Ok(patches.graph().custom(value, &[patches, prompt], move |g| {
        let flat = g.as_slice().expect("standard layout");
        let mut dp = vec![F::zero(); rows * c_m];
        for bi in 0..b {
            for j in 0..n {
                let row = if shared { 0 } else { j };
                let base = (bi * n + j) * patch_elems;
                for (k, &o) in offsets.iter().enumerate() {
                    dp[row * c_m + k] = dp[row * c_m + k] + flat[base + o];
                }
            }
        }
        vec![
            g.clone(),
            ArrayD::from_shape_vec(IxDyn(&[rows, c_m]), dp).unwrap(),
        ]
    }))
}

/// Differentiable [`attach_global`].
pub fn attach_global_var<F: Scalar>(
    images: &Var<F>,
    prompt: &Var<F>,
    layout: &PatchLayout,
    m_plus: usize,
) -> Result<Var<F>, GeometryError> {
    let iv = images.value();
    let pr = prompt.value();
    let offsets = validate_global(&iv, &pr, layout, m_plus)?;
    let value = attach_global(&iv, &pr, layout, m_plus)?;
    let b = iv.shape()[0];
    let img_elems = CHANNELS * layout.img_h * layout.img_w;
    let c_plus = offsets.len();
    Ok(images.graph().custom(value, &[images, prompt], move |g| {
        let flat = g.as_slice().expect("standard layout");
        let mut dp = vec![F::zero(); c_plus];
        for bi in 0..b {
            let base = bi * img_elems;
            for (k, &o) in offsets.iter().enumerate() {
                dp[k] = dp[k] + flat[base + o];
            }
        }
        vec![g.clone(), ArrayD::from_shape_vec(IxDyn(&[c_plus]), dp).unwrap()]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Graph};
    use crate::gradcheck::{central_diff, max_rel_err};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_images(b: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[b, CHANNELS, h, w]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn patch_counts() {
        let l = PatchLayout::new(224, 224, 16, 16).unwrap();
        assert_eq!(l.num_patches(), 196);
        let l = PatchLayout::new(16, 16, 16, 16).unwrap();
        assert_eq!(l.num_patches(), 1);
        let l = PatchLayout::new(32, 48, 16, 16).unwrap();
        assert_eq!(l.num_patches(), 6);
        assert!(matches!(
            PatchLayout::new(30, 32, 16, 16),
            Err(GeometryError::NotDivisible { .. })
        ));
    }

    #[test]
    fn single_patch_equals_image() {
        let l = PatchLayout::new(16, 16, 16, 16).unwrap();
        let img = rand_images(1, 16, 16, 1);
        let p = patchify(&img, &l).unwrap();
        assert_eq!(p.shape(), &[1, 1, CHANNELS, 16, 16]);
        for c in 0..CHANNELS {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(p[[0, 0, c, y, x]], img[[0, c, y, x]]);
                }
            }
        }
    }

    #[test]
    fn round_trip_exact() {
        for (h, w, ph, pw) in [(32, 48, 16, 16), (24, 24, 8, 8), (16, 32, 16, 16), (8, 8, 4, 4)] {
            let l = PatchLayout::new(h, w, ph, pw).unwrap();
            let img = rand_images(2, h, w, h as u64 * 31 + w as u64);
            let back = unpatchify(&patchify(&img, &l).unwrap(), &l).unwrap();
            assert_eq!(img, back, "round trip must be bit exact");
        }
    }

    #[test]
    fn border_count_formula_matches_enumeration() {
        for m in [1usize, 2, 3] {
            for h in [4usize, 8, 16] {
                for w in [4usize, 8, 16] {
                    if 2 * m >= h.min(w) {
                        assert!(border_offsets(h, w, m).is_err());
                        assert!(count_spatial_params(4, h, w, m, false).is_err());
                        continue;
                    }
                    let offs = border_offsets(h, w, m).unwrap();
                    assert_eq!(offs.len(), 6 * m * (h + w - 2 * m));
                    assert_eq!(count_spatial_params(7, h, w, m, false).unwrap(), 7 * offs.len());
                    assert_eq!(count_spatial_params(7, h, w, m, true).unwrap(), offs.len());
                    // offsets unique and inside the border band
                    let mut seen = std::collections::HashSet::new();
                    for &o in &offs {
                        assert!(seen.insert(o));
                        let rem = o % (h * w);
                        let (y, x) = (rem / w, rem % w);
                        assert!(y < m || y >= h - m || x < m || x >= w - m);
                    }
                }
            }
        }
    }

    #[test]
    fn reference_parameter_budgets() {
        assert_eq!(count_spatial_params(196, 16, 16, 1, false).unwrap(), 35_280);
        assert_eq!(count_spatial_params(196, 16, 16, 1, true).unwrap(), 180);
        assert_eq!(count_global_params(224, 224, 30).unwrap(), 69_840);
        assert_eq!(
            count_spatial_params(196, 16, 16, 1, false).unwrap() + count_global_params(224, 224, 30).unwrap(),
            105_120
        );
    }

    #[test]
    fn scatter_interior_zero() {
        let c = spatial_prompt_len(8, 8, 2).unwrap();
        let compact: Vec<f64> = (1..=c).map(|v| v as f64).collect();
        let s = scatter_border(&compact, 8, 8, 2).unwrap();
        let mut nonzero = 0;
        for ch in 0..CHANNELS {
            for y in 0..8 {
                for x in 0..8 {
                    let v = s[[ch, y, x]];
                    let border = y < 2 || y >= 6 || x < 2 || x >= 6;
                    if border {
                        nonzero += (v != 0.0) as usize;
                    } else {
                        assert_eq!(v, 0.0, "interior must stay zero");
                    }
                }
            }
        }
        assert_eq!(nonzero, c);
    }

    #[test]
    fn attach_spatial_examples() {
        let l = PatchLayout::new(8, 8, 4, 4).unwrap();
        let n = l.num_patches();
        let c_m = spatial_prompt_len(4, 4, 1).unwrap();
        let patches = patchify(&rand_images(2, 8, 8, 3), &l).unwrap();

        // zero prompt is the identity
        let zero = ArrayD::<f64>::zeros(IxDyn(&[n, c_m]));
        assert_eq!(attach_spatial(&patches, &zero, &l, 1).unwrap(), patches);

        // all-ones border with m=1, h=w=4 touches 12 positions per channel
        let ones = ArrayD::<f64>::from_elem(IxDyn(&[n, c_m]), 1.0);
        let out = attach_spatial(&patches, &ones, &l, 1).unwrap();
        let delta = &out - &patches;
        for j in 0..n {
            for ch in 0..CHANNELS {
                let cnt = (0..4)
                    .flat_map(|y| (0..4).map(move |x| (y, x)))
                    .filter(|&(y, x)| delta[[0, j, ch, y, x]] != 0.0)
                    .count();
                assert_eq!(cnt, 12);
            }
        }

        // shared prompt applies the same delta to every patch
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shared = ArrayD::from_shape_fn(IxDyn(&[1, c_m]), |_| rng.random_range(-1.0..1.0f64));
        let out = attach_spatial(&patches, &shared, &l, 1).unwrap();
        let delta = &out - &patches;
        let first = delta.index_axis(ndarray::Axis(0), 0);
        let d0 = first.index_axis(ndarray::Axis(0), 0).to_owned();
        for j in 1..n {
            assert_eq!(first.index_axis(ndarray::Axis(0), j).to_owned(), d0);
        }

        // wrong patch-shape prompt is rejected
        let bad = ArrayD::<f64>::zeros(IxDyn(&[n, c_m + 1]));
        assert!(attach_spatial(&patches, &bad, &l, 1).is_err());
    }

    #[test]
    fn attach_global_examples() {
        let l = PatchLayout::new(16, 16, 8, 8).unwrap();
        let imgs = rand_images(2, 16, 16, 5);
        let c = spatial_prompt_len(16, 16, 3).unwrap();
        let zero = ArrayD::<f64>::zeros(IxDyn(&[c]));
        assert_eq!(attach_global(&imgs, &zero, &l, 3).unwrap(), imgs);

        let ones = ArrayD::<f64>::from_elem(IxDyn(&[c]), 1.0);
        let out = attach_global(&imgs, &ones, &l, 3).unwrap();
        let delta = &out - &imgs;
        let per_channel = delta.iter().filter(|&&v| v != 0.0).count() / (2 * CHANNELS);
        assert_eq!(per_channel, c / CHANNELS);
    }

    #[test]
    fn global_then_patchify_commutes() {
        // attach_global then patchify == patchify then adding the patch-level
        // fragments of the scattered global prompt
        let l = PatchLayout::new(16, 24, 8, 8).unwrap();
        let imgs = rand_images(2, 16, 24, 11);
        let c = spatial_prompt_len(16, 24, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prompt = ArrayD::from_shape_fn(IxDyn(&[c]), |_| rng.random_range(-1.0..1.0f64));

        let a = patchify(&attach_global(&imgs, &prompt, &l, 2).unwrap(), &l).unwrap();

        let scattered = scatter_border(prompt.as_slice().unwrap(), 16, 24, 2)
            .unwrap()
            .into_shape_with_order(IxDyn(&[1, CHANNELS, 16, 24]))
            .unwrap();
        let frag = patchify(&scattered, &l).unwrap();
        let mut b = patchify(&imgs, &l).unwrap();
        for bi in 0..2 {
            for j in 0..l.num_patches() {
                for ch in 0..CHANNELS {
                    for y in 0..8 {
                        for x in 0..8 {
                            b[[bi, j, ch, y, x]] += frag[[0, j, ch, y, x]];
                        }
                    }
                }
            }
        }
        assert_eq!(a, b);
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let l = PatchLayout::new(8, 8, 4, 4).unwrap();
        let imgs = rand_images(2, 8, 8, 17);
        let n = l.num_patches();
        let c_m = spatial_prompt_len(4, 4, 1).unwrap();
        let c_g = spatial_prompt_len(8, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sp: ArrayD<f64> = ArrayD::from_shape_fn(IxDyn(&[n, c_m]), |_| rng.random_range(-0.5..0.5));
        let gp: ArrayD<f64> = ArrayD::from_shape_fn(IxDyn(&[c_g]), |_| rng.random_range(-0.5..0.5));

        // scalar function: sum of squares of the fully prompted patches
        let eval = |sp: &ArrayD<f64>, gp: &ArrayD<f64>| -> f64 {
            let g = Graph::<f64>::new();
            let iv = g.constant(imgs.clone());
            let spv = g.input(sp.clone());
            let gpv = g.input(gp.clone());
            let glob = attach_global_var(&iv, &gpv, &l, 1).unwrap();
            let patches = patchify_var(&glob, &l).unwrap();
            let prompted = attach_spatial_var(&patches, &spv, &l, 1).unwrap();
            prompted.mul(&prompted).sum_all().scalar_value()
        };

        let g = Graph::<f64>::new();
        let iv = g.constant(imgs.clone());
        let spv = g.input(sp.clone());
        let gpv = g.input(gp.clone());
        let glob = attach_global_var(&iv, &gpv, &l, 1).unwrap();
        let patches = patchify_var(&glob, &l).unwrap();
        let prompted = attach_spatial_var(&patches, &spv, &l, 1).unwrap();
        let loss = prompted.mul(&prompted).sum_all();
        let grads = backward(&loss);

        let num_sp = central_diff(&sp, 1e-6, |x| eval(x, &gp));
        let num_gp = central_diff(&gp, 1e-6, |x| eval(&sp, x));
        assert!(max_rel_err(&grads.get(&spv), &num_sp, 1e-8) < 1e-4);
        assert!(max_rel_err(&grads.get(&gpv), &num_gp, 1e-8) < 1e-4);
    }
}
