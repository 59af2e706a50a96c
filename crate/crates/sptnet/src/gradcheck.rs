//! Central finite differences, used as an independent oracle for backward
//! gradients. Kept free of any tape machinery on purpose.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &ArrayD<f64>, eps: f64, f: impl Fn(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    let flat: Vec<f64> = x.iter().cloned().collect();
    for (k, &xk) in flat.iter().enumerate() {
        let h = eps * xk.abs().max(1.0);
        set_flat(&mut probe, k, xk + h);
        let fp = f(&probe);
        set_flat(&mut probe, k, xk - h);
        let fm = f(&probe);
        set_flat(&mut probe, k, xk);
        *grad.iter_mut().nth(k).unwrap() = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference partials for a sampled subset of coordinates.
/// Returns `(flat_index, derivative)` pairs.
pub fn central_diff_sampled(
    x: &ArrayD<f64>,
    coords: &[usize],
    eps: f64,
    f: impl Fn(&ArrayD<f64>) -> f64,
) -> Vec<(usize, f64)> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        let xk = *x.iter().nth(k).unwrap();
        let h = eps * xk.abs().max(1.0);
        set_flat(&mut probe, k, xk + h);
        let fp = f(&probe);
        set_flat(&mut probe, k, xk - h);
        let fm = f(&probe);
        set_flat(&mut probe, k, xk);
        out.push((k, (fp - fm) / (2.0 * h)));
    }
    out
}

fn set_flat(a: &mut ArrayD<f64>, k: usize, v: f64) {
    *a.iter_mut().nth(k).unwrap() = v;
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero pairs compare sanely.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

pub fn rel_err(x: f64, y: f64, floor: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(floor)
}
