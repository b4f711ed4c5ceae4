//! Central finite-difference gradient checking.
//!
//! The checker is deliberately independent of the tape: it only ever calls a
//! user-supplied forward function on perturbed copies of the inputs, so it can
//! serve as the oracle against analytic gradients.

use crate::scalar::Scalar;

use super::data::TensorData;

/// Central-difference gradients of `f` w.r.t. every component of every input,
/// step `h` (the conventional choice here is 1e-5 in f64).
pub fn finite_diff<F>(f: F, inputs: &[TensorData<f64>], h: f64) -> Vec<TensorData<f64>>
where
    F: Fn(&[TensorData<f64>]) -> f64,
{
    let mut work: Vec<TensorData<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = TensorData::zeros(inputs[ti].shape().to_vec());
        for ci in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let fp = f(&work);
            work[ti].data_mut()[ci] = orig - h;
            let fm = f(&work);
            work[ti].data_mut()[ci] = orig;
            g.data_mut()[ci] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between analytic and numeric gradients,
/// `|a - n| / max(|a|, |n|, floor)` with floor 1e-6 so near-zero components
/// are compared absolutely.
pub fn max_rel_err<T: Scalar>(analytic: &TensorData<T>, numeric: &TensorData<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let a = a.into_f64();
        let denom = a.abs().max(n.abs()).max(1e-6);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Worst relative error over a sparse set of checked components.
pub fn max_rel_err_at<T: Scalar>(analytic: &TensorData<T>, checks: &[(usize, f64)]) -> f64 {
    let mut worst = 0.0f64;
    for &(idx, n) in checks {
        let a = analytic.data()[idx].into_f64();
        let denom = a.abs().max(n.abs()).max(1e-6);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
