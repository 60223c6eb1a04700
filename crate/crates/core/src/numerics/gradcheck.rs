//! Central finite differences, the oracle every analytic gradient is checked against.

use super::network::Network;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Central-difference gradient of `loss` with respect to the tensor returned
/// by `access(state, key)`.
///
/// The step actually taken in `f32` (after rounding `p ± ε`) is used as the
/// denominator, which removes the representation error of the perturbation.
pub fn finite_difference_with<S>(
    state: &mut S,
    key: &str,
    epsilon: f32,
    access: impl for<'a> Fn(&'a mut S, &str) -> Option<&'a mut Tensor>,
    loss: impl Fn(&S) -> f64,
) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        bail!(InvalidArgument, "epsilon must be positive, got {epsilon}");
    }
    let Some(t) = access(state, key) else {
        bail!(InvalidArgument, "no parameter named '{key}'");
    };
    let shape = t.shape().to_vec();
    let n = t.len();
    let mut out = vec![0.0f32; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = access(state, key).unwrap().data()[i];
        let plus = orig + epsilon;
        let minus = orig - epsilon;
        access(state, key).unwrap().data_mut()[i] = plus;
        let lp = loss(state);
        access(state, key).unwrap().data_mut()[i] = minus;
        let lm = loss(state);
        access(state, key).unwrap().data_mut()[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            bail!(NonFinite, "loss is not finite while perturbing '{key}'[{i}]");
        }
        let h = f64::from(plus) - f64::from(minus);
        *slot = ((lp - lm) / h) as f32;
    }
    Tensor::from_vec(&shape, out)
}

/// `(L(p + ε) − L(p − ε)) / 2ε` for every entry of parameter `param_key`.
pub fn finite_difference_gradient(
    net: &mut Network,
    loss_fn: impl Fn(&Network) -> f64,
    param_key: &str,
    epsilon: f32,
) -> Result<Tensor> {
    finite_difference_with(
        net,
        param_key,
        epsilon,
        |n, k| n.params_mut().get_mut(k),
        loss_fn,
    )
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in analytic.data().iter().zip(numeric.data()) {
        let (a, b) = (f64::from(a), f64::from(b));
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
