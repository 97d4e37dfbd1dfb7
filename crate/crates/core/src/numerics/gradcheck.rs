//! Central-difference gradient oracle.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor: below this gradient magnitude the relative test
/// degrades into an absolute one of `TOLERANCE · ABS_FLOOR_SCALE = 1e-9`.
pub const ABS_FLOOR_SCALE: f64 = 1e-3;

/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every coordinate `i`. `f` is only ever
/// evaluated, never differentiated.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR_SCALE);
    (analytic - numeric).abs() / denom
}

/// Worst coordinate-wise [`rel_error`] between two gradients of equal shape.
pub fn worst_rel_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape("gradcheck", analytic.shape(), numeric.shape()));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max))
}

/// Checks the gradient of `build(inputs)` with respect to every input.
/// `build` must produce a single-element output. Returns the worst relative
/// error per input.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &vars)?;
                Ok(g.value(out).item())
            },
            &inputs[i],
            DEFAULT_STEP,
        )?;
        worst.push(worst_rel_error(&analytic, &numeric)?);
    }
    Ok(worst)
}
