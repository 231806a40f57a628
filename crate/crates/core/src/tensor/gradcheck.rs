use serde::Serialize;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Gradients with magnitude below this are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-6;
/// Roundoff allowance of a central difference, in units of `eps / step`.
const ROUNDOFF_ULPS: f64 = 64.0;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub probe_count: usize,
}

/// Checks every coordinate of `point`.
pub fn grad_check<F>(name: &str, f: F, point: &Tensor, step: f64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_sampled(name, f, point, step, usize::MAX)
}

/// Checks at most `max_probes` coordinates, evenly strided over `point`.
///
/// The relative error of a coordinate is
/// `max(|a - n| - r, 0) / max(|a|, |n|, 1e-6)` with `a` the analytic and `n`
/// the central-difference derivative, and `r = 64 eps max(|f(x)|, 1) / step`
/// the roundoff of the difference quotient. Without `r`, coordinates whose
/// true derivative is exactly zero would report pure roundoff as error.
pub fn grad_check_sampled<F>(name: &str, f: F, point: &Tensor, step: f64, max_probes: usize) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = point.detach_param();
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", out.shape())));
    }
    let roundoff = ROUNDOFF_ULPS * f64::EPSILON * out.item().abs().max(1.0) / step;
    out.backward()?;
    let analytic = leaf.grad().expect("param leaf keeps a gradient");

    let n = point.numel();
    let probes: Vec<usize> = if max_probes >= n {
        (0..n).collect()
    } else {
        let stride = n as f64 / max_probes as f64;
        (0..max_probes).map(|i| (i as f64 * stride) as usize).collect()
    };

    let base = point.to_vec();
    let eval = |vals: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(point.shape(), vals)?;
        no_grad(|| f(&t)).map(|y| y.item())
    };

    let mut max_rel_error: f64 = 0.0;
    for &i in &probes {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
        let rel = ((a - numeric).abs() - roundoff).max(0.0) / denom;
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("grad_check {name} at coordinate {i}")));
        }
        max_rel_error = max_rel_error.max(rel);
    }

    Ok(GradReport { op_name: name.to_string(), max_rel_error, probe_count: probes.len() })
}
