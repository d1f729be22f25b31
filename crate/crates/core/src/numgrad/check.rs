//! Central finite differences for checking reverse-mode gradients.

use super::{GradError, ParamSet};

/// Estimates the gradient of `f` at `params` by central differences with
/// step `h`, one scalar at a time.
pub fn numeric_grad(
    params: &ParamSet,
    h: f64,
    f: impl Fn(&ParamSet) -> Result<f64, GradError>,
) -> Result<ParamSet, GradError> {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        for (i, &x) in t.data().iter().enumerate() {
            probe.set_element(name, i, x + h)?;
            let up = f(&probe)?;
            probe.set_element(name, i, x - h)?;
            let down = f(&probe)?;
            probe.set_element(name, i, x)?;
            out.set_element(name, i, (up - down) / (2.0 * h))?;
        }
    }
    Ok(out)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, floor: f64) -> Result<f64, GradError> {
    if !a.is_congruent(b) {
        return Err(GradError::Incongruent);
    }
    Ok(a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (*p, *q)).collect::<Vec<_>>())
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max))
}
