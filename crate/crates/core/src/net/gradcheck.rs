//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::net::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with central differences of `loss`.
///
/// `loss` rebuilds the forward pass from `store`; when `backward` is true it
/// must also call `Tape::backward`. `picks` lists `(param, element)` pairs to
/// probe.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    picks: &[(ParamId, usize)],
    step: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    store.zero_grad();
    loss(store, true)?;
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(id, i)| store.get(id).grad.data()[i])
        .collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
    };
    for (&(id, i), &a) in picks.iter().zip(&analytic) {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + step;
        let up = loss(store, false)?;
        store.get_mut(id).value.data_mut()[i] = orig - step;
        let down = loss(store, false)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        report.checked += 1;
        report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
        report.max_relative_error = report
            .max_relative_error
            .max(relative_error(a, numeric, 1e-6));
    }
    store.zero_grad();
    Ok(report)
}
