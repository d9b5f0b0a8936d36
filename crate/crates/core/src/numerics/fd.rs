//! Central finite-difference auditing of reverse-mode gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than relatively.
///
/// Central differences at step 1e-5 carry rounding noise near `1e-11·|f|`,
/// which would dominate the relative error of near-zero gradient entries.
pub const FD_REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, FD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Flat index and segment of the worst coordinate.
    pub worst: Option<(usize, String)>,
    /// Coordinates where `f` was non-finite at either probe point.
    pub non_finite: Vec<usize>,
    pub coordinates: usize,
}

/// Per-coordinate central differences of `f` at `point`.
///
/// Returns the numerical gradient (NaN where a probe was non-finite) in flat
/// coordinate order.
pub fn numerical_gradient<F>(f: F, point: &ParamVector, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> f64 + Sync,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step}"
        )));
    }
    let dim = point.dim();
    let grad = (0..dim)
        .into_par_iter()
        .map_init(
            || point.clone(),
            |probe, i| {
                let (seg, off) = probe.locate(i).expect("index below dim");
                let orig = probe.segment_data_mut(seg)[off];
                probe.segment_data_mut(seg)[off] = orig + step;
                let up = f(probe);
                probe.segment_data_mut(seg)[off] = orig - step;
                let down = f(probe);
                probe.segment_data_mut(seg)[off] = orig;
                if up.is_finite() && down.is_finite() {
                    (up - down) / (2.0 * step)
                } else {
                    f64::NAN
                }
            },
        )
        .collect();
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` coordinate by coordinate.
pub fn finite_difference_check<F>(
    f: F,
    point: &ParamVector,
    analytic: &ParamVector,
    step: f64,
) -> Result<FdReport>
where
    F: Fn(&ParamVector) -> f64 + Sync,
{
    point.check_compatible(analytic)?;
    let numeric = numerical_gradient(f, point, step)?;
    let analytic = analytic.flatten();
    let mut report = FdReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        non_finite: Vec::new(),
        coordinates: numeric.len(),
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if !n.is_finite() {
            report.non_finite.push(i);
            continue;
        }
        let rel = relative_error(*a, *n);
        report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            let (seg, _) = point.locate(i).expect("index below dim");
            report.worst = Some((i, point.segment_name(seg).to_string()));
        }
    }
    Ok(report)
}

/// Central difference of `f` along `direction`.
pub fn directional_derivative<F>(
    f: F,
    point: &ParamVector,
    direction: &ParamVector,
    step: f64,
) -> Result<f64>
where
    F: Fn(&ParamVector) -> f64,
{
    let mut up = point.clone();
    up.axpy(step, direction)?;
    let mut down = point.clone();
    down.axpy(-step, direction)?;
    let (fu, fd) = (f(&up), f(&down));
    if !(fu.is_finite() && fd.is_finite()) {
        return Err(Error::NonFinite("directional probe".into()));
    }
    Ok((fu - fd) / (2.0 * step))
}
