//! Central-difference verification of analytic gradients.
//!
//! Relative error uses `max(|analytic|, |numeric|)` as the denominator with
//! an absolute floor tied to the f32 finite-difference noise level
//! (~eps_f32 * |loss| / eps): coordinates whose gradients sit below that
//! floor cannot be resolved by central differences in f32 and are counted
//! but not allowed to dominate the report.

use super::params::{GradMap, ParamSet};
use crate::error::{MagError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    pub checked: usize,
    pub below_floor: usize,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare `analytic` gradients against central differences of `loss_fn`
/// at `samples_per_param` random coordinates of every parameter.
pub fn grad_check<F>(
    params: &mut ParamSet,
    mut loss_fn: F,
    analytic: &GradMap,
    eps: f32,
    samples_per_param: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f32>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(MagError::Config(format!(
            "grad_check eps {eps} outside [1e-4, 1e-2]"
        )));
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(MagError::Numeric("loss is non-finite at base point".into()));
    }
    // Floor below which f32 central differences are dominated by round-off:
    // the difference quotient carries ~eps_f32*|L|/eps of absolute noise, so
    // only coordinates comfortably above that can be resolved at 1e-3.
    let floor = 1200.0 * f32::EPSILON * base.abs().max(1.0) / eps;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        below_floor: 0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for pi in 0..params.len() {
        let (name, t) = params.at(pi);
        let name = name.to_string();
        let n = t.len();
        if n == 0 {
            continue;
        }
        // The first probe per parameter is its largest analytic gradient:
        // the coordinate central differences resolve best.
        let argmax = analytic.get(&name).map(|g| {
            g.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        });
        for s in 0..samples_per_param {
            let j = match (s, argmax) {
                (0, Some(j)) => j,
                _ => rng.next_below(n),
            };
            let orig = params.get(&name).data()[j];

            params.get_mut(&name).data_mut()[j] = orig + eps;
            let plus = loss_fn(params)?;
            params.get_mut(&name).data_mut()[j] = orig - eps;
            let minus = loss_fn(params)?;
            params.get_mut(&name).data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(MagError::Numeric("loss is non-finite under perturbation".into()));
            }

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map(|g| g.data()[j]).unwrap_or(0.0);
            let scale = a.abs().max(numeric.abs());
            if scale < floor {
                report.below_floor += 1;
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
