//! Central-difference gradient checking.

use super::{Graph, NodeId, ParamStore, Rng};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter, picked with `seed`.
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Relative error floor; below this both gradients are treated as zero.
const FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares caller-supplied analytic gradients (one buffer per parameter, store order)
/// against central differences of `value`.
pub fn finite_diff_check_with(
    params: &mut ParamStore,
    opts: &GradCheckOptions,
    analytic: &[Vec<f64>],
    mut value: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = params.value(id).numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_coords_per_param {
            if limit < n {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for i in coords {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = value(params)?;
            params.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = value(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grad[i], numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar objective built on a fresh [`Graph`]. `f` must be
/// deterministic and return the scalar loss node.
pub fn finite_diff_check(
    params: &mut ParamStore,
    opts: &GradCheckOptions,
    mut f: impl FnMut(&ParamStore, &mut Graph) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(params, &mut f)?;
    finite_diff_check_with(params, opts, &analytic, |p| {
        let mut g = Graph::new();
        let loss = f(p, &mut g)?;
        Ok(g.value(loss).data()[0])
    })
}

/// Gradients of `f` for every parameter, zero-filled where `f` does not touch it.
pub fn analytic_grads(
    params: &ParamStore,
    f: &mut impl FnMut(&ParamStore, &mut Graph) -> Result<NodeId>,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let loss = f(params, &mut g)?;
    g.backward(loss)?;
    let mut scratch = params.clone();
    scratch.zero_grad();
    g.accumulate_into(&mut scratch);
    Ok(scratch
        .iter()
        .map(|p| match &p.grad {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.value.numel()],
        })
        .collect())
}
