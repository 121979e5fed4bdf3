//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used, so this is an independent check on
//! [`Graph::backward`](crate::autodiff::Graph::backward).

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Parameter name and index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `build` with respect to the given parameters (all parameters if `only` is
/// `None`).
pub fn check<F>(store: &mut ParamStore, only: Option<&[ParamId]>, step: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[id.index()][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), j));
                }
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
