//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Scales the analytic gradient of the first trainable parameter; used only to
    /// confirm the harness detects a broken backward.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_param: 12,
            seed: 0,
            corrupt_analytic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Denominator floor, so gradients that are zero up to rounding compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `f` against central differences,
/// `|a − n| / max(|a| + |n|, REL_FLOOR)`, maximized over the sampled coordinates
/// of every trainable parameter.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if g.scalar(loss).is_none() {
            let (r, c) = g.shape(loss);
            return Err(Error::shape("grad_check (output must be scalar)", &[r, c], &[1, 1]));
        }
        g.backward(loss)?.into_params()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss).expect("checked scalar above"))
    };

    let mut rng = RngState::new(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    for (k, id) in store.trainable_ids().into_iter().enumerate() {
        let n = store.tensor(id).numel();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            (0..opts.coords_per_param).map(|_| rng.below(n)).collect()
        };
        let grad = analytic.get(id);
        for c in coords {
            let orig = store.tensor(id).data()[c];
            probe.tensor_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let mut a = grad.map_or(0.0, |g| g[c]);
            if k == 0 {
                if let Some(s) = opts.corrupt_analytic {
                    a *= s;
                }
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst_param = store.get(id).name.clone();
                    report.worst_coord = c;
                }
            }
        }
    }
    Ok(report)
}
