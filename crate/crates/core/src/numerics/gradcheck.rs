//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{GemError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index where the maximum occurred.
    pub worst_index: usize,
}

/// Per-parameter maximum relative error, sorted worst first.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamGradError>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.max_rel_error)
    }
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// `f` records the scalar objective on the provided graph. It must be deterministic: the
/// harness evaluates it twice up front and refuses to continue if the values differ
/// (for example when dropout was left on).
pub fn finite_diff_check<F>(params: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(p, &mut g)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(GemError::NonFinite("objective value".into()));
        }
        Ok(v)
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GemError::Invalid(format!(
            "objective is nondeterministic ({first} vs {second}); disable dropout"
        )));
    }

    params.zero_grad();
    let mut g = Graph::new();
    let out = f(params, &mut g)?;
    g.backward(out, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut entries = Vec::with_capacity(params.len());
    let mut evaluations = 2;
    let ids: Vec<_> = (0..params.len()).map(super::params::ParamId).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = params.get(id).value.len();
        let mut worst = (0.0f64, 0usize);
        #[allow(clippy::needless_range_loop)]
        for j in 0..n {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > worst.0 {
                worst = (rel, j);
            }
        }
        entries.push(ParamGradError {
            name: params.get(id).name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    entries.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    Ok(GradCheckReport {
        entries,
        evaluations,
    })
}
