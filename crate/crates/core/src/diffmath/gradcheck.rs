//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;
use serde::Serialize;

use super::Matrix;
use crate::error::Result;

pub type ParamSet = IndexMap<String, Matrix>;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-5;

/// Result for one named parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub frozen: bool,
    /// Largest `|analytic - fd| / max(|analytic|, |fd|, 1e-8)` over entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// For frozen tensors: whether the analytic gradient was exactly zero.
    pub frozen_grad_zero: bool,
    /// Flat indices where probing produced a non-finite loss.
    pub nonfinite: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Worst relative error over all non-frozen tensors.
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.params.iter().all(|p| {
            if p.frozen {
                p.frozen_grad_zero
            } else {
                p.nonfinite.is_empty() && p.max_rel_error < threshold
            }
        })
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `eval`'s analytic gradients against central differences.
///
/// `eval` returns the loss and analytic gradients at the given parameters.
/// Names listed in `frozen` are not probed; their analytic gradient (absent
/// or present) must be identically zero.
pub fn grad_check<F>(params: &ParamSet, frozen: &[&str], eps: f64, eval: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    let (_, analytic) = eval(params)?;
    let mut probe = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (name, value) in params {
        let is_frozen = frozen.contains(&name.as_str());
        let grad = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
        if is_frozen {
            checks.push(ParamCheck {
                name: name.clone(),
                entries: value.data().len(),
                frozen: true,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                frozen_grad_zero: grad.is_all_zero(),
                nonfinite: Vec::new(),
            });
            continue;
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut nonfinite = Vec::new();
        for i in 0..value.data().len() {
            let orig = value.data()[i];
            probe[name].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?.0;
            probe[name].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?.0;
            probe[name].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                nonfinite.push(i);
                continue;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            max_rel = max_rel.max(relative_error(a, fd));
            max_abs = max_abs.max((a - fd).abs());
        }
        checks.push(ParamCheck {
            name: name.clone(),
            entries: value.data().len(),
            frozen: false,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            frozen_grad_zero: false,
            nonfinite,
        });
    }
    Ok(GradCheckReport { eps, params: checks })
}
