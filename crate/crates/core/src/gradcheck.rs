//! Central finite-difference verification of recorded gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead of amplified noise.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&LeafReport> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every element of every leaf.
///
/// `f` receives a fresh graph and one [`Var`] per leaf (in order) and must
/// return a one-element output.
pub fn grad_check<F>(f: F, leaves: &[(&str, Tensor<f64>)], tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::Numerical("non-finite function value".to_string()));
    }
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport {
        tol,
        leaves: Vec::with_capacity(leaves.len()),
    };
    for (li, (name, leaf)) in leaves.iter().enumerate() {
        let zero = Tensor::zeros(leaf.shape());
        let analytic = grads.get(vars[li]).unwrap_or(&zero);
        if !analytic.all_finite() {
            return Err(Error::Numerical(alloc::format!("non-finite gradient for leaf '{name}'")));
        }
        let mut lr = LeafReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..leaf.len() {
            let orig = leaf.data()[i];
            values[li].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[li].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[li].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(alloc::format!(
                    "non-finite perturbed value for leaf '{name}' at {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            lr.max_abs_err = lr.max_abs_err.max((a - numeric).abs());
            if rel > lr.max_rel_err {
                lr.max_rel_err = rel;
                lr.worst_index = i;
            }
        }
        report.leaves.push(lr);
    }
    Ok(report)
}
