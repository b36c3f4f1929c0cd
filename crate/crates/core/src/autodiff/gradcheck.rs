//! Central finite-difference checks of analytic gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::TensorF;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric|` over all checked inputs.
    pub max_abs_err: f64,
    /// `max_abs_err` divided by the largest numeric gradient magnitude
    /// (floored at 1e-8), i.e. an infinity-norm relative error.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares the gradients of the scalar built by `f` with respect to every
/// entry of `inputs` against central differences with step `eps`.
///
/// `f` receives the graph and one parameter leaf per input and must return a
/// scalar node. Every input is perturbed element by element, so keep inputs
/// small.
pub fn check<F>(inputs: &[TensorF], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[TensorF]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut work = inputs.to_vec();
    let mut max_abs_err: f64 = 0.0;
    let mut max_numeric: f64 = 0.0;
    let mut checked = 0;
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference for input {t} element {i}"
                )));
            }
            max_abs_err = max_abs_err.max((analytic[t][i] - numeric).abs());
            max_numeric = max_numeric.max(numeric.abs());
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err: max_abs_err / max_numeric.max(1e-8),
        checked,
    })
}
