//! Central finite-difference verification of recorded gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Worst element found by [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// largest `|analytic - numeric|` over all elements
    pub max_abs_error: f64,
    /// (input position, flat element index) of the worst element
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Max over all elements of all `inputs` of
/// `|analytic - (f(x+h) - f(x-h)) / 2h| / (|analytic| + 1e-8)`.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if let Some(index) = g.value(out).first_non_finite() {
        return Err(Error::NonFinite {
            what: "grad_check output".into(),
            index,
        });
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let two_h = (h + h).to_f64_lossy();
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (pos, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[pos].shape().to_vec());
        let analytic = grads.get(v).unwrap_or(&zeros);
        if let Some(index) = analytic.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("analytic gradient of input {pos}"),
                index,
            });
        }
        for j in 0..inputs[pos].numel() {
            let x0 = inputs[pos].data()[j];
            probe[pos].data_mut()[j] = x0 + h;
            let up = evaluate(&f, &probe)?;
            probe[pos].data_mut()[j] = x0 - h;
            let down = evaluate(&f, &probe)?;
            probe[pos].data_mut()[j] = x0;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("perturbed evaluation of input {pos}"),
                    index: j,
                });
            }
            let numeric = (up - down).to_f64_lossy() / two_h;
            let a = analytic.data()[j].to_f64_lossy();
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.elements += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pos, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}

/// Checks gradients with respect to `inputs` and every parameter in `store`.
///
/// `f` receives the bound parameters and the input handles.
pub fn grad_check_params<T, F>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    f: F,
    h: T,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bound, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let all: Vec<Tensor<T>> = inputs.iter().chain(store.values()).cloned().collect();
    grad_check_many(
        |g, vars| {
            let bound = Bound::from_vars(vars[n..].to_vec());
            f(g, &bound, &vars[..n])
        },
        &all,
        h,
    )
}
