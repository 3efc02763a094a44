//! Central-difference gradient verification.

use super::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Compares [`Graph::backward`] against central differences for every
/// coordinate of every input.
///
/// `build` receives the inputs as parameter leaves and must return a scalar
/// node. Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return invalid("finite difference step must be positive");
    }
    if inputs.iter().any(|t| !t.all_finite()) {
        return invalid("finite difference inputs must be finite");
    }
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        if g.value(root).numel() != 1 {
            return shape_err("finite_diff_check: builder must return a scalar");
        }
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
