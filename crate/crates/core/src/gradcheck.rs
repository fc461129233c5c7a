//! Central finite-difference verification of graph gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, returning the maximum over all input elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh graph and the leaf ids of `inputs` (all tracking
/// gradients) and must return a scalar node. It is evaluated twice at the
/// unperturbed point; differing outputs are a contract error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with_step(f, inputs, FD_STEP)
}

pub fn grad_check_with_step<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &ids)?;
    let base = graph.value(out).item();
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "function under check is not deterministic ({base} vs {again})"
        )));
    }
    let grads = graph.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
