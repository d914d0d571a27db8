//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Parameter, Tape};

/// Compares analytic gradients against central differences for every
/// coordinate of every parameter and returns the worst relative error,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` wires a scalar-valued graph from the parameter leaves it is
/// given; it runs once per perturbed evaluation, so it must be a pure
/// function of the parameter values (disable dropout or pin its seed).
/// Parameters are restored to their original values before returning.
pub fn grad_check<F>(params: &mut [Parameter], eps: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Argument(format!("step size {eps} must be positive")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p)).collect();
        let root = build(&mut tape, &ids)?;
        tape.backward(root)?;
        // a parameter the graph never touches has no stored gradient; its
        // derivative is zero
        ids.iter()
            .zip(params.iter())
            .map(|(&id, p)| {
                tape.grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.tensor().numel()])
            })
            .collect::<Vec<_>>()
    };

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for ci in 0..params[pi].tensor().numel() {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + eps;
            let f_plus = eval(params, &mut build)?;
            params[pi].data_mut()[ci] = orig - eps;
            let f_minus = eval(params, &mut build)?;
            params[pi].data_mut()[ci] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn eval<F>(params: &[Parameter], build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p)).collect();
    let root = build(&mut tape, &ids)?;
    let value = tape.value(root);
    if value.numel() != 1 {
        return Err(Error::Argument(format!(
            "grad_check graph must produce a scalar, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}
