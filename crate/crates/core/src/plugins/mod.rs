//! Generative enhancements that wrap the TD3 core.

pub mod diffusion;
pub mod gan;
pub mod hybrid;
pub mod stack;
pub mod transformer;
pub mod vae;

use gaidrl_nn::{AdamState, Graph, ParamSet, Var};

use crate::error::Result;

/// One Adam step on several parameter sets sharing a loss. `build` receives
/// the trainable bindings in the order given and returns the scalar loss.
pub fn fit_step<F>(sets: &mut [(&mut ParamSet, &mut AdamState)], build: F) -> Result<f64>
where
    F: FnOnce(&Graph, &[Vec<Var>]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Vec<Var>> = sets.iter().map(|(p, _)| g.bind(p)).collect();
    let loss = build(&g, &vars)?;
    let value = g.item(loss);
    let grads = g.backward(loss)?;
    for ((p, opt), v) in sets.iter_mut().zip(&vars) {
        opt.update(p, &grads.for_vars(v))?;
    }
    Ok(value)
}
