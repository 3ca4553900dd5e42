use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

/// Largest relative disagreement between reverse-mode gradients and central
/// differences over every scalar in `params`.
///
/// `loss` builds a scalar from freshly bound parameter vars; it must be a pure
/// function of the parameter values. The relative error of one coordinate is
/// `|autodiff - fd| / max(1e-8, |fd|)`.
pub fn grad_check<F>(params: &ParamSet, epsilon: f64, loss: F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(NnError::Usage(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let g = Graph::new();
    let vars = g.bind(params);
    let out = loss(&g, &vars)?;
    let analytic = g.backward(out)?.for_vars(&vars);

    let eval = |p: &ParamSet| -> Result<f64> {
        let g = Graph::new();
        let vars = g.bind_frozen(p);
        let out = loss(&g, &vars)?;
        Ok(g.item(out))
    };

    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for t in 0..params.len() {
        for i in 0..params.tensors()[t].len() {
            let orig = params.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let ad = analytic[t].data()[i];
            let err = (ad - fd).abs() / fd.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
