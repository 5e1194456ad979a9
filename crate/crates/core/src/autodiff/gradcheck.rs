use super::{Bound, Params, Tape, Tensor, Var};
use crate::error::{argument, Result};

/// Largest `|analytic − central difference| / max(1, |analytic|)` over all
/// components of all parameters in `params`.
///
/// `f` builds a scalar on a fresh tape from the bound parameters.
pub fn grad_check_params<F>(f: F, params: &Params, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(argument!("eps must be positive"));
    }
    let eval = |p: &Params| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = f(&mut tape, &bound)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let analytic = bound.grads(&tape.backward(out)?);

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for (k, &g) in grad.iter().enumerate() {
            let original = probe.tensors_mut()[pi].data()[k];
            probe.tensors_mut()[pi].data_mut()[k] = original + eps;
            let up = eval(&probe)?;
            probe.tensors_mut()[pi].data_mut()[k] = original - eps;
            let down = eval(&probe)?;
            probe.tensors_mut()[pi].data_mut()[k] = original;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((g - numeric).abs() / g.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// [`grad_check_params`] for a function of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut params = Params::new();
    let id = params.add("x", x.clone());
    grad_check_params(|tape, bound| f(tape, bound[id]), &params, eps)
}
