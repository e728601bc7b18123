use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives one leaf per entry of `inputs` and must return a scalar.
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over every input
/// element; zero inputs give zero.
pub fn grad_check<F>(f: F, inputs: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step {} must be positive",
            fd_step
        )));
    }
    if inputs.is_empty() {
        return Ok(0.0);
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::shape("grad_check", "function output is not scalar"))
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..probe[i].numel() {
            let original = probe[i].data()[j];
            probe[i].data_mut()[j] = original + fd_step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = original - fd_step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * fd_step);
            if !numeric.is_finite() {
                return Err(Error::non_finite("grad_check"));
            }
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
