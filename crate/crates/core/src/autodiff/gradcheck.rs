use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative error, using
/// `max(|a|, |b|, 1e-8)` as the denominator.
///
/// `f` must be deterministic; otherwise the result is meaningless.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; every coordinate of every
/// input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = f(&tape, &vars)?;
        scalar_of(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    scalar_of(out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[which].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    if v.numel() != 1 {
        return Err(Error::pre("grad_check", format!("f must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}
