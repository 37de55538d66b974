//! Gumbel-Softmax relaxation of categorical samples over the last axis.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `softmax((logits + noise) / tau)`; with `hard` the forward value is the
/// one-hot argmax and the gradient is that of the soft sample.
pub fn gumbel_softmax_with_noise<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    noise: Tensor<T>,
    tau: f64,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let n = tape.constant(noise);
    let y = tape.add(logits, n)?;
    let y = tape.scale(y, T::lit(1.0 / tau));
    let soft = tape.softmax(y);
    Ok(if hard { tape.straight_through(soft) } else { soft })
}

pub fn gumbel_noise<T: Scalar>(shape: &[usize], rng: &mut RngState) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gumbel()))
}

pub fn gumbel_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tau: f64,
    hard: bool,
    rng: &mut RngState,
) -> Result<Var> {
    let noise = gumbel_noise(tape.shape(logits), rng);
    gumbel_softmax_with_noise(tape, logits, noise, tau, hard)
}
