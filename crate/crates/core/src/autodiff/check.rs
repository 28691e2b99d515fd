//! Central-difference verification of tape gradients.

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central finite difference with step `epsilon`, over all coordinates.
/// Relative error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
///
/// `f` must build a deterministic scalar loss on the tape it is given.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");

    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(point.shape().to_vec(), values.to_vec())?);
        let loss = f(&mut tape, x)?;
        let out = tape.value(loss);
        if out.shape() != [1] {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    // analytic pass
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad());
    let loss = f(&mut tape, x)?;
    if tape.value(loss).shape() != [1] {
        return Err(Error::NonScalarLoss(tape.value(loss).shape().to_vec()));
    }
    let analytic = tape.backward(loss)?.get_or_zero(x, &tape);

    let mut max_err: f64 = 0.0;
    let mut values = point.values().to_vec();
    for i in 0..values.len() {
        let saved = values[i];
        values[i] = saved + epsilon;
        let plus = eval(&values)?;
        values[i] = saved - epsilon;
        let minus = eval(&values)?;
        values[i] = saved;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
