//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` builds a scalar on the given tape from the leaf holding `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let analytic = tape.backward(root)?.get(leaf);

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::NonScalarRoot(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let mut worst = 0.0f64;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let plus = eval(Tensor::new(x.shape().to_vec(), data.clone())?)?;
        data[i] = orig - step;
        let minus = eval(Tensor::new(x.shape().to_vec(), data.clone())?)?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
