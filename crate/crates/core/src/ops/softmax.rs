use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

fn check(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let [b, c, h, w] = *shape else {
        return Err(Error::Shape(format!("softmax_channels expects [B,C,H,W], got {shape:?}")));
    };
    if c < 2 {
        return Err(Error::Shape(format!("softmax_channels needs C >= 2, got {c}")));
    }
    Ok((b, c, h * w))
}

/// Per-pixel softmax over the channel axis of a `[B,C,H,W]` tensor,
/// stabilised by subtracting the per-pixel channel max.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, plane) = check(logits.shape())?;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(x[base + k * plane + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (x[base + k * plane + p] - max).exp();
                out[base + k * plane + p] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * plane + p] /= total;
            }
        }
    }
    Ok(Tensor::from_raw(logits.shape().to_vec(), out))
}

struct SoftmaxBackward {
    c: usize,
    plane: usize,
}

impl<T: Real> Backward<T> for SoftmaxBackward {
    fn backward(
        &self,
        _parents: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (c, plane) = (self.c, self.plane);
        let p = output.data();
        let mut dx = vec![T::zero(); p.len()];
        for base in (0..p.len()).step_by(c * plane) {
            for q in 0..plane {
                let mut dot = T::zero();
                for k in 0..c {
                    let i = base + k * plane + q;
                    dot += grad[i] * p[i];
                }
                for k in 0..c {
                    let i = base + k * plane + q;
                    dx[i] = p[i] * (grad[i] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Tape<T> {
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let (_, c, plane) = check(self.shape(logits))?;
        let out = softmax_channels(self.value(logits))?;
        Ok(self.push("softmax_channels", out, &[logits], Box::new(SoftmaxBackward { c, plane })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let t = Tensor::new(vec![1, 2, 1, 2], vec![0.0, 3f64.ln(), 0.0, 0.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        // pixel 0: (0, 0) -> (0.5, 0.5); pixel 1: (ln 3, 0) -> (0.75, 0.25)
        let d = p.data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[2] - 0.5).abs() < 1e-15);
        assert!((d[1] - 0.75).abs() < 1e-15 && (d[3] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn large_logits_are_stable() {
        let t = Tensor::new(vec![1, 3, 1, 1], vec![1000.0f32, 999.0, -1000.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_single_channel() {
        assert!(softmax_channels(&Tensor::<f64>::zeros(vec![1, 1, 2, 2])).is_err());
    }
}
