//! Bilinear resize with the align-corners-false convention: source
//! coordinate `(dst + 0.5) * in / out - 0.5`, clamped at zero.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

struct Plan {
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

fn plan(shape: &[usize], oh: usize, ow: usize) -> Result<Plan> {
    let [b, c, h, w] = *shape else {
        return Err(Error::Shape(format!("upsample_bilinear expects [B,C,H,W], got {shape:?}")));
    };
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("upsample_bilinear target is zero-sized".into()));
    }
    if oh < h || ow < w {
        return Err(Error::InvalidArgument(format!(
            "upsample_bilinear cannot shrink {h}x{w} to {oh}x{ow}"
        )));
    }
    Ok(Plan {
        planes: b * c,
        h,
        w,
        oh,
        ow,
        rows: taps(h, oh),
        cols: taps(w, ow),
    })
}

fn forward<T: Real>(x: &[T], p: &Plan) -> Vec<T> {
    let mut out = vec![T::zero(); p.planes * p.oh * p.ow];
    for n in 0..p.planes {
        let src = &x[n * p.h * p.w..(n + 1) * p.h * p.w];
        let dst = &mut out[n * p.oh * p.ow..(n + 1) * p.oh * p.ow];
        for (oy, r) in p.rows.iter().enumerate() {
            let fy = T::lit(r.frac);
            for (ox, c) in p.cols.iter().enumerate() {
                let fx = T::lit(c.frac);
                let top = src[r.lo * p.w + c.lo] * (T::one() - fx) + src[r.lo * p.w + c.hi] * fx;
                let bottom = src[r.hi * p.w + c.lo] * (T::one() - fx) + src[r.hi * p.w + c.hi] * fx;
                dst[oy * p.ow + ox] = top * (T::one() - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let p = plan(input.shape(), out_h, out_w)?;
    let mut shape = input.shape().to_vec();
    shape[2] = out_h;
    shape[3] = out_w;
    Ok(Tensor::from_raw(shape, forward(input.data(), &p)))
}

struct UpsampleBackward(Plan);

impl<T: Real> Backward<T> for UpsampleBackward {
    fn backward(
        &self,
        _parents: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let p = &self.0;
        let mut dx = vec![T::zero(); p.planes * p.h * p.w];
        for n in 0..p.planes {
            let g = &grad[n * p.oh * p.ow..(n + 1) * p.oh * p.ow];
            let d = &mut dx[n * p.h * p.w..(n + 1) * p.h * p.w];
            for (oy, r) in p.rows.iter().enumerate() {
                let fy = T::lit(r.frac);
                for (ox, c) in p.cols.iter().enumerate() {
                    let fx = T::lit(c.frac);
                    let v = g[oy * p.ow + ox];
                    d[r.lo * p.w + c.lo] += v * (T::one() - fy) * (T::one() - fx);
                    d[r.lo * p.w + c.hi] += v * (T::one() - fy) * fx;
                    d[r.hi * p.w + c.lo] += v * fy * (T::one() - fx);
                    d[r.hi * p.w + c.hi] += v * fy * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Tape<T> {
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = upsample_bilinear(self.value(input), out_h, out_w)?;
        let p = plan(self.shape(input), out_h, out_w)?;
        Ok(self.push("upsample_bilinear", out, &[input], Box::new(UpsampleBackward(p))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_matches_coordinate_convention() {
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let u = upsample_bilinear(&t, 1, 4).unwrap();
        assert_eq!(u.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constants_and_identity() {
        let t = Tensor::<f64>::full(vec![2, 3, 4, 5], 0.7);
        let u = upsample_bilinear(&t, 16, 20).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let r = Tensor::from_fn(vec![1, 2, 3, 4], |i| i as f64 * 0.1);
        assert_eq!(upsample_bilinear(&r, 3, 4).unwrap(), r);
    }

    #[test]
    fn rejects_zero_and_shrink() {
        let t = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        assert!(upsample_bilinear(&t, 0, 4).is_err());
        assert!(upsample_bilinear(&t, 2, 4).is_err());
    }
}
