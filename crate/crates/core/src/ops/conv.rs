//! 2-D convolution (NCHW) via im2col and a dense matrix product.

use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent for one spatial axis, or `None` when no window fits.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims(x: &[usize], w: &[usize], b: &[usize], g: ConvGeometry) -> Result<Dims> {
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::InvalidArgument(
            "conv2d stride and dilation must be >= 1".into(),
        ));
    }
    let [batch, cin, h, wd] = *x else {
        return Err(Error::Shape(format!("conv2d input must be 4-D, got {x:?}")));
    };
    let [cout, wcin, kh, kw] = *w else {
        return Err(Error::Shape(format!("conv2d weight must be 4-D, got {w:?}")));
    };
    if kh != kw {
        return Err(Error::Shape(format!("conv2d kernel must be square, got {w:?}")));
    }
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    if b != [cout] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {b:?} does not match {cout} output channels"
        )));
    }
    let (Some(oh), Some(ow)) = (g.output_extent(h, kh), g.output_extent(wd, kw)) else {
        return Err(Error::Shape(format!(
            "conv2d output extent is empty for input {h}x{wd}, kernel {kh}, {g:?}"
        )));
    };
    Ok(Dims {
        batch,
        cin,
        h,
        w: wd,
        cout,
        k: kh,
        oh,
        ow,
    })
}

/// Output columns `[lo, hi)` whose input column `ox * stride + offset`
/// lies inside `[0, width)`.
fn valid_range(offset: isize, stride: usize, width: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let last = width as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    let hi = hi.min(out);
    (lo.min(hi), hi)
}

/// Fill columns `[col0, col0 + out_plane)` of `cols` (patch x stride) from
/// one image `x` (cin x h x w).
fn im2col<T: Real>(x: &[T], d: &Dims, g: ConvGeometry, cols: &mut [T], stride: usize, col0: usize) {
    for c in 0..d.cin {
        let src = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * stride + col0..row * stride + col0 + d.out_plane()];
                let dy = (ki * g.dilation) as isize - g.padding as isize;
                let dx = (kj * g.dilation) as isize - g.padding as isize;
                for oy in 0..d.oh {
                    let iy = (oy * g.stride) as isize + dy;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let (lo, hi) = valid_range(dx, g.stride, d.w, d.ow);
                    out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                    out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let first = (lo * g.stride) as isize + dx;
                        let src = &src_row[first as usize..];
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                                *v = src[j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns `[col0, col0 + out_plane)` of `cols` back into an
/// image-shaped gradient buffer.
fn col2im<T: Real>(cols: &[T], d: &Dims, g: ConvGeometry, dx_img: &mut [T], stride: usize, col0: usize) {
    for c in 0..d.cin {
        let dst = &mut dx_img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * stride + col0..row * stride + col0 + d.out_plane()];
                let dy = (ki * g.dilation) as isize - g.padding as isize;
                let dxo = (kj * g.dilation) as isize - g.padding as isize;
                for oy in 0..d.oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let (lo, hi) = valid_range(dxo, g.stride, d.w, d.ow);
                    if lo < hi {
                        let first = ((lo * g.stride) as isize + dxo) as usize;
                        let row = &src[oy * d.ow + lo..oy * d.ow + hi];
                        for (j, &v) in row.iter().enumerate() {
                            dst_row[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution as one matrix product over the whole batch:
/// `[Cout, patch] x [patch, B*plane]`. Returns the output and, when
/// `keep_cols`, the column buffer for the weight gradient.
fn forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    d: &Dims,
    g: ConvGeometry,
    keep_cols: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let plane = d.out_plane();
    let in_img = d.cin * d.h * d.w;
    let wide = d.batch * plane;
    let mut cols = vec![T::zero(); d.patch() * wide];
    for n in 0..d.batch {
        im2col(&x.data()[n * in_img..(n + 1) * in_img], d, g, &mut cols, wide, n * plane);
    }
    let mut tmp = vec![T::zero(); d.cout * wide];
    gemm(d.cout, d.patch(), wide, w.data(), false, &cols, false, T::zero(), &mut tmp);
    let mut out = vec![T::zero(); d.batch * d.cout * plane];
    for co in 0..d.cout {
        let bias = b.data()[co];
        for n in 0..d.batch {
            let src = &tmp[co * wide + n * plane..co * wide + (n + 1) * plane];
            let dst = &mut out[(n * d.cout + co) * plane..(n * d.cout + co + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v + bias;
            }
        }
    }
    (
        Tensor::from_raw(vec![d.batch, d.cout, d.oh, d.ow], out),
        keep_cols.then_some(cols),
    )
}

/// Convolution without recording: `input[B,Cin,H,W]`, `weight[Cout,Cin,k,k]`,
/// `bias[Cout]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geometry: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), weight.shape(), bias.shape(), geometry)?;
    Ok(forward(input, weight, bias, &d, geometry, false).0)
}

struct Conv2dBackward<T> {
    dims: Dims,
    geometry: ConvGeometry,
    cols: Option<Vec<T>>,
}

impl<T: Real> Backward<T> for Conv2dBackward<T> {
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let d = &self.dims;
        let plane = d.out_plane();
        let in_img = d.cin * d.h * d.w;
        let wide = d.batch * plane;
        let weight = parents[1];

        // Output gradient regrouped as [Cout, B*plane].
        let mut g = vec![T::zero(); d.cout * wide];
        for n in 0..d.batch {
            for co in 0..d.cout {
                let src = &grad[(n * d.cout + co) * plane..(n * d.cout + co + 1) * plane];
                g[co * wide + n * plane..co * wide + (n + 1) * plane].copy_from_slice(src);
            }
        }

        let grad_input = needs[0].then(|| {
            let mut dcols = vec![T::zero(); d.patch() * wide];
            gemm(d.patch(), d.cout, wide, weight.data(), true, &g, false, T::zero(), &mut dcols);
            let mut dx = vec![T::zero(); d.batch * in_img];
            for n in 0..d.batch {
                col2im(&dcols, d, self.geometry, &mut dx[n * in_img..(n + 1) * in_img], wide, n * plane);
            }
            dx
        });

        let grad_weight = needs[1].then(|| {
            let cols = self.cols.as_ref().expect("columns saved when weight needs a gradient");
            let mut dw = vec![T::zero(); d.cout * d.patch()];
            gemm(d.cout, wide, d.patch(), &g, false, cols, true, T::zero(), &mut dw);
            dw
        });

        let grad_bias = needs[2].then(|| {
            g.chunks_exact(wide)
                .map(|row| row.iter().copied().sum::<T>())
                .collect()
        });

        vec![grad_input, grad_weight, grad_bias]
    }
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
        let d = conv_dims(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            geometry,
        )?;
        let keep_cols = self.requires_grad(weight);
        let (out, cols) = forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &d,
            geometry,
            keep_cols,
        );
        Ok(self.push(
            "conv2d",
            out,
            &[input, weight, bias],
            Box::new(Conv2dBackward {
                dims: d,
                geometry,
                cols,
            }),
        ))
    }
}
