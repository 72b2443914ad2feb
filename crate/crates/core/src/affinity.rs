//! Neighbourhood affinity in the softmax output space.
//!
//! Two views of how a pixel's class distribution relates to its neighbours:
//!
//! * cosine affinity, a scalar per pixel averaged over in-bounds neighbours,
//!   which drives the cleaning loss ([`asc_loss`]) and model selection
//!   ([`mean_affinity`]);
//! * the per-class binary KL tensor ([`build_affinity_space`]) with `N*C`
//!   channels, which is what the discriminator sees.
//!
//! Neighbours that fall outside the image are excluded from cosine averages
//! and contribute an all-zero block to the KL tensor.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Guard added to the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::InvalidArgument(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Ordered neighbour offsets `(dy, dx)`: up, down, left, right, then the
/// diagonals clockwise from up-left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    connectivity: Connectivity,
    offsets: Vec<(isize, isize)>,
}

const AXIAL: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAGONAL: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, 1), (1, -1)];

impl NeighborhoodSpec {
    pub fn new(connectivity: Connectivity) -> Self {
        let mut offsets = AXIAL.to_vec();
        if connectivity == Connectivity::Eight {
            offsets.extend_from_slice(&DIAGONAL);
        }
        NeighborhoodSpec { connectivity, offsets }
    }

    pub fn four() -> Self {
        Self::new(Connectivity::Four)
    }

    pub fn eight() -> Self {
        Self::new(Connectivity::Eight)
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Number of neighbours `N`.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Neighbour of `(y, x)` at offset `n`, if inside an `h x w` grid.
    #[inline]
    pub fn neighbor(&self, n: usize, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (dy, dx) = self.offsets[n];
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then_some((ny as usize, nx as usize))
    }
}

/// Per-pixel mean cosine similarity to in-bounds neighbours, for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMap<T> {
    pub values: Tensor<T>,
    pub valid_count: Vec<u8>,
}

impl<T: Real> AffinityMap<T> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().map(|v| v.as_f64()).sum::<f64>() / self.values.numel() as f64
    }
}

/// Channel-last copy `[B, H*W, C]` of a `[B,C,H,W]` tensor plus its dims.
fn channels_last<T: Real>(p: &Tensor<T>) -> Result<(Vec<T>, [usize; 4])> {
    let [b, c, h, w] = *p.shape() else {
        return Err(Error::Shape(format!("expected [B,C,H,W] predictions, got {:?}", p.shape())));
    };
    let plane = h * w;
    let src = p.data();
    let mut out = vec![T::zero(); src.len()];
    for n in 0..b {
        for k in 0..c {
            let s = &src[(n * c + k) * plane..(n * c + k + 1) * plane];
            for (q, &v) in s.iter().enumerate() {
                out[(n * plane + q) * c + k] = v;
            }
        }
    }
    Ok((out, [b, c, h, w]))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `a.b / (|a| |b| + 1e-12)`.
pub fn pair_cosine<T: Real>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b) + T::lit(COSINE_EPS))
}

/// Cosine affinity map for each batch item of softmax predictions `[B,C,H,W]`.
pub fn cosine_affinity<T: Real>(p: &Tensor<T>, spec: &NeighborhoodSpec) -> Result<Vec<AffinityMap<T>>> {
    let (cl, [b, c, h, w]) = channels_last(p)?;
    let plane = h * w;
    let mut maps = Vec::with_capacity(b);
    for n in 0..b {
        let px = |y: usize, x: usize| &cl[(n * plane + y * w + x) * c..(n * plane + y * w + x + 1) * c];
        let mut values = vec![T::zero(); plane];
        let mut counts = vec![0u8; plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                let mut k = 0u8;
                for nb in 0..spec.len() {
                    if let Some((ny, nx)) = spec.neighbor(nb, y, x, h, w) {
                        acc += pair_cosine(px(y, x), px(ny, nx));
                        k += 1;
                    }
                }
                values[y * w + x] = if k > 0 {
                    (acc / T::lit(k as f64)).max(T::zero()).min(T::one())
                } else {
                    T::one()
                };
                counts[y * w + x] = k;
            }
        }
        maps.push(AffinityMap {
            values: Tensor::from_raw(vec![h, w], values),
            valid_count: counts,
        });
    }
    Ok(maps)
}

/// Mean of the cosine affinity map over all pixels of all batch items.
pub fn mean_affinity<T: Real>(p: &Tensor<T>, spec: &NeighborhoodSpec) -> Result<f64> {
    let maps = cosine_affinity(p, spec)?;
    Ok(maps.iter().map(AffinityMap::mean).sum::<f64>() / maps.len() as f64)
}

/// Work done by one affinity kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AffinityWork {
    /// `(pixel, offset)` slots visited, including out-of-bounds ones.
    pub slots: usize,
    /// In-bounds neighbour pairs evaluated.
    pub pairs: usize,
}

/// Forward value of the cleaning loss:
/// `mean_x (1/|N_in(x)|) sum_{n in N_in(x)} (1 - cos(P_x, P_n))`.
fn asc_forward<T: Real>(cl: &[T], dims: [usize; 4], spec: &NeighborhoodSpec) -> (T, AffinityWork) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut work = AffinityWork::default();
    let mut total = T::zero();
    for n in 0..b {
        let px = |y: usize, x: usize| &cl[(n * plane + y * w + x) * c..(n * plane + y * w + x + 1) * c];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                let mut k = 0usize;
                for nb in 0..spec.len() {
                    work.slots += 1;
                    if let Some((ny, nx)) = spec.neighbor(nb, y, x, h, w) {
                        acc += T::one() - pair_cosine(px(y, x), px(ny, nx));
                        k += 1;
                    }
                }
                work.pairs += k;
                if k > 0 {
                    total += acc / T::lit(k as f64);
                }
            }
        }
    }
    (total / T::lit((b * plane) as f64), work)
}

/// Value of the cleaning loss without recording.
pub fn asc_value<T: Real>(p: &Tensor<T>, spec: &NeighborhoodSpec) -> Result<T> {
    let (cl, dims) = channels_last(p)?;
    Ok(asc_forward(&cl, dims, spec).0)
}

/// Like [`asc_value`], also reporting the work done.
pub fn asc_value_counted<T: Real>(p: &Tensor<T>, spec: &NeighborhoodSpec) -> Result<(T, AffinityWork)> {
    let (cl, dims) = channels_last(p)?;
    Ok(asc_forward(&cl, dims, spec))
}

struct AscBackward {
    spec: NeighborhoodSpec,
    dims: [usize; 4],
}

impl<T: Real> Backward<T> for AscBackward {
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let [b, c, h, w] = self.dims;
        let plane = h * w;
        let (cl, _) = channels_last(parents[0]).expect("shape checked in forward");
        let norms: Vec<T> = cl.chunks_exact(c).map(norm).collect();
        let mut g = vec![T::zero(); cl.len()];
        let scale = grad[0] / T::lit((b * plane) as f64);
        let eps = T::lit(COSINE_EPS);
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let i = n * plane + y * w + x;
                    let k = (0..self.spec.len())
                        .filter(|&nb| self.spec.neighbor(nb, y, x, h, w).is_some())
                        .count();
                    if k == 0 {
                        continue;
                    }
                    // d(1 - cos)/d. weighted by scale / k
                    let wgt = -scale / T::lit(k as f64);
                    for nb in 0..self.spec.len() {
                        let Some((ny, nx)) = self.spec.neighbor(nb, y, x, h, w) else { continue };
                        let j = n * plane + ny * w + nx;
                        let a = &cl[i * c..(i + 1) * c];
                        let bv = &cl[j * c..(j + 1) * c];
                        let (na, nbn) = (norms[i], norms[j]);
                        let s = dot(a, bv);
                        let d = na * nbn + eps;
                        let inv_d = d.recip();
                        let coef = s * inv_d * inv_d;
                        // d cos / d a = b/D - s/D^2 * |b| a/|a|
                        let ca = if na > T::zero() { coef * nbn / na } else { T::zero() };
                        let cb = if nbn > T::zero() { coef * na / nbn } else { T::zero() };
                        for q in 0..c {
                            g[i * c + q] += wgt * (bv[q] * inv_d - ca * a[q]);
                            g[j * c + q] += wgt * (a[q] * inv_d - cb * bv[q]);
                        }
                    }
                }
            }
        }
        vec![Some(to_channels_first(&g, self.dims))]
    }
}

fn to_channels_first<T: Real>(cl: &[T], [b, c, h, w]: [usize; 4]) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); cl.len()];
    for n in 0..b {
        for q in 0..plane {
            for k in 0..c {
                out[(n * c + k) * plane + q] = cl[(n * plane + q) * c + k];
            }
        }
    }
    out
}

/// Componentwise binary KL between two class-probability vectors, after
/// clamping both to `[1e-7, 1 - 1e-7]`.
pub fn binary_kl_vector<T: Real>(px: &[T], pn: &[T]) -> Vec<T> {
    px.iter().zip(pn).map(|(&p, &q)| binary_kl(p, q)).collect()
}

#[inline]
fn clamp_prob<T: Real>(p: T) -> T {
    p.max(T::lit(PROB_CLAMP)).min(T::lit(1.0 - PROB_CLAMP))
}

#[inline]
fn in_clamp_range<T: Real>(p: T) -> bool {
    p >= T::lit(PROB_CLAMP) && p <= T::lit(1.0 - PROB_CLAMP)
}

#[inline]
fn binary_kl<T: Real>(p: T, q: T) -> T {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    let one = T::one();
    let v = p * (p / q).ln() + (one - p) * ((one - p) / (one - q)).ln();
    v.max(T::zero())
}

fn affinity_forward<T: Real>(cl: &[T], dims: [usize; 4], spec: &NeighborhoodSpec) -> (Tensor<T>, AffinityWork) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let nc = spec.len() * c;
    let mut out = vec![T::zero(); b * nc * plane];
    let mut work = AffinityWork::default();
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let i = n * plane + y * w + x;
                for nb in 0..spec.len() {
                    work.slots += 1;
                    let Some((ny, nx)) = spec.neighbor(nb, y, x, h, w) else { continue };
                    work.pairs += 1;
                    let j = n * plane + ny * w + nx;
                    for k in 0..c {
                        let ch = nb * c + k;
                        out[(n * nc + ch) * plane + y * w + x] = binary_kl(cl[i * c + k], cl[j * c + k]);
                    }
                }
            }
        }
    }
    (Tensor::from_raw(vec![b, nc, h, w], out), work)
}

/// The `[B, N*C, H, W]` binary-KL affinity tensor of softmax predictions,
/// without recording. Channel block `n` holds the KL vector against the
/// neighbour at `spec.offsets()[n]`.
pub fn affinity_space<T: Real>(p: &Tensor<T>, spec: &NeighborhoodSpec) -> Result<Tensor<T>> {
    let (cl, dims) = channels_last(p)?;
    Ok(affinity_forward(&cl, dims, spec).0)
}

/// Like [`affinity_space`], also reporting the work done.
pub fn affinity_space_counted<T: Real>(p: &Tensor<T>, spec: &NeighborhoodSpec) -> Result<(Tensor<T>, AffinityWork)> {
    let (cl, dims) = channels_last(p)?;
    Ok(affinity_forward(&cl, dims, spec))
}

struct AffinitySpaceBackward {
    spec: NeighborhoodSpec,
    dims: [usize; 4],
}

impl<T: Real> Backward<T> for AffinitySpaceBackward {
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let [b, c, h, w] = self.dims;
        let plane = h * w;
        let nc = self.spec.len() * c;
        let p = parents[0].data();
        let mut g = vec![T::zero(); p.len()];
        let one = T::one();
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for nb in 0..self.spec.len() {
                        let Some((ny, nx)) = self.spec.neighbor(nb, y, x, h, w) else { continue };
                        for k in 0..c {
                            let up = grad[(n * nc + nb * c + k) * plane + y * w + x];
                            if up == T::zero() {
                                continue;
                            }
                            let ix = (n * c + k) * plane + y * w + x;
                            let jx = (n * c + k) * plane + ny * w + nx;
                            let (pr, qr) = (p[ix], p[jx]);
                            let (pc, qc) = (clamp_prob(pr), clamp_prob(qr));
                            if in_clamp_range(pr) {
                                g[ix] += up * ((pc / qc).ln() - ((one - pc) / (one - qc)).ln());
                            }
                            if in_clamp_range(qr) {
                                g[jx] += up * ((one - pc) / (one - qc) - pc / qc);
                            }
                        }
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Real> Tape<T> {
    /// Cleaning loss of softmax predictions `[B,C,H,W]`; a scalar in `[0, 1]`.
    pub fn asc_loss(&mut self, p: Var, spec: &NeighborhoodSpec) -> Result<Var> {
        let (cl, dims) = channels_last(self.value(p))?;
        let (v, _) = asc_forward(&cl, dims, spec);
        Ok(self.push(
            "asc_loss",
            Tensor::scalar(v),
            &[p],
            Box::new(AscBackward { spec: spec.clone(), dims }),
        ))
    }

    /// Binary-KL affinity tensor `[B, N*C, H, W]` of softmax predictions.
    pub fn build_affinity_space(&mut self, p: Var, spec: &NeighborhoodSpec) -> Result<Var> {
        let (cl, dims) = channels_last(self.value(p))?;
        let (out, _) = affinity_forward(&cl, dims, spec);
        Ok(self.push(
            "affinity_space",
            out,
            &[p],
            Box::new(AffinitySpaceBackward { spec: spec.clone(), dims }),
        ))
    }
}
