use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Maps each input flat index to its output flat index.
fn index_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() || reduced[a] {
            return Err(Error::InvalidArgument(format!(
                "invalid reduction axes {axes:?} for shape {shape:?}"
            )));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let count: usize = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| r)
        .map(|(&d, _)| d)
        .product();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        let mut o = 0;
        for (d, (&i, &r)) in idx.iter().zip(&reduced).enumerate() {
            if !r {
                o = o * shape[d] + i;
            }
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((map, out_shape, count))
}

/// Sum or mean over `axes`; an empty `axes` reduces everything to a scalar.
pub fn reduce<T: Real>(input: &Tensor<T>, kind: Reduction, axes: &[usize]) -> Result<Tensor<T>> {
    Ok(reduce_with_map(input, kind, axes)?.0)
}

fn reduce_with_map<T: Real>(
    input: &Tensor<T>,
    kind: Reduction,
    axes: &[usize],
) -> Result<(Tensor<T>, Option<Vec<usize>>, usize)> {
    if axes.is_empty() || axes.len() == input.rank() {
        if !axes.is_empty() {
            index_map(input.shape(), axes)?;
        }
        let n = input.numel();
        let total = input.sum();
        let v = match kind {
            Reduction::Sum => total,
            Reduction::Mean => total / T::lit(n as f64),
        };
        return Ok((Tensor::scalar(v), None, n));
    }
    let (map, out_shape, count) = index_map(input.shape(), axes)?;
    let out_n: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); out_n];
    for (&o, &v) in map.iter().zip(input.data()) {
        out[o] += v;
    }
    if kind == Reduction::Mean {
        let scale = T::lit(count as f64).recip();
        out.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((Tensor::from_raw(out_shape, out), Some(map), count))
}

struct ReduceBackward {
    kind: Reduction,
    map: Option<Vec<usize>>,
    count: usize,
    numel: usize,
}

impl<T: Real> Backward<T> for ReduceBackward {
    fn backward(
        &self,
        _parents: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let scale = match self.kind {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::lit(self.count as f64).recip(),
        };
        let g = match &self.map {
            None => vec![grad[0] * scale; self.numel],
            Some(map) => map.iter().map(|&o| grad[o] * scale).collect(),
        };
        vec![Some(g)]
    }
}

impl<T: Real> Tape<T> {
    pub fn reduce(&mut self, input: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        let numel = self.value(input).numel();
        let (out, map, count) = reduce_with_map(self.value(input), kind, axes)?;
        let name = match kind {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        Ok(self.push(
            name,
            out,
            &[input],
            Box::new(ReduceBackward {
                kind,
                map,
                count,
                numel,
            }),
        ))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        self.reduce(input, Reduction::Sum, &[]).expect("full reduction")
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        self.reduce(input, Reduction::Mean, &[]).expect("full reduction")
    }
}
