//! Dense row-major tensors and the `.ten` file format.
//!
//! A `.ten` file is a UTF-8 header line `ten v1 <rank> <d0> ... <dtype>\n`
//! followed by the raw little-endian element bytes in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::{DType, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Validating constructor: length must match the shape and every value
    /// must be finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs; callers guarantee the length.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Slice `[index]` of the leading axis.
    pub fn index_first(&self, index: usize) -> Tensor<T> {
        assert!(!self.shape.is_empty() && index < self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header_line(&self.shape, T::DTYPE).into_bytes();
        out.reserve(self.numel() * T::DTYPE.size());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parse a `.ten` blob whose dtype must match `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, dtype, body) = parse_header(bytes)?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                "ten",
                format!("dtype {} where {} expected", dtype.name(), T::DTYPE.name()),
            ));
        }
        let n: usize = shape.iter().product();
        let width = dtype.size();
        if body.len() != n * width {
            return Err(Error::format(
                "ten",
                format!("payload has {} bytes, expected {}", body.len(), n * width),
            ));
        }
        let data = body.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what: format!("{what} file {}", path.display()),
                detail,
            },
            other => other,
        })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

fn header_line(shape: &[usize], dtype: DType) -> String {
    let mut s = format!("ten v1 {}", shape.len());
    for d in shape {
        s.push(' ');
        s.push_str(&d.to_string());
    }
    s.push(' ');
    s.push_str(dtype.name());
    s.push('\n');
    s
}

/// Split a `.ten` blob into (shape, dtype, payload).
pub fn parse_header(bytes: &[u8]) -> Result<(Vec<usize>, DType, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("ten", "missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format("ten", "header is not UTF-8"))?;
    let mut parts = line.split(' ');
    if parts.next() != Some("ten") || parts.next() != Some("v1") {
        return Err(Error::format("ten", format!("bad magic in {line:?}")));
    }
    let rank: usize = parts
        .next()
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::format("ten", "bad rank"))?;
    let fields: Vec<&str> = parts.collect();
    if fields.len() != rank + 1 {
        return Err(Error::format(
            "ten",
            format!("rank {rank} but {} trailing fields", fields.len()),
        ));
    }
    let shape = fields[..rank]
        .iter()
        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::format("ten", format!("bad dimensions in {line:?}")))?;
    let dtype = DType::parse(fields[rank])
        .ok_or_else(|| Error::format("ten", format!("unknown dtype {:?}", fields[rank])))?;
    Ok((shape, dtype, &bytes[nl + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_length_mismatch_and_non_finite() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::<f64>::new(vec![1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn header_is_exact() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = t.to_bytes();
        assert!(bytes.starts_with(b"ten v1 2 2 3 f32\n"));
        assert_eq!(bytes.len(), 17 + 24);
        let s = Tensor::<f64>::scalar(1.5).to_bytes();
        assert!(s.starts_with(b"ten v1 0 f64\n"));
        assert_eq!(&s[13..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_dtype_and_truncation() {
        let t = Tensor::<f32>::ones(vec![4]);
        let bytes = t.to_bytes();
        assert!(Tensor::<f64>::from_bytes(&bytes).is_err());
        assert!(Tensor::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Tensor::<f32>::from_bytes(b"ten v2 1 4 f32\n").is_err());
    }

    proptest! {
        #[test]
        fn ten_round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_add(i as u64) as f64) * 1e-3).sin() * 1e3)
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::<f64>::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
