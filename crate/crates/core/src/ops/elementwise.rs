use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Relu,
    LeakyRelu(f64),
    Log,
    Exp,
    Neg,
    AddConst(f64),
    MulConst(f64),
    Clamp(f64, f64),
    Sigmoid,
}

impl Elementwise {
    fn name(self) -> &'static str {
        match self {
            Elementwise::Relu => "relu",
            Elementwise::LeakyRelu(_) => "leaky_relu",
            Elementwise::Log => "log",
            Elementwise::Exp => "exp",
            Elementwise::Neg => "neg",
            Elementwise::AddConst(_) => "add_const",
            Elementwise::MulConst(_) => "mul_const",
            Elementwise::Clamp(..) => "clamp",
            Elementwise::Sigmoid => "sigmoid",
        }
    }

    fn eval<T: Real>(self, x: T) -> T {
        match self {
            Elementwise::Relu => x.max(T::zero()),
            Elementwise::LeakyRelu(a) => {
                if x >= T::zero() {
                    x
                } else {
                    T::lit(a) * x
                }
            }
            Elementwise::Log => x.ln(),
            Elementwise::Exp => x.exp(),
            Elementwise::Neg => -x,
            Elementwise::AddConst(c) => x + T::lit(c),
            Elementwise::MulConst(c) => x * T::lit(c),
            Elementwise::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
            Elementwise::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Elementwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::LeakyRelu(a) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::lit(a)
                }
            }
            Elementwise::Log => x.recip(),
            Elementwise::Exp => y,
            Elementwise::Neg => -T::one(),
            Elementwise::AddConst(_) => T::one(),
            Elementwise::MulConst(c) => T::lit(c),
            Elementwise::Clamp(lo, hi) => {
                if x >= T::lit(lo) && x <= T::lit(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Apply `kind` to every element without recording.
pub fn apply_elementwise<T: Real>(input: &Tensor<T>, kind: Elementwise) -> Result<Tensor<T>> {
    if kind == Elementwise::Log {
        if let Some(index) = input.data().iter().position(|&v| v <= T::zero()) {
            return Err(Error::LogDomain {
                index,
                value: input.data()[index].as_f64(),
            });
        }
    }
    if let Elementwise::Clamp(lo, hi) = kind {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
    }
    Ok(input.map(|v| kind.eval(v)))
}

struct ElementwiseBackward(Elementwise);

impl<T: Real> Backward<T> for ElementwiseBackward {
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let g = parents[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad)
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward(Binary);

impl<T: Real> Backward<T> for BinaryBackward {
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        match self.0 {
            Binary::Add => vec![
                needs[0].then(|| grad.to_vec()),
                needs[1].then(|| grad.to_vec()),
            ],
            Binary::Sub => vec![
                needs[0].then(|| grad.to_vec()),
                needs[1].then(|| grad.iter().map(|&g| -g).collect()),
            ],
            Binary::Mul => vec![
                needs[0].then(|| {
                    grad.iter().zip(parents[1].data()).map(|(&g, &b)| g * b).collect()
                }),
                needs[1].then(|| {
                    grad.iter().zip(parents[0].data()).map(|(&g, &a)| g * a).collect()
                }),
            ],
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn elementwise(&mut self, input: Var, kind: Elementwise) -> Result<Var> {
        let out = apply_elementwise(self.value(input), kind)?;
        Ok(self.push(kind.name(), out, &[input], Box::new(ElementwiseBackward(kind))))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(x, Elementwise::Relu).expect("relu is total")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.elementwise(x, Elementwise::LeakyRelu(slope))
            .expect("leaky_relu is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.elementwise(x, Elementwise::Exp).expect("exp is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.elementwise(x, Elementwise::Neg).expect("neg is total")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.elementwise(x, Elementwise::AddConst(c))
            .expect("add_const is total")
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.elementwise(x, Elementwise::MulConst(c))
            .expect("mul_const is total")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.elementwise(x, Elementwise::Clamp(lo, hi))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(x, Elementwise::Sigmoid).expect("sigmoid is total")
    }

    /// Same-shape binary op.
    pub fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{op:?}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let out = Tensor::from_raw(va.shape().to_vec(), data);
        let kind = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        Ok(self.push(kind, out, &[a, b], Box::new(BinaryBackward(op))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
}
