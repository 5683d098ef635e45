//! Dense row-major tensors.
//!
//! Everything above this module (graph, layers, models) computes on
//! [`Tensor`] values. The heavy lifting lives in [`kernels`], which works on
//! plain slices so the graph engine can write into arena-provided buffers
//! without going through a `Tensor` allocation.

mod arena;
pub mod kernels;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{contract_err, shape_err, Error, Result};

pub use arena::Arena;

pub const MAX_RANK: usize = 4;

/// Floating-point element type. `f32` is the working precision, `f64` is
/// used for gradient checking.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const NAME: &'static str;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("float conversion")
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";
}

impl Element for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(shape_err!("rank must be in 1..={MAX_RANK}, got {dims:?}"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero extent in {dims:?}"));
        }
        let mut d = [1; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Shape {
            dims: d,
            rank: dims.len(),
        })
    }

    pub fn scalar() -> Self {
        Shape {
            dims: [1; MAX_RANK],
            rank: 1,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    /// Extent of the last axis.
    pub fn last(&self) -> usize {
        self.dims[self.rank - 1]
    }

    /// Number of rows when the tensor is viewed as `[rows, last]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Trailing-dimension broadcasting: extents are matched right to left
    /// and an extent of 1 stretches.
    pub fn broadcast(a: &Shape, b: &Shape) -> Result<Shape> {
        let rank = a.rank.max(b.rank);
        let mut out = [1usize; MAX_RANK];
        for i in 0..rank {
            let da = if i < a.rank { a.dims[a.rank - 1 - i] } else { 1 };
            let db = if i < b.rank { b.dims[b.rank - 1 - i] } else { 1 };
            out[rank - 1 - i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(shape_err!("cannot broadcast {a} with {b}")),
            };
        }
        Shape::new(&out[..rank])
    }

    /// Dims left-padded with ones to `MAX_RANK`.
    pub(crate) fn padded(&self) -> [usize; MAX_RANK] {
        let mut d = [1; MAX_RANK];
        d[MAX_RANK - self.rank..].copy_from_slice(self.dims());
        d
    }

    /// Shape with `axis` removed (or kept with extent 1).
    pub fn reduced(&self, axis: usize, keep: bool) -> Shape {
        let mut dims: Vec<usize> = self.dims().to_vec();
        if keep || self.rank == 1 {
            dims[axis] = 1;
        } else {
            dims.remove(axis);
        }
        Shape::new(&dims).expect("reduced shape is valid")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
    /// Index of the maximum, ties resolved toward the lowest index. The
    /// index is stored as a float value.
    Argmax,
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{}[{} values]", self.shape, self.data.len())
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "{} values do not fill shape {shape}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[T]) -> Result<Self> {
        Self::new(&[values.len()], values.to_vec())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Build from `f64` values (handy in tests and for constants).
    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(contract_err!("item() on tensor of shape {}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of the tensor viewed as `[rows, last]`.
    pub fn row(&self, i: usize) -> &[T] {
        let n = self.shape.last();
        &self.data[i * n..(i + 1) * n]
    }

    /// Matrix product. Rank-2 operands multiply directly; equal-rank
    /// operands with matching leading dims multiply batch-wise; a higher
    /// rank left operand against a rank-2 right operand is flattened.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let plan = kernels::MatmulPlan::new(&self.shape, &other.shape, false, false)?;
        let mut out = vec![T::zero(); plan.out_shape.numel()];
        plan.run(&self.data, &other.data, &mut out, false);
        Self::from_shape(plan.out_shape, out)
    }

    pub fn ewise(&self, op: BinaryOp, other: &Tensor<T>) -> Result<Self> {
        let shape = Shape::broadcast(&self.shape, &other.shape)?;
        if op == BinaryOp::Div && other.data.iter().any(|v| *v == T::zero()) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let mut out = vec![T::zero(); shape.numel()];
        kernels::binary(
            op,
            &self.data,
            &self.shape,
            &other.data,
            &other.shape,
            &shape,
            &mut out,
        );
        Self::from_shape(shape, out)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.ewise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.ewise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.ewise(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Self> {
        self.ewise(BinaryOp::Div, other)
    }

    pub fn map(&self, op: UnaryOp) -> Result<Self> {
        if op == UnaryOp::Log && self.data.iter().any(|v| *v <= T::zero()) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        if op == UnaryOp::Sqrt && self.data.iter().any(|v| *v < T::zero()) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| op.apply(v)).collect(),
        })
    }

    pub fn reduce(&self, op: ReduceOp, axis: usize, keep: bool) -> Result<Self> {
        if axis >= self.shape.rank() {
            return Err(shape_err!(
                "axis {axis} out of range for rank {}",
                self.shape.rank()
            ));
        }
        let out_shape = self.shape.reduced(axis, keep);
        let mut out = vec![T::zero(); out_shape.numel()];
        kernels::reduce(op, &self.data, &self.shape, axis, &mut out);
        Self::from_shape(out_shape, out)
    }

    pub fn sum(&self, axis: usize) -> Result<Self> {
        self.reduce(ReduceOp::Sum, axis, false)
    }

    pub fn mean(&self, axis: usize) -> Result<Self> {
        self.reduce(ReduceOp::Mean, axis, false)
    }

    /// Argmax along `axis` as plain indices.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let t = self.reduce(ReduceOp::Argmax, axis, false)?;
        Ok(t.data.iter().map(|v| v.as_f64() as usize).collect())
    }

    /// Softmax along the last axis. `mask` entries are 0 or 1; masked
    /// positions get exactly zero probability.
    pub fn softmax(&self, mask: Option<&Tensor<T>>) -> Result<Self> {
        let mask = match mask {
            Some(m) => Some(m.broadcast_to(&self.shape)?),
            None => None,
        };
        let mut out = vec![T::zero(); self.numel()];
        kernels::softmax(
            &self.data,
            mask.as_ref().map(|m| m.data()),
            self.shape.last(),
            &mut out,
        )?;
        Self::from_shape(self.shape, out)
    }

    /// Materialize a broadcast copy with the given target shape.
    pub fn broadcast_to(&self, shape: &Shape) -> Result<Self> {
        let target = Shape::broadcast(&self.shape, shape)?;
        if target != *shape {
            return Err(shape_err!("cannot broadcast {} to {shape}", self.shape));
        }
        if self.shape == *shape {
            return Ok(self.clone());
        }
        let zeros = vec![T::zero(); shape.numel()];
        let mut out = vec![T::zero(); shape.numel()];
        kernels::binary(
            BinaryOp::Add,
            &zeros,
            shape,
            &self.data,
            &self.shape,
            shape,
            &mut out,
        );
        Self::from_shape(*shape, out)
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.shape.rank();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {}", self.shape));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let out_shape = kernels::permuted_shape(&self.shape, perm)?;
        let mut out = vec![T::zero(); self.numel()];
        kernels::permute(&self.data, &self.shape, perm, &mut out);
        Self::from_shape(out_shape, out)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
