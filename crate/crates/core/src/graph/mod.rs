//! Reverse-mode automatic differentiation over dynamically built graphs.
//!
//! A [`Graph`] is rebuilt for every batch: model code appends nodes with
//! ordinary Rust control flow, [`Graph::forward`] evaluates whatever has not
//! been evaluated yet, and [`Graph::backward`] propagates gradients from a
//! scalar loss. Parameters live in the graph across [`Graph::clear`] calls;
//! every other node is discarded and its buffers go back to the arena.
//!
//! Forward evaluation is incremental, so code may build a few nodes, call
//! `forward`, inspect values and keep building. Decoders rely on this for
//! data-dependent decisions such as hard-attention index updates.

mod fused;
pub mod gradcheck;
mod op;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{kernels, Arena, BinaryOp, Element, ReduceOp, Shape, Tensor, UnaryOp};

pub use op::GruNode;
use op::{Cache, GradSink, Op, ValueSource};

/// Layer-norm epsilon used by every normalization in the toolkit.
pub const LN_EPS: f64 = 1e-9;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Param(u32),
    Expr(u32),
}

/// Handle to a node. Cheap to copy; carries the node's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    graph: u32,
    generation: u32,
    slot: Slot,
    pub shape: Shape,
}

impl NodeRef {
    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn is_param(&self) -> bool {
        matches!(self.slot, Slot::Param(_))
    }
}

struct Node<T: Element> {
    op: Op<T>,
    shape: Shape,
    value: Option<Vec<T>>,
    cache: Cache<T>,
    requires_grad: bool,
}

struct Param<T> {
    name: String,
    shape: Shape,
    value: Vec<T>,
}

/// Arguments for [`Graph::gru`].
#[derive(Debug, Clone, Copy)]
pub struct GruArgs {
    pub state: NodeRef,
    pub input: Option<NodeRef>,
    /// `[e, 3d]`, required with an input
    pub w: Option<NodeRef>,
    /// `[d, 3d]`
    pub u: NodeRef,
    /// `[3d]`
    pub b: NodeRef,
    /// layer-norm gain and bias, `[3d]` each
    pub layer_norm: Option<(NodeRef, NodeRef)>,
}

pub struct Graph<T: Element = f32> {
    id: u32,
    generation: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    computed: usize,
    params: Vec<Param<T>>,
    param_grads: Vec<Vec<T>>,
    param_index: HashMap<String, usize>,
    arena: Arena<T>,
    inference: bool,
    rng: ChaCha8Rng,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct Values<'a, T: Element> {
    nodes: &'a [Node<T>],
    params: &'a [Param<T>],
}

impl<T: Element> ValueSource<T> for Values<'_, T> {
    fn value(&self, r: NodeRef) -> &[T] {
        match r.slot {
            Slot::Param(i) => &self.params[i as usize].value,
            Slot::Expr(i) => self.nodes[i as usize]
                .value
                .as_deref()
                .expect("inputs are evaluated before their consumers"),
        }
    }
}

struct Sink<'a, T: Element> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    param_grads: &'a mut [Vec<T>],
    arena: &'a mut Arena<T>,
    error: Option<Error>,
}

impl<T: Element> GradSink<T> for Sink<'_, T> {
    fn grad(&mut self, r: NodeRef) -> Option<&mut [T]> {
        match r.slot {
            Slot::Param(i) => Some(&mut self.param_grads[i as usize]),
            Slot::Expr(i) => {
                let i = i as usize;
                if !self.nodes[i].requires_grad {
                    return None;
                }
                if self.grads[i].is_none() {
                    match self.arena.alloc(r.shape.numel()) {
                        Ok(buf) => self.grads[i] = Some(buf),
                        Err(e) => {
                            self.error.get_or_insert(e);
                            return None;
                        }
                    }
                }
                self.grads[i].as_deref_mut()
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_arena(Arena::unbounded())
    }

    /// A graph whose values and gradients must fit in `capacity_bytes`.
    pub fn with_capacity(capacity_bytes: usize) -> Self {
        Self::with_arena(Arena::new(capacity_bytes))
    }

    fn with_arena(arena: Arena<T>) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            nodes: Vec::new(),
            grads: Vec::new(),
            computed: 0,
            params: Vec::new(),
            param_grads: Vec::new(),
            param_index: HashMap::new(),
            arena,
            inference: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Inference mode skips gradient bookkeeping and turns dropout into the
    /// identity.
    pub fn set_inference(&mut self, inference: bool) {
        self.inference = inference;
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    /// Reseed the generator used for dropout masks.
    pub fn seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn arena(&self) -> &Arena<T> {
        &self.arena
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- parameters ------------------------------------------------------

    /// Register a parameter, or overwrite the value of an existing one with
    /// the same name and shape.
    pub fn set_param(&mut self, name: &str, value: &Tensor<T>) -> Result<NodeRef> {
        if let Some(&i) = self.param_index.get(name) {
            let p = &mut self.params[i];
            if p.shape != value.shape() {
                return Err(shape_err!(
                    "parameter {name} has shape {}, new value {}",
                    p.shape,
                    value.shape()
                ));
            }
            p.value.copy_from_slice(value.data());
            return Ok(self.param_ref(i));
        }
        let i = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: value.shape(),
            value: value.data().to_vec(),
        });
        self.param_grads.push(vec![T::zero(); value.numel()]);
        self.param_index.insert(name.to_string(), i);
        Ok(self.param_ref(i))
    }

    fn param_ref(&self, i: usize) -> NodeRef {
        NodeRef {
            graph: self.id,
            generation: 0,
            slot: Slot::Param(i as u32),
            shape: self.params[i].shape,
        }
    }

    pub fn param(&self, name: &str) -> Result<NodeRef> {
        self.param_index
            .get(name)
            .map(|&i| self.param_ref(i))
            .ok_or_else(|| contract_err!("unknown parameter {name}"))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.param_index.contains_key(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param_value(&self, name: &str) -> Result<Tensor<T>> {
        let i = self.param_slot(name)?;
        Tensor::from_shape(self.params[i].shape, self.params[i].value.clone())
    }

    /// Accumulated gradient of a parameter.
    pub fn param_grad(&self, name: &str) -> Result<Tensor<T>> {
        let i = self.param_slot(name)?;
        Tensor::from_shape(self.params[i].shape, self.param_grads[i].clone())
    }

    pub fn param_grad_slice(&self, name: &str) -> Result<&[T]> {
        let i = self.param_slot(name)?;
        Ok(&self.param_grads[i])
    }

    pub fn param_value_slice(&self, name: &str) -> Result<&[T]> {
        let i = self.param_slot(name)?;
        Ok(&self.params[i].value)
    }

    /// Mutable parameter storage, for optimizers.
    pub fn param_value_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let i = self.param_slot(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn param_grad_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let i = self.param_slot(name)?;
        Ok(&mut self.param_grads[i])
    }

    fn param_slot(&self, name: &str) -> Result<usize> {
        self.param_index
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("unknown parameter {name}"))
    }

    /// Reset accumulated parameter gradients to zero.
    pub fn zero_grads(&mut self) {
        for g in &mut self.param_grads {
            g.fill(T::zero());
        }
    }

    // ---- graph lifetime ---------------------------------------------------

    /// Drop every non-parameter node and recycle its buffers. Outstanding
    /// [`NodeRef`]s to dropped nodes become stale.
    pub fn clear(&mut self) {
        for node in self.nodes.drain(..) {
            if let Some(v) = node.value {
                self.arena.release(v);
            }
        }
        for g in self.grads.drain(..).flatten() {
            self.arena.release(g);
        }
        self.computed = 0;
        self.generation = self.generation.wrapping_add(1);
    }

    fn check(&self, r: NodeRef) -> Result<()> {
        if r.graph != self.id {
            return Err(contract_err!("node belongs to another graph"));
        }
        match r.slot {
            Slot::Param(i) if (i as usize) < self.params.len() => Ok(()),
            Slot::Expr(i) if r.generation == self.generation && (i as usize) < self.nodes.len() => Ok(()),
            _ => Err(contract_err!("stale node reference (graph was cleared)")),
        }
    }

    fn requires_grad(&self, r: NodeRef) -> bool {
        match r.slot {
            Slot::Param(_) => true,
            Slot::Expr(i) => self.nodes[i as usize].requires_grad,
        }
    }

    fn push(&mut self, op: Op<T>, shape: Shape) -> Result<NodeRef> {
        let inputs = op.inputs();
        for r in &inputs {
            self.check(*r)?;
        }
        let requires_grad = !self.inference && inputs.iter().any(|r| self.requires_grad(*r));
        self.push_node(op, shape, None, requires_grad)
    }

    fn push_node(
        &mut self,
        op: Op<T>,
        shape: Shape,
        value: Option<Vec<T>>,
        requires_grad: bool,
    ) -> Result<NodeRef> {
        let i = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            cache: Cache::None,
            requires_grad,
        });
        self.grads.push(None);
        Ok(NodeRef {
            graph: self.id,
            generation: self.generation,
            slot: Slot::Expr(i as u32),
            shape,
        })
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: &Tensor<T>) -> Result<NodeRef> {
        self.leaf(t, false)
    }

    /// Input that receives a gradient (for checking derivatives with
    /// respect to data).
    pub fn variable(&mut self, t: &Tensor<T>) -> Result<NodeRef> {
        self.leaf(t, !self.inference)
    }

    fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<NodeRef> {
        let mut buf = self.arena.alloc(t.numel())?;
        buf.copy_from_slice(t.data());
        if self.computed == self.nodes.len() {
            self.computed += 1;
        }
        self.push_node(Op::Input, t.shape(), Some(buf), requires_grad)
    }

    pub fn zeros(&mut self, dims: &[usize]) -> Result<NodeRef> {
        self.input(&Tensor::zeros(dims)?)
    }

    // ---- evaluation --------------------------------------------------------

    /// Evaluate every node not yet evaluated, in construction order.
    pub fn forward(&mut self) -> Result<()> {
        while self.computed < self.nodes.len() {
            let i = self.computed;
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.value.is_none() {
                let mut out = self.arena.alloc(node.shape.numel())?;
                let vals = Values {
                    nodes: before,
                    params: &self.params,
                };
                let cache = op::eval(&node.op, &node.shape, &vals, &mut out)
                    .map_err(|e| annotate(e, i, node.op.name()))?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite value produced by node {i} ({})",
                        node.op.name()
                    )));
                }
                node.value = Some(out);
                node.cache = cache;
            }
            self.computed += 1;
        }
        Ok(())
    }

    /// Backpropagate from a scalar `loss`. Parameter gradients accumulate
    /// across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: NodeRef) -> Result<()> {
        self.check(loss)?;
        if self.inference {
            return Err(contract_err!("backward() in inference mode"));
        }
        if !loss.shape.is_scalar() {
            return Err(contract_err!("loss must be scalar, got shape {}", loss.shape));
        }
        if self.computed < self.nodes.len() {
            self.forward()?;
        }
        let Slot::Expr(li) = loss.slot else {
            return Err(contract_err!("loss must be an expression node"));
        };
        let li = li as usize;
        for g in self.grads.iter_mut() {
            if let Some(buf) = g.take() {
                self.arena.release(buf);
            }
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        let mut seed = self.arena.alloc(1)?;
        seed[0] = T::one();
        self.grads[li] = Some(seed);
        for i in (0..=li).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut sink = Sink {
                nodes: &self.nodes[..],
                grads: &mut self.grads[..],
                param_grads: &mut self.param_grads[..],
                arena: &mut self.arena,
                error: None,
            };
            let vals = Values {
                nodes: &self.nodes[..],
                params: &self.params[..],
            };
            let result = op::backward(
                &node.op,
                &node.shape,
                node.value.as_deref().expect("forward ran"),
                &node.cache,
                &g,
                &vals,
                &mut sink,
            );
            let err = sink.error.take();
            self.grads[i] = Some(g);
            result.map_err(|e| annotate(e, i, self.nodes[i].op.name()))?;
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn value(&self, r: NodeRef) -> Result<Tensor<T>> {
        Tensor::from_shape(r.shape, self.value_slice(r)?.to_vec())
    }

    pub fn value_slice(&self, r: NodeRef) -> Result<&[T]> {
        self.check(r)?;
        match r.slot {
            Slot::Param(i) => Ok(&self.params[i as usize].value),
            Slot::Expr(i) => self.nodes[i as usize]
                .value
                .as_deref()
                .ok_or_else(|| contract_err!("node {i} has not been evaluated; call forward()")),
        }
    }

    /// Gradient of any node after [`Graph::backward`]; zeros if the node
    /// received no gradient.
    pub fn grad(&self, r: NodeRef) -> Result<Tensor<T>> {
        self.check(r)?;
        match r.slot {
            Slot::Param(i) => Tensor::from_shape(r.shape, self.param_grads[i as usize].clone()),
            Slot::Expr(i) => match &self.grads[i as usize] {
                Some(g) => Tensor::from_shape(r.shape, g.clone()),
                None => Tensor::from_shape(r.shape, vec![T::zero(); r.shape.numel()]),
            },
        }
    }

    // ---- element-wise ------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let shape = Shape::broadcast(&a.shape, &b.shape)?;
        self.push(Op::Binary(op, a, b), shape)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::Unary(op, a), a.shape)
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn tanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn scale(&mut self, a: NodeRef, s: f64) -> Result<NodeRef> {
        self.push(Op::Scale(a, T::from_f64_lossy(s)), a.shape)
    }

    pub fn offset(&mut self, a: NodeRef, s: f64) -> Result<NodeRef> {
        self.push(Op::Offset(a, T::from_f64_lossy(s)), a.shape)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeRef) -> Result<NodeRef> {
        let n = self.scale(a, -1.0)?;
        self.offset(n, 1.0)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand's last
    /// two axes.
    pub fn matmul_t(&mut self, a: NodeRef, b: NodeRef, ta: bool, tb: bool) -> Result<NodeRef> {
        let plan = kernels::MatmulPlan::new(&a.shape, &b.shape, ta, tb)?;
        self.push(Op::MatMul { a, b, ta, tb }, plan.out_shape)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, a: NodeRef, axis: usize, keep: bool) -> Result<NodeRef> {
        if axis >= a.shape.rank() {
            return Err(shape_err!("axis {axis} out of range for {}", a.shape));
        }
        if op == ReduceOp::Argmax {
            return Err(contract_err!("argmax is not differentiable; use Tensor::argmax"));
        }
        self.push(Op::Reduce { op, a, axis }, a.shape.reduced(axis, keep))
    }

    pub fn sum(&mut self, a: NodeRef, axis: usize, keep: bool) -> Result<NodeRef> {
        self.reduce(ReduceOp::Sum, a, axis, keep)
    }

    pub fn mean(&mut self, a: NodeRef, axis: usize, keep: bool) -> Result<NodeRef> {
        self.reduce(ReduceOp::Mean, a, axis, keep)
    }

    pub fn max(&mut self, a: NodeRef, axis: usize, keep: bool) -> Result<NodeRef> {
        self.reduce(ReduceOp::Max, a, axis, keep)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, a: NodeRef) -> Result<NodeRef> {
        let flat = self.reshape(a, &[a.shape.numel()])?;
        self.sum(flat, 0, false)
    }

    // ---- softmax ---------------------------------------------------------------

    /// Softmax along the last axis. `mask` must broadcast to `a`; masked
    /// positions get probability exactly zero.
    pub fn softmax(&mut self, a: NodeRef, mask: Option<&Tensor<T>>) -> Result<NodeRef> {
        let mask = match mask {
            Some(m) => {
                if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                    return Err(contract_err!("softmax mask entries must be 0 or 1"));
                }
                Some(m.broadcast_to(&a.shape)?.into_data())
            }
            None => None,
        };
        self.push(Op::Softmax { a, mask }, a.shape)
    }

    pub fn log_softmax(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::LogSoftmax(a), a.shape)
    }

    // ---- shape manipulation ------------------------------------------------------

    pub fn reshape(&mut self, a: NodeRef, dims: &[usize]) -> Result<NodeRef> {
        let shape = Shape::new(dims)?;
        if shape.numel() != a.shape.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", a.shape));
        }
        if shape == a.shape {
            return Ok(a);
        }
        self.push(Op::Reshape(a), shape)
    }

    pub fn permute(&mut self, a: NodeRef, perm: &[usize]) -> Result<NodeRef> {
        let shape = kernels::permuted_shape(&a.shape, perm)?;
        self.push(Op::Permute(a, perm.to_vec()), shape)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef> {
        let r = a.shape.rank();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {}", a.shape));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[NodeRef], axis: usize) -> Result<NodeRef> {
        let first = inputs
            .first()
            .ok_or_else(|| contract_err!("concat of zero inputs"))?;
        if inputs.len() == 1 {
            return Ok(*first);
        }
        let rank = first.shape.rank();
        if axis >= rank {
            return Err(shape_err!("concat axis {axis} out of range for {}", first.shape));
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = 0;
        for r in inputs {
            let ok = r.shape.rank() == rank
                && (0..rank).all(|i| i == axis || r.shape.dim(i) == first.shape.dim(i));
            if !ok {
                return Err(shape_err!("concat of {} with {} on axis {axis}", first.shape, r.shape));
            }
            dims[axis] += r.shape.dim(axis);
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Shape::new(&dims)?,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: NodeRef, axis: usize, start: usize, len: usize) -> Result<NodeRef> {
        if axis >= a.shape.rank() || len == 0 || start + len > a.shape.dim(axis) {
            return Err(shape_err!(
                "slice [{start}, {}) of axis {axis} out of range for {}",
                start + len,
                a.shape
            ));
        }
        if len == a.shape.dim(axis) {
            return Ok(a);
        }
        let mut dims = a.dims().to_vec();
        dims[axis] = len;
        self.push(Op::Slice { a, axis, start }, Shape::new(&dims)?)
    }

    /// Select entries along axis 0. `None` produces zeros.
    pub fn gather(&mut self, a: NodeRef, rows: &[Option<usize>]) -> Result<NodeRef> {
        let n = a.shape.dim(0);
        if rows.is_empty() {
            return Err(contract_err!("gather of zero rows"));
        }
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= n) {
            return Err(contract_err!("row index {bad} out of range for {}", a.shape));
        }
        let mut dims = a.dims().to_vec();
        dims[0] = rows.len();
        self.push(
            Op::Gather {
                a,
                rows: rows.to_vec(),
            },
            Shape::new(&dims)?,
        )
    }

    /// Gather with plain indices.
    pub fn select_rows(&mut self, a: NodeRef, rows: &[usize]) -> Result<NodeRef> {
        let rows: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        self.gather(a, &rows)
    }

    /// Multiply by a constant tensor broadcastable to `a`.
    pub fn mask_mul(&mut self, a: NodeRef, mask: &Tensor<T>) -> Result<NodeRef> {
        let mask = mask.broadcast_to(&a.shape)?.into_data();
        self.push(Op::MaskMul { a, mask }, a.shape)
    }

    // ---- stochastic ----------------------------------------------------------------

    /// Sample an inverted-dropout mask of the given shape: each entry is 0
    /// with probability `p`, else `1 / (1 - p)`.
    pub fn dropout_mask(&mut self, dims: &[usize], p: f64) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract_err!("dropout probability must be in [0, 1), got {p}"));
        }
        let shape = Shape::new(dims)?;
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let data = (0..shape.numel())
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Tensor::from_shape(shape, data)
    }

    /// Inverted dropout. With `variational_axis`, one mask is sampled with
    /// extent 1 on that axis and reused along it (same mask at every time
    /// step). Identity in inference mode or with `p = 0`.
    pub fn dropout(&mut self, x: NodeRef, p: f64, variational_axis: Option<usize>) -> Result<NodeRef> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract_err!("dropout probability must be in [0, 1), got {p}"));
        }
        if self.inference || p == 0.0 {
            return Ok(x);
        }
        let mut dims = x.dims().to_vec();
        if let Some(axis) = variational_axis {
            if axis >= dims.len() {
                return Err(shape_err!("variational axis {axis} out of range for {}", x.shape));
            }
            dims[axis] = 1;
        }
        let mask = self.dropout_mask(&dims, p)?;
        self.mask_mul(x, &mask)
    }

    // ---- fused operators -------------------------------------------------------------

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeRef, gain: NodeRef, bias: NodeRef) -> Result<NodeRef> {
        let d = x.shape.last();
        if d < 2 {
            return Err(shape_err!("layer norm needs a last axis of at least 2, got {}", x.shape));
        }
        if gain.shape.dims() != [d] || bias.shape.dims() != [d] {
            return Err(shape_err!(
                "layer norm of {} with gain {} and bias {}",
                x.shape,
                gain.shape,
                bias.shape
            ));
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps: T::from_f64_lossy(LN_EPS),
            },
            x.shape,
        )
    }

    /// One fused GRU step; see [`GruArgs`].
    pub fn gru(&mut self, args: GruArgs) -> Result<NodeRef> {
        self.gru_masked(args, None)
    }

    /// GRU step with an optional constant mask applied to the state before
    /// the recurrent product (variational dropout on the hidden state).
    pub fn gru_masked(&mut self, args: GruArgs, h_mask: Option<&Tensor<T>>) -> Result<NodeRef> {
        let h = args.state;
        if h.shape.rank() != 2 {
            return Err(shape_err!("gru state must be [b, d], got {}", h.shape));
        }
        let (b, d) = (h.shape.dim(0), h.shape.dim(1));
        let d3 = 3 * d;
        if args.u.dims() != [d, d3] || args.b.dims() != [d3] {
            return Err(shape_err!(
                "gru state {} with U {} and b {}",
                h.shape,
                args.u.shape,
                args.b.shape
            ));
        }
        match (args.input, args.w) {
            (Some(x), Some(w)) => {
                if x.shape.rank() != 2 || x.shape.dim(0) != b || w.dims() != [x.shape.dim(1), d3] {
                    return Err(shape_err!(
                        "gru input {} with W {} for state {}",
                        x.shape,
                        w.shape,
                        h.shape
                    ));
                }
            }
            (None, _) => {}
            (Some(_), None) => return Err(contract_err!("gru input given without W")),
        }
        if let Some((g, bb)) = args.layer_norm {
            if g.dims() != [d3] || bb.dims() != [d3] {
                return Err(shape_err!("gru layer-norm params must be [{d3}]"));
            }
        }
        let h_mask = match h_mask {
            Some(m) => Some(m.broadcast_to(&h.shape)?.into_data()),
            None => None,
        };
        self.push(
            Op::Gru(Box::new(GruNode {
                h,
                x: args.input,
                w: args.input.and(args.w),
                u: args.u,
                b: args.b,
                ln: args.layer_norm,
                h_mask,
            })),
            h.shape,
        )
    }

    /// Mean cross-entropy over unmasked positions, computed as
    /// `logsumexp(logits) - logit[target]` per row. `logits` is viewed as
    /// `[rows, V]`; `targets` and `mask` have one entry per row.
    pub fn cross_entropy(
        &mut self,
        logits: NodeRef,
        targets: &[usize],
        mask: &[f32],
        smoothing: f64,
    ) -> Result<NodeRef> {
        let vocab = logits.shape.last();
        let rows = logits.shape.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err!(
                "cross entropy over {} needs {rows} targets and mask entries, got {} and {}",
                logits.shape,
                targets.len(),
                mask.len()
            ));
        }
        if let Some(bad) = targets
            .iter()
            .zip(mask)
            .find(|(&t, &m)| m != 0.0 && t >= vocab)
        {
            return Err(contract_err!("target id {} out of vocabulary of size {vocab}", bad.0));
        }
        if !mask.iter().any(|&m| m != 0.0) {
            return Err(contract_err!("cross entropy with an all-zero mask"));
        }
        let targets = targets
            .iter()
            .zip(mask)
            .map(|(&t, &m)| if m != 0.0 { t } else { 0 })
            .collect();
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                mask: mask.iter().map(|&m| T::from_f64_lossy(m as f64)).collect(),
                smoothing: T::from_f64_lossy(smoothing),
            },
            Shape::scalar(),
        )
    }
}

fn annotate(e: Error, index: usize, name: &str) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} (node {index}, {name})")),
        Error::Shape(msg) => Error::Shape(format!("{msg} (node {index}, {name})")),
        other => other,
    }
}
