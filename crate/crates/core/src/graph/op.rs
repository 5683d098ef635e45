use super::fused::{self, GruCache, GruDims, GruGrads, GruParams};
use super::NodeRef;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, MatmulPlan};
use crate::tensor::{BinaryOp, Element, ReduceOp, Shape, UnaryOp};

/// Arguments of a fused GRU node.
#[derive(Debug, Clone)]
pub struct GruNode<T> {
    pub h: NodeRef,
    pub x: Option<NodeRef>,
    pub w: Option<NodeRef>,
    pub u: NodeRef,
    pub b: NodeRef,
    /// layer-norm gain and bias, each `[3d]`
    pub ln: Option<(NodeRef, NodeRef)>,
    pub h_mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Input,
    Binary(BinaryOp, NodeRef, NodeRef),
    Unary(UnaryOp, NodeRef),
    Scale(NodeRef, T),
    Offset(NodeRef, T),
    MatMul {
        a: NodeRef,
        b: NodeRef,
        ta: bool,
        tb: bool,
    },
    Reduce {
        op: ReduceOp,
        a: NodeRef,
        axis: usize,
    },
    Softmax {
        a: NodeRef,
        mask: Option<Vec<T>>,
    },
    LogSoftmax(NodeRef),
    Reshape(NodeRef),
    Permute(NodeRef, Vec<usize>),
    Concat {
        inputs: Vec<NodeRef>,
        axis: usize,
    },
    Slice {
        a: NodeRef,
        axis: usize,
        start: usize,
    },
    /// Rows of `a` viewed as `[n, rest]`; `None` yields a zero row.
    Gather {
        a: NodeRef,
        rows: Vec<Option<usize>>,
    },
    /// Multiply by a constant tensor of the same shape (dropout, masks).
    MaskMul {
        a: NodeRef,
        mask: Vec<T>,
    },
    LayerNorm {
        x: NodeRef,
        gain: NodeRef,
        bias: NodeRef,
        eps: T,
    },
    Gru(Box<GruNode<T>>),
    CrossEntropy {
        logits: NodeRef,
        targets: Vec<usize>,
        mask: Vec<T>,
        smoothing: T,
    },
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Binary(BinaryOp::Div, ..) => "div",
            Op::Unary(UnaryOp::Neg, _) => "neg",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Exp, _) => "exp",
            Op::Unary(UnaryOp::Log, _) => "log",
            Op::Unary(UnaryOp::Sqrt, _) => "sqrt",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul { .. } => "matmul",
            Op::Reduce {
                op: ReduceOp::Sum, ..
            } => "sum",
            Op::Reduce {
                op: ReduceOp::Mean,
                ..
            } => "mean",
            Op::Reduce { .. } => "max",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::MaskMul { .. } => "mask_mul",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gru(_) => "gru_cell",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub fn inputs(&self) -> Vec<NodeRef> {
        match self {
            Op::Input => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::Permute(a, _) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Reduce { a, .. }
            | Op::Softmax { a, .. }
            | Op::Slice { a, .. }
            | Op::Gather { a, .. }
            | Op::MaskMul { a, .. } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gru(g) => {
                let mut v = vec![g.h, g.u, g.b];
                v.extend(g.x);
                v.extend(g.w);
                if let Some((a, b)) = g.ln {
                    v.push(a);
                    v.push(b);
                }
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Forward-pass intermediates kept for the backward pass.
pub enum Cache<T> {
    None,
    Values(Vec<T>),
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    Gru(GruCache<T>),
}

/// Read access to already computed values.
pub trait ValueSource<T> {
    fn value(&self, r: NodeRef) -> &[T];
}

pub fn eval<T: Element, V: ValueSource<T>>(
    op: &Op<T>,
    shape: &Shape,
    vals: &V,
    out: &mut [T],
) -> Result<Cache<T>> {
    match op {
        Op::Input => {}
        Op::Binary(bop, a, b) => {
            let (va, vb) = (vals.value(*a), vals.value(*b));
            if *bop == BinaryOp::Div && vb.iter().any(|v| *v == T::zero()) {
                return Err(Error::Numeric("division by zero".into()));
            }
            kernels::binary(*bop, va, &a.shape, vb, &b.shape, shape, out);
        }
        Op::Unary(uop, a) => {
            for (o, &v) in out.iter_mut().zip(vals.value(*a)) {
                *o = uop.apply(v);
            }
        }
        Op::Scale(a, s) => {
            for (o, &v) in out.iter_mut().zip(vals.value(*a)) {
                *o = v * *s;
            }
        }
        Op::Offset(a, s) => {
            for (o, &v) in out.iter_mut().zip(vals.value(*a)) {
                *o = v + *s;
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let plan = MatmulPlan::new(&a.shape, &b.shape, *ta, *tb)?;
            plan.run(vals.value(*a), vals.value(*b), out, false);
        }
        Op::Reduce { op, a, axis } => {
            kernels::reduce(*op, vals.value(*a), &a.shape, *axis, out);
        }
        Op::Softmax { a, mask } => {
            kernels::softmax(vals.value(*a), mask.as_deref(), shape.last(), out)?;
        }
        Op::LogSoftmax(a) => kernels::log_softmax(vals.value(*a), shape.last(), out),
        Op::Reshape(a) => out.copy_from_slice(vals.value(*a)),
        Op::Permute(a, perm) => kernels::permute(vals.value(*a), &a.shape, perm, out),
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::split_axis(shape, *axis);
            let mut offset = 0;
            for r in inputs {
                let len = r.shape.dim(*axis);
                let v = vals.value(*r);
                for o in 0..outer {
                    let src = &v[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * total + offset) * inner;
                    out[dst..dst + len * inner].copy_from_slice(src);
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, total, inner) = kernels::split_axis(&a.shape, *axis);
            let len = shape.dim(*axis);
            let v = vals.value(*a);
            for o in 0..outer {
                let src = (o * total + start) * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&v[src..src + len * inner]);
            }
        }
        Op::Gather { a, rows } => {
            let width = a.shape.numel() / a.shape.dim(0);
            let v = vals.value(*a);
            for (i, r) in rows.iter().enumerate() {
                if let Some(r) = r {
                    out[i * width..(i + 1) * width]
                        .copy_from_slice(&v[r * width..(r + 1) * width]);
                }
            }
        }
        Op::MaskMul { a, mask } => {
            for ((o, &v), &m) in out.iter_mut().zip(vals.value(*a)).zip(mask) {
                *o = v * m;
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = shape.last();
            let rows = shape.rows();
            let (vx, vg, vb) = (vals.value(*x), vals.value(*gain), vals.value(*bias));
            let mut xhat = vec![T::zero(); rows * d];
            let mut rstd = vec![T::zero(); rows];
            for i in 0..rows {
                let seg = i * d..(i + 1) * d;
                rstd[i] = fused::ln_row(
                    &vx[seg.clone()],
                    vg,
                    vb,
                    *eps,
                    &mut out[seg.clone()],
                    &mut xhat[seg],
                );
            }
            return Ok(Cache::LayerNorm { xhat, rstd });
        }
        Op::Gru(g) => {
            let (dims, params) = gru_params(g, vals);
            let cache = fused::gru_forward(&dims, &params, out);
            return Ok(Cache::Gru(cache));
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            smoothing,
        } => {
            let vocab = logits.shape.last();
            let mut probs = vec![T::zero(); logits.shape.numel()];
            out[0] = fused::cross_entropy_forward(
                vals.value(*logits),
                vocab,
                targets,
                mask,
                *smoothing,
                &mut probs,
            );
            return Ok(Cache::Values(probs));
        }
    }
    Ok(Cache::None)
}

fn gru_params<'a, T: Element, V: ValueSource<T>>(
    g: &'a GruNode<T>,
    vals: &'a V,
) -> (GruDims, GruParams<'a, T>) {
    let dims = GruDims {
        rows: g.h.shape.dim(0),
        dim: g.h.shape.dim(1),
        input: g.x.map_or(0, |x| x.shape.dim(1)),
    };
    let params = GruParams {
        x: g.x.map(|x| vals.value(x)),
        w: g.w.map(|w| vals.value(w)),
        h: vals.value(g.h),
        u: vals.value(g.u),
        b: vals.value(g.b),
        ln: g.ln.map(|(a, b)| (vals.value(a), vals.value(b))),
        h_mask: g.h_mask.as_deref(),
        eps: T::from_f64_lossy(super::LN_EPS),
    };
    (dims, params)
}

/// Mutable access to gradient buffers of a node's inputs.
pub trait GradSink<T> {
    /// Gradient buffer of `r`, or `None` if `r` does not need one.
    fn grad(&mut self, r: NodeRef) -> Option<&mut [T]>;
}

/// Collect gradient buffers for several distinct inputs at once.
fn with_grads<T: Element, S: GradSink<T>>(
    sink: &mut S,
    refs: &[Option<NodeRef>],
    f: impl FnOnce(&mut [Option<Vec<T>>]),
) {
    // Borrowing several sink slots mutably at once is not possible through
    // the trait, so gradients are staged in temporaries and added back.
    let mut bufs: Vec<Option<Vec<T>>> = refs
        .iter()
        .map(|r| {
            r.and_then(|r| {
                let n = r.shape.numel();
                sink.grad(r).map(|_| vec![T::zero(); n])
            })
        })
        .collect();
    f(&mut bufs);
    for (r, buf) in refs.iter().zip(bufs) {
        if let (Some(r), Some(buf)) = (r, buf) {
            if let Some(g) = sink.grad(*r) {
                for (a, b) in g.iter_mut().zip(buf) {
                    *a += b;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Element, V: ValueSource<T>, S: GradSink<T>>(
    op: &Op<T>,
    shape: &Shape,
    value: &[T],
    cache: &Cache<T>,
    g: &[T],
    vals: &V,
    sink: &mut S,
) -> Result<()> {
    match op {
        Op::Input => {}
        Op::Binary(bop, a, b) => {
            let (va, vb) = (vals.value(*a), vals.value(*b));
            match bop {
                BinaryOp::Add | BinaryOp::Sub => {
                    if let Some(ga) = sink.grad(*a) {
                        kernels::sum_to_shape(g, shape, &a.shape, ga);
                    }
                    if let Some(gb) = sink.grad(*b) {
                        if *bop == BinaryOp::Add {
                            kernels::sum_to_shape(g, shape, &b.shape, gb);
                        } else {
                            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                            kernels::sum_to_shape(&neg, shape, &b.shape, gb);
                        }
                    }
                }
                BinaryOp::Mul => {
                    let mut tmp = vec![T::zero(); g.len()];
                    if let Some(ga) = sink.grad(*a) {
                        kernels::binary(BinaryOp::Mul, g, shape, vb, &b.shape, shape, &mut tmp);
                        kernels::sum_to_shape(&tmp, shape, &a.shape, ga);
                    }
                    if let Some(gb) = sink.grad(*b) {
                        kernels::binary(BinaryOp::Mul, g, shape, va, &a.shape, shape, &mut tmp);
                        kernels::sum_to_shape(&tmp, shape, &b.shape, gb);
                    }
                }
                BinaryOp::Div => {
                    let mut tmp = vec![T::zero(); g.len()];
                    if let Some(ga) = sink.grad(*a) {
                        kernels::binary(BinaryOp::Div, g, shape, vb, &b.shape, shape, &mut tmp);
                        kernels::sum_to_shape(&tmp, shape, &a.shape, ga);
                    }
                    if let Some(gb) = sink.grad(*b) {
                        // d(a/b)/db = -out / b
                        let mut q = vec![T::zero(); g.len()];
                        kernels::binary(BinaryOp::Div, value, shape, vb, &b.shape, shape, &mut q);
                        for ((t, &gv), &qv) in tmp.iter_mut().zip(g).zip(&q) {
                            *t = -gv * qv;
                        }
                        kernels::sum_to_shape(&tmp, shape, &b.shape, gb);
                    }
                }
            }
        }
        Op::Unary(uop, a) => {
            let x = vals.value(*a);
            if let Some(ga) = sink.grad(*a) {
                for i in 0..g.len() {
                    let y = value[i];
                    let d = match uop {
                        UnaryOp::Neg => -T::one(),
                        UnaryOp::Tanh => T::one() - y * y,
                        UnaryOp::Sigmoid => y * (T::one() - y),
                        UnaryOp::Relu => {
                            if x[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Exp => y,
                        UnaryOp::Log => T::one() / x[i],
                        UnaryOp::Sqrt => T::one() / (y + y),
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = sink.grad(*a) {
                for (o, &v) in ga.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }
        }
        Op::Offset(a, _) | Op::Reshape(a) => {
            if let Some(ga) = sink.grad(*a) {
                for (o, &v) in ga.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let plan = MatmulPlan::new(&a.shape, &b.shape, *ta, *tb)?;
            let (va, vb) = (vals.value(*a), vals.value(*b));
            let mut scratch = Vec::new();
            let (m, n, k) = (plan.m, plan.n, plan.k);
            if let Some(ga) = sink.grad(*a) {
                for i in 0..plan.batch {
                    let bi = if plan.b_shared {
                        vb
                    } else {
                        &vb[i * k * n..(i + 1) * k * n]
                    };
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let dai = &mut ga[i * m * k..(i + 1) * m * k];
                    if *ta {
                        kernels::gemm(k, m, n, bi, *tb, gi, true, dai, true, &mut scratch);
                    } else {
                        kernels::gemm(m, k, n, gi, false, bi, !*tb, dai, true, &mut scratch);
                    }
                }
            }
            if let Some(gb) = sink.grad(*b) {
                for i in 0..plan.batch {
                    let ai = &va[i * m * k..(i + 1) * m * k];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let dbi = if plan.b_shared {
                        &mut gb[..]
                    } else {
                        &mut gb[i * k * n..(i + 1) * k * n]
                    };
                    if *tb {
                        kernels::gemm(n, k, m, gi, true, ai, *ta, dbi, true, &mut scratch);
                    } else {
                        kernels::gemm(k, n, m, ai, !*ta, gi, false, dbi, true, &mut scratch);
                    }
                }
            }
        }
        Op::Reduce { op, a, axis } => {
            let x = vals.value(*a);
            if let Some(ga) = sink.grad(*a) {
                let (outer, len, inner) = kernels::split_axis(&a.shape, *axis);
                let inv = T::one() / T::from_usize_lossy(len);
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        match op {
                            ReduceOp::Sum | ReduceOp::Mean => {
                                let gv = if *op == ReduceOp::Mean { gv * inv } else { gv };
                                for j in 0..len {
                                    ga[(o * len + j) * inner + i] += gv;
                                }
                            }
                            ReduceOp::Max => {
                                let mut best = 0;
                                for j in 1..len {
                                    if x[(o * len + j) * inner + i] > x[(o * len + best) * inner + i] {
                                        best = j;
                                    }
                                }
                                ga[(o * len + best) * inner + i] += gv;
                            }
                            ReduceOp::Argmax => {}
                        }
                    }
                }
            }
        }
        Op::Softmax { a, .. } => {
            if let Some(ga) = sink.grad(*a) {
                let n = shape.last();
                for ((gr, yr), dr) in g.chunks(n).zip(value.chunks(n)).zip(ga.chunks_mut(n)) {
                    let mut dot = T::zero();
                    for (&gv, &y) in gr.iter().zip(yr) {
                        dot += gv * y;
                    }
                    for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = sink.grad(*a) {
                let n = shape.last();
                for ((gr, yr), dr) in g.chunks(n).zip(value.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += gv - y.exp() * total;
                    }
                }
            }
        }
        Op::Permute(a, perm) => {
            if let Some(ga) = sink.grad(*a) {
                kernels::permute_back_add(g, &a.shape, perm, ga);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::split_axis(shape, *axis);
            let mut offset = 0;
            for r in inputs {
                let len = r.shape.dim(*axis);
                if let Some(gr) = sink.grad(*r) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = &mut gr[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dst.iter_mut().zip(&g[src..src + len * inner]) {
                            *d += v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            if let Some(ga) = sink.grad(*a) {
                let (outer, total, inner) = kernels::split_axis(&a.shape, *axis);
                let len = shape.dim(*axis);
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &v) in ga[dst..dst + len * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        Op::Gather { a, rows } => {
            if let Some(ga) = sink.grad(*a) {
                let width = a.shape.numel() / a.shape.dim(0);
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        let dst = &mut ga[r * width..(r + 1) * width];
                        for (d, &v) in dst.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::MaskMul { a, mask } => {
            if let Some(ga) = sink.grad(*a) {
                for ((d, &v), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += v * m;
                }
            }
        }
        Op::LayerNorm { x, gain, bias, .. } => {
            let Cache::LayerNorm { xhat, rstd } = cache else {
                unreachable!("layer norm cache");
            };
            let d = shape.last();
            let vg = vals.value(*gain).to_vec();
            with_grads(sink, &[Some(*x), Some(*gain), Some(*bias)], |bufs| {
                let [bx, bg, bb] = bufs else { unreachable!() };
                for i in 0..shape.rows() {
                    let seg = i * d..(i + 1) * d;
                    fused::ln_row_backward(
                        &g[seg.clone()],
                        &xhat[seg.clone()],
                        &vg,
                        rstd[i],
                        bx.as_deref_mut().map(|b| &mut b[seg.clone()]),
                        bg.as_deref_mut(),
                        bb.as_deref_mut(),
                    );
                }
            });
        }
        Op::Gru(node) => {
            let Cache::Gru(c) = cache else {
                unreachable!("gru cache");
            };
            let (dims, params) = gru_params(node, vals);
            let (lg, lb) = match node.ln {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            let refs = [node.x, node.w, Some(node.h), Some(node.u), Some(node.b), lg, lb];
            with_grads(sink, &refs, |bufs| {
                let [bx, bw, bh, bu, bb, blg, blb] = bufs else {
                    unreachable!()
                };
                let grads = GruGrads {
                    x: bx.as_deref_mut(),
                    w: bw.as_deref_mut(),
                    h: bh.as_deref_mut(),
                    u: bu.as_deref_mut(),
                    b: bb.as_deref_mut(),
                    ln_gain: blg.as_deref_mut(),
                    ln_bias: blb.as_deref_mut(),
                };
                fused::gru_backward(&dims, &params, c, g, grads);
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            smoothing,
        } => {
            let Cache::Values(probs) = cache else {
                unreachable!("cross-entropy cache");
            };
            if let Some(gl) = sink.grad(*logits) {
                fused::cross_entropy_backward(
                    probs,
                    logits.shape.last(),
                    targets,
                    mask,
                    *smoothing,
                    g[0],
                    gl,
                );
            }
        }
    }
    Ok(())
}
