//! Slice-level numeric kernels. Loop orders are fixed so every result is
//! bit-reproducible run to run.

use super::{BinaryOp, Element, ReduceOp, Shape, MAX_RANK};
use crate::error::{shape_err, Error, Result};

/// Resolved dimensions of a (possibly batched) matrix product.
#[derive(Debug, Clone, Copy)]
pub struct MatmulPlan {
    pub out_shape: Shape,
    pub batch: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub ta: bool,
    pub tb: bool,
    /// Whether the right operand is shared by every batch entry.
    pub b_shared: bool,
}

impl MatmulPlan {
    pub fn new(a: &Shape, b: &Shape, ta: bool, tb: bool) -> Result<Self> {
        let mismatch = || shape_err!("matmul of {a} by {b} (transpose a={ta}, b={tb})");
        let (ra, rb) = (a.rank(), b.rank());
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (bk, n) = if tb {
            (b.dim(rb - 1), b.dim(rb - 2))
        } else {
            (b.dim(rb - 2), b.dim(rb - 1))
        };
        if rb == 2 && (ra == 2 || !ta) {
            // Left operand flattened to rows.
            let (m, k) = if ta {
                (a.dim(1), a.dim(0))
            } else {
                (a.rows(), a.last())
            };
            if k != bk {
                return Err(mismatch());
            }
            let mut dims: Vec<usize> = if ta {
                vec![m]
            } else {
                a.dims()[..ra - 1].to_vec()
            };
            dims.push(n);
            return Ok(MatmulPlan {
                out_shape: Shape::new(&dims)?,
                batch: 1,
                m,
                n,
                k,
                ta,
                tb,
                b_shared: true,
            });
        }
        if ra != rb || a.dims()[..ra - 2] != b.dims()[..rb - 2] {
            return Err(mismatch());
        }
        let (m, k) = if ta {
            (a.dim(ra - 1), a.dim(ra - 2))
        } else {
            (a.dim(ra - 2), a.dim(ra - 1))
        };
        if k != bk {
            return Err(mismatch());
        }
        let mut dims = a.dims()[..ra - 2].to_vec();
        let batch = dims.iter().product();
        dims.push(m);
        dims.push(n);
        Ok(MatmulPlan {
            out_shape: Shape::new(&dims)?,
            batch,
            m,
            n,
            k,
            ta,
            tb,
            b_shared: false,
        })
    }

    pub fn run<T: Element>(&self, a: &[T], b: &[T], out: &mut [T], accumulate: bool) {
        let (m, n, k) = (self.m, self.n, self.k);
        let mut scratch = Vec::new();
        for i in 0..self.batch {
            let a_i = &a[i * m * k..(i + 1) * m * k];
            let b_i = if self.b_shared {
                b
            } else {
                &b[i * k * n..(i + 1) * k * n]
            };
            let c_i = &mut out[i * m * n..(i + 1) * m * n];
            gemm(m, n, k, a_i, self.ta, b_i, self.tb, c_i, accumulate, &mut scratch);
        }
    }
}

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. Row `i` of the result depends only on row `i` of
/// `op(a)` when `ta` is false.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
    scratch: &mut Vec<T>,
) {
    if !accumulate {
        c.fill(T::zero());
    }
    let b_rows: &[T] = if tb {
        // Materialize op(b) as [k, n] so the inner loop runs over
        // contiguous memory.
        scratch.clear();
        scratch.resize(k * n, T::zero());
        for j in 0..n {
            let src = &b[j * k..(j + 1) * k];
            for (p, &v) in src.iter().enumerate() {
                scratch[p * n + j] = v;
            }
        }
        scratch
    } else {
        b
    };
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            let b_row = &b_rows[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
fn strides(dims: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut s = [0; MAX_RANK];
    let mut acc = 1;
    for i in (0..MAX_RANK).rev() {
        s[i] = acc;
        acc *= dims[i];
    }
    s
}

/// Strides of `shape` addressed with coordinates of `target`; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &Shape, target: &Shape) -> [usize; MAX_RANK] {
    let dims = shape.padded();
    let mut s = strides(&dims);
    let t = target.padded();
    for i in 0..MAX_RANK {
        if dims[i] == 1 && t[i] != 1 {
            s[i] = 0;
        }
    }
    s
}

#[inline]
fn apply<T: Element>(op: BinaryOp, x: T, y: T) -> T {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

fn is_suffix(small: &Shape, big: &Shape) -> bool {
    let (s, b) = (small.dims(), big.dims());
    s.len() <= b.len() && b[b.len() - s.len()..] == *s
}

/// Element-wise binary op with broadcasting into `out` (shape `out_shape`).
pub fn binary<T: Element>(
    op: BinaryOp,
    a: &[T],
    a_shape: &Shape,
    b: &[T],
    b_shape: &Shape,
    out_shape: &Shape,
    out: &mut [T],
) {
    if a_shape == out_shape && b_shape == out_shape {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = apply(op, x, y);
        }
        return;
    }
    if a_shape == out_shape && is_suffix(b_shape, out_shape) {
        let nb = b.len();
        for (chunk_o, chunk_a) in out.chunks_mut(nb).zip(a.chunks(nb)) {
            for ((o, &x), &y) in chunk_o.iter_mut().zip(chunk_a).zip(b) {
                *o = apply(op, x, y);
            }
        }
        return;
    }
    if b_shape == out_shape && is_suffix(a_shape, out_shape) {
        let na = a.len();
        for (chunk_o, chunk_b) in out.chunks_mut(na).zip(b.chunks(na)) {
            for ((o, &x), &y) in chunk_o.iter_mut().zip(a).zip(chunk_b) {
                *o = apply(op, x, y);
            }
        }
        return;
    }
    let od = out_shape.padded();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut idx = 0;
    for i0 in 0..od[0] {
        for i1 in 0..od[1] {
            for i2 in 0..od[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..od[3] {
                    out[idx] = apply(op, a[base_a + i3 * sa[3]], b[base_b + i3 * sb[3]]);
                    idx += 1;
                }
            }
        }
    }
}

/// Sum `g` (shape `from`) down to the broadcast source shape `to`,
/// accumulating into `out`. `to` must broadcast to `from`.
pub fn sum_to_shape<T: Element>(g: &[T], from: &Shape, to: &Shape, out: &mut [T]) {
    if from == to {
        for (o, &v) in out.iter_mut().zip(g) {
            *o += v;
        }
        return;
    }
    if is_suffix(to, from) {
        let n = out.len();
        for chunk in g.chunks(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return;
    }
    let fd = from.padded();
    let st = broadcast_strides(to, from);
    let mut idx = 0;
    for i0 in 0..fd[0] {
        for i1 in 0..fd[1] {
            for i2 in 0..fd[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..fd[3] {
                    out[base + i3 * st[3]] += g[idx];
                    idx += 1;
                }
            }
        }
    }
}

/// View `shape` as `[outer, axis_len, inner]` around `axis`.
pub fn split_axis(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    let outer = d[..axis].iter().product();
    let inner = d[axis + 1..].iter().product();
    (outer, d[axis], inner)
}

pub fn reduce<T: Element>(op: ReduceOp, data: &[T], shape: &Shape, axis: usize, out: &mut [T]) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| data[(o * len + j) * inner + i];
            let v = match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let mut s = T::zero();
                    for j in 0..len {
                        s += at(j);
                    }
                    if op == ReduceOp::Mean {
                        s / T::from_usize_lossy(len)
                    } else {
                        s
                    }
                }
                ReduceOp::Max => {
                    let mut m = at(0);
                    for j in 1..len {
                        if at(j) > m {
                            m = at(j);
                        }
                    }
                    m
                }
                ReduceOp::Argmax => {
                    let mut best = 0;
                    for j in 1..len {
                        // strict comparison keeps the lowest index on ties
                        if at(j) > at(best) {
                            best = j;
                        }
                    }
                    T::from_usize_lossy(best)
                }
            };
            out[o * inner + i] = v;
        }
    }
}

/// Row-wise softmax over rows of length `n`. Masked entries (mask 0) get
/// probability 0; a row with nothing unmasked is a numeric error.
pub fn softmax<T: Element>(x: &[T], mask: Option<&[T]>, n: usize, out: &mut [T]) -> Result<()> {
    for (r, (xr, or)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let mr = mask.map(|m| &m[r * n..(r + 1) * n]);
        let live = |j: usize| mr.map_or(true, |m| m[j] != T::zero());
        let mut max = T::neg_infinity();
        for j in 0..n {
            if live(j) && xr[j] > max {
                max = xr[j];
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::Numeric(format!("softmax row {r} is fully masked")));
        }
        let mut sum = T::zero();
        for j in 0..n {
            or[j] = if live(j) {
                (xr[j] - max).exp()
            } else {
                T::zero()
            };
            sum += or[j];
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

/// Row-wise log-softmax over rows of length `n`.
pub fn log_softmax<T: Element>(x: &[T], n: usize, out: &mut [T]) {
    for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
        let lse = log_sum_exp(xr);
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

pub fn log_sum_exp<T: Element>(xr: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &v in xr {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in xr {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

pub fn permuted_shape(shape: &Shape, perm: &[usize]) -> Result<Shape> {
    let r = shape.rank();
    let mut seen = [false; MAX_RANK];
    if perm.len() != r {
        return Err(shape_err!("permutation {perm:?} does not match {shape}"));
    }
    for &p in perm {
        if p >= r || seen[p] {
            return Err(shape_err!("invalid permutation {perm:?} for {shape}"));
        }
        seen[p] = true;
    }
    let dims: Vec<usize> = perm.iter().map(|&p| shape.dim(p)).collect();
    Shape::new(&dims)
}

/// `out[i_0..] = x[i_perm...]`: output axis `j` is input axis `perm[j]`.
pub fn permute<T: Element>(x: &[T], shape: &Shape, perm: &[usize], out: &mut [T]) {
    permute_with(x, shape, perm, out, |o, v| *o = v);
}

/// Inverse direction, accumulating: scatter `g` (in permuted layout) back
/// into `out` (original layout).
pub fn permute_back_add<T: Element>(g: &[T], shape: &Shape, perm: &[usize], out: &mut [T]) {
    let r = shape.rank();
    let off = MAX_RANK - r;
    let in_dims = shape.padded();
    let in_strides = strides(&in_dims);
    let mut od = [1; MAX_RANK];
    let mut os = [0; MAX_RANK];
    for j in 0..r {
        od[off + j] = in_dims[off + perm[j]];
        os[off + j] = in_strides[off + perm[j]];
    }
    let mut idx = 0;
    for i0 in 0..od[0] {
        for i1 in 0..od[1] {
            for i2 in 0..od[2] {
                for i3 in 0..od[3] {
                    out[i0 * os[0] + i1 * os[1] + i2 * os[2] + i3 * os[3]] += g[idx];
                    idx += 1;
                }
            }
        }
    }
}

fn permute_with<T: Element>(
    x: &[T],
    shape: &Shape,
    perm: &[usize],
    out: &mut [T],
    f: impl Fn(&mut T, T),
) {
    let r = shape.rank();
    let off = MAX_RANK - r;
    let in_dims = shape.padded();
    let in_strides = strides(&in_dims);
    let mut od = [1; MAX_RANK];
    let mut os = [0; MAX_RANK];
    for j in 0..r {
        od[off + j] = in_dims[off + perm[j]];
        os[off + j] = in_strides[off + perm[j]];
    }
    let mut idx = 0;
    for i0 in 0..od[0] {
        for i1 in 0..od[1] {
            for i2 in 0..od[2] {
                for i3 in 0..od[3] {
                    f(
                        &mut out[idx],
                        x[i0 * os[0] + i1 * os[1] + i2 * os[2] + i3 * os[3]],
                    );
                    idx += 1;
                }
            }
        }
    }
}
