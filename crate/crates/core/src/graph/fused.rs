//! Hand-written forward and backward kernels for the fused operators.

use crate::tensor::kernels::gemm;
use crate::tensor::{sigmoid, Element};

/// Layer-normalize one row. Writes the normalized row (before gain and
/// bias) into `xhat` and returns `1 / sqrt(var + eps)`.
pub fn ln_row<T: Element>(x: &[T], gain: &[T], bias: &[T], eps: T, y: &mut [T], xhat: &mut [T]) -> T {
    let n = T::from_usize_lossy(x.len());
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let rstd = T::one() / (var + eps).sqrt();
    for j in 0..x.len() {
        xhat[j] = (x[j] - mean) * rstd;
        y[j] = gain[j] * xhat[j] + bias[j];
    }
    rstd
}

/// Backward of [`ln_row`]. Accumulates into `dx`, `dgain`, `dbias` when
/// present.
pub fn ln_row_backward<T: Element>(
    dy: &[T],
    xhat: &[T],
    gain: &[T],
    rstd: T,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let d = dy.len();
    if let Some(dg) = dgain {
        for j in 0..d {
            dg[j] += dy[j] * xhat[j];
        }
    }
    if let Some(db) = dbias {
        for j in 0..d {
            db[j] += dy[j];
        }
    }
    if let Some(dx) = dx {
        let n = T::from_usize_lossy(d);
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            let dxh = dy[j] * gain[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[j];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        for j in 0..d {
            let dxh = dy[j] * gain[j];
            dx[j] += rstd * (dxh - mean_dxh - xhat[j] * mean_dxh_xh);
        }
    }
}

/// Cached intermediates of one fused GRU evaluation, all `[b, *]` row-major.
pub struct GruCache<T> {
    /// `(h * mask) U`, `[b, 3d]`
    pub hu: Vec<T>,
    /// gate activations `z | r`, `[b, 2d]`
    pub zr: Vec<T>,
    /// candidate state, `[b, d]`
    pub cand: Vec<T>,
    /// normalized pre-activations `[b, 3d]` and inverse std `[b, 3]` when
    /// layer norm is on
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub struct GruDims {
    pub rows: usize,
    pub dim: usize,
    pub input: usize,
}

pub struct GruParams<'a, T> {
    pub x: Option<&'a [T]>,
    pub w: Option<&'a [T]>,
    pub h: &'a [T],
    pub u: &'a [T],
    pub b: &'a [T],
    pub ln: Option<(&'a [T], &'a [T])>,
    pub h_mask: Option<&'a [T]>,
    pub eps: T,
}

/// Gate layout along the `3d` axis: update `z`, reset `r`, candidate.
///
/// ```text
/// z  = sigmoid(LN(x Wz + h Uz + bz))
/// r  = sigmoid(LN(x Wr + h Ur + br))
/// h~ = tanh(LN(x Wh) + r * (h Uh) + bh)
/// h' = (1 - z) * h~ + z * h
/// ```
pub fn gru_forward<T: Element>(dims: &GruDims, p: &GruParams<'_, T>, out: &mut [T]) -> GruCache<T> {
    let (b, d, e) = (dims.rows, dims.dim, dims.input);
    let d3 = 3 * d;
    let mut scratch = Vec::new();
    let mut xw = Vec::new();
    if let (Some(x), Some(w)) = (p.x, p.w) {
        xw = vec![T::zero(); b * d3];
        gemm(b, d3, e, x, false, w, false, &mut xw, false, &mut scratch);
    }
    let mut hu = vec![T::zero(); b * d3];
    match p.h_mask {
        Some(m) => {
            let hm: Vec<T> = p.h.iter().zip(m).map(|(&h, &m)| h * m).collect();
            gemm(b, d3, d, &hm, false, p.u, false, &mut hu, false, &mut scratch);
        }
        None => gemm(b, d3, d, p.h, false, p.u, false, &mut hu, false, &mut scratch),
    }
    let mut zr = vec![T::zero(); b * 2 * d];
    let mut cand = vec![T::zero(); b * d];
    let (mut xhat, mut rstd) = if p.ln.is_some() {
        (vec![T::zero(); b * d3], vec![T::zero(); b * 3])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut pre = vec![T::zero(); d3];
    let mut normed = vec![T::zero(); d3];
    for i in 0..b {
        let hur = &hu[i * d3..(i + 1) * d3];
        for j in 0..2 * d {
            pre[j] = hur[j] + p.b[j];
            if !xw.is_empty() {
                pre[j] += xw[i * d3 + j];
            }
        }
        for j in 2 * d..d3 {
            pre[j] = if xw.is_empty() { T::zero() } else { xw[i * d3 + j] };
        }
        match p.ln {
            Some((g, bias)) => {
                for s in 0..3 {
                    let seg = s * d..(s + 1) * d;
                    rstd[i * 3 + s] = ln_row(
                        &pre[seg.clone()],
                        &g[seg.clone()],
                        &bias[seg.clone()],
                        p.eps,
                        &mut normed[seg.clone()],
                        &mut xhat[i * d3 + s * d..i * d3 + (s + 1) * d],
                    );
                }
            }
            None => normed.copy_from_slice(&pre),
        }
        let h = &p.h[i * d..(i + 1) * d];
        for j in 0..d {
            let z = sigmoid(normed[j]);
            let r = sigmoid(normed[d + j]);
            let c = (normed[2 * d + j] + r * hur[2 * d + j] + p.b[2 * d + j]).tanh();
            zr[i * 2 * d + j] = z;
            zr[i * 2 * d + d + j] = r;
            cand[i * d + j] = c;
            out[i * d + j] = (T::one() - z) * c + z * h[j];
        }
    }
    GruCache {
        hu,
        zr,
        cand,
        xhat,
        rstd,
    }
}

/// Gradient sinks for [`gru_backward`]; `None` means "not required".
pub struct GruGrads<'a, T> {
    pub x: Option<&'a mut [T]>,
    pub w: Option<&'a mut [T]>,
    pub h: Option<&'a mut [T]>,
    pub u: Option<&'a mut [T]>,
    pub b: Option<&'a mut [T]>,
    pub ln_gain: Option<&'a mut [T]>,
    pub ln_bias: Option<&'a mut [T]>,
}

pub fn gru_backward<T: Element>(
    dims: &GruDims,
    p: &GruParams<'_, T>,
    cache: &GruCache<T>,
    dout: &[T],
    mut grads: GruGrads<'_, T>,
) {
    let (b, d, e) = (dims.rows, dims.dim, dims.input);
    let d3 = 3 * d;
    // gradients w.r.t. the (normalized) pre-activations and hu
    let mut dnorm = vec![T::zero(); b * d3];
    let mut dhu = vec![T::zero(); b * d3];
    for i in 0..b {
        let h = &p.h[i * d..(i + 1) * d];
        for j in 0..d {
            let g = dout[i * d + j];
            let z = cache.zr[i * 2 * d + j];
            let r = cache.zr[i * 2 * d + d + j];
            let c = cache.cand[i * d + j];
            let dz = g * (h[j] - c);
            let dc = g * (T::one() - z);
            if let Some(dh) = grads.h.as_deref_mut() {
                dh[i * d + j] += g * z;
            }
            let dpre_c = dc * (T::one() - c * c);
            let hu_c = cache.hu[i * d3 + 2 * d + j];
            if let Some(db) = grads.b.as_deref_mut() {
                db[2 * d + j] += dpre_c;
            }
            dnorm[i * d3 + 2 * d + j] = dpre_c;
            dhu[i * d3 + 2 * d + j] = dpre_c * r;
            let dr = dpre_c * hu_c;
            dnorm[i * d3 + j] = dz * z * (T::one() - z);
            dnorm[i * d3 + d + j] = dr * r * (T::one() - r);
        }
    }
    // back through layer norm to raw pre-activations
    let dpre = match p.ln {
        Some((gain, _)) => {
            let mut dpre = vec![T::zero(); b * d3];
            for i in 0..b {
                for s in 0..3 {
                    let seg = i * d3 + s * d..i * d3 + (s + 1) * d;
                    let pseg = s * d..(s + 1) * d;
                    ln_row_backward(
                        &dnorm[seg.clone()],
                        &cache.xhat[seg.clone()],
                        &gain[pseg.clone()],
                        cache.rstd[i * 3 + s],
                        Some(&mut dpre[seg.clone()]),
                        grads.ln_gain.as_deref_mut().map(|g| &mut g[pseg.clone()]),
                        grads.ln_bias.as_deref_mut().map(|g| &mut g[pseg.clone()]),
                    );
                }
            }
            dpre
        }
        None => dnorm,
    };
    // z and r pre-activations are sums of xw, hu and the bias
    for i in 0..b {
        for j in 0..2 * d {
            let v = dpre[i * d3 + j];
            dhu[i * d3 + j] = v;
            if let Some(db) = grads.b.as_deref_mut() {
                db[j] += v;
            }
        }
    }
    let mut scratch = Vec::new();
    // the candidate's input term is xw_h alone, so dpre doubles as dxw
    if let (Some(x), Some(w)) = (p.x, p.w) {
        if let Some(dw) = grads.w.as_deref_mut() {
            gemm(e, d3, b, x, true, &dpre, false, dw, true, &mut scratch);
        }
        if let Some(dx) = grads.x.as_deref_mut() {
            gemm(b, e, d3, &dpre, false, w, true, dx, true, &mut scratch);
        }
    }
    if let Some(du) = grads.u.as_deref_mut() {
        match p.h_mask {
            Some(m) => {
                let hm: Vec<T> = p.h.iter().zip(m).map(|(&h, &m)| h * m).collect();
                gemm(d, d3, b, &hm, true, &dhu, false, du, true, &mut scratch);
            }
            None => gemm(d, d3, b, p.h, true, &dhu, false, du, true, &mut scratch),
        }
    }
    if let Some(dh) = grads.h.as_deref_mut() {
        let mut tmp = vec![T::zero(); b * d];
        gemm(b, d, d3, &dhu, false, p.u, true, &mut tmp, false, &mut scratch);
        match p.h_mask {
            Some(m) => {
                for ((g, t), &m) in dh.iter_mut().zip(&tmp).zip(m) {
                    *g += *t * m;
                }
            }
            None => {
                for (g, t) in dh.iter_mut().zip(&tmp) {
                    *g += *t;
                }
            }
        }
    }
}

/// Mean masked cross-entropy with optional uniform label smoothing.
/// Returns the loss; `probs` receives the softmax of every row.
pub fn cross_entropy_forward<T: Element>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    mask: &[T],
    smoothing: T,
    probs: &mut [T],
) -> T {
    let mut total = T::zero();
    let mut norm = T::zero();
    let v = T::from_usize_lossy(vocab);
    for (i, row) in logits.chunks(vocab).enumerate() {
        let lse = crate::tensor::kernels::log_sum_exp(row);
        let pr = &mut probs[i * vocab..(i + 1) * vocab];
        let mut mean_logit = T::zero();
        for (p, &x) in pr.iter_mut().zip(row) {
            *p = (x - lse).exp();
            mean_logit += x;
        }
        mean_logit /= v;
        if mask[i] == T::zero() {
            continue;
        }
        let nll = lse - row[targets[i]];
        let smooth = lse - mean_logit;
        total += mask[i] * ((T::one() - smoothing) * nll + smoothing * smooth);
        norm += mask[i];
    }
    total / norm
}

pub fn cross_entropy_backward<T: Element>(
    probs: &[T],
    vocab: usize,
    targets: &[usize],
    mask: &[T],
    smoothing: T,
    dloss: T,
    dlogits: &mut [T],
) {
    let norm: T = mask.iter().copied().sum();
    let v = T::from_usize_lossy(vocab);
    for (i, pr) in probs.chunks(vocab).enumerate() {
        if mask[i] == T::zero() {
            continue;
        }
        let scale = dloss * mask[i] / norm;
        let dr = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (j, (g, &p)) in dr.iter_mut().zip(pr).enumerate() {
            let mut t = smoothing / v;
            if j == targets[i] {
                t += T::one() - smoothing;
            }
            *g += scale * (p - t);
        }
    }
}
