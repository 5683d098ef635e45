//! Neural building blocks assembled from graph operations.
//!
//! Layers take already-resolved parameter nodes, so the same code runs in
//! any graph and at any element type. Parameter naming and initialization
//! belong to the models.

use crate::error::{contract_err, shape_err, Result};
use crate::graph::{Graph, GruArgs, NodeRef};
use crate::tensor::{Element, Tensor};

/// `x · w + b` over the last axis of `x`.
pub fn linear<T: Element>(g: &mut Graph<T>, x: NodeRef, w: NodeRef, b: Option<NodeRef>) -> Result<NodeRef> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Look up rows of `table` (`[V, e]`). `None` ids give zero vectors (used
/// for the decoder's start symbol). The result has shape `dims ++ [e]`.
pub fn embed<T: Element>(g: &mut Graph<T>, table: NodeRef, ids: &[Option<usize>], dims: &[usize]) -> Result<NodeRef> {
    let vocab = table.shape.dim(0);
    if let Some(bad) = ids.iter().flatten().find(|&&i| i >= vocab) {
        return Err(contract_err!("token id {bad} out of vocabulary of size {vocab}"));
    }
    if dims.iter().product::<usize>() != ids.len() {
        return Err(shape_err!("{} ids cannot form {:?}", ids.len(), dims));
    }
    let rows = g.gather(table, ids)?;
    let mut out = dims.to_vec();
    out.push(table.shape.dim(1));
    g.reshape(rows, &out)
}

/// Output projection. With `tied`, `w` is the `[V, e]` embedding matrix and
/// logits are `hidden · wᵀ`; otherwise `w` is `[e, V]`.
pub fn output_logits<T: Element>(
    g: &mut Graph<T>,
    hidden: NodeRef,
    w: NodeRef,
    b: NodeRef,
    tied: bool,
) -> Result<NodeRef> {
    let y = g.matmul_t(hidden, w, false, tied)?;
    g.add(y, b)
}

// ---- additive attention ---------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BahdanauParams {
    /// query projection `[d, a]`
    pub w: NodeRef,
    /// key projection `[d', a]`
    pub u: NodeRef,
    /// `[a]`
    pub b: NodeRef,
    /// `[a, 1]`
    pub v: NodeRef,
    /// optional layer norm on the pre-tanh energy sum
    pub ln: Option<(NodeRef, NodeRef)>,
}

/// Encoder-side values reused at every decoder step.
#[derive(Debug, Clone)]
pub struct AttentionMemory<T: Element> {
    /// `[b, s, d']`
    pub keys: NodeRef,
    /// `keys · U`, `[b, s, a]`
    pub keys_proj: NodeRef,
    /// `[b, s]`, 1 for real positions
    pub mask: Tensor<T>,
}

pub fn check_mask_rows<T: Element>(mask: &Tensor<T>) -> Result<()> {
    let s = mask.shape().last();
    for (i, row) in mask.data().chunks(s).enumerate() {
        if row.iter().all(|&m| m == T::zero()) {
            return Err(contract_err!("attention mask row {i} is fully masked"));
        }
    }
    Ok(())
}

pub fn bahdanau_memory<T: Element>(
    g: &mut Graph<T>,
    p: &BahdanauParams,
    keys: NodeRef,
    mask: Tensor<T>,
) -> Result<AttentionMemory<T>> {
    if keys.shape.rank() != 3 || mask.dims() != &keys.dims()[..2] {
        return Err(shape_err!("attention keys {} with mask {}", keys.shape, mask.shape()));
    }
    check_mask_rows(&mask)?;
    let keys_proj = g.matmul(keys, p.u)?;
    Ok(AttentionMemory { keys, keys_proj, mask })
}

/// `e_j = vᵀ tanh(W q + U k_j + b)`, `weights = softmax(e)` over unmasked
/// positions, `context = Σ_j weights_j k_j`. Returns `(context [b, d'],
/// weights [b, s])`.
pub fn bahdanau_attention<T: Element>(
    g: &mut Graph<T>,
    p: &BahdanauParams,
    query: NodeRef,
    mem: &AttentionMemory<T>,
) -> Result<(NodeRef, NodeRef)> {
    let (b, s) = (mem.keys.shape.dim(0), mem.keys.shape.dim(1));
    if query.shape.rank() != 2 || query.shape.dim(0) != b {
        return Err(shape_err!("attention query {} for keys {}", query.shape, mem.keys.shape));
    }
    let a = p.v.shape.dim(0);
    let wq = linear(g, query, p.w, Some(p.b))?;
    let wq = g.reshape(wq, &[b, 1, a])?;
    let mut pre = g.add(mem.keys_proj, wq)?;
    if let Some((gain, bias)) = p.ln {
        pre = g.layer_norm(pre, gain, bias)?;
    }
    let act = g.tanh(pre)?;
    let energy = g.matmul(act, p.v)?;
    let energy = g.reshape(energy, &[b, s])?;
    let weights = g.softmax(energy, Some(&mem.mask))?;
    let w3 = g.reshape(weights, &[b, 1, s])?;
    let ctx = g.matmul(w3, mem.keys)?;
    let ctx = g.reshape(ctx, &[b, mem.keys.shape.dim(2)])?;
    Ok((ctx, weights))
}

// ---- multi-head attention -------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub wq: NodeRef,
    pub bq: NodeRef,
    pub wk: NodeRef,
    pub bk: NodeRef,
    pub wv: NodeRef,
    pub bv: NodeRef,
    pub wo: NodeRef,
    pub bo: NodeRef,
}

/// `[b, t, h·k] → [b, h, t, k]`
pub fn split_heads<T: Element>(g: &mut Graph<T>, x: NodeRef, heads: usize) -> Result<NodeRef> {
    let (b, t, dm) = (x.shape.dim(0), x.shape.dim(1), x.shape.dim(2));
    if heads == 0 || dm % heads != 0 {
        return Err(shape_err!("model dim {dm} is not divisible by {heads} heads"));
    }
    let r = g.reshape(x, &[b, t, heads, dm / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[b, h, t, k] → [b, t, h·k]`
pub fn merge_heads<T: Element>(g: &mut Graph<T>, x: NodeRef) -> Result<NodeRef> {
    let d = x.dims().to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[d[0], d[2], d[1] * d[3]])
}

/// Project and split keys and values: `([b, h, t, k], [b, h, t, k])`.
pub fn mha_kv<T: Element>(g: &mut Graph<T>, p: &MhaParams, kv: NodeRef, heads: usize) -> Result<(NodeRef, NodeRef)> {
    let k = linear(g, kv, p.wk, Some(p.bk))?;
    let v = linear(g, kv, p.wv, Some(p.bv))?;
    Ok((split_heads(g, k, heads)?, split_heads(g, v, heads)?))
}

/// Attend from `q_in` (`[b, tq, dm]`) over split keys/values. `mask` must
/// broadcast to `[b, h, tq, tk]`. Returns the projected output and the
/// attention weights.
pub fn mha_attend<T: Element>(
    g: &mut Graph<T>,
    p: &MhaParams,
    q_in: NodeRef,
    k: NodeRef,
    v: NodeRef,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<(NodeRef, NodeRef)> {
    let q = linear(g, q_in, p.wq, Some(p.bq))?;
    let q = split_heads(g, q, heads)?;
    let dk = q.shape.dim(3);
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax(scores, mask)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = merge_heads(g, ctx)?;
    let out = linear(g, ctx, p.wo, Some(p.bo))?;
    Ok((out, weights))
}

pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    p: &MhaParams,
    q: NodeRef,
    kv: NodeRef,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<(NodeRef, NodeRef)> {
    let (k, v) = mha_kv(g, p, kv, heads)?;
    mha_attend(g, p, q, k, v, heads, mask)
}

/// `[b, 1, tq, tk]` mask combining key padding (`key_mask`, `[b, tk]`) with
/// causality: query `i` sits at absolute position `offset + i` and may see
/// keys up to and including that position.
pub fn attention_mask<T: Element>(
    key_mask: &Tensor<T>,
    tq: usize,
    causal_offset: Option<usize>,
) -> Result<Tensor<T>> {
    let (b, tk) = (key_mask.dims()[0], key_mask.dims()[1]);
    let mut data = Vec::with_capacity(b * tq * tk);
    for row in key_mask.data().chunks(tk) {
        for i in 0..tq {
            for (j, &m) in row.iter().enumerate() {
                let visible = causal_offset.map_or(true, |o| j <= o + i);
                data.push(if visible { m } else { T::zero() });
            }
        }
    }
    Tensor::new(&[b, 1, tq, tk], data)
}

// ---- transformer pieces ------------------------------------------------------

/// Sinusoidal encodings for positions `offset..offset + len`, interleaved:
/// even columns `sin(pos / 10000^(2i/dim))`, odd columns the matching cosine.
pub fn positional_encoding<T: Element>(len: usize, dim: usize, offset: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in offset..offset + len {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64_lossy(v));
        }
    }
    Tensor::new(&[len, dim], data)
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: NodeRef,
    pub b1: NodeRef,
    pub w2: NodeRef,
    pub b2: NodeRef,
}

pub fn feed_forward<T: Element>(g: &mut Graph<T>, p: &FfnParams, x: NodeRef, dropout: f64) -> Result<NodeRef> {
    let h = linear(g, x, p.w1, Some(p.b1))?;
    let h = g.relu(h)?;
    let h = g.dropout(h, dropout, None)?;
    linear(g, h, p.w2, Some(p.b2))
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: NodeRef,
    pub bias: NodeRef,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockParams {
    pub self_attn: MhaParams,
    pub ln_self: LayerNormParams,
    pub cross_attn: Option<(MhaParams, LayerNormParams)>,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub heads: usize,
    pub dropout: f64,
    /// pre-norm `x + f(LN(x))`; otherwise post-norm `LN(x + f(x))`
    pub prenorm: bool,
}

/// Keys and values of cross-attention memory plus its mask.
#[derive(Debug, Clone)]
pub struct CrossMemory<'a, T: Element> {
    pub k: NodeRef,
    pub v: NodeRef,
    /// broadcastable to `[b, h, tq, s]`
    pub mask: &'a Tensor<T>,
}

/// Output of one transformer block: the new activations and the full
/// self-attention keys/values (cache plus the new positions).
pub struct BlockOutput {
    pub out: NodeRef,
    pub k: NodeRef,
    pub v: NodeRef,
}

fn sublayer<T: Element, F>(
    g: &mut Graph<T>,
    x: NodeRef,
    ln: &LayerNormParams,
    opts: &BlockOptions,
    f: F,
) -> Result<NodeRef>
where
    F: FnOnce(&mut Graph<T>, NodeRef) -> Result<NodeRef>,
{
    if opts.prenorm {
        let n = g.layer_norm(x, ln.gain, ln.bias)?;
        let y = f(g, n)?;
        let y = g.dropout(y, opts.dropout, None)?;
        g.add(x, y)
    } else {
        let y = f(g, x)?;
        let y = g.dropout(y, opts.dropout, None)?;
        let s = g.add(x, y)?;
        g.layer_norm(s, ln.gain, ln.bias)
    }
}

/// One transformer block on `x` (`[b, t, dm]`).
///
/// `cache` holds previously computed self-attention keys/values
/// (`[b, h, t', k]`), which the new positions are appended to; `self_mask`
/// must broadcast to `[b, h, t, t' + t]`. Decoder blocks pass `cross`.
pub fn transformer_block<T: Element>(
    g: &mut Graph<T>,
    p: &TransformerBlockParams,
    x: NodeRef,
    cache: Option<(NodeRef, NodeRef)>,
    self_mask: &Tensor<T>,
    cross: Option<&CrossMemory<'_, T>>,
    opts: &BlockOptions,
) -> Result<BlockOutput> {
    let mut kv = None;
    let h = sublayer(g, x, &p.ln_self, opts, |g, n| {
        let (k, v) = mha_kv(g, &p.self_attn, n, opts.heads)?;
        let (k, v) = match cache {
            Some((ck, cv)) => (g.concat(&[ck, k], 2)?, g.concat(&[cv, v], 2)?),
            None => (k, v),
        };
        kv = Some((k, v));
        Ok(mha_attend(g, &p.self_attn, n, k, v, opts.heads, Some(self_mask))?.0)
    })?;
    let h = match (&p.cross_attn, cross) {
        (Some((mp, ln)), Some(mem)) => sublayer(g, h, ln, opts, |g, n| {
            Ok(mha_attend(g, mp, n, mem.k, mem.v, opts.heads, Some(mem.mask))?.0)
        })?,
        (None, None) => h,
        (Some(_), None) => return Err(contract_err!("decoder block needs cross-attention memory")),
        (None, Some(_)) => return Err(contract_err!("encoder block given cross-attention memory")),
    };
    let out = sublayer(g, h, &p.ln_ffn, opts, |g, n| feed_forward(g, &p.ffn, n, opts.dropout))?;
    let (k, v) = kv.expect("self-attention ran");
    Ok(BlockOutput { out, k, v })
}

// ---- deep transition ---------------------------------------------------------

/// Parameters of one GRU block; `w` is absent for transition-only blocks.
#[derive(Debug, Clone, Copy)]
pub struct GruBlock {
    pub w: Option<NodeRef>,
    pub u: NodeRef,
    pub b: NodeRef,
    pub ln: Option<(NodeRef, NodeRef)>,
}

/// A tall recurrent cell: a stack of GRU blocks applied once per time step.
///
/// Block 1 reads the external input. With `attention_slot = Some(k)`,
/// attention runs on the state after block `k` and block `k + 1` reads the
/// resulting context; every other block is transition-only.
#[derive(Debug, Clone)]
pub struct DeepTransitionCell {
    pub blocks: Vec<GruBlock>,
    pub attention_slot: Option<usize>,
}

pub struct TransitionOutput {
    pub state: NodeRef,
    /// state right after the attention slot's block (the attention query)
    pub query: Option<NodeRef>,
    pub context: Option<NodeRef>,
    pub weights: Option<NodeRef>,
}

impl DeepTransitionCell {
    /// Which blocks take an input, and of what kind.
    pub fn block_inputs(blocks: usize, attention_slot: Option<usize>) -> Vec<BlockInput> {
        (0..blocks)
            .map(|i| {
                if i == 0 {
                    BlockInput::External
                } else if attention_slot == Some(i) {
                    BlockInput::Context
                } else {
                    BlockInput::None
                }
            })
            .collect()
    }

    /// Advance one time step. `h_masks` holds an optional recurrent dropout
    /// mask per block. `attend` maps the query state to `(context, weights)`.
    pub fn step<T: Element>(
        &self,
        g: &mut Graph<T>,
        input: Option<NodeRef>,
        state: NodeRef,
        h_masks: &[Option<Tensor<T>>],
        mut attend: Option<&mut dyn FnMut(&mut Graph<T>, NodeRef) -> Result<(NodeRef, NodeRef)>>,
    ) -> Result<TransitionOutput> {
        if let Some(slot) = self.attention_slot {
            if slot == 0 || slot >= self.blocks.len() {
                return Err(contract_err!(
                    "attention slot {slot} must lie between blocks of a {}-block cell",
                    self.blocks.len()
                ));
            }
            if attend.is_none() {
                return Err(contract_err!("cell has an attention slot but no encoder context was supplied"));
            }
        }
        let kinds = Self::block_inputs(self.blocks.len(), self.attention_slot);
        let mut h = state;
        let mut out = TransitionOutput {
            state,
            query: None,
            context: None,
            weights: None,
        };
        for (i, (block, kind)) in self.blocks.iter().zip(kinds).enumerate() {
            let x = match kind {
                BlockInput::External => input,
                BlockInput::Context => {
                    let f = attend.as_mut().expect("checked above");
                    let (c, w) = f(g, h)?;
                    out.query = Some(h);
                    out.context = Some(c);
                    out.weights = Some(w);
                    Some(c)
                }
                BlockInput::None => None,
            };
            let args = GruArgs {
                state: h,
                input: x,
                w: x.and(block.w),
                u: block.u,
                b: block.b,
                layer_norm: block.ln,
            };
            if x.is_some() && block.w.is_none() {
                return Err(contract_err!("block {i} receives input but has no input weights"));
            }
            let mask = h_masks.get(i).and_then(|m| m.as_ref());
            h = g.gru_masked(args, mask)?;
        }
        out.state = h;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockInput {
    External,
    Context,
    None,
}
