//! Recurrent encoders and decoders built from deep-transition GRU cells.

use std::any::Any;

use super::{ModelConfig, Tying};
use crate::data::SideBatch;
use crate::encdec::{
    check_arity, masked_mean, Decoder, DecoderState, Encoder, EncoderState, ParamSpec, StateExt, TargetInput,
};
use crate::error::{contract_err, Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::layers::{
    bahdanau_attention, embed, linear, output_logits, AttentionMemory, BahdanauParams, BlockInput,
    DeepTransitionCell, GruBlock,
};
use crate::tensor::{Element, Tensor};

fn gru_specs(prefix: &str, input: Option<usize>, d: usize, ln: bool) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    if let Some(e) = input {
        v.push(ParamSpec::glorot(format!("{prefix}W"), &[e, 3 * d]));
    }
    v.push(ParamSpec::glorot(format!("{prefix}U"), &[d, 3 * d]));
    v.push(ParamSpec::zeros(format!("{prefix}b"), &[3 * d]));
    if ln {
        v.push(ParamSpec::ones(format!("{prefix}ln_g"), &[3 * d]));
        v.push(ParamSpec::zeros(format!("{prefix}ln_b"), &[3 * d]));
    }
    v
}

fn gru_block<T: Element>(g: &Graph<T>, prefix: &str, input: bool, ln: bool) -> Result<GruBlock> {
    Ok(GruBlock {
        w: if input { Some(g.param(&format!("{prefix}W"))?) } else { None },
        u: g.param(&format!("{prefix}U"))?,
        b: g.param(&format!("{prefix}b"))?,
        ln: if ln {
            Some((g.param(&format!("{prefix}ln_g"))?, g.param(&format!("{prefix}ln_b"))?))
        } else {
            None
        },
    })
}

/// One recurrent dropout mask per block, shared by every time step.
fn recurrent_masks<T: Element>(g: &mut Graph<T>, blocks: usize, rows: usize, d: usize, p: f64) -> Result<Vec<Option<Tensor<T>>>> {
    (0..blocks)
        .map(|_| {
            if g.is_inference() || p == 0.0 {
                Ok(None)
            } else {
                g.dropout_mask(&[rows, d], p).map(Some)
            }
        })
        .collect()
}

/// `[b, t, e] → [b, e]` at position `i`.
fn column<T: Element>(g: &mut Graph<T>, x: NodeRef, i: usize) -> Result<NodeRef> {
    let (b, e) = (x.shape.dim(0), x.shape.dim(2));
    let s = g.slice(x, 1, i, 1)?;
    g.reshape(s, &[b, e])
}

/// Stack `[b, d]` nodes along a new time axis.
fn stack_time<T: Element>(g: &mut Graph<T>, steps: &[NodeRef]) -> Result<NodeRef> {
    let cols = steps
        .iter()
        .map(|&h| g.reshape(h, &[h.shape.dim(0), 1, h.shape.dim(1)]))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&cols, 1)
}

/// Bidirectional deep-transition GRU encoder; context is `[b, s, 2d]`.
pub struct RnnEncoder {
    prefix: String,
    emb: String,
    vocab: usize,
    e: usize,
    d: usize,
    depth: usize,
    ln: bool,
    dropout: f64,
}

impl RnnEncoder {
    pub fn new(cfg: &ModelConfig, k: usize) -> Self {
        RnnEncoder {
            prefix: format!("encoder{k}_"),
            emb: cfg.embedding_name(Some(k)),
            vocab: cfg.src_vocabs[k],
            e: cfg.dim_emb,
            d: cfg.dim_rnn,
            depth: cfg.enc_depth,
            ln: cfg.layer_norm,
            dropout: cfg.dropout,
        }
    }

    fn block_prefix(&self, dir: &str, i: usize) -> String {
        format!("{}{dir}_cell{i}_", self.prefix)
    }

    fn cell<T: Element>(&self, g: &Graph<T>, dir: &str) -> Result<DeepTransitionCell> {
        let blocks = (0..self.depth)
            .map(|i| gru_block(g, &self.block_prefix(dir, i), i == 0, self.ln))
            .collect::<Result<Vec<_>>>()?;
        Ok(DeepTransitionCell {
            blocks,
            attention_slot: None,
        })
    }
}

impl<T: Element> Encoder<T> for RnnEncoder {
    fn kind(&self) -> &'static str {
        "rnn"
    }

    fn context_dim(&self) -> usize {
        2 * self.d
    }

    fn params(&self) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::glorot(self.emb.clone(), &[self.vocab, self.e])];
        for dir in ["fw", "bw"] {
            for i in 0..self.depth {
                let input = (i == 0).then_some(self.e);
                v.extend(gru_specs(&self.block_prefix(dir, i), input, self.d, self.ln));
            }
        }
        v
    }

    fn build(&self, g: &mut Graph<T>, src: &SideBatch) -> Result<EncoderState<T>> {
        if src.batch == 0 {
            return Err(Error::Data("empty source batch".into()));
        }
        let (b, s, d) = (src.batch, src.len, self.d);
        let table = g.param(&self.emb)?;
        let ids: Vec<Option<usize>> = src.ids.iter().map(|&i| Some(i)).collect();
        let emb = embed(g, table, &ids, &[b, s])?;
        let emb = g.dropout(emb, self.dropout, Some(1))?;
        let mut mask_cols = Vec::with_capacity(s);
        for t in 0..s {
            let col: Vec<T> = (0..b).map(|r| T::from_f64_lossy(src.mask[r * s + t] as f64)).collect();
            if col.iter().all(|&m| m == T::one()) {
                mask_cols.push(None);
            } else {
                let inv: Vec<T> = col.iter().map(|&m| T::one() - m).collect();
                mask_cols.push(Some((Tensor::new(&[b, 1], col)?, Tensor::new(&[b, 1], inv)?)));
            }
        }
        let mut directions = Vec::with_capacity(2);
        for dir in ["fw", "bw"] {
            let cell = self.cell(g, dir)?;
            let masks = recurrent_masks(g, self.depth, b, d, self.dropout)?;
            let mut h = g.zeros(&[b, d])?;
            let mut states = vec![h; s];
            let order: Vec<usize> = if dir == "fw" { (0..s).collect() } else { (0..s).rev().collect() };
            for t in order {
                let x = column(g, emb, t)?;
                let out = cell.step(g, Some(x), h, &masks, None)?.state;
                // padded positions carry the previous state unchanged
                h = match &mask_cols[t] {
                    None => out,
                    Some((m, inv)) => {
                        let keep = g.mask_mul(out, m)?;
                        let carry = g.mask_mul(h, inv)?;
                        g.add(keep, carry)?
                    }
                };
                states[t] = h;
            }
            directions.push(stack_time(g, &states)?);
        }
        let context = g.concat(&directions, 2)?;
        let mask = Tensor::new(&[b, s], src.mask.iter().map(|&m| T::from_f64_lossy(m as f64)).collect())?;
        let tokens = (0..b)
            .map(|r| src.ids[r * s..r * s + src.length(r)].to_vec())
            .collect();
        Ok(EncoderState { context, mask, tokens })
    }
}

/// Monotone hard-attention positions, one per hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAttentionIndex {
    pub index: Vec<usize>,
}

impl<T: Element> StateExt<T> for HardAttentionIndex {
    fn select(&self, rows: &[usize]) -> Box<dyn StateExt<T>> {
        Box::new(HardAttentionIndex {
            index: rows.iter().map(|&r| self.index[r]).collect(),
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Deep-transition GRU decoder.
///
/// With one or more encoders, attention runs after block 1 and block 2
/// reads the context (several encoders: one attention each, contexts
/// concatenated and projected to `d`). The hard-attention variant replaces
/// soft attention by a monotone index that a learned gate advances.
pub struct RnnDecoder {
    vocab: usize,
    e: usize,
    d: usize,
    att: usize,
    blocks: usize,
    context_dims: Vec<usize>,
    hard: bool,
    ln: bool,
    dropout: f64,
    emb: String,
    tied_output: bool,
}

const P: &str = "decoder_";

impl RnnDecoder {
    pub fn new(cfg: &ModelConfig, context_dims: &[usize], hard: bool) -> Result<Self> {
        if hard && context_dims.len() != 1 {
            return Err(Error::Config("hard attention needs exactly one encoder".into()));
        }
        if !context_dims.is_empty() && cfg.dec_depth < 2 {
            return Err(Error::Config(
                "an attentional decoder needs at least 2 blocks (attention sits between blocks 1 and 2)".into(),
            ));
        }
        Ok(RnnDecoder {
            vocab: cfg.tgt_vocab,
            e: cfg.dim_emb,
            d: cfg.dim_rnn,
            att: cfg.dim_rnn,
            blocks: cfg.dec_depth,
            context_dims: context_dims.to_vec(),
            hard,
            ln: cfg.layer_norm,
            dropout: cfg.dropout,
            emb: cfg.embedding_name(None),
            tied_output: cfg.tied == Tying::All,
        })
    }

    fn arity_(&self) -> usize {
        self.context_dims.len()
    }

    /// Width of the context that block 2 and the output layer read.
    fn context_in(&self) -> usize {
        match self.arity_() {
            0 => 0,
            1 => self.context_dims[0],
            _ => self.d,
        }
    }

    fn attention_slot(&self) -> Option<usize> {
        (self.arity_() > 0).then_some(1)
    }

    fn block_prefix(i: usize) -> String {
        format!("{P}cell{i}_")
    }

    fn cell<T: Element>(&self, g: &Graph<T>) -> Result<DeepTransitionCell> {
        let kinds = DeepTransitionCell::block_inputs(self.blocks, self.attention_slot());
        let blocks = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| gru_block(g, &Self::block_prefix(i), *k != BlockInput::None, self.ln))
            .collect::<Result<Vec<_>>>()?;
        Ok(DeepTransitionCell {
            blocks,
            attention_slot: self.attention_slot(),
        })
    }

    fn attention<T: Element>(&self, g: &Graph<T>, k: usize) -> Result<BahdanauParams> {
        let n = |s: &str| format!("{P}att{k}_{s}");
        Ok(BahdanauParams {
            w: g.param(&n("W"))?,
            u: g.param(&n("U"))?,
            b: g.param(&n("b"))?,
            v: g.param(&n("v"))?,
            ln: if self.ln {
                Some((g.param(&n("ln_g"))?, g.param(&n("ln_b"))?))
            } else {
                None
            },
        })
    }

    fn soft(&self) -> bool {
        !self.hard && self.arity_() > 0
    }
}

impl<T: Element> Decoder<T> for RnnDecoder {
    fn kind(&self) -> &'static str {
        if self.hard {
            "hard-attention"
        } else {
            "rnn"
        }
    }

    fn arity(&self) -> usize {
        self.arity_()
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn params(&self) -> Vec<ParamSpec> {
        let (e, d, a) = (self.e, self.d, self.att);
        let mut v = vec![ParamSpec::glorot(self.emb.clone(), &[self.vocab, e])];
        for (k, &dc) in self.context_dims.iter().enumerate() {
            v.push(ParamSpec::glorot(format!("{P}init{k}_W"), &[dc, d]));
        }
        if self.arity_() > 0 {
            v.push(ParamSpec::zeros(format!("{P}init_b"), &[d]));
        }
        let kinds = DeepTransitionCell::block_inputs(self.blocks, self.attention_slot());
        for (i, kind) in kinds.iter().enumerate() {
            let input = match kind {
                BlockInput::External => Some(e),
                BlockInput::Context => Some(self.context_in()),
                BlockInput::None => None,
            };
            v.extend(gru_specs(&Self::block_prefix(i), input, d, self.ln));
        }
        if self.soft() {
            for (k, &dc) in self.context_dims.iter().enumerate() {
                let n = |s: &str| format!("{P}att{k}_{s}");
                v.push(ParamSpec::glorot(n("W"), &[d, a]));
                v.push(ParamSpec::glorot(n("U"), &[dc, a]));
                v.push(ParamSpec::zeros(n("b"), &[a]));
                v.push(ParamSpec::glorot(n("v"), &[a, 1]));
                if self.ln {
                    v.push(ParamSpec::ones(n("ln_g"), &[a]));
                    v.push(ParamSpec::zeros(n("ln_b"), &[a]));
                }
            }
        }
        if self.arity_() > 1 {
            let total: usize = self.context_dims.iter().sum();
            v.push(ParamSpec::glorot(format!("{P}combine_W"), &[total, d]));
            v.push(ParamSpec::zeros(format!("{P}combine_b"), &[d]));
        }
        if self.hard {
            v.push(ParamSpec::glorot(format!("{P}gate_W"), &[d, 1]));
            v.push(ParamSpec::zeros(format!("{P}gate_b"), &[1]));
        }
        v.push(ParamSpec::glorot(format!("{P}pre_Ws"), &[d, e]));
        v.push(ParamSpec::glorot(format!("{P}pre_Wy"), &[e, e]));
        if self.arity_() > 0 {
            v.push(ParamSpec::glorot(format!("{P}pre_Wc"), &[self.context_in(), e]));
        }
        v.push(ParamSpec::zeros(format!("{P}pre_b"), &[e]));
        if !self.tied_output {
            v.push(ParamSpec::glorot(format!("{P}Wout"), &[e, self.vocab]));
        }
        v.push(ParamSpec::zeros(format!("{P}bout"), &[self.vocab]));
        v
    }

    fn start_state(&self, g: &mut Graph<T>, encoders: Vec<EncoderState<T>>, rows: usize) -> Result<DecoderState<T>> {
        check_arity(self.arity_(), &encoders)?;
        if let Some(e) = encoders.iter().find(|e| e.rows() != rows) {
            return Err(contract_err!("encoder state has {} rows, decoder asked for {rows}", e.rows()));
        }
        let h0 = if encoders.is_empty() {
            g.zeros(&[rows, self.d])?
        } else {
            let mut acc = None;
            for (k, enc) in encoders.iter().enumerate() {
                let mean = masked_mean(g, enc.context, &enc.mask)?;
                let w = g.param(&format!("{P}init{k}_W"))?;
                let proj = g.matmul(mean, w)?;
                acc = Some(match acc {
                    None => proj,
                    Some(a) => g.add(a, proj)?,
                });
            }
            let b = g.param(&format!("{P}init_b"))?;
            let pre = g.add(acc.expect("at least one encoder"), b)?;
            g.tanh(pre)?
        };
        let mut payload = vec![h0];
        if self.soft() {
            for (k, enc) in encoders.iter().enumerate() {
                let u = g.param(&format!("{P}att{k}_U"))?;
                payload.push(g.matmul(enc.context, u)?);
            }
        }
        let mut state = DecoderState::new(encoders, rows, payload);
        if self.hard {
            state.ext = Some(Box::new(HardAttentionIndex { index: vec![0; rows] }));
        }
        Ok(state)
    }

    fn step(&self, g: &mut Graph<T>, state: &DecoderState<T>, input: &TargetInput) -> Result<DecoderState<T>> {
        let rows = state.rows;
        if input.rows() != rows {
            return Err(contract_err!("{} input rows for a state with {rows} hypotheses", input.rows()));
        }
        let t = input.len;
        let table = g.param(&self.emb)?;
        let emb = embed(g, table, &input.prev, &[rows, t])?;
        let emb = g.dropout(emb, self.dropout, Some(1))?;
        let cell = self.cell(g)?;
        let masks = recurrent_masks(g, self.blocks, rows, self.d, self.dropout)?;
        let memories: Vec<AttentionMemory<T>> = if self.soft() {
            state
                .encoders
                .iter()
                .enumerate()
                .map(|(k, enc)| AttentionMemory {
                    keys: enc.context,
                    keys_proj: state.payload[1 + k],
                    mask: enc.mask.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let attn = (0..memories.len())
            .map(|k| self.attention(g, k))
            .collect::<Result<Vec<_>>>()?;
        let combine = if self.arity_() > 1 {
            Some((g.param(&format!("{P}combine_W"))?, g.param(&format!("{P}combine_b"))?))
        } else {
            None
        };
        let ws = g.param(&format!("{P}pre_Ws"))?;
        let wy = g.param(&format!("{P}pre_Wy"))?;
        let wc = if self.arity_() > 0 {
            Some(g.param(&format!("{P}pre_Wc"))?)
        } else {
            None
        };
        let pb = g.param(&format!("{P}pre_b"))?;
        let gate = if self.hard {
            Some((g.param(&format!("{P}gate_W"))?, g.param(&format!("{P}gate_b"))?))
        } else {
            None
        };
        let mut index = state
            .ext::<HardAttentionIndex>()
            .map(|h| h.index.clone())
            .unwrap_or_default();
        let training = !g.is_inference();

        let mut h = state.payload[0];
        let mut pres = Vec::with_capacity(t);
        let mut gate_logits = Vec::new();
        let mut gate_labels = Vec::new();
        let mut gate_mask = Vec::new();
        let mut attention = None;
        for i in 0..t {
            let y = column(g, emb, i)?;
            let out = if self.arity_() == 0 {
                cell.step(g, Some(y), h, &masks, None)?
            } else if self.hard {
                let enc = &state.encoders[0];
                let s = enc.len();
                let flat = g.reshape(enc.context, &[rows * s, enc.dim()])?;
                let idx = &index;
                let mut attend = |g: &mut Graph<T>, _q: NodeRef| -> Result<(NodeRef, NodeRef)> {
                    let picks: Vec<usize> = (0..rows).map(|r| r * s + idx[r]).collect();
                    let ctx = g.select_rows(flat, &picks)?;
                    let mut onehot = vec![T::zero(); rows * s];
                    for r in 0..rows {
                        onehot[r * s + idx[r]] = T::one();
                    }
                    let w = g.input(&Tensor::new(&[rows, s], onehot)?)?;
                    Ok((ctx, w))
                };
                cell.step(g, Some(y), h, &masks, Some(&mut attend))?
            } else {
                let mut attend = |g: &mut Graph<T>, q: NodeRef| -> Result<(NodeRef, NodeRef)> {
                    let mut ctxs = Vec::with_capacity(memories.len());
                    let mut first = None;
                    for (p, mem) in attn.iter().zip(&memories) {
                        let (c, w) = bahdanau_attention(g, p, q, mem)?;
                        ctxs.push(c);
                        first.get_or_insert(w);
                    }
                    let ctx = match combine {
                        Some((w, b)) => {
                            let cat = g.concat(&ctxs, 1)?;
                            linear(g, cat, w, Some(b))?
                        }
                        None => ctxs[0],
                    };
                    Ok((ctx, first.expect("one memory at least")))
                };
                cell.step(g, Some(y), h, &masks, Some(&mut attend))?
            };
            h = out.state;
            attention = out.weights;
            let mut pre = g.matmul(h, ws)?;
            let py = g.matmul(y, wy)?;
            pre = g.add(pre, py)?;
            if let (Some(wc), Some(c)) = (wc, out.context) {
                let pc = g.matmul(c, wc)?;
                pre = g.add(pre, pc)?;
            }
            pre = g.add(pre, pb)?;
            let pre = g.tanh(pre)?;
            let pre = g.dropout(pre, self.dropout, None)?;
            pres.push(pre);

            if let Some((gw, gb)) = gate {
                let z = linear(g, h, gw, Some(gb))?;
                let enc = &state.encoders[0];
                let gold = input.targets.as_ref().map(|tg| {
                    (0..rows)
                        .map(|r| tg[r * t + i] == enc.tokens[r][index[r]])
                        .collect::<Vec<bool>>()
                });
                let advance: Vec<bool> = match (&gold, training) {
                    // teacher-forced alignment during training
                    (Some(gold), true) => gold.clone(),
                    _ => {
                        g.forward()?;
                        g.value_slice(z)?.iter().map(|&v| v > T::zero()).collect()
                    }
                };
                if training {
                    if let (Some(gold), Some(mask)) = (&gold, &input.mask) {
                        gate_logits.push(z);
                        for r in 0..rows {
                            gate_labels.push(if gold[r] { 0 } else { 1 });
                            gate_mask.push(mask[r * t + i]);
                        }
                    }
                }
                for r in 0..rows {
                    let last = enc.tokens[r].len() - 1;
                    index[r] = (index[r] + advance[r] as usize).min(last);
                }
            }
        }
        let hidden = stack_time(g, &pres)?;
        let (wout, tied) = if self.tied_output {
            (table, true)
        } else {
            (g.param(&format!("{P}Wout"))?, false)
        };
        let bout = g.param(&format!("{P}bout"))?;
        let logits = output_logits(g, hidden, wout, bout, tied)?;

        let aux_loss = if !gate_logits.is_empty() && gate_mask.iter().any(|&m| m != 0.0) {
            // binary cross-entropy as a two-way softmax over [z, 0]
            let z = g.concat(&gate_logits, 0)?;
            let zero = g.zeros(&[z.shape.dim(0), 1])?;
            let two = g.concat(&[z, zero], 1)?;
            // rows of `two` are position-major; reorder labels to match
            let n = gate_labels.len() / rows;
            let mut labels = Vec::with_capacity(gate_labels.len());
            let mut mask = Vec::with_capacity(gate_mask.len());
            for i in 0..n {
                for r in 0..rows {
                    labels.push(gate_labels[i * rows + r]);
                    mask.push(gate_mask[i * rows + r]);
                }
            }
            Some(g.cross_entropy(two, &labels, &mask, 0.0)?)
        } else {
            None
        };

        let mut payload = vec![h];
        payload.extend_from_slice(&state.payload[1..]);
        let mut next = DecoderState::new(state.encoders.clone(), rows, payload);
        next.position = state.position + t;
        next.logits = Some(logits);
        next.attention = attention;
        next.aux_loss = aux_loss;
        if self.hard {
            next.ext = Some(Box::new(HardAttentionIndex { index }));
        }
        Ok(next)
    }
}
