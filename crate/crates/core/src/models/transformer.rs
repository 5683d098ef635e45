//! Transformer encoder and decoder.

use super::{ModelConfig, Tying};
use crate::data::SideBatch;
use crate::encdec::{check_arity, Decoder, DecoderState, Encoder, EncoderState, ParamSpec, TargetInput};
use crate::error::{contract_err, Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::layers::{
    attention_mask, embed, linear, mha_kv, output_logits, positional_encoding, transformer_block, BlockOptions,
    CrossMemory, FfnParams, LayerNormParams, MhaParams, TransformerBlockParams,
};
use crate::tensor::{Element, Tensor};

fn mha_specs(v: &mut Vec<ParamSpec>, prefix: &str, dm: usize) {
    for p in ["q", "k", "v", "o"] {
        v.push(ParamSpec::glorot(format!("{prefix}W{p}"), &[dm, dm]));
        v.push(ParamSpec::zeros(format!("{prefix}b{p}"), &[dm]));
    }
}

fn ln_specs(v: &mut Vec<ParamSpec>, prefix: &str, dm: usize) {
    v.push(ParamSpec::ones(format!("{prefix}g"), &[dm]));
    v.push(ParamSpec::zeros(format!("{prefix}b"), &[dm]));
}

fn block_specs(prefix: &str, dm: usize, cross: bool) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    mha_specs(&mut v, &format!("{prefix}self_"), dm);
    ln_specs(&mut v, &format!("{prefix}ln_self_"), dm);
    if cross {
        mha_specs(&mut v, &format!("{prefix}cross_"), dm);
        ln_specs(&mut v, &format!("{prefix}ln_cross_"), dm);
    }
    v.push(ParamSpec::glorot(format!("{prefix}ffn_W1"), &[dm, 4 * dm]));
    v.push(ParamSpec::zeros(format!("{prefix}ffn_b1"), &[4 * dm]));
    v.push(ParamSpec::glorot(format!("{prefix}ffn_W2"), &[4 * dm, dm]));
    v.push(ParamSpec::zeros(format!("{prefix}ffn_b2"), &[dm]));
    ln_specs(&mut v, &format!("{prefix}ln_ffn_"), dm);
    v
}

fn mha<T: Element>(g: &Graph<T>, prefix: &str) -> Result<MhaParams> {
    let p = |s: &str| g.param(&format!("{prefix}{s}"));
    Ok(MhaParams {
        wq: p("Wq")?,
        bq: p("bq")?,
        wk: p("Wk")?,
        bk: p("bk")?,
        wv: p("Wv")?,
        bv: p("bv")?,
        wo: p("Wo")?,
        bo: p("bo")?,
    })
}

fn ln<T: Element>(g: &Graph<T>, prefix: &str) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gain: g.param(&format!("{prefix}g"))?,
        bias: g.param(&format!("{prefix}b"))?,
    })
}

fn block<T: Element>(g: &Graph<T>, prefix: &str, cross: bool) -> Result<TransformerBlockParams> {
    Ok(TransformerBlockParams {
        self_attn: mha(g, &format!("{prefix}self_"))?,
        ln_self: ln(g, &format!("{prefix}ln_self_"))?,
        cross_attn: if cross {
            Some((mha(g, &format!("{prefix}cross_"))?, ln(g, &format!("{prefix}ln_cross_"))?))
        } else {
            None
        },
        ffn: FfnParams {
            w1: g.param(&format!("{prefix}ffn_W1"))?,
            b1: g.param(&format!("{prefix}ffn_b1"))?,
            w2: g.param(&format!("{prefix}ffn_W2"))?,
            b2: g.param(&format!("{prefix}ffn_b2"))?,
        },
        ln_ffn: ln(g, &format!("{prefix}ln_ffn_"))?,
    })
}

/// Scaled embeddings plus sinusoidal positions starting at `offset`.
fn embed_positions<T: Element>(
    g: &mut Graph<T>,
    table: NodeRef,
    ids: &[Option<usize>],
    rows: usize,
    len: usize,
    dm: usize,
    offset: usize,
    dropout: f64,
) -> Result<NodeRef> {
    let x = embed(g, table, ids, &[rows, len])?;
    let x = g.scale(x, (dm as f64).sqrt())?;
    let pe = g.input(&positional_encoding::<T>(len, dm, offset)?)?;
    let x = g.add(x, pe)?;
    g.dropout(x, dropout, None)
}

fn check_heads(dm: usize, heads: usize) -> Result<()> {
    if heads == 0 || dm % heads != 0 {
        return Err(Error::Config(format!("model width {dm} is not divisible by {heads} heads")));
    }
    Ok(())
}

pub struct TransformerEncoder {
    prefix: String,
    emb: String,
    vocab: usize,
    dm: usize,
    heads: usize,
    layers: usize,
    dropout: f64,
    prenorm: bool,
}

impl TransformerEncoder {
    pub fn new(cfg: &ModelConfig, k: usize) -> Self {
        TransformerEncoder {
            prefix: format!("encoder{k}_"),
            emb: cfg.embedding_name(Some(k)),
            vocab: cfg.src_vocabs[k],
            dm: cfg.dim_emb,
            heads: cfg.heads,
            layers: cfg.enc_depth,
            dropout: cfg.dropout,
            prenorm: cfg.prenorm,
        }
    }

    fn opts(&self) -> BlockOptions {
        BlockOptions {
            heads: self.heads,
            dropout: self.dropout,
            prenorm: self.prenorm,
        }
    }
}

impl<T: Element> Encoder<T> for TransformerEncoder {
    fn kind(&self) -> &'static str {
        "transformer"
    }

    fn context_dim(&self) -> usize {
        self.dm
    }

    fn params(&self) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::glorot(self.emb.clone(), &[self.vocab, self.dm])];
        for l in 0..self.layers {
            v.extend(block_specs(&format!("{}l{l}_", self.prefix), self.dm, false));
        }
        if self.prenorm {
            ln_specs(&mut v, &format!("{}ln_", self.prefix), self.dm);
        }
        v
    }

    fn build(&self, g: &mut Graph<T>, src: &SideBatch) -> Result<EncoderState<T>> {
        check_heads(self.dm, self.heads)?;
        if src.batch == 0 {
            return Err(Error::Data("empty source batch".into()));
        }
        let (b, s) = (src.batch, src.len);
        let table = g.param(&self.emb)?;
        let ids: Vec<Option<usize>> = src.ids.iter().map(|&i| Some(i)).collect();
        let mut x = embed_positions(g, table, &ids, b, s, self.dm, 0, self.dropout)?;
        let mask = Tensor::new(&[b, s], src.mask.iter().map(|&m| T::from_f64_lossy(m as f64)).collect())?;
        let self_mask = attention_mask(&mask, 1, None)?.reshape(&[b, 1, 1, s])?;
        let opts = self.opts();
        for l in 0..self.layers {
            let p = block(g, &format!("{}l{l}_", self.prefix), false)?;
            x = transformer_block(g, &p, x, None, &self_mask, None, &opts)?.out;
        }
        if self.prenorm {
            let p = ln(g, &format!("{}ln_", self.prefix))?;
            x = g.layer_norm(x, p.gain, p.bias)?;
        }
        let tokens = (0..b)
            .map(|r| src.ids[r * s..r * s + src.length(r)].to_vec())
            .collect();
        Ok(EncoderState { context: x, mask, tokens })
    }
}

/// Transformer decoder over zero or one encoder.
///
/// Payload layout: cross-attention keys/values per layer (computed once in
/// `start_state`), then self-attention caches per layer once a step ran.
pub struct TransformerDecoder {
    vocab: usize,
    dm: usize,
    heads: usize,
    layers: usize,
    dropout: f64,
    prenorm: bool,
    emb: String,
    tied_output: bool,
    arity: usize,
    /// context width when it differs from the model width
    adapter: Option<usize>,
}

const P: &str = "decoder_";

impl TransformerDecoder {
    pub fn new(cfg: &ModelConfig, context_dims: &[usize]) -> Result<Self> {
        if context_dims.len() > 1 {
            return Err(Error::Config("the transformer decoder attends to at most one encoder".into()));
        }
        let dm = cfg.dim_emb;
        check_heads(dm, cfg.heads)?;
        let adapter = match context_dims.first() {
            Some(&dc) if dc != dm => {
                if !cfg.context_adapter {
                    return Err(Error::Config(format!(
                        "encoder context width {dc} differs from decoder width {dm} and context-adapter is off"
                    )));
                }
                Some(dc)
            }
            _ => None,
        };
        Ok(TransformerDecoder {
            vocab: cfg.tgt_vocab,
            dm,
            heads: cfg.heads,
            layers: cfg.dec_depth,
            dropout: cfg.dropout,
            prenorm: cfg.prenorm,
            emb: cfg.embedding_name(None),
            tied_output: cfg.tied == Tying::All,
            arity: context_dims.len(),
            adapter,
        })
    }

    fn opts(&self) -> BlockOptions {
        BlockOptions {
            heads: self.heads,
            dropout: self.dropout,
            prenorm: self.prenorm,
        }
    }

    fn cross_entries(&self) -> usize {
        2 * self.layers * self.arity
    }
}

impl<T: Element> Decoder<T> for TransformerDecoder {
    fn kind(&self) -> &'static str {
        "transformer"
    }

    fn arity(&self) -> usize {
        self.arity
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn params(&self) -> Vec<ParamSpec> {
        let dm = self.dm;
        let mut v = vec![ParamSpec::glorot(self.emb.clone(), &[self.vocab, dm])];
        if let Some(dc) = self.adapter {
            v.push(ParamSpec::glorot(format!("{P}adapter_W"), &[dc, dm]));
            v.push(ParamSpec::zeros(format!("{P}adapter_b"), &[dm]));
        }
        for l in 0..self.layers {
            v.extend(block_specs(&format!("{P}l{l}_"), dm, self.arity > 0));
        }
        if self.prenorm {
            ln_specs(&mut v, &format!("{P}ln_"), dm);
        }
        if !self.tied_output {
            v.push(ParamSpec::glorot(format!("{P}Wout"), &[dm, self.vocab]));
        }
        v.push(ParamSpec::zeros(format!("{P}bout"), &[self.vocab]));
        v
    }

    fn start_state(&self, g: &mut Graph<T>, encoders: Vec<EncoderState<T>>, rows: usize) -> Result<DecoderState<T>> {
        check_arity(self.arity, &encoders)?;
        let mut payload = Vec::with_capacity(self.cross_entries());
        if let Some(enc) = encoders.first() {
            if enc.rows() != rows {
                return Err(contract_err!("encoder state has {} rows, decoder asked for {rows}", enc.rows()));
            }
            let memory = match self.adapter {
                Some(_) => {
                    let w = g.param(&format!("{P}adapter_W"))?;
                    let b = g.param(&format!("{P}adapter_b"))?;
                    linear(g, enc.context, w, Some(b))?
                }
                None => enc.context,
            };
            for l in 0..self.layers {
                let p = mha(g, &format!("{P}l{l}_cross_"))?;
                let (k, v) = mha_kv(g, &p, memory, self.heads)?;
                payload.push(k);
                payload.push(v);
            }
        }
        Ok(DecoderState::new(encoders, rows, payload))
    }

    fn step(&self, g: &mut Graph<T>, state: &DecoderState<T>, input: &TargetInput) -> Result<DecoderState<T>> {
        let rows = state.rows;
        if input.rows() != rows {
            return Err(contract_err!("{} input rows for a state with {rows} hypotheses", input.rows()));
        }
        let (t, pos) = (input.len, state.position);
        let table = g.param(&self.emb)?;
        let mut x = embed_positions(g, table, &input.prev, rows, t, self.dm, pos, self.dropout)?;
        let self_mask = attention_mask(&Tensor::<T>::full(&[1, pos + t], T::one())?, t, Some(pos))?;
        let cross_mask = match state.encoders.first() {
            Some(enc) => Some(enc.mask.reshape(&[rows, 1, 1, enc.len()])?),
            None => None,
        };
        let nc = self.cross_entries();
        let cached = state.payload.len() > nc;
        let opts = self.opts();
        let mut caches = Vec::with_capacity(2 * self.layers);
        for l in 0..self.layers {
            let p = block(g, &format!("{P}l{l}_"), self.arity > 0)?;
            let cache = cached.then(|| (state.payload[nc + 2 * l], state.payload[nc + 2 * l + 1]));
            let cross = cross_mask.as_ref().map(|mask| CrossMemory {
                k: state.payload[2 * l],
                v: state.payload[2 * l + 1],
                mask,
            });
            let out = transformer_block(g, &p, x, cache, &self_mask, cross.as_ref(), &opts)?;
            x = out.out;
            caches.push(out.k);
            caches.push(out.v);
        }
        if self.prenorm {
            let p = ln(g, &format!("{P}ln_"))?;
            x = g.layer_norm(x, p.gain, p.bias)?;
        }
        let (wout, tied) = if self.tied_output {
            (table, true)
        } else {
            (g.param(&format!("{P}Wout"))?, false)
        };
        let bout = g.param(&format!("{P}bout"))?;
        let logits = output_logits(g, x, wout, bout, tied)?;
        let mut payload = state.payload[..nc].to_vec();
        payload.extend(caches);
        let mut next = DecoderState::new(state.encoders.clone(), rows, payload);
        next.position = pos + t;
        next.logits = Some(logits);
        Ok(next)
    }
}
