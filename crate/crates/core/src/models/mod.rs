//! The model zoo and the machinery around it: configuration, parameter
//! declaration and initialization, census, and the model file format.

pub mod io;
mod rnn;
mod transformer;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, SideBatch};
use crate::encdec::{Decoder, DecoderState, Encoder, EncoderState, Init, ParamSpec, TargetInput};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::tensor::{Element, Tensor};

pub use rnn::{HardAttentionIndex, RnnDecoder, RnnEncoder};
pub use transformer::{TransformerDecoder, TransformerEncoder};

/// Model architectures with preset defaults.
pub const MODEL_TYPES: &[&str] = &["s2s-shallow", "s2s-deep", "transformer", "lm", "dual-source", "hard-attention"];

pub const ENCODER_KINDS: &[&str] = &["rnn", "transformer"];
pub const DECODER_KINDS: &[&str] = &["rnn", "transformer", "hard-attention"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tying {
    None,
    /// one matrix for every source and the target embedding
    SourceTarget,
    /// additionally reused (transposed) as the output projection
    All,
}

impl fmt::Display for Tying {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tying::None => "none",
            Tying::SourceTarget => "source-target",
            Tying::All => "all",
        })
    }
}

impl FromStr for Tying {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Tying::None),
            "source-target" => Ok(Tying::SourceTarget),
            "all" => Ok(Tying::All),
            _ => Err(Error::Config(format!("unknown tying mode {s:?} (none, source-target, all)"))),
        }
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub model_type: String,
    pub encoder: String,
    pub decoder: String,
    /// one entry per source stream; empty for language models
    pub src_vocabs: Vec<usize>,
    pub tgt_vocab: usize,
    pub dim_emb: usize,
    pub dim_rnn: usize,
    pub heads: usize,
    /// GRU blocks per encoder cell, or transformer encoder layers
    pub enc_depth: usize,
    /// GRU blocks in the decoder cell, or transformer decoder layers
    pub dec_depth: usize,
    pub dropout: f64,
    pub tied: Tying,
    pub layer_norm: bool,
    pub prenorm: bool,
    /// project encoder contexts whose width differs from the decoder's
    pub context_adapter: bool,
    /// trained on reversed targets; affects data handling only
    pub right_left: bool,
}

impl ModelConfig {
    /// Defaults for a named architecture.
    pub fn preset(model_type: &str, src_vocabs: &[usize], tgt_vocab: usize) -> Result<Self> {
        let mut c = ModelConfig {
            model_type: model_type.to_string(),
            encoder: "rnn".into(),
            decoder: "rnn".into(),
            src_vocabs: src_vocabs.to_vec(),
            tgt_vocab,
            dim_emb: 64,
            dim_rnn: 128,
            heads: 4,
            enc_depth: 1,
            dec_depth: 2,
            dropout: 0.1,
            tied: Tying::None,
            layer_norm: true,
            prenorm: true,
            context_adapter: true,
            right_left: false,
        };
        match model_type {
            "s2s-shallow" => c.layer_norm = false,
            "s2s-deep" => {
                c.enc_depth = 4;
                c.dec_depth = 8;
            }
            "transformer" => {
                c.encoder = "transformer".into();
                c.decoder = "transformer".into();
                c.enc_depth = 2;
                c.dec_depth = 2;
            }
            "lm" => c.encoder = "none".into(),
            "dual-source" => {}
            "hard-attention" => c.decoder = "hard-attention".into(),
            "custom" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown model type {other:?} (expected one of {})",
                    MODEL_TYPES.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn arity(&self) -> usize {
        self.src_vocabs.len()
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let vocabs: Vec<String> = self.src_vocabs.iter().map(|v| v.to_string()).collect();
        let fields = [
            ("type", self.model_type.clone()),
            ("encoder", self.encoder.clone()),
            ("decoder", self.decoder.clone()),
            ("src-vocabs", vocabs.join(",")),
            ("tgt-vocab", self.tgt_vocab.to_string()),
            ("dim-emb", self.dim_emb.to_string()),
            ("dim-rnn", self.dim_rnn.to_string()),
            ("heads", self.heads.to_string()),
            ("enc-depth", self.enc_depth.to_string()),
            ("dec-depth", self.dec_depth.to_string()),
            ("dropout", self.dropout.to_string()),
            ("tied-embeddings", self.tied.to_string()),
            ("layer-normalization", self.layer_norm.to_string()),
            ("prenorm", self.prenorm.to_string()),
            ("context-adapter", self.context_adapter.to_string()),
            ("right-left", self.right_left.to_string()),
        ];
        fields.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::preset("custom", &[], 0)?;
        let mut seen_type = false;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            let v = v.trim();
            let bad = |e: &dyn fmt::Display| Error::Format(format!("bad value for {k}: {e}"));
            match k.trim() {
                "type" => {
                    c.model_type = v.to_string();
                    seen_type = true;
                }
                "encoder" => c.encoder = v.to_string(),
                "decoder" => c.decoder = v.to_string(),
                "src-vocabs" => {
                    c.src_vocabs = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim().parse().map_err(|e| bad(&e)))
                        .collect::<Result<_>>()?
                }
                "tgt-vocab" => c.tgt_vocab = v.parse().map_err(|e| bad(&e))?,
                "dim-emb" => c.dim_emb = v.parse().map_err(|e| bad(&e))?,
                "dim-rnn" => c.dim_rnn = v.parse().map_err(|e| bad(&e))?,
                "heads" => c.heads = v.parse().map_err(|e| bad(&e))?,
                "enc-depth" => c.enc_depth = v.parse().map_err(|e| bad(&e))?,
                "dec-depth" => c.dec_depth = v.parse().map_err(|e| bad(&e))?,
                "dropout" => c.dropout = v.parse().map_err(|e| bad(&e))?,
                "tied-embeddings" => c.tied = v.parse()?,
                "layer-normalization" => c.layer_norm = v.parse().map_err(|e| bad(&e))?,
                "prenorm" => c.prenorm = v.parse().map_err(|e| bad(&e))?,
                "context-adapter" => c.context_adapter = v.parse().map_err(|e| bad(&e))?,
                "right-left" => c.right_left = v.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::Format(format!("unknown model config key {other:?}"))),
            }
        }
        if !seen_type {
            return Err(Error::Format("model config lacks a type".into()));
        }
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tgt_vocab < 3 {
            return bad(format!("target vocabulary of {} entries is too small", self.tgt_vocab));
        }
        if self.dim_emb < 2 || self.dim_rnn < 2 {
            return bad("dimensions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.tied != Tying::None && self.src_vocabs.iter().any(|&v| v != self.tgt_vocab) {
            return bad(format!(
                "tied embeddings need equal vocabularies, got sources {:?} and target {}",
                self.src_vocabs, self.tgt_vocab
            ));
        }
        if self.encoder == "none" && self.arity() > 0 {
            return bad("a model without encoder takes no source vocabularies".into());
        }
        if self.encoder != "none" && self.arity() == 0 {
            return bad("no source vocabulary given".into());
        }
        if self.dec_depth == 0 || (self.arity() > 0 && self.encoder != "transformer" && self.enc_depth == 0) {
            return bad("depths must be positive".into());
        }
        Ok(())
    }

    /// Name of the embedding matrix for source `k` (`None` = target).
    pub fn embedding_name(&self, source: Option<usize>) -> String {
        match (self.tied, source) {
            (Tying::None, Some(k)) => format!("encoder{k}_Wemb"),
            (Tying::None, None) => "decoder_Wemb".into(),
            _ => "Wemb".into(),
        }
    }
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: IndexMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::from_shape(t.shape(), vec![0.0; t.numel()]).expect("same shape")))
                .collect(),
        }
    }

    /// Copy every tensor into `g` as a parameter.
    pub fn load_into<T: Element>(&self, g: &mut Graph<T>) -> Result<()> {
        for (name, t) in &self.map {
            g.set_param(name, &t.cast())?;
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.map
            .iter()
            .map(|(k, a)| other.get(k).map_or(f64::INFINITY, |b| a.max_abs_diff(b)))
            .fold(0.0, f64::max)
    }
}

/// One census line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub count: usize,
}

/// A model: one encoder per source stream and a decoder.
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    encoders: Vec<Box<dyn Encoder<T>>>,
    decoder: Box<dyn Decoder<T>>,
    specs: Vec<ParamSpec>,
}

impl<T: Element> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

fn make_encoder<T: Element>(cfg: &ModelConfig, k: usize) -> Result<Box<dyn Encoder<T>>> {
    Ok(match cfg.encoder.as_str() {
        "rnn" => Box::new(RnnEncoder::new(cfg, k)),
        "transformer" => Box::new(TransformerEncoder::new(cfg, k)),
        other => {
            return Err(Error::Config(format!(
                "unknown encoder {other:?} (expected one of {})",
                ENCODER_KINDS.join(", ")
            )))
        }
    })
}

fn make_decoder<T: Element>(cfg: &ModelConfig, context_dims: &[usize]) -> Result<Box<dyn Decoder<T>>> {
    Ok(match cfg.decoder.as_str() {
        "rnn" => Box::new(RnnDecoder::new(cfg, context_dims, false)?),
        "hard-attention" => Box::new(RnnDecoder::new(cfg, context_dims, true)?),
        "transformer" => Box::new(TransformerDecoder::new(cfg, context_dims)?),
        other => {
            return Err(Error::Config(format!(
                "unknown decoder {other:?} (expected one of {})",
                DECODER_KINDS.join(", ")
            )))
        }
    })
}

/// Loss terms of one teacher-forced batch.
pub struct Loss {
    /// total training objective (scalar)
    pub total: NodeRef,
    /// mean token cross-entropy (scalar)
    pub cross_entropy: NodeRef,
    /// target tokens counted, including `</s>`
    pub labels: usize,
    pub logits: NodeRef,
}

impl<T: Element> Model<T> {
    /// Build any registered encoder kind with any registered decoder kind.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoders = (0..config.arity())
            .map(|k| make_encoder::<T>(&config, k))
            .collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = encoders.iter().map(|e| e.context_dim()).collect();
        let decoder = make_decoder::<T>(&config, &dims)?;
        if decoder.arity() != encoders.len() {
            return Err(Error::Config(format!(
                "decoder {} takes {} encoder(s), configuration has {}",
                decoder.kind(),
                decoder.arity(),
                encoders.len()
            )));
        }
        let mut specs: Vec<ParamSpec> = Vec::new();
        for spec in encoders.iter().flat_map(|e| e.params()).chain(decoder.params()) {
            match specs.iter().find(|s| s.name == spec.name) {
                Some(prev) if prev.dims != spec.dims => {
                    return Err(Error::Config(format!(
                        "parameter {} declared as {:?} and {:?}",
                        spec.name, prev.dims, spec.dims
                    )))
                }
                Some(_) => {}
                None => specs.push(spec),
            }
        }
        Ok(Model {
            config,
            encoders,
            decoder,
            specs,
        })
    }

    pub fn decoder(&self) -> &dyn Decoder<T> {
        self.decoder.as_ref()
    }

    pub fn encoders(&self) -> &[Box<dyn Encoder<T>>] {
        &self.encoders
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn census(&self) -> Vec<CensusEntry> {
        self.specs
            .iter()
            .map(|s| CensusEntry {
                name: s.name.clone(),
                dims: s.dims.clone(),
                count: s.numel(),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Seeded initialization: Glorot-uniform matrices, zero biases, unit
    /// layer-norm gains.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for s in &self.specs {
            let n = s.numel();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Glorot => {
                    let (fan_in, fan_out) = match s.dims.as_slice() {
                        [a, b] => (*a, *b),
                        [a] => (*a, *a),
                        other => (other[0], other[1..].iter().product()),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect()
                }
            };
            set.insert(s.name.clone(), Tensor::new(&s.dims, data).expect("spec dims are valid"));
        }
        set
    }

    /// Check that `params` matches the declared names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        for s in &self.specs {
            match params.get(&s.name) {
                Some(t) if t.dims() == s.dims.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        s.name,
                        t.dims(),
                        s.dims
                    )))
                }
                None => return Err(Error::Format(format!("parameter {} missing", s.name))),
            }
        }
        if params.len() != self.specs.len() {
            return Err(Error::Format(format!(
                "{} parameters given, model declares {}",
                params.len(),
                self.specs.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<T>, sources: &[SideBatch]) -> Result<Vec<EncoderState<T>>> {
        if sources.len() != self.encoders.len() {
            return Err(Error::Data(format!(
                "model expects {} source stream(s), batch has {}",
                self.encoders.len(),
                sources.len()
            )));
        }
        self.encoders.iter().zip(sources).map(|(e, s)| e.build(g, s)).collect()
    }

    /// Encode `sources` and create the decoder's start state for `rows`
    /// hypotheses (one per sentence for encoder models).
    pub fn start(&self, g: &mut Graph<T>, sources: &[SideBatch], rows: usize) -> Result<DecoderState<T>> {
        let enc = self.encode(g, sources)?;
        self.decoder.start_state(g, enc, rows)
    }

    pub fn step(&self, g: &mut Graph<T>, state: &DecoderState<T>, input: &TargetInput) -> Result<DecoderState<T>> {
        self.decoder.step(g, state, input)
    }

    pub fn select(&self, g: &mut Graph<T>, state: &DecoderState<T>, rows: &[usize]) -> Result<DecoderState<T>> {
        self.decoder.select(g, state, rows)
    }

    /// Teacher-forced logits `[b, t, V]` for the target side of `batch`.
    pub fn teacher_forced(&self, g: &mut Graph<T>, batch: &Batch) -> Result<DecoderState<T>> {
        let target = batch
            .target
            .as_ref()
            .ok_or_else(|| Error::Data("batch has no target side".into()))?;
        let start = self.start(g, &batch.sources, target.batch)?;
        self.decoder.step(g, &start, &TargetInput::teacher(target))
    }

    /// Mean cross-entropy over target tokens plus any auxiliary loss.
    pub fn loss(&self, g: &mut Graph<T>, batch: &Batch, label_smoothing: f64) -> Result<Loss> {
        let state = self.teacher_forced(g, batch)?;
        let target = batch.target.as_ref().expect("checked by teacher_forced");
        let logits = state.logits.expect("step produces logits");
        let ce = g.cross_entropy(logits, &target.ids, &target.mask, label_smoothing)?;
        let total = match state.aux_loss {
            Some(aux) => g.add(ce, aux)?,
            None => ce,
        };
        Ok(Loss {
            total,
            cross_entropy: ce,
            labels: target.tokens(),
            logits,
        })
    }
}
