//! Encoder/decoder abstraction shared by every model.
//!
//! An [`Encoder`] turns one source stream into an [`EncoderState`]. A
//! [`Decoder`] starts from zero or more encoder states and advances a
//! [`DecoderState`] over any number of target positions per call: all of
//! them at once for training and scoring, one at a time during search.
//! [`Decoder::select`] reorders hypotheses for beam search.

use std::any::Any;
use std::fmt;

use crate::data::SideBatch;
use crate::error::{contract_err, shape_err, Result};
use crate::graph::{Graph, NodeRef};
use crate::tensor::{Element, Tensor};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform in `±sqrt(6 / (fan_in + fan_out))`
    Glorot,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, dims: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            dims: dims.to_vec(),
            init,
        }
    }

    pub fn glorot(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, dims, Init::Glorot)
    }

    pub fn zeros(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, dims, Init::Zeros)
    }

    pub fn ones(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, dims, Init::Ones)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Encoded source: `context` is `[b, s, d]`, `mask` `[b, s]`.
#[derive(Debug, Clone)]
pub struct EncoderState<T: Element> {
    pub context: NodeRef,
    pub mask: Tensor<T>,
    /// source ids per row, including `</s>`
    pub tokens: Vec<Vec<usize>>,
}

impl<T: Element> EncoderState<T> {
    pub fn rows(&self) -> usize {
        self.context.shape.dim(0)
    }

    pub fn len(&self) -> usize {
        self.context.shape.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.context.shape.dim(2)
    }

    pub fn select(&self, g: &mut Graph<T>, rows: &[usize]) -> Result<Self> {
        let s = self.len();
        let mut mask = Vec::with_capacity(rows.len() * s);
        for &r in rows {
            mask.extend_from_slice(&self.mask.data()[r * s..(r + 1) * s]);
        }
        Ok(EncoderState {
            context: g.select_rows(self.context, rows)?,
            mask: Tensor::new(&[rows.len(), s], mask)?,
            tokens: rows.iter().map(|&r| self.tokens[r].clone()).collect(),
        })
    }
}

/// Model-specific per-hypothesis data that is not a graph node.
pub trait StateExt<T: Element>: Send + Sync + fmt::Debug {
    fn select(&self, rows: &[usize]) -> Box<dyn StateExt<T>>;
    fn as_any(&self) -> &dyn Any;
}

#[derive(Debug)]
pub struct DecoderState<T: Element> {
    pub encoders: Vec<EncoderState<T>>,
    /// per-hypothesis nodes, hypothesis on axis 0; reordered by `select`
    pub payload: Vec<NodeRef>,
    /// `[rows, t, V]` for the positions of the last `step`
    pub logits: Option<NodeRef>,
    /// target positions consumed so far
    pub position: usize,
    pub rows: usize,
    pub ext: Option<Box<dyn StateExt<T>>>,
    /// attention weights of the last position, when the model has them
    pub attention: Option<NodeRef>,
    /// auxiliary training loss of the last step (scalar)
    pub aux_loss: Option<NodeRef>,
}

impl<T: Element> DecoderState<T> {
    pub fn new(encoders: Vec<EncoderState<T>>, rows: usize, payload: Vec<NodeRef>) -> Self {
        DecoderState {
            encoders,
            payload,
            logits: None,
            position: 0,
            rows,
            ext: None,
            attention: None,
            aux_loss: None,
        }
    }

    pub fn ext<E: 'static>(&self) -> Option<&E> {
        self.ext.as_ref().and_then(|e| e.as_any().downcast_ref::<E>())
    }
}

/// Previous-token inputs for `t` positions of `rows` hypotheses.
///
/// `None` marks the start of a sequence and embeds as a zero vector.
#[derive(Debug, Clone)]
pub struct TargetInput {
    pub prev: Vec<Option<usize>>,
    pub len: usize,
    /// gold tokens, present when teacher forcing
    pub targets: Option<Vec<usize>>,
    pub mask: Option<Vec<f32>>,
}

impl TargetInput {
    /// Teacher forcing over a whole target batch: position `i` sees the
    /// gold token `i - 1`.
    pub fn teacher(target: &SideBatch) -> Self {
        let (b, t) = (target.batch, target.len);
        let mut prev = Vec::with_capacity(b * t);
        for r in 0..b {
            prev.push(None);
            prev.extend(target.ids[r * t..(r + 1) * t - 1].iter().map(|&i| Some(i)));
        }
        TargetInput {
            prev,
            len: t,
            targets: Some(target.ids.clone()),
            mask: Some(target.mask.clone()),
        }
    }

    /// One position per hypothesis.
    pub fn tokens(prev: &[Option<usize>]) -> Self {
        TargetInput {
            prev: prev.to_vec(),
            len: 1,
            targets: None,
            mask: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.prev.len() / self.len
    }

    /// Inputs of position `i` for every row.
    pub fn column(&self, i: usize) -> Vec<Option<usize>> {
        (0..self.rows()).map(|r| self.prev[r * self.len + i]).collect()
    }
}

pub trait Encoder<T: Element>: Send + Sync {
    fn kind(&self) -> &'static str;
    /// last extent of the produced context
    fn context_dim(&self) -> usize;
    fn params(&self) -> Vec<ParamSpec>;
    fn build(&self, g: &mut Graph<T>, source: &SideBatch) -> Result<EncoderState<T>>;
}

pub trait Decoder<T: Element>: Send + Sync {
    fn kind(&self) -> &'static str;
    /// number of encoder states `start_state` expects
    fn arity(&self) -> usize;
    fn vocab(&self) -> usize;
    fn params(&self) -> Vec<ParamSpec>;
    fn start_state(&self, g: &mut Graph<T>, encoders: Vec<EncoderState<T>>, rows: usize) -> Result<DecoderState<T>>;
    /// Consume `input.len` positions; the result carries their logits.
    fn step(&self, g: &mut Graph<T>, state: &DecoderState<T>, input: &TargetInput) -> Result<DecoderState<T>>;

    /// Reorder hypotheses: row `i` of the result is row `rows[i]` of `state`.
    fn select(&self, g: &mut Graph<T>, state: &DecoderState<T>, rows: &[usize]) -> Result<DecoderState<T>> {
        select_rows(g, state, rows)
    }
}

/// Default hypothesis selection: gather every payload node, encoder state
/// and the extension by row.
pub fn select_rows<T: Element>(g: &mut Graph<T>, state: &DecoderState<T>, rows: &[usize]) -> Result<DecoderState<T>> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= state.rows) {
        return Err(contract_err!("hypothesis index {bad} out of range for {} rows", state.rows));
    }
    if rows.is_empty() {
        return Err(contract_err!("select of zero hypotheses"));
    }
    let encoders = state
        .encoders
        .iter()
        .map(|e| e.select(g, rows))
        .collect::<Result<Vec<_>>>()?;
    let payload = state
        .payload
        .iter()
        .map(|&p| g.select_rows(p, rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderState {
        encoders,
        payload,
        logits: None,
        position: state.position,
        rows: rows.len(),
        ext: state.ext.as_ref().map(|e| e.select(rows)),
        attention: None,
        aux_loss: None,
    })
}

/// Check that a decoder received the number of encoder states it expects.
pub fn check_arity<T: Element>(expected: usize, encoders: &[EncoderState<T>]) -> Result<()> {
    if encoders.len() != expected {
        return Err(contract_err!(
            "decoder expects {expected} encoder state(s), got {}",
            encoders.len()
        ));
    }
    Ok(())
}

/// Masked mean over the time axis: `[b, s, d]` with mask `[b, s]` → `[b, d]`.
pub fn masked_mean<T: Element>(g: &mut Graph<T>, context: NodeRef, mask: &Tensor<T>) -> Result<NodeRef> {
    let (b, s) = (context.shape.dim(0), context.shape.dim(1));
    if mask.dims() != [b, s] {
        return Err(shape_err!("mask {} for context {}", mask.shape(), context.shape));
    }
    let mut weights = Vec::with_capacity(b * s);
    for row in mask.data().chunks(s) {
        let n: T = row.iter().copied().sum();
        weights.extend(row.iter().map(|&m| m / n));
    }
    let w = g.input(&Tensor::new(&[b, 1, s], weights)?)?;
    let m = g.matmul(w, context)?;
    g.reshape(m, &[b, context.shape.dim(2)])
}
