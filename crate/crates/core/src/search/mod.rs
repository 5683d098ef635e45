//! Decoding: batched beam search over ensembles, forced-decoding scores,
//! n-best lists and rescoring.

mod nbest;
mod translate;

use std::cmp::Ordering;
use std::path::Path;

use crate::data::{Batch, SideBatch, EOS};
use crate::encdec::{DecoderState, TargetInput};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::io::load_model;
use crate::models::{Model, ModelConfig, ParamSet};

pub use nbest::{best_lines, format_nbest, parse_nbest, rescore, NBestEntry, Rescorer};
pub use translate::{translate_file, translate_lines, TranslateOptions, TranslateReport, Translation};

/// A model with its parameters, ready for decoding.
#[derive(Debug)]
pub struct LoadedModel {
    pub name: String,
    pub model: Model<f32>,
    pub params: ParamSet,
}

impl LoadedModel {
    pub fn new(name: impl Into<String>, config: ModelConfig, params: ParamSet) -> Result<Self> {
        let model = Model::new(config)?;
        model.check_params(&params)?;
        Ok(LoadedModel {
            name: name.into(),
            model,
            params,
        })
    }

    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let (config, params) = load_model(path)?;
        Self::new(name, config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// An inference graph holding this model's parameters.
    pub fn graph(&self) -> Result<Graph<f32>> {
        let mut g = Graph::new();
        g.set_inference(true);
        self.params.load_into(&mut g)?;
        Ok(g)
    }

    fn sources<'b>(&self, batch: &'b Batch) -> Result<&'b [SideBatch]> {
        let arity = self.model.config.arity();
        if arity == 0 {
            return Ok(&[]);
        }
        if batch.sources.len() != arity {
            return Err(Error::Data(format!(
                "model {} reads {arity} source stream(s), input has {}",
                self.name,
                batch.sources.len()
            )));
        }
        Ok(&batch.sources)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub beam: usize,
    /// length normalization exponent: ranking key is score / length^alpha
    pub alpha: f64,
    /// maximum output length as a multiple of the source length
    pub max_len_factor: f64,
    /// absolute cap on output length (including `</s>`)
    pub max_len: Option<usize>,
    /// hypotheses returned per sentence; `None` = beam size
    pub n_best: Option<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            beam: 5,
            alpha: 0.6,
            max_len_factor: 2.0,
            max_len: None,
            n_best: None,
        }
    }
}

/// One finished (or length-capped) translation hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// output ids without `</s>`
    pub tokens: Vec<usize>,
    /// ensemble log-prob of every emitted token including `</s>`
    pub token_scores: Vec<f64>,
    /// cumulative ensemble log-prob
    pub score: f64,
    /// cumulative log-prob under each ensemble member
    pub model_scores: Vec<f64>,
    /// ended with `</s>` (false: stopped at the length cap)
    pub finished: bool,
    /// ranking key
    pub normalized: f64,
}

impl Hypothesis {
    /// Emitted positions, counting `</s>`.
    pub fn len(&self) -> usize {
        self.token_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_scores.is_empty()
    }

    fn empty(models: usize) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            token_scores: Vec::new(),
            score: 0.0,
            model_scores: vec![0.0; models],
            finished: true,
            normalized: 0.0,
        }
    }
}

pub(crate) fn normalize(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(alpha)
    }
}

/// Higher key first, then the lexicographically smaller sequence (lower
/// token id at the first divergent position).
fn rank(a_key: f64, a: &[usize], b_key: f64, b: &[usize]) -> Ordering {
    b_key.partial_cmp(&a_key).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

/// Row-wise log-softmax of `[rows, v]` logits, computed in f64.
fn log_softmax_rows(logits: &[f32], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(v) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&x| x as f64 - lse));
    }
    out
}

/// Live partial hypothesis during search.
#[derive(Clone)]
struct Partial {
    sentence: usize,
    /// emitted ids, possibly ending with `</s>`
    ids: Vec<usize>,
    token_scores: Vec<f64>,
    score: f64,
    model_scores: Vec<f64>,
}

/// Decoder for a fixed ensemble, owning one inference graph per member.
pub struct Searcher<'m> {
    models: &'m [LoadedModel],
    graphs: Vec<Graph<f32>>,
    vocab: usize,
    right_left: bool,
}

impl<'m> Searcher<'m> {
    pub fn new(models: &'m [LoadedModel]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Config("decoding needs at least one model".into()))?;
        let vocab = first.model.decoder().vocab();
        if let Some(m) = models.iter().find(|m| m.model.decoder().vocab() != vocab) {
            return Err(Error::Config(format!(
                "ensemble members disagree on the target vocabulary: {} has {}, {} has {vocab}",
                m.name,
                m.model.decoder().vocab(),
                first.name
            )));
        }
        let right_left = first.config().right_left;
        if models.iter().any(|m| m.config().right_left != right_left) {
            return Err(Error::Config("cannot ensemble left-to-right with right-to-left models".into()));
        }
        let graphs = models.iter().map(LoadedModel::graph).collect::<Result<Vec<_>>>()?;
        Ok(Searcher {
            models,
            graphs,
            vocab,
            right_left,
        })
    }

    pub fn models(&self) -> &[LoadedModel] {
        self.models
    }

    fn reset(&mut self) {
        for g in &mut self.graphs {
            g.clear();
        }
    }

    fn max_len(&self, batch: &Batch, opts: &SearchOptions) -> Vec<usize> {
        (0..batch.size())
            .map(|r| {
                let src = batch.sources.first().map_or(0, |s| s.length(r).saturating_sub(1));
                let by_factor = (opts.max_len_factor * src as f64).ceil() as usize;
                let cap = match opts.max_len {
                    Some(m) if batch.sources.is_empty() => m,
                    Some(m) => by_factor.min(m),
                    None => by_factor,
                };
                cap.max(1)
            })
            .collect()
    }

    /// Beam search over every sentence of `batch` in lock-step. Returns the
    /// n-best list of each sentence, best first.
    pub fn search(&mut self, batch: &Batch, opts: &SearchOptions) -> Result<Vec<Vec<Hypothesis>>> {
        if opts.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        let n_models = self.models.len();
        let n = batch.size();
        let mut results: Vec<Vec<Hypothesis>> = vec![Vec::new(); n];
        // sentences with an empty source translate to the empty string
        let active: Vec<usize> = (0..n)
            .filter(|&r| batch.sources.is_empty() || batch.sources.iter().any(|s| s.length(r) > 1))
            .collect();
        for r in 0..n {
            if !active.contains(&r) {
                results[r].push(Hypothesis::empty(n_models));
            }
        }
        if active.is_empty() {
            return Ok(results);
        }
        let sub = Batch {
            sources: batch.sources.iter().map(|s| s.select(&active)).collect(),
            target: None,
            sentence_ids: active.iter().map(|&r| batch.sentence_ids[r]).collect(),
        };
        let max_len = self.max_len(&sub, opts);
        let found = self.search_active(&sub, &max_len, opts)?;
        for (r, hyps) in active.into_iter().zip(found) {
            results[r] = hyps;
        }
        Ok(results)
    }

    fn search_active(&mut self, batch: &Batch, max_len: &[usize], opts: &SearchOptions) -> Result<Vec<Vec<Hypothesis>>> {
        self.reset();
        let (n, v, beam, n_models) = (batch.size(), self.vocab, opts.beam, self.models.len());
        let mut states: Vec<DecoderState<f32>> = Vec::with_capacity(n_models);
        for (m, g) in self.models.iter().zip(&mut self.graphs) {
            let sources = m.sources(batch)?;
            states.push(m.model.start(g, sources, n)?);
        }
        let mut live: Vec<Partial> = (0..n)
            .map(|s| Partial {
                sentence: s,
                ids: Vec::new(),
                token_scores: Vec::new(),
                score: 0.0,
                model_scores: vec![0.0; n_models],
            })
            .collect();
        let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); n];
        let mut done_marks: Vec<bool> = vec![false; n];
        let mut t = 0;
        while !live.is_empty() {
            let prev: Vec<Option<usize>> = live.iter().map(|h| h.ids.last().copied()).collect();
            let input = TargetInput::tokens(&prev);
            let mut per_model = Vec::with_capacity(n_models);
            for ((m, g), state) in self.models.iter().zip(&mut self.graphs).zip(&mut states) {
                let next = m.model.step(g, state, &input)?;
                g.forward()?;
                let logits = next.logits.expect("step produces logits");
                per_model.push(log_softmax_rows(g.value_slice(logits)?, v));
                *state = next;
            }
            let ensemble: Vec<f64> = if n_models == 1 {
                per_model[0].clone()
            } else {
                (0..per_model[0].len())
                    .map(|i| per_model.iter().map(|lp| lp[i]).sum::<f64>() / n_models as f64)
                    .collect()
            };

            let mut next_live = Vec::new();
            let mut keep_rows = Vec::new();
            let mut row = 0;
            while row < live.len() {
                let s = live[row].sentence;
                let end = (row..live.len()).find(|&r| live[r].sentence != s).unwrap_or(live.len());
                let width = beam.saturating_sub(finished[s].len());
                let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity((end - row) * v);
                for r in row..end {
                    for tok in 0..v {
                        cands.push((live[r].score + ensemble[r * v + tok], r, tok));
                    }
                }
                // all candidates have equal length, so raw scores rank them
                cands.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| live[a.1].ids.cmp(&live[b.1].ids))
                        .then_with(|| a.2.cmp(&b.2))
                });
                let at_cap = t + 1 >= max_len[s];
                for &(score, r, tok) in cands.iter().take(width) {
                    let h = &live[r];
                    let mut ids = h.ids.clone();
                    ids.push(tok);
                    let mut token_scores = h.token_scores.clone();
                    token_scores.push(ensemble[r * v + tok]);
                    let model_scores: Vec<f64> =
                        (0..n_models).map(|m| h.model_scores[m] + per_model[m][r * v + tok]).collect();
                    if tok == EOS || at_cap {
                        let finished_ok = tok == EOS;
                        if finished_ok {
                            ids.pop();
                        }
                        let len = token_scores.len();
                        finished[s].push(Hypothesis {
                            tokens: ids,
                            token_scores,
                            score,
                            model_scores,
                            finished: finished_ok,
                            normalized: normalize(score, len, opts.alpha),
                        });
                    } else {
                        next_live.push(Partial {
                            sentence: s,
                            ids,
                            token_scores,
                            score,
                            model_scores,
                        });
                        keep_rows.push(r);
                    }
                }
                if finished[s].len() >= beam || at_cap {
                    done_marks[s] = true;
                }
                row = end;
            }
            // sentences that are complete drop their remaining live rows
            let mut rows = Vec::with_capacity(keep_rows.len());
            let mut kept = Vec::with_capacity(next_live.len());
            for (p, r) in next_live.into_iter().zip(keep_rows) {
                if !done_marks[p.sentence] {
                    rows.push(r);
                    kept.push(p);
                }
            }
            if kept.is_empty() {
                break;
            }
            for ((m, g), state) in self.models.iter().zip(&mut self.graphs).zip(&mut states) {
                *state = m.model.select(g, state, &rows)?;
            }
            live = kept;
            t += 1;
        }
        let n_best = opts.n_best.unwrap_or(beam).max(1);
        let right_left = self.right_left;
        Ok(finished
            .into_iter()
            .map(|mut hyps| {
                hyps.sort_by(|a, b| rank(a.normalized, &a.tokens, b.normalized, &b.tokens));
                hyps.truncate(n_best);
                if right_left {
                    for h in &mut hyps {
                        h.tokens.reverse();
                    }
                }
                hyps
            })
            .collect())
    }

    /// Greedy argmax decoding, one token per step (reference for beam 1).
    pub fn greedy(&mut self, batch: &Batch, opts: &SearchOptions) -> Result<Vec<Vec<usize>>> {
        let one = SearchOptions {
            beam: 1,
            n_best: Some(1),
            ..*opts
        };
        let max_len = self.max_len(batch, &one);
        self.reset();
        let (n, v, n_models) = (batch.size(), self.vocab, self.models.len());
        let mut states = Vec::with_capacity(n_models);
        for (m, g) in self.models.iter().zip(&mut self.graphs) {
            let sources = m.sources(batch)?;
            states.push(m.model.start(g, sources, n)?);
        }
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut open = vec![true; n];
        let mut prev: Vec<Option<usize>> = vec![None; n];
        for t in 0..max_len.iter().copied().max().unwrap_or(0) {
            let input = TargetInput::tokens(&prev);
            let mut sum = vec![0.0; n * v];
            for ((m, g), state) in self.models.iter().zip(&mut self.graphs).zip(&mut states) {
                let next = m.model.step(g, state, &input)?;
                g.forward()?;
                let lp = log_softmax_rows(g.value_slice(next.logits.expect("logits"))?, v);
                for (a, b) in sum.iter_mut().zip(lp) {
                    *a += b / n_models as f64;
                }
                *state = next;
            }
            for r in 0..n {
                let row = &sum[r * v..(r + 1) * v];
                let best = (0..v).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                prev[r] = Some(best);
                if open[r] {
                    if best == EOS {
                        open[r] = false;
                    } else {
                        out[r].push(best);
                        if t + 1 >= max_len[r] {
                            open[r] = false;
                        }
                    }
                }
            }
            if !open.iter().any(|&o| o) {
                break;
            }
        }
        if self.right_left {
            out.iter_mut().for_each(|o| o.reverse());
        }
        Ok(out)
    }
}

/// Forced-decoding score of one target sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceScore {
    pub total: f64,
    /// log-prob of every target token, `</s>` last
    pub tokens: Vec<f64>,
}

impl SentenceScore {
    /// `<id> <total> <per-token…>` at 6 decimals.
    pub fn format(&self, id: usize) -> String {
        let mut s = format!("{id} {:.6}", self.total);
        for t in &self.tokens {
            s.push_str(&format!(" {t:.6}"));
        }
        s
    }
}

/// Teacher-forced log-probs of the target side of `batch`.
pub fn score_batch(model: &LoadedModel, g: &mut Graph<f32>, batch: &Batch) -> Result<Vec<SentenceScore>> {
    let target = batch
        .target
        .as_ref()
        .ok_or_else(|| Error::Data("scoring needs target sentences".into()))?;
    g.clear();
    let sources = model.sources(batch)?;
    let start = model.model.start(g, sources, target.batch)?;
    let state = model.model.step(g, &start, &TargetInput::teacher(target))?;
    g.forward()?;
    let v = model.model.decoder().vocab();
    let lp = log_softmax_rows(g.value_slice(state.logits.expect("logits"))?, v);
    Ok((0..target.batch)
        .map(|r| {
            let n = target.length(r);
            let tokens: Vec<f64> = (0..n)
                .map(|i| {
                    let slot = r * target.len + i;
                    lp[slot * v + target.ids[slot]]
                })
                .collect();
            SentenceScore {
                total: tokens.iter().sum(),
                tokens,
            }
        })
        .collect())
}

/// Score parallel sentences in batches of at most `batch_size` pairs.
/// Targets are reversed first for right-to-left models.
pub fn score_corpus(
    model: &LoadedModel,
    sources: &[Vec<Vec<usize>>],
    targets: &[Vec<usize>],
    batch_size: usize,
) -> Result<Vec<SentenceScore>> {
    if let Some(s) = sources.iter().find(|s| s.len() != targets.len()) {
        return Err(Error::Data(format!(
            "{} source lines for {} target lines",
            s.len(),
            targets.len()
        )));
    }
    let mut g = model.graph()?;
    let mut out = Vec::with_capacity(targets.len());
    let r2l = model.config().right_left;
    for start in (0..targets.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(targets.len());
        let side = |rows: &[Vec<usize>]| {
            let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
            SideBatch::from_sentences(&refs)
        };
        let tgt: Vec<Vec<usize>> = targets[start..end]
            .iter()
            .map(|t| if r2l { t.iter().rev().copied().collect() } else { t.clone() })
            .collect();
        let batch = Batch {
            sources: sources.iter().map(|s| side(&s[start..end])).collect(),
            target: Some(side(&tgt)),
            sentence_ids: (start..end).collect(),
        };
        out.extend(score_batch(model, &mut g, &batch)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
