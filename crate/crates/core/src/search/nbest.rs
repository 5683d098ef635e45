//! n-best lists: the text format and weighted rescoring.

use std::collections::BTreeMap;

use super::{score_corpus, LoadedModel};
use crate::data::Vocab;
use crate::error::{Error, Result};

/// One line of an n-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    /// 0-based input sentence index
    pub id: usize,
    /// space-separated output tokens
    pub tokens: String,
    pub scores: Vec<(String, f64)>,
    pub total: f64,
}

/// `<id> ||| <tokens> ||| <name>=<score> … ||| <total>`, scores at 6 decimals.
pub fn format_nbest(e: &NBestEntry) -> String {
    let scores: Vec<String> = e.scores.iter().map(|(n, s)| format!("{n}={s:.6}")).collect();
    format!("{} ||| {} ||| {} ||| {:.6}", e.id, e.tokens, scores.join(" "), e.total)
}

pub fn parse_nbest(text: &str) -> Result<Vec<NBestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Format(format!("n-best line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split("|||").map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields separated by |||"));
        }
        let id = fields[0].parse().map_err(|_| bad("bad sentence id"))?;
        let scores = fields[2]
            .split_whitespace()
            .map(|kv| {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("score without name"))?;
                Ok((k.to_string(), v.parse().map_err(|_| bad("bad score"))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let total = fields[3].parse().map_err(|_| bad("bad total"))?;
        out.push(NBestEntry {
            id,
            tokens: fields[1].to_string(),
            scores,
            total,
        });
    }
    Ok(out)
}

/// A model used to rescore, with the name its score is reported under.
pub struct Rescorer<'a> {
    pub name: String,
    pub model: &'a LoadedModel,
}

/// Add one score per rescorer and rerank every sentence's list by
/// `weights[0] * total + Σ weights[i] * score_i`.
///
/// Right-to-left models see the hypothesis reversed. `sources[k][id]` is
/// source stream `k` of sentence `id`. Ties keep their original order.
pub fn rescore(
    entries: &[NBestEntry],
    sources: &[Vec<Vec<usize>>],
    target_vocab: &Vocab,
    rescorers: &[Rescorer<'_>],
    weights: Option<&[f64]>,
    batch_size: usize,
) -> Result<Vec<NBestEntry>> {
    if entries.is_empty() {
        return Err(Error::Data("empty n-best list".into()));
    }
    let default = vec![1.0; rescorers.len() + 1];
    let weights = weights.unwrap_or(&default);
    if weights.len() != rescorers.len() + 1 {
        return Err(Error::Config(format!(
            "{} weights given for the original score plus {} rescorer(s)",
            weights.len(),
            rescorers.len()
        )));
    }
    for e in entries {
        if let Some(s) = sources.iter().find(|s| e.id >= s.len()) {
            return Err(Error::Data(format!("n-best id {} but only {} source lines", e.id, s.len())));
        }
    }
    let targets: Vec<Vec<usize>> = entries.iter().map(|e| target_vocab.encode(&e.tokens)).collect();
    let mut extra: Vec<Vec<f64>> = vec![Vec::with_capacity(rescorers.len()); entries.len()];
    for r in rescorers {
        let arity = r.model.config().arity();
        let src: Vec<Vec<Vec<usize>>> = sources
            .iter()
            .take(arity)
            .map(|stream| entries.iter().map(|e| stream[e.id].clone()).collect())
            .collect();
        if src.len() != arity {
            return Err(Error::Data(format!(
                "rescorer {} reads {arity} source stream(s), {} given",
                r.name,
                sources.len()
            )));
        }
        let scores = score_corpus(r.model, &src, &targets, batch_size)?;
        for (x, s) in extra.iter_mut().zip(scores) {
            x.push(s.total);
        }
    }
    let mut groups: BTreeMap<usize, Vec<NBestEntry>> = BTreeMap::new();
    for (e, x) in entries.iter().zip(extra) {
        let mut out = e.clone();
        out.total = weights[0] * e.total;
        for ((r, s), w) in rescorers.iter().zip(x).zip(&weights[1..]) {
            out.scores.push((r.name.clone(), s));
            out.total += w * s;
        }
        groups.entry(e.id).or_default().push(out);
    }
    Ok(groups
        .into_values()
        .flat_map(|mut g| {
            g.sort_by(|a, b| b.total.partial_cmp(&a.total).unwrap_or(std::cmp::Ordering::Equal));
            g
        })
        .collect())
}

/// First entry per sentence id, in id order (one output line per id up to
/// the largest id; ids without entries give empty lines).
pub fn best_lines(entries: &[NBestEntry]) -> Vec<String> {
    let n = entries.iter().map(|e| e.id + 1).max().unwrap_or(0);
    let mut out: Vec<Option<String>> = vec![None; n];
    for e in entries {
        out[e.id].get_or_insert_with(|| e.tokens.clone());
    }
    out.into_iter().map(Option::unwrap_or_default).collect()
}
