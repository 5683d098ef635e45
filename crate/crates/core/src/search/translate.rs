//! Translating whole files in sorted batches with order restored on output.

use std::path::Path;
use std::time::Instant;

use super::{format_nbest, Hypothesis, LoadedModel, NBestEntry, SearchOptions, Searcher};
use crate::data::{read_lines, write_lines, Batch, SideBatch, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslateOptions {
    pub search: SearchOptions,
    /// sentences decoded together
    pub batch_size: usize,
    /// threads, each decoding whole batches with its own graphs
    pub workers: usize,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions {
            search: SearchOptions::default(),
            batch_size: 64,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub id: usize,
    pub best: String,
    pub nbest: Vec<Hypothesis>,
}

impl Translation {
    /// n-best entries with one score per ensemble member; the total is the
    /// ranking key.
    pub fn nbest_entries(&self, names: &[String], vocab: &Vocab) -> Vec<NBestEntry> {
        self.nbest
            .iter()
            .map(|h| NBestEntry {
                id: self.id,
                tokens: vocab.decode(&h.tokens),
                scores: names.iter().cloned().zip(h.model_scores.iter().copied()).collect(),
                total: h.normalized,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TranslateReport {
    pub sentences: usize,
    pub source_tokens: usize,
    pub seconds: f64,
}

impl TranslateReport {
    pub fn tokens_per_second(&self) -> f64 {
        self.source_tokens as f64 / self.seconds.max(1e-9)
    }
}

/// Translate sentence-aligned input streams (`inputs[k][i]` is line `i` of
/// source stream `k`). Output order follows input order.
pub fn translate_lines(
    models: &[LoadedModel],
    source_vocabs: &[&Vocab],
    target_vocab: &Vocab,
    inputs: &[Vec<String>],
    opts: &TranslateOptions,
) -> Result<(Vec<Translation>, TranslateReport)> {
    let start = Instant::now();
    if inputs.len() != source_vocabs.len() {
        return Err(Error::Config(format!(
            "{} input streams for {} source vocabularies",
            inputs.len(),
            source_vocabs.len()
        )));
    }
    let n = inputs.first().map_or(0, Vec::len);
    if inputs.iter().any(|s| s.len() != n) {
        return Err(Error::Data("input streams have different numbers of lines".into()));
    }
    // validate the ensemble before any work
    Searcher::new(models)?;
    let encoded: Vec<Vec<Vec<usize>>> = inputs
        .iter()
        .zip(source_vocabs)
        .map(|(lines, v)| lines.iter().map(|l| v.encode(l)).collect())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(encoded.first().map_or(0, |s| s[i].len())), i));
    let batches: Vec<Batch> = order
        .chunks(opts.batch_size.max(1))
        .map(|rows| Batch {
            sources: encoded
                .iter()
                .map(|stream| {
                    let s: Vec<&[usize]> = rows.iter().map(|&r| stream[r].as_slice()).collect();
                    SideBatch::from_sentences(&s)
                })
                .collect(),
            target: None,
            sentence_ids: rows.to_vec(),
        })
        .collect();

    let workers = opts.workers.clamp(1, batches.len().max(1));
    let decode = |ids: Vec<usize>| -> Result<Vec<(usize, Vec<Hypothesis>)>> {
        let mut searcher = Searcher::new(models)?;
        let mut out = Vec::new();
        for b in ids {
            let batch = &batches[b];
            let hyps = searcher.search(batch, &opts.search)?;
            out.extend(batch.sentence_ids.iter().copied().zip(hyps));
        }
        Ok(out)
    };
    let shards: Vec<Vec<usize>> = (0..workers)
        .map(|w| (w..batches.len()).step_by(workers).collect())
        .collect();
    let results: Vec<Result<Vec<(usize, Vec<Hypothesis>)>>> = if workers == 1 {
        shards.into_iter().map(decode).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = shards.into_iter().map(|ids| s.spawn(|| decode(ids))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("decoding worker panicked".into()))))
                .collect()
        })
    };
    let mut slots: Vec<Option<Vec<Hypothesis>>> = vec![None; n];
    for r in results {
        for (id, hyps) in r? {
            slots[id] = Some(hyps);
        }
    }
    let translations = slots
        .into_iter()
        .enumerate()
        .map(|(id, hyps)| {
            let nbest = hyps.expect("every sentence is decoded");
            let best = nbest.first().map(|h| target_vocab.decode(&h.tokens)).unwrap_or_default();
            Translation { id, best, nbest }
        })
        .collect();
    let report = TranslateReport {
        sentences: n,
        source_tokens: encoded.first().map_or(0, |s| s.iter().map(|x| x.len() + 1).sum()),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((translations, report))
}

/// Translate files line by line into `output`, optionally writing an
/// n-best list.
pub fn translate_file(
    models: &[LoadedModel],
    source_vocabs: &[&Vocab],
    target_vocab: &Vocab,
    inputs: &[&Path],
    output: &Path,
    nbest: Option<&Path>,
    opts: &TranslateOptions,
) -> Result<TranslateReport> {
    let lines = inputs.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
    let (translations, report) = translate_lines(models, source_vocabs, target_vocab, &lines, opts)?;
    let best: Vec<String> = translations.iter().map(|t| t.best.clone()).collect();
    write_lines(output, &best)?;
    if let Some(path) = nbest {
        let names: Vec<String> = models.iter().map(|m| m.name.clone()).collect();
        let entries: Vec<String> = translations
            .iter()
            .flat_map(|t| t.nbest_entries(&names, target_vocab))
            .map(|e| format_nbest(&e))
            .collect();
        write_lines(path, &entries)?;
    }
    Ok(report)
}
