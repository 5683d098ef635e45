//! Vocabularies, corpora, token-budget batching, right-to-left inversion
//! and corpus BLEU.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const EOS: usize = 0;
pub const UNK: usize = 1;
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token/id bijection with `</s>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Tokens by descending frequency, ties in lexicographic order, at most
    /// `max_size` entries including the two reserved ones.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| *t != EOS_TOKEN && *t != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            entries
                .into_iter()
                .take(max_size.saturating_sub(2))
                .map(|(t, _)| t.to_string()),
        );
        Self::from_tokens(tokens)
    }

    pub fn build_from_files(paths: &[impl AsRef<Path>], max_size: usize) -> Result<Self> {
        let mut texts = Vec::new();
        for p in paths {
            texts.push(read_text(p.as_ref())?);
        }
        Self::build(texts.iter().flat_map(|t| t.lines()), max_size)
    }

    /// One token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != EOS_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with {EOS_TOKEN} and {UNK_TOKEN}",
                path.display()
            )));
        }
        if let Some(t) = tokens[2..].iter().find(|t| *t == EOS_TOKEN || *t == UNK_TOKEN) {
            return Err(Error::Data(format!("{}: reserved token {t} redefined", path.display())));
        }
        Self::from_tokens(tokens).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of a whitespace-tokenized line, without `</s>`.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Text of `ids`, stopping at the first `</s>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Reverse token order. Applied to sentences without the terminator.
pub fn invert_r2l(ids: &[usize]) -> Vec<usize> {
    ids.iter().rev().copied().collect()
}

/// Sentence-aligned token streams. For parallel data the last stream is
/// the target side.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sources: Vec<Vec<Vec<usize>>>,
    pub target: Option<Vec<Vec<usize>>>,
}

impl Corpus {
    pub fn new(sources: Vec<Vec<Vec<usize>>>, target: Option<Vec<Vec<usize>>>) -> Result<Self> {
        let c = Corpus { sources, target };
        let n = c.len();
        let aligned = c.sources.iter().all(|s| s.len() == n) && c.target.as_ref().map_or(true, |t| t.len() == n);
        if !aligned {
            return Err(Error::Data("corpus streams have different numbers of lines".into()));
        }
        Ok(c)
    }

    /// Read and encode sentence-aligned files; `vocabs[i]` encodes `paths[i]`.
    pub fn from_files(sources: &[(&Path, &Vocab)], target: Option<(&Path, &Vocab)>) -> Result<Self> {
        let read = |p: &Path, v: &Vocab| -> Result<Vec<Vec<usize>>> {
            Ok(read_lines(p)?.iter().map(|l| v.encode(l)).collect())
        };
        let src = sources.iter().map(|(p, v)| read(p, v)).collect::<Result<Vec<_>>>()?;
        let tgt = target.map(|(p, v)| read(p, v)).transpose()?;
        Self::new(src, tgt).map_err(|_| {
            let names: Vec<String> = sources
                .iter()
                .map(|(p, _)| p.display().to_string())
                .chain(target.map(|(p, _)| p.display().to_string()))
                .collect();
            Error::Data(format!("files have different line counts: {}", names.join(", ")))
        })
    }

    pub fn len(&self) -> usize {
        match (&self.target, self.sources.first()) {
            (Some(t), _) => t.len(),
            (None, Some(s)) => s.len(),
            (None, None) => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn invert_targets(&mut self) {
        if let Some(t) = &mut self.target {
            for s in t.iter_mut() {
                s.reverse();
            }
        }
    }

    fn streams(&self) -> impl Iterator<Item = &Vec<Vec<usize>>> {
        self.sources.iter().chain(self.target.iter())
    }

    /// Padded token slots a sentence occupies in one stream (with `</s>`).
    fn cost(&self, i: usize) -> Vec<usize> {
        self.streams().map(|s| s[i].len() + 1).collect()
    }
}

/// One side of a batch: `[batch, len]` ids, each row terminated by one
/// `</s>` and padded with id 0 under mask 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SideBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<f32>,
    pub batch: usize,
    pub len: usize,
}

impl SideBatch {
    pub fn from_sentences(sentences: &[&[usize]]) -> Self {
        let batch = sentences.len();
        let len = sentences.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut ids = vec![EOS; batch * len];
        let mut mask = vec![0.0; batch * len];
        for (r, s) in sentences.iter().enumerate() {
            ids[r * len..r * len + s.len()].copy_from_slice(s);
            mask[r * len..r * len + s.len() + 1].fill(1.0);
        }
        SideBatch { ids, mask, batch, len }
    }

    /// Unpadded length of row `r`, including `</s>`.
    pub fn length(&self, r: usize) -> usize {
        self.mask[r * self.len..(r + 1) * self.len]
            .iter()
            .filter(|&&m| m != 0.0)
            .count()
    }

    /// Row `r` without padding and without `</s>`.
    pub fn sentence(&self, r: usize) -> &[usize] {
        let n = self.length(r);
        &self.ids[r * self.len..r * self.len + n - 1]
    }

    pub fn slots(&self) -> usize {
        self.batch * self.len
    }

    pub fn tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let s: Vec<&[usize]> = rows.iter().map(|&r| self.sentence(r)).collect();
        Self::from_sentences(&s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sources: Vec<SideBatch>,
    pub target: Option<SideBatch>,
    /// corpus line number of every row
    pub sentence_ids: Vec<usize>,
}

impl Batch {
    pub fn from_corpus(corpus: &Corpus, rows: &[usize]) -> Self {
        let side = |stream: &Vec<Vec<usize>>| {
            let s: Vec<&[usize]> = rows.iter().map(|&r| stream[r].as_slice()).collect();
            SideBatch::from_sentences(&s)
        };
        Batch {
            sources: corpus.sources.iter().map(side).collect(),
            target: corpus.target.as_ref().map(side),
            sentence_ids: rows.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.sentence_ids.len()
    }

    /// Padded slots summed over all streams.
    pub fn slots(&self) -> usize {
        self.sources.iter().chain(self.target.iter()).map(SideBatch::slots).sum()
    }

    pub fn source_tokens(&self) -> usize {
        self.sources.iter().map(SideBatch::tokens).sum()
    }

    /// Split into `parts` consecutive row ranges of near-equal size. Empty
    /// parts are dropped.
    pub fn split(&self, parts: usize) -> Vec<Batch> {
        let n = self.size();
        let parts = parts.max(1);
        (0..parts)
            .map(|k| (k * n / parts)..((k + 1) * n / parts))
            .filter(|r| !r.is_empty())
            .map(|r| {
                let rows: Vec<usize> = r.collect();
                Batch {
                    sources: self.sources.iter().map(|s| s.select(&rows)).collect(),
                    target: self.target.as_ref().map(|t| t.select(&rows)),
                    sentence_ids: rows.iter().map(|&i| self.sentence_ids[i]).collect(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    /// cap on padded token slots per batch, summed over streams
    pub token_budget: usize,
    /// sentences sorted together; `None` means 100 average batches
    pub sort_window: Option<usize>,
    pub shuffle: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// sentences that alone exceed the budget
    pub skipped: usize,
}

/// Pack `corpus` into batches whose padded size never exceeds the budget.
///
/// With shuffling, sentence order and batch order both depend only on
/// `(seed, epoch)`.
pub fn make_batches(corpus: &Corpus, cfg: &BatchConfig, epoch: u64) -> Batches {
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    if cfg.shuffle {
        order.shuffle(&mut rng);
    }
    let costs: Vec<Vec<usize>> = (0..n).map(|i| corpus.cost(i)).collect();
    let window = cfg.sort_window.unwrap_or_else(|| {
        let avg: f64 = costs.iter().map(|c| c.iter().sum::<usize>() as f64).sum::<f64>() / n.max(1) as f64;
        let per_batch = (cfg.token_budget as f64 / avg.max(1.0)).max(1.0);
        (100.0 * per_batch) as usize
    });
    let mut out = Batches::default();
    for chunk in order.chunks(window.max(1)) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| (costs[i].iter().rev().copied().collect::<Vec<_>>(), i));
        let mut rows: Vec<usize> = Vec::new();
        let mut maxes: Vec<usize> = Vec::new();
        for i in chunk {
            let c = &costs[i];
            if c.iter().sum::<usize>() > cfg.token_budget {
                log::warn!("skipping sentence {i}: {} slots exceed the token budget", c.iter().sum::<usize>());
                out.skipped += 1;
                continue;
            }
            let grown: Vec<usize> = if rows.is_empty() {
                c.clone()
            } else {
                maxes.iter().zip(c).map(|(&m, &x)| m.max(x)).collect()
            };
            let total: usize = grown.iter().map(|m| m * (rows.len() + 1)).sum();
            if total > cfg.token_budget {
                out.batches.push(Batch::from_corpus(corpus, &rows));
                rows.clear();
                maxes = c.clone();
            } else {
                maxes = grown;
            }
            rows.push(i);
        }
        if !rows.is_empty() {
            out.batches.push(Batch::from_corpus(corpus, &rows));
        }
    }
    if cfg.shuffle {
        out.batches.shuffle(&mut rng);
    }
    out
}

/// Produce batches on a background thread, at most `capacity` ahead of
/// the consumer.
pub fn prefetch(batches: Vec<Batch>, capacity: usize) -> Receiver<Batch> {
    let (tx, rx) = sync_channel(capacity.max(1));
    thread::spawn(move || {
        for b in batches {
            if tx.send(b).is_err() {
                break;
            }
        }
    });
    rx
}

/// Corpus BLEU over whitespace tokens: geometric mean of clipped n-gram
/// precisions up to `max_n`, times the brevity penalty, scaled to 0..100.
pub fn corpus_bleu(hypotheses: &[String], references: &[String], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&r, n);
            for (gram, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(&gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_default() += 1;
        }
    }
    m
}
