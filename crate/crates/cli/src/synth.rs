//! Synthetic corpora for toy experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lines of one synthetic corpus, keyed by file name.
pub type Files = Vec<(String, Vec<String>)>;

fn sentence(rng: &mut ChaCha8Rng, prefix: &str, symbols: usize, min_len: usize, max_len: usize) -> Vec<String> {
    let len = rng.gen_range(min_len..=max_len);
    (0..len).map(|_| format!("{prefix}{}", rng.gen_range(0..symbols))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqTask {
    Copy,
    Reverse,
}

/// Source/target pairs over `symbols` tokens where the target is the source
/// copied or reversed.
pub fn sequence_task(
    task: SeqTask,
    n: usize,
    symbols: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = sentence(&mut rng, "t", symbols, min_len, max_len);
            let mut t = s.clone();
            if task == SeqTask::Reverse {
                t.reverse();
            }
            (s.join(" "), t.join(" "))
        })
        .unzip()
}

/// Automatic post-editing triples `(src, mt, pe)`: `pe` translates `src`
/// word by word (`s<i>` to `w<i>`) and `mt` is `pe` with one word deleted.
pub fn ape_task(n: usize, symbols: usize, min_len: usize, max_len: usize, seed: u64) -> [Vec<String>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<String>; 3] = Default::default();
    for _ in 0..n {
        let src = sentence(&mut rng, "s", symbols, min_len, max_len);
        let pe: Vec<String> = src.iter().map(|w| w.replacen('s', "w", 1)).collect();
        let mut mt = pe.clone();
        mt.remove(rng.gen_range(0..mt.len()));
        out[0].push(src.join(" "));
        out[1].push(mt.join(" "));
        out[2].push(pe.join(" "));
    }
    out
}

/// A toy language pair. Source words `d<i>` translate to `e<i>`; the last
/// source word (the verb) moves to the second target position, and the
/// source particle `zu` is dropped.
pub struct ToyLanguage {
    pub words: usize,
}

impl ToyLanguage {
    pub fn source(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut s = sentence(rng, "d", self.words, 3, 8);
        if rng.gen_bool(0.3) {
            let at = rng.gen_range(1..s.len());
            s.insert(at, "zu".into());
        }
        s
    }

    pub fn translate(&self, src: &[String]) -> Vec<String> {
        let mut t: Vec<String> = src.iter().filter(|w| *w != "zu").map(|w| w.replacen('d', "e", 1)).collect();
        if t.len() >= 3 {
            let verb = t.pop().expect("non-empty");
            t.insert(1, verb);
        }
        t
    }
}

/// Parallel training data, target-side monolingual data and a test set.
pub fn toy_mt(train: usize, mono: usize, test: usize, seed: u64) -> Files {
    let lang = ToyLanguage { words: 24 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |rng: &mut ChaCha8Rng| {
        let s = lang.source(rng);
        let t = lang.translate(&s);
        (s.join(" "), t.join(" "))
    };
    let (train_de, train_en): (Vec<_>, Vec<_>) = (0..train).map(|_| pair(&mut rng)).unzip();
    let mono_en: Vec<String> = (0..mono).map(|_| pair(&mut rng).1).collect();
    let (test_de, test_en): (Vec<_>, Vec<_>) = (0..test).map(|_| pair(&mut rng)).unzip();
    vec![
        ("train.de".into(), train_de),
        ("train.en".into(), train_en),
        ("mono.en".into(), mono_en),
        ("test.de".into(), test_de),
        ("test.en".into(), test_en),
    ]
}

pub const TASKS: &[&str] = &["copy", "reverse", "ape", "toy-mt"];

/// Files of a named task; `n` training examples and `test` held-out ones.
pub fn generate(task: &str, n: usize, test: usize, seed: u64) -> Option<Files> {
    let split = |name: &str, lines: Vec<String>, files: &mut Files| {
        let (a, b) = lines.split_at(n);
        files.push((format!("train.{name}"), a.to_vec()));
        files.push((format!("test.{name}"), b.to_vec()));
    };
    let mut files = Files::new();
    match task {
        "copy" | "reverse" => {
            let t = if task == "copy" { SeqTask::Copy } else { SeqTask::Reverse };
            let (s, d) = sequence_task(t, n + test, 10, 3, 10, seed);
            split("src", s, &mut files);
            split("tgt", d, &mut files);
        }
        "ape" => {
            let [s, m, p] = ape_task(n + test, 12, 3, 7, seed);
            split("src", s, &mut files);
            split("mt", m, &mut files);
            split("pe", p, &mut files);
        }
        "toy-mt" => return Some(toy_mt(n, n, test, seed)),
        _ => return None,
    }
    Some(files)
}
