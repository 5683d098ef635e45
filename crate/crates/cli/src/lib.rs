//! Command-line front end: vocabulary building, training, translation,
//! scoring, n-best rescoring, BLEU and synthetic data.

pub mod commands;
pub mod config;
pub mod synth;

use std::ffi::OsString;
use std::io::Write;

use clap::{ArgMatches, Command};
use thiserror::Error;

use config::{list, preset, switch, value, Config, Key};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mtk::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(mtk::Error::Config(_)) => 1,
            CliError::Core(mtk::Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub const VOCAB_KEYS: &[Key] = &[
    list("corpus", "Text files; one joint vocabulary is built over all of them"),
    value("max-size", Some("50000"), "Maximum entries including </s> and <unk>"),
    value("output", None, "Vocabulary file to write"),
];

pub const TRAIN_KEYS: &[Key] = &[
    value("model", None, "Model file to write; checkpoints go to <model>.ckpt"),
    value("type", Some("s2s-deep"), "s2s-shallow, s2s-deep, transformer, lm, dual-source or hard-attention"),
    list("train-sets", "Training files: sources then target (one file for lm)"),
    list("vocabs", "One vocabulary per training file"),
    list("valid-sets", "Validation files, reported as cross-entropy after training"),
    value("dim-emb", None, "Embedding size"),
    value("dim-rnn", None, "Recurrent state size (model size for transformers)"),
    value("heads", None, "Attention heads (transformer)"),
    value("enc-depth", None, "Encoder layers"),
    value("dec-depth", None, "Decoder layers or transition depth"),
    value("dropout", None, "Dropout probability"),
    value("tied-embeddings", None, "none, source-target or all"),
    value("layer-normalization", None, "true or false"),
    value("prenorm", None, "Transformer pre-norm (true) or post-norm (false)"),
    value("context-adapter", None, "Project mismatched encoder contexts for transformer decoders"),
    switch("right-left", "Train on reversed target sentences"),
    value("workers", Some("1"), "Data-parallel workers"),
    preset("sync", "parallelism", "sync", "Synchronous updates (default)"),
    preset("async", "parallelism", "async", "Asynchronous updates"),
    value("parallelism", Some("sync"), "sync or async"),
    value("mini-batch-tokens", Some("2000"), "Padded token slots per batch"),
    value("sort-window", None, "Sentences sorted by length together (default: 100 batches)"),
    value("shuffle", Some("true"), "Shuffle sentences and batches every epoch"),
    value("epochs", Some("1"), "Training epochs"),
    value("max-updates", None, "Stop after this many updates"),
    value("learning-rate", Some("0.0003"), "Peak learning rate"),
    value("warmup", Some("16000"), "Linear warmup updates before inverse-sqrt decay"),
    value("avg-decay", Some("0.9999"), "Exponential parameter averaging decay"),
    switch("average-model", "Write the averaged parameters to the model file"),
    value("label-smoothing", Some("0"), "Uniform label smoothing"),
    value("max-grad-norm", None, "Clip the gradient to this global norm"),
    value("precision", Some("f32"), "Arithmetic precision: f32 or f64"),
    value("seed", Some("1"), "Random seed (falls back to MTK_SEED)"),
    value("disp-freq", Some("100"), "Log metrics every N updates"),
    value("save-freq", Some("0"), "Checkpoint every N updates (0: only at the end)"),
    switch("overwrite", "Ignore an existing checkpoint and start afresh"),
];

pub const TRANSLATE_KEYS: &[Key] = &[
    list("models", "Model files; several form an ensemble"),
    list("vocabs", "Source vocabularies then the target vocabulary"),
    list("input", "Input files, one per source stream"),
    value("output", None, "Output file (default: stdout)"),
    value("beam-size", Some("5"), "Beam width"),
    value("n-best", None, "Write this many hypotheses per line in n-best format"),
    value("normalize", Some("0.6"), "Length normalization exponent"),
    value("max-length-factor", Some("2"), "Output length cap relative to the source"),
    value("max-length", None, "Absolute output length cap"),
    value("mini-batch", Some("64"), "Sentences decoded together"),
    value("workers", Some("1"), "Decoding threads"),
];

pub const SCORE_KEYS: &[Key] = &[
    value("model", None, "Model file"),
    list("vocabs", "Source vocabularies then the target vocabulary"),
    list("source", "Source files, one per source stream"),
    value("target", None, "Target file"),
    value("output", None, "Output file (default: stdout)"),
    value("mini-batch", Some("64"), "Sentence pairs scored together"),
];

pub const RESCORE_KEYS: &[Key] = &[
    value("nbest", None, "n-best list to rescore"),
    list("models", "Rescoring models"),
    list("right-left", "Per-model direction override (true/false)"),
    list("weights", "Weights of the original score and each model (default: all 1)"),
    list("vocabs", "Source vocabularies then the target vocabulary"),
    list("source", "Source files the n-best list was produced from"),
    value("output", None, "Reranked n-best list (default: stdout)"),
    value("best-output", None, "Best hypothesis per sentence"),
    value("mini-batch", Some("64"), "Hypotheses scored together"),
];

pub const BLEU_KEYS: &[Key] = &[
    value("hyp", None, "Hypothesis file"),
    value("ref", None, "Reference file"),
];

pub const SYNTH_KEYS: &[Key] = &[
    value("task", None, "copy, reverse, ape or toy-mt"),
    value("output", None, "Directory for the generated files"),
    value("size", Some("5000"), "Training examples"),
    value("test-size", Some("200"), "Held-out examples"),
    value("seed", Some("1"), "Random seed (falls back to MTK_SEED)"),
];

type Handler = fn(&Config, &mut dyn Write) -> Result<(), CliError>;

const COMMANDS: &[(&str, &str, &[Key], Handler)] = &[
    ("vocab", "Build a joint vocabulary", VOCAB_KEYS, commands::vocab),
    ("train", "Train a model", TRAIN_KEYS, commands::train),
    ("translate", "Translate with a model or an ensemble", TRANSLATE_KEYS, commands::translate),
    ("score", "Score sentence pairs", SCORE_KEYS, commands::score),
    ("rescore", "Rerank an n-best list with extra models", RESCORE_KEYS, commands::rescore),
    ("bleu", "Corpus BLEU of a hypothesis file", BLEU_KEYS, commands::bleu),
    ("synth", "Write a synthetic corpus", SYNTH_KEYS, commands::synth),
];

pub fn command() -> Command {
    let mut cmd = Command::new("mtk")
        .about("Neural machine translation toolkit")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, keys, _) in COMMANDS {
        cmd = cmd.subcommand(config::add_args(Command::new(*name).about(*about), keys));
    }
    cmd
}

fn dispatch(matches: &ArgMatches, out: &mut dyn Write) -> Result<(), CliError> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let (_, _, keys, handler) = COMMANDS.iter().find(|c| c.0 == name).expect("registered subcommand");
    let cfg = Config::resolve(keys, sub)?;
    cfg.log(name);
    handler(&cfg, out)
}

/// Run with the given arguments (including the program name), writing
/// command output to `out`. Returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches, out) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock())
}
