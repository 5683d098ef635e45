use std::io::Write;
use std::path::{Path, PathBuf};

use mtk::data::{corpus_bleu, read_lines, read_text, write_lines, BatchConfig, Corpus, Vocab};
use mtk::models::io::save_model_with_notes;
use mtk::models::{Model, ModelConfig};
use mtk::search::{
    best_lines, format_nbest, parse_nbest, rescore as rescore_nbest, score_corpus, translate_lines, LoadedModel,
    Rescorer, SearchOptions, TranslateOptions,
};
use mtk::training::{evaluate, LrSchedule, TrainOptions, Trainer};
use mtk::Error;

use crate::config::{require_exists, Config};
use crate::synth;
use crate::CliError;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Write `lines` to `path`, or to `out` when no path is configured.
fn emit(cfg: &Config, key: &str, lines: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    match cfg.raw(key) {
        Some(p) => Ok(write_lines(Path::new(p), lines)?),
        None => {
            for l in lines {
                writeln!(out, "{l}").map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
    }
}

fn load_vocabs(paths: &[PathBuf]) -> Result<Vec<Vocab>, CliError> {
    paths.iter().map(|p| Vocab::load(p).map_err(CliError::from)).collect()
}

fn load_models(paths: &[PathBuf], prefix: &str) -> Result<Vec<LoadedModel>, CliError> {
    if paths.is_empty() {
        return Err(usage("at least one model is required"));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| LoadedModel::load(format!("{prefix}{i}"), p).map_err(CliError::from))
        .collect()
}

/// Every model must read `vocabs[..n-1]` and write `vocabs[n-1]`.
fn check_vocabs(models: &[LoadedModel], vocabs: &[Vocab]) -> Result<(), CliError> {
    let (tgt, src) = vocabs.split_last().ok_or_else(|| usage("--vocabs is required"))?;
    for m in models {
        let c = m.config();
        let src_sizes: Vec<usize> = src.iter().take(c.arity()).map(Vocab::len).collect();
        if src.len() < c.arity() || src_sizes != c.src_vocabs || tgt.len() != c.tgt_vocab {
            return Err(CliError::Core(Error::Data(format!(
                "model {} expects source vocabularies {:?} and target {}, got {:?} and {}",
                m.name,
                c.src_vocabs,
                c.tgt_vocab,
                src.iter().map(Vocab::len).collect::<Vec<_>>(),
                tgt.len()
            ))));
        }
    }
    Ok(())
}

fn encode_files(paths: &[PathBuf], vocabs: &[Vocab]) -> Result<Vec<Vec<Vec<usize>>>, CliError> {
    paths
        .iter()
        .zip(vocabs)
        .map(|(p, v)| Ok(read_lines(p)?.iter().map(|l| v.encode(l)).collect()))
        .collect()
}

pub fn vocab(cfg: &Config, _out: &mut dyn Write) -> Result<(), CliError> {
    let corpora = cfg.paths("corpus");
    if corpora.is_empty() {
        return Err(usage("--corpus is required"));
    }
    let output = cfg.path("output")?;
    let v = Vocab::build_from_files(&corpora, cfg.get("max-size")?)?;
    v.save(&output)?;
    log::info!("wrote {} entries to {}", v.len(), output.display());
    Ok(())
}

fn model_config(cfg: &Config, vocabs: &[Vocab]) -> Result<ModelConfig, CliError> {
    let ty: String = cfg.get("type")?;
    let (tgt, src) = vocabs.split_last().expect("checked by caller");
    let src_sizes: Vec<usize> = src.iter().map(Vocab::len).collect();
    let mut mc = ModelConfig::preset(&ty, &src_sizes, tgt.len())?;
    if let Some(v) = cfg.opt("dim-emb")? {
        mc.dim_emb = v;
    }
    if let Some(v) = cfg.opt("dim-rnn")? {
        mc.dim_rnn = v;
    }
    if let Some(v) = cfg.opt("heads")? {
        mc.heads = v;
    }
    if let Some(v) = cfg.opt("enc-depth")? {
        mc.enc_depth = v;
    }
    if let Some(v) = cfg.opt("dec-depth")? {
        mc.dec_depth = v;
    }
    if let Some(v) = cfg.opt("dropout")? {
        mc.dropout = v;
    }
    if let Some(v) = cfg.opt("tied-embeddings")? {
        mc.tied = v;
    }
    if let Some(v) = cfg.opt("layer-normalization")? {
        mc.layer_norm = v;
    }
    if let Some(v) = cfg.opt("prenorm")? {
        mc.prenorm = v;
    }
    if let Some(v) = cfg.opt("context-adapter")? {
        mc.context_adapter = v;
    }
    mc.right_left = cfg.flag("right-left")?;
    Ok(mc)
}

pub fn train_options(cfg: &Config) -> Result<TrainOptions, CliError> {
    let seed = cfg.get("seed")?;
    Ok(TrainOptions {
        schedule: LrSchedule {
            base: cfg.get("learning-rate")?,
            warmup: cfg.get("warmup")?,
        },
        adam: None,
        avg_decay: cfg.get("avg-decay")?,
        label_smoothing: cfg.get("label-smoothing")?,
        workers: cfg.get("workers")?,
        parallelism: cfg.get("parallelism")?,
        batch: BatchConfig {
            token_budget: cfg.get("mini-batch-tokens")?,
            sort_window: cfg.opt("sort-window")?,
            shuffle: cfg.get("shuffle")?,
            seed,
        },
        epochs: cfg.get("epochs")?,
        max_updates: cfg.opt("max-updates")?,
        seed,
        disp_freq: cfg.get("disp-freq")?,
        max_grad_norm: cfg.opt("max-grad-norm")?,
        precision: cfg.get("precision")?,
    })
}

/// Checkpoint path of a model file.
pub fn checkpoint_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".ckpt");
    PathBuf::from(s)
}

struct Saver {
    model: PathBuf,
    checkpoint: PathBuf,
    notes: String,
    average: bool,
}

impl Saver {
    fn save(&self, t: &Trainer) -> mtk::Result<()> {
        t.save_checkpoint(&self.checkpoint)?;
        let params = if self.average { &t.average.params } else { &t.params };
        save_model_with_notes(&self.model, &t.model.config, params, &self.notes)
    }
}

pub fn train(cfg: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let model_path = cfg.path("model")?;
    let ty: String = cfg.get("type")?;
    let sets = cfg.paths("train-sets");
    let vocab_paths = cfg.paths("vocabs");
    let expected = match ty.as_str() {
        "lm" => 1,
        "dual-source" => 3,
        _ => 2,
    };
    if sets.len() != expected {
        return Err(usage(format!("--type {ty} needs {expected} training file(s), got {}", sets.len())));
    }
    if vocab_paths.len() != sets.len() {
        return Err(usage(format!(
            "{} vocabularies given for {} training files",
            vocab_paths.len(),
            sets.len()
        )));
    }
    require_exists(&sets)?;
    require_exists(&vocab_paths)?;
    let vocabs = load_vocabs(&vocab_paths)?;
    let mc = model_config(cfg, &vocabs)?;
    // reject inconsistent architectures before reading any data
    Model::<f32>::new(mc.clone())?;
    log::info!("model config:\n{}", mc.to_text().trim_end());

    let pairs: Vec<(&Path, &Vocab)> = sets.iter().map(PathBuf::as_path).zip(&vocabs).collect();
    let (tgt, src) = pairs.split_last().expect("at least one file");
    let mut corpus = Corpus::from_files(src, Some(*tgt))?;
    if mc.right_left {
        corpus.invert_targets();
    }
    log::info!("{} training sentences", corpus.len());

    let opts = train_options(cfg)?;
    let saver = Saver {
        checkpoint: checkpoint_path(&model_path),
        model: model_path.clone(),
        notes: cfg.to_text(),
        average: cfg.flag("average-model")?,
    };
    let mut trainer = if saver.checkpoint.exists() && !cfg.flag("overwrite")? {
        let t = Trainer::resume(&saver.checkpoint, opts)?;
        if t.model.config != mc {
            return Err(CliError::Core(Error::Config(format!(
                "{} was written for a different model configuration (use --overwrite to start afresh)",
                saver.checkpoint.display()
            ))));
        }
        log::info!(
            "resuming from {} at update {} (epoch {}, batch {})",
            saver.checkpoint.display(),
            t.progress.update,
            t.progress.epoch,
            t.progress.batch
        );
        t
    } else {
        Trainer::new(mc, opts)?
    };
    let save_freq: u64 = cfg.get("save-freq")?;
    let report = trainer.train_with(&corpus, &mut |line| log::info!("{line}"), &mut |t| {
        if save_freq > 0 && t.progress.update % save_freq == 0 {
            saver.save(t)?;
        }
        Ok(())
    })?;
    saver.save(&trainer)?;
    log::info!(
        "finished after {} updates: last epoch loss {:.6}, {:.1} source words/s, {:.1}s",
        report.updates,
        report.last_epoch_loss,
        report.words_per_second(),
        report.seconds
    );
    if let Some(a) = report.audit {
        log::info!("async audit: {} snapshot checks, {} torn", a.audits, a.torn);
    }

    let valid = cfg.paths("valid-sets");
    if !valid.is_empty() {
        if valid.len() != sets.len() {
            return Err(usage("--valid-sets needs one file per training file"));
        }
        let pairs: Vec<(&Path, &Vocab)> = valid.iter().map(PathBuf::as_path).zip(&vocabs).collect();
        let (tgt, src) = pairs.split_last().expect("at least one file");
        let mut corpus = Corpus::from_files(src, Some(*tgt))?;
        if trainer.model.config.right_left {
            corpus.invert_targets();
        }
        let params = if saver.average { &trainer.average.params } else { &trainer.params };
        let ce = evaluate(&trainer.model, params, &corpus, trainer.options.batch.token_budget)?;
        writeln!(out, "valid cross-entropy: {ce:.6}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

pub fn translate(cfg: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let models = load_models(&cfg.paths("models"), "M")?;
    let vocabs = load_vocabs(&cfg.paths("vocabs"))?;
    check_vocabs(&models, &vocabs)?;
    let arity = models[0].config().arity();
    if arity == 0 {
        return Err(usage("a language model has no input to translate; use `score`"));
    }
    let inputs = cfg.paths("input");
    if inputs.len() != arity {
        return Err(usage(format!("the model reads {arity} input stream(s), {} given", inputs.len())));
    }
    let lines = inputs.iter().map(|p| read_lines(p)).collect::<mtk::Result<Vec<_>>>()?;
    let n_best: Option<usize> = cfg.opt("n-best")?;
    let opts = TranslateOptions {
        search: SearchOptions {
            beam: cfg.get("beam-size")?,
            alpha: cfg.get("normalize")?,
            max_len_factor: cfg.get("max-length-factor")?,
            max_len: cfg.opt("max-length")?,
            n_best,
        },
        batch_size: cfg.get("mini-batch")?,
        workers: cfg.get("workers")?,
    };
    let src_vocabs: Vec<&Vocab> = vocabs[..arity].iter().collect();
    let tgt = vocabs.last().expect("checked");
    let (translations, report) = translate_lines(&models, &src_vocabs, tgt, &lines, &opts)?;
    let text: Vec<String> = if n_best.is_some() {
        let names: Vec<String> = models.iter().map(|m| m.name.clone()).collect();
        translations
            .iter()
            .flat_map(|t| t.nbest_entries(&names, tgt))
            .map(|e| format_nbest(&e))
            .collect()
    } else {
        translations.into_iter().map(|t| t.best).collect()
    };
    emit(cfg, "output", &text, out)?;
    log::info!(
        "translated {} sentences in {:.2}s ({:.1} source tokens/s)",
        report.sentences,
        report.seconds,
        report.tokens_per_second()
    );
    Ok(())
}

pub fn score(cfg: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let model = LoadedModel::load("M0", &cfg.path("model")?)?;
    let vocabs = load_vocabs(&cfg.paths("vocabs"))?;
    check_vocabs(std::slice::from_ref(&model), &vocabs)?;
    let sources = cfg.paths("source");
    let arity = model.config().arity();
    if sources.len() != arity {
        return Err(usage(format!("the model reads {arity} source stream(s), {} given", sources.len())));
    }
    let target = cfg.path("target")?;
    let src = encode_files(&sources, &vocabs)?;
    let tgt = encode_files(std::slice::from_ref(&target), &vocabs[vocabs.len() - 1..])?.remove(0);
    for (p, s) in sources.iter().zip(&src) {
        if s.len() != tgt.len() {
            return Err(CliError::Core(Error::Data(format!(
                "{} has {} lines but {} has {}",
                p.display(),
                s.len(),
                target.display(),
                tgt.len()
            ))));
        }
    }
    let scores = score_corpus(&model, &src, &tgt, cfg.get("mini-batch")?)?;
    let lines: Vec<String> = scores.iter().enumerate().map(|(i, s)| s.format(i)).collect();
    emit(cfg, "output", &lines, out)
}

pub fn rescore(cfg: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let nbest = cfg.path("nbest")?;
    let entries = parse_nbest(&read_text(&nbest)?)?;
    let mut models = load_models(&cfg.paths("models"), "R")?;
    let directions: Vec<bool> = cfg.parsed_list("right-left")?;
    if !directions.is_empty() {
        if directions.len() != models.len() {
            return Err(usage(format!(
                "{} --right-left values for {} models",
                directions.len(),
                models.len()
            )));
        }
        for (m, r2l) in models.iter_mut().zip(directions) {
            m.model.config.right_left = r2l;
        }
    }
    let vocabs = load_vocabs(&cfg.paths("vocabs"))?;
    check_vocabs(&models, &vocabs)?;
    let sources = encode_files(&cfg.paths("source"), &vocabs[..vocabs.len() - 1])?;
    let weights: Vec<f64> = cfg.parsed_list("weights")?;
    let rescorers: Vec<Rescorer<'_>> = models
        .iter()
        .map(|m| Rescorer {
            name: m.name.clone(),
            model: m,
        })
        .collect();
    let tgt = vocabs.last().expect("checked");
    let ranked = rescore_nbest(
        &entries,
        &sources,
        tgt,
        &rescorers,
        (!weights.is_empty()).then_some(weights.as_slice()),
        cfg.get("mini-batch")?,
    )?;
    let lines: Vec<String> = ranked.iter().map(format_nbest).collect();
    emit(cfg, "output", &lines, out)?;
    if let Some(p) = cfg.raw("best-output") {
        write_lines(Path::new(p), &best_lines(&ranked))?;
    }
    Ok(())
}

pub fn bleu(cfg: &Config, out: &mut dyn Write) -> Result<(), CliError> {
    let (hyp, reference) = (cfg.path("hyp")?, cfg.path("ref")?);
    let (hyp, reference) = (read_lines(&hyp)?, read_lines(&reference)?);
    let b = corpus_bleu(&hyp, &reference, 4)?;
    writeln!(out, "BLEU = {b:.2}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

pub fn synth(cfg: &Config, _out: &mut dyn Write) -> Result<(), CliError> {
    let task: String = cfg.get("task")?;
    let dir = cfg.path("output")?;
    let files = synth::generate(&task, cfg.get("size")?, cfg.get("test-size")?, cfg.get("seed")?)
        .ok_or_else(|| usage(format!("unknown task {task:?} (expected one of {})", synth::TASKS.join(", "))))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, lines) in files {
        let path = dir.join(&name);
        write_lines(&path, &lines)?;
        log::info!("wrote {} lines to {}", lines.len(), path.display());
    }
    Ok(())
}
