//! Optimization: Adam, the learning-rate schedule, exponential parameter
//! averaging, synchronous and asynchronous data-parallel training, and
//! checkpoints.

mod asynchronous;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{make_batches, Batch, BatchConfig, Corpus};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::io::{read_bundle, write_bundle};
use crate::models::{Model, ModelConfig, ParamSet};
use crate::tensor::{Element, Tensor};

pub use asynchronous::{checksum, AuditReport};

/// Linear warmup from 0, then inverse-square-root decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.0003,
            warmup: 16000,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            return if step == 0 { 0.0 } else { self.base };
        }
        if step <= self.warmup {
            self.base * (step as f64 / self.warmup as f64)
        } else {
            self.base * (self.warmup as f64 / step as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub const RNN: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    pub const TRANSFORMER: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-9,
    };

    /// Transformer settings when the decoder is a transformer.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        if cfg.decoder == "transformer" {
            Self::TRANSFORMER
        } else {
            Self::RNN
        }
    }
}

/// One Adam update of a single tensor at (1-based) step `t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adam_tensor(cfg: &AdamConfig, t: u64, lr: f64, theta: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..theta.len() {
        let gi = g[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        theta[i] = (theta[i] as f64 - step) as f32;
    }
}

pub(crate) fn average_tensor(decay: f64, avg: &mut [f32], theta: &[f32]) {
    for (a, &p) in avg.iter_mut().zip(theta) {
        *a = (decay * *a as f64 + (1.0 - decay) * p as f64) as f32;
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Apply one bias-corrected update. Non-finite gradients abort the
    /// update before any parameter changes.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        check_finite(grads)?;
        self.step += 1;
        for (name, theta) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
            let m = self.m.get_mut(name).expect("moments mirror parameters");
            let v = self.v.get_mut(name).expect("moments mirror parameters");
            adam_tensor(&self.config, self.step, lr, theta.data_mut(), m.data_mut(), v.data_mut(), g.data());
        }
        Ok(())
    }
}

fn check_finite(grads: &ParamSet) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}; update aborted")));
        }
    }
    Ok(())
}

/// Exponentially decayed running average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Averager {
    pub decay: f64,
    pub params: ParamSet,
}

impl Averager {
    /// Starts from a copy of `params`.
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        Averager {
            decay,
            params: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamSet) {
        for (name, avg) in self.params.iter_mut() {
            let p = params.get(name).expect("same parameter set");
            average_tensor(self.decay, avg.data_mut(), p.data());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    /// sum gradients of all workers at a barrier, then one Adam step
    Sync,
    /// workers update a shared parameter store without a barrier
    Async,
}

impl fmt::Display for Parallelism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parallelism::Sync => "sync",
            Parallelism::Async => "async",
        })
    }
}

impl FromStr for Parallelism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(Parallelism::Sync),
            "async" => Ok(Parallelism::Async),
            _ => Err(Error::Config(format!("unknown parallelism {s:?} (sync, async)"))),
        }
    }
}

/// Arithmetic used for forward and backward passes. Parameters, moments
/// and the average are always stored in 32 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(Precision::F32),
            "f64" | "float64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (f32, f64)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub schedule: LrSchedule,
    /// `None` picks the defaults for the model's decoder
    pub adam: Option<AdamConfig>,
    pub avg_decay: f64,
    pub label_smoothing: f64,
    pub workers: usize,
    pub parallelism: Parallelism,
    pub batch: BatchConfig,
    pub epochs: u64,
    pub max_updates: Option<u64>,
    pub seed: u64,
    /// metrics line every this many updates (0 = never)
    pub disp_freq: u64,
    pub max_grad_norm: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            schedule: LrSchedule::default(),
            adam: None,
            avg_decay: 0.9999,
            label_smoothing: 0.0,
            workers: 1,
            parallelism: Parallelism::Sync,
            batch: BatchConfig {
                token_budget: 2000,
                sort_window: None,
                shuffle: true,
                seed: 1,
            },
            epochs: 1,
            max_updates: None,
            seed: 1,
            disp_freq: 100,
            max_grad_norm: None,
            precision: Precision::F32,
        }
    }
}

/// Where training stands: `batch` batches of epoch `epoch` are done.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Progress {
    pub update: u64,
    pub epoch: u64,
    pub batch: usize,
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// mean token cross-entropy of the batch
    pub loss: f64,
    pub labels: usize,
    pub source_tokens: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub updates: u64,
    pub metrics: Vec<String>,
    /// token-weighted mean loss of the last epoch trained
    pub last_epoch_loss: f64,
    pub seconds: f64,
    pub source_tokens: usize,
    pub audit: Option<AuditReport>,
}

impl TrainReport {
    pub fn words_per_second(&self) -> f64 {
        self.source_tokens as f64 / self.seconds.max(1e-9)
    }
}

pub fn metrics_line(update: u64, epoch: u64, loss: f64, lr: f64, wps: f64) -> String {
    format!("update={update} epoch={epoch} loss={loss:.6} lr={lr:.8} wps={wps:.1}")
}

pub(crate) struct WorkerOutput {
    pub grads: Vec<Vec<f32>>,
    /// cross-entropy summed over the sub-batch's labels
    pub loss_sum: f64,
    pub labels: usize,
    pub source_tokens: usize,
}

/// Gradients of the mean token loss of `batch` at `params`, in parameter declaration order.
pub(crate) fn worker_gradients<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    params: &[(&str, &Tensor<f32>)],
    batch: &Batch,
    smoothing: f64,
    seed: u64,
) -> Result<WorkerOutput> {
    g.clear();
    for (name, t) in params {
        g.set_param(name, &t.cast())?;
    }
    g.zero_grads();
    g.seed(seed);
    let loss = model.loss(g, batch, smoothing)?;
    g.forward()?;
    g.backward(loss.total)?;
    let ce = g.value(loss.cross_entropy)?.item()?.as_f64();
    let grads = params
        .iter()
        .map(|(name, _)| {
            g.param_grad_slice(name)
                .map(|s| s.iter().map(|x| x.as_f64() as f32).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WorkerOutput {
        grads,
        loss_sum: ce * loss.labels as f64,
        labels: loss.labels,
        source_tokens: batch.source_tokens(),
    })
}

/// A worker's model and graph in the configured precision.
pub(crate) enum Engine<'a> {
    F32(&'a Model<f32>, &'a mut Graph<f32>),
    F64(&'a Model<f64>, &'a mut Graph<f64>),
}

impl Engine<'_> {
    pub fn gradients(
        &mut self,
        params: &[(&str, &Tensor<f32>)],
        batch: &Batch,
        smoothing: f64,
        seed: u64,
    ) -> Result<WorkerOutput> {
        match self {
            Engine::F32(m, g) => worker_gradients(*m, g, params, batch, smoothing, seed),
            Engine::F64(m, g) => worker_gradients(*m, g, params, batch, smoothing, seed),
        }
    }
}

/// Dropout seed of one worker at one update.
pub(crate) fn step_seed(seed: u64, update: u64, worker: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(update.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(worker as u64)
}

fn clip(grads: &mut ParamSet, max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Training state: parameters, optimizer, average and progress.
pub struct Trainer {
    pub model: Model<f32>,
    pub params: ParamSet,
    pub adam: Adam,
    pub average: Averager,
    pub progress: Progress,
    pub options: TrainOptions,
    graphs: Vec<Graph<f32>>,
    model64: Option<Model<f64>>,
    graphs64: Vec<Graph<f64>>,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.model.config)
            .field("progress", &self.progress)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Fresh parameters initialized from `options.seed`.
    pub fn new(config: ModelConfig, options: TrainOptions) -> Result<Self> {
        let model = Model::new(config)?;
        let params = model.init_params(options.seed);
        Self::from_params(model, params, options)
    }

    pub fn from_params(model: Model<f32>, params: ParamSet, options: TrainOptions) -> Result<Self> {
        model.check_params(&params)?;
        if options.workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let adam = Adam::new(&params, options.adam.unwrap_or_else(|| AdamConfig::for_model(&model.config)));
        let average = Averager::new(&params, options.avg_decay);
        let model64 = match options.precision {
            Precision::F64 => Some(Model::new(model.config.clone())?),
            Precision::F32 => None,
        };
        Ok(Trainer {
            model,
            params,
            adam,
            average,
            progress: Progress::default(),
            options,
            graphs: Vec::new(),
            model64,
            graphs64: Vec::new(),
        })
    }

    /// One engine per worker.
    pub(crate) fn engines(&mut self) -> Vec<Engine<'_>> {
        let w = self.options.workers;
        match &self.model64 {
            Some(m64) => {
                self.graphs64.resize_with(w.max(self.graphs64.len()), Graph::new);
                self.graphs64.iter_mut().take(w).map(|g| Engine::F64(m64, g)).collect()
            }
            None => {
                self.graphs.resize_with(w.max(self.graphs.len()), Graph::new);
                let m = &self.model;
                self.graphs.iter_mut().take(w).map(|g| Engine::F32(m, g)).collect()
            }
        }
    }

    /// One synchronous update: split `batch` across the workers, sum their
    /// token-weighted gradients in worker order, apply one Adam step.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        let parts = batch.split(self.options.workers);
        let total_labels: usize = parts
            .iter()
            .map(|p| p.target.as_ref().map_or(0, |t| t.tokens()))
            .sum();
        if total_labels == 0 {
            return Err(Error::Data("batch without target tokens".into()));
        }
        let update = self.progress.update + 1;
        let (seed, smoothing) = (self.options.seed, self.options.label_smoothing);
        let params = std::mem::take(&mut self.params);
        let named: Vec<(&str, &Tensor<f32>)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut engines = self.engines();
        let outputs: Vec<Result<WorkerOutput>> = if parts.len() == 1 {
            vec![engines[0].gradients(&named, &parts[0], smoothing, step_seed(seed, update, 0))]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = engines
                    .iter_mut()
                    .zip(&parts)
                    .enumerate()
                    .map(|(k, (e, part))| {
                        let named = &named;
                        s.spawn(move || e.gradients(named, part, smoothing, step_seed(seed, update, k)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("training worker panicked".into()))))
                    .collect()
            })
        };
        drop(engines);
        drop(named);
        self.params = params;
        let mut grads = self.params.zeros_like();
        let mut loss_sum = 0.0;
        let mut source_tokens = 0;
        for (k, out) in outputs.into_iter().enumerate() {
            let out = out.map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("worker {k}: {m}")),
                other => other,
            })?;
            let w = (out.labels as f64 / total_labels as f64) as f32;
            for ((_, acc), g) in grads.iter_mut().zip(&out.grads) {
                for (a, &x) in acc.data_mut().iter_mut().zip(g) {
                    *a += w * x;
                }
            }
            loss_sum += out.loss_sum;
            source_tokens += out.source_tokens;
        }
        if let Some(max) = self.options.max_grad_norm {
            clip(&mut grads, max);
        }
        let lr = self.options.schedule.lr(update);
        self.adam.update(&mut self.params, &grads, lr)?;
        self.average.update(&self.params);
        self.progress.update = update;
        Ok(StepStats {
            loss: loss_sum / total_labels as f64,
            labels: total_labels,
            source_tokens,
            lr,
        })
    }

    fn done(&self) -> bool {
        self.options.max_updates.is_some_and(|m| self.progress.update >= m)
    }

    /// Train from the current progress until the epoch budget or
    /// `max_updates` is reached. `on_metrics` receives every metrics line.
    pub fn train(&mut self, corpus: &Corpus, on_metrics: &mut dyn FnMut(&str)) -> Result<TrainReport> {
        self.train_with(corpus, on_metrics, &mut |_| Ok(()))
    }

    /// Like [`train`](Self::train), calling `after_update` after every
    /// synchronous update (used for periodic checkpoints).
    pub fn train_with(
        &mut self,
        corpus: &Corpus,
        on_metrics: &mut dyn FnMut(&str),
        after_update: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<TrainReport> {
        if corpus.target.is_none() {
            return Err(Error::Data("training needs a target side".into()));
        }
        let mut report = TrainReport::default();
        let start = Instant::now();
        let mut window = Window::new();
        while self.progress.epoch < self.options.epochs && !self.done() {
            let mut cfg = self.options.batch.clone();
            cfg.seed = self.options.seed;
            let batches = make_batches(corpus, &cfg, self.progress.epoch);
            if batches.batches.is_empty() {
                return Err(Error::Data("no sentence fits the token budget".into()));
            }
            let mut epoch_loss = (0.0, 0usize);
            if self.options.parallelism == Parallelism::Async {
                let rest = &batches.batches[self.progress.batch..];
                let out = asynchronous::run_epoch(self, rest, on_metrics, &mut window)?;
                epoch_loss = (out.loss_sum, out.labels);
                report.source_tokens += out.source_tokens;
                report.audit = Some(match report.audit.take() {
                    Some(a) => a.merge(out.audit),
                    None => out.audit,
                });
            } else {
                for batch in &batches.batches[self.progress.batch..] {
                    let stats = self.step(batch)?;
                    self.progress.batch += 1;
                    epoch_loss.0 += stats.loss * stats.labels as f64;
                    epoch_loss.1 += stats.labels;
                    report.source_tokens += stats.source_tokens;
                    window.add(&stats);
                    if self.options.disp_freq > 0 && self.progress.update % self.options.disp_freq == 0 {
                        on_metrics(&window.flush(self.progress.update, self.progress.epoch, stats.lr));
                    }
                    after_update(self)?;
                    if self.done() {
                        break;
                    }
                }
            }
            report.last_epoch_loss = epoch_loss.0 / epoch_loss.1.max(1) as f64;
            if !self.done() || self.progress.batch >= batches.batches.len() {
                self.progress.epoch += 1;
                self.progress.batch = 0;
            }
        }
        report.updates = self.progress.update;
        report.seconds = start.elapsed().as_secs_f64();
        report.metrics = window.lines;
        Ok(report)
    }

    /// Write parameters, optimizer moments, the average and progress.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = format!(
            "update: {}\nepoch: {}\nbatch: {}\nadam-step: {}\n---\n{}",
            self.progress.update,
            self.progress.epoch,
            self.progress.batch,
            self.adam.step,
            self.model.config.to_text()
        );
        let mut set = ParamSet::new();
        let groups = [
            ("param/", &self.params),
            ("adam_m/", &self.adam.m),
            ("adam_v/", &self.adam.v),
            ("avg/", &self.average.params),
        ];
        for (prefix, group) in groups {
            for (name, t) in group.iter() {
                set.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        write_bundle(path, &header, &set)
    }

    /// Restore a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn resume(path: &Path, options: TrainOptions) -> Result<Self> {
        let (header, set) = read_bundle(path)?;
        let (state, model_text) = header
            .split_once("---\n")
            .ok_or_else(|| Error::Format(format!("{} is not a checkpoint", path.display())))?;
        let config = ModelConfig::from_text(model_text)?;
        let mut progress = Progress::default();
        let mut adam_step = 0;
        for line in state.lines() {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad checkpoint line {line:?}")))?;
            let n: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad checkpoint value {line:?}")))?;
            match k.trim() {
                "update" => progress.update = n,
                "epoch" => progress.epoch = n,
                "batch" => progress.batch = n as usize,
                "adam-step" => adam_step = n,
                other => return Err(Error::Format(format!("unknown checkpoint key {other:?}"))),
            }
        }
        let mut groups = [ParamSet::new(), ParamSet::new(), ParamSet::new(), ParamSet::new()];
        let prefixes = ["param/", "adam_m/", "adam_v/", "avg/"];
        for (name, t) in set.iter() {
            let (i, rest) = prefixes
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|r| (i, r)))
                .ok_or_else(|| Error::Format(format!("unexpected checkpoint tensor {name}")))?;
            groups[i].insert(rest, t.clone());
        }
        let [params, m, v, avg] = groups;
        let model = Model::new(config)?;
        for g in [&params, &m, &v, &avg] {
            model.check_params(g)?;
        }
        let mut trainer = Trainer::from_params(model, params, options)?;
        trainer.adam.m = m;
        trainer.adam.v = v;
        trainer.adam.step = adam_step;
        trainer.average.params = avg;
        trainer.progress = progress;
        Ok(trainer)
    }
}

/// Metrics accumulated between two display lines.
pub(crate) struct Window {
    loss_sum: f64,
    labels: usize,
    source_tokens: usize,
    since: Instant,
    pub lines: Vec<String>,
}

impl Window {
    pub fn new() -> Self {
        Window {
            loss_sum: 0.0,
            labels: 0,
            source_tokens: 0,
            since: Instant::now(),
            lines: Vec::new(),
        }
    }

    pub fn add(&mut self, s: &StepStats) {
        self.loss_sum += s.loss * s.labels as f64;
        self.labels += s.labels;
        self.source_tokens += s.source_tokens;
    }

    pub fn flush(&mut self, update: u64, epoch: u64, lr: f64) -> String {
        let secs = self.since.elapsed().as_secs_f64().max(1e-9);
        let line = metrics_line(
            update,
            epoch,
            self.loss_sum / self.labels.max(1) as f64,
            lr,
            self.source_tokens as f64 / secs,
        );
        self.loss_sum = 0.0;
        self.labels = 0;
        self.source_tokens = 0;
        self.since = Instant::now();
        self.lines.push(line.clone());
        line
    }
}

/// Mean token cross-entropy of `params` on `corpus` (no dropout).
pub fn evaluate(model: &Model<f32>, params: &ParamSet, corpus: &Corpus, token_budget: usize) -> Result<f64> {
    let cfg = BatchConfig {
        token_budget,
        sort_window: None,
        shuffle: false,
        seed: 0,
    };
    let mut g = Graph::new();
    g.set_inference(true);
    params.load_into(&mut g)?;
    let (mut sum, mut labels) = (0.0, 0usize);
    for batch in make_batches(corpus, &cfg, 0).batches {
        g.clear();
        let loss = model.loss(&mut g, &batch, 0.0)?;
        g.forward()?;
        sum += g.value(loss.cross_entropy)?.item()? as f64 * loss.labels as f64;
        labels += loss.labels;
    }
    if labels == 0 {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    Ok(sum / labels as f64)
}

#[cfg(test)]
mod tests;
