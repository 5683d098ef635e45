//! Asynchronous data parallelism over a shared parameter store.
//!
//! Every parameter tensor lives behind its own lock as an immutable,
//! checksummed snapshot. Workers read whole snapshots, compute gradients
//! without a barrier, and publish each updated tensor by swapping in a new
//! snapshot. Different tensors may be read at different update counts; a
//! single tensor is never observed half-written.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{adam_tensor, average_tensor, step_seed, StepStats, Trainer, Window};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

/// FNV-1a over the bit patterns of `data`.
pub fn checksum(data: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in data {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// What the audit thread saw while workers were publishing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditReport {
    /// snapshots whose checksum was recomputed
    pub audits: u64,
    /// snapshots whose contents did not match their checksum
    pub torn: u64,
}

impl AuditReport {
    pub fn merge(self, other: AuditReport) -> AuditReport {
        AuditReport {
            audits: self.audits + other.audits,
            torn: self.torn + other.torn,
        }
    }
}

struct Snapshot {
    data: Tensor<f32>,
    sum: u64,
}

impl Snapshot {
    fn new(data: Tensor<f32>) -> Arc<Self> {
        let sum = checksum(data.data());
        Arc::new(Snapshot { data, sum })
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    avg: Vec<f32>,
}

struct Slot {
    name: String,
    current: Mutex<Arc<Snapshot>>,
    moments: Mutex<Moments>,
}

pub(crate) struct EpochOutput {
    pub loss_sum: f64,
    pub labels: usize,
    pub source_tokens: usize,
    pub audit: AuditReport,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub(crate) fn run_epoch(
    tr: &mut Trainer,
    batches: &[Batch],
    on_metrics: &mut dyn FnMut(&str),
    window: &mut Window,
) -> Result<EpochOutput> {
    let slots: Vec<Slot> = tr
        .params
        .iter()
        .map(|(name, t)| Slot {
            name: name.clone(),
            current: Mutex::new(Snapshot::new(t.clone())),
            moments: Mutex::new(Moments {
                m: tr.adam.m.get(name).expect("moments mirror parameters").data().to_vec(),
                v: tr.adam.v.get(name).expect("moments mirror parameters").data().to_vec(),
                avg: tr.average.params.get(name).expect("average mirrors parameters").data().to_vec(),
            }),
        })
        .collect();
    let u0 = tr.progress.update;
    let adam0 = tr.adam.step;
    let limit = match tr.options.max_updates {
        Some(m) => batches.len().min(m.saturating_sub(u0) as usize),
        None => batches.len(),
    };
    let next = AtomicUsize::new(0);
    let counter = AtomicU64::new(u0);
    let stop = AtomicBool::new(false);
    let workers_done = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let totals = Mutex::new((0.0f64, 0usize, 0usize, 0usize));
    let shared_window = Mutex::new(std::mem::replace(window, Window::new()));
    let lines_before = lock(&shared_window).lines.len();
    let opts = tr.options.clone();
    let adam_cfg = tr.adam.config;
    let epoch = tr.progress.epoch;
    let engines = tr.engines();

    let audit = std::thread::scope(|s| {
        let auditor = s.spawn(|| {
            let mut report = AuditReport::default();
            while !workers_done.load(Ordering::Acquire) {
                for slot in &slots {
                    let snap = lock(&slot.current).clone();
                    report.audits += 1;
                    if checksum(snap.data.data()) != snap.sum {
                        report.torn += 1;
                    }
                }
                std::thread::sleep(Duration::from_millis(1));
            }
            report
        });
        let handles: Vec<_> = engines
            .into_iter()
            .enumerate()
            .map(|(k, mut engine)| {
                let (slots, next, counter, stop, failure, totals, shared_window, opts) =
                    (&slots, &next, &counter, &stop, &failure, &totals, &shared_window, &opts);
                s.spawn(move || {
                    let fail = |e: Error| {
                        stop.store(true, Ordering::Release);
                        lock(failure).get_or_insert(e);
                    };
                    loop {
                        let i = next.fetch_add(1, Ordering::AcqRel);
                        if i >= limit || stop.load(Ordering::Acquire) {
                            break;
                        }
                        let snaps: Vec<Arc<Snapshot>> = slots.iter().map(|s| lock(&s.current).clone()).collect();
                        let named: Vec<(&str, &Tensor<f32>)> =
                            slots.iter().zip(&snaps).map(|(s, p)| (s.name.as_str(), &p.data)).collect();
                        let seed = step_seed(opts.seed, u0 + i as u64 + 1, k);
                        let mut out =
                            match engine.gradients(&named, &batches[i], opts.label_smoothing, seed) {
                                Ok(o) => o,
                                Err(e) => return fail(e),
                            };
                        drop(snaps);
                        if let Some((j, _)) = out.grads.iter().enumerate().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
                            return fail(Error::Numeric(format!(
                                "worker {k}: non-finite gradient for {}; update aborted",
                                slots[j].name
                            )));
                        }
                        if let Some(max) = opts.max_grad_norm {
                            let norm = out
                                .grads
                                .iter()
                                .flatten()
                                .map(|&x| (x as f64) * (x as f64))
                                .sum::<f64>()
                                .sqrt();
                            if norm > max {
                                let s = (max / norm) as f32;
                                out.grads.iter_mut().flatten().for_each(|x| *x *= s);
                            }
                        }
                        let t = counter.fetch_add(1, Ordering::AcqRel) + 1;
                        let lr = opts.schedule.lr(t);
                        let adam_t = adam0 + (t - u0);
                        for (slot, grad) in slots.iter().zip(&out.grads) {
                            let mut mo = lock(&slot.moments);
                            let mo = &mut *mo;
                            let mut theta = lock(&slot.current).data.clone();
                            adam_tensor(&adam_cfg, adam_t, lr, theta.data_mut(), &mut mo.m, &mut mo.v, grad);
                            average_tensor(opts.avg_decay, &mut mo.avg, theta.data());
                            *lock(&slot.current) = Snapshot::new(theta);
                        }
                        let stats = StepStats {
                            loss: out.loss_sum / out.labels.max(1) as f64,
                            labels: out.labels,
                            source_tokens: out.source_tokens,
                            lr,
                        };
                        {
                            let mut tot = lock(totals);
                            tot.0 += out.loss_sum;
                            tot.1 += out.labels;
                            tot.2 += out.source_tokens;
                            tot.3 += 1;
                        }
                        let mut w = lock(shared_window);
                        w.add(&stats);
                        if opts.disp_freq > 0 && t % opts.disp_freq == 0 {
                            w.flush(t, epoch, lr);
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            if h.join().is_err() {
                lock(&failure).get_or_insert(Error::Contract("training worker panicked".into()));
            }
        }
        workers_done.store(true, Ordering::Release);
        auditor.join().unwrap_or_default()
    });

    let w = shared_window.into_inner().unwrap_or_else(|e| e.into_inner());
    for line in w.lines.iter().skip(lines_before) {
        on_metrics(line);
    }
    *window = w;
    if let Some(e) = failure.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }
    let (loss_sum, labels, source_tokens, processed) = totals.into_inner().unwrap_or_else(|e| e.into_inner());
    let mut params = ParamSet::new();
    let (mut m, mut v, mut avg) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
    for slot in slots {
        let snap = slot.current.into_inner().unwrap_or_else(|e| e.into_inner());
        let mo = slot.moments.into_inner().unwrap_or_else(|e| e.into_inner());
        let shape = snap.data.shape();
        m.insert(slot.name.clone(), Tensor::from_shape(shape, mo.m)?);
        v.insert(slot.name.clone(), Tensor::from_shape(shape, mo.v)?);
        avg.insert(slot.name.clone(), Tensor::from_shape(shape, mo.avg)?);
        params.insert(slot.name, snap.data.clone());
    }
    tr.params = params;
    tr.adam.m = m;
    tr.adam.v = v;
    tr.average.params = avg;
    tr.adam.step = adam0 + processed as u64;
    tr.progress.update = u0 + processed as u64;
    tr.progress.batch += processed;
    Ok(EpochOutput {
        loss_sum,
        labels,
        source_tokens,
        audit,
    })
}
