use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn copy_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = rng.gen_range(3..7);
            (0..len).map(|_| rng.gen_range(2..12)).collect()
        })
        .collect();
    Corpus::new(vec![src.clone()], Some(src)).unwrap()
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::preset("s2s-shallow", &[12], 12).unwrap();
    c.dim_emb = 8;
    c.dim_rnn = 8;
    c.dropout = 0.0;
    c
}

fn options(workers: usize) -> TrainOptions {
    TrainOptions {
        schedule: LrSchedule { base: 0.01, warmup: 10 },
        workers,
        batch: BatchConfig {
            token_budget: 200,
            sort_window: None,
            shuffle: true,
            seed: 0,
        },
        epochs: 1000,
        disp_freq: 0,
        ..TrainOptions::default()
    }
}

#[test]
fn schedule_points() {
    let s = LrSchedule::default();
    assert_eq!(s.lr(0), 0.0);
    assert_eq!(s.lr(16000), 0.0003);
    assert_eq!(s.lr(64000), 0.00015);
    assert_eq!(s.lr(8000), 0.00015);
    // continuity at the warmup boundary from both sides
    assert!((s.lr(16001) - s.lr(16000)).abs() < 1e-8);
    assert!((s.lr(15999) - s.lr(16000)).abs() < 1e-7);
}

#[test]
fn adam_single_step() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(&[1], vec![0.0]).unwrap());
    let mut g = ParamSet::new();
    g.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut adam = Adam::new(&p, AdamConfig::RNN);
    adam.update(&mut p, &g, 0.1).unwrap();
    assert!((p.get("w").unwrap().data()[0] + 0.1).abs() < 1e-6);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let before = p.clone();
    let g = p.zeros_like();
    let mut adam = Adam::new(&p, AdamConfig::TRANSFORMER);
    for _ in 0..3 {
        adam.update(&mut p, &g, 0.1).unwrap();
    }
    assert!(p.bitwise_eq(&before));
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
    let before = p.clone();
    let mut g = p.zeros_like();
    g.get_mut("w").unwrap().data_mut()[1] = f32::NAN;
    let mut adam = Adam::new(&p, AdamConfig::RNN);
    assert!(matches!(adam.update(&mut p, &g, 0.1), Err(Error::Numeric(_))));
    assert!(p.bitwise_eq(&before));
    assert_eq!(adam.step, 0);
}

#[test]
fn averaging_closed_forms() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut avg = Averager::new(&p.zeros_like(), 0.0);
    avg.update(&p);
    assert_eq!(avg.params.get("w").unwrap().data()[0], 1.0);

    let mut avg = Averager::new(&p.zeros_like(), 0.999);
    for _ in 0..1000 {
        avg.update(&p);
    }
    let expected = 1.0 - 0.999f64.powi(1000);
    assert!((avg.params.get("w").unwrap().data()[0] as f64 - expected).abs() < 1e-4);
    assert!((expected - 0.6323).abs() < 1e-4);
}

#[test]
fn sync_training_is_deterministic() {
    let corpus = copy_corpus(64, 1);
    let run = || {
        let mut o = options(1);
        o.max_updates = Some(30);
        let mut t = Trainer::new(tiny_config(), o).unwrap();
        t.train(&corpus, &mut |_| {}).unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert!(a.params.bitwise_eq(&b.params));
    assert!(a.average.params.bitwise_eq(&b.average.params));
}

#[test]
fn dropout_training_is_deterministic() {
    let corpus = copy_corpus(32, 2);
    let run = || {
        let mut cfg = tiny_config();
        cfg.dropout = 0.2;
        let mut o = options(2);
        o.max_updates = Some(10);
        let mut t = Trainer::new(cfg, o).unwrap();
        t.train(&corpus, &mut |_| {}).unwrap();
        t.params
    };
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn four_workers_match_one() {
    let corpus = copy_corpus(64, 3);
    let run = |w, precision| {
        let mut o = options(w);
        o.max_updates = Some(50);
        o.precision = precision;
        let mut t = Trainer::new(tiny_config(), o).unwrap();
        t.train(&corpus, &mut |_| {}).unwrap();
        t.params
    };
    let d = run(1, Precision::F64).max_abs_diff(&run(4, Precision::F64));
    assert!(d < 1e-6, "w=4 differs from w=1 by {d}");
    // 32-bit arithmetic only adds summation-order rounding
    let d = run(1, Precision::F32).max_abs_diff(&run(4, Precision::F32));
    assert!(d < 1e-4, "w=4 differs from w=1 by {d} in f32");
}

#[test]
fn async_single_worker_equals_sync() {
    let corpus = copy_corpus(64, 4);
    let run = |par| {
        let mut o = options(1);
        o.parallelism = par;
        o.epochs = 2;
        let mut t = Trainer::new(tiny_config(), o).unwrap();
        t.train(&corpus, &mut |_| {}).unwrap();
        t
    };
    let (s, a) = (run(Parallelism::Sync), run(Parallelism::Async));
    assert!(s.params.bitwise_eq(&a.params));
    assert!(s.adam.m.bitwise_eq(&a.adam.m));
    assert!(s.average.params.bitwise_eq(&a.average.params));
    assert_eq!(s.progress, a.progress);
}

#[test]
fn async_workers_never_see_torn_tensors() {
    let corpus = copy_corpus(96, 5);
    let mut o = options(4);
    o.parallelism = Parallelism::Async;
    o.epochs = 3;
    let mut t = Trainer::new(tiny_config(), o).unwrap();
    let report = t.train(&corpus, &mut |_| {}).unwrap();
    let audit = report.audit.unwrap();
    assert!(audit.audits > 0);
    assert_eq!(audit.torn, 0);
    assert_eq!(t.progress.epoch, 3);
    assert_eq!(t.adam.step, t.progress.update);
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let corpus = copy_corpus(64, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.mtk");
    let mut o = options(2);
    o.max_updates = Some(40);
    let mut straight = Trainer::new(tiny_config(), o.clone()).unwrap();
    straight.train(&corpus, &mut |_| {}).unwrap();

    let mut half = o.clone();
    half.max_updates = Some(20);
    let mut first = Trainer::new(tiny_config(), half).unwrap();
    first.train(&corpus, &mut |_| {}).unwrap();
    first.save_checkpoint(&path).unwrap();
    let mut resumed = Trainer::resume(&path, o).unwrap();
    assert_eq!(resumed.progress, first.progress);
    resumed.train(&corpus, &mut |_| {}).unwrap();

    assert!(straight.params.bitwise_eq(&resumed.params));
    assert!(straight.adam.v.bitwise_eq(&resumed.adam.v));
    assert!(straight.average.params.bitwise_eq(&resumed.average.params));
    assert_eq!(straight.progress, resumed.progress);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.mtk");
    let t = Trainer::new(tiny_config(), options(1)).unwrap();
    t.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Trainer::resume(&path, options(1)), Err(Error::Format(_))));
}

#[test]
fn metrics_lines_have_the_documented_shape() {
    let corpus = copy_corpus(64, 7);
    let mut o = options(1);
    o.max_updates = Some(6);
    o.disp_freq = 3;
    let mut t = Trainer::new(tiny_config(), o).unwrap();
    let mut seen = Vec::new();
    let report = t.train(&corpus, &mut |l| seen.push(l.to_string())).unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen, report.metrics);
    for line in &seen {
        let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["update", "epoch", "loss", "lr", "wps"]);
        for kv in line.split(' ') {
            kv.split('=').nth(1).unwrap().parse::<f64>().unwrap();
        }
    }
    assert!(seen[0].starts_with("update=3 epoch=0 "));
}

#[test]
fn training_reduces_loss() {
    let corpus = copy_corpus(64, 8);
    let mut o = options(1);
    o.max_updates = Some(150);
    let mut t = Trainer::new(tiny_config(), o).unwrap();
    let before = evaluate(&t.model, &t.params, &corpus, 200).unwrap();
    t.train(&corpus, &mut |_| {}).unwrap();
    let after = evaluate(&t.model, &t.params, &corpus, 200).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn language_model_trains() {
    let text = copy_corpus(64, 9);
    let corpus = Corpus::new(vec![], text.target).unwrap();
    let mut cfg = ModelConfig::preset("lm", &[], 12).unwrap();
    cfg.dim_emb = 8;
    cfg.dim_rnn = 8;
    cfg.dropout = 0.0;
    let mut o = options(1);
    o.max_updates = Some(80);
    let mut t = Trainer::new(cfg, o).unwrap();
    let before = evaluate(&t.model, &t.params, &corpus, 200).unwrap();
    t.train(&corpus, &mut |_| {}).unwrap();
    let after = evaluate(&t.model, &t.params, &corpus, 200).unwrap();
    assert!(after < before);
}
