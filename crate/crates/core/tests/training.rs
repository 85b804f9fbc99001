use std::fs;
use std::path::Path;

use lazy_attention::checkpoint;
use lazy_attention::corpus::synthetic_text;
use lazy_attention::model::MASK_ID;
use lazy_attention::training::data::{shuffled_order, windows};
use lazy_attention::training::{read_metrics, Dataset, Preset, TrainConfig, Trainer};
use lazy_attention::Error;
use proptest::prelude::*;

fn small_config(dir: &Path, steps: usize) -> TrainConfig {
    TrainConfig {
        corpus: dir.join("corpus.txt"),
        out_dir: dir.join("run"),
        steps,
        batch_tokens: 4 * 32,
        peak_lr: 3e-3,
        warmup_steps: 10,
        eval_every: 50,
        eval_windows: 8,
        preset: Preset::Lazy,
        layers: Some(1),
        d_model: Some(32),
        heads: Some(2),
        n_ctx: Some(32),
        ..Default::default()
    }
}

fn write_corpus(dir: &Path, bytes: usize) {
    fs::write(dir.join("corpus.txt"), synthetic_text(bytes, 11)).unwrap();
}

#[test]
fn loss_decreases_over_200_steps() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 100_000);
    let mut t = Trainer::new(small_config(dir.path(), 200)).unwrap();
    let first = t.step().unwrap().loss;
    let summary = t.run().unwrap();
    assert!(summary.final_loss < first, "{first} -> {}", summary.final_loss);
    assert!(summary.eval_loss < first);
    assert!(summary.checkpoint.join(checkpoint::MANIFEST_FILE).exists());
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 30_000);
    let run = |sub: &str| {
        let mut cfg = small_config(dir.path(), 30);
        cfg.out_dir = dir.path().join(sub);
        Trainer::new(cfg).unwrap().run().unwrap();
        let losses: Vec<(usize, f64, f64)> = read_metrics(&dir.path().join(sub).join("metrics.csv")).unwrap();
        let params = fs::read(dir.path().join(sub).join("checkpoint").join(checkpoint::PARAMS_FILE)).unwrap();
        (losses, params)
    };
    let (a, pa) = run("a");
    let (b, pb) = run("b");
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn logged_lr_follows_schedule() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 30_000);
    let cfg = small_config(dir.path(), 25);
    let sched = cfg.schedule();
    Trainer::new(cfg).unwrap().run().unwrap();
    let rows = read_metrics(&dir.path().join("run").join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 25);
    for (step, _, lr) in rows {
        assert_eq!(lr, sched.lr_at(step));
    }
    assert_eq!(sched.lr_at(0), 0.0);
    assert_eq!(sched.lr_at(10), 3e-3);
    assert!((sched.lr_at(25) - 3e-4).abs() < 1e-15);
}

#[test]
fn tau_and_bias_learn_and_frozen_ones_stay() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 30_000);
    let mut t = Trainer::new(small_config(dir.path(), 20)).unwrap();
    let init = t.model.clone();
    for _ in 0..20 {
        t.step().unwrap();
    }
    assert_ne!(t.model.tau, init.tau);
    let (b0, b1) = (init.bias.as_ref().unwrap(), t.model.bias.as_ref().unwrap());
    // n_ctx = 32 keeps every distance up to W = 32 in play except W itself
    assert_ne!(b1.lookup(0, 0, 3), b0.lookup(0, 0, 3));
    assert_eq!(b1.lookup(0, 0, 32), 0.0);

    let mut cfg = small_config(dir.path(), 20);
    cfg.preset = Preset::LazyNoElastic;
    cfg.freeze_bias = Some(true);
    let mut t = Trainer::new(cfg).unwrap();
    let init = t.model.clone();
    for _ in 0..5 {
        t.step().unwrap();
    }
    assert_eq!(t.model.tau, init.tau);
    assert_eq!(t.model.bias, init.bias);
    assert_ne!(t.model.layers[0].wq, init.layers[0].wq);
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 30_000);
    let mut t = Trainer::new(small_config(dir.path(), 10)).unwrap();
    t.model.unembed.data_mut()[0] = f32::NAN;
    match t.step() {
        Err(Error::NonFiniteLoss { step, dump }) => {
            assert_eq!(step, 1);
            let text = fs::read_to_string(dump).unwrap();
            assert!(text.contains("param_max_abs"));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn mask_at_k_trains_with_extended_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 30_000);
    let mut cfg = small_config(dir.path(), 10);
    cfg.mask_at = Some(2);
    let mut t = Trainer::new(cfg).unwrap();
    assert_eq!(t.model.config.vocab, MASK_ID + 1);
    assert_eq!(t.model.embed.shape()[0], MASK_ID + 1);
    t.step().unwrap();
    let mut cfg = small_config(dir.path(), 10);
    cfg.mask_at = Some(32);
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn config_file_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.toml");
    fs::write(&path, "corpus = \"data/c.txt\"\nout_dir = \"out\"\nsteps = 5\nwarmup_steps = 1\n").unwrap();
    let cfg = TrainConfig::from_file(&path).unwrap();
    assert_eq!(cfg.corpus, dir.path().join("data/c.txt"));
    assert_eq!(cfg.out_dir, dir.path().join("out"));
    assert!(Trainer::new(cfg).is_err(), "missing corpus must fail");
}

#[test]
fn same_seed_gives_same_batches() {
    let toks: Vec<u16> = synthetic_text(20_000, 2).bytes().map(u16::from).collect();
    let mut a = Dataset::new(toks.clone(), 32, 0.05, 7).unwrap();
    let mut b = Dataset::new(toks.clone(), 32, 0.05, 7).unwrap();
    let mut c = Dataset::new(toks, 32, 0.05, 8).unwrap();
    let (ba, bb, bc) = (a.next_batch(16), b.next_batch(16), c.next_batch(16));
    assert_eq!(ba, bb);
    assert_ne!(ba, bc);
}

proptest! {
    #[test]
    fn shuffle_preserves_the_chunk_multiset(len in 1usize..2000, w in 1usize..40, seed in any::<u64>()) {
        let toks: Vec<u16> = (0..len).map(|i| ((i * 7919) % 257) as u16).collect();
        let chunks: Vec<&[u16]> = windows(&toks, w).collect();
        let order = shuffled_order(chunks.len(), seed);
        let mut shuffled: Vec<&[u16]> = order.iter().map(|&i| chunks[i]).collect();
        let mut orig = chunks.clone();
        orig.sort();
        shuffled.sort();
        prop_assert_eq!(orig, shuffled);
    }
}
