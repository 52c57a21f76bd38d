mod common;

use mmaae_core::model::{Model, ModelConfig, Pooling};
use mmaae_core::numerics::Tensor;
use mmaae_core::text::{encode_corpus, make_batch, Vocab};
use mmaae_core::training::*;
use mmaae_core::Error;

fn setup(n: usize, seed: u64) -> (Vocab, Vec<Vec<u32>>, Model<f32>) {
    let lines = common::toy_corpus(n, seed);
    let vocab = Vocab::build(&lines, 100).unwrap();
    let (seqs, skipped) = encode_corpus(&vocab, &lines, 10);
    assert_eq!(skipped, 0);
    let config = ModelConfig {
        d_w: 8,
        d_m: 16,
        d_f: 32,
        heads: 2,
        max_len: 10,
        vocab_size: vocab.len(),
        dropout: 0.0,
        seed,
        n_blocks: 1,
        pooling: Pooling::MeanMax,
    };
    let (model, _) = Model::initialize(config, &vocab, None).unwrap();
    (vocab, seqs, model)
}

fn config() -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        dropout: 0.2,
        batch_size: 5,
        max_epochs: 3,
        patience: 10,
        seed: 7,
        ..Default::default()
    }
}

fn quiet<'a>() -> TrainOptions<'a> {
    TrainOptions {
        clock: Clock::Off,
        ..Default::default()
    }
}

#[test]
fn adam_minimizes_square() {
    let mut adam = AdamState::<f64>::new(&[vec![1]], 0.1, 0.9, 0.999, 1e-8);
    let mut theta = Tensor::new(vec![1], vec![1.0]).unwrap();
    for _ in 0..200 {
        let g = 2.0 * theta.data()[0];
        theta.zero_grad();
        theta.accumulate_grad(&[g]);
        adam.step(&mut [&mut theta]).unwrap();
    }
    assert!(theta.data()[0].abs() < 0.05, "{}", theta.data()[0]);
    assert_eq!(adam.t, 200);
}

#[test]
fn adam_first_step_matches_hand_update() {
    // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> step of lr / (1 + eps)
    let mut adam = AdamState::<f64>::new(&[vec![1]], 0.1, 0.9, 0.999, 1e-8);
    let mut theta = Tensor::new(vec![1], vec![0.5]).unwrap();
    theta.accumulate_grad(&[1.0]);
    adam.step(&mut [&mut theta]).unwrap();
    assert!((theta.data()[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    assert!((adam.m[0].data()[0] - 0.1).abs() < 1e-15);
    assert!((adam.v[0].data()[0] - 0.001).abs() < 1e-15);
}

#[test]
fn clip_examples() {
    let mut g = [6.0f64, 8.0];
    let r = clip_gradients(&mut [&mut g[..]], 5.0).unwrap();
    assert_eq!(g, [3.0, 4.0]);
    assert_eq!(r.norm, 10.0);
    let mut g = [3.0f64, 4.0];
    clip_gradients(&mut [&mut g[..]], 5.0).unwrap();
    assert_eq!(g, [3.0, 4.0]);
    let mut g = [f64::NAN];
    assert!(matches!(clip_gradients(&mut [&mut g[..]], 5.0), Err(Error::Numeric(_))));
}

#[test]
fn step_resume_matches_uninterrupted() {
    let (vocab, seqs, model) = setup(20, 3);
    let batches: Vec<_> = seqs.chunks(5).map(|c| make_batch(c, None).unwrap()).collect();
    let mut a = Trainer::new(model, config()).unwrap();
    for b in &batches[..3] {
        a.train_step(b).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &a.model, &vocab, Some(&a.config), Some((&a.snapshot(), &a.adam))).unwrap();

    let ck = load_checkpoint(&path).unwrap();
    let mut b = Trainer::restore(ck.model, ck.train.unwrap(), ck.adam.unwrap(), &ck.trainer.unwrap()).unwrap();
    a.train_step(&batches[3]).unwrap();
    b.train_step(&batches[3]).unwrap();
    assert_eq!(a.step, b.step);
    for ((n, x), (_, y)) in a.model.params.tensors().into_iter().zip(b.model.params.tensors()) {
        assert!(x.bit_eq(y), "{n}");
    }
    assert_eq!(a.adam, b.adam);
}

#[test]
fn epoch_resume_matches_uninterrupted() {
    let (vocab, seqs, model) = setup(20, 4);
    let dev = seqs[..6].to_vec();
    let full = train(
        Trainer::new(model.clone(), TrainConfig { max_epochs: 4, ..config() }).unwrap(),
        &vocab,
        &seqs,
        &dev,
        quiet(),
    )
    .unwrap();

    let half = train(
        Trainer::new(model, TrainConfig { max_epochs: 2, ..config() }).unwrap(),
        &vocab,
        &seqs,
        &dev,
        quiet(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let t = &half.last;
    save_checkpoint(&path, &t.model, &vocab, Some(&t.config), Some((&t.snapshot(), &t.adam))).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let cfg = TrainConfig { max_epochs: 4, ..ck.train.unwrap() };
    let resumed = Trainer::restore(ck.model, cfg, ck.adam.unwrap(), &ck.trainer.unwrap()).unwrap();
    let rest = train(resumed, &vocab, &seqs, &dev, quiet()).unwrap();

    assert_eq!(rest.last.step, full.last.step);
    assert_eq!(rest.last.model.params, full.last.model.params);
    assert_eq!(rest.history, full.history[3..]);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (vocab, seqs, model) = setup(15, 5);
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let path = dir.path().join(format!("{tag}.ckpt"));
        let mut log = Vec::new();
        let opts = TrainOptions {
            log: Some(&mut log),
            clock: Clock::Off,
            checkpoint: Some(path.clone()),
            diagnostic: None,
        };
        train(Trainer::new(model.clone(), config()).unwrap(), &vocab, &seqs, &seqs, opts).unwrap();
        (std::fs::read(path).unwrap(), log)
    };
    let (ck_a, log_a) = run("a");
    let (ck_b, log_b) = run("b");
    assert_eq!(ck_a, ck_b);
    assert_eq!(log_a, log_b);
    assert!(!log_a.is_empty());

    let other = train(
        Trainer::new(model.clone(), TrainConfig { seed: 8, ..config() }).unwrap(),
        &vocab,
        &seqs,
        &seqs,
        TrainOptions::default(),
    )
    .unwrap();
    let first = train(Trainer::new(model, config()).unwrap(), &vocab, &seqs, &seqs, TrainOptions::default()).unwrap();
    assert_ne!(other.last.model.params, first.last.model.params);
}

#[test]
fn embeddings_stay_frozen_and_dev_loss_is_repeatable() {
    let (vocab, seqs, model) = setup(15, 6);
    let table = model.embeddings().matrix().clone();
    let out = train(Trainer::new(model, config()).unwrap(), &vocab, &seqs, &seqs, TrainOptions::default()).unwrap();
    assert!(out.last.model.embeddings().matrix().bit_eq(&table));
    assert!(out.last.model.embeddings().matrix().grad().is_none());
    let a = evaluate(&out.best.model, &seqs, 4).unwrap();
    let b = evaluate(&out.best.model, &seqs, 7).unwrap();
    assert_eq!(a.loss_sum.to_bits(), evaluate(&out.best.model, &seqs, 4).unwrap().loss_sum.to_bits());
    assert!((a.loss - b.loss).abs() < 1e-6);
}

#[test]
fn saved_best_accuracy_never_decreases() {
    let (vocab, seqs, model) = setup(20, 7);
    let out = train(
        Trainer::new(model, TrainConfig { max_epochs: 8, ..config() }).unwrap(),
        &vocab,
        &seqs,
        &seqs[..8],
        TrainOptions::default(),
    )
    .unwrap();
    let saved: Vec<f64> = out.history.iter().filter(|r| r.improved).map(|r| r.dev_acc).collect();
    assert!(saved.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(Some(out.best_dev_acc), saved.last().copied());
}

#[test]
fn checkpoint_round_trip_with_optimizer() {
    let (vocab, seqs, model) = setup(10, 8);
    let mut t = Trainer::new(model, config()).unwrap();
    t.train_step(&make_batch(&seqs[..5], None).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.ckpt");
    save_checkpoint(&path, &t.model, &vocab, Some(&t.config), Some((&t.snapshot(), &t.adam))).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    for ((n, x), (_, y)) in ck.model.params.tensors().into_iter().zip(t.model.params.tensors()) {
        assert!(x.bit_eq(y), "{n}");
    }
    assert_eq!(ck.model.embeddings(), t.model.embeddings());
    assert_eq!(ck.model.config.seed, t.model.config.seed);
    assert_eq!(ck.vocab, vocab);
    assert_eq!(ck.trainer.unwrap(), t.snapshot());
    assert_eq!(ck.adam.unwrap(), t.adam);
    assert_eq!(ck.train.unwrap(), t.config);
}

#[test]
fn divergence_writes_diagnostic() {
    let (vocab, seqs, mut model) = setup(10, 9);
    for (_, p) in model.params.tensors_mut() {
        p.data_mut()[0] = f32::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let diag = dir.path().join("diverged.ckpt");
    let opts = TrainOptions {
        diagnostic: Some(diag.clone()),
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, config()).unwrap();
    // Skip the untrained dev pass, which would already reject the NaN scores.
    trainer.best_dev_acc = Some(0.0);
    match train(trainer, &vocab, &seqs, &seqs, opts) {
        Err(Error::NonFiniteLoss { diagnostic, .. }) => {
            assert_eq!(diagnostic.as_deref(), Some(diag.as_path()));
            assert!(load_checkpoint(&diag).is_ok());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
    }
}
