mod common;

use std::fs;
use std::path::Path;

use awd_core::diffcore::rng::StreamKey;
use awd_core::seqvae::{Group, ModelParams};
use awd_core::textdata::{gen_markov_corpus, write_corpus, MarkovSpec, SequenceBatch, Vocab};
use awd_core::trainer::{
    lr_schedule, polyak_coefficient, polyak_update, run_grid, run_training, should_stop, train_step,
    uniform_dropout_mask, AdversaryMode, Checkpoint, Event, MaskSpec, StepOutcome, TrainConfig, Trainer,
    CHECKPOINT_VERSION,
};
use awd_core::{Error, Tensor32, Tensor64};
use common::{seq, tiny_batch, tiny_params};

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.emb = 8;
    c.enc_hidden = 8;
    c.dec_hidden = 8;
    c.latent = 3;
    c.batch_size = 4;
    c.lr = 0.5;
    c.epochs = 3;
    c
}

fn corpus_ids(n: usize, seed: u64) -> (Vocab, Vec<Vec<usize>>) {
    let sents = gen_markov_corpus(&MarkovSpec::uniform(6, 2, 6), n, seed).unwrap();
    let vocab = Vocab::build(&sents, 1, 100).unwrap();
    let ids = sents.iter().map(|s| vocab.encode(s)).collect();
    (vocab, ids)
}

fn small_trainer(cfg: TrainConfig) -> Trainer<f32> {
    let (vocab, train) = corpus_ids(40, 3);
    let valid = corpus_ids(12, 4).1;
    Trainer::new(cfg, vocab, train, valid).unwrap()
}

fn write_data(dir: &Path, vocab_words: usize, n_train: usize, n_valid: usize) -> TrainConfig {
    let spec = MarkovSpec::uniform(vocab_words, 3, 8);
    let train = dir.join("train.txt");
    let valid = dir.join("valid.txt");
    write_corpus(&train, &gen_markov_corpus(&spec, n_train, 1).unwrap()).unwrap();
    write_corpus(&valid, &gen_markov_corpus(&spec, n_valid, 2).unwrap()).unwrap();
    let mut c = small_config();
    c.train_path = Some(train);
    c.valid_path = Some(valid);
    c
}

// config

#[test]
fn empty_config_gives_defaults() {
    let c = TrainConfig::parse("").unwrap();
    assert_eq!(c, TrainConfig::default());
    assert_eq!(c.dropout_rate, 0.3);
    assert_eq!(c.lambda, 1.0);
    assert_eq!(c.tau, 1.0);
    assert_eq!(c.polyak, 0.9995);
    assert_eq!(c.lr_decay, 0.96);
    assert_eq!(c.adversary, AdversaryMode::On);
}

#[test]
fn config_range_and_key_errors() {
    let e = TrainConfig::parse("dropout_rate = 1.5").unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert!(e.to_string().contains("dropout_rate"), "{e}");
    assert!(matches!(TrainConfig::parse("no.such.key = 1"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("tau = 0"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("lambda = -1"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("optim.lr = fast"), Err(Error::Config(_))));
    let e = TrainConfig::parse("seed = 3\nbogus").unwrap_err();
    assert!(e.to_string().contains("line 2"), "{e}");
}

#[test]
fn later_values_override_file_values() {
    let mut c = TrainConfig::parse("# comment\ndropout_rate = 0.3\nmodel.latent = 7\n").unwrap();
    assert_eq!(c.dropout_rate, 0.3);
    c.set("dropout_rate", "0.4").unwrap();
    assert_eq!(c.dropout_rate, 0.4);
    assert_eq!(c.latent, 7);
    c.set("adversary", "uniform").unwrap();
    assert_eq!(c.adversary, AdversaryMode::Uniform);
}

#[test]
fn config_text_round_trips() {
    let mut c = small_config();
    c.train_path = Some("data/train.txt".into());
    c.warmup_steps = Some(17);
    c.adv_hidden = Some(5);
    c.adversary = AdversaryMode::Off;
    c.tie_embeddings = true;
    assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
}

// schedules

#[test]
fn polyak_examples() {
    let avg = Tensor64::zeros(&[2]);
    let p = Tensor64::ones(&[2]);
    assert_eq!(polyak_update(&avg, &p, 0.0).data(), p.data());
    assert_eq!(polyak_update(&avg, &p, 1.0).data(), avg.data());
    for v in polyak_update(&avg, &p, 0.9995).data() {
        assert!((v - 0.0005).abs() < 1e-12);
    }
    assert_eq!(polyak_coefficient(0.9995, 0), 0.1);
    assert_eq!(polyak_coefficient(0.9995, 1_000_000), 0.9995);
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_schedule(0, 0.7, 0.96), 0.7);
    assert!((lr_schedule(2, 1.0, 0.96) - 0.9216).abs() < 1e-12);
    assert_eq!(lr_schedule(9, 0.1, 1.0), 0.1);
}

#[test]
fn early_stopping_examples() {
    assert!(!should_stop(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5], 2));
    assert!(should_stop(&[1.0; 6], 5));
    assert!(!should_stop(&[1.0; 5], 5));
    assert!(!should_stop(&[2.0, 2.0, 2.0, 2.0, 1.0], 3));
    // improvements below 1e-4 do not count
    assert!(should_stop(&[1.0, 0.99995, 0.99991, 0.99992], 3));
    assert!(!should_stop(&[], 1));
}

// uniform mask

#[test]
fn uniform_mask_zero_rate_is_identity() {
    let b = tiny_batch();
    let m: Tensor64 = uniform_dropout_mask(&b, 0.0, StreamKey::new(1, "m")).unwrap();
    assert!(m.data().iter().all(|&v| v == 1.0));
    assert!(uniform_dropout_mask::<f64>(&b, 1.5, StreamKey::new(1, "m")).is_err());
}

#[test]
fn uniform_mask_drops_exactly_k_eligible() {
    let b = SequenceBatch::new(&[seq(&[5, 6, 7, 5, 6, 7, 5]), seq(&[7, 5]), seq(&[6]), seq(&[5, 5, 5, 5])]).unwrap();
    let cols = b.input_width();
    let elig = b.eligible();
    for rate in [0.1, 0.3, 0.5, 1.0] {
        for s in 0..20 {
            let m: Tensor64 = uniform_dropout_mask(&b, rate, StreamKey::new(s, "m")).unwrap();
            for (r, &t) in b.eligible_counts().iter().enumerate() {
                let row = &m.data()[r * cols..(r + 1) * cols];
                let drops = row.iter().filter(|&&v| v == 0.0).count();
                assert_eq!(drops, awd_core::adversary::compute_k(rate, t));
                for (i, &v) in row.iter().enumerate() {
                    assert!(v == 1.0 || elig[r * cols + i]);
                }
            }
        }
    }
}

#[test]
fn uniform_mask_marginals_are_k_over_t() {
    let b = SequenceBatch::new(&[seq(&[5, 6, 7, 5, 6, 7, 5, 6, 7])]).unwrap();
    let t = b.eligible_counts()[0];
    let rate = 0.3;
    let k = awd_core::adversary::compute_k(rate, t);
    let n = 10_000;
    let mut counts = vec![0usize; t];
    for i in 0..n {
        let m: Tensor64 = uniform_dropout_mask(&b, rate, StreamKey::new(9, "m").split_index("s", i)).unwrap();
        for (j, c) in counts.iter_mut().enumerate() {
            if m.data()[j] == 0.0 {
                *c += 1;
            }
        }
    }
    let p = k as f64 / t as f64;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - p).abs() < 3.0 * sd, "{c} vs {p}");
    }
}

// steps

fn losses(spec: &MaskSpec<f64>, seed: u64) -> (f64, ModelParams<Tensor64>) {
    let mut p = tiny_params(4);
    let r = train_step(&mut p, &tiny_batch(), spec, 0.7, 0.1, 5.0, seed).unwrap();
    match r {
        StepOutcome::Applied(r) => (r.loss.total, p),
        StepOutcome::Skipped(s) => panic!("{s}"),
    }
}

#[test]
fn zero_rate_matches_plain_step_exactly() {
    let (plain, p_plain) = losses(&MaskSpec::None, 11);
    let (adv, p_adv) = losses(&MaskSpec::Adversarial { rate: 0.0, tau: 1.0, lambda: 1.0 }, 11);
    let b = tiny_batch();
    let ones = Tensor64::ones(&[b.rows(), b.input_width()]);
    let (fixed, p_fixed) = losses(&MaskSpec::Fixed(ones), 11);
    assert_eq!(plain.to_bits(), adv.to_bits());
    assert_eq!(plain.to_bits(), fixed.to_bits());
    for ((a, b), c) in p_plain.values().iter().zip(p_adv.values()).zip(p_fixed.values()) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }
}

#[test]
fn overfits_one_batch_with_frozen_adversary() {
    let spec = MaskSpec::Adversarial { rate: 0.3, tau: 1.0, lambda: 1.0 };
    let mut p = ModelParams::<Tensor64>::init(&common::tiny_dims(), 5);
    let frozen = p.adversary.clone();
    let b = tiny_batch();
    let mut totals = Vec::new();
    for _ in 0..201 {
        match train_step(&mut p, &b, &spec, 1.0, 0.05, 5.0, 42).unwrap() {
            StepOutcome::Applied(r) => totals.push(r.loss.total),
            StepOutcome::Skipped(s) => panic!("{s}"),
        }
        p.adversary = frozen.clone();
    }
    let down = totals.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down as f64 >= 0.95 * 200.0, "{down}/200 decreasing");
}

#[test]
fn post_clip_norm_is_bounded() {
    let spec = MaskSpec::Adversarial { rate: 0.5, tau: 0.5, lambda: 1.0 };
    let mut p = tiny_params(8);
    let b = tiny_batch();
    let mut clipped = 0;
    for s in 0..30 {
        match train_step(&mut p, &b, &spec, 1.0, 0.5, 1.0, s).unwrap() {
            StepOutcome::Applied(r) => {
                assert!(r.grad_norm * r.clip_scale <= 1.0 + 1e-9);
                assert!(r.clip_scale <= 1.0);
                if r.clip_scale < 1.0 {
                    clipped += 1;
                }
            }
            StepOutcome::Skipped(s) => panic!("{s}"),
        }
    }
    assert!(clipped > 0, "clip never engaged");
}

#[test]
fn adversary_receives_updates_only_when_enabled() {
    let b = tiny_batch();
    let before = tiny_params(4);
    for (spec, moves) in [
        (MaskSpec::Adversarial { rate: 0.5, tau: 1.0, lambda: 1.0 }, true),
        (MaskSpec::None, false),
    ] {
        let mut p = before.clone();
        train_step(&mut p, &b, &spec, 1.0, 0.1, 5.0, 3).unwrap();
        let changed = p
            .entries()
            .iter()
            .zip(before.entries())
            .filter(|((n, _), _)| ModelParams::<Tensor64>::group_of(n) == Group::Adversary)
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert_eq!(changed, moves);
    }
}

#[test]
fn non_finite_parameters_skip_and_then_abort() {
    let mut p = tiny_params(2);
    p.decoder.out_b = p.decoder.out_b.map(|_| f64::NAN);
    let r = train_step(&mut p, &tiny_batch(), &MaskSpec::None, 1.0, 0.1, 5.0, 1).unwrap();
    assert!(matches!(r, StepOutcome::Skipped(_)));

    let t = small_trainer(small_config());
    let mut ckpt = t.checkpoint();
    ckpt.params.decoder.out_b = ckpt.params.decoder.out_b.map(|_| f32::NAN);
    let (_, train) = corpus_ids(40, 3);
    let valid = corpus_ids(12, 4).1;
    let mut t = Trainer::<f32>::resume(ckpt, train, valid).unwrap();
    let mut skips = 0;
    let err = loop {
        match t.advance() {
            Ok(Event::Step(r)) => {
                assert_eq!(r.kind, "skip");
                skips += 1;
            }
            Ok(e) => panic!("unexpected {e:?}"),
            Err(e) => break e,
        }
    };
    assert_eq!(skips, 9);
    assert!(matches!(err, Error::Diverged(_)), "{err}");
}

// trainer loop and checkpoints

fn collect(t: &mut Trainer<f32>, n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for _ in 0..n {
        match t.advance().unwrap() {
            Event::Step(r) => out.push(r.to_string()),
            Event::EpochEnd { step, valid, .. } => {
                out.push(step.to_string());
                out.push(valid.to_string());
            }
            Event::Finished => break,
        }
    }
    out
}

#[test]
fn averaging_is_a_read_only_shadow() {
    let mut a = small_trainer(small_config());
    let mut b = small_trainer(small_config());
    for _ in 0..12 {
        a.advance().unwrap();
        b.advance().unwrap();
        b.validate().unwrap();
    }
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, a.averaged);
}

#[test]
fn replay_from_checkpoint_is_identical() {
    let mut cfg = small_config();
    cfg.epochs = 20;
    let mut t = small_trainer(cfg);
    collect(&mut t, 7);
    let ckpt = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
    let (_, train) = corpus_ids(40, 3);
    let valid = corpus_ids(12, 4).1;
    let mut r1 = Trainer::<f32>::resume(ckpt.clone(), train.clone(), valid.clone()).unwrap();
    let mut r2 = Trainer::<f32>::resume(ckpt, train, valid).unwrap();
    let l1 = collect(&mut r1, 100);
    let l2 = collect(&mut r2, 100);
    assert!(l1.len() >= 100);
    assert_eq!(l1, l2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut full = small_trainer(small_config());
    let head = collect(&mut full, 6);
    let mut whole = head.clone();
    whole.extend(collect(&mut full, 10));

    let mut part = small_trainer(small_config());
    assert_eq!(collect(&mut part, 6), head);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    part.checkpoint().save(&path).unwrap();
    let (_, train) = corpus_ids(40, 3);
    let valid = corpus_ids(12, 4).1;
    let mut resumed = Trainer::<f32>::resume(Checkpoint::load(&path).unwrap(), train, valid).unwrap();
    let mut joined = head;
    joined.extend(collect(&mut resumed, 10));
    // the epoch boundary falls inside the window, so validation lines are compared too
    assert!(joined.iter().any(|l| l.starts_with("valid ")));
    assert_eq!(joined, whole);
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.averaged, full.averaged);
    assert_eq!(resumed.counters, full.counters);
    assert_eq!(resumed.drops, full.drops);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut t = small_trainer(small_config());
    collect(&mut t, 3);
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"AWDV");
    assert_eq!(bytes[4], CHECKPOINT_VERSION);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

    let mut bad = bytes.clone();
    bad[4] = CHECKPOINT_VERSION + 1;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::VersionMismatch { found, expected }) if found == CHECKPOINT_VERSION + 1 && expected == CHECKPOINT_VERSION
    ));

    for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn mismatched_hidden_size_names_the_tensor() {
    let t = small_trainer(small_config());
    let mut ck = t.checkpoint();
    ck.config.dec_hidden = 5;
    match Checkpoint::from_bytes(&ck.to_bytes()) {
        Err(Error::TensorShape { name, .. }) => assert!(name.starts_with("dec."), "{name}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn f32_checkpoint_params_survive_exactly() {
    let t = small_trainer(small_config());
    let ck = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
    let a: Vec<&Tensor32> = t.params.values();
    let b: Vec<&Tensor32> = ck.params.values();
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn tiny_synthetic_run_writes_a_full_run_directory() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = write_data(data.path(), 15, 2000, 200);
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.emb = 16;
    cfg.enc_hidden = 16;
    cfg.dec_hidden = 16;
    cfg.latent = 4;
    cfg.lr = 1.0;
    let out = data.path().join("run");
    let summary = run_training(&cfg, &out).unwrap();
    assert_eq!(summary.epochs, 5);
    assert_eq!(Vocab::load(out.join("vocab.txt")).unwrap().len(), 20);
    assert_eq!(TrainConfig::load(out.join("config.cfg")).unwrap(), cfg);
    let log = fs::read_to_string(out.join("metrics.log")).unwrap();
    let valids: Vec<_> = log.lines().filter(|l| l.starts_with("valid ")).collect();
    assert!(valids.len() >= 5, "{} validation records", valids.len());
    assert_eq!(log.lines().filter(|l| l.starts_with("train ")).count() as u64, summary.steps);
    let best = Checkpoint::load(out.join("best.ckpt")).unwrap();
    let last = Checkpoint::load(out.join("last.ckpt")).unwrap();
    assert_eq!(last.counters.epoch, 5);
    assert_eq!(best.counters.best_val, summary.best_val);
    let e = summary.last_eval.unwrap();
    assert!(e.ppl.is_finite() && e.ppl < 20.0, "ppl {}", e.ppl);

    let again = data.path().join("run2");
    run_training(&cfg, &again).unwrap();
    assert_eq!(fs::read_to_string(again.join("metrics.log")).unwrap(), log);
}

#[test]
fn missing_data_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_training(&small_config(), dir.path()), Err(Error::Config(_))));
    let mut cfg = small_config();
    cfg.train_path = Some(dir.path().join("nope.txt"));
    cfg.valid_path = Some(dir.path().join("nope.txt"));
    assert!(matches!(run_training(&cfg, &dir.path().join("r")), Err(Error::Io { .. })));
}

#[test]
fn grid_emits_one_fresh_directory_per_cell() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = write_data(data.path(), 5, 24, 8);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    let root = data.path().join("grid");
    let lrs = [0.0001, 0.001, 0.1, 1.0];
    let rates = [0.0, 0.1, 0.3, 0.5];
    let cells = run_grid(&cfg, &lrs, &rates, &root, 2).unwrap();
    assert_eq!(cells.len(), 16);
    for (dir, r) in &cells {
        r.as_ref().unwrap();
        assert!(dir.join("best.ckpt").exists());
    }
    assert_eq!(fs::read_dir(&root).unwrap().count(), 16);
    let again = run_grid(&cfg, &lrs[..1], &rates[..1], &root, 1).unwrap();
    assert_eq!(fs::read_dir(&root).unwrap().count(), 17);
    assert_ne!(again[0].0, cells[0].0);
}
