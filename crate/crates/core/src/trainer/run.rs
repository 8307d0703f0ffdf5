use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::diffcore::rng::StreamKey;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, AdversaryTrace, DropCounter, EvalOptions, EvalRecord, LogRecord};
use crate::objectives::anneal_beta;
use crate::scalar::Scalar;
use crate::seqvae::ModelParams;
use crate::textdata::{epoch_batches, load_corpus, SequenceBatch, Vocab};
use crate::trainer::checkpoint::{Checkpoint, TrainCounters};
use crate::trainer::step::{
    lr_schedule, polyak_coefficient, polyak_update, should_stop, train_step, uniform_dropout_mask, MaskSpec,
    StepOutcome,
};
use crate::trainer::{AdversaryMode, TrainConfig};

/// Consecutive skipped steps after which training aborts.
pub const MAX_CONSECUTIVE_SKIPS: u32 = 10;

/// What a call to [`Trainer::advance`] did.
#[derive(Clone, Debug)]
pub enum Event {
    Step(LogRecord),
    /// A step followed by the end of an epoch and its validation.
    EpochEnd {
        step: LogRecord,
        valid: LogRecord,
        eval: EvalRecord,
        improved: bool,
    },
    Finished,
}

/// Training state machine over an encoded corpus.
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams<Tensor<S>>,
    /// Polyak average of `params`; used for every reported metric.
    pub averaged: ModelParams<Tensor<S>>,
    pub counters: TrainCounters,
    pub trace: AdversaryTrace,
    pub drops: DropCounter,
    train: Vec<Vec<usize>>,
    valid: Vec<Vec<usize>>,
    order: Option<(u64, Vec<Vec<usize>>)>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh parameters from the config seed.
    pub fn new(config: TrainConfig, vocab: Vocab, train: Vec<Vec<usize>>, valid: Vec<Vec<usize>>) -> Result<Self> {
        config.validate()?;
        let dims = config.model_dims(vocab.len());
        let params = ModelParams::init(&dims, StreamKey::new(config.seed, "init").seed);
        Self::with_state(config, vocab, params.clone(), params, TrainCounters::default(), train, valid)
    }

    pub fn resume(ckpt: Checkpoint, train: Vec<Vec<usize>>, valid: Vec<Vec<usize>>) -> Result<Self> {
        let mut t = Self::with_state(
            ckpt.config,
            ckpt.vocab,
            ckpt.params.cast(),
            ckpt.averaged.cast(),
            ckpt.counters,
            train,
            valid,
        )?;
        t.trace = ckpt.trace;
        t.drops = ckpt.drops;
        Ok(t)
    }

    fn with_state(
        config: TrainConfig,
        vocab: Vocab,
        params: ModelParams<Tensor<S>>,
        averaged: ModelParams<Tensor<S>>,
        counters: TrainCounters,
        train: Vec<Vec<usize>>,
        valid: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        if valid.is_empty() {
            return Err(Error::InvalidArgument("validation corpus is empty".into()));
        }
        params.check_dims(&config.model_dims(vocab.len()))?;
        Ok(Self {
            config,
            vocab,
            params,
            averaged,
            counters,
            trace: AdversaryTrace::default(),
            drops: DropCounter::default(),
            train,
            valid,
            order: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            averaged: self.averaged.cast(),
            counters: self.counters.clone(),
            trace: self.trace.clone(),
            drops: self.drops.clone(),
        }
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        self.config.warmup_steps.unwrap_or(10 * self.batches_per_epoch())
    }

    pub fn is_finished(&self) -> bool {
        self.counters.stopped || self.counters.epoch >= self.config.epochs as u64
    }

    fn root(&self) -> StreamKey {
        StreamKey::new(self.config.seed, "train")
    }

    fn current_batch(&mut self) -> Result<SequenceBatch> {
        let epoch = self.counters.epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let lengths: Vec<usize> = self.train.iter().map(Vec::len).collect();
            let key = self.root().split_index("epoch", epoch);
            self.order = Some((epoch, epoch_batches(&lengths, self.config.batch_size, self.config.order, key)));
        }
        let (_, order) = self.order.as_ref().expect("order computed above");
        let idx = &order[self.counters.batch_in_epoch as usize];
        let rows: Vec<Vec<usize>> = idx.iter().map(|&i| self.train[i].clone()).collect();
        SequenceBatch::new(&rows)
    }

    /// Validation metrics of the averaged parameters.
    pub fn validate(&self) -> Result<EvalRecord> {
        let opts = EvalOptions {
            batch_size: self.config.batch_size,
            mi_samples: self.config.mi_samples,
            mi_max_sentences: match self.config.mi_sentences {
                0 => usize::MAX,
                n => n,
            },
        };
        evaluate(&self.averaged, &self.valid, &opts, StreamKey::new(self.config.seed, "valid"))
    }

    /// Runs one optimizer step, plus validation when it completes an epoch.
    pub fn advance(&mut self) -> Result<Event> {
        if self.is_finished() {
            return Ok(Event::Finished);
        }
        let batch = self.current_batch()?;
        let cfg = &self.config;
        let c = &self.counters;
        let step_key = self.root().split_index("step", c.step);
        let spec = match cfg.adversary {
            AdversaryMode::Off => MaskSpec::None,
            AdversaryMode::Uniform => MaskSpec::Fixed(uniform_dropout_mask(&batch, cfg.dropout_rate, step_key.split("uniform"))?),
            AdversaryMode::On => MaskSpec::Adversarial {
                rate: cfg.dropout_rate,
                tau: cfg.tau,
                lambda: cfg.lambda,
            },
        };
        let beta = anneal_beta(c.step, self.warmup_steps());
        let lr = lr_schedule(c.epoch, cfg.lr, cfg.lr_decay);
        let outcome = train_step(&mut self.params, &batch, &spec, beta, lr, cfg.clip_norm, step_key.seed)?;
        let c = &mut self.counters;
        let mut rec = LogRecord::new("train").with("step", c.step as f64).with("epoch", c.epoch as f64);
        match outcome {
            StepOutcome::Applied(r) => {
                c.consecutive_skips = 0;
                let rho = polyak_coefficient(self.config.polyak, c.step);
                self.averaged = self.averaged.zip_map(&self.params, |_, a, p| polyak_update(a, p, rho));
                let adv = r.adversary.unwrap_or_default();
                if let Some(a) = r.adversary {
                    self.trace.push(a);
                }
                if let Some(keep) = &r.keep {
                    self.drops.add(&batch, keep)?;
                }
                rec = rec
                    .with("lr", lr)
                    .with("beta", beta)
                    .with("neg_elbo", r.loss.recon + r.loss.kl_latent)
                    .with("recon", r.loss.recon)
                    .with("kl", r.loss.kl_latent)
                    .with("reg", r.loss.reg_score)
                    .with("total", r.loss.total)
                    .with("grad_norm", r.grad_norm)
                    .with("s_l1", adv.score_l1)
                    .with("s_sigma", adv.sigma)
                    .with("adv_grad_norm", adv.grad_norm);
            }
            StepOutcome::Skipped(reason) => {
                c.consecutive_skips += 1;
                log::warn!("step {} skipped: {reason}", c.step);
                rec.kind = "skip".into();
                if c.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::Diverged(format!(
                        "{} consecutive non-finite steps, last at step {}: {reason}",
                        c.consecutive_skips, c.step
                    )));
                }
            }
        }
        c.step += 1;
        c.batch_in_epoch += 1;
        if c.batch_in_epoch < self.batches_per_epoch() {
            return Ok(Event::Step(rec));
        }

        let eval = self.validate()?;
        let adv = if self.trace.is_empty() {
            Default::default()
        } else {
            self.trace.stats(0)?
        };
        self.trace.clear();
        let annealing = self.counters.step < self.warmup_steps();
        let c = &mut self.counters;
        let improved = eval.neg_elbo < c.best_val;
        if improved {
            c.best_val = eval.neg_elbo;
        }
        // the objective still changes while β < 1, so only later
        // validations count towards early stopping
        if !annealing {
            c.val_history.push(eval.neg_elbo);
        }
        let valid = LogRecord::new("valid")
            .with("step", c.step as f64)
            .with("epoch", c.epoch as f64)
            .with("neg_elbo", eval.neg_elbo)
            .with("recon", eval.recon)
            .with("kl", eval.kl_latent)
            .with("ppl", eval.ppl)
            .with("mi", eval.mi)
            .with("s_l1", adv.score_l1)
            .with("s_sigma", adv.sigma)
            .with("adv_grad_norm", adv.grad_norm);
        c.epoch += 1;
        c.batch_in_epoch = 0;
        if should_stop(&c.val_history, self.config.patience) {
            c.stopped = true;
        }
        Ok(Event::EpochEnd {
            step: rec,
            valid,
            eval,
            improved,
        })
    }
}

/// Reads a corpus and encodes it with `vocab`.
pub fn encode_file(vocab: &Vocab, path: &Path) -> Result<Vec<Vec<usize>>> {
    Ok(load_corpus(path)?.iter().map(|s| vocab.encode(s)).collect())
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps: u64,
    pub epochs: u64,
    pub best_val: f64,
    pub last_eval: Option<EvalRecord>,
}

/// Files of a run directory.
pub struct RunPaths {
    pub config: PathBuf,
    pub vocab: PathBuf,
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            config: dir.join("config.cfg"),
            vocab: dir.join("vocab.txt"),
            metrics: dir.join("metrics.log"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

fn data_path<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing data path: data.{what}")))
}

/// Trains from scratch into `dir`: snapshots the config and vocabulary,
/// appends every log record to `metrics.log`, keeps `best.ckpt` (lowest
/// validation `−ELBO`) and `last.ckpt` (end of the latest epoch).
pub fn run_training(config: &TrainConfig, dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let train_path = data_path(&config.train_path, "train")?;
    let valid_path = data_path(&config.valid_path, "valid")?;
    let corpus = load_corpus(train_path)?;
    let vocab = Vocab::build(&corpus, config.min_freq, config.max_vocab)?;
    let train: Vec<Vec<usize>> = corpus.iter().map(|s| vocab.encode(s)).collect();
    let valid = encode_file(&vocab, valid_path)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = RunPaths::new(dir);
    fs::write(&paths.config, config.to_text()).map_err(|e| Error::io(&paths.config, e))?;
    vocab.save(&paths.vocab)?;
    let log = File::create(&paths.metrics).map_err(|e| Error::io(&paths.metrics, e))?;
    let trainer = Trainer::<f32>::new(config.clone(), vocab, train, valid)?;
    drive(trainer, dir, log)
}

/// Continues a run from `last.ckpt` (or any checkpoint) in `dir`,
/// appending to its metrics log.
pub fn resume_training(ckpt_path: &Path, dir: &Path) -> Result<RunSummary> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let train = encode_file(&ckpt.vocab, data_path(&ckpt.config.train_path, "train")?)?;
    let valid = encode_file(&ckpt.vocab, data_path(&ckpt.config.valid_path, "valid")?)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = RunPaths::new(dir);
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.metrics)
        .map_err(|e| Error::io(&paths.metrics, e))?;
    let trainer = Trainer::<f32>::resume(ckpt, train, valid)?;
    drive(trainer, dir, log)
}

fn drive(mut trainer: Trainer<f32>, dir: &Path, mut log: File) -> Result<RunSummary> {
    let paths = RunPaths::new(dir);
    let mut write = |r: &LogRecord| -> Result<()> { writeln!(log, "{r}").map_err(|e| Error::io(&paths.metrics, e)) };
    let mut last_eval = None;
    loop {
        match trainer.advance()? {
            Event::Step(r) => write(&r)?,
            Event::EpochEnd {
                step,
                valid,
                eval,
                improved,
            } => {
                write(&step)?;
                write(&valid)?;
                log::info!(
                    "epoch {} neg_elbo {:.3} kl {:.3} ppl {:.2} mi {:.3}",
                    trainer.counters.epoch,
                    eval.neg_elbo,
                    eval.kl_latent,
                    eval.ppl,
                    eval.mi
                );
                let ckpt = trainer.checkpoint();
                if improved {
                    ckpt.save(&paths.best)?;
                }
                ckpt.save(&paths.last)?;
                last_eval = Some(eval);
            }
            Event::Finished => break,
        }
    }
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        steps: trainer.counters.step,
        epochs: trainer.counters.epoch,
        best_val: trainer.counters.best_val,
        last_eval,
    })
}

/// Directory name of one grid cell.
pub fn grid_cell_name(lr: f64, rate: f64) -> String {
    format!("lr{lr}_R{rate}")
}

/// A directory under `root` named `name`, suffixed `-1`, `-2`, … if taken.
pub fn fresh_dir(root: &Path, name: &str) -> PathBuf {
    let mut p = root.join(name);
    let mut i = 1;
    while p.exists() {
        p = root.join(format!("{name}-{i}"));
        i += 1;
    }
    p
}

/// Trains every `(lr, R)` pair in its own fresh run directory, at most
/// `parallel` at a time. Returns the directories in grid order.
pub fn run_grid(
    base: &TrainConfig,
    lrs: &[f64],
    rates: &[f64],
    root: &Path,
    parallel: usize,
) -> Result<Vec<(PathBuf, Result<RunSummary>)>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut cells = Vec::new();
    for &lr in lrs {
        for &rate in rates {
            let mut cfg = base.clone();
            cfg.lr = lr;
            cfg.dropout_rate = rate;
            cfg.validate()?;
            let dir = fresh_dir(root, &grid_cell_name(lr, rate));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            cells.push((cfg, dir));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, dir)) = cells.get(i) else { break };
                let r = run_training(cfg, dir);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    Ok(cells
        .into_iter()
        .zip(results)
        .map(|((_, dir), r)| (dir, r.expect("every cell ran")))
        .collect())
}
