use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use awd_core::diffcore::rng::StreamKey;
use awd_core::metrics::{evaluate, importance_log_weights, importance_weighted_bound, saliency_report, EvalOptions, LogRecord};
use awd_core::seqvae::{generate, interpolate, DecodeMode, ModelParams};
use awd_core::textdata::{gen_markov_corpus, load_corpus, parse_corpus, write_corpus, MarkovSpec, Sentence, Vocab};
use awd_core::trainer::{fresh_dir, resume_training, run_grid, run_training, AdversaryMode, Checkpoint, TrainConfig};
use awd_core::Tensor32;

use crate::{Adversary, Chain, Command, Mode, ModelArgs, TrainFlags};

pub const RUN_ROOT_ENV: &str = "AWD_RUN_ROOT";

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { flags, out, ckpt } => train(&flags, out, ckpt),
        Command::Eval {
            model,
            data,
            mi_samples,
            iw_samples,
            seed,
        } => eval(&model, data, mi_samples, iw_samples, seed),
        Command::Generate {
            model,
            n,
            mode,
            temperature,
            seed,
            max_len,
        } => generate_cmd(&model, n, mode, temperature, seed, max_len),
        Command::Interpolate {
            model,
            a,
            b,
            steps,
            max_len,
        } => interpolate_cmd(&model, &a, &b, steps, max_len),
        Command::Saliency {
            model,
            data,
            sentence,
            dropout_rate,
        } => saliency(&model, data, sentence, dropout_rate),
        Command::MakeSynthetic {
            out,
            n,
            mode,
            states,
            min_len,
            max_len,
            seed,
        } => make_synthetic(&out, n, mode, states, min_len, max_len, seed),
        Command::Grid {
            flags,
            out,
            lrs,
            rates,
            parallel,
        } => grid(&flags, out, &lrs, &rates, parallel),
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Config file, then `--set` pairs, then dedicated flags.
fn build_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let mut set = |key: &str, v: Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    set("data.train", flags.train.as_ref().map(|p| p.display().to_string()))?;
    set("data.valid", flags.valid.as_ref().map(|p| p.display().to_string()))?;
    set("seed", flags.seed.map(|v| v.to_string()))?;
    set("dropout_rate", flags.dropout_rate.map(|v| v.to_string()))?;
    set("lambda", flags.lambda.map(|v| v.to_string()))?;
    set("tau", flags.tau.map(|v| v.to_string()))?;
    set("optim.lr", flags.lr.map(|v| v.to_string()))?;
    set("optim.epochs", flags.epochs.map(|v| v.to_string()))?;
    set("optim.batch_size", flags.batch_size.map(|v| v.to_string()))?;
    set(
        "adversary",
        flags.adversary.map(|a| {
            match a {
                Adversary::On => AdversaryMode::On,
                Adversary::Uniform => AdversaryMode::Uniform,
                Adversary::Off => AdversaryMode::Off,
            }
            .as_str()
            .to_owned()
        }),
    )?;
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint path from `--ckpt`: an existing file, or `best`/`last` in
/// the run directory (`--out`, else `$AWD_RUN_ROOT`).
fn resolve_ckpt(model: &ModelArgs) -> Result<PathBuf> {
    let direct = PathBuf::from(&model.ckpt);
    if direct.is_file() {
        return Ok(direct);
    }
    let run = model.out.clone().unwrap_or_else(run_root);
    let p = match model.ckpt.as_str() {
        "best" | "last" => run.join(format!("{}.ckpt", model.ckpt)),
        _ => bail!("checkpoint '{}' not found", model.ckpt),
    };
    if !p.is_file() {
        bail!("checkpoint '{}' not found at {}", model.ckpt, p.display());
    }
    Ok(p)
}

struct Loaded {
    path: PathBuf,
    ckpt: Checkpoint,
}

impl Loaded {
    fn open(model: &ModelArgs) -> Result<Self> {
        let path = resolve_ckpt(model)?;
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(Self { path, ckpt })
    }

    /// Polyak-averaged weights; every reported output uses them.
    fn params(&self) -> &ModelParams<Tensor32> {
        &self.ckpt.averaged
    }

    fn vocab(&self) -> &Vocab {
        &self.ckpt.vocab
    }

    fn text(&self, ids: &[usize]) -> String {
        self.vocab().decode(ids).join(" ")
    }

    /// Writes `lines` under a header naming the checkpoint and prints them.
    fn emit(&self, model: &ModelArgs, name: &str, header: &str, lines: &[String]) -> Result<()> {
        let dir = match &model.out {
            Some(d) => d.clone(),
            None => self.path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let stem = self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
        let file = dir.join(format!("{name}-{stem}.txt"));
        let mut body = format!("# ckpt={} {header}\n", self.path.display());
        for l in lines {
            body.push_str(l);
            body.push('\n');
        }
        fs::write(&file, body).with_context(|| format!("writing {}", file.display()))?;
        for l in lines {
            println!("{l}");
        }
        log::info!("wrote {}", file.display());
        Ok(())
    }
}

fn train(flags: &TrainFlags, out: Option<PathBuf>, ckpt: Option<String>) -> Result<()> {
    let summary = match ckpt {
        Some(c) => {
            let model = ModelArgs { ckpt: c, out: out.clone() };
            let path = resolve_ckpt(&model)?;
            let dir = out.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
            resume_training(&path, &dir)?
        }
        None => {
            let cfg = build_config(flags)?;
            let dir = match out {
                Some(d) => d,
                None => fresh_dir(&run_root(), &format!("run-s{}", cfg.seed)),
            };
            run_training(&cfg, &dir)?
        }
    };
    println!(
        "{}",
        LogRecord::new("done")
            .with("steps", summary.steps as f64)
            .with("epochs", summary.epochs as f64)
            .with("best_neg_elbo", summary.best_val)
    );
    println!("{}", summary.dir.display());
    Ok(())
}

fn eval(model: &ModelArgs, data: Option<PathBuf>, mi_samples: usize, iw_samples: usize, seed: u64) -> Result<()> {
    let m = Loaded::open(model)?;
    let data = match data {
        Some(d) => d,
        None => m.ckpt.config.valid_path.clone().context("no --data given and the run has no validation path")?,
    };
    let seqs: Vec<Vec<usize>> = load_corpus(&data)?.iter().map(|s| m.vocab().encode(s)).collect();
    let opts = EvalOptions {
        batch_size: m.ckpt.config.batch_size,
        mi_samples,
        ..EvalOptions::default()
    };
    let key = StreamKey::new(seed, "eval");
    let r = evaluate(m.params(), &seqs, &opts, key)?;
    let mut rec = LogRecord::new("eval")
        .with("neg_elbo", r.neg_elbo)
        .with("recon", r.recon)
        .with("kl", r.kl_latent)
        .with("ppl", r.ppl)
        .with("mi", r.mi)
        .with("tokens", r.token_count as f64)
        .with("sentences", r.sentence_count as f64);
    if iw_samples > 0 {
        let mut total = 0.0;
        for (i, s) in seqs.iter().enumerate() {
            let lw = importance_log_weights(m.params(), s, iw_samples, key.split_index("iw", i as u64))?;
            total -= importance_weighted_bound(&lw);
        }
        let n = seqs.len() as f64;
        let tokens = r.token_count as f64;
        rec = rec.with("iw_neg_bound", total / n).with("iw_ppl", (total / tokens).exp());
    }
    m.emit(model, "eval", &format!("data={}", data.display()), &[rec.to_string()])
}

fn generate_cmd(model: &ModelArgs, n: usize, mode: Mode, temperature: f64, seed: u64, max_len: usize) -> Result<()> {
    let m = Loaded::open(model)?;
    let latent = m.ckpt.config.latent;
    let key = StreamKey::new(seed, "generate");
    let z: Vec<Vec<f64>> = (0..n as u64)
        .map(|i| key.split_index("z", i).normals(latent))
        .collect();
    let mode = match mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::Sample => DecodeMode::Sample { temperature },
    };
    let out = generate(m.params(), &z, max_len, mode, key.split("decode"))?;
    let lines: Vec<String> = out.iter().map(|s| m.text(s)).collect();
    let header = format!("seed={seed} mode={mode:?}");
    m.emit(model, "generate", &header, &lines)
}

/// A sentence given directly or as the first non-empty line of a file.
fn sentence_arg(s: &str) -> Result<Sentence> {
    let p = Path::new(s);
    let parsed = if p.is_file() {
        load_corpus(p)?.into_iter().next()
    } else {
        parse_corpus(s).into_iter().next()
    };
    parsed.with_context(|| format!("no sentence in '{s}'"))
}

fn interpolate_cmd(model: &ModelArgs, a: &str, b: &str, steps: usize, max_len: usize) -> Result<()> {
    let m = Loaded::open(model)?;
    let ea = m.vocab().encode(&sentence_arg(a)?);
    let eb = m.vocab().encode(&sentence_arg(b)?);
    let out = interpolate(m.params(), &ea, &eb, steps, max_len)?;
    let lines: Vec<String> = out.iter().map(|s| m.text(s)).collect();
    m.emit(model, "interpolate", &format!("steps={steps}"), &lines)
}

fn saliency(model: &ModelArgs, data: Option<PathBuf>, sentence: Option<String>, rate: Option<f64>) -> Result<()> {
    let m = Loaded::open(model)?;
    let sents = match (data, sentence) {
        (Some(d), _) => load_corpus(d)?,
        (None, Some(s)) => parse_corpus(&s),
        (None, None) => bail!("saliency needs --data or --sentence"),
    };
    let rate = rate.unwrap_or(m.ckpt.config.dropout_rate);
    let mut lines = Vec::with_capacity(sents.len());
    for s in &sents {
        let r = saliency_report(m.params(), &m.vocab().encode(s), rate)?;
        lines.push(r.format(|id| m.vocab().token(id).to_owned()));
    }
    m.emit(model, "saliency", &format!("dropout_rate={rate}"), &lines)
}

fn make_synthetic(out: &Path, n: usize, mode: Chain, states: usize, min_len: usize, max_len: usize, seed: u64) -> Result<()> {
    let spec = match mode {
        Chain::Planted => MarkovSpec::planted(min_len, max_len),
        Chain::Uniform => MarkovSpec::uniform(states, min_len, max_len),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let held_out = (n / 10).max(1);
    let key = StreamKey::new(seed, "synthetic");
    for (name, count) in [("train", n), ("valid", held_out), ("test", held_out)] {
        let corpus = gen_markov_corpus(&spec, count, key.split(name).seed)?;
        let path = out.join(format!("{name}.txt"));
        write_corpus(&path, &corpus)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn grid(flags: &TrainFlags, out: Option<PathBuf>, lrs: &[f64], rates: &[f64], parallel: usize) -> Result<()> {
    let cfg = build_config(flags)?;
    let root = match out {
        Some(d) => d,
        None => fresh_dir(&run_root(), "grid"),
    };
    let cells = run_grid(&cfg, lrs, rates, &root, parallel)?;
    let mut failed = 0;
    for (dir, r) in &cells {
        match r {
            Ok(s) => println!("{}\tbest_neg_elbo={:?}", dir.display(), s.best_val),
            Err(e) => {
                failed += 1;
                println!("{}\tfailed: {e}", dir.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} grid runs failed", cells.len());
    }
    Ok(())
}
