use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::seqvae::ModelDims;
use crate::textdata::OrderPolicy;

/// How decoder inputs are masked during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdversaryMode {
    /// Learned adversarial dropout.
    #[default]
    On,
    /// Exactly `K` uniformly chosen drops per sentence.
    Uniform,
    /// No dropout (plain VAE).
    Off,
}

impl FromStr for AdversaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Self::On),
            "uniform" => Ok(Self::Uniform),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("adversary must be on, uniform or off, got '{s}'"))),
        }
    }
}

impl AdversaryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::On => "on",
            Self::Uniform => "uniform",
            Self::Off => "off",
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub seed: u64,
    pub adversary: AdversaryMode,
    /// Fraction `R` of droppable positions masked per sentence.
    pub dropout_rate: f64,
    /// Weight of the score regularizer.
    pub lambda: f64,
    /// Temperature of the relaxed top-K backward pass.
    pub tau: f64,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub clip_norm: f64,
    /// KL warm-up length in steps; `None` means ten epochs.
    pub warmup_steps: Option<u64>,
    pub polyak: f64,
    pub patience: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub order: OrderPolicy,
    pub emb: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// `None` means the encoder's hidden size.
    pub adv_hidden: Option<usize>,
    pub latent: usize,
    pub tie_embeddings: bool,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub mi_samples: usize,
    /// Sentences entering the MI estimate; 0 means the whole split.
    pub mi_sentences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            valid_path: None,
            seed: 1,
            adversary: AdversaryMode::On,
            dropout_rate: 0.3,
            lambda: 1.0,
            tau: 1.0,
            lr: 1.0,
            lr_decay: 0.96,
            clip_norm: 5.0,
            warmup_steps: None,
            polyak: 0.9995,
            patience: 5,
            epochs: 30,
            batch_size: 32,
            order: OrderPolicy::Shuffled,
            emb: 64,
            enc_hidden: 128,
            dec_hidden: 128,
            adv_hidden: None,
            latent: 32,
            tie_embeddings: false,
            min_freq: 1,
            max_vocab: 20000,
            mi_samples: 1,
            mi_sentences: 0,
        }
    }
}

/// Keys accepted in config files, with their defaults and meaning.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("data.train", "-", "training corpus, one sentence per line"),
    ("data.valid", "-", "validation corpus"),
    ("seed", "1", "root seed for every random stream"),
    ("adversary", "on", "on | uniform | off"),
    ("dropout_rate", "0.3", "fraction R of droppable tokens masked"),
    ("lambda", "1.0", "score regularizer weight"),
    ("tau", "1.0", "relaxed top-K temperature"),
    ("optim.lr", "1.0", "SGD learning rate"),
    ("optim.lr_decay", "0.96", "learning-rate decay per epoch"),
    ("optim.clip_norm", "5.0", "global gradient-norm clip"),
    ("optim.warmup_steps", "auto", "KL annealing steps (auto = 10 epochs)"),
    ("optim.polyak", "0.9995", "parameter averaging coefficient"),
    ("optim.patience", "5", "validations without improvement before stopping"),
    ("optim.epochs", "30", "maximum epochs"),
    ("optim.batch_size", "32", "sentences per batch"),
    ("optim.order", "shuffled", "sequential | shuffled | bucketed"),
    ("model.emb", "64", "embedding size"),
    ("model.enc_hidden", "128", "encoder LSTM size"),
    ("model.dec_hidden", "128", "decoder LSTM size"),
    ("model.adv_hidden", "auto", "adversary LSTM size (auto = encoder size)"),
    ("model.latent", "32", "latent dimension"),
    ("model.tie_embeddings", "false", "share encoder and decoder embeddings"),
    ("vocab.min_freq", "1", "minimum token count"),
    ("vocab.max_size", "20000", "maximum vocabulary size"),
    ("eval.mi_samples", "1", "z samples per sentence for MI (0 disables)"),
    ("eval.mi_sentences", "0", "sentences used for MI (0 = all)"),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

impl TrainConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.train" => self.train_path = Some(PathBuf::from(value)),
            "data.valid" => self.valid_path = Some(PathBuf::from(value)),
            "seed" => self.seed = parse_num(key, value)?,
            "adversary" => self.adversary = value.parse()?,
            "dropout_rate" => self.dropout_rate = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "optim.lr" => self.lr = parse_num(key, value)?,
            "optim.lr_decay" => self.lr_decay = parse_num(key, value)?,
            "optim.clip_norm" => self.clip_norm = parse_num(key, value)?,
            "optim.warmup_steps" => self.warmup_steps = auto(key, value)?,
            "optim.polyak" => self.polyak = parse_num(key, value)?,
            "optim.patience" => self.patience = parse_num(key, value)?,
            "optim.epochs" => self.epochs = parse_num(key, value)?,
            "optim.batch_size" => self.batch_size = parse_num(key, value)?,
            "optim.order" => {
                self.order = match value {
                    "sequential" => OrderPolicy::Sequential,
                    "shuffled" => OrderPolicy::Shuffled,
                    "bucketed" => OrderPolicy::Bucketed,
                    _ => return Err(Error::Config(format!("{key}: unknown order '{value}'"))),
                }
            }
            "model.emb" => self.emb = parse_num(key, value)?,
            "model.enc_hidden" => self.enc_hidden = parse_num(key, value)?,
            "model.dec_hidden" => self.dec_hidden = parse_num(key, value)?,
            "model.adv_hidden" => self.adv_hidden = auto(key, value)?,
            "model.latent" => self.latent = parse_num(key, value)?,
            "model.tie_embeddings" => self.tie_embeddings = parse_bool(key, value)?,
            "vocab.min_freq" => self.min_freq = parse_num(key, value)?,
            "vocab.max_size" => self.max_vocab = parse_num(key, value)?,
            "eval.mi_samples" => self.mi_samples = parse_num(key, value)?,
            "eval.mi_sentences" => self.mi_sentences = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the
    /// defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Config(what)) };
        range(
            (0.0..=1.0).contains(&self.dropout_rate),
            format!("dropout_rate {} outside [0, 1]", self.dropout_rate),
        )?;
        range(self.lambda >= 0.0, format!("lambda {} must be non-negative", self.lambda))?;
        range(self.tau > 0.0, format!("tau {} must be positive", self.tau))?;
        range(self.lr > 0.0 && self.lr.is_finite(), format!("lr {} must be positive", self.lr))?;
        range(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            format!("lr_decay {} outside (0, 1]", self.lr_decay),
        )?;
        range(self.clip_norm > 0.0, format!("clip_norm {} must be positive", self.clip_norm))?;
        range((0.0..=1.0).contains(&self.polyak), format!("polyak {} outside [0, 1]", self.polyak))?;
        range(self.batch_size > 0, "batch_size must be positive".into())?;
        range(self.epochs > 0, "epochs must be positive".into())?;
        range(self.patience > 0, "patience must be positive".into())?;
        for (name, v) in [
            ("emb", self.emb),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("latent", self.latent),
            ("adv_hidden", self.adv_hidden.unwrap_or(1)),
        ] {
            range(v > 0, format!("model.{name} must be positive"))?;
        }
        range(self.max_vocab > 0, "vocab.max_size must be positive".into())?;
        Ok(())
    }

    /// Model sizes for a vocabulary of `vocab` entries.
    pub fn model_dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            emb: self.emb,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            adv_hidden: self.adv_hidden.unwrap_or(self.enc_hidden),
            latent: self.latent,
            tie_embeddings: self.tie_embeddings,
        }
    }

    /// Config-file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.train_path {
            line("data.train", p.display().to_string());
        }
        if let Some(p) = &self.valid_path {
            line("data.valid", p.display().to_string());
        }
        line("seed", self.seed.to_string());
        line("adversary", self.adversary.as_str().into());
        line("dropout_rate", format!("{:?}", self.dropout_rate));
        line("lambda", format!("{:?}", self.lambda));
        line("tau", format!("{:?}", self.tau));
        line("optim.lr", format!("{:?}", self.lr));
        line("optim.lr_decay", format!("{:?}", self.lr_decay));
        line("optim.clip_norm", format!("{:?}", self.clip_norm));
        line(
            "optim.warmup_steps",
            self.warmup_steps.map_or("auto".into(), |w| w.to_string()),
        );
        line("optim.polyak", format!("{:?}", self.polyak));
        line("optim.patience", self.patience.to_string());
        line("optim.epochs", self.epochs.to_string());
        line("optim.batch_size", self.batch_size.to_string());
        line(
            "optim.order",
            match self.order {
                OrderPolicy::Sequential => "sequential",
                OrderPolicy::Shuffled => "shuffled",
                OrderPolicy::Bucketed => "bucketed",
            }
            .into(),
        );
        line("model.emb", self.emb.to_string());
        line("model.enc_hidden", self.enc_hidden.to_string());
        line("model.dec_hidden", self.dec_hidden.to_string());
        line("model.adv_hidden", self.adv_hidden.map_or("auto".into(), |h| h.to_string()));
        line("model.latent", self.latent.to_string());
        line("model.tie_embeddings", self.tie_embeddings.to_string());
        line("vocab.min_freq", self.min_freq.to_string());
        line("vocab.max_size", self.max_vocab.to_string());
        line("eval.mi_samples", self.mi_samples.to_string());
        line("eval.mi_sentences", self.mi_sentences.to_string());
        s
    }
}
