use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{AdversaryStats, AdversaryTrace, DropCounter};
use crate::seqvae::{param_shapes, ModelParams};
use crate::textdata::Vocab;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 4] = b"AWDV";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Counters and history needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainCounters {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub consecutive_skips: u32,
    pub val_history: Vec<f64>,
    pub best_val: f64,
    pub stopped: bool,
}

impl Default for TrainCounters {
    fn default() -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            consecutive_skips: 0,
            val_history: Vec::new(),
            best_val: f64::INFINITY,
            stopped: false,
        }
    }
}

/// Full training snapshot. Tensors are stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams<Tensor<f32>>,
    pub averaged: ModelParams<Tensor<f32>>,
    pub counters: TrainCounters,
    /// Adversary readings of the current epoch.
    pub trace: AdversaryTrace,
    pub drops: DropCounter,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_name(buf, name);
    put_u32(buf, t.dims().len() as u32);
    for &d in t.dims() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_section(buf: &mut Vec<u8>, name: &str, payload: &str) {
    put_name(buf, name);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32("name length")? as usize;
        let bytes = self.take(n, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.name()?;
        let rank = self.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("tensor '{name}' has invalid rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 4, &format!("data of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        Ok((name, t))
    }
}

fn kv_get<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Checkpoint(format!("missing field '{key}'")))
}

fn parse_field<T: std::str::FromStr>(text: &str, key: &str) -> Result<T> {
    kv_get(text, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("malformed field '{key}'")))
}

fn hex_list(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(f64_hex).collect::<Vec<_>>().join(",")
}

fn parse_hex_list(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_f64_hex).collect()
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("malformed field '{key}'"))))
        .collect()
}

fn diagnostics_text(trace: &AdversaryTrace, d: &DropCounter) -> String {
    let t = trace.entries();
    format!(
        "trace_l1={}\ntrace_sigma={}\ntrace_grad={}\nposition_drops={}\nposition_eligible={}\ntoken_ids={}\ntoken_drops={}\ntoken_eligible={}\nbatches={}\n",
        hex_list(t.iter().map(|s| s.score_l1)),
        hex_list(t.iter().map(|s| s.sigma)),
        hex_list(t.iter().map(|s| s.grad_norm)),
        join(&d.position_drops),
        join(&d.position_eligible),
        join(d.token_eligible.keys()),
        join(d.token_eligible.keys().map(|k| d.token_drops.get(k).copied().unwrap_or(0))),
        join(d.token_eligible.values()),
        d.batches
    )
}

fn parse_diagnostics(text: &str) -> Result<(AdversaryTrace, DropCounter)> {
    let l1 = parse_hex_list(kv_get(text, "trace_l1")?)?;
    let sigma = parse_hex_list(kv_get(text, "trace_sigma")?)?;
    let grad = parse_hex_list(kv_get(text, "trace_grad")?)?;
    if sigma.len() != l1.len() || grad.len() != l1.len() {
        return Err(Error::Checkpoint("adversary trace columns differ in length".into()));
    }
    let mut trace = AdversaryTrace::default();
    for i in 0..l1.len() {
        trace.push(AdversaryStats {
            score_l1: l1[i],
            sigma: sigma[i],
            grad_norm: grad[i],
        });
    }
    let ids: Vec<usize> = parse_list(kv_get(text, "token_ids")?, "token_ids")?;
    let td: Vec<u64> = parse_list(kv_get(text, "token_drops")?, "token_drops")?;
    let te: Vec<u64> = parse_list(kv_get(text, "token_eligible")?, "token_eligible")?;
    if td.len() != ids.len() || te.len() != ids.len() {
        return Err(Error::Checkpoint("token drop columns differ in length".into()));
    }
    let drops = DropCounter {
        position_drops: parse_list(kv_get(text, "position_drops")?, "position_drops")?,
        position_eligible: parse_list(kv_get(text, "position_eligible")?, "position_eligible")?,
        token_drops: ids.iter().zip(&td).filter(|(_, &d)| d > 0).map(|(&i, &d)| (i, d)).collect(),
        token_eligible: ids.iter().copied().zip(te).collect(),
        batches: parse_field(text, "batches")?,
    };
    Ok((trace, drops))
}

fn f64_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64_hex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("malformed float '{s}'")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(CHECKPOINT_VERSION);
        let params = self.params.entries();
        let averaged = self.averaged.entries();
        put_u32(&mut buf, (params.len() + averaged.len()) as u32);
        for (name, t) in &params {
            put_tensor(&mut buf, name, t);
        }
        for (name, t) in &averaged {
            put_tensor(&mut buf, &format!("avg.{name}"), t);
        }
        let c = &self.counters;
        let history: Vec<String> = c.val_history.iter().map(|&v| f64_hex(v)).collect();
        let optimizer = format!(
            "step={}\nepoch={}\nbatch_in_epoch={}\nconsecutive_skips={}\nbest_val={}\nval_history={}\nstopped={}\n",
            c.step,
            c.epoch,
            c.batch_in_epoch,
            c.consecutive_skips,
            f64_hex(c.best_val),
            history.join(","),
            c.stopped
        );
        let rng = format!("seed={}\nstep={}\nepoch={}\n", self.config.seed, c.step, c.epoch);
        put_u32(&mut buf, 5);
        put_section(&mut buf, "config", &self.config.to_text());
        put_section(&mut buf, "vocab", &self.vocab.to_text());
        put_section(&mut buf, "optimizer", &optimizer);
        put_section(&mut buf, "rng", &rng);
        put_section(&mut buf, "diagnostics", &diagnostics_text(&self.trace, &self.drops));
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        let sections = r.u32("section count")? as usize;
        let mut texts = std::collections::HashMap::new();
        for _ in 0..sections {
            let name = r.name()?;
            let n = r.u64("section length")? as usize;
            let payload = r.take(n, &format!("section '{name}'"))?;
            let text = String::from_utf8(payload.to_vec())
                .map_err(|_| Error::Checkpoint(format!("section '{name}' is not UTF-8")))?;
            texts.insert(name, text);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let section = |name: &str| {
            texts
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing section '{name}'")))
        };
        let config = TrainConfig::parse(section("config")?)?;
        let vocab = Vocab::from_text(section("vocab")?)?;
        let dims = config.model_dims(vocab.len());

        let reference = param_shapes(&dims);
        let names: Vec<String> = reference.entries().into_iter().map(|(n, _)| n).collect();
        let lookup = |name: &str| -> Result<Tensor<f32>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
        };
        let mut params = Vec::with_capacity(names.len());
        let mut averaged = Vec::with_capacity(names.len());
        for n in &names {
            params.push(lookup(n)?);
            averaged.push(lookup(&format!("avg.{n}"))?);
        }
        if tensors.len() != 2 * names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                2 * names.len(),
                tensors.len()
            )));
        }
        let params = reference.with_values(&params);
        let averaged = reference.with_values(&averaged);
        params.check_dims(&dims)?;
        averaged.check_dims(&dims)?;

        let opt = section("optimizer")?;
        let history = kv_get(opt, "val_history")?;
        let val_history = if history.is_empty() {
            Vec::new()
        } else {
            history.split(',').map(parse_f64_hex).collect::<Result<_>>()?
        };
        let counters = TrainCounters {
            step: parse_field(opt, "step")?,
            epoch: parse_field(opt, "epoch")?,
            batch_in_epoch: parse_field(opt, "batch_in_epoch")?,
            consecutive_skips: parse_field(opt, "consecutive_skips")?,
            val_history,
            best_val: parse_f64_hex(kv_get(opt, "best_val")?)?,
            stopped: parse_field(opt, "stopped")?,
        };
        let rng = section("rng")?;
        let seed: u64 = parse_field(rng, "seed")?;
        if seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "rng seed {seed} does not match config seed {}",
                config.seed
            )));
        }
        let (trace, drops) = parse_diagnostics(section("diagnostics")?)?;
        Ok(Self {
            config,
            vocab,
            params,
            averaged,
            counters,
            trace,
            drops,
        })
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
