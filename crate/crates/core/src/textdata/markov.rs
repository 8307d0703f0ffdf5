use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::diffcore::rng::StreamKey;
use crate::error::{Error, Result};
use crate::textdata::Sentence;

const STOCHASTIC_TOL: f64 = 1e-9;

/// First-order Markov chain over a small token alphabet with uniformly
/// distributed sentence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSpec {
    pub states: Vec<String>,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
}

impl MarkovSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::DegenerateSpec("empty state alphabet".into()));
        }
        if self.initial.len() != n || self.transition.len() != n {
            return Err(Error::DegenerateSpec("initial/transition sizes disagree with states".into()));
        }
        check_distribution("initial distribution", &self.initial)?;
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DegenerateSpec(format!("transition row {i} has {} entries", row.len())));
            }
            check_distribution(&format!("transition row {i}"), row)?;
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::DegenerateSpec(format!(
                "length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Four states `a b c d`: `a` is followed by `b` with probability 0.97,
    /// every other row is uniform. Dropping an `a` removes most of the
    /// information about the next token, dropping anything else very little.
    pub fn planted(min_len: usize, max_len: usize) -> Self {
        let mut transition = vec![vec![0.25; 4]; 4];
        transition[0] = vec![0.01, 0.97, 0.01, 0.01];
        Self {
            states: ["a", "b", "c", "d"].map(String::from).to_vec(),
            initial: vec![0.25; 4],
            transition,
            min_len,
            max_len,
        }
    }

    /// `k` states with uniform initial and transition distributions.
    pub fn uniform(k: usize, min_len: usize, max_len: usize) -> Self {
        let states = (0..k).map(|i| format!("s{i}")).collect();
        Self {
            states,
            initial: vec![1.0 / k as f64; k],
            transition: vec![vec![1.0 / k as f64; k]; k],
            min_len,
            max_len,
        }
    }

    pub fn state_index(&self, token: &str) -> Option<usize> {
        self.states.iter().position(|s| s == token)
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::DegenerateSpec(format!("{what} has invalid entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::DegenerateSpec(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Samples `n` sentences i.i.d. from the chain; deterministic in `seed`.
pub fn gen_markov_corpus(spec: &MarkovSpec, n: usize, seed: u64) -> Result<Vec<Sentence>> {
    spec.validate()?;
    let degenerate = |e| Error::DegenerateSpec(format!("{e}"));
    let init = WeightedIndex::new(&spec.initial).map_err(degenerate)?;
    let rows: Vec<WeightedIndex<f64>> = spec
        .transition
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(degenerate))
        .collect::<Result<_>>()?;
    let mut rng = StreamKey::new(seed, "markov-corpus").rng();
    let mut corpus = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut state = init.sample(&mut rng);
        let mut sentence = Vec::with_capacity(len);
        sentence.push(spec.states[state].clone());
        for _ in 1..len {
            state = rows[state].sample(&mut rng);
            sentence.push(spec.states[state].clone());
        }
        corpus.push(sentence);
    }
    Ok(corpus)
}
