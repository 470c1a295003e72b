//! Initial recurrent states for training on short segments while serving
//! long-form audio: zero states, random state sampling, and random state
//! passing through a pool of saved final states.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RecurrentState};

pub const DEFAULT_PASS_PROBABILITY: f64 = 0.5;
pub const DEFAULT_POOL_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Zero,
    /// Sample every encoder and prediction cell/memory from `N(0, 1)`.
    Rss,
    /// Sample the encoder layers only; prediction layers start at zero.
    RssEncoderOnly,
    Rsp,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Zero => "zero",
            StrategyKind::Rss => "rss",
            StrategyKind::RssEncoderOnly => "rss_encoder_only",
            StrategyKind::Rsp => "rsp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(StrategyKind::Zero),
            "rss" | "rss_full" => Ok(StrategyKind::Rss),
            "rss_encoder_only" => Ok(StrategyKind::RssEncoderOnly),
            "rsp" => Ok(StrategyKind::Rsp),
            other => Err(Error::Config(format!("unknown state strategy '{other}'"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateStrategy {
    pub kind: StrategyKind,
    pub pass_probability: f64,
}

impl StateStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            pass_probability: DEFAULT_PASS_PROBABILITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pass_probability) {
            return Err(Error::Config(format!(
                "rsp_pass_probability must be in [0, 1], got {}",
                self.pass_probability
            )));
        }
        Ok(())
    }
}

impl Default for StateStrategy {
    fn default() -> Self {
        Self::new(StrategyKind::Zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub state: RecurrentState,
    /// Training step whose mini-batch produced the state.
    pub step: u64,
}

/// Bounded ring of detached final states.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePool {
    capacity: usize,
    entries: VecDeque<PoolEntry>,
}

impl StatePool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("rsp_pool_capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&PoolEntry> {
        self.entries.get(i)
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, entry: PoolEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }
}

/// Where a training-time initial state came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSource {
    Zero,
    Sampled,
    /// Index into the pool at draw time and the step that deposited it.
    Pool { index: usize, step: u64 },
}

/// Training-time initial state for one utterance.
pub fn initial_state<R: Rng + ?Sized>(
    strategy: &StateStrategy,
    config: &ModelConfig,
    pool: &StatePool,
    rng: &mut R,
) -> (RecurrentState, StateSource) {
    let mut state = RecurrentState::zeros(config);
    match strategy.kind {
        StrategyKind::Zero => (state, StateSource::Zero),
        StrategyKind::Rss => {
            state.values_mut().for_each(|v| *v = rng.sample(StandardNormal));
            (state, StateSource::Sampled)
        }
        StrategyKind::RssEncoderOnly => {
            for layer in &mut state.encoder {
                layer.values_mut().for_each(|v| *v = rng.sample(StandardNormal));
            }
            (state, StateSource::Sampled)
        }
        StrategyKind::Rsp => {
            let pass = rng.random::<f64>() < strategy.pass_probability;
            if !pass {
                return (state, StateSource::Zero);
            }
            if pool.is_empty() {
                log::debug!("state pool empty; using zero initial state");
                return (state, StateSource::Zero);
            }
            let index = rng.random_range(0..pool.len());
            let entry = &pool.entries[index];
            (
                entry.state.clone(),
                StateSource::Pool {
                    index,
                    step: entry.step,
                },
            )
        }
    }
}

/// Copies finite states into the pool, evicting the oldest when full.
/// Returns the number accepted.
pub fn deposit_final_states<'a>(
    pool: &mut StatePool,
    states: impl IntoIterator<Item = &'a RecurrentState>,
    step: u64,
) -> usize {
    let mut accepted = 0;
    for state in states {
        if !state.is_finite() {
            log::warn!("rejecting non-finite final state from step {step}");
            continue;
        }
        pool.push(PoolEntry {
            state: state.clone(),
            step,
        });
        accepted += 1;
    }
    accepted
}

/// Inference always starts from the zero state, whatever the training strategy.
pub fn inference_state(_strategy: &StateStrategy, config: &ModelConfig) -> RecurrentState {
    RecurrentState::zeros(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn marked_state(config: &ModelConfig, v: f64, token: usize) -> RecurrentState {
        let mut s = RecurrentState::zeros(config);
        s.values_mut().enumerate().for_each(|(i, x)| *x = v + i as f64 * 1e-3);
        s.last_token = token;
        s
    }

    #[test]
    fn zero_strategy_is_exact_zero() {
        let config = cfg();
        let pool = StatePool::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, src) = initial_state(&StateStrategy::new(StrategyKind::Zero), &config, &pool, &mut rng);
        assert_eq!(src, StateSource::Zero);
        assert!(s.values().all(|&v| v == 0.0));
        assert_eq!(s.last_token, config.sos_id);
    }

    #[test]
    fn rss_samples_standard_normal() {
        let config = cfg();
        let pool = StatePool::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let strategy = StateStrategy::new(StrategyKind::Rss);
        let mut xs = Vec::new();
        while xs.len() < 100_000 {
            let (s, _) = initial_state(&strategy, &config, &pool, &mut rng);
            xs.extend(s.values().copied());
        }
        xs.truncate(100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn rss_encoder_only_leaves_prediction_zero() {
        let config = cfg();
        let pool = StatePool::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, _) = initial_state(&StateStrategy::new(StrategyKind::RssEncoderOnly), &config, &pool, &mut rng);
        assert!(s.encoder.iter().flat_map(|l| l.values()).any(|&v| v != 0.0));
        assert!(s.prediction.iter().flat_map(|l| l.values()).all(|&v| v == 0.0));
        assert_eq!(s.last_token, config.sos_id);
    }

    #[test]
    fn rss_is_seed_deterministic() {
        let config = cfg();
        let pool = StatePool::new(1).unwrap();
        let strategy = StateStrategy::new(StrategyKind::Rss);
        let a = initial_state(&strategy, &config, &pool, &mut ChaCha8Rng::seed_from_u64(3)).0;
        let b = initial_state(&strategy, &config, &pool, &mut ChaCha8Rng::seed_from_u64(3)).0;
        assert_eq!(a, b);
    }

    #[test]
    fn rsp_pass_returns_pool_entry_and_token() {
        let config = cfg();
        let mut pool = StatePool::new(8).unwrap();
        let saved = marked_state(&config, 0.25, 7);
        deposit_final_states(&mut pool, [&saved], 3);
        let strategy = StateStrategy {
            kind: StrategyKind::Rsp,
            pass_probability: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, src) = initial_state(&strategy, &config, &pool, &mut rng);
        assert_eq!(src, StateSource::Pool { index: 0, step: 3 });
        assert_eq!(s, saved);
        assert_eq!(s.last_token, 7);
    }

    #[test]
    fn rsp_empty_pool_falls_back_to_zero() {
        let config = cfg();
        let pool = StatePool::new(8).unwrap();
        let strategy = StateStrategy {
            kind: StrategyKind::Rsp,
            pass_probability: 1.0,
        };
        let (s, src) = initial_state(&strategy, &config, &pool, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(src, StateSource::Zero);
        assert_eq!(s, RecurrentState::zeros(&config));
    }

    #[test]
    fn rsp_coin_rate() {
        let config = cfg();
        let mut pool = StatePool::new(8).unwrap();
        deposit_final_states(&mut pool, [&marked_state(&config, 1.0, 3)], 0);
        let strategy = StateStrategy::new(StrategyKind::Rsp);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let passes = (0..10_000)
            .filter(|_| matches!(initial_state(&strategy, &config, &pool, &mut rng).1, StateSource::Pool { .. }))
            .count();
        let rate = passes as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn ring_evicts_oldest() {
        let config = cfg();
        let mut pool = StatePool::new(2).unwrap();
        let states: Vec<_> = (0..3).map(|i| marked_state(&config, i as f64, i + 1)).collect();
        for (step, s) in states.iter().enumerate() {
            deposit_final_states(&mut pool, [s], step as u64);
        }
        assert_eq!(pool.len(), 2);
        let kept: Vec<u64> = pool.entries().map(|e| e.step).collect();
        assert_eq!(kept, vec![1, 2]);
        assert_eq!(pool.get(1).unwrap().state, states[2]);
    }

    #[test]
    fn deposit_copies_values_and_rejects_non_finite() {
        let config = cfg();
        let mut pool = StatePool::new(4).unwrap();
        let mut live = marked_state(&config, 0.5, 2);
        let snapshot = live.clone();
        let mut bad = live.clone();
        bad.encoder[0].cell[0] = f64::NAN;
        assert_eq!(deposit_final_states(&mut pool, [&live, &bad], 0), 1);
        live.values_mut().for_each(|v| *v = -9.0);
        assert_eq!(pool.get(0).unwrap().state, snapshot);
    }

    #[test]
    fn inference_state_is_always_zero() {
        let config = cfg();
        for kind in [StrategyKind::Zero, StrategyKind::Rss, StrategyKind::RssEncoderOnly, StrategyKind::Rsp] {
            assert_eq!(inference_state(&StateStrategy::new(kind), &config), RecurrentState::zeros(&config));
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for kind in [StrategyKind::Zero, StrategyKind::Rss, StrategyKind::RssEncoderOnly, StrategyKind::Rsp] {
            assert_eq!(StrategyKind::parse(kind.as_str()).unwrap(), kind);
        }
        assert!(StrategyKind::parse("random").is_err());
        assert!(StatePool::new(0).is_err());
    }
}
