//! Mini-batch training with initial-state strategies, periodic evaluation and
//! a long-format metrics history.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{sample_domain_choice, DomainChoice, DomainSpec, SamplingStrategy, Utterance};
use crate::decoder::{decode_utterance, greedy_decode, SearchLimits};
use crate::error::{Error, Result};
use crate::eval::{corpus_wer, CorpusWer};
use crate::longform::{deposit_final_states, inference_state, initial_state, StateSource, StatePool, StateStrategy};
use crate::loss::{rnnt_forward, rnnt_grad_logits};
use crate::model::{ModelConfig, RecurrentState, RnntModel, RnntParams};
use crate::nn::{clip_global_norm, AdamConfig, AdamState};

/// Consecutive skipped steps tolerated before training is abandoned.
pub const MAX_CONSECUTIVE_SKIPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total optimizer steps (a resumed run continues up to this count).
    pub steps: u64,
    pub eval_every: u64,
    pub learning_rate: f64,
    /// Linear warmup length; 0 gives a constant rate.
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
    pub state_strategy: StateStrategy,
    pub pool_capacity: usize,
    pub sampling: SamplingStrategy,
    /// Beam width for periodic evaluation; 1 decodes greedily.
    pub eval_beam: usize,
    pub eval_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            eval_every: 250,
            learning_rate: 1e-2,
            warmup_steps: 100,
            clip_norm: 5.0,
            seed: 1,
            state_strategy: StateStrategy::default(),
            pool_capacity: crate::longform::DEFAULT_POOL_CAPACITY,
            sampling: SamplingStrategy::CountWeighted,
            eval_beam: 1,
            eval_margin: crate::decoder::DEFAULT_ADAPTIVE_MARGIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.eval_beam == 0 {
            return Err(Error::Config("eval beam must be at least 1".into()));
        }
        if self.pool_capacity == 0 {
            return Err(Error::Config("rsp_pool_capacity must be at least 1".into()));
        }
        self.state_strategy.validate()
    }

    /// Learning rate used for the update that produces step `step + 1`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Training utterances grouped by (domain, subdomain).
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub domains: Vec<DomainSpec>,
    leaves: Vec<(DomainChoice, Vec<Utterance>)>,
}

impl TrainingSet {
    /// Groups `utterances` by their domain label (`name` or `name/sub`).
    /// Every domain and subdomain in `domains` needs at least one utterance.
    pub fn new(domains: Vec<DomainSpec>, utterances: Vec<Utterance>) -> Result<Self> {
        let mut leaves: Vec<(DomainChoice, String, Vec<Utterance>)> = Vec::new();
        for (d, spec) in domains.iter().enumerate() {
            if spec.subdomains.is_empty() {
                leaves.push((DomainChoice { domain: d, subdomain: None }, spec.name.clone(), Vec::new()));
            }
            for (s, sub) in spec.subdomains.iter().enumerate() {
                leaves.push((
                    DomainChoice { domain: d, subdomain: Some(s) },
                    format!("{}/{}", spec.name, sub.name),
                    Vec::new(),
                ));
            }
        }
        for u in utterances {
            if u.tokens.is_empty() {
                return Err(Error::Data(format!("training utterance {} has no tokens", u.id)));
            }
            match leaves.iter_mut().find(|l| l.1 == u.domain) {
                Some(l) => l.2.push(u),
                None => return Err(Error::Data(format!("utterance {} has unknown domain '{}'", u.id, u.domain))),
            }
        }
        if let Some(empty) = leaves.iter().find(|l| l.2.is_empty()) {
            return Err(Error::Data(format!("no training utterances for domain '{}'", empty.1)));
        }
        Ok(Self {
            domains,
            leaves: leaves.into_iter().map(|(c, _, u)| (c, u)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.leaves.iter().map(|l| l.1.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        strategy: SamplingStrategy,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Utterance>> {
        (0..batch_size)
            .map(|_| {
                let choice = sample_domain_choice(strategy, &self.domains, rng)?;
                let pool = &self
                    .leaves
                    .iter()
                    .find(|l| l.0 == choice)
                    .expect("every leaf is populated")
                    .1;
                Ok(&pool[rng.random_range(0..pool.len())])
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TestSet {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

/// Loss and gradient of a batch given its initial states.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Summed `−log P(y|x)`.
    pub loss: f64,
    pub grads: RnntParams,
    pub final_states: Vec<RecurrentState>,
}

/// Sums per-utterance losses and gradients.
pub fn batch_gradients(
    model: &RnntModel,
    batch: &[&Utterance],
    init_states: &[RecurrentState],
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    if batch.len() != init_states.len() {
        return Err(Error::shape("batch initial states", batch.len(), init_states.len()));
    }
    let blank = model.config.blank_id;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    let mut final_states = Vec::with_capacity(batch.len());
    for (utt, state) in batch.iter().zip(init_states) {
        let fwd = model.forward_lattice(&utt.features, &utt.tokens, state)?;
        if !fwd.lattice.is_finite() {
            return Err(Error::Divergence(format!("utterance {}: non-finite logits", utt.id)));
        }
        let dp = rnnt_forward(&fwd.lattice, &utt.tokens, blank).map_err(|e| match e {
            Error::ImpossibleAlignment { .. } => Error::Data(format!("utterance {}: {e}", utt.id)),
            other => other,
        })?;
        let g = rnnt_grad_logits(&fwd.lattice, &utt.tokens, blank, &dp)?;
        model.backward_lattice(&fwd.cache, &g, &mut grads)?;
        loss += dp.loss();
        final_states.push(fwd.final_state);
    }
    Ok(BatchGradients {
        loss,
        grads,
        final_states,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub sources: Vec<StateSource>,
}

/// Model, optimizer, state pool and random stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: RnntModel,
    pub optimizer: AdamState,
    pub pool: StatePool,
    pub rng: ChaCha8Rng,
    pub step: u64,
    consecutive_skips: usize,
}

impl Trainer {
    /// Fresh run: parameters and all later randomness derive from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = RnntModel::new(model_config, &mut rng)?;
        Self::from_parts(config, model, None, None, rng, 0)
    }

    pub fn from_parts(
        config: TrainConfig,
        model: RnntModel,
        optimizer: Option<AdamState>,
        pool: Option<StatePool>,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let optimizer = optimizer.unwrap_or_else(|| {
            AdamState::new(
                AdamConfig {
                    learning_rate: config.learning_rate,
                    ..AdamConfig::default()
                },
                &model.params.shapes(),
            )
        });
        if optimizer.first_moment.len() != model.params.tensors().len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        let pool = match pool {
            Some(p) => p,
            None => StatePool::new(config.pool_capacity)?,
        };
        Ok(Self {
            config,
            model,
            optimizer,
            pool,
            rng,
            step,
            consecutive_skips: 0,
        })
    }

    /// One optimizer update on `batch`. A non-finite loss or gradient skips
    /// the update and leaves the parameters untouched.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut states = Vec::with_capacity(batch.len());
        let mut sources = Vec::with_capacity(batch.len());
        for _ in batch {
            let (s, src) = initial_state(&self.config.state_strategy, &self.model.config, &self.pool, &mut self.rng);
            states.push(s);
            sources.push(src);
        }
        let computed = match batch_gradients(&self.model, batch, &states) {
            Ok(c) if c.loss.is_finite() && c.grads.is_finite() => Some(c),
            Ok(_) | Err(Error::Divergence(_)) => None,
            Err(e) => return Err(e),
        };
        let Some(mut computed) = computed else {
            return self.skip(sources);
        };

        let grad_norm = clip_global_norm(&mut computed.grads.tensors_mut(), self.config.clip_norm);
        let backup = self.model.params.clone();
        let lr = self.config.learning_rate_at(self.step);
        let grads = computed.grads.tensors();
        self.optimizer.step(&mut self.model.params.tensors_mut(), &grads, lr)?;
        if !self.model.params.is_finite() {
            self.model.params = backup;
            return self.skip(sources);
        }
        self.step += 1;
        self.consecutive_skips = 0;
        if self.config.state_strategy.kind == crate::longform::StrategyKind::Rsp {
            deposit_final_states(&mut self.pool, &computed.final_states, self.step);
        }
        Ok(StepOutcome {
            loss: computed.loss,
            grad_norm,
            skipped: false,
            sources,
        })
    }

    fn skip(&mut self, sources: Vec<StateSource>) -> Result<StepOutcome> {
        self.consecutive_skips += 1;
        log::warn!("non-finite loss or update at step {}; update skipped", self.step + 1);
        if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
            return Err(Error::Divergence(format!(
                "{} consecutive non-finite steps ending at step {}",
                self.consecutive_skips,
                self.step + 1
            )));
        }
        Ok(StepOutcome {
            loss: f64::NAN,
            grad_norm: f64::NAN,
            skipped: true,
            sources,
        })
    }
}

/// Decodes every utterance from the zero state and pools the error counts.
pub fn evaluate(model: &RnntModel, set: &TestSet, limits: &SearchLimits) -> Result<CorpusWer> {
    let init = inference_state(&StateStrategy::default(), &model.config);
    let mut pairs = Vec::with_capacity(set.utterances.len());
    for u in &set.utterances {
        let hyp = if limits.beam_width == 1 {
            greedy_decode(model, &u.features, &init)?
        } else {
            decode_utterance(model, &u.features, &init, limits)?
        };
        pairs.push((u.tokens.clone(), hyp.tokens));
    }
    Ok(corpus_wer(&pairs))
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean per-utterance loss since the previous evaluation; empty before
    /// any update.
    pub train_loss: Option<f64>,
    pub test_set: String,
    pub n_utts: usize,
    pub ref_tokens: usize,
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub sub_rate: f64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow], with_header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(with_header).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("writing metrics: {e}")))?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing metrics: {e}")))
}

fn eval_rows(trainer: &Trainer, sets: &[TestSet], train_loss: Option<f64>) -> Result<Vec<MetricsRow>> {
    let limits = SearchLimits::new(trainer.config.eval_beam, trainer.config.eval_margin);
    sets.iter()
        .map(|set| {
            let c = evaluate(&trainer.model, set, &limits)?;
            Ok(MetricsRow {
                step: trainer.step,
                train_loss,
                test_set: set.name.clone(),
                n_utts: c.n_utts,
                ref_tokens: c.total.ref_len,
                wer: c.total.wer(),
                del_rate: c.total.del_rate(),
                ins_rate: c.total.ins_rate(),
                sub_rate: c.total.sub_rate(),
            })
        })
        .collect()
}

/// Trains until `trainer.step == config.steps`, evaluating every
/// `eval_every` steps (plus step 0 of a fresh run and the final step).
/// `on_eval` sees each batch of new rows, e.g. to append them to a file or
/// write a checkpoint.
pub fn run_training<F>(trainer: &mut Trainer, data: &TrainingSet, tests: &[TestSet], mut on_eval: F) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&Trainer, &[MetricsRow]) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for u in data.leaves.iter().flat_map(|l| &l.1) {
        if let Some(&bad) = u.tokens.iter().find(|&&t| !trainer.model.config.is_label(t)) {
            return Err(Error::Data(format!("utterance {} has token {bad} outside the model's label set", u.id)));
        }
        if u.features.cols() != trainer.model.config.feature_dim {
            return Err(Error::Data(format!(
                "utterance {} has feature dim {} but the model expects {}",
                u.id,
                u.features.cols(),
                trainer.model.config.feature_dim
            )));
        }
    }
    let started = Instant::now();
    let mut history = Vec::new();
    if trainer.step == 0 {
        let rows = eval_rows(trainer, tests, None)?;
        on_eval(trainer, &rows)?;
        history.extend(rows);
    }
    let (mut loss_sum, mut loss_utts) = (0.0, 0usize);
    while trainer.step < trainer.config.steps {
        let batch = data.sample_batch(trainer.config.sampling, trainer.config.batch_size, &mut trainer.rng)?;
        let outcome = trainer.train_step(&batch)?;
        if outcome.skipped {
            continue;
        }
        loss_sum += outcome.loss;
        loss_utts += batch.len();
        if trainer.step % trainer.config.eval_every == 0 || trainer.step == trainer.config.steps {
            let mean = loss_sum / loss_utts as f64;
            let rows = eval_rows(trainer, tests, Some(mean))?;
            let epochs = (trainer.step * trainer.config.batch_size as u64) as f64 / data.len() as f64;
            log::info!(
                "step {} (epoch {:.2}) loss {:.4} elapsed {:.1}s{}",
                trainer.step,
                epochs,
                mean,
                started.elapsed().as_secs_f64(),
                rows.iter()
                    .map(|r| format!(" {}={:.3}", r.test_set, r.wer))
                    .collect::<String>()
            );
            on_eval(trainer, &rows)?;
            history.extend(rows);
            loss_sum = 0.0;
            loss_utts = 0;
        }
    }
    Ok(history)
}
