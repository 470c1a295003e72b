//! Seeded end-to-end experiments: corpus generation, training and
//! long-form evaluation in memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_longform_set, default_domains, synthesize_utterance, DomainSpec, Frontend, Utterance};
use crate::error::{Error, Result};
use crate::longform::StateStrategy;
use crate::model::ModelConfig;
use crate::trainer::{run_training, MetricsRow, TestSet, Trainer, TrainingSet, TrainConfig};

/// Concatenation factors of the long-form test sets.
pub const LONGFORM_FACTORS: [usize; 3] = [1, 5, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub raw_dim: usize,
    pub frontend: Frontend,
    pub train_utts_per_domain: usize,
    pub test_utts_per_domain: usize,
    /// Silence frames (post-frontend) between concatenated pieces.
    pub longform_gap: usize,
    /// Domain whose test set is concatenated into long-form sets.
    pub longform_domain: String,
    /// Names of the domains to generate, in order.
    pub domains: Vec<String>,
    pub overrides: Vec<DomainOverride>,
    pub seed: u64,
}

/// Per-domain adjustments on top of the built-in domain table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainOverride {
    pub domain: String,
    pub noise_std: Option<f64>,
    pub weight: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::corpus::DEFAULT_VOCAB,
            raw_dim: crate::corpus::DEFAULT_RAW_DIM,
            frontend: Frontend::default(),
            train_utts_per_domain: 2000,
            test_utts_per_domain: 200,
            longform_gap: 8,
            longform_domain: "search".into(),
            domains: ["search", "farfield", "telephony", "youtube"].map(String::from).to_vec(),
            overrides: Vec::new(),
            seed: 1000,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.raw_dim == 0 {
            return Err(Error::Config("[data] vocab_size and raw_dim must be positive".into()));
        }
        if self.frontend.stack == 0 || self.frontend.hop == 0 {
            return Err(Error::Config("[data] stack and hop must be positive".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("[data] domains is empty".into()));
        }
        for o in &self.overrides {
            if !self.domains.contains(&o.domain) {
                return Err(Error::Config(format!("[data] override for '{}', which is not generated", o.domain)));
            }
        }
        self.build_domains().map(|_| ())
    }

    /// Domain specs in `domains` order with overrides applied.
    pub fn build_domains(&self) -> Result<Vec<DomainSpec>> {
        let all = default_domains(self.vocab_size, self.raw_dim)?;
        self.domains
            .iter()
            .map(|n| {
                let mut spec = all
                    .iter()
                    .find(|d| &d.name == n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown domain '{n}'")))?;
                for o in self.overrides.iter().filter(|o| &o.domain == n) {
                    if let Some(v) = o.noise_std {
                        spec.noise_std = v;
                    }
                    if let Some(w) = o.weight {
                        spec.weight_hours = w;
                    }
                }
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

/// Train and test sets of one generated corpus.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub domains: Vec<DomainSpec>,
    pub train: Vec<Utterance>,
    /// `test_<domain>` sets followed by `longform_x<k>` sets.
    pub tests: Vec<TestSet>,
}

fn leaves(spec: &DomainSpec) -> Vec<DomainSpec> {
    if spec.subdomains.is_empty() {
        vec![spec.resolve(None)]
    } else {
        (0..spec.subdomains.len()).map(|i| spec.resolve(Some(i))).collect()
    }
}

/// Splits `count` utterances across the leaves of a domain (first leaves
/// take the remainder).
fn synthesize_domain(
    spec: &DomainSpec,
    frontend: &Frontend,
    count: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Utterance>> {
    let parts = leaves(spec);
    let mut out = Vec::with_capacity(count);
    for (li, leaf) in parts.iter().enumerate() {
        let n = count / parts.len() + usize::from(li < count % parts.len());
        for _ in 0..n {
            let id = format!("{prefix}-{}-{:05}", spec.name, out.len());
            out.push(synthesize_utterance(leaf, frontend, id, rng)?);
        }
    }
    Ok(out)
}

/// Generates the given domains. Each (domain, split) gets its own random
/// stream so adding a domain leaves the others unchanged.
pub fn generate_corpus(data: &DataConfig, domains: Vec<DomainSpec>) -> Result<GeneratedCorpus> {
    for d in &domains {
        d.validate()?;
    }
    let mut train = Vec::new();
    let mut tests = Vec::new();
    let mut longform_source = None;
    for (i, spec) in domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
        rng.set_stream(2 * i as u64 + 1);
        train.extend(synthesize_domain(spec, &data.frontend, data.train_utts_per_domain, "train", &mut rng)?);
        let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
        rng.set_stream(2 * i as u64 + 2);
        let test = synthesize_domain(spec, &data.frontend, data.test_utts_per_domain, "test", &mut rng)?;
        if spec.name == data.longform_domain {
            let gap = spec.silence_features(data.longform_gap, &data.frontend, &mut rng)?;
            longform_source = Some((test.clone(), gap));
        }
        tests.push(TestSet {
            name: format!("test_{}", spec.name),
            utterances: test,
        });
    }
    if let Some((source, gap)) = longform_source {
        for k in LONGFORM_FACTORS {
            tests.push(TestSet {
                name: format!("longform_x{k}"),
                utterances: build_longform_set(&source, k, &gap)?,
            });
        }
    }
    Ok(GeneratedCorpus { domains, train, tests })
}

/// Built-in domains restricted to `names` (all of them if empty).
pub fn recipe_domains(data: &DataConfig, names: &[&str]) -> Result<Vec<DomainSpec>> {
    let mut d = data.clone();
    if !names.is_empty() {
        d.domains = names.iter().map(|n| n.to_string()).collect();
    }
    d.build_domains()
}

/// Model config matching the data's frontend and vocabulary.
pub fn model_config_for(data: &DataConfig) -> ModelConfig {
    let mut m = ModelConfig::default();
    m.feature_dim = data.frontend.output_dim(data.raw_dim);
    m.vocab_size = data.vocab_size;
    m.sos_id = data.vocab_size + 1;
    m
}

/// Training set restricted to the named domains (every domain if empty).
pub fn select_training_data(domains: &[DomainSpec], utterances: &[Utterance], names: &[&str]) -> Result<TrainingSet> {
    let keep = |n: &str| names.is_empty() || names.contains(&n);
    let chosen: Vec<DomainSpec> = domains.iter().filter(|d| keep(&d.name)).cloned().collect();
    if !names.is_empty() && chosen.len() != names.len() {
        return Err(Error::Config(format!("training domains {names:?} not all in the corpus")));
    }
    let utts: Vec<Utterance> = utterances
        .iter()
        .filter(|u| keep(u.domain.split('/').next().unwrap_or("")))
        .cloned()
        .collect();
    TrainingSet::new(chosen, utts)
}

/// Trains on `train_domains` of `corpus` and evaluates on every test set.
pub fn train_and_evaluate(
    corpus: &GeneratedCorpus,
    train_domains: &[&str],
    model: ModelConfig,
    train: TrainConfig,
) -> Result<Vec<MetricsRow>> {
    let data = select_training_data(&corpus.domains, &corpus.train, train_domains)?;
    let mut trainer = Trainer::new(model, train)?;
    run_training(&mut trainer, &data, &corpus.tests, |_, _| Ok(()))
}

/// Final-step WER per test set.
pub fn final_wer(rows: &[MetricsRow], test_set: &str) -> Option<f64> {
    rows.iter().rev().find(|r| r.test_set == test_set).map(|r| r.wer)
}

/// Strategy + seed pair of a long-form run.
pub fn longform_train_config(strategy: StateStrategy, seed: u64) -> TrainConfig {
    TrainConfig {
        state_strategy: strategy,
        seed,
        ..TrainConfig::default()
    }
}
