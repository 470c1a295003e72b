//! INI experiment configuration.
//!
//! Four sections; every key is optional and unknown keys are rejected.
//!
//! ```ini
//! [model]
//! ; hidden x projection per layer
//! encoder_layers = 32x16,32x16
//! ; layer index after which frames are stacked and subsampled
//! time_reduction_after = 1
//! time_reduction_factor = 2
//! prediction_layers = 32x16
//! joint_dim = 16
//! ; concat | additive
//! joint_mode = concat
//! embedding_dim = 8
//! blank_id = 0
//! ; feature_dim, vocab_size and sos_id follow [data] unless set
//!
//! [train]
//! batch_size = 32
//! steps = 2000
//! eval_every = 250
//! learning_rate = 0.01
//! warmup_steps = 100
//! clip_norm = 5
//! seed = 1
//! ; zero | rss | rsp
//! state_strategy = zero
//! ; encoder_only | full
//! rss_scope = encoder_only
//! rsp_pass_probability = 0.5
//! rsp_pool_capacity = 1024
//! ; uniform_domain | uniform_subdomain | count_weighted
//! sampling = count_weighted
//! ; comma-separated; empty means every domain in [data]
//! train_domains =
//! eval_beam = 1
//! eval_margin = 8
//!
//! [data]
//! vocab_size = 16
//! raw_dim = 2
//! stack = 4
//! hop = 3
//! domains = search,farfield,telephony,youtube
//! train_utts_per_domain = 2000
//! test_utts_per_domain = 200
//! longform_domain = search
//! longform_gap = 8
//! seed = 1000
//! ; per-domain overrides: <domain>.noise_std, <domain>.weight
//! youtube.noise_std = 0.5
//!
//! [decode]
//! beam_width = 8
//! adaptive_margin = 8
//! expansion_cap = 10
//! ```
//!
//! Comments must sit on their own line; text after a value is part of it.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::decoder::SearchLimits;
use crate::error::{Error, Result};
use crate::longform::{StateStrategy, StrategyKind};
use crate::model::{JointMode, LayerDims, ModelConfig};
use crate::recipe::{model_config_for, DataConfig, DomainOverride};
use crate::trainer::TrainConfig;
use crate::corpus::SamplingStrategy;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Domains to train on; empty means every generated domain.
    pub train_domains: Vec<String>,
    pub data: DataConfig,
    pub decode: SearchLimits,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            model: model_config_for(&data),
            train: TrainConfig::default(),
            train_domains: Vec::new(),
            data,
            decode: SearchLimits::default(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_layers(section: &str, key: &str, value: &str) -> Result<Vec<LayerDims>> {
    value
        .split(',')
        .map(|item| {
            let (h, p) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("[{section}] {key}: expected HIDDENxPROJ, got '{item}'")))?;
            Ok(LayerDims {
                hidden: parse(section, key, h)?,
                proj: parse(section, key, p)?,
            })
        })
        .collect()
}

fn format_layers(layers: &[LayerDims]) -> String {
    layers
        .iter()
        .map(|l| format!("{}x{}", l.hidden, l.proj))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Applies one `[model]` key.
pub fn set_model_key(model: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    const S: &str = "model";
    match key {
        "feature_dim" => model.feature_dim = parse(S, key, value)?,
        "encoder_layers" => model.encoder_layers = parse_layers(S, key, value)?,
        "time_reduction_after" => model.time_reduction_after = parse(S, key, value)?,
        "time_reduction_factor" => model.time_reduction_factor = parse(S, key, value)?,
        "prediction_layers" => model.prediction_layers = parse_layers(S, key, value)?,
        "joint_dim" => model.joint_dim = parse(S, key, value)?,
        "joint_mode" => model.joint_mode = JointMode::parse(value.trim())?,
        "vocab_size" => model.vocab_size = parse(S, key, value)?,
        "embedding_dim" => model.embedding_dim = parse(S, key, value)?,
        "blank_id" => model.blank_id = parse(S, key, value)?,
        "sos_id" => model.sos_id = parse(S, key, value)?,
        _ => return Err(Error::Config(format!("unknown key [model] {key}"))),
    }
    Ok(())
}

/// `[model]` keys in canonical order.
pub fn model_pairs(model: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("feature_dim", model.feature_dim.to_string()),
        ("encoder_layers", format_layers(&model.encoder_layers)),
        ("time_reduction_after", model.time_reduction_after.to_string()),
        ("time_reduction_factor", model.time_reduction_factor.to_string()),
        ("prediction_layers", format_layers(&model.prediction_layers)),
        ("joint_dim", model.joint_dim.to_string()),
        ("joint_mode", model.joint_mode.as_str().to_string()),
        ("vocab_size", model.vocab_size.to_string()),
        ("embedding_dim", model.embedding_dim.to_string()),
        ("blank_id", model.blank_id.to_string()),
        ("sos_id", model.sos_id.to_string()),
    ]
}

fn set_train_key(cfg: &mut ExperimentConfig, key: &str, value: &str, rss_full: &mut Option<bool>) -> Result<()> {
    const S: &str = "train";
    let t = &mut cfg.train;
    match key {
        "batch_size" => t.batch_size = parse(S, key, value)?,
        "steps" => t.steps = parse(S, key, value)?,
        "eval_every" => t.eval_every = parse(S, key, value)?,
        "learning_rate" => t.learning_rate = parse(S, key, value)?,
        "warmup_steps" => t.warmup_steps = parse(S, key, value)?,
        "clip_norm" => t.clip_norm = parse(S, key, value)?,
        "seed" => t.seed = parse(S, key, value)?,
        "state_strategy" => t.state_strategy.kind = StrategyKind::parse(value.trim())?,
        "rss_scope" => {
            *rss_full = Some(match value.trim() {
                "full" => true,
                "encoder_only" => false,
                other => return Err(Error::Config(format!("[train] rss_scope: unknown scope '{other}'"))),
            })
        }
        "rsp_pass_probability" => t.state_strategy.pass_probability = parse(S, key, value)?,
        "rsp_pool_capacity" => t.pool_capacity = parse(S, key, value)?,
        "sampling" => t.sampling = SamplingStrategy::parse(value.trim())?,
        "eval_beam" => t.eval_beam = parse(S, key, value)?,
        "eval_margin" => t.eval_margin = parse(S, key, value)?,
        "train_domains" => cfg.train_domains = parse_list(value),
        _ => return Err(Error::Config(format!("unknown key [train] {key}"))),
    }
    Ok(())
}

fn set_data_key(d: &mut DataConfig, key: &str, value: &str) -> Result<()> {
    const S: &str = "data";
    if let Some((domain, field)) = key.split_once('.') {
        let idx = match d.overrides.iter().position(|o| o.domain == domain) {
            Some(i) => i,
            None => {
                d.overrides.push(DomainOverride {
                    domain: domain.to_string(),
                    ..DomainOverride::default()
                });
                d.overrides.len() - 1
            }
        };
        let o = &mut d.overrides[idx];
        match field {
            "noise_std" => o.noise_std = Some(parse(S, key, value)?),
            "weight" => o.weight = Some(parse(S, key, value)?),
            _ => return Err(Error::Config(format!("unknown key [data] {key}"))),
        }
        return Ok(());
    }
    match key {
        "vocab_size" => d.vocab_size = parse(S, key, value)?,
        "raw_dim" => d.raw_dim = parse(S, key, value)?,
        "stack" => d.frontend.stack = parse(S, key, value)?,
        "hop" => d.frontend.hop = parse(S, key, value)?,
        "domains" => d.domains = parse_list(value),
        "train_utts_per_domain" => d.train_utts_per_domain = parse(S, key, value)?,
        "test_utts_per_domain" => d.test_utts_per_domain = parse(S, key, value)?,
        "longform_domain" => d.longform_domain = value.trim().to_string(),
        "longform_gap" => d.longform_gap = parse(S, key, value)?,
        "seed" => d.seed = parse(S, key, value)?,
        _ => return Err(Error::Config(format!("unknown key [data] {key}"))),
    }
    Ok(())
}

fn set_decode_key(l: &mut SearchLimits, key: &str, value: &str) -> Result<()> {
    const S: &str = "decode";
    match key {
        "beam_width" => l.beam_width = parse(S, key, value)?,
        "adaptive_margin" => l.adaptive_margin = parse(S, key, value)?,
        "expansion_cap" => l.expansion_cap = parse(S, key, value)?,
        _ => return Err(Error::Config(format!("unknown key [decode] {key}"))),
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("INI syntax: {e}")))?;
        let mut cfg = ExperimentConfig::default();
        let mut model_keys: Vec<(String, String)> = Vec::new();
        let mut rss_full = None;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                match section {
                    Some("model") => model_keys.push((key.to_string(), value.to_string())),
                    Some("train") => set_train_key(&mut cfg, key, value, &mut rss_full)?,
                    Some("data") => set_data_key(&mut cfg.data, key, value)?,
                    Some("decode") => set_decode_key(&mut cfg.decode, key, value)?,
                    Some(other) => return Err(Error::Config(format!("unknown section [{other}]"))),
                    None => return Err(Error::Config(format!("key '{key}' outside any section"))),
                }
            }
        }
        // Data shapes the defaults of the model's input and output sizes.
        cfg.model = model_config_for(&cfg.data);
        for (k, v) in &model_keys {
            set_model_key(&mut cfg.model, k, v)?;
        }
        if !model_keys.iter().any(|(k, _)| k == "sos_id") {
            cfg.model.sos_id = cfg.model.vocab_size + 1;
        }
        if cfg.train.state_strategy.kind == StrategyKind::Rss && rss_full != Some(true) {
            cfg.train.state_strategy.kind = StrategyKind::RssEncoderOnly;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.decode.validate()?;
        if self.model.feature_dim != self.data.frontend.output_dim(self.data.raw_dim) {
            return Err(Error::Config(format!(
                "[model] feature_dim {} does not match the frontend output {}",
                self.model.feature_dim,
                self.data.frontend.output_dim(self.data.raw_dim)
            )));
        }
        if self.model.vocab_size != self.data.vocab_size {
            return Err(Error::Config("[model] vocab_size must equal [data] vocab_size".into()));
        }
        if self.model.blank_id != 0 {
            return Err(Error::Config("synthetic corpora use label ids 1..=V, so blank_id must be 0".into()));
        }
        for d in &self.train_domains {
            if !self.data.domains.contains(d) {
                return Err(Error::Config(format!("[train] train_domains: '{d}' is not a generated domain")));
            }
        }
        Ok(())
    }

    /// Canonical INI text; parsing it gives back an equal config.
    pub fn to_ini_string(&self) -> String {
        let mut s = String::from("[model]\n");
        for (k, v) in model_pairs(&self.model) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        let t = &self.train;
        let (strategy, scope) = match t.state_strategy.kind {
            StrategyKind::Zero => ("zero", "encoder_only"),
            StrategyKind::Rss => ("rss", "full"),
            StrategyKind::RssEncoderOnly => ("rss", "encoder_only"),
            StrategyKind::Rsp => ("rsp", "encoder_only"),
        };
        s.push_str("\n[train]\n");
        for (k, v) in [
            ("batch_size", t.batch_size.to_string()),
            ("steps", t.steps.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("seed", t.seed.to_string()),
            ("state_strategy", strategy.to_string()),
            ("rss_scope", scope.to_string()),
            ("rsp_pass_probability", t.state_strategy.pass_probability.to_string()),
            ("rsp_pool_capacity", t.pool_capacity.to_string()),
            ("sampling", t.sampling.as_str().to_string()),
            ("train_domains", self.train_domains.join(",")),
            ("eval_beam", t.eval_beam.to_string()),
            ("eval_margin", t.eval_margin.to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        let d = &self.data;
        s.push_str("\n[data]\n");
        for (k, v) in [
            ("vocab_size", d.vocab_size.to_string()),
            ("raw_dim", d.raw_dim.to_string()),
            ("stack", d.frontend.stack.to_string()),
            ("hop", d.frontend.hop.to_string()),
            ("domains", d.domains.join(",")),
            ("train_utts_per_domain", d.train_utts_per_domain.to_string()),
            ("test_utts_per_domain", d.test_utts_per_domain.to_string()),
            ("longform_domain", d.longform_domain.clone()),
            ("longform_gap", d.longform_gap.to_string()),
            ("seed", d.seed.to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for o in &d.overrides {
            if let Some(n) = o.noise_std {
                s.push_str(&format!("{}.noise_std = {n}\n", o.domain));
            }
            if let Some(w) = o.weight {
                s.push_str(&format!("{}.weight = {w}\n", o.domain));
            }
        }
        s.push_str(&format!(
            "\n[decode]\nbeam_width = {}\nadaptive_margin = {}\nexpansion_cap = {}\n",
            self.decode.beam_width, self.decode.adaptive_margin, self.decode.expansion_cap
        ));
        s
    }
}

/// Rebuilds a model config from `[model]` pairs, e.g. a checkpoint snapshot.
pub fn model_config_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<ModelConfig> {
    let mut model = ModelConfig::default();
    for (k, v) in pairs {
        set_model_key(&mut model, k, v)?;
    }
    model.validate()?;
    Ok(model)
}

/// Strategy label as accepted on the command line.
pub fn strategy_from_cli(name: &str, rss_full: bool) -> Result<StateStrategy> {
    let kind = match StrategyKind::parse(name)? {
        StrategyKind::Rss if !rss_full => StrategyKind::RssEncoderOnly,
        k => k,
    };
    Ok(StateStrategy::new(kind))
}
