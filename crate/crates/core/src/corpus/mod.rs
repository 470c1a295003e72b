//! Synthetic multidomain speech-like data.
//!
//! Every label token owns a prototype point in a low-dimensional raw feature
//! space; an utterance is a run of noisy prototype frames separated by
//! silence, pushed through a per-domain affine channel and a stacking
//! frontend. Domains differ in channel, noise and utterance length.

mod io;

pub use io::{
    read_features, read_manifest, write_features, write_manifest, load_corpus, save_corpus, ManifestEntry,
    MANIFEST_FILE,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::nn::Matrix;

pub const DEFAULT_STACK: usize = 4;
pub const DEFAULT_HOP: usize = 3;
pub const DEFAULT_RAW_DIM: usize = 2;
pub const DEFAULT_VOCAB: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frontend {
    pub stack: usize,
    pub hop: usize,
}

impl Default for Frontend {
    fn default() -> Self {
        Self {
            stack: DEFAULT_STACK,
            hop: DEFAULT_HOP,
        }
    }
}

impl Frontend {
    pub fn output_dim(&self, raw_dim: usize) -> usize {
        self.stack * raw_dim
    }

    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        frontend_stack(raw, self.stack, self.hop)
    }
}

/// Output frame `i` concatenates raw frames `[i·hop, i·hop + stack)`,
/// zero-padded past the end; `ceil(T / hop)` frames in total.
pub fn frontend_stack(raw: &Matrix, stack: usize, hop: usize) -> Result<Matrix> {
    if stack == 0 || hop == 0 {
        return Err(Error::Contract(format!("frontend needs stack >= 1 and hop >= 1 (got {stack}, {hop})")));
    }
    let (t, d) = raw.shape();
    let frames = t.div_ceil(hop);
    let mut out = Matrix::zeros(frames, stack * d);
    for i in 0..frames {
        let row = out.row_mut(i);
        for s in 0..stack {
            let src = i * hop + s;
            if src < t {
                row[s * d..(s + 1) * d].copy_from_slice(raw.row(src));
            }
        }
    }
    Ok(out)
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("{what}: min {} > max {}", self.min, self.max)));
        }
        Ok(())
    }
}

/// Per-token mean raw frames. Row 0 is silence; row `k` belongs to token `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub means: Matrix,
}

impl PrototypeTable {
    /// Silence at the origin; labels alternate between an inner ring of
    /// radius 1.5 and an outer ring of radius 3 (offset by half a step).
    /// Only the first two raw dimensions are used for the rings.
    pub fn rings(vocab_size: usize, raw_dim: usize) -> Result<Self> {
        if raw_dim < 2 {
            return Err(Error::Config("raw feature dimension must be at least 2".into()));
        }
        let inner = vocab_size.div_ceil(2);
        let outer = vocab_size - inner;
        let mut means = Matrix::zeros(vocab_size + 1, raw_dim);
        for k in 0..vocab_size {
            let (radius, idx, count, offset) = if k < inner {
                (1.5, k, inner, 0.0)
            } else {
                (3.0, k - inner, outer, 0.5)
            };
            let angle = std::f64::consts::TAU * (idx as f64 + offset) / count as f64;
            means.set(k + 1, 0, radius * angle.cos());
            means.set(k + 1, 1, radius * angle.sin());
        }
        Ok(Self { means })
    }

    pub fn vocab_size(&self) -> usize {
        self.means.rows() - 1
    }

    pub fn raw_dim(&self) -> usize {
        self.means.cols()
    }
}

/// Variation applied on top of a parent domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Subdomain {
    pub name: String,
    pub weight_hours: f64,
    pub bias_shift: Vec<f64>,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub prototypes: PrototypeTable,
    /// Raw frames per token.
    pub token_duration: Span,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_std: f64,
    /// Tokens per utterance.
    pub length: Span,
    pub lead_silence: Span,
    pub trail_silence: Span,
    /// Probability of a pause between two tokens, and its length.
    pub pause_probability: f64,
    pub pause: Span,
    pub subdomains: Vec<Subdomain>,
    /// Sampling weight under count-weighted sampling.
    pub weight_hours: f64,
}

impl DomainSpec {
    /// Identity channel with moderate noise and short utterances.
    pub fn base(name: &str, prototypes: PrototypeTable) -> Self {
        let d = prototypes.raw_dim();
        Self {
            name: name.to_string(),
            prototypes,
            token_duration: Span::new(6, 12),
            gain: vec![1.0; d],
            bias: vec![0.0; d],
            noise_std: 0.4,
            length: Span::new(2, 8),
            lead_silence: Span::new(3, 9),
            trail_silence: Span::new(6, 12),
            pause_probability: 0.2,
            pause: Span::new(2, 6),
            subdomains: Vec::new(),
            weight_hours: 1.0,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.prototypes.raw_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.raw_dim();
        let ctx = |m: &str| format!("domain '{}': {m}", self.name);
        if self.gain.len() != d || self.bias.len() != d {
            return Err(Error::Config(ctx("gain and bias must match the raw dimension")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(ctx("noise_std must be finite and >= 0")));
        }
        if self.token_duration.min == 0 {
            return Err(Error::Config(ctx("token durations must be at least one frame")));
        }
        if !(0.0..=1.0).contains(&self.pause_probability) {
            return Err(Error::Config(ctx("pause probability must be in [0, 1]")));
        }
        if self.prototypes.vocab_size() < 2 && self.length.max > 1 {
            return Err(Error::Config(ctx("need at least two tokens to avoid immediate repeats")));
        }
        if !(self.weight_hours >= 0.0 && self.weight_hours.is_finite()) {
            return Err(Error::Config(ctx("weight must be finite and >= 0")));
        }
        for (span, what) in [
            (self.token_duration, "token duration"),
            (self.length, "length"),
            (self.lead_silence, "lead silence"),
            (self.trail_silence, "trail silence"),
            (self.pause, "pause"),
        ] {
            span.validate(&ctx(what))?;
        }
        for s in &self.subdomains {
            if s.bias_shift.len() != d || !(s.noise_scale >= 0.0) || !(s.weight_hours >= 0.0) {
                return Err(Error::Config(ctx(&format!("invalid subdomain '{}'", s.name))));
            }
        }
        Ok(())
    }

    /// This domain with subdomain `idx` folded in (no subdomains left).
    pub fn resolve(&self, idx: Option<usize>) -> DomainSpec {
        let mut out = self.clone();
        out.subdomains.clear();
        if let Some(s) = idx.and_then(|i| self.subdomains.get(i)) {
            out.name = format!("{}/{}", self.name, s.name);
            for (b, d) in out.bias.iter_mut().zip(&s.bias_shift) {
                *b += d;
            }
            out.noise_std *= s.noise_scale;
            out.weight_hours = s.weight_hours;
        }
        out
    }

    fn emit<R: Rng + ?Sized>(&self, row: usize, frames: usize, noise: &Normal<f64>, out: &mut Matrix, rng: &mut R) {
        let mean = self.prototypes.means.row(row);
        let mut frame = vec![0.0; self.raw_dim()];
        for _ in 0..frames {
            for (i, f) in frame.iter_mut().enumerate() {
                *f = self.gain[i] * mean[i] + self.bias[i];
                if self.noise_std > 0.0 {
                    *f += noise.sample(rng);
                }
            }
            out.push_row(&frame);
        }
    }

    /// Raw frames and tokens before the frontend.
    pub fn synthesize_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Matrix, Vec<TokenId>) {
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("validated noise_std");
        let vocab = self.prototypes.vocab_size();
        let count = self.length.sample(rng);
        let mut tokens: Vec<TokenId> = Vec::with_capacity(count);
        for _ in 0..count {
            loop {
                let k = rng.random_range(1..=vocab);
                if tokens.last() != Some(&k) {
                    tokens.push(k);
                    break;
                }
            }
        }
        let mut raw = Matrix::zeros(0, self.raw_dim());
        let lead = self.lead_silence.sample(rng);
        self.emit(0, lead, &noise, &mut raw, rng);
        for (i, &k) in tokens.iter().enumerate() {
            if i > 0 && rng.random::<f64>() < self.pause_probability {
                let p = self.pause.sample(rng);
                self.emit(0, p, &noise, &mut raw, rng);
            }
            let dur = self.token_duration.sample(rng);
            self.emit(k, dur, &noise, &mut raw, rng);
        }
        let trail = self.trail_silence.sample(rng);
        self.emit(0, trail, &noise, &mut raw, rng);
        (raw, tokens)
    }

    /// `frames` post-frontend frames of noisy silence through this channel.
    pub fn silence_features<R: Rng + ?Sized>(&self, frames: usize, frontend: &Frontend, rng: &mut R) -> Result<Matrix> {
        if frames == 0 {
            return Ok(Matrix::zeros(0, frontend.output_dim(self.raw_dim())));
        }
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("validated noise_std");
        let mut raw = Matrix::zeros(0, self.raw_dim());
        self.emit(0, (frames - 1) * frontend.hop + frontend.stack, &noise, &mut raw, rng);
        let mut out = frontend.apply(&raw)?;
        let keep = out.data()[..frames * out.cols()].to_vec();
        out = Matrix::from_vec(frames, frontend.output_dim(self.raw_dim()), keep)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: String,
    /// Post-frontend features.
    pub features: Matrix,
    pub tokens: Vec<TokenId>,
    /// `None` when loaded from disk.
    pub raw_frame_count: Option<usize>,
}

pub fn synthesize_utterance<R: Rng + ?Sized>(
    domain: &DomainSpec,
    frontend: &Frontend,
    id: impl Into<String>,
    rng: &mut R,
) -> Result<Utterance> {
    let (raw, tokens) = domain.synthesize_raw(rng);
    Ok(Utterance {
        id: id.into(),
        domain: domain.name.clone(),
        features: frontend.apply(&raw)?,
        tokens,
        raw_frame_count: Some(raw.rows()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    UniformDomain,
    UniformSubdomain,
    CountWeighted,
}

impl SamplingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::UniformDomain => "uniform_domain",
            SamplingStrategy::UniformSubdomain => "uniform_subdomain",
            SamplingStrategy::CountWeighted => "count_weighted",
        }
    }

    /// Accepts `_` or `-` separators.
    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "uniform_domain" => Ok(SamplingStrategy::UniformDomain),
            "uniform_subdomain" => Ok(SamplingStrategy::UniformSubdomain),
            "count_weighted" => Ok(SamplingStrategy::CountWeighted),
            _ => Err(Error::Config(format!("unknown sampling strategy '{s}'"))),
        }
    }
}

/// A (domain, subdomain) pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainChoice {
    pub domain: usize,
    pub subdomain: Option<usize>,
}

fn draw_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Contract("sampling weights must have a positive finite sum".into()));
    }
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return Ok(i);
        }
        x -= w;
    }
    Ok(weights.iter().rposition(|&w| w > 0.0).expect("positive total"))
}

/// Selection probability of every (domain, subdomain) leaf under `strategy`.
pub fn sampling_probabilities(strategy: SamplingStrategy, domains: &[DomainSpec]) -> Result<Vec<(DomainChoice, f64)>> {
    if domains.is_empty() {
        return Err(Error::Contract("no domains to sample from".into()));
    }
    let leaves = |d: usize| -> Vec<(DomainChoice, f64)> {
        let spec = &domains[d];
        if spec.subdomains.is_empty() {
            return vec![(DomainChoice { domain: d, subdomain: None }, 1.0)];
        }
        spec.subdomains
            .iter()
            .enumerate()
            .map(|(i, s)| (DomainChoice { domain: d, subdomain: Some(i) }, s.weight_hours))
            .collect()
    };
    let normalize = |v: Vec<(DomainChoice, f64)>| -> Result<Vec<(DomainChoice, f64)>> {
        let total: f64 = v.iter().map(|x| x.1).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Contract("sampling weights must have a positive finite sum".into()));
        }
        Ok(v.into_iter().map(|(c, w)| (c, w / total)).collect())
    };
    let mut out = Vec::new();
    match strategy {
        SamplingStrategy::UniformSubdomain => {
            let all: Vec<_> = (0..domains.len()).flat_map(leaves).map(|(c, _)| (c, 1.0)).collect();
            return normalize(all);
        }
        SamplingStrategy::UniformDomain | SamplingStrategy::CountWeighted => {
            let top: Vec<f64> = match strategy {
                SamplingStrategy::UniformDomain => vec![1.0; domains.len()],
                _ => domains.iter().map(|d| d.weight_hours).collect(),
            };
            let top = normalize(
                top.into_iter()
                    .enumerate()
                    .map(|(i, w)| (DomainChoice { domain: i, subdomain: None }, w))
                    .collect(),
            )?;
            for (c, p) in top {
                let sub = leaves(c.domain);
                let sub = if strategy == SamplingStrategy::UniformDomain {
                    normalize(sub.into_iter().map(|(c, _)| (c, 1.0)).collect())?
                } else {
                    normalize(sub).or_else(|_| normalize(leaves(c.domain).into_iter().map(|(c, _)| (c, 1.0)).collect()))?
                };
                out.extend(sub.into_iter().map(|(sc, sp)| (sc, p * sp)));
            }
        }
    }
    Ok(out)
}

pub fn sample_domain_choice<R: Rng + ?Sized>(
    strategy: SamplingStrategy,
    domains: &[DomainSpec],
    rng: &mut R,
) -> Result<DomainChoice> {
    let probs = sampling_probabilities(strategy, domains)?;
    let weights: Vec<f64> = probs.iter().map(|x| x.1).collect();
    Ok(probs[draw_weighted(&weights, rng)?].0)
}

/// Draws a domain (with its subdomain folded in).
pub fn sample_domain<R: Rng + ?Sized>(
    strategy: SamplingStrategy,
    domains: &[DomainSpec],
    rng: &mut R,
) -> Result<DomainSpec> {
    let c = sample_domain_choice(strategy, domains, rng)?;
    Ok(domains[c.domain].resolve(c.subdomain))
}

/// `batch_size` independent domain draws, one fresh utterance each.
pub fn make_minibatch<R: Rng + ?Sized>(
    strategy: SamplingStrategy,
    domains: &[DomainSpec],
    batch_size: usize,
    frontend: &Frontend,
    id_prefix: &str,
    rng: &mut R,
) -> Result<Vec<Utterance>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    (0..batch_size)
        .map(|i| {
            let d = sample_domain(strategy, domains, rng)?;
            synthesize_utterance(&d, frontend, format!("{id_prefix}{i}"), rng)
        })
        .collect()
}

/// Concatenates consecutive groups of `concat_count` sources, inserting
/// `gap` (a block of silence features) between pieces. A trailing group
/// with fewer than `concat_count` pieces is dropped.
pub fn build_longform_set(sources: &[Utterance], concat_count: usize, gap: &Matrix) -> Result<Vec<Utterance>> {
    if concat_count == 0 {
        return Err(Error::Contract("concat_count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(sources.len() / concat_count);
    for group in sources.chunks_exact(concat_count) {
        let dim = group[0].features.cols();
        if gap.rows() > 0 && gap.cols() != dim {
            return Err(Error::shape("long-form gap", dim, gap.cols()));
        }
        let mut features = Matrix::zeros(0, dim);
        let mut tokens = Vec::new();
        let mut raw = Some(0usize);
        for (i, u) in group.iter().enumerate() {
            if u.features.cols() != dim {
                return Err(Error::shape("long-form piece", dim, u.features.cols()));
            }
            if i > 0 {
                for r in 0..gap.rows() {
                    features.push_row(gap.row(r));
                }
            }
            for r in 0..u.features.rows() {
                features.push_row(u.features.row(r));
            }
            tokens.extend_from_slice(&u.tokens);
            raw = raw.zip(u.raw_frame_count).map(|(a, b)| a + b);
        }
        let id = group.iter().map(|u| u.id.as_str()).collect::<Vec<_>>().join("+");
        out.push(Utterance {
            id,
            domain: group[0].domain.clone(),
            features,
            tokens,
            raw_frame_count: if concat_count == 1 { raw } else { None },
        });
    }
    Ok(out)
}

/// Four domains with the role structure of a large production mix: one
/// dominant long-utterance domain, one tiny mismatched-channel domain.
pub fn default_domains(vocab_size: usize, raw_dim: usize) -> Result<Vec<DomainSpec>> {
    let protos = PrototypeTable::rings(vocab_size, raw_dim)?;

    let mut search = DomainSpec::base("search", protos.clone());
    search.weight_hours = 56.0;

    let mut farfield = DomainSpec::base("farfield", protos.clone());
    farfield.gain = vec![0.8; raw_dim];
    farfield.bias = (0..raw_dim).map(|i| if i == 1 { 0.6 } else { 0.0 }).collect();
    farfield.noise_std = search.noise_std * 1.5;
    farfield.length = Span::new(2, 6);
    farfield.weight_hours = 38.0;

    let mut telephony = DomainSpec::base("telephony", protos.clone());
    telephony.gain = vec![0.5; raw_dim];
    telephony.bias = (0..raw_dim).map(|i| if i == 0 { 1.5 } else { -1.0 }).collect();
    telephony.noise_std = search.noise_std;
    telephony.length = Span::new(2, 8);
    telephony.weight_hours = 4.0;

    let mut youtube = DomainSpec::base("youtube", protos);
    youtube.length = Span::new(12, 24);
    youtube.pause_probability = 0.3;
    youtube.weight_hours = 190.0;
    youtube.subdomains = [("news", 0.3, 80.0), ("education", -0.3, 70.0), ("music", 0.0, 40.0)]
        .iter()
        .map(|&(name, shift, w)| Subdomain {
            name: name.to_string(),
            weight_hours: w,
            bias_shift: (0..raw_dim).map(|i| if i == 0 { shift } else { 0.0 }).collect(),
            noise_scale: if name == "music" { 1.5 } else { 1.0 },
        })
        .collect();

    Ok(vec![search, farfield, telephony, youtube])
}
