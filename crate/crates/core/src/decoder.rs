//! Frame-synchronous beam search with an adaptive margin and merging of
//! hypotheses that share a token sequence, plus greedy and exhaustive
//! reference decoders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::rnnt_forward;
use crate::model::{RecurrentState, RnntModel, TokenId};
use crate::nn::{log_add, log_softmax, LstmCellState, Matrix};

pub const DEFAULT_EXPANSION_CAP: usize = 10;
pub const DEFAULT_ADAPTIVE_MARGIN: f64 = 8.0;
/// Largest number of candidate sequences [`oracle_decode`] will score.
pub const ORACLE_SEQUENCE_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchLimits {
    pub beam_width: usize,
    /// Candidates scoring below `best − adaptive_margin` are dropped.
    pub adaptive_margin: f64,
    /// Non-blank emissions allowed per frame before blank is forced.
    pub expansion_cap: usize,
}

impl SearchLimits {
    pub fn new(beam_width: usize, adaptive_margin: f64) -> Self {
        Self {
            beam_width,
            adaptive_margin,
            expansion_cap: DEFAULT_EXPANSION_CAP,
        }
    }

    pub fn greedy() -> Self {
        Self::new(1, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.adaptive_margin.is_nan() || self.adaptive_margin < 0.0 {
            return Err(Error::Config(format!(
                "adaptive margin must be >= 0, got {}",
                self.adaptive_margin
            )));
        }
        Ok(())
    }
}

impl Default for SearchLimits {
    fn default() -> Self {
        Self::new(8, DEFAULT_ADAPTIVE_MARGIN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Labels emitted since the search started.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Prediction state after consuming `last_token`.
    pub pred_state: Vec<LstmCellState>,
    /// Prediction state before `last_token`; exported as the carry state.
    pub pre_state: Vec<LstmCellState>,
    pub last_token: TokenId,
    pred_part: Vec<f64>,
}

impl Hypothesis {
    /// Root hypothesis continuing from `state`.
    pub fn root(model: &RnntModel, state: &RecurrentState) -> Result<Self> {
        state.check_shape(&model.config)?;
        let (out, post) = model.prediction_step(state.last_token, &state.prediction)?;
        Ok(Self {
            tokens: Vec::new(),
            log_prob: 0.0,
            pred_state: post,
            pre_state: state.prediction.clone(),
            last_token: state.last_token,
            pred_part: model.joint_pred_part(&out)?,
        })
    }

    fn extend(&self, model: &RnntModel, token: TokenId, log_prob: f64) -> Result<Self> {
        let (out, post) = model.prediction_step(token, &self.pred_state)?;
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Ok(Self {
            tokens,
            log_prob,
            pre_state: self.pred_state.clone(),
            pred_state: post,
            last_token: token,
            pred_part: model.joint_pred_part(&out)?,
        })
    }
}

/// Hypotheses with pairwise distinct token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub hypotheses: Vec<Hypothesis>,
    pub beam_width: usize,
    pub adaptive_margin: f64,
}

impl Beam {
    pub fn new(root: Hypothesis, limits: &SearchLimits) -> Self {
        Self {
            hypotheses: vec![root],
            beam_width: limits.beam_width,
            adaptive_margin: limits.adaptive_margin,
        }
    }

    /// Highest score; ties go to the lexicographically smaller sequence.
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }
}

/// Per-frame search statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Largest number of live hypotheses held at once.
    pub peak_hypotheses: usize,
    /// Hypotheses whose blank was forced by the expansion cap.
    pub forced_blanks: usize,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn merge(into: &mut BTreeMap<Vec<TokenId>, Hypothesis>, hyp: Hypothesis) {
    match into.get_mut(&hyp.tokens) {
        Some(existing) => {
            let total = log_add(existing.log_prob, hyp.log_prob);
            // Prediction state is a function of the tokens, so both branches
            // carry the same state.
            debug_assert!(existing.pred_state == hyp.pred_state);
            if hyp.log_prob > existing.log_prob {
                *existing = hyp;
            }
            existing.log_prob = total;
        }
        None => {
            into.insert(hyp.tokens.clone(), hyp);
        }
    }
}

/// Sorts by score (ties by token order), drops everything below
/// `reference − margin`, keeps at most `width`.
fn prune(set: BTreeMap<Vec<TokenId>, Hypothesis>, reference: f64, margin: f64, width: usize) -> Vec<Hypothesis> {
    let mut hyps: Vec<Hypothesis> = set.into_values().collect();
    // BTreeMap iteration is already token-ordered; a stable sort keeps that for ties.
    hyps.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    hyps.retain(|h| h.log_prob >= reference - margin);
    hyps.truncate(width);
    hyps
}

fn best_score<'a>(sets: impl IntoIterator<Item = &'a BTreeMap<Vec<TokenId>, Hypothesis>>) -> f64 {
    sets.into_iter()
        .flat_map(|s| s.values())
        .map(|h| h.log_prob)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Consumes one encoder frame.
pub fn decode_step(
    model: &RnntModel,
    frame_enc: &[f64],
    beam: &Beam,
    limits: &SearchLimits,
) -> Result<(Beam, StepStats)> {
    limits.validate()?;
    if beam.hypotheses.is_empty() {
        return Err(Error::Contract("decode_step on an empty beam".into()));
    }
    let blank = model.config.blank_id;
    let margin = limits.adaptive_margin;
    let enc_part = model.joint_enc_part(frame_enc)?;

    let mut stats = StepStats {
        peak_hypotheses: beam.hypotheses.len(),
        forced_blanks: 0,
    };
    let mut advanced: BTreeMap<Vec<TokenId>, Hypothesis> = BTreeMap::new();
    let mut frontier = beam.hypotheses.clone();

    for round in 0..=limits.expansion_cap {
        let mut next: BTreeMap<Vec<TokenId>, Hypothesis> = BTreeMap::new();
        let at_cap = round == limits.expansion_cap;
        for hyp in &frontier {
            let (_, logits) = model.joint_from_parts(&enc_part, &hyp.pred_part);
            let lp = log_softmax(&logits)?;
            let top = argmax(&lp);
            let best = lp[top];

            let keep_blank = top == blank || lp[blank] > best - margin;
            if keep_blank || at_cap {
                if !keep_blank {
                    stats.forced_blanks += 1;
                    log::debug!("expansion cap reached; forcing blank after {} tokens", hyp.tokens.len());
                }
                let mut done = hyp.clone();
                done.log_prob += lp[blank];
                merge(&mut advanced, done);
            }
            if at_cap {
                continue;
            }
            for k in model.config.labels() {
                if k == top || lp[k] > best - margin {
                    merge(&mut next, hyp.extend(model, k, hyp.log_prob + lp[k])?);
                }
            }
        }
        if next.is_empty() {
            stats.peak_hypotheses = stats.peak_hypotheses.max(advanced.len());
            break;
        }
        let reference = best_score([&advanced, &next]);
        frontier = prune(next, reference, margin, limits.beam_width);
        stats.peak_hypotheses = stats.peak_hypotheses.max(advanced.len() + frontier.len());
    }

    let reference = best_score([&advanced]);
    let hypotheses = prune(advanced, reference, margin, limits.beam_width);
    Ok((
        Beam {
            hypotheses,
            beam_width: limits.beam_width,
            adaptive_margin: margin,
        },
        stats,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Carry state for continuing on the next chunk of the same stream.
    pub final_state: RecurrentState,
    /// Encoder frames consumed.
    pub frames: usize,
    pub peak_hypotheses: usize,
    pub forced_blanks: usize,
}

/// Streams `features` through the encoder one reduction group at a time and
/// runs the beam search frame by frame. Only the beam and the recurrent
/// states are held between frames.
pub fn decode_utterance(
    model: &RnntModel,
    features: &Matrix,
    init_state: &RecurrentState,
    limits: &SearchLimits,
) -> Result<DecodeResult> {
    limits.validate()?;
    let cfg = &model.config;
    if features.cols() != cfg.feature_dim {
        return Err(Error::shape("decode features", cfg.feature_dim, features.cols()));
    }
    let mut beam = Beam::new(Hypothesis::root(model, init_state)?, limits);
    let mut enc_state = init_state.encoder.clone();
    let group = cfg.time_reduction_factor;
    let groups = features.rows() / group;
    let mut peak = 1;
    let mut forced = 0;
    for g in 0..groups {
        let chunk = Matrix::from_vec(
            group,
            cfg.feature_dim,
            features.data()[g * group * cfg.feature_dim..(g + 1) * group * cfg.feature_dim].to_vec(),
        )?;
        let enc = model.encode(&chunk, &enc_state)?;
        enc_state = enc.final_state;
        for t in 0..enc.frames.rows() {
            let (next, stats) = decode_step(model, enc.frames.row(t), &beam, limits)?;
            peak = peak.max(stats.peak_hypotheses);
            forced += stats.forced_blanks;
            beam = next;
        }
    }
    let best = beam.best().expect("beam is never empty after a step");
    Ok(DecodeResult {
        tokens: best.tokens.clone(),
        log_prob: best.log_prob,
        final_state: RecurrentState {
            encoder: enc_state,
            prediction: best.pre_state.clone(),
            last_token: best.last_token,
        },
        frames: groups,
        peak_hypotheses: peak,
        forced_blanks: forced,
    })
}

/// Argmax decoding: emit the most likely symbol until it is blank, then move
/// to the next frame.
pub fn greedy_decode(model: &RnntModel, features: &Matrix, init_state: &RecurrentState) -> Result<DecodeResult> {
    let cfg = &model.config;
    if features.cols() != cfg.feature_dim {
        return Err(Error::shape("decode features", cfg.feature_dim, features.cols()));
    }
    let enc = model.encode(features, &init_state.encoder)?;
    let mut hyp = Hypothesis::root(model, init_state)?;
    let mut forced = 0;
    for t in 0..enc.frames.rows() {
        let enc_part = model.joint_enc_part(enc.frames.row(t))?;
        let mut emitted = 0;
        loop {
            let (_, logits) = model.joint_from_parts(&enc_part, &hyp.pred_part);
            let lp = log_softmax(&logits)?;
            let top = argmax(&lp);
            if top == cfg.blank_id || emitted == DEFAULT_EXPANSION_CAP {
                if top != cfg.blank_id {
                    forced += 1;
                    log::debug!("expansion cap reached at frame {t}; forcing blank");
                }
                hyp.log_prob += lp[cfg.blank_id];
                break;
            }
            hyp = hyp.extend(model, top, hyp.log_prob + lp[top])?;
            emitted += 1;
        }
    }
    Ok(DecodeResult {
        tokens: hyp.tokens,
        log_prob: hyp.log_prob,
        final_state: RecurrentState {
            encoder: enc.final_state,
            prediction: hyp.pre_state,
            last_token: hyp.last_token,
        },
        frames: enc.frames.rows(),
        peak_hypotheses: 1,
        forced_blanks: forced,
    })
}

/// Scores every label sequence of length `≤ u_max` with the exact loss and
/// returns the most likely one with its log-probability. Ties go to the
/// lexicographically smaller sequence.
pub fn oracle_decode(model: &RnntModel, features: &Matrix, u_max: usize) -> Result<(Vec<TokenId>, f64)> {
    let labels: Vec<TokenId> = model.config.labels().collect();
    let mut count: usize = 0;
    let mut level: usize = 1;
    for _ in 0..=u_max {
        count = count.saturating_add(level);
        level = level.saturating_mul(labels.len());
    }
    if count > ORACLE_SEQUENCE_CAP {
        return Err(Error::OracleCap(format!(
            "{count} candidate sequences exceed {ORACLE_SEQUENCE_CAP}"
        )));
    }
    let zero = model.zero_state();
    let enc = model.encode(features, &zero.encoder)?;
    let blank = model.config.blank_id;

    let mut best: Option<(Vec<TokenId>, f64)> = None;
    let mut seq: Vec<TokenId> = Vec::new();
    let mut stack: Vec<Vec<TokenId>> = vec![Vec::new()];
    // depth-first in lexicographic order
    while let Some(candidate) = stack.pop() {
        seq.clone_from(&candidate);
        let pred = model.predict(&seq, &zero.prediction, zero.last_token)?;
        let mut lattice = crate::model::LogitLattice::zeros(enc.frames.rows(), seq.len(), model.config.output_dim());
        for t in 0..enc.frames.rows() {
            for u in 0..=seq.len() {
                let z = model.joint(enc.frames.row(t), pred.rows.row(u))?;
                lattice.cell_mut(t, u).copy_from_slice(&z);
            }
        }
        let ll = rnnt_forward(&lattice, &seq, blank)?.log_likelihood;
        let better = match &best {
            None => true,
            Some((bs, bl)) => ll > *bl || (ll == *bl && seq < *bs),
        };
        if better {
            best = Some((seq.clone(), ll));
        }
        if seq.len() < u_max {
            for &k in labels.iter().rev() {
                let mut child = seq.clone();
                child.push(k);
                stack.push(child);
            }
        }
    }
    Ok(best.expect("the empty sequence is always scored"))
}

/// One line of decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub log_prob: f64,
    pub frames: usize,
}

/// Human-readable rendering of a token sequence.
pub fn token_text(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ")
}
