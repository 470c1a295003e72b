//! Transducer negative log-likelihood by forward–backward over the alignment
//! lattice, with exact gradients w.r.t. the joint logits.
//!
//! Conventions (log domain, `b` = blank log-prob, `y` = next-label log-prob):
//!
//! ```text
//! α(0,0) = 0
//! α(t,u) = logadd(α(t−1,u) + b(t−1,u),  α(t,u−1) + y(t,u−1))
//! β(T'−1,U) = b(T'−1,U)
//! β(t,u) = logadd(β(t+1,u) + b(t,u),  β(t,u+1) + y(t,u))
//! log P(y|x) = α(T'−1,U) + b(T'−1,U) = β(0,0)
//! ```
//!
//! A path must end with the blank out of `(T'−1, U)`; emitting a label past
//! the last frame has no cell.

use crate::error::{Error, Result};
use crate::model::{LogitLattice, TokenId};
use crate::nn::{log_add, log_softmax};

/// Forward/backward variables and per-cell log-probs of one utterance.
#[derive(Debug, Clone)]
pub struct LatticeDp {
    frames: usize,
    labels: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    log_blank: Vec<f64>,
    log_label: Vec<f64>,
    pub log_likelihood: f64,
}

impl LatticeDp {
    #[inline]
    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.idx(t, u)]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[self.idx(t, u)]
    }

    pub fn log_blank(&self, t: usize, u: usize) -> f64 {
        self.log_blank[self.idx(t, u)]
    }

    /// Log-prob of emitting `y_{u+1}` at `(t, u)`; `u < U`.
    pub fn log_label(&self, t: usize, u: usize) -> f64 {
        self.log_label[t * self.labels + u]
    }

    /// `−log P(y|x)`
    pub fn loss(&self) -> f64 {
        -self.log_likelihood
    }

    /// `logadd` of `α + β` over the cells with `t + u = n`. Every path crosses
    /// each anti-diagonal exactly once, so this equals `log P(y|x)`.
    pub fn diagonal_log_mass(&self, n: usize) -> f64 {
        let mut acc = f64::NEG_INFINITY;
        for t in 0..self.frames {
            if n < t || n - t > self.labels {
                continue;
            }
            let u = n - t;
            acc = log_add(acc, self.alpha(t, u) + self.beta(t, u));
        }
        acc
    }
}

fn check_inputs(lattice: &LogitLattice, tokens: &[TokenId], blank_id: TokenId) -> Result<()> {
    if tokens.len() != lattice.labels() {
        return Err(Error::shape("rnnt tokens", lattice.labels(), tokens.len()));
    }
    if blank_id >= lattice.width() {
        return Err(Error::Contract(format!("blank id {blank_id} outside logit width {}", lattice.width())));
    }
    if let Some(&bad) = tokens.iter().find(|&&k| k == blank_id || k >= lattice.width()) {
        return Err(Error::Contract(format!("invalid label id {bad} in target sequence")));
    }
    if lattice.frames() == 0 {
        return Err(Error::ImpossibleAlignment {
            frames: 0,
            labels: tokens.len(),
        });
    }
    Ok(())
}

pub fn rnnt_forward(lattice: &LogitLattice, tokens: &[TokenId], blank_id: TokenId) -> Result<LatticeDp> {
    check_inputs(lattice, tokens, blank_id)?;
    let (frames, labels) = (lattice.frames(), lattice.labels());
    let cells = frames * (labels + 1);
    let mut log_blank = vec![0.0; cells];
    let mut log_label = vec![0.0; frames * labels];
    for t in 0..frames {
        for u in 0..=labels {
            let lp = log_softmax(lattice.cell(t, u))?;
            log_blank[t * (labels + 1) + u] = lp[blank_id];
            if u < labels {
                log_label[t * labels + u] = lp[tokens[u]];
            }
        }
    }

    let mut dp = LatticeDp {
        frames,
        labels,
        alpha: vec![f64::NEG_INFINITY; cells],
        beta: vec![f64::NEG_INFINITY; cells],
        log_blank,
        log_label,
        log_likelihood: f64::NEG_INFINITY,
    };

    for t in 0..frames {
        for u in 0..=labels {
            let value = if t == 0 && u == 0 {
                0.0
            } else {
                let mut acc = f64::NEG_INFINITY;
                if t > 0 {
                    acc = log_add(acc, dp.alpha(t - 1, u) + dp.log_blank(t - 1, u));
                }
                if u > 0 {
                    acc = log_add(acc, dp.alpha(t, u - 1) + dp.log_label(t, u - 1));
                }
                acc
            };
            let i = dp.idx(t, u);
            dp.alpha[i] = value;
        }
    }

    for t in (0..frames).rev() {
        for u in (0..=labels).rev() {
            let value = if t == frames - 1 && u == labels {
                dp.log_blank(t, u)
            } else {
                let mut acc = f64::NEG_INFINITY;
                if t + 1 < frames {
                    acc = log_add(acc, dp.beta(t + 1, u) + dp.log_blank(t, u));
                }
                if u < labels {
                    acc = log_add(acc, dp.beta(t, u + 1) + dp.log_label(t, u));
                }
                acc
            };
            let i = dp.idx(t, u);
            dp.beta[i] = value;
        }
    }

    dp.log_likelihood = dp.alpha(frames - 1, labels) + dp.log_blank(frames - 1, labels);
    if !dp.log_likelihood.is_finite() {
        return Err(Error::Divergence(format!("log-likelihood is {}", dp.log_likelihood)));
    }
    Ok(dp)
}

/// `∂(−log P(y|x)) / ∂z` for every logit of the lattice.
pub fn rnnt_grad_logits(
    lattice: &LogitLattice,
    tokens: &[TokenId],
    blank_id: TokenId,
    dp: &LatticeDp,
) -> Result<LogitLattice> {
    check_inputs(lattice, tokens, blank_id)?;
    if dp.frames != lattice.frames() || dp.labels != lattice.labels() {
        return Err(Error::Contract("dynamic-programming tables do not match the lattice".into()));
    }
    let (frames, labels) = (lattice.frames(), lattice.labels());
    let log_p = dp.log_likelihood;
    let mut grad = LogitLattice::zeros(frames, labels, lattice.width());
    for t in 0..frames {
        for u in 0..=labels {
            let a = dp.alpha(t, u);
            let blank_flow = if t + 1 < frames {
                (a + dp.log_blank(t, u) + dp.beta(t + 1, u) - log_p).exp()
            } else if u == labels {
                (a + dp.log_blank(t, u) - log_p).exp()
            } else {
                0.0
            };
            let label_flow = if u < labels {
                (a + dp.log_label(t, u) + dp.beta(t, u + 1) - log_p).exp()
            } else {
                0.0
            };
            let occupancy = blank_flow + label_flow;
            if occupancy == 0.0 {
                continue;
            }
            let lp = log_softmax(lattice.cell(t, u))?;
            let g = grad.cell_mut(t, u);
            for (k, v) in g.iter_mut().enumerate() {
                *v = lp[k].exp() * occupancy;
            }
            g[blank_id] -= blank_flow;
            if u < labels {
                g[tokens[u]] -= label_flow;
            }
        }
    }
    Ok(grad)
}

/// Largest `T' + U` the brute-force enumerator accepts.
pub const ENUMERATION_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentStep {
    Blank,
    Label,
}

/// One interleaving of `T'` blanks with the `U` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub steps: Vec<AlignmentStep>,
}

impl AlignmentPath {
    /// Concrete symbol sequence `ŷ` for target `tokens`.
    pub fn symbols(&self, tokens: &[TokenId], blank_id: TokenId) -> Vec<TokenId> {
        let mut next = tokens.iter();
        self.steps
            .iter()
            .map(|s| match s {
                AlignmentStep::Blank => blank_id,
                AlignmentStep::Label => *next.next().expect("path has more labels than tokens"),
            })
            .collect()
    }

    /// Whether the path stays inside the lattice: it must end with a blank,
    /// otherwise some label would be emitted after the last frame.
    pub fn is_in_lattice(&self) -> bool {
        matches!(self.steps.last(), Some(AlignmentStep::Blank))
    }
}

/// Every interleaving of `frames` blanks and `labels` labels,
/// `C(frames + labels, labels)` in total. Test-oracle use only.
pub fn enumerate_alignments(frames: usize, labels: usize) -> Result<Vec<AlignmentPath>> {
    if frames == 0 {
        return Err(Error::Contract("enumeration needs at least one frame".into()));
    }
    if frames + labels > ENUMERATION_CAP {
        return Err(Error::OracleCap(format!(
            "T' + U = {} exceeds {ENUMERATION_CAP}",
            frames + labels
        )));
    }
    let mut out = Vec::new();
    let mut steps = Vec::with_capacity(frames + labels);
    fn rec(b: usize, l: usize, steps: &mut Vec<AlignmentStep>, out: &mut Vec<AlignmentPath>) {
        if b == 0 && l == 0 {
            out.push(AlignmentPath { steps: steps.clone() });
            return;
        }
        if b > 0 {
            steps.push(AlignmentStep::Blank);
            rec(b - 1, l, steps, out);
            steps.pop();
        }
        if l > 0 {
            steps.push(AlignmentStep::Label);
            rec(b, l - 1, steps, out);
            steps.pop();
        }
    }
    rec(frames, labels, &mut steps, &mut out);
    Ok(out)
}

/// Log-probability of one alignment under the lattice, walking it cell by
/// cell. Paths that leave the lattice score `-inf`.
pub fn alignment_log_prob(
    lattice: &LogitLattice,
    tokens: &[TokenId],
    blank_id: TokenId,
    path: &AlignmentPath,
) -> Result<f64> {
    check_inputs(lattice, tokens, blank_id)?;
    let (mut t, mut u) = (0usize, 0usize);
    let mut total = 0.0;
    for step in &path.steps {
        if t >= lattice.frames() {
            return Ok(f64::NEG_INFINITY);
        }
        let lp = log_softmax(lattice.cell(t, u))?;
        match step {
            AlignmentStep::Blank => {
                total += lp[blank_id];
                t += 1;
            }
            AlignmentStep::Label => {
                if u >= tokens.len() {
                    return Err(Error::Contract("path has more labels than tokens".into()));
                }
                total += lp[tokens[u]];
                u += 1;
            }
        }
    }
    Ok(total)
}
