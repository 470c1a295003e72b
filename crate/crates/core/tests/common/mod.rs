#![allow(dead_code)]

use std::io::Write;

use longform_rnnt::loss::{rnnt_forward, rnnt_grad_logits};
use longform_rnnt::model::{JointMode, LayerDims, ModelConfig, RecurrentState, RnntModel, RnntParams, TokenId};
use longform_rnnt::nn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Written straight to the stderr handle so it shows even when libtest
/// captures test output.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("{verdict} criterion {criterion:>2}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Small random architecture; every parameter is perturbed so no gradient
/// is structurally zero.
pub fn tiny_model(rng: &mut ChaCha8Rng, vocab: usize) -> RnntModel {
    let dims = |rng: &mut ChaCha8Rng| LayerDims {
        hidden: rng.random_range(2..=4),
        proj: rng.random_range(2..=3),
    };
    let enc_layers = rng.random_range(1..=2);
    let mut cfg = ModelConfig {
        feature_dim: rng.random_range(2..=3),
        encoder_layers: (0..enc_layers).map(|_| dims(rng)).collect(),
        time_reduction_after: rng.random_range(0..enc_layers),
        time_reduction_factor: 2,
        prediction_layers: vec![dims(rng)],
        joint_dim: rng.random_range(2..=4),
        joint_mode: if rng.random_bool(0.5) { JointMode::Concat } else { JointMode::Additive },
        vocab_size: vocab,
        embedding_dim: rng.random_range(2..=3),
        blank_id: 0,
        sos_id: vocab + 1,
    };
    if cfg.joint_mode == JointMode::Additive {
        cfg.prediction_layers[0].proj = cfg.encoder_layers[enc_layers - 1].proj;
    }
    let mut model = RnntModel::new(cfg, rng).unwrap();
    for m in model.params.tensors_mut() {
        for v in m.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

pub fn random_state(model: &RnntModel, rng: &mut ChaCha8Rng) -> RecurrentState {
    let mut s = model.zero_state();
    for v in s.values_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    s.last_token = rng.random_range(1..=model.config.vocab_size);
    s
}

pub fn random_tokens(vocab: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(1..=vocab)).collect()
}

/// `−log P(y|x)` through the full model.
pub fn model_loss(model: &RnntModel, x: &Matrix, y: &[TokenId], init: &RecurrentState) -> f64 {
    let fwd = model.forward_lattice(x, y, init).unwrap();
    rnnt_forward(&fwd.lattice, y, model.config.blank_id).unwrap().loss()
}

/// Analytic parameter gradients of `model_loss`.
pub fn model_grads(model: &RnntModel, x: &Matrix, y: &[TokenId], init: &RecurrentState) -> RnntParams {
    let fwd = model.forward_lattice(x, y, init).unwrap();
    let dp = rnnt_forward(&fwd.lattice, y, model.config.blank_id).unwrap();
    let g = rnnt_grad_logits(&fwd.lattice, y, model.config.blank_id, &dp).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward_lattice(&fwd.cache, &g, &mut grads).unwrap();
    grads
}

/// Relative error with a floor of 1e-3 on the denominator. Central
/// differences at h = 1e-6 carry ~eps·|L|/h ≈ 1e-9 of roundoff, so smaller
/// gradients cannot be resolved to 1e-5 relative.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_name: String,
    /// Analytic and numeric values at the worst element.
    pub worst_pair: (f64, f64),
}

/// Central differences over every parameter of `model`.
pub fn gradcheck(model: &RnntModel, x: &Matrix, y: &[TokenId], init: &RecurrentState, step: f64) -> GradCheck {
    let analytic = model_grads(model, x, y, init);
    let mut probe = model.clone();
    let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_name: String::new(),
        worst_pair: (0.0, 0.0),
    };
    for (ti, name) in names.iter().enumerate() {
        let len = analytic.tensors()[ti].len();
        for k in 0..len {
            let orig = probe.params.tensors()[ti].data()[k];
            probe.params.tensors_mut()[ti].data_mut()[k] = orig + step;
            let plus = model_loss(&probe, x, y, init);
            probe.params.tensors_mut()[ti].data_mut()[k] = orig - step;
            let minus = model_loss(&probe, x, y, init);
            probe.params.tensors_mut()[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(analytic.tensors()[ti].data()[k], numeric);
            out.checked += 1;
            if e > out.worst {
                out.worst = e;
                out.worst_name = format!("{name}[{k}]");
                out.worst_pair = (analytic.tensors()[ti].data()[k], numeric);
            }
        }
    }
    out
}

/// A gradient-check instance: model, features, labels and initial state,
/// with enough frames for the labels.
pub fn gradcheck_instance(seed: u64) -> (RnntModel, Matrix, Vec<TokenId>, RecurrentState) {
    let mut r = rng(seed);
    let vocab = r.random_range(2..=3);
    let model = tiny_model(&mut r, vocab);
    let reduced = r.random_range(1..=3);
    let raw = reduced * model.config.time_reduction_factor + r.random_range(0..2);
    let x = random_matrix(raw, model.config.feature_dim, 1.0, &mut r);
    let y = random_tokens(vocab, r.random_range(0..=3), &mut r);
    let init = if r.random_bool(0.5) { random_state(&model, &mut r) } else { model.zero_state() };
    (model, x, y, init)
}

/// Levenshtein distance by memoized recursion; shares nothing with the
/// library's table-filling alignment.
pub fn levenshtein(a: &[TokenId], b: &[TokenId]) -> usize {
    fn go(a: &[TokenId], b: &[TokenId], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}
