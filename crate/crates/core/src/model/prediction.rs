use super::{RnntModel, RnntParams, TokenId};
use crate::error::{Error, Result};
use crate::nn::{LstmCache, LstmCellState, Matrix};

/// Prediction-network rows `p_0..p_U`. Row `u` has consumed the initial token
/// and `y_1..y_u`.
///
/// `final_state` is the state before `last_token` (= `y_U`, or the initial
/// token when `U = 0`) was consumed, matching [`super::RecurrentState`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub rows: Matrix,
    pub final_state: Vec<LstmCellState>,
    pub last_token: TokenId,
}

#[derive(Debug, Clone)]
pub struct PredictionCache {
    embedding_rows: Vec<usize>,
    steps: Vec<Vec<LstmCache>>,
}

impl RnntModel {
    pub fn predict(
        &self,
        tokens: &[TokenId],
        init_state: &[LstmCellState],
        init_token: TokenId,
    ) -> Result<PredictionOutput> {
        self.predict_impl(tokens, init_state, init_token, false).map(|(out, _)| out)
    }

    pub(crate) fn predict_cached(
        &self,
        tokens: &[TokenId],
        init_state: &[LstmCellState],
        init_token: TokenId,
    ) -> Result<(PredictionOutput, PredictionCache)> {
        self.predict_impl(tokens, init_state, init_token, true)
    }

    /// Feeds one token through the prediction stack.
    pub fn prediction_step(
        &self,
        token: TokenId,
        state: &[LstmCellState],
    ) -> Result<(Vec<f64>, Vec<LstmCellState>)> {
        if state.len() != self.params.prediction.len() {
            return Err(Error::shape("prediction state", self.params.prediction.len(), state.len()));
        }
        let row = self.config.embedding_row(token)?;
        let mut x = self.params.embedding.row(row).to_vec();
        let mut next = Vec::with_capacity(state.len());
        for (layer, s) in self.params.prediction.iter().zip(state) {
            let (out, ns) = layer.step(&x, s)?;
            next.push(ns);
            x = out;
        }
        Ok((x, next))
    }

    fn predict_impl(
        &self,
        tokens: &[TokenId],
        init_state: &[LstmCellState],
        init_token: TokenId,
        keep_cache: bool,
    ) -> Result<(PredictionOutput, PredictionCache)> {
        if let Some(&b) = tokens.iter().find(|&&t| !self.config.is_label(t)) {
            return Err(Error::Contract(format!(
                "label sequence contains non-label id {b} (blank is {})",
                self.config.blank_id
            )));
        }
        if init_state.len() != self.params.prediction.len() {
            return Err(Error::shape(
                "prediction init state",
                self.params.prediction.len(),
                init_state.len(),
            ));
        }
        let inputs: Vec<TokenId> = std::iter::once(init_token).chain(tokens.iter().copied()).collect();
        let embedding_rows = inputs
            .iter()
            .map(|&t| self.config.embedding_row(t))
            .collect::<Result<Vec<_>>>()?;

        let mut seq: Vec<Vec<f64>> = embedding_rows
            .iter()
            .map(|&r| self.params.embedding.row(r).to_vec())
            .collect();
        let mut steps = Vec::new();
        let mut final_state = Vec::with_capacity(init_state.len());
        let last = inputs.len() - 1;
        for (i, layer) in self.params.prediction.iter().enumerate() {
            let mut state = init_state[i].clone();
            let mut pre_last = state.clone();
            let mut outputs = Vec::with_capacity(seq.len());
            let mut caches = Vec::new();
            for (u, x) in seq.iter().enumerate() {
                if u == last {
                    pre_last = state.clone();
                }
                let (out, next, cache) = layer.step_cached(x, &state)?;
                outputs.push(out);
                state = next;
                if keep_cache {
                    caches.push(cache);
                }
            }
            final_state.push(pre_last);
            steps.push(caches);
            seq = outputs;
        }

        let mut rows = Matrix::zeros(0, self.config.prediction_output_dim());
        for r in &seq {
            rows.push_row(r);
        }
        Ok((
            PredictionOutput {
                rows,
                final_state,
                last_token: inputs[last],
            },
            PredictionCache {
                embedding_rows,
                steps,
            },
        ))
    }

    pub(crate) fn prediction_backward(
        &self,
        cache: &PredictionCache,
        grad_rows: &Matrix,
        grads: &mut RnntParams,
    ) -> Result<Vec<LstmCellState>> {
        let layers = &self.params.prediction;
        if cache.steps.len() != layers.len() || grad_rows.rows() != cache.embedding_rows.len() {
            return Err(Error::Contract("prediction cache does not match gradient".into()));
        }
        let mut d_seq: Vec<Vec<f64>> = (0..grad_rows.rows()).map(|u| grad_rows.row(u).to_vec()).collect();
        let mut init_grads = vec![LstmCellState::zeros(0, 0); layers.len()];
        for i in (0..layers.len()).rev() {
            let layer = &layers[i];
            let steps = &cache.steps[i];
            let mut d_state = layer.zero_state();
            let mut d_in = vec![Vec::new(); steps.len()];
            for u in (0..steps.len()).rev() {
                let (dx, ds) = layer.step_backward(&steps[u], &d_seq[u], &d_state, &mut grads.prediction[i])?;
                d_in[u] = dx;
                d_state = ds;
            }
            init_grads[i] = d_state;
            d_seq = d_in;
        }
        for (&r, dx) in cache.embedding_rows.iter().zip(&d_seq) {
            for (g, d) in grads.embedding.row_mut(r).iter_mut().zip(dx) {
                *g += d;
            }
        }
        Ok(init_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> RnntModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RnntModel::new(ModelConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn empty_sequence_gives_single_sos_row() {
        let m = model(1);
        let zero = m.zero_state();
        let out = m.predict(&[], &zero.prediction, m.config.sos_id).unwrap();
        assert_eq!(out.rows.rows(), 1);
        assert_eq!(out.last_token, m.config.sos_id);
        assert_eq!(out.final_state, zero.prediction);
        let (p, _) = m.prediction_step(m.config.sos_id, &zero.prediction).unwrap();
        assert_eq!(out.rows.row(0), p.as_slice());
    }

    #[test]
    fn blank_input_is_a_contract_violation() {
        let m = model(2);
        let zero = m.zero_state();
        assert!(matches!(
            m.predict(&[3, 0, 4], &zero.prediction, m.config.sos_id),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn carried_state_matches_concatenation() {
        let m = model(3);
        let zero = m.zero_state();
        let (y1, y2) = (vec![3, 9, 1], vec![5, 5, 12, 2]);
        let joined: Vec<usize> = y1.iter().chain(&y2).copied().collect();
        let whole = m.predict(&joined, &zero.prediction, m.config.sos_id).unwrap();
        let first = m.predict(&y1, &zero.prediction, m.config.sos_id).unwrap();
        assert_eq!(first.last_token, 1);
        let second = m.predict(&y2, &first.final_state, first.last_token).unwrap();
        for u in 0..=y2.len() {
            for (a, b) in second.rows.row(u).iter().zip(whole.rows.row(y1.len() + u)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn history_changes_rows_with_same_final_token() {
        let m = model(4);
        let zero = m.zero_state();
        let a = m.predict(&[2, 7], &zero.prediction, m.config.sos_id).unwrap();
        let b = m.predict(&[11, 7], &zero.prediction, m.config.sos_id).unwrap();
        let diff: f64 = a.rows.row(2).iter().zip(b.rows.row(2)).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn rows_are_causal() {
        let m = model(5);
        let zero = m.zero_state();
        let a = m.predict(&[2, 7, 4, 8], &zero.prediction, m.config.sos_id).unwrap();
        let b = m.predict(&[2, 7, 13, 1], &zero.prediction, m.config.sos_id).unwrap();
        for u in 0..=2 {
            assert_eq!(a.rows.row(u), b.rows.row(u));
        }
        assert_ne!(a.rows.row(3), b.rows.row(3));
    }
}
