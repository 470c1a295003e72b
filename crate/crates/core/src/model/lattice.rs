use super::{EncoderCache, EncoderOutput, PredictionCache, PredictionOutput, RecurrentState, RnntModel, RnntParams, TokenId};
use crate::error::{Error, Result};
use crate::nn::{LstmCellState, Matrix};

/// Joint-network logits for every `(t, u)` cell, `t < T'`, `u ≤ U`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice {
    frames: usize,
    labels: usize,
    width: usize,
    data: Vec<f64>,
}

impl LogitLattice {
    pub fn zeros(frames: usize, labels: usize, width: usize) -> Self {
        Self {
            frames,
            labels,
            width,
            data: vec![0.0; frames * (labels + 1) * width],
        }
    }

    /// Builds a lattice from a flat `[t][u][k]` buffer.
    pub fn from_vec(frames: usize, labels: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * (labels + 1) * width {
            return Err(Error::shape(
                "LogitLattice::from_vec",
                frames * (labels + 1) * width,
                data.len(),
            ));
        }
        Ok(Self {
            frames,
            labels,
            width,
            data,
        })
    }

    /// `T'`
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U`
    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Logits per cell (`|Y| + 1`).
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let o = (t * (self.labels + 1) + u) * self.width;
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn cell_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let o = (t * (self.labels + 1) + u) * self.width;
        &mut self.data[o..o + self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Activations kept by [`RnntModel::forward_lattice`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LatticeCache {
    encoder: EncoderCache,
    enc_frames: Matrix,
    prediction: PredictionCache,
    pred_rows: Matrix,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LatticeForward {
    pub lattice: LogitLattice,
    pub encoder: EncoderOutput,
    pub prediction: PredictionOutput,
    /// State after consuming the whole utterance under teacher forcing.
    pub final_state: RecurrentState,
    pub cache: LatticeCache,
}

/// Gradient of a scalar w.r.t. the initial recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub encoder: Vec<LstmCellState>,
    pub prediction: Vec<LstmCellState>,
}

impl RnntModel {
    pub fn forward_lattice(
        &self,
        features: &Matrix,
        tokens: &[TokenId],
        init_state: &RecurrentState,
    ) -> Result<LatticeForward> {
        init_state.check_shape(&self.config)?;
        let (encoder, enc_cache) = self.encode_cached(features, &init_state.encoder)?;
        let (prediction, pred_cache) =
            self.predict_cached(tokens, &init_state.prediction, init_state.last_token)?;

        let frames = encoder.frames.rows();
        let labels = tokens.len();
        let width = self.config.output_dim();
        let jd = self.config.joint_dim;

        let enc_parts: Vec<Vec<f64>> = (0..frames)
            .map(|t| self.joint_enc_part(encoder.frames.row(t)))
            .collect::<Result<_>>()?;
        let pred_parts: Vec<Vec<f64>> = (0..=labels)
            .map(|u| self.joint_pred_part(prediction.rows.row(u)))
            .collect::<Result<_>>()?;

        let mut lattice = LogitLattice::zeros(frames, labels, width);
        let mut hidden = vec![0.0; frames * (labels + 1) * jd];
        for t in 0..frames {
            for u in 0..=labels {
                let (h, z) = self.joint_from_parts(&enc_parts[t], &pred_parts[u]);
                let o = (t * (labels + 1) + u) * jd;
                hidden[o..o + jd].copy_from_slice(&h);
                lattice.cell_mut(t, u).copy_from_slice(&z);
            }
        }

        let final_state = RecurrentState {
            encoder: encoder.final_state.clone(),
            prediction: prediction.final_state.clone(),
            last_token: prediction.last_token,
        };
        let cache = LatticeCache {
            encoder: enc_cache,
            enc_frames: encoder.frames.clone(),
            prediction: pred_cache,
            pred_rows: prediction.rows.clone(),
            hidden,
        };
        Ok(LatticeForward {
            lattice,
            encoder,
            prediction,
            final_state,
            cache,
        })
    }

    /// Reverse pass from `∂L/∂logits`. Parameter gradients are accumulated into
    /// `grads`; the initial-state gradient is returned.
    pub fn backward_lattice(
        &self,
        cache: &LatticeCache,
        grad_logits: &LogitLattice,
        grads: &mut RnntParams,
    ) -> Result<StateGrad> {
        let frames = cache.enc_frames.rows();
        let labels = cache.pred_rows.rows().saturating_sub(1);
        if grad_logits.frames() != frames
            || grad_logits.labels() != labels
            || grad_logits.width() != self.config.output_dim()
        {
            return Err(Error::Contract(format!(
                "gradient lattice {}x{}x{} does not match cached forward {}x{}x{}",
                grad_logits.frames(),
                grad_logits.labels(),
                grad_logits.width(),
                frames,
                labels,
                self.config.output_dim()
            )));
        }
        let jd = self.config.joint_dim;
        let mut d_enc_part = vec![vec![0.0; jd]; frames];
        let mut d_pred_part = vec![vec![0.0; jd]; labels + 1];
        let mut d_hidden = vec![0.0; jd];
        for t in 0..frames {
            for u in 0..=labels {
                let dz = grad_logits.cell(t, u);
                if dz.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let o = (t * (labels + 1) + u) * jd;
                let h = &cache.hidden[o..o + jd];
                grads.joint_out_w.outer_acc(h, dz);
                for (b, g) in grads.joint_out_b.data_mut().iter_mut().zip(dz) {
                    *b += g;
                }
                d_hidden.iter_mut().for_each(|v| *v = 0.0);
                self.params.joint_out_w.mul_vec_acc(dz, &mut d_hidden);
                for j in 0..jd {
                    let d_pre = d_hidden[j] * (1.0 - h[j] * h[j]);
                    d_enc_part[t][j] += d_pre;
                    d_pred_part[u][j] += d_pre;
                }
            }
        }

        let enc_width = self.config.encoder_output_dim();
        let pred_width = self.config.prediction_output_dim();
        let pred_offset = self.pred_row_offset();
        let w1 = &self.params.joint_hidden_w;

        let mut grad_frames = Matrix::zeros(frames, enc_width);
        for t in 0..frames {
            grads.joint_hidden_w.outer_acc_rows(0, cache.enc_frames.row(t), &d_enc_part[t]);
            w1.mul_vec_acc_rows(0, &d_enc_part[t], grad_frames.row_mut(t));
        }
        let mut grad_rows = Matrix::zeros(labels + 1, pred_width);
        for u in 0..=labels {
            for (b, g) in grads.joint_hidden_b.data_mut().iter_mut().zip(&d_pred_part[u]) {
                *b += g;
            }
            grads
                .joint_hidden_w
                .outer_acc_rows(pred_offset, cache.pred_rows.row(u), &d_pred_part[u]);
            w1.mul_vec_acc_rows(pred_offset, &d_pred_part[u], grad_rows.row_mut(u));
        }

        let encoder = self.encoder_backward(&cache.encoder, &grad_frames, grads)?;
        let prediction = self.prediction_backward(&cache.prediction, &grad_rows, grads)?;
        Ok(StateGrad { encoder, prediction })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (RnntModel, Matrix, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RnntModel::new(ModelConfig::default(), &mut rng).unwrap();
        let data = (0..10 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        (model, Matrix::from_vec(10, 8, data).unwrap(), rng)
    }

    #[test]
    fn single_cell_lattice() {
        let (model, x, _) = setup(1);
        let two = Matrix::from_vec(2, 8, x.data()[..16].to_vec()).unwrap();
        let fwd = model.forward_lattice(&two, &[], &model.zero_state()).unwrap();
        assert_eq!((fwd.lattice.frames(), fwd.lattice.labels()), (1, 0));
        assert_eq!(fwd.lattice.data().len(), 17);
    }

    #[test]
    fn lattice_matches_independent_recomputation() {
        let (model, x, _) = setup(2);
        let tokens = [4, 1, 16];
        let zero = model.zero_state();
        let fwd = model.forward_lattice(&x, &tokens, &zero).unwrap();
        let enc = model.encode(&x, &zero.encoder).unwrap();
        let pred = model.predict(&tokens, &zero.prediction, model.config.sos_id).unwrap();
        for t in 0..enc.frames.rows() {
            for u in 0..=tokens.len() {
                let z = model.joint(enc.frames.row(t), pred.rows.row(u)).unwrap();
                for (a, b) in z.iter().zip(fwd.lattice.cell(t, u)) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_prediction_params_make_rows_constant_over_u() {
        let (mut model, x, _) = setup(3);
        for layer in &mut model.params.prediction {
            layer.tensors_mut().into_iter().for_each(|m| m.fill(0.0));
        }
        model.params.embedding.fill(0.0);
        let fwd = model.forward_lattice(&x, &[2, 5], &model.zero_state()).unwrap();
        for t in 0..fwd.lattice.frames() {
            for u in 1..=2 {
                assert_eq!(fwd.lattice.cell(t, u), fwd.lattice.cell(t, 0));
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let (model, x, _) = setup(4);
        let mut state = model.zero_state();
        state.encoder[0].cell[0] = 0.5;
        let fwd = model.forward_lattice(&x, &[3, 3], &state).unwrap();
        let zero = LogitLattice::zeros(fwd.lattice.frames(), 2, 17);
        let mut grads = model.params.zeros_like();
        let sg = model.backward_lattice(&fwd.cache, &zero, &mut grads).unwrap();
        assert!(grads.tensors().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(sg.encoder.iter().chain(&sg.prediction).all(|s| s.values().all(|&v| v == 0.0)));
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let (model, x, _) = setup(5);
        let fwd = model.forward_lattice(&x, &[3], &model.zero_state()).unwrap();
        let wrong = LogitLattice::zeros(fwd.lattice.frames(), 2, 17);
        let mut grads = model.params.zeros_like();
        assert!(matches!(
            model.backward_lattice(&fwd.cache, &wrong, &mut grads),
            Err(Error::Contract(_))
        ));
    }
}
