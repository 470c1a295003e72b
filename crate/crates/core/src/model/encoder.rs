use super::{RnntModel, RnntParams};
use crate::error::{Error, Result};
use crate::nn::{LstmCache, LstmCellState, Matrix};

/// Encoder frames `h_enc` (one row per reduced frame) and the final per-layer
/// states, ready to seed the next chunk of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub frames: Matrix,
    pub final_state: Vec<LstmCellState>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    steps: Vec<Vec<LstmCache>>,
}

fn stack_frames(seq: Vec<Vec<f64>>, factor: usize) -> Vec<Vec<f64>> {
    seq.chunks_exact(factor).map(|group| group.concat()).collect()
}

impl RnntModel {
    /// Runs the encoder from `init_state`. Input frames beyond the last full
    /// time-reduction group are dropped, so `T' = floor(T / factor)`.
    pub fn encode(&self, features: &Matrix, init_state: &[LstmCellState]) -> Result<EncoderOutput> {
        self.encode_impl(features, init_state, false).map(|(out, _)| out)
    }

    pub(crate) fn encode_cached(
        &self,
        features: &Matrix,
        init_state: &[LstmCellState],
    ) -> Result<(EncoderOutput, EncoderCache)> {
        self.encode_impl(features, init_state, true)
    }

    fn encode_impl(
        &self,
        features: &Matrix,
        init_state: &[LstmCellState],
        keep_cache: bool,
    ) -> Result<(EncoderOutput, EncoderCache)> {
        let cfg = &self.config;
        if features.cols() != cfg.feature_dim && !(features.rows() == 0 && features.cols() == 0) {
            return Err(Error::shape("encoder features", cfg.feature_dim, features.cols()));
        }
        if init_state.len() != self.params.encoder.len() {
            return Err(Error::shape(
                "encoder init state",
                self.params.encoder.len(),
                init_state.len(),
            ));
        }

        let factor = cfg.time_reduction_factor;
        let used = features.rows() / factor * factor;
        let mut seq: Vec<Vec<f64>> = (0..used).map(|t| features.row(t).to_vec()).collect();
        let mut final_state = Vec::with_capacity(init_state.len());
        let mut steps = Vec::new();

        for (i, layer) in self.params.encoder.iter().enumerate() {
            if i == cfg.time_reduction_after {
                seq = stack_frames(seq, factor);
            }
            let mut state = init_state[i].clone();
            let mut outputs = Vec::with_capacity(seq.len());
            let mut caches = Vec::new();
            for x in &seq {
                let (out, next, cache) = layer.step_cached(x, &state)?;
                outputs.push(out);
                state = next;
                if keep_cache {
                    caches.push(cache);
                }
            }
            if seq.is_empty() {
                // no frames: still validate the carried state
                if state.cell.len() != layer.hidden_dim() || state.memory.len() != layer.proj_dim() {
                    return Err(Error::shape("encoder init state", layer.hidden_dim(), state.cell.len()));
                }
            }
            final_state.push(state);
            steps.push(caches);
            seq = outputs;
        }

        let width = cfg.encoder_output_dim();
        let mut frames = Matrix::zeros(0, width);
        for row in &seq {
            frames.push_row(row);
        }
        Ok((EncoderOutput { frames, final_state }, EncoderCache { steps }))
    }

    /// Backprop through the encoder. Returns the gradient w.r.t. the initial
    /// per-layer states.
    pub(crate) fn encoder_backward(
        &self,
        cache: &EncoderCache,
        grad_frames: &Matrix,
        grads: &mut RnntParams,
    ) -> Result<Vec<LstmCellState>> {
        let cfg = &self.config;
        let layers = &self.params.encoder;
        if cache.steps.len() != layers.len() {
            return Err(Error::Contract("encoder cache does not match model".into()));
        }
        let top = cache.steps.last().map_or(0, Vec::len);
        if grad_frames.rows() != top {
            return Err(Error::shape("encoder grad frames", top, grad_frames.rows()));
        }

        let mut d_seq: Vec<Vec<f64>> = (0..grad_frames.rows()).map(|t| grad_frames.row(t).to_vec()).collect();
        let mut init_grads = vec![LstmCellState::zeros(0, 0); layers.len()];
        for i in (0..layers.len()).rev() {
            let layer = &layers[i];
            let steps = &cache.steps[i];
            if steps.len() != d_seq.len() {
                return Err(Error::Contract("encoder cache length mismatch".into()));
            }
            let mut d_state = layer.zero_state();
            let mut d_in = vec![Vec::new(); steps.len()];
            for t in (0..steps.len()).rev() {
                let (dx, ds) = layer.step_backward(&steps[t], &d_seq[t], &d_state, &mut grads.encoder[i])?;
                d_in[t] = dx;
                d_state = ds;
            }
            init_grads[i] = d_state;
            if i == cfg.time_reduction_after && i > 0 {
                let factor = cfg.time_reduction_factor;
                let width = layer.input_dim() / factor;
                d_in = d_in
                    .into_iter()
                    .flat_map(|v| v.chunks(width).map(<[f64]>::to_vec).collect::<Vec<_>>())
                    .collect();
            }
            d_seq = d_in;
        }
        Ok(init_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn reduction_halves_frame_count_and_drops_odd_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = RnntModel::new(ModelConfig::default(), &mut rng).unwrap();
        let zero = model.zero_state().encoder;
        for (t, expected) in [(6, 3), (7, 3), (1, 0), (0, 0)] {
            let x = random_features(t, 8, &mut rng);
            let out = model.encode(&x, &zero).unwrap();
            assert_eq!(out.frames.rows(), expected, "T = {t}");
            assert_eq!(out.frames.cols(), 16);
        }
    }

    #[test]
    fn empty_input_passes_state_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = RnntModel::new(ModelConfig::default(), &mut rng).unwrap();
        let mut init = model.zero_state().encoder;
        init[1].cell[3] = 0.7;
        let out = model.encode(&Matrix::zeros(0, 8), &init).unwrap();
        assert_eq!(out.frames.rows(), 0);
        assert_eq!(out.final_state, init);
    }

    #[test]
    fn zero_weights_give_zero_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::default();
        let model = RnntModel::from_parts(cfg.clone(), RnntParams::zeros(&cfg)).unwrap();
        let x = random_features(10, 8, &mut rng);
        let out = model.encode(&x, &model.zero_state().encoder).unwrap();
        assert!(out.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunked_encoding_equals_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = RnntModel::new(ModelConfig::default(), &mut rng).unwrap();
        let x = random_features(14, 8, &mut rng);
        let whole = model.encode(&x, &model.zero_state().encoder).unwrap();
        let first = Matrix::from_vec(6, 8, x.data()[..48].to_vec()).unwrap();
        let second = Matrix::from_vec(8, 8, x.data()[48..].to_vec()).unwrap();
        let a = model.encode(&first, &model.zero_state().encoder).unwrap();
        let b = model.encode(&second, &a.final_state).unwrap();
        let joined: Vec<f64> = a.frames.data().iter().chain(b.frames.data()).copied().collect();
        assert_eq!(joined.len(), whole.frames.len());
        for (u, v) in joined.iter().zip(whole.frames.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
        assert_eq!(b.final_state, whole.final_state);
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = RnntModel::new(ModelConfig::default(), &mut rng).unwrap();
        let x = Matrix::zeros(4, 7);
        assert!(model.encode(&x, &model.zero_state().encoder).is_err());
    }
}
