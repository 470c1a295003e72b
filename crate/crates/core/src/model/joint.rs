use super::{JointMode, RnntModel};
use crate::error::{Error, Result};

impl RnntModel {
    /// Logits for one (encoder frame, prediction row) pair, indexed by token id.
    pub fn joint(&self, enc_frame: &[f64], pred_row: &[f64]) -> Result<Vec<f64>> {
        let enc = self.joint_enc_part(enc_frame)?;
        let pred = self.joint_pred_part(pred_row)?;
        Ok(self.joint_from_parts(&enc, &pred).1)
    }

    /// Encoder contribution to the joint pre-activation.
    pub fn joint_enc_part(&self, enc_frame: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if enc_frame.len() != cfg.encoder_output_dim() {
            return Err(Error::shape("joint encoder input", cfg.encoder_output_dim(), enc_frame.len()));
        }
        let mut out = vec![0.0; cfg.joint_dim];
        self.params.joint_hidden_w.vec_mul_acc_rows(0, enc_frame, &mut out);
        Ok(out)
    }

    /// Prediction contribution to the joint pre-activation (bias included).
    pub fn joint_pred_part(&self, pred_row: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if pred_row.len() != cfg.prediction_output_dim() {
            return Err(Error::shape("joint prediction input", cfg.prediction_output_dim(), pred_row.len()));
        }
        let mut out = self.params.joint_hidden_b.row(0).to_vec();
        self.params
            .joint_hidden_w
            .vec_mul_acc_rows(self.pred_row_offset(), pred_row, &mut out);
        Ok(out)
    }

    pub(crate) fn pred_row_offset(&self) -> usize {
        match self.config.joint_mode {
            JointMode::Concat => self.config.encoder_output_dim(),
            JointMode::Additive => 0,
        }
    }

    /// Returns `(tanh hidden, logits)`.
    pub fn joint_from_parts(&self, enc_part: &[f64], pred_part: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = enc_part.iter().zip(pred_part).map(|(a, b)| (a + b).tanh()).collect();
        let mut logits = self.params.joint_out_b.row(0).to_vec();
        self.params.joint_out_w.vec_mul_acc(&hidden, &mut logits);
        (hidden, logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, RnntParams};
    use crate::nn::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder_layers = vec![crate::model::LayerDims { hidden: 2, proj: 2 }; 2];
        cfg.prediction_layers = vec![crate::model::LayerDims { hidden: 2, proj: 1 }];
        cfg.joint_dim = 2;
        cfg.vocab_size = 2;
        cfg.sos_id = 3;
        cfg
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let cfg = ModelConfig::default();
        let mut params = RnntParams::zeros(&cfg);
        for k in 0..cfg.output_dim() {
            params.joint_out_b.set(0, k, k as f64 * 0.1 - 0.3);
        }
        let model = RnntModel::from_parts(cfg.clone(), params).unwrap();
        let logits = model.joint(&[0.4; 16], &[-0.9; 16]).unwrap();
        assert_eq!(logits.len(), cfg.vocab_size + 1);
        assert_eq!(logits, model.params.joint_out_b.row(0));
    }

    #[test]
    fn hand_computed_two_layer_map() {
        let cfg = tiny_config();
        let mut params = RnntParams::zeros(&cfg);
        // rows 0..2 take the encoder frame, row 2 the prediction row
        params.joint_hidden_w =
            Matrix::from_rows(&[vec![0.5, -1.0], vec![0.25, 0.75], vec![2.0, -0.5]]).unwrap();
        params.joint_hidden_b = Matrix::from_vec(1, 2, vec![0.1, 0.2]).unwrap();
        params.joint_out_w = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.0, -1.0]]).unwrap();
        params.joint_out_b = Matrix::from_vec(1, 3, vec![0.0, 0.1, -0.1]).unwrap();
        let model = RnntModel::from_parts(cfg, params).unwrap();

        let (e, p) = ([0.6, -0.4], [0.8]);
        let h0 = (0.5 * 0.6 + 0.25 * -0.4 + 2.0 * 0.8 + 0.1f64).tanh();
        let h1 = (-1.0 * 0.6 + 0.75 * -0.4 - 0.5 * 0.8 + 0.2f64).tanh();
        let expected = [
            1.0 * h0 + 0.3 * h1,
            -2.0 * h0 + 0.1,
            0.5 * h0 - 1.0 * h1 - 0.1,
        ];
        let logits = model.joint(&e, &p).unwrap();
        for (a, b) in logits.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_mode_sums_inputs() {
        let mut cfg = ModelConfig::default();
        cfg.joint_mode = JointMode::Additive;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = RnntModel::new(cfg, &mut rng).unwrap();
        let e: Vec<f64> = (0..16).map(|i| i as f64 * 0.05).collect();
        let p: Vec<f64> = (0..16).map(|i| 0.3 - i as f64 * 0.02).collect();
        let sum: Vec<f64> = e.iter().zip(&p).map(|(a, b)| a + b).collect();
        let a = model.joint(&e, &p).unwrap();
        let b = model.joint(&sum, &vec![0.0; 16]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = RnntModel::new(ModelConfig::default(), &mut rng).unwrap();
        assert!(model.joint(&[0.0; 15], &[0.0; 16]).is_err());
        assert!(model.joint(&[0.0; 16], &[0.0; 3]).is_err());
    }
}
