//! Adam with bias correction, plus global-norm gradient clipping.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl AdamState {
    /// Moments shaped like `shapes`.
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Bias-corrected moment estimates of tensor `idx`.
    pub fn corrected_moments(&self, idx: usize) -> (Vec<f64>, Vec<f64>) {
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.config.beta1.powi(t);
        let c2 = 1.0 - self.config.beta2.powi(t);
        (
            self.first_moment[idx].data().iter().map(|m| m / c1).collect(),
            self.second_moment[idx].data().iter().map(|v| v / c2).collect(),
        )
    }

    /// One Adam update with learning rate `lr` (a schedule may differ from
    /// `config.learning_rate`).
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam tensor count",
                self.first_moment.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::shape(
                    "adam tensor",
                    format!("{:?}", self.first_moment[i].shape()),
                    format!("param {:?} / grad {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[&Matrix]) -> f64 {
    grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}
