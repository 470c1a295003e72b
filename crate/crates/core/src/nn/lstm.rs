//! LSTM layer with a recurrent projection (no peepholes).
//!
//! ```text
//! a = x·Wx + m_prev·Wm + b          gate order: input, forget, cell, output
//! c = σ(a_f)⊙c_prev + σ(a_i)⊙tanh(a_g)
//! h = σ(a_o)⊙tanh(c)
//! m = h·P                            (the layer output and next recurrent input)
//! ```

use rand::Rng;

use super::dense::sigmoid;
use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    /// `input_dim × 4·hidden_dim`
    pub w_input: Matrix,
    /// `proj_dim × 4·hidden_dim`
    pub w_recurrent: Matrix,
    /// `1 × 4·hidden_dim`
    pub bias: Matrix,
    /// `hidden_dim × proj_dim`, no bias
    pub projection: Matrix,
}

/// Cell (`hidden_dim`) and memory (`proj_dim`) vectors of one LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellState {
    pub cell: Vec<f64>,
    pub memory: Vec<f64>,
}

impl LstmCellState {
    pub fn zeros(hidden_dim: usize, proj_dim: usize) -> Self {
        Self {
            cell: vec![0.0; hidden_dim],
            memory: vec![0.0; proj_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cell.iter().chain(&self.memory).all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.cell.iter().chain(&self.memory)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.cell.iter_mut().chain(self.memory.iter_mut())
    }

    pub fn add_assign(&mut self, other: &LstmCellState) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }
}

/// Forward activations kept for the backward pass of one step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Vec<f64>,
    prev_memory: Vec<f64>,
    prev_cell: Vec<f64>,
    /// Post-nonlinearity gate values, laid out like the pre-activations.
    gates: Vec<f64>,
    tanh_cell: Vec<f64>,
    hidden: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, proj_dim: usize) -> Self {
        Self {
            w_input: Matrix::zeros(input_dim, 4 * hidden_dim),
            w_recurrent: Matrix::zeros(proj_dim, 4 * hidden_dim),
            bias: Matrix::zeros(1, 4 * hidden_dim),
            projection: Matrix::zeros(hidden_dim, proj_dim),
        }
    }

    /// Uniform fan-in init; forget-gate biases start at +1.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w_input = Matrix::uniform_fan_in(input_dim, 4 * hidden_dim, rng);
        let w_recurrent = Matrix::uniform_fan_in(proj_dim, 4 * hidden_dim, rng);
        let projection = Matrix::uniform_fan_in(hidden_dim, proj_dim, rng);
        let mut bias = Matrix::zeros(1, 4 * hidden_dim);
        for j in hidden_dim..2 * hidden_dim {
            bias.set(0, j, FORGET_BIAS_INIT);
        }
        Self {
            w_input,
            w_recurrent,
            bias,
            projection,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn zero_state(&self) -> LstmCellState {
        LstmCellState::zeros(self.hidden_dim(), self.proj_dim())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.w_input, &self.w_recurrent, &self.bias, &self.projection]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.w_input,
            &mut self.w_recurrent,
            &mut self.bias,
            &mut self.projection,
        ]
    }

    fn check_state(&self, state: &LstmCellState) -> Result<()> {
        if state.cell.len() != self.hidden_dim() || state.memory.len() != self.proj_dim() {
            return Err(Error::shape(
                "lstm state",
                format!("cell {} / memory {}", self.hidden_dim(), self.proj_dim()),
                format!("cell {} / memory {}", state.cell.len(), state.memory.len()),
            ));
        }
        Ok(())
    }

    pub fn step(&self, input: &[f64], state: &LstmCellState) -> Result<(Vec<f64>, LstmCellState)> {
        let (out, next, _) = self.step_cached(input, state)?;
        Ok((out, next))
    }

    pub fn step_cached(
        &self,
        input: &[f64],
        state: &LstmCellState,
    ) -> Result<(Vec<f64>, LstmCellState, LstmCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::shape("lstm input", self.input_dim(), input.len()));
        }
        self.check_state(state)?;
        let h = self.hidden_dim();

        let mut gates = self.bias.row(0).to_vec();
        self.w_input.vec_mul_acc(input, &mut gates);
        self.w_recurrent.vec_mul_acc(&state.memory, &mut gates);
        for (j, a) in gates.iter_mut().enumerate() {
            *a = if (2 * h..3 * h).contains(&j) {
                a.tanh()
            } else {
                sigmoid(*a)
            };
        }

        let mut cell = vec![0.0; h];
        let mut tanh_cell = vec![0.0; h];
        let mut hidden = vec![0.0; h];
        for k in 0..h {
            let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            cell[k] = f * state.cell[k] + i * g;
            tanh_cell[k] = cell[k].tanh();
            hidden[k] = o * tanh_cell[k];
        }
        let mut memory = vec![0.0; self.proj_dim()];
        self.projection.vec_mul_acc(&hidden, &mut memory);

        let cache = LstmCache {
            input: input.to_vec(),
            prev_memory: state.memory.clone(),
            prev_cell: state.cell.clone(),
            gates,
            tanh_cell,
            hidden,
        };
        let next = LstmCellState {
            cell,
            memory: memory.clone(),
        };
        Ok((memory, next, cache))
    }

    /// Reverse-mode step. `grad_output` and `grad_state.memory` both flow into
    /// the new memory vector (they are the same quantity). Parameter gradients
    /// are accumulated into `grads`.
    pub fn step_backward(
        &self,
        cache: &LstmCache,
        grad_output: &[f64],
        grad_state: &LstmCellState,
        grads: &mut LstmLayerParams,
    ) -> Result<(Vec<f64>, LstmCellState)> {
        let h = self.hidden_dim();
        let p = self.proj_dim();
        if cache.hidden.len() != h || cache.input.len() != self.input_dim() || cache.prev_memory.len() != p
        {
            return Err(Error::Contract(
                "lstm backward: cache does not belong to this layer".into(),
            ));
        }
        if grad_output.len() != p {
            return Err(Error::shape("lstm grad_output", p, grad_output.len()));
        }
        self.check_state(grad_state)?;

        let d_memory: Vec<f64> = grad_output
            .iter()
            .zip(&grad_state.memory)
            .map(|(a, b)| a + b)
            .collect();

        grads.projection.outer_acc(&cache.hidden, &d_memory);
        let mut d_hidden = vec![0.0; h];
        self.projection.mul_vec_acc(&d_memory, &mut d_hidden);

        let mut d_pre = vec![0.0; 4 * h];
        let mut d_prev_cell = vec![0.0; h];
        for k in 0..h {
            let (i, f, g, o) = (
                cache.gates[k],
                cache.gates[h + k],
                cache.gates[2 * h + k],
                cache.gates[3 * h + k],
            );
            let tc = cache.tanh_cell[k];
            let d_o = d_hidden[k] * tc;
            let d_c = grad_state.cell[k] + d_hidden[k] * o * (1.0 - tc * tc);
            let d_i = d_c * g;
            let d_f = d_c * cache.prev_cell[k];
            let d_g = d_c * i;
            d_prev_cell[k] = d_c * f;
            d_pre[k] = d_i * i * (1.0 - i);
            d_pre[h + k] = d_f * f * (1.0 - f);
            d_pre[2 * h + k] = d_g * (1.0 - g * g);
            d_pre[3 * h + k] = d_o * o * (1.0 - o);
        }

        grads.w_input.outer_acc(&cache.input, &d_pre);
        grads.w_recurrent.outer_acc(&cache.prev_memory, &d_pre);
        for (b, d) in grads.bias.data_mut().iter_mut().zip(&d_pre) {
            *b += d;
        }

        let mut d_input = vec![0.0; self.input_dim()];
        self.w_input.mul_vec_acc(&d_pre, &mut d_input);
        let mut d_prev_memory = vec![0.0; p];
        self.w_recurrent.mul_vec_acc(&d_pre, &mut d_prev_memory);

        Ok((
            d_input,
            LstmCellState {
                cell: d_prev_cell,
                memory: d_prev_memory,
            },
        ))
    }
}
