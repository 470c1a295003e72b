//! Feed-forward layers and log-domain helpers.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))` with max-shift; `-inf` is the identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn affine(weights: &Matrix, bias: &Matrix, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != weights.rows() {
        return Err(Error::shape("dense input", weights.rows(), input.len()));
    }
    if bias.shape() != (1, weights.cols()) {
        return Err(Error::shape(
            "dense bias",
            format!("1x{}", weights.cols()),
            format!("{}x{}", bias.rows(), bias.cols()),
        ));
    }
    let mut out = bias.row(0).to_vec();
    weights.vec_mul_acc(input, &mut out);
    Ok(out)
}

/// `tanh(x·W + b)`
pub fn ffn_tanh_forward(weights: &Matrix, bias: &Matrix, input: &[f64]) -> Result<Vec<f64>> {
    let mut out = affine(weights, bias, input)?;
    out.iter_mut().for_each(|v| *v = v.tanh());
    Ok(out)
}

/// `x·W + b`
pub fn ffn_linear_forward(weights: &Matrix, bias: &Matrix, input: &[f64]) -> Result<Vec<f64>> {
    affine(weights, bias, input)
}

/// Backward of [`ffn_linear_forward`]; accumulates weight/bias grads and returns `dx`.
pub fn ffn_linear_backward(
    weights: &Matrix,
    input: &[f64],
    grad_out: &[f64],
    grad_weights: &mut Matrix,
    grad_bias: &mut Matrix,
) -> Vec<f64> {
    grad_weights.outer_acc(input, grad_out);
    for (b, d) in grad_bias.data_mut().iter_mut().zip(grad_out) {
        *b += d;
    }
    let mut dx = vec![0.0; weights.rows()];
    weights.mul_vec_acc(grad_out, &mut dx);
    dx
}

/// Backward of [`ffn_tanh_forward`] given its output.
pub fn ffn_tanh_backward(
    weights: &Matrix,
    input: &[f64],
    output: &[f64],
    grad_out: &[f64],
    grad_weights: &mut Matrix,
    grad_bias: &mut Matrix,
) -> Vec<f64> {
    let d_pre: Vec<f64> = grad_out
        .iter()
        .zip(output)
        .map(|(g, y)| g * (1.0 - y * y))
        .collect();
    ffn_linear_backward(weights, input, &d_pre, grad_weights, grad_bias)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Contract("log_softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("log_softmax of non-finite logits".into()));
    }
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|v| v - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn log_softmax_symmetric_and_shift_invariant() {
        let a = log_softmax(&[0.0, 0.0]).unwrap();
        let b = log_softmax(&[1000.0, 1000.0]).unwrap();
        for v in a.iter().chain(&b) {
            assert!((v + LN2).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_direct_formula() {
        let out = log_softmax(&[1.0, 2.0, 3.0]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in out.iter().enumerate() {
            let direct = ((k + 1) as f64).exp() / z;
            assert!((v - direct.ln()).abs() < 1e-12);
        }
        let total: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rejects_empty_and_nan() {
        assert!(log_softmax(&[]).is_err());
        assert!(log_softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn ffn_zero_weights_and_identity() {
        let zero = Matrix::zeros(2, 2);
        let bias = Matrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        assert_eq!(ffn_tanh_forward(&zero, &bias, &[3.0, 4.0]).unwrap(), vec![0.5f64.tanh(), (-1f64).tanh()]);
        assert_eq!(ffn_linear_forward(&zero, &bias, &[3.0, 4.0]).unwrap(), vec![0.5, -1.0]);

        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let nob = Matrix::zeros(1, 2);
        assert_eq!(ffn_tanh_forward(&eye, &nob, &[0.3, -0.7]).unwrap(), vec![0.3f64.tanh(), (-0.7f64).tanh()]);
        assert_eq!(ffn_linear_forward(&eye, &nob, &[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn ffn_two_by_two_by_hand() {
        let w = Matrix::from_rows(&[vec![0.2, -0.5], vec![1.5, 0.25]]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.1, -0.1]).unwrap();
        let x = [2.0, -1.0];
        let y0 = 0.2 * 2.0 + 1.5 * -1.0 + 0.1;
        let y1 = -0.5 * 2.0 + 0.25 * -1.0 - 0.1;
        let lin = ffn_linear_forward(&w, &b, &x).unwrap();
        assert!((lin[0] - y0).abs() < 1e-12 && (lin[1] - y1).abs() < 1e-12);
        let th = ffn_tanh_forward(&w, &b, &x).unwrap();
        assert!((th[0] - y0.tanh()).abs() < 1e-12 && (th[1] - y1.tanh()).abs() < 1e-12);
    }

    #[test]
    fn ffn_shape_error() {
        let w = Matrix::zeros(2, 3);
        assert!(ffn_linear_forward(&w, &Matrix::zeros(1, 3), &[1.0]).is_err());
        assert!(ffn_linear_forward(&w, &Matrix::zeros(1, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -3.0), -3.0);
        assert!((log_add(0.0, 0.0) - LN2).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }
}
