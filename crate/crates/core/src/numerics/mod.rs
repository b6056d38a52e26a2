//! Dense tensors, reverse-mode autodiff, AdamW and parameter checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

use thiserror::Error;

pub use graph::{AttnGroup, AttnLayout, Graph, NodeId, Targets};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("logit {index} is not finite ({value})")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Cross-entropy inputs must be distributions to within this tolerance.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-4;
/// Lower clamp on student probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `q_i = exp(z_i / T) / Σ_j exp(z_j / T)`, computed with max-subtraction.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>, NumericsError> {
    if !(temperature > 0.0) {
        return Err(NumericsError::NonPositiveTemperature(temperature));
    }
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(NumericsError::NonFiniteLogit { index, value });
    }
    Ok(graph::softmax_slice(logits, 1.0 / temperature))
}

/// Index of the largest value; ties go to the lowest index. `None` if empty
/// or every value is NaN.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// The zero-temperature limit of [`softmax_temperature`].
pub fn one_hot_argmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    if let Some(i) = argmax(logits) {
        out[i] = 1.0;
    }
    out
}

/// `−Σ q_i log p_i`, with `p_i` clamped below by [`PROB_FLOOR`].
pub fn cross_entropy(q: &[f64], p: &[f64]) -> Result<f64, NumericsError> {
    if q.len() != p.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "teacher has {} entries, student {}",
            q.len(),
            p.len()
        )));
    }
    for (name, d) in [("teacher", q), ("student", p)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(NumericsError::ShapeMismatch(format!(
                "{name} probabilities sum to {s}"
            )));
        }
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi != 0.0)
        .map(|(qi, pi)| -qi * pi.max(PROB_FLOOR).ln())
        .sum())
}

pub fn entropy(q: &[f64]) -> f64 {
    q.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Row-wise `log softmax`; `-inf` logits stay `-inf`.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = logits.row(i);
        let lse = graph::log_sum_exp(row, 1.0);
        out.extend(row.iter().map(|z| z - lse));
    }
    Tensor::matrix(r, c, out)
}

/// Row-wise `softmax(z / T)`; `-inf` logits get probability 0.
pub fn softmax_rows_temperature(logits: &Tensor, temperature: f64) -> Tensor {
    let (r, c) = logits.dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        out.extend(graph::softmax_slice(logits.row(i), 1.0 / temperature));
    }
    Tensor::matrix(r, c, out)
}
