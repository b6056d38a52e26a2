//! Losses over explicit per-step logits, outside any autodiff graph.
//!
//! Training builds the same quantities on a graph through
//! [`Graph::softmax_xent`](crate::numerics::Graph::softmax_xent); these
//! versions are the reference definitions and serve evaluation and checks.

use super::TrainingError;
use crate::dataset::PAD;
use crate::numerics::{argmax, NumericsError};

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `softmax(z / T)`; `-inf` logits get probability 0.
fn softmax_t(z: &[f64], t: f64) -> Result<Vec<f64>, NumericsError> {
    if t.is_nan() || t <= 0.0 {
        return Err(NumericsError::NonPositiveTemperature(t));
    }
    if let Some((index, &value)) = z
        .iter()
        .enumerate()
        .find(|(_, v)| v.is_nan() || **v == f64::INFINITY)
    {
        return Err(NumericsError::NonFiniteLogit { index, value });
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
    let e: Vec<f64> = z.iter().map(|v| (v / t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Mean over non-padding steps of `-log p(gold)`.
pub fn nll_loss(step_logits: &[Vec<f64>], gold: &[usize]) -> Result<f64, TrainingError> {
    if step_logits.len() != gold.len() {
        return Err(TrainingError::LengthMismatch {
            left: step_logits.len(),
            right: gold.len(),
        });
    }
    let mut total = 0.0;
    let mut n = 0;
    for (z, &y) in step_logits.iter().zip(gold) {
        if y == PAD {
            continue;
        }
        total -= log_softmax(z)[y];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Uniform mixture of member probability rows, step by step.
pub fn ensemble_distribution(members: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>, TrainingError> {
    if members.len() < 2 {
        return Err(TrainingError::ConfigInvalid("ensemble needs at least two members".into()));
    }
    let steps = members[0].len();
    let width = members[0].first().map_or(0, Vec::len);
    if members
        .iter()
        .any(|m| m.len() != steps || m.iter().any(|r| r.len() != width))
    {
        return Err(TrainingError::VocabMismatch);
    }
    let k = members.len() as f64;
    Ok((0..steps)
        .map(|t| {
            (0..width)
                .map(|j| members.iter().map(|m| m[t][j]).sum::<f64>() / k)
                .collect()
        })
        .collect())
}

/// Elementwise log, turning mixture probabilities back into logits.
pub fn mixture_logits(probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|r| r.iter().map(|p| p.ln()).collect())
        .collect()
}

/// Mean over steps of `CE(softmax_T(teacher), softmax_T(student)) · T²`.
pub fn kd_loss(
    teacher_logits: &[Vec<f64>],
    student_logits: &[Vec<f64>],
    temperature: f64,
) -> Result<f64, TrainingError> {
    if teacher_logits.len() != student_logits.len() {
        return Err(TrainingError::LengthMismatch {
            left: teacher_logits.len(),
            right: student_logits.len(),
        });
    }
    if teacher_logits.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (zt, zs) in teacher_logits.iter().zip(student_logits) {
        if zt.len() != zs.len() {
            return Err(TrainingError::VocabMismatch);
        }
        let q = softmax_t(zt, temperature)?;
        let scaled: Vec<f64> = zs.iter().map(|v| v / temperature).collect();
        let lp = log_softmax(&scaled);
        total -= q
            .iter()
            .zip(&lp)
            .filter(|(qi, _)| **qi != 0.0)
            .map(|(qi, l)| qi * l)
            .sum::<f64>();
    }
    Ok(total / teacher_logits.len() as f64 * temperature * temperature)
}

/// `λ · NLL(gold) + KD(teacher, student)`.
pub fn student_loss(
    student_logits: &[Vec<f64>],
    gold: &[usize],
    teacher_logits: &[Vec<f64>],
    lambda: f64,
    temperature: f64,
) -> Result<f64, TrainingError> {
    Ok(lambda * nll_loss(student_logits, gold)?
        + kd_loss(teacher_logits, student_logits, temperature)?)
}

/// Argmax labels of teacher logits, the `T → 0` limit of soft targets.
pub fn hard_labels(teacher_logits: &[Vec<f64>]) -> Vec<usize> {
    teacher_logits
        .iter()
        .map(|z| argmax(z).unwrap_or(PAD))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{entropy, softmax_temperature};

    const LN2: f64 = std::f64::consts::LN_2;

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn nll_examples() {
        let certain = vec![vec![0.0, f64::NEG_INFINITY], vec![f64::NEG_INFINITY, 0.0]];
        assert_eq!(nll_loss(&certain, &[0, 1]).unwrap(), 0.0);
        let v = 7;
        let uniform = vec![vec![0.0; v]; 3];
        assert!((nll_loss(&uniform, &[1, 2, 3]).unwrap() - (v as f64).ln()).abs() < 1e-12);
        let toy = vec![ln(&[0.0, 0.5, 0.5]), ln(&[0.0, 0.25, 0.75])];
        let want = (LN2 + 4f64.ln()) / 2.0;
        assert!((nll_loss(&toy, &[1, 1]).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            nll_loss(&toy, &[1]),
            Err(TrainingError::LengthMismatch { left: 2, right: 1 })
        ));
        let padded = vec![ln(&[0.0, 0.5, 0.5]), vec![0.0, 0.0, 0.0]];
        assert!((nll_loss(&padded, &[1, PAD]).unwrap() - LN2).abs() < 1e-12);
    }

    #[test]
    fn mixture_examples() {
        let m = ensemble_distribution(&[vec![vec![0.6, 0.4]], vec![vec![0.2, 0.8]]]).unwrap();
        assert!((m[0][0] - 0.4).abs() < 1e-15 && (m[0][1] - 0.6).abs() < 1e-15);
        let same = vec![vec![0.1, 0.2, 0.7]];
        let m = ensemble_distribution(&[same.clone(), same.clone(), same.clone()]).unwrap();
        for (a, b) in m[0].iter().zip(&same[0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ensemble_distribution(&[same.clone()]).is_err());
        assert!(matches!(
            ensemble_distribution(&[same, vec![vec![0.5, 0.5]]]),
            Err(TrainingError::VocabMismatch)
        ));
    }

    #[test]
    fn kd_examples() {
        let q = vec![ln(&[0.8, 0.2])];
        let p = vec![ln(&[0.5, 0.5])];
        assert!((kd_loss(&q, &p, 1.0).unwrap() - LN2).abs() < 1e-12);

        let z = vec![vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.1]];
        let h: f64 = z
            .iter()
            .map(|r| entropy(&softmax_temperature(r, 1.0).unwrap()))
            .sum::<f64>()
            / 2.0;
        assert!((kd_loss(&z, &z, 1.0).unwrap() - h).abs() < 1e-12);
        assert!(kd_loss(&z, &z, 0.0).is_err());
        assert!(kd_loss(&z, &z[..1], 1.0).is_err());
    }

    #[test]
    fn one_hot_teacher_is_nll_on_its_labels() {
        let student = vec![vec![0.2, 1.5, -0.3], vec![2.0, 0.1, 0.0]];
        let inf = f64::NEG_INFINITY;
        let teacher = vec![vec![inf, 0.0, inf], vec![inf, inf, 0.0]];
        let labels = hard_labels(&teacher);
        assert_eq!(labels, vec![1, 2]);
        let kd = kd_loss(&teacher, &student, 1.0).unwrap();
        let nll = nll_loss(&student, &labels).unwrap();
        assert!((kd - nll).abs() < 1e-12);
    }

    #[test]
    fn student_loss_is_affine_in_lambda() {
        let s = vec![vec![0.2, 1.5, -0.3], vec![2.0, 0.1, 0.0]];
        let t = vec![vec![0.0, 1.0, 0.5], vec![1.0, 1.0, -2.0]];
        let gold = [1, 2];
        let f = |l: f64| student_loss(&s, &gold, &t, l, 2.0).unwrap();
        let slope = f(1.0) - f(0.0);
        for l in [0.5, 2.0] {
            assert!((f(l) - (f(0.0) + l * slope)).abs() < 1e-12);
        }
        assert!((f(0.0) - kd_loss(&t, &s, 2.0).unwrap()).abs() < 1e-15);

        let inf = f64::NEG_INFINITY;
        let gold_teacher = vec![vec![inf, 0.0, inf], vec![inf, inf, 0.0]];
        let two = student_loss(&s, &gold, &gold_teacher, 1.0, 1.0).unwrap();
        assert!((two - 2.0 * nll_loss(&s, &gold).unwrap()).abs() < 1e-12);
    }
}
