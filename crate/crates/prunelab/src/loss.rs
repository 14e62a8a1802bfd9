//! Training losses: batch cross-entropy and the supervised contrastive loss.
//!
//! Internals run in f64 for numeric headroom; gradients come back as f32
//! tensors matching the input shape.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("logits batch {batch} does not match {labels} labels")]
    BatchMismatch { batch: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("projection row {row} is not unit-norm (|z| = {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("degenerate batch: sample {row} has no positives")]
    DegenerateBatch { row: usize },
}

/// Mean negative log softmax probability of the true class.
///
/// Returns the scalar loss and the gradient with respect to the logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), LossError> {
    let batch = logits.rows();
    let classes = logits.row_len();
    if batch != labels.len() {
        return Err(LossError::BatchMismatch {
            batch,
            labels: labels.len(),
        });
    }
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let mut total = 0.0f64;
    for r in 0..batch {
        let label = labels[r];
        if label >= classes {
            return Err(LossError::LabelRange { label, classes });
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v as f64) - max).exp();
        }
        let log_denom = denom.ln() + max;
        total += log_denom - row[label] as f64;
        let g = grad.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            let softmax = ((v as f64) - log_denom).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            g[c] = ((softmax - target) / batch as f64) as f32;
        }
    }
    Ok((total / batch as f64, grad))
}

/// Supervised contrastive loss over a batch of unit-norm projections.
///
/// For each anchor `i`, positives are the other rows sharing its label and the
/// denominator runs over all other rows:
///
/// ```text
/// L = sum_i -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p / t) / sum_{a != i} exp(z_i.z_a / t) )
/// ```
///
/// Rows must be unit-norm to 1e-5 and every row needs at least one positive;
/// a violation of the latter means the batch must be re-drawn.
pub fn supcon_loss(
    projections: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, Tensor), LossError> {
    if temperature <= 0.0 {
        return Err(LossError::Temperature(temperature));
    }
    let batch = projections.rows();
    let dim = projections.row_len();
    if batch != labels.len() {
        return Err(LossError::BatchMismatch {
            batch,
            labels: labels.len(),
        });
    }
    for r in 0..batch {
        let norm = crate::tensor::l2_norm(projections.row(r));
        if (norm - 1.0).abs() > 1e-5 {
            return Err(LossError::NotNormalized { row: r, norm });
        }
    }
    for i in 0..batch {
        if !(0..batch).any(|j| j != i && labels[j] == labels[i]) {
            return Err(LossError::DegenerateBatch { row: i });
        }
    }

    // Pairwise similarities s[i][j] = z_i . z_j / t, in f64.
    let mut sims = vec![0.0f64; batch * batch];
    for i in 0..batch {
        for j in 0..batch {
            if i == j {
                continue;
            }
            let dot: f64 = projections
                .row(i)
                .iter()
                .zip(projections.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            sims[i * batch + j] = dot / temperature;
        }
    }

    let mut loss = 0.0f64;
    // coeff[i][a] = q_ia - 1{a in P(i)}/|P(i)|, the gradient of anchor i's
    // term with respect to s_ia.
    let mut coeff = vec![0.0f64; batch * batch];
    for i in 0..batch {
        let others: Vec<usize> = (0..batch).filter(|&j| j != i).collect();
        let positives: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&j| labels[j] == labels[i])
            .collect();
        let max = others
            .iter()
            .map(|&j| sims[i * batch + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = others
            .iter()
            .map(|&j| (sims[i * batch + j] - max).exp())
            .sum();
        let log_denom = denom.ln() + max;
        let p = positives.len() as f64;
        for &j in &positives {
            loss += (log_denom - sims[i * batch + j]) / p;
        }
        for &j in &others {
            let softmax = (sims[i * batch + j] - log_denom).exp();
            let pos = if labels[j] == labels[i] { 1.0 / p } else { 0.0 };
            coeff[i * batch + j] = softmax - pos;
        }
    }

    // dL/dz_k = sum_a c[k][a] z_a / t + sum_i c[i][k] z_i / t.
    let mut grad = Tensor::zeros(vec![batch, dim]);
    for k in 0..batch {
        let mut acc = vec![0.0f64; dim];
        for a in 0..batch {
            if a == k {
                continue;
            }
            let c = coeff[k * batch + a];
            if c != 0.0 {
                for (d, slot) in acc.iter_mut().enumerate() {
                    *slot += c * projections.row(a)[d] as f64;
                }
            }
            let c2 = coeff[a * batch + k];
            if c2 != 0.0 {
                for (d, slot) in acc.iter_mut().enumerate() {
                    *slot += c2 * projections.row(a)[d] as f64;
                }
            }
        }
        for (d, slot) in acc.iter().enumerate() {
            grad.row_mut(k)[d] = (slot / temperature) as f32;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_log_c() {
        let logits = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn saturated_logits_cost_nothing() {
        let mut data = vec![0.0; 4];
        data[2] = 20.0;
        let logits = Tensor::matrix(1, 4, data).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[2]).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &[3]),
            Err(LossError::LabelRange { .. })
        ));
        assert!(matches!(
            cross_entropy_loss(&logits, &[0, 1]),
            Err(LossError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn identical_projections_cost_log_of_batch_minus_one() {
        // All four rows equal and same class: every exp term cancels, each
        // anchor contributes log 3.
        let row = [1.0f32, 0.0, 0.0];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let z = Tensor::matrix(4, 3, data).unwrap();
        let (loss, _) = supcon_loss(&z, &[0, 0, 0, 0], 0.5).unwrap();
        assert!((loss - 4.0 * 3.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn single_pair_batch_costs_zero() {
        let z = Tensor::matrix(2, 2, vec![0.6, 0.8, 1.0, 0.0]).unwrap();
        let (loss, _) = supcon_loss(&z, &[1, 1], 0.5).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn supcon_rejects_unnormalized_rows() {
        let z = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            supcon_loss(&z, &[0, 0], 0.5),
            Err(LossError::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn lonely_class_is_a_degenerate_batch() {
        let z = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        assert!(matches!(
            supcon_loss(&z, &[0, 0, 1], 0.5),
            Err(LossError::DegenerateBatch { row: 2 })
        ));
    }

    #[test]
    fn label_permutation_leaves_losses_unchanged() {
        let z = unit_rows(&[
            [0.6, 0.8],
            [1.0, 0.0],
            [0.0, 1.0],
            [-0.6, 0.8],
        ]);
        let labels = [0usize, 1, 0, 1];
        let swapped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
        let (a, _) = supcon_loss(&z, &labels, 0.5).unwrap();
        let (b, _) = supcon_loss(&z, &swapped, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);

        let logits = Tensor::matrix(2, 2, vec![0.4, -0.3, 0.1, 0.9]).unwrap();
        let (c, _) = cross_entropy_loss(&logits, &[0, 1]).unwrap();
        let permuted = Tensor::matrix(2, 2, vec![-0.3, 0.4, 0.9, 0.1]).unwrap();
        let (d, _) = cross_entropy_loss(&permuted, &[1, 0]).unwrap();
        assert!((c - d).abs() < 1e-12);
    }

    #[test]
    fn supcon_invariant_under_common_rotation() {
        let z = unit_rows(&[
            [0.6, 0.8],
            [1.0, 0.0],
            [0.0, 1.0],
            [-0.8, 0.6],
        ]);
        let labels = [0usize, 1, 0, 1];
        let (before, _) = supcon_loss(&z, &labels, 0.5).unwrap();

        let theta = 0.73f64;
        let (c, s) = (theta.cos(), theta.sin());
        let mut rotated = z.clone();
        for r in 0..4 {
            let [x, y] = [z.row(r)[0] as f64, z.row(r)[1] as f64];
            rotated.row_mut(r)[0] = (c * x - s * y) as f32;
            rotated.row_mut(r)[1] = (s * x + c * y) as f32;
        }
        let (after, _) = supcon_loss(&rotated, &labels, 0.5).unwrap();
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");
    }

    fn unit_rows(rows: &[[f32; 2]]) -> Tensor {
        let mut data = Vec::new();
        for r in rows {
            let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
            data.push(r[0] / n);
            data.push(r[1] / n);
        }
        Tensor::matrix(rows.len(), 2, data).unwrap()
    }
}
