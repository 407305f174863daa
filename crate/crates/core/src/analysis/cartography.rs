use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleDynamics {
    /// Mean true-label probability over epochs.
    pub confidence: f64,
    /// Population standard deviation of the true-label probability.
    pub variability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CartographyRecord {
    pub per_sample: Vec<SampleDynamics>,
    pub epochs: usize,
}

impl CartographyRecord {
    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }
}

/// Confidence and variability per sample from an `[epoch][sample]` matrix.
pub fn compute_cartography(per_epoch_true_probs: &[Vec<f64>]) -> Result<CartographyRecord> {
    let epochs = per_epoch_true_probs.len();
    if epochs == 0 {
        return Err(Error::domain("cartography needs at least one epoch"));
    }
    let n = per_epoch_true_probs[0].len();
    for (e, row) in per_epoch_true_probs.iter().enumerate() {
        if row.len() != n {
            return Err(Error::structure(format!(
                "epoch {e} has {} samples, epoch 0 has {n}",
                row.len()
            )));
        }
        if let Some(i) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain(format!(
                "probability {} at epoch {e}, sample {i} is outside [0, 1]",
                row[i]
            )));
        }
    }
    let e = epochs as f64;
    let per_sample = (0..n)
        .map(|i| {
            let confidence = per_epoch_true_probs.iter().map(|r| r[i]).sum::<f64>() / e;
            let var = per_epoch_true_probs
                .iter()
                .map(|r| (r[i] - confidence).powi(2))
                .sum::<f64>()
                / e;
            SampleDynamics {
                confidence,
                variability: var.sqrt(),
            }
        })
        .collect();
    Ok(CartographyRecord { per_sample, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(probs: &[f64]) -> Vec<Vec<f64>> {
        probs.iter().map(|&p| vec![p]).collect()
    }

    #[test]
    fn hand_computed_cases() {
        let r = compute_cartography(&column(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(
            r.per_sample[0],
            SampleDynamics {
                confidence: 1.0,
                variability: 0.0
            }
        );
        let r = compute_cartography(&column(&[0.2, 0.8])).unwrap();
        assert_eq!(r.per_sample[0].confidence, 0.5);
        assert!((r.per_sample[0].variability - 0.3).abs() < 1e-15);
        let r = compute_cartography(&column(&[0.1, 0.5, 0.9])).unwrap();
        assert!((r.per_sample[0].confidence - 0.5).abs() < 1e-15);
        assert!((r.per_sample[0].variability - (0.32f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.epochs, 3);
    }

    #[test]
    fn invalid_input() {
        assert!(matches!(compute_cartography(&[]), Err(Error::Domain(_))));
        assert!(matches!(
            compute_cartography(&column(&[0.5, 1.2])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            compute_cartography(&[vec![0.1, 0.2], vec![0.3]]),
            Err(Error::Structure(_))
        ));
    }
}
