//! Softmax cross-entropy.

use crate::error::{Error, Result};

/// Mean cross-entropy over the batch and its gradient w.r.t. `logits`
/// (row-major `B×K`).
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} labels and {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelRange { label, classes });
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + denom.ln();
        loss += log_z - row[label];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gk, &z) in g.iter_mut().zip(row) {
            *gk = (z - log_z).exp() / b;
        }
        g[label] -= 1.0 / b;
    }
    Ok((loss / b, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_example() {
        let (loss, grad) = cross_entropy(&[1.0, 0.0], &[0], 2).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
        assert!((grad[0] + grad[1]).abs() < 1e-15);
        assert!(grad[0] < 0.0);
    }

    #[test]
    fn uniform_logits() {
        let (loss, _) = cross_entropy(&[0.0; 10], &[3], 10).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_logits_are_stable() {
        let (loss, grad) = cross_entropy(&[1000.0, 0.0], &[0], 2).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], &[2], 2),
            Err(Error::LabelRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
