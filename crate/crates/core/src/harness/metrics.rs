use serde::{Deserialize, Serialize};

/// Mean absolute count error. Empty input gives 0.
pub fn mae(predicted: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let s: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    s / predicted.len() as f64
}

/// Root mean squared count error. Empty input gives 0.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let s: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    (s / predicted.len() as f64).sqrt()
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_density: f64,
    pub loss_enc: f64,
    pub loss_dec: f64,
    pub loss_total: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert_eq!(mae(&[2.0, -2.0], &[0.0, 0.0]), 2.0);
        assert_eq!(rmse(&[2.0, -2.0], &[0.0, 0.0]), 2.0);
        assert_eq!(mae(&[0.0, 3.0], &[0.0, 0.0]), 1.5);
        assert!((rmse(&[0.0, 3.0], &[0.0, 0.0]) - 4.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn log_keys() {
        let r = EpochRecord {
            epoch: 1,
            loss_density: 0.0,
            loss_enc: 0.0,
            loss_dec: 0.0,
            loss_total: 0.0,
            val_mae: 0.0,
            val_rmse: 0.0,
        };
        let v = serde_json::to_value(r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["epoch", "loss_dec", "loss_density", "loss_enc", "loss_total", "val_mae", "val_rmse"]
        );
    }
}
