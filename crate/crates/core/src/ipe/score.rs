//! Per-frame cleanliness score and its normalization.

use crate::error::{Error, Result};
use crate::nn::graph::EPS;
use crate::nn::Tensor;

/// Lower bound of the raw score (reached when the enhanced frame is silent).
pub const SCORE_FLOOR: f64 = -8.0;

/// Sum over bands and bins of the magnitudes in each frame of a `[2C, F, T]` band tensor.
pub fn frame_magnitude_sums(spec: &Tensor) -> Result<Vec<f64>> {
    let s = spec.shape();
    if s.len() != 3 || !s[0].is_multiple_of(2) {
        return Err(Error::shape(format!("expected a [2C, F, T] band tensor, got {s:?}")));
    }
    let (f, t) = (s[1], s[2]);
    let plane = f * t;
    let d = spec.data();
    let mut sums = vec![0.0; t];
    for c in 0..s[0] / 2 {
        let (re, im) = (&d[2 * c * plane..(2 * c + 1) * plane], &d[(2 * c + 1) * plane..(2 * c + 2) * plane]);
        for (i, (a, b)) in re.iter().zip(im).enumerate() {
            sums[i % t] += a.hypot(*b);
        }
    }
    Ok(sums)
}

/// `S_t = log10(sum_f |X_tf| / sum_f |Y_tf|)` over all bands, with both sums floored at
/// `EPS` and the result clamped to at least [`SCORE_FLOOR`].
pub fn cleanliness_score(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("cleanliness score: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let xs = frame_magnitude_sums(x)?;
    let ys = frame_magnitude_sums(y)?;
    Ok(xs.iter().zip(&ys).map(|(a, b)| (a.max(EPS) / b.max(EPS)).log10().max(SCORE_FLOOR)).collect())
}

/// Population statistics of raw scores over a training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanlinessStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for CleanlinessStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

pub const MIN_STD: f64 = 1e-6;

impl CleanlinessStats {
    pub fn from_scores(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no scores to normalize"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt().max(MIN_STD) })
    }

    pub fn z_score(&self, s: f64) -> f64 {
        (s - self.mean) / self.std
    }

    /// Regression target in `(0, 1)`: the logistic of the z-score.
    pub fn target(&self, s: f64) -> f64 {
        1.0 / (1.0 + (-self.z_score(s)).exp())
    }
}

/// Trained acceptance threshold: the mean of the per-chunk mean scores seen in training.
pub fn estimate_lambda(chunk_means: &[f64]) -> Result<f64> {
    if chunk_means.is_empty() {
        return Err(Error::invalid("no chunk scores recorded"));
    }
    Ok(chunk_means.iter().sum::<f64>() / chunk_means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(vals: &[f64], t: usize) -> Tensor {
        Tensor::new(vec![2, vals.len() / (2 * t), t], vals.to_vec()).unwrap()
    }

    #[test]
    fn identical_is_zero_and_tenth_is_minus_one() {
        let y = spec(&[0.3, -0.2, 0.5, 0.1, 0.4, -0.7, 0.2, 0.9], 2);
        assert!(cleanliness_score(&y, &y).unwrap().iter().all(|&s| s == 0.0));
        let x = Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| v * 0.1).collect()).unwrap();
        for s in cleanliness_score(&x, &y).unwrap() {
            assert!((s + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn silent_estimate_hits_the_floor_rule() {
        let y = spec(&[3.0, 0.0, 4.0, 0.0], 1);
        let x = Tensor::zeros(y.shape());
        let s = cleanliness_score(&x, &y).unwrap();
        // bin 0 is 3 + 4i, so sum |Y| = 5 and log10(1e-8 / 5) ~= -8.7 falls below the clamp
        assert_eq!(s, vec![SCORE_FLOOR]);
        let loud = spec(&[3e-3, 0.0, 4e-3, 0.0], 1);
        let s = cleanliness_score(&x, &loud).unwrap();
        assert!((s[0] - (1e-8f64 / 5e-3).log10()).abs() < 1e-12);
    }

    #[test]
    fn stats_and_lambda() {
        let st = CleanlinessStats::from_scores(&[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(st.mean, 0.0);
        assert!((st.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(st.target(st.mean), 0.5);
        let flat = CleanlinessStats::from_scores(&[0.3; 4]).unwrap();
        assert_eq!(flat.std, MIN_STD);
        assert_eq!(flat.target(0.3), 0.5);
        assert!((estimate_lambda(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-15);
        assert!(estimate_lambda(&[]).is_err());
    }
}
