//! Streaming update of the temporary speaker embedding.

use crate::error::{Error, Result};
use crate::ipe::sem::SpeakerEmbedding;

#[derive(Debug, Clone, PartialEq)]
pub struct IpeStreamState {
    embedding: SpeakerEmbedding,
    pub lambda: f64,
    pub alpha: f64,
    updated_count: usize,
}

impl IpeStreamState {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        Ok(Self { embedding: SpeakerEmbedding::ones(), lambda, alpha, updated_count: 0 })
    }

    pub fn embedding(&self) -> &SpeakerEmbedding {
        &self.embedding
    }

    pub fn updated_count(&self) -> usize {
        self.updated_count
    }

    /// Offers one chunk with mean predicted score `s_bar`. When `s_bar >= lambda` the embedding
    /// becomes `alpha * E + (1 - alpha) * sem()`. `sem` is only called for accepted chunks.
    /// Returns whether the chunk was accepted.
    pub fn offer(&mut self, s_bar: f64, sem: impl FnOnce() -> Result<SpeakerEmbedding>) -> Result<bool> {
        if s_bar < self.lambda {
            return Ok(false);
        }
        let e = sem()?;
        let blended: Vec<f64> =
            self.embedding.as_slice().iter().zip(e.as_slice()).map(|(a, b)| self.alpha * a + (1.0 - self.alpha) * b).collect();
        self.embedding = SpeakerEmbedding::new(blended)?;
        self.updated_count += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EMBED_DIM;

    fn emb(v: f64) -> SpeakerEmbedding {
        SpeakerEmbedding::new((0..EMBED_DIM).map(|i| v + i as f64 * 1e-3).collect()).unwrap()
    }

    #[test]
    fn one_accepted_chunk() {
        let mut st = IpeStreamState::new(0.0, 0.9).unwrap();
        assert!(st.offer(0.3, || Ok(emb(0.5))).unwrap());
        for (i, v) in st.embedding().as_slice().iter().enumerate() {
            assert!((*v - (0.9 * 1.0 + 0.1 * emb(0.5).as_slice()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_one_never_updates() {
        let mut st = IpeStreamState::new(1.0, 0.9).unwrap();
        for s in [0.2, 0.99, 0.999_999] {
            assert!(!st.offer(s, || panic!("encoder must not run")).unwrap());
        }
        assert_eq!(st.embedding(), &SpeakerEmbedding::ones());
        assert_eq!(st.updated_count(), 0);
    }

    #[test]
    fn lambda_zero_unrolls() {
        let a = 0.8;
        let mut st = IpeStreamState::new(0.0, a).unwrap();
        let (e1, e2) = (emb(0.3), emb(-0.7));
        assert!(st.offer(0.0, || Ok(e1.clone())).unwrap());
        assert!(st.offer(0.0, || Ok(e2.clone())).unwrap());
        for (i, v) in st.embedding().as_slice().iter().enumerate() {
            let want = a * a + a * (1.0 - a) * e1.as_slice()[i] + (1.0 - a) * e2.as_slice()[i];
            assert!((v - want).abs() < 1e-15);
        }
        assert_eq!(st.updated_count(), 2);
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(IpeStreamState::new(0.5, 1.5).is_err());
    }
}
