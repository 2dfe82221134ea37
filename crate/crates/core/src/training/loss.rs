//! Training objectives.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::graph::{si_snr_parts, EPS};

/// Weight of the cleanliness regression term in the IPE objective.
pub const SNR_LOSS_WEIGHT: f64 = 10.0;

/// Scale-invariant SNR of `est` against `reference`, in dB.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!("si-snr lengths {} vs {}", est.len(), reference.len())));
    }
    let (_, p_s, p_e) = si_snr_parts(est, reference)?;
    Ok(10.0 * (p_s.max(EPS) / (p_e + EPS)).log10())
}

/// Mean squared complex error over a stacked real/imaginary tensor: the squared differences
/// summed and divided by the number of complex entries.
pub fn cmse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || !x.len().is_multiple_of(2) {
        return Err(Error::shape(format!("cMSE lengths {} vs {}", x.len(), x_hat.len())));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / (x.len() / 2) as f64)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("MSE lengths {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sve,
    Ipe,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sve => "sve",
            Stage::Ipe => "ipe",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sve" => Ok(Stage::Sve),
            "ipe" => Ok(Stage::Ipe),
            _ => Err(Error::config(format!("unknown stage {s:?}, expected sve or ipe"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub si_snr_db: f64,
    pub cmse: f64,
    pub snr_mse: f64,
    pub total: f64,
}

impl LossReport {
    /// SVE: `-SI-SNR + cMSE`. IPE adds `10 * MSE(S, S_hat)`.
    pub fn compose(stage: Stage, si_snr_db: f64, cmse: f64, snr_mse: f64) -> Self {
        let total = match stage {
            Stage::Sve => -si_snr_db + cmse,
            Stage::Ipe => -si_snr_db + cmse + SNR_LOSS_WEIGHT * snr_mse,
        };
        Self { si_snr_db, cmse, snr_mse, total }
    }
}

/// Evaluates the stage objective from waveforms, band tensors and, for IPE, the cleanliness
/// targets and predictions.
pub fn composite_loss(
    stage: Stage,
    clean_wave: &[f64],
    out_wave: &[f64],
    clean_spec: &[f64],
    out_spec: &[f64],
    scores: Option<(&[f64], &[f64])>,
) -> Result<LossReport> {
    let s = si_snr(out_wave, clean_wave)?;
    let c = cmse(clean_spec, out_spec)?;
    let m = match (stage, scores) {
        (Stage::Sve, _) => 0.0,
        (Stage::Ipe, Some((target, pred))) => mse(target, pred)?,
        (Stage::Ipe, None) => return Err(Error::config("the IPE objective needs cleanliness targets")),
    };
    Ok(LossReport::compose(stage, s, c, m))
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

pub const LOSS_LOG_HEADER: &str = "step\tlr\tsi_snr_db\tcmse\tsnr_mse\ttotal";

impl LossRecord {
    /// Tab-separated fields in [`LOSS_LOG_HEADER`] order with round-trip float formatting.
    pub fn to_line(&self) -> String {
        let r = &self.report;
        format!("{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}", self.step, self.lr, r.si_snr_db, r.cmse, r.snr_mse, r.total)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("loss record has {} fields, expected 6", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| Error::Format(format!("bad loss field {:?}", f[i])));
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", f[0])))?,
            lr: num(1)?,
            report: LossReport { si_snr_db: num(2)?, cmse: num(3)?, snr_mse: num(4)?, total: num(5)? },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_snr_examples() {
        let x = noise(512, 1);
        assert!(si_snr(&x, &x).unwrap() >= 80.0);
        let e = noise(512, 2);
        let twice: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
        assert!((si_snr(&twice, &x).unwrap() - si_snr(&e, &x).unwrap()).abs() < 1e-9);
        let xs: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert!((si_snr(&e, &xs).unwrap() - si_snr(&e, &x).unwrap()).abs() < 1e-9);
        // orthogonal noise of equal norm
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [1.0, 1.0, 1.0, -1.0];
        assert!(si_snr(&b, &a).unwrap().abs() < 1e-6);
        assert!(si_snr(&a, &[0.0; 4]).is_err());
    }

    #[test]
    fn cmse_examples() {
        assert_eq!(cmse(&[0.0; 8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        let (a, b) = (noise(40, 3), noise(40, 4));
        assert_eq!(cmse(&a, &a).unwrap(), 0.0);
        let mut acc = 0.0;
        for i in 0..20 {
            let (re, im) = (a[i] - b[i], a[20 + i] - b[20 + i]);
            acc += re * re + im * im;
        }
        assert!((cmse(&a, &b).unwrap() - acc / 20.0).abs() < 1e-12);
    }

    #[test]
    fn composite_weights() {
        let x = noise(256, 5);
        let y: Vec<f64> = x.iter().zip(noise(256, 6)).map(|(a, b)| a + 0.1 * b).collect();
        let (s, p) = ([0.2, 0.9, 0.4], [0.3, 0.5, 0.4]);
        let sve = composite_loss(Stage::Sve, &x, &y, &x, &y, None).unwrap();
        let ipe = composite_loss(Stage::Ipe, &x, &y, &x, &y, Some((&s, &p))).unwrap();
        assert!((ipe.total - sve.total - 10.0 * mse(&s, &p).unwrap()).abs() < 1e-12);
        let perfect = composite_loss(Stage::Ipe, &x, &x, &x, &x, Some((&s, &s))).unwrap();
        assert_eq!(perfect.total, -perfect.si_snr_db);
        assert_eq!(SNR_LOSS_WEIGHT, 10.0);
    }

    #[test]
    fn record_round_trip() {
        let r = LossRecord { step: 17, lr: 1.2345e-4, report: LossReport::compose(Stage::Ipe, 3.25, 0.125, 0.0625) };
        assert_eq!(LossRecord::parse_line(&r.to_line()).unwrap(), r);
        assert_eq!(LOSS_LOG_HEADER.split('\t').count(), 6);
    }
}
