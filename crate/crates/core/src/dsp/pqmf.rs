//! Pseudo-QMF cosine-modulated filter bank.
//!
//! Analysis filters are `h_k[n] = 2 p[n] cos((2k+1) pi/(2C) (n - (L-1)/2) + (-1)^k pi/4)` and
//! synthesis filters use the opposite phase term, where `p` is a Kaiser-windowed sinc prototype.
//! Both sides carry a `sqrt(C)` gain so that sub-band energy matches input energy and the
//! analysis/synthesis round trip has unit gain with a delay of `L - 1` samples.

use std::f64::consts::PI;

use crate::dsp::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Cutoff found by [`PqmfConfig::tuned`] for `C = 4`, `L = 128`, `beta = 9`.
const TUNED_CUTOFF_C4: f64 = 0.133_300_302_893_521_43;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqmfConfig {
    pub num_bands: usize,
    pub prototype_len: usize,
    pub kaiser_beta: f64,
    /// Prototype cutoff, normalized so that 1.0 is the Nyquist frequency.
    pub cutoff: f64,
}

impl Default for PqmfConfig {
    fn default() -> Self {
        Self { num_bands: 4, prototype_len: 128, kaiser_beta: 9.0, cutoff: TUNED_CUTOFF_C4 }
    }
}

impl PqmfConfig {
    pub fn new(num_bands: usize, prototype_len: usize, kaiser_beta: f64, cutoff: f64) -> Result<Self> {
        let cfg = Self { num_bands, prototype_len, kaiser_beta, cutoff };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config with `32 * num_bands` taps and a cutoff chosen by minimizing the
    /// round-trip reconstruction error.
    pub fn tuned(num_bands: usize, kaiser_beta: f64) -> Result<Self> {
        if num_bands == 4 && kaiser_beta == 9.0 {
            return Ok(Self::default());
        }
        Self::search(num_bands, 32 * num_bands, kaiser_beta)
    }

    /// One-dimensional cutoff search: coarse grid, then golden-section refinement.
    pub fn search(num_bands: usize, prototype_len: usize, kaiser_beta: f64) -> Result<Self> {
        if num_bands < 2 {
            return Err(Error::config("PQMF needs at least 2 bands"));
        }
        let ideal = 0.5 / num_bands as f64;
        let (lo, hi) = (0.6 * ideal, 1.4 * ideal);
        let cost = |c: f64| round_trip_error(num_bands, prototype_len, kaiser_beta, c);
        let steps = 200;
        let mut best = (f64::INFINITY, lo);
        for i in 0..=steps {
            let c = lo + (hi - lo) * i as f64 / steps as f64;
            let e = cost(c);
            if e < best.0 {
                best = (e, c);
            }
        }
        let h = (hi - lo) / steps as f64;
        let (mut a, mut b) = (best.1 - h, best.1 + h);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c1 = b - g * (b - a);
        let mut c2 = a + g * (b - a);
        let (mut f1, mut f2) = (cost(c1), cost(c2));
        for _ in 0..60 {
            if f1 < f2 {
                b = c2;
                c2 = c1;
                f2 = f1;
                c1 = b - g * (b - a);
                f1 = cost(c1);
            } else {
                a = c1;
                c1 = c2;
                f1 = f2;
                c2 = a + g * (b - a);
                f2 = cost(c2);
            }
        }
        let cutoff = if f1 < f2 { c1 } else { c2 };
        Self::new(num_bands, prototype_len, kaiser_beta, cutoff)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bands < 2 {
            return Err(Error::config("PQMF needs at least 2 bands"));
        }
        if self.prototype_len == 0 || !self.prototype_len.is_multiple_of(2 * self.num_bands) {
            return Err(Error::config(format!(
                "prototype length {} must be a positive multiple of 2*num_bands = {}",
                self.prototype_len,
                2 * self.num_bands
            )));
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0 / self.num_bands as f64) {
            return Err(Error::config(format!("cutoff {} outside (0, 1/num_bands)", self.cutoff)));
        }
        if !self.kaiser_beta.is_finite() || self.kaiser_beta < 0.0 {
            return Err(Error::config("kaiser beta must be finite and non-negative"));
        }
        Ok(())
    }

    /// Round-trip delay in samples.
    pub fn delay(&self) -> usize {
        self.prototype_len - 1
    }
}

/// Decimated sub-band signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSignals {
    pub bands: Vec<Vec<f64>>,
    pub parent_rate: u32,
}

impl SubbandSignals {
    pub fn new(bands: Vec<Vec<f64>>, parent_rate: u32) -> Result<Self> {
        if bands.len() < 2 {
            return Err(Error::invalid("need at least 2 sub-bands"));
        }
        let n = bands[0].len();
        if let Some(k) = bands.iter().position(|b| b.len() != n) {
            return Err(Error::invalid(format!(
                "band {k} has length {} but band 0 has {n}",
                bands[k].len()
            )));
        }
        Ok(Self { bands, parent_rate })
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band_len(&self) -> usize {
        self.bands.first().map_or(0, Vec::len)
    }

    pub fn band_rate(&self) -> f64 {
        self.parent_rate as f64 / self.bands.len() as f64
    }

    pub fn energy(&self) -> f64 {
        self.bands.iter().flatten().map(|v| v * v).sum()
    }
}

/// Filter bank with precomputed analysis and synthesis filters.
#[derive(Debug, Clone)]
pub struct Pqmf {
    cfg: PqmfConfig,
    analysis: Vec<Vec<f64>>,
    synthesis: Vec<Vec<f64>>,
}

impl Pqmf {
    pub fn new(cfg: PqmfConfig) -> Result<Self> {
        cfg.validate()?;
        let (analysis, synthesis) = design_filters(&cfg);
        Ok(Self { cfg, analysis, synthesis })
    }

    pub fn config(&self) -> &PqmfConfig {
        &self.cfg
    }

    pub fn num_bands(&self) -> usize {
        self.cfg.num_bands
    }

    pub fn delay(&self) -> usize {
        self.cfg.delay()
    }

    pub fn analysis_filters(&self) -> &[Vec<f64>] {
        &self.analysis
    }

    pub fn analysis(&self, audio: &AudioBuffer) -> Result<SubbandSignals> {
        let l = self.cfg.prototype_len;
        if audio.len() < l {
            return Err(Error::TooShort { needed: l, got: audio.len() });
        }
        let bands = self.analyze_samples(audio.samples());
        SubbandSignals::new(bands, audio.sample_rate())
    }

    /// `y_k[m] = sum_j h_k[j] x[mC - j]`, one output per `C` input samples.
    pub(crate) fn analyze_samples(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let c = self.cfg.num_bands;
        let m_len = x.len().div_ceil(c);
        self.analysis
            .iter()
            .map(|h| {
                (0..m_len)
                    .map(|m| {
                        let n = m * c;
                        let jmax = n.min(h.len() - 1);
                        (0..=jmax).map(|j| h[j] * x[n - j]).sum()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn synthesis(&self, bands: &SubbandSignals) -> Result<AudioBuffer> {
        if bands.num_bands() != self.cfg.num_bands {
            return Err(Error::invalid(format!(
                "expected {} bands, got {}",
                self.cfg.num_bands,
                bands.num_bands()
            )));
        }
        let refs: Vec<&[f64]> = bands.bands.iter().map(Vec::as_slice).collect();
        AudioBuffer::new(self.synthesize_slices(&refs)?, bands.parent_rate)
    }

    /// `out[n] = sum_k sum_m g_k[n - mC] y_k[m]`, length `band_len * C`.
    pub(crate) fn synthesize_slices(&self, bands: &[&[f64]]) -> Result<Vec<f64>> {
        let c = self.cfg.num_bands;
        if bands.len() != c {
            return Err(Error::invalid(format!("expected {c} bands, got {}", bands.len())));
        }
        let m_len = bands[0].len();
        if let Some(k) = bands.iter().position(|b| b.len() != m_len) {
            return Err(Error::invalid(format!("band {k} length differs from band 0")));
        }
        let mut out = vec![0.0; m_len * c];
        let n_out = out.len();
        for (g, y) in self.synthesis.iter().zip(bands) {
            for (m, &ym) in y.iter().enumerate() {
                if ym == 0.0 {
                    continue;
                }
                let base = m * c;
                let end = (base + g.len()).min(n_out);
                for (o, gj) in out[base..end].iter_mut().zip(g) {
                    *o += gj * ym;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Pqmf::synthesize_slices`]: maps an output-domain gradient back onto the bands.
    pub(crate) fn synthesis_adjoint(&self, grad: &[f64], band_len: usize) -> Vec<Vec<f64>> {
        let c = self.cfg.num_bands;
        let n_out = band_len * c;
        self.synthesis
            .iter()
            .map(|g| {
                (0..band_len)
                    .map(|m| {
                        let base = m * c;
                        let end = (base + g.len()).min(n_out).min(grad.len());
                        if base >= end {
                            return 0.0;
                        }
                        grad[base..end].iter().zip(g).map(|(a, b)| a * b).sum()
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn pqmf_analysis(audio: &AudioBuffer, cfg: &PqmfConfig) -> Result<SubbandSignals> {
    Pqmf::new(*cfg)?.analysis(audio)
}

pub fn pqmf_synthesis(bands: &SubbandSignals, cfg: &PqmfConfig) -> Result<AudioBuffer> {
    Pqmf::new(*cfg)?.synthesis(bands)
}

/// Kaiser-windowed sinc lowpass with unit DC gain.
pub fn prototype(len: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let center = (len - 1) as f64 / 2.0;
    let denom = bessel_i0(beta);
    let mut p: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - center;
            let arg = PI * cutoff * t;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom;
            cutoff * sinc * w
        })
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn design_filters(cfg: &PqmfConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = cfg.num_bands;
    let l = cfg.prototype_len;
    let p = prototype(l, cfg.cutoff, cfg.kaiser_beta);
    let gain = (c as f64).sqrt();
    let center = (l - 1) as f64 / 2.0;
    let mut analysis = Vec::with_capacity(c);
    let mut synthesis = Vec::with_capacity(c);
    for k in 0..c {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let omega = (2 * k + 1) as f64 * PI / (2 * c) as f64;
        let mut h = Vec::with_capacity(l);
        let mut g = Vec::with_capacity(l);
        for (n, pn) in p.iter().enumerate() {
            let phase = omega * (n as f64 - center);
            h.push(gain * 2.0 * pn * (phase + sign * PI / 4.0).cos());
            g.push(gain * 2.0 * pn * (phase - sign * PI / 4.0).cos());
        }
        analysis.push(h);
        synthesis.push(g);
    }
    (analysis, synthesis)
}

/// Squared deviation of the analysis/synthesis response from a pure delay, summed over all
/// `C` impulse phases.
fn round_trip_error(c: usize, l: usize, beta: f64, cutoff: f64) -> f64 {
    let cfg = PqmfConfig { num_bands: c, prototype_len: l, kaiser_beta: beta, cutoff };
    let (analysis, synthesis) = design_filters(&cfg);
    let bank = Pqmf { cfg, analysis, synthesis };
    let n = 4 * l;
    let mut err = 0.0;
    for phase in 0..c {
        let pos = l + phase;
        let mut x = vec![0.0; n];
        x[pos] = 1.0;
        let bands = bank.analyze_samples(&x);
        let refs: Vec<&[f64]> = bands.iter().map(Vec::as_slice).collect();
        let y = bank.synthesize_slices(&refs).expect("consistent bands");
        for (i, v) in y.iter().enumerate() {
            let target = if i == pos + l - 1 { 1.0 } else { 0.0 };
            err += (v - target) * (v - target);
        }
    }
    err
}
