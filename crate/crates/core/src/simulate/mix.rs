//! SNR-controlled mixing.

use rand::Rng;

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

/// Range of the accompaniment and noise SNR draws, in dB.
pub const MIX_SNR_RANGE: (f64, f64) = (-5.0, 15.0);

fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// `10 log10(P_signal / P_interference)`.
pub fn measure_snr(signal: &[f64], interference: &[f64]) -> f64 {
    10.0 * (power(signal) / power(interference)).log10()
}

/// Fits `x` to `n` samples starting at `offset`: longer inputs are cropped, shorter ones looped.
pub fn fit_length(x: &[f64], n: usize, offset: usize) -> Vec<f64> {
    if x.is_empty() {
        return vec![0.0; n];
    }
    (0..n).map(|i| x[(offset + i) % x.len()]).collect()
}

/// Offset for [`fit_length`]: a random crop start for longer inputs, a random loop phase otherwise.
pub fn draw_offset(len: usize, n: usize, rng: &mut impl Rng) -> usize {
    match len {
        0 => 0,
        l if l > n => rng.gen_range(0..=l - n),
        l => rng.gen_range(0..l),
    }
}

/// Returns `signal + scale * interference` and `scale`, with
/// `scale = sqrt(P_signal / (P_interference * 10^(snr_db / 10)))`.
pub fn mix_at_snr(signal: &[f64], interference: &[f64], snr_db: f64) -> Result<(Vec<f64>, f64)> {
    if signal.len() != interference.len() {
        return Err(Error::shape(format!("mix lengths {} vs {}", signal.len(), interference.len())));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("mix SNR must be finite"));
    }
    let (ps, pi) = (power(signal), power(interference));
    if ps <= 0.0 {
        return Err(Error::invalid("signal has zero power"));
    }
    if pi <= 0.0 {
        return Err(Error::invalid("interference has zero power"));
    }
    let scale = (ps / (pi * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok((signal.iter().zip(interference).map(|(s, n)| s + scale * n).collect(), scale))
}

/// One interference applied by [`simulate_pair`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixStep {
    pub snr_db: f64,
    pub scale: f64,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPair {
    pub noisy: AudioBuffer,
    pub clean: AudioBuffer,
    pub accomp: Option<MixStep>,
    pub noise: Option<MixStep>,
}

fn apply(
    mix: &[f64],
    interference: &AudioBuffer,
    rate: u32,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, MixStep)> {
    if interference.sample_rate() != rate {
        return Err(Error::SampleRate { got: interference.sample_rate(), expected: rate });
    }
    let offset = draw_offset(interference.len(), mix.len(), rng);
    let snr_db = rng.gen_range(MIX_SNR_RANGE.0..=MIX_SNR_RANGE.1);
    let fitted = fit_length(interference.samples(), mix.len(), offset);
    let (out, scale) = mix_at_snr(mix, &fitted, snr_db)?;
    Ok((out, MixStep { snr_db, scale, offset }))
}

/// Vocal plus accompaniment, then that mixture plus noise, each at an SNR drawn from
/// [`MIX_SNR_RANGE`].
pub fn simulate_pair(
    vocal: &AudioBuffer,
    accomp: Option<&AudioBuffer>,
    noise: Option<&AudioBuffer>,
    rng: &mut impl Rng,
) -> Result<SimulatedPair> {
    let rate = vocal.sample_rate();
    let mut mix = vocal.samples().to_vec();
    let mut steps = [None, None];
    for (slot, src) in steps.iter_mut().zip([accomp, noise]) {
        if let Some(src) = src {
            let (m, step) = apply(&mix, src, rate, rng)?;
            mix = m;
            *slot = Some(step);
        }
    }
    Ok(SimulatedPair { noisy: AudioBuffer::new(mix, rate)?, clean: vocal.clone(), accomp: steps[0], noise: steps[1] })
}
