//! Band-limited resampling and resampling-based pitch shifting.

use std::f64::consts::PI;

use crate::dsp::audio::AudioBuffer;
use crate::error::{Error, Result};

const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;

/// Reads `x` at positions `0, step, 2*step, ...` through a Kaiser-windowed sinc kernel whose
/// cutoff follows the decimation factor.
fn read_at_step(x: &[f64], step: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len();
    let out_len = ((n - 1) as f64 / step).floor() as usize + 1;
    let fc = (1.0 / step).min(1.0);
    let half = ZERO_CROSSINGS / fc;
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..out_len)
        .map(|m| {
            let t = m as f64 * step;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(n - 1);
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - i as f64;
                let r = d / half;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                let a = PI * fc * d;
                let s = if a.abs() < 1e-12 { 1.0 } else { a.sin() / a };
                acc += xi * fc * s * w;
            }
            acc
        })
        .collect()
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..100 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Shifts pitch by `2^(semitones/12)`; duration shrinks by the same factor.
pub fn pitch_shift_semitones(audio: &AudioBuffer, semitones: i32) -> Result<AudioBuffer> {
    if semitones.abs() > 12 {
        return Err(Error::invalid(format!("pitch shift of {semitones} semitones exceeds one octave")));
    }
    if semitones == 0 {
        return Ok(audio.clone());
    }
    let factor = 2f64.powf(semitones as f64 / 12.0);
    AudioBuffer::new(read_at_step(audio.samples(), factor), audio.sample_rate())
}

/// Converts to `target_rate`.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_rate == audio.sample_rate() {
        return Ok(audio.clone());
    }
    let step = audio.sample_rate() as f64 / target_rate as f64;
    AudioBuffer::new(read_at_step(audio.samples(), step), target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::{Stft, StftConfig, Window};

    fn tone(hz: f64, secs: f64) -> AudioBuffer {
        let sr = 44_100;
        let n = (secs * sr as f64) as usize;
        let x = (0..n).map(|i| 0.5 * (2.0 * PI * hz * i as f64 / sr as f64).sin()).collect();
        AudioBuffer::new(x, sr as u32).unwrap()
    }

    /// Peak frequency from an averaged 16384-point magnitude spectrum with parabolic refinement.
    fn dominant_hz(a: &AudioBuffer) -> (f64, f64) {
        let n = 16_384;
        let cfg = StftConfig { frame_len: n, hop: n / 2, fft_size: n, window: Window::Hann };
        let spec = Stft::new(cfg).unwrap().forward(a);
        let mut mag = vec![0.0; spec.num_bins];
        for (f, m) in mag.iter_mut().enumerate() {
            for t in 0..spec.num_frames {
                *m += spec.get(f, t).norm();
            }
        }
        let k = (1..mag.len() - 1).max_by(|&x, &y| mag[x].total_cmp(&mag[y])).unwrap();
        let (l, c, r) = (mag[k - 1].ln(), mag[k].ln(), mag[k + 1].ln());
        let delta = 0.5 * (l - r) / (l - 2.0 * c + r);
        let bin_hz = a.sample_rate() as f64 / n as f64;
        ((k as f64 + delta) * bin_hz, bin_hz)
    }

    #[test]
    fn zero_shift_is_identity() {
        let a = tone(440.0, 0.2);
        assert_eq!(pitch_shift_semitones(&a, 0).unwrap(), a);
    }

    #[test]
    fn octave_up_doubles_frequency_and_halves_duration() {
        let a = tone(440.0, 2.0);
        let b = pitch_shift_semitones(&a, 12).unwrap();
        assert!((b.len() as f64 - a.len() as f64 / 2.0).abs() <= 1.0);
        let (hz, bin) = dominant_hz(&b);
        assert!((hz - 880.0).abs() <= bin, "{hz}");
    }

    #[test]
    fn two_semitones_ratio() {
        let a = tone(440.0, 2.0);
        for s in [2, -2] {
            let b = pitch_shift_semitones(&a, s).unwrap();
            let (hz, _) = dominant_hz(&b);
            let ratio = hz / 440.0;
            let expect = 2f64.powf(s as f64 / 12.0);
            assert!((ratio / expect - 1.0).abs() < 0.01, "{s}: {ratio}");
        }
    }

    #[test]
    fn rejects_more_than_an_octave() {
        assert!(pitch_shift_semitones(&tone(440.0, 0.1), 13).is_err());
    }

    #[test]
    fn resample_preserves_tone() {
        let a = tone(1000.0, 1.0);
        let b = resample(&a, 22_050).unwrap();
        assert_eq!(b.sample_rate(), 22_050);
        let (hz, bin) = dominant_hz(&b);
        assert!((hz - 1000.0).abs() <= bin);
    }
}
