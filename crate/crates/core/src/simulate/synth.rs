//! Synthetic stand-ins for vocals, accompaniment and noise.

use std::f64::consts::PI;

use rand::Rng;

use crate::dsp::AudioBuffer;
use crate::error::Result;

/// Pitch range of a synthetic singer and the band its harmonics are confined to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0_hz: (f64, f64),
    pub band_hz: (f64, f64),
}

impl Voice {
    pub const LEAD: Voice = Voice { f0_hz: (180.0, 500.0), band_hz: (100.0, 5000.0) };
    /// Two singers with disjoint harmonic bands.
    pub const LOW: Voice = Voice { f0_hz: (200.0, 400.0), band_hz: (150.0, 1600.0) };
    pub const HIGH: Voice = Voice { f0_hz: (1100.0, 1600.0), band_hz: (3000.0, 9000.0) };
}

/// A melody of harmonic notes with vibrato and smooth onsets, peak-normalized to 0.5.
pub fn synth_vocal(voice: Voice, secs: f64, rate: u32, rng: &mut impl Rng) -> Result<AudioBuffer> {
    let n = (secs * rate as f64).round() as usize;
    let sr = rate as f64;
    let mut out = vec![0.0; n];
    let (lo, hi) = (voice.f0_hz.0.log2() * 12.0, voice.f0_hz.1.log2() * 12.0);
    let mut start = 0;
    while start < n {
        let len = ((rng.gen_range(0.15..0.35) * sr) as usize).min(n - start);
        let f0 = 2f64.powf(rng.gen_range(lo..=hi).round() / 12.0);
        let vib_rate = rng.gen_range(4.5..6.5);
        let vib_depth = rng.gen_range(0.002..0.008);
        let ramp = (0.02 * sr) as usize;
        let mut phase = 0.0;
        for i in 0..len {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f / sr;
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if len - i < ramp {
                0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut v = 0.0;
            for k in 1..=40 {
                let fk = f0 * k as f64;
                if fk > voice.band_hz.1 || fk >= sr / 2.0 {
                    break;
                }
                if fk >= voice.band_hz.0 {
                    v += (k as f64 * phase).sin() / k as f64;
                }
            }
            out[start + i] = env * v;
        }
        start += len;
    }
    AudioBuffer::new(peak_normalize(out, 0.5), rate)
}

/// Band-pass filtered noise with a pulsing envelope.
pub fn synth_accompaniment(secs: f64, rate: u32, rng: &mut impl Rng) -> Result<AudioBuffer> {
    let n = (secs * rate as f64).round() as usize;
    let sr = rate as f64;
    let mut out = vec![0.0; n];
    for _ in 0..2 {
        let centre = rng.gen_range(200.0..2000.0);
        let q = rng.gen_range(1.0..4.0);
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let band = bandpass(&noise, centre, q, sr);
        let beat = rng.gen_range(1.5..3.0);
        for (i, (o, b)) in out.iter_mut().zip(&band).enumerate() {
            let t = i as f64 / sr;
            *o += b * (0.6 + 0.4 * (2.0 * PI * beat * t).cos());
        }
    }
    AudioBuffer::new(peak_normalize(out, 0.5), rate)
}

pub fn white_noise(secs: f64, rate: u32, rng: &mut impl Rng) -> Result<AudioBuffer> {
    let n = (secs * rate as f64).round() as usize;
    AudioBuffer::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), rate)
}

/// RBJ constant-peak band-pass biquad.
fn bandpass(x: &[f64], centre: f64, q: f64, sr: f64) -> Vec<f64> {
    let w = 2.0 * PI * centre / sr;
    let alpha = w.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn peak_normalize(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}
