mod common;

use common::{noise_audio, snr_db, sweep, tone, RATE};
use mbtf_core::dsp::pqmf::prototype;
use mbtf_core::dsp::{chroma, pitch_shift_semitones, stft, AudioBuffer, Pqmf, PqmfConfig};
use rustfft::{num_complex::Complex64, FftPlanner};
use std::f64::consts::PI;

fn round_trip_snr(pqmf: &Pqmf, x: &AudioBuffer) -> f64 {
    let d = pqmf.delay();
    let mut padded = x.samples().to_vec();
    padded.extend(std::iter::repeat_n(0.0, d));
    let bands = pqmf.analysis(&AudioBuffer::new(padded, RATE).unwrap()).unwrap();
    let y = pqmf.synthesis(&bands).unwrap();
    snr_db(x.samples(), &y.samples()[d..d + x.len()])
}

#[test]
fn pqmf_round_trips() {
    let pqmf = Pqmf::new(PqmfConfig::default()).unwrap();
    assert_eq!(pqmf.delay(), 127);
    for x in [noise_audio(1.0, 1), sweep(1.0, 20.0, 20_000.0)] {
        assert!(round_trip_snr(&pqmf, &x) >= 40.0);
    }
}

/// Cosine-modulated analysis filters built from the prototype (with the sqrt(C) gain that gives
/// the round trip unit gain), applied by direct convolution and decimation.
fn oracle_band_energies(x: &[f64], cfg: &PqmfConfig) -> Vec<f64> {
    let c = cfg.num_bands;
    let p = prototype(cfg.prototype_len, cfg.cutoff, cfg.kaiser_beta);
    let mid = (cfg.prototype_len - 1) as f64 / 2.0;
    let gain = (c as f64).sqrt();
    (0..c)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let h: Vec<f64> = (0..p.len())
                .map(|n| gain * 2.0 * p[n] * ((2 * k + 1) as f64 * PI / (2 * c) as f64 * (n as f64 - mid) + sign * PI / 4.0).cos())
                .collect();
            (0..x.len().div_ceil(c))
                .map(|m| {
                    let y: f64 = (0..h.len()).filter(|&j| j <= m * c).map(|j| h[j] * x[m * c - j]).sum();
                    y * y
                })
                .sum()
        })
        .collect()
}

#[test]
fn one_kilohertz_sits_in_band_zero() {
    let cfg = PqmfConfig::default();
    let x = tone(1000.0, 0.5, 0.5);
    let oracle = oracle_band_energies(x.samples(), &cfg);
    assert!(oracle[0] / oracle.iter().sum::<f64>() >= 0.95);
    let bands = Pqmf::new(cfg).unwrap().analysis(&x).unwrap();
    for (b, e) in bands.bands.iter().zip(&oracle) {
        let got: f64 = b.iter().map(|v| v * v).sum();
        assert!((got - e).abs() <= 1e-9 * e.max(1e-12), "{got} vs {e}");
    }
}

#[test]
fn impulse_round_trip_sidelobes() {
    let pqmf = Pqmf::new(PqmfConfig::default()).unwrap();
    let mut x = vec![0.0; 1024];
    x[300] = 1.0;
    let y = pqmf.synthesis(&pqmf.analysis(&AudioBuffer::new(x, RATE).unwrap()).unwrap()).unwrap();
    let main = 300 + pqmf.delay();
    let peak = y.samples()[main].abs();
    let side = y.samples().iter().enumerate().filter(|(i, _)| *i != main).fold(0.0f64, |m, (_, v)| m.max(v.abs()));
    assert!(20.0 * (side / peak).log10() <= -40.0, "{side} vs {peak}");
}

#[test]
fn stft_round_trip_and_linearity() {
    let a = noise_audio(0.5, 2);
    let b = noise_audio(0.5, 3);
    let sa = stft(&a, 256, 128, 256).unwrap();
    let back = mbtf_core::dsp::istft(&sa).unwrap();
    assert!(snr_db(&a.samples()[256..a.len() - 256], &back.samples()[256..a.len() - 256]) >= 50.0);
    let mix = AudioBuffer::new(a.samples().iter().zip(b.samples()).map(|(x, y)| 0.7 * x - 1.3 * y).collect(), RATE).unwrap();
    let sb = stft(&b, 256, 128, 256).unwrap();
    let sm = stft(&mix, 256, 128, 256).unwrap();
    for ((m, p), q) in sm.bins.iter().zip(&sa.bins).zip(&sb.bins) {
        assert!((m - (0.7 * p - 1.3 * q)).norm() <= 1e-10 * (1.0 + m.norm()));
    }
}

fn dominant_hz(x: &AudioBuffer) -> (f64, f64) {
    let n = x.len().next_power_of_two();
    let mut buf: Vec<Complex64> = x.samples().iter().map(|v| Complex64::new(*v, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
    let bin = RATE as f64 / n as f64;
    (k as f64 * bin, bin)
}

#[test]
fn pitch_shift_moves_the_peak() {
    let x = tone(440.0, 1.0, 0.5);
    let (up, bin) = dominant_hz(&pitch_shift_semitones(&x, 12).unwrap());
    assert!((up - 880.0).abs() <= bin, "{up}");
    let (base, _) = dominant_hz(&x);
    let (two, _) = dominant_hz(&pitch_shift_semitones(&x, 2).unwrap());
    assert!(((two / base) / 2f64.powf(2.0 / 12.0) - 1.0).abs() < 0.01);
}

#[test]
fn chroma_finds_a_in_both_octaves() {
    for hz in [440.0, 880.0] {
        let spec = stft(&tone(hz, 0.5, 0.5), 4096, 2048, 4096).unwrap();
        let c = chroma(&spec, 440.0);
        let col = c[c.len() / 2];
        let best = (0..12).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(best, 9);
    }
}
