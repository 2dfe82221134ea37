//! Short-time Fourier transform with reflect padding and window-square normalized overlap-add.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dsp::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Window,
}

impl Default for StftConfig {
    /// 256/128/256 at the sub-band rate.
    fn default() -> Self {
        Self { frame_len: 256, hop: 128, fft_size: 256, window: Window::Hann }
    }
}

impl StftConfig {
    pub fn new(frame_len: usize, hop: usize, fft_size: usize) -> Result<Self> {
        let cfg = Self { frame_len, hop, fft_size, window: Window::Hann };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len || self.frame_len > self.fft_size {
            return Err(Error::config(format!(
                "need 0 < hop <= frame_len <= fft_size, got hop={} frame_len={} fft_size={}",
                self.hop, self.frame_len, self.fft_size
            )));
        }
        if !self.frame_len.is_multiple_of(2) {
            return Err(Error::config("frame_len must be even"));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len == 0 {
            0
        } else {
            1 + len.div_ceil(self.hop)
        }
    }

    fn pad(&self) -> usize {
        self.frame_len / 2
    }
}

/// Complex `F x T` grid stored row-major by frequency (`bins[f * T + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Vec<Complex64>,
    pub num_bins: usize,
    pub num_frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Window,
    /// Length of the analyzed signal, used to trim the inverse transform.
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn config(&self) -> StftConfig {
        StftConfig { frame_len: self.frame_len, hop: self.hop, fft_size: self.fft_size, window: self.window }
    }

    pub fn get(&self, f: usize, t: usize) -> Complex64 {
        self.bins[f * self.num_frames + t]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        let mut out = self.clone();
        out.bins.iter_mut().for_each(|c| *c *= gain);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.bins.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Reusable transform with cached FFT plans.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window.coefficients(cfg.frame_len),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn forward(&self, audio: &AudioBuffer) -> ComplexSpectrogram {
        self.forward_samples(audio.samples(), audio.sample_rate())
    }

    pub fn forward_samples(&self, x: &[f64], sample_rate: u32) -> ComplexSpectrogram {
        let cfg = &self.cfg;
        let n = x.len();
        let t_len = cfg.num_frames(n);
        let f_len = cfg.num_bins();
        let mut bins = vec![Complex64::new(0.0, 0.0); f_len * t_len];
        let pad = cfg.pad() as isize;
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..t_len {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let start = (t * cfg.hop) as isize - pad;
            for (i, w) in self.window.iter().enumerate() {
                let pos = start + i as isize;
                // beyond the reflected right edge the padded signal is zero
                if pos >= n as isize + pad {
                    break;
                }
                buf[i].re = w * x[reflect_index(pos, n)];
            }
            self.forward.process(&mut buf);
            for f in 0..f_len {
                bins[f * t_len + t] = buf[f];
            }
        }
        ComplexSpectrogram {
            bins,
            num_bins: f_len,
            num_frames: t_len,
            frame_len: cfg.frame_len,
            hop: cfg.hop,
            fft_size: cfg.fft_size,
            window: cfg.window,
            signal_len: n,
            sample_rate,
        }
    }

    fn check_meta(&self, spec: &ComplexSpectrogram) -> Result<()> {
        if spec.config() != self.cfg {
            return Err(Error::invalid("spectrogram frame parameters differ from the transform"));
        }
        if spec.num_bins != self.cfg.num_bins()
            || spec.bins.len() != spec.num_bins * spec.num_frames
            || spec.num_frames != self.cfg.num_frames(spec.signal_len)
        {
            return Err(Error::invalid(format!(
                "inconsistent spectrogram metadata: {} bins x {} frames for signal length {}",
                spec.num_bins, spec.num_frames, spec.signal_len
            )));
        }
        Ok(())
    }

    pub fn inverse(&self, spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
        self.check_meta(spec)?;
        let re: Vec<f64> = spec.bins.iter().map(|c| c.re).collect();
        let im: Vec<f64> = spec.bins.iter().map(|c| c.im).collect();
        let samples = self.inverse_parts(&re, &im, spec.num_frames, spec.signal_len);
        AudioBuffer::new(samples, spec.sample_rate)
    }

    fn norm_weights(&self, t_len: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let total = (t_len.max(1) - 1) * cfg.hop + cfg.frame_len;
        let mut wsum = vec![0.0; total];
        for t in 0..t_len {
            for (i, w) in self.window.iter().enumerate() {
                wsum[t * cfg.hop + i] += w * w;
            }
        }
        wsum.iter().map(|&s| if s > 1e-10 { 1.0 / s } else { 0.0 }).collect()
    }

    /// Inverse from split real/imaginary planes laid out `[F][T]`.
    pub(crate) fn inverse_parts(&self, re: &[f64], im: &[f64], t_len: usize, signal_len: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        if t_len == 0 {
            return vec![0.0; signal_len];
        }
        let f_len = cfg.num_bins();
        let nfft = cfg.fft_size;
        let total = (t_len - 1) * cfg.hop + cfg.frame_len;
        let mut ola = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        for t in 0..t_len {
            for f in 0..f_len {
                let idx = f * t_len + t;
                let imag = if f == 0 || 2 * f == nfft { 0.0 } else { im[idx] };
                buf[f] = Complex64::new(re[idx], imag);
            }
            for f in f_len..nfft {
                buf[f] = buf[nfft - f].conj();
            }
            self.inverse.process(&mut buf);
            for (i, w) in self.window.iter().enumerate() {
                ola[t * cfg.hop + i] += w * buf[i].re / nfft as f64;
            }
        }
        let norm = self.norm_weights(t_len);
        let pad = cfg.pad();
        (0..signal_len)
            .map(|j| {
                let k = j + pad;
                if k < total {
                    ola[k] * norm[k]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Adjoint of [`Stft::inverse_parts`]: gradient w.r.t. the real and imaginary planes.
    pub(crate) fn inverse_adjoint(&self, grad: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let f_len = cfg.num_bins();
        let nfft = cfg.fft_size;
        let mut g_re = vec![0.0; f_len * t_len];
        let mut g_im = vec![0.0; f_len * t_len];
        if t_len == 0 {
            return (g_re, g_im);
        }
        let total = (t_len - 1) * cfg.hop + cfg.frame_len;
        let norm = self.norm_weights(t_len);
        let pad = cfg.pad();
        let mut g_ola = vec![0.0; total];
        for (j, g) in grad.iter().enumerate() {
            let k = j + pad;
            if k < total {
                g_ola[k] = g * norm[k];
            }
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        for t in 0..t_len {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = w * g_ola[t * cfg.hop + i] / nfft as f64;
            }
            self.forward.process(&mut buf);
            for f in 0..f_len {
                let edge = f == 0 || 2 * f == nfft;
                let c = if edge { 1.0 } else { 2.0 };
                let idx = f * t_len + t;
                g_re[idx] = c * buf[f].re;
                g_im[idx] = if edge { 0.0 } else { c * buf[f].im };
            }
        }
        (g_re, g_im)
    }
}

pub fn stft(audio: &AudioBuffer, frame_len: usize, hop: usize, fft_size: usize) -> Result<ComplexSpectrogram> {
    Ok(Stft::new(StftConfig::new(frame_len, hop, fft_size)?)?.forward(audio))
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
    Stft::new(spec.config())?.inverse(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_signal_gives_zero_bins() {
        let spec = stft(&AudioBuffer::zeros(1000, 11_025), 256, 128, 256).unwrap();
        assert_eq!(spec.num_bins, 129);
        assert_eq!(spec.num_frames, 1 + 1000usize.div_ceil(128));
        assert!(spec.bins.iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert_eq!(back.len(), 1000);
        assert!(back.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_audio_gives_empty_spectrogram() {
        let spec = stft(&AudioBuffer::zeros(0, 11_025), 256, 128, 256).unwrap();
        assert_eq!(spec.num_frames, 0);
        assert!(istft(&spec).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(StftConfig::new(256, 300, 256).is_err());
        assert!(StftConfig::new(512, 128, 256).is_err());
        assert!(StftConfig::new(256, 0, 256).is_err());
    }

    #[test]
    fn cosine_at_bin_has_half_frame_peak() {
        let n = 256;
        let k = 10;
        let x: Vec<f64> = (0..4096).map(|i| (2.0 * PI * k as f64 * i as f64 / n as f64).cos()).collect();
        let cfg = StftConfig { frame_len: n, hop: 128, fft_size: n, window: Window::Rectangular };
        let spec = Stft::new(cfg).unwrap().forward(&AudioBuffer::new(x, 11_025).unwrap());
        let t = spec.num_frames / 2;
        let mag = spec.get(k, t).norm();
        assert!((mag - n as f64 / 2.0).abs() <= 1e-6 * n as f64 / 2.0, "{mag}");
        for f in 0..spec.num_bins {
            assert!(spec.get(f, t).norm() <= mag + 1e-9);
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let x = noise(5000, 4);
        let audio = AudioBuffer::new(x.clone(), 11_025).unwrap();
        let spec = stft(&audio, 256, 128, 256).unwrap();
        let back = istft(&spec).unwrap();
        let err: f64 = back.samples().iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
        let sig: f64 = x.iter().map(|v| v * v).sum();
        assert!(10.0 * (sig / err).log10() > 50.0);
    }

    #[test]
    fn short_signals_round_trip() {
        for n in [1usize, 2, 7, 100, 129, 300] {
            let x = noise(n, n as u64);
            let spec = stft(&AudioBuffer::new(x.clone(), 11_025).unwrap(), 256, 128, 256).unwrap();
            let back = istft(&spec).unwrap();
            for (a, b) in back.samples().iter().zip(&x) {
                assert!((a - b).abs() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn doubled_spectrum_doubles_output() {
        let x = noise(3000, 9);
        let spec = stft(&AudioBuffer::new(x, 11_025).unwrap(), 256, 128, 256).unwrap();
        let a = istft(&spec).unwrap();
        let b = istft(&spec.scaled(2.0)).unwrap();
        for (u, v) in a.samples().iter().zip(b.samples()) {
            assert!((2.0 * u - v).abs() <= 1e-6 * u.abs().max(1e-3));
        }
    }

    #[test]
    fn inconsistent_metadata_rejected() {
        let mut spec = stft(&AudioBuffer::new(noise(1000, 1), 11_025).unwrap(), 256, 128, 256).unwrap();
        spec.signal_len = 5000;
        assert!(istft(&spec).is_err());
    }

    #[test]
    fn inverse_adjoint_identity() {
        let st = Stft::new(StftConfig::default()).unwrap();
        let t_len = st.config().num_frames(700);
        let f_len = st.config().num_bins();
        let re = noise(f_len * t_len, 1);
        let im = noise(f_len * t_len, 2);
        let g = noise(700, 3);
        let out = st.inverse_parts(&re, &im, t_len, 700);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let (gr, gi) = st.inverse_adjoint(&g, t_len);
        let rhs: f64 = gr.iter().zip(&re).map(|(a, b)| a * b).sum::<f64>()
            + gi.iter().zip(&im).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
