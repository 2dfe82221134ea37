//! Waveform <-> stacked sub-band spectrogram conversion.
//!
//! Band spectrograms are stacked as a `[2C, F, T]` tensor with channel `2c` holding the real
//! part and `2c + 1` the imaginary part of band `c`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::dsp::{AudioBuffer, ComplexSpectrogram, Pqmf, PqmfConfig, Stft, StftConfig};
use crate::error::{Error, Result};
use crate::nn::{LinearMap, Tensor};

/// Layout facts needed to turn a band tensor back into audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecLayout {
    pub num_bands: usize,
    pub num_bins: usize,
    pub num_frames: usize,
    pub band_len: usize,
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl SpecLayout {
    pub fn shape(&self) -> [usize; 3] {
        [2 * self.num_bands, self.num_bins, self.num_frames]
    }
}

#[derive(Debug, Clone)]
pub struct SubbandFrontend {
    pqmf: Arc<Pqmf>,
    stft: Arc<Stft>,
}

impl SubbandFrontend {
    pub fn new(pqmf: PqmfConfig, stft: StftConfig) -> Result<Self> {
        Ok(Self { pqmf: Arc::new(Pqmf::new(pqmf)?), stft: Arc::new(Stft::new(stft)?) })
    }

    pub fn num_bands(&self) -> usize {
        self.pqmf.num_bands()
    }

    pub fn min_len(&self) -> usize {
        self.pqmf.config().prototype_len
    }

    /// Layout produced by [`SubbandFrontend::analyze`] for `n` input samples.
    pub fn layout(&self, n: usize, sample_rate: u32) -> SpecLayout {
        let c = self.num_bands();
        let band_len = (n + self.pqmf.delay()).div_ceil(c);
        SpecLayout {
            num_bands: c,
            num_bins: self.stft.config().num_bins(),
            num_frames: self.stft.config().num_frames(band_len),
            band_len,
            signal_len: n,
            sample_rate,
        }
    }

    /// The input is zero-extended by the filter-bank delay so that the delay-compensated
    /// reconstruction covers every input sample.
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<(Tensor, SpecLayout)> {
        let n = audio.len();
        if n < self.min_len() {
            return Err(Error::TooShort { needed: self.min_len(), got: n });
        }
        let layout = self.layout(n, audio.sample_rate());
        let mut padded = audio.samples().to_vec();
        padded.resize(layout.band_len * layout.num_bands, 0.0);
        let bands = self.pqmf.analyze_samples(&padded);
        let (f, t) = (layout.num_bins, layout.num_frames);
        let mut data = vec![0.0; 2 * layout.num_bands * f * t];
        for (c, band) in bands.iter().enumerate() {
            let spec = self.stft.forward_samples(band, audio.sample_rate());
            let (re, im) = data[2 * c * f * t..(2 * c + 2) * f * t].split_at_mut(f * t);
            for (i, z) in spec.bins.iter().enumerate() {
                re[i] = z.re;
                im[i] = z.im;
            }
        }
        Ok((Tensor::new(layout.shape().to_vec(), data)?, layout))
    }

    fn check(&self, spec: &Tensor, layout: &SpecLayout) -> Result<()> {
        if spec.shape() != layout.shape() {
            return Err(Error::shape(format!("band tensor {:?} does not match layout {:?}", spec.shape(), layout.shape())));
        }
        Ok(())
    }

    pub fn synthesize_samples(&self, spec: &[f64], layout: &SpecLayout) -> Vec<f64> {
        let plane = layout.num_bins * layout.num_frames;
        let bands: Vec<Vec<f64>> = (0..layout.num_bands)
            .map(|c| {
                let re = &spec[2 * c * plane..(2 * c + 1) * plane];
                let im = &spec[(2 * c + 1) * plane..(2 * c + 2) * plane];
                self.stft.inverse_parts(re, im, layout.num_frames, layout.band_len)
            })
            .collect();
        let refs: Vec<&[f64]> = bands.iter().map(Vec::as_slice).collect();
        let full = self.pqmf.synthesize_slices(&refs).expect("band count fixed by layout");
        let d = self.pqmf.delay();
        full[d..d + layout.signal_len].to_vec()
    }

    pub fn synthesize(&self, spec: &Tensor, layout: &SpecLayout) -> Result<AudioBuffer> {
        self.check(spec, layout)?;
        AudioBuffer::new(self.synthesize_samples(spec.data(), layout), layout.sample_rate)
    }

    /// Per-band spectrogram objects for a band tensor.
    pub fn to_spectrograms(&self, spec: &Tensor, layout: &SpecLayout) -> Result<Vec<ComplexSpectrogram>> {
        self.check(spec, layout)?;
        let cfg = self.stft.config();
        let plane = layout.num_bins * layout.num_frames;
        let rate = layout.sample_rate / layout.num_bands as u32;
        Ok((0..layout.num_bands)
            .map(|c| ComplexSpectrogram {
                bins: (0..plane)
                    .map(|i| Complex64::new(spec.data()[2 * c * plane + i], spec.data()[(2 * c + 1) * plane + i]))
                    .collect(),
                num_bins: layout.num_bins,
                num_frames: layout.num_frames,
                frame_len: cfg.frame_len,
                hop: cfg.hop,
                fft_size: cfg.fft_size,
                window: cfg.window,
                signal_len: layout.band_len,
                sample_rate: rate,
            })
            .collect())
    }

    /// Differentiable band-tensor -> waveform map for a fixed layout.
    pub fn wave_map(&self, layout: SpecLayout) -> Arc<dyn LinearMap> {
        Arc::new(WaveSynth { front: self.clone(), layout })
    }
}

struct WaveSynth {
    front: SubbandFrontend,
    layout: SpecLayout,
}

impl LinearMap for WaveSynth {
    fn input_shape(&self) -> Vec<usize> {
        self.layout.shape().to_vec()
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.layout.signal_len]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.front.synthesize_samples(x, &self.layout)
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let d = self.front.pqmf.delay();
        let mut full = vec![0.0; l.band_len * l.num_bands];
        full[d..d + l.signal_len].copy_from_slice(g);
        let band_grads = self.front.pqmf.synthesis_adjoint(&full, l.band_len);
        let plane = l.num_bins * l.num_frames;
        let mut out = vec![0.0; 2 * l.num_bands * plane];
        for (c, bg) in band_grads.iter().enumerate() {
            let (g_re, g_im) = self.front.stft.inverse_adjoint(bg, l.num_frames);
            out[2 * c * plane..(2 * c + 1) * plane].copy_from_slice(&g_re);
            out[(2 * c + 1) * plane..(2 * c + 2) * plane].copy_from_slice(&g_im);
        }
        out
    }
}
