//! Speaker encoders: a deterministic toy encoder and a loader for precomputed embeddings.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{AudioBuffer, Stft, StftConfig};
use crate::error::{Error, Result};
use crate::model::EMBED_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() != EMBED_DIM {
            return Err(Error::shape(format!("speaker embedding must have {EMBED_DIM} entries, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("speaker embedding contains non-finite values"));
        }
        Ok(Self(v))
    }

    /// The initial temporary embedding.
    pub fn ones() -> Self {
        Self(vec![1.0; EMBED_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    /// Raw little-endian `f32[192]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.len() != EMBED_DIM * 4 {
            return Err(Error::Format(format!(
                "{}: embedding files hold {} bytes, found {}",
                path.display(),
                EMBED_DIM * 4,
                bytes.len()
            )));
        }
        Self::new(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

pub trait SpeakerEncoder {
    fn embed(&mut self, audio: &AudioBuffer) -> Result<SpeakerEmbedding>;
}

const MEL_BANDS: usize = 48;
const FRAME: usize = 1024;
const PROJECTION_SEED: u64 = 0x5e4d_0192;

/// Pooled log-mel statistics through a fixed random projection, L2-normalized.
///
/// Each frame's log-mel vector has its mean removed, so a constant gain leaves the
/// embedding unchanged. Silent input yields the zero vector.
#[derive(Debug)]
pub struct ToySpeakerEncoder {
    stft: Stft,
    projection: Vec<f64>,
}

impl Default for ToySpeakerEncoder {
    fn default() -> Self {
        Self::new()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl ToySpeakerEncoder {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let projection = (0..EMBED_DIM * 2 * MEL_BANDS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stft = Stft::new(StftConfig::new(FRAME, FRAME / 2, FRAME).expect("valid geometry")).expect("valid geometry");
        Self { stft, projection }
    }

    /// Triangular mel filters `[MEL_BANDS][bins]` between 50 Hz and min(16 kHz, Nyquist).
    fn filterbank(rate: u32) -> Vec<Vec<f64>> {
        let bins = FRAME / 2 + 1;
        let hi = (rate as f64 / 2.0).min(16_000.0);
        let (m_lo, m_hi) = (hz_to_mel(50.0), hz_to_mel(hi));
        let edges: Vec<f64> =
            (0..MEL_BANDS + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (MEL_BANDS + 1) as f64)).collect();
        (0..MEL_BANDS)
            .map(|b| {
                let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * rate as f64 / FRAME as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean and standard deviation over frames of mean-removed log-mel energies.
    pub fn features(&self, audio: &AudioBuffer) -> Vec<f64> {
        let spec = self.stft.forward(audio);
        let fb = Self::filterbank(audio.sample_rate());
        let t_len = spec.num_frames;
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let power: Vec<f64> = (0..spec.num_bins).map(|f| spec.get(f, t).norm_sqr()).collect();
            let mut logmel: Vec<f64> =
                fb.iter().map(|w| (1e-10 + w.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>()).ln()).collect();
            let m = logmel.iter().sum::<f64>() / MEL_BANDS as f64;
            logmel.iter_mut().for_each(|v| *v -= m);
            frames.push(logmel);
        }
        let n = t_len.max(1) as f64;
        let mut out = vec![0.0; 2 * MEL_BANDS];
        for b in 0..MEL_BANDS {
            let mean = frames.iter().map(|f| f[b]).sum::<f64>() / n;
            let var = frames.iter().map(|f| (f[b] - mean).powi(2)).sum::<f64>() / n;
            out[b] = mean;
            out[MEL_BANDS + b] = var.sqrt();
        }
        out
    }
}

impl SpeakerEncoder for ToySpeakerEncoder {
    fn embed(&mut self, audio: &AudioBuffer) -> Result<SpeakerEmbedding> {
        if audio.len() < audio.sample_rate() as usize {
            return Err(Error::TooShort { needed: audio.sample_rate() as usize, got: audio.len() });
        }
        let feats = self.features(audio);
        let mut e: Vec<f64> = self.projection.chunks(2 * MEL_BANDS).map(|row| row.iter().zip(&feats).map(|(a, b)| a * b).sum()).collect();
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            e.iter_mut().for_each(|v| *v /= norm);
        }
        SpeakerEmbedding::new(e)
    }
}

/// Returns precomputed embeddings in order, one per call.
#[derive(Debug)]
pub struct PrecomputedEmbeddings {
    files: Vec<PathBuf>,
    next: usize,
}

impl PrecomputedEmbeddings {
    pub fn new(files: Vec<PathBuf>) -> Self {
        Self { files, next: 0 }
    }
}

impl SpeakerEncoder for PrecomputedEmbeddings {
    fn embed(&mut self, _audio: &AudioBuffer) -> Result<SpeakerEmbedding> {
        let path = self
            .files
            .get(self.next)
            .ok_or_else(|| Error::State(format!("only {} precomputed embeddings available", self.files.len())))?;
        self.next += 1;
        SpeakerEmbedding::load(path)
    }
}
