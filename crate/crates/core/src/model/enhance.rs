//! End-to-end inference: waveform in, enhanced waveform out.

use crate::dsp::wav::NATIVE_RATE;
use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::ipe::{snr_features, IpeStreamState, SnrStream, SpeakerEmbedding, SpeakerEncoder};
use crate::model::{Mbtfnet, SpecLayout, SubbandFrontend};
use crate::nn::{Graph, ModelWeights, Tensor};

/// Default IPE chunk: the smallest frame count covering one second at the native rate.
pub fn default_chunk_frames(hop: usize, num_bands: usize) -> usize {
    (NATIVE_RATE as usize).div_ceil(hop * num_bands)
}

#[derive(Debug, Clone)]
pub enum EnhanceMode {
    Sve,
    /// Self-enrolled personalization gated per chunk by the predicted cleanliness.
    Ipe { lambda: f64, alpha: f64, chunk_frames: usize },
    /// Personalization with a fixed enrollment embedding.
    Pe { embedding: SpeakerEmbedding },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDecision {
    pub start_frame: usize,
    pub frames: usize,
    pub mean_score: f64,
    pub accepted: bool,
    /// Accepted chunks shorter than the encoder minimum are not embedded.
    pub too_short: bool,
}

#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    pub audio: AudioBuffer,
    pub chunks: Vec<ChunkDecision>,
    pub final_embedding: Option<SpeakerEmbedding>,
}

/// Intermediate band tensors of one utterance.
#[derive(Debug, Clone)]
pub struct SveBands {
    pub y: Tensor,
    pub x_s: Tensor,
    pub z: Tensor,
    pub layout: SpecLayout,
}

pub struct Enhancer<'a> {
    model: &'a Mbtfnet,
    ws: &'a ModelWeights,
    front: SubbandFrontend,
}

impl<'a> Enhancer<'a> {
    pub fn new(model: &'a Mbtfnet, ws: &'a ModelWeights) -> Result<Self> {
        Ok(Self { model, ws, front: model.frontend()? })
    }

    pub fn frontend(&self) -> &SubbandFrontend {
        &self.front
    }

    pub fn sve_bands(&self, audio: &AudioBuffer) -> Result<SveBands> {
        if audio.sample_rate() != NATIVE_RATE {
            return Err(Error::SampleRate { got: audio.sample_rate(), expected: NATIVE_RATE });
        }
        let (y, layout) = self.front.analyze(audio)?;
        let mut g = Graph::new(false);
        let yv = g.constant(y.clone());
        let out = self.model.sve.forward(&mut g, self.ws, yv)?;
        Ok(SveBands { y, x_s: g.value(out.x_s).clone(), z: g.value(out.z).clone(), layout })
    }

    /// PEM output for per-frame maps `a [N, K, T]`.
    fn pem(&self, bands: &SveBands, a: Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let x_s = g.constant(bands.x_s.clone());
        let z = g.constant(bands.z.clone());
        let a = g.constant(a);
        let x_p = self.model.ipe.pem_forward(&mut g, self.ws, x_s, z, a)?;
        Ok(g.value(x_p).clone())
    }

    /// Per-frame cleanliness predictions for one utterance.
    pub fn scores(&self, bands: &SveBands) -> Result<Vec<f64>> {
        let feats = snr_features(&bands.x_s, &bands.y)?;
        SnrStream::new(&self.model.ipe.snr).push(&self.model.ipe.snr, self.ws, feats)
    }

    /// PEM output for a fixed embedding applied to every frame.
    pub fn personalize(&self, bands: &SveBands, embedding: &SpeakerEmbedding) -> Result<AudioBuffer> {
        let map = self.model.ipe.map_values(self.ws, embedding)?;
        let a = broadcast_frames(&map, bands.layout.num_frames)?;
        let x_p = self.pem(bands, a)?;
        self.front.synthesize(&x_p, &bands.layout)
    }

    pub fn enhance(&self, audio: &AudioBuffer, mode: &EnhanceMode, sem: &mut dyn SpeakerEncoder) -> Result<EnhanceOutput> {
        let bands = self.sve_bands(audio)?;
        match mode {
            EnhanceMode::Sve => Ok(EnhanceOutput {
                audio: self.front.synthesize(&bands.x_s, &bands.layout)?,
                chunks: Vec::new(),
                final_embedding: None,
            }),
            EnhanceMode::Pe { embedding } => Ok(EnhanceOutput {
                audio: self.personalize(&bands, embedding)?,
                chunks: Vec::new(),
                final_embedding: Some(embedding.clone()),
            }),
            EnhanceMode::Ipe { lambda, alpha, chunk_frames } => self.enhance_ipe(bands, *lambda, *alpha, *chunk_frames, sem),
        }
    }

    fn enhance_ipe(
        &self,
        bands: SveBands,
        lambda: f64,
        alpha: f64,
        chunk_frames: usize,
        sem: &mut dyn SpeakerEncoder,
    ) -> Result<EnhanceOutput> {
        if chunk_frames == 0 {
            return Err(Error::config("chunk length must be at least one frame"));
        }
        let layout = bands.layout;
        let t_len = layout.num_frames;
        let x_s_wave = self.front.synthesize(&bands.x_s, &layout)?;
        let scores = self.scores(&bands)?;
        let mut state = IpeStreamState::new(lambda, alpha)?;
        let cfg = &self.model.cfg;
        let samples_per_frame = cfg.hop * cfg.num_bands;

        let (n, k) = (cfg.latent_channels(), cfg.latent_bins());
        let mut a = vec![0.0; n * k * t_len];
        let mut first_updated: Option<usize> = None;
        let mut chunks = Vec::new();
        let mut current: Option<Tensor> = None;
        for start in (0..t_len).step_by(chunk_frames) {
            let frames = chunk_frames.min(t_len - start);
            let mean_score = scores[start..start + frames].iter().sum::<f64>() / frames as f64;
            let s0 = (start * samples_per_frame).min(x_s_wave.len());
            let s1 = ((start + frames) * samples_per_frame).min(x_s_wave.len());
            let chunk = x_s_wave.slice(s0, s1 - s0);
            let too_short = chunk.len() < NATIVE_RATE as usize;
            let accepted = if too_short {
                false
            } else {
                state.offer(mean_score, || sem.embed(&chunk))?
            };
            if accepted {
                current = Some(self.model.ipe.map_values(self.ws, state.embedding())?);
                first_updated.get_or_insert(start);
            }
            if let Some(map) = &current {
                for (i, v) in map.data().iter().enumerate() {
                    a[i * t_len + start..i * t_len + start + frames].iter_mut().for_each(|x| *x = *v);
                }
            }
            chunks.push(ChunkDecision { start_frame: start, frames, mean_score, accepted, too_short: too_short && mean_score >= lambda });
        }

        let x_out = match first_updated {
            None => bands.x_s.clone(),
            Some(first) => {
                let x_p = self.pem(&bands, Tensor::new(vec![n, k, t_len], a)?)?;
                splice_frames(&bands.x_s, &x_p, first)?
            }
        };
        Ok(EnhanceOutput {
            audio: self.front.synthesize(&x_out, &layout)?,
            chunks,
            final_embedding: Some(state.embedding().clone()),
        })
    }
}

fn broadcast_frames(map: &Tensor, t: usize) -> Result<Tensor> {
    let data = map.data().iter().flat_map(|v| std::iter::repeat_n(*v, t)).collect();
    let mut shape = map.shape().to_vec();
    shape.push(t);
    Tensor::new(shape, data)
}

/// Frames `< first` from `before`, the rest from `after`.
fn splice_frames(before: &Tensor, after: &Tensor, first: usize) -> Result<Tensor> {
    if before.shape() != after.shape() {
        return Err(Error::shape("splice of mismatched band tensors"));
    }
    let t = *before.shape().last().unwrap_or(&1);
    let data = before
        .data()
        .iter()
        .zip(after.data())
        .enumerate()
        .map(|(i, (b, a))| if i % t < first { *b } else { *a })
        .collect();
    Tensor::new(before.shape().to_vec(), data)
}
