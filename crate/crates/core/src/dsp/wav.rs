//! WAV input/output: PCM 16/24-bit and IEEE float32, first channel only.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::audio::AudioBuffer;
use crate::dsp::pitch::resample;
use crate::error::{Error, Result};

pub const NATIVE_RATE: u32 = 44_100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Float32,
}

/// Reads the first channel. Rates other than `expected_rate` are an error unless
/// `allow_resample` is set, in which case the audio is converted.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32, allow_resample: bool) -> Result<AudioBuffer> {
    let audio = read_wav_any_rate(path)?;
    if audio.sample_rate() == expected_rate {
        Ok(audio)
    } else if allow_resample {
        resample(&audio, expected_rate)
    } else {
        Err(Error::SampleRate { got: audio.sample_rate(), expected: expected_rate })
    }
}

pub fn read_wav_any_rate(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Format(format!("unsupported WAV encoding {fmt:?} {bits}-bit")));
        }
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer, encoding: WavEncoding) -> Result<()> {
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Pcm24 => (24, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 1, sample_rate: audio.sample_rate(), bits_per_sample: bits, sample_format: fmt };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    match encoding {
        WavEncoding::Float32 => {
            for &s in audio.samples() {
                writer.write_sample(s as f32)?;
            }
        }
        WavEncoding::Pcm16 | WavEncoding::Pcm24 => {
            let max = ((1i64 << (bits - 1)) - 1) as f64;
            for &s in audio.samples() {
                let v = (s * (max + 1.0)).round().clamp(-max - 1.0, max) as i32;
                writer.write_sample(v)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
