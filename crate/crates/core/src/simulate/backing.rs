//! Backing-vocal selection by chroma similarity.

use rand::Rng;

use crate::dsp::{chroma, pitch_shift_semitones, AudioBuffer, Stft, StftConfig};
use crate::error::{Error, Result};
use crate::simulate::mix::{draw_offset, fit_length, mix_at_snr};

pub const BACKING_SNR_RANGE: (f64, f64) = (5.0, 10.0);
pub const SHIFT_SEMITONES: i32 = 2;
/// Number of candidates drawn per lead vocal.
pub const MAX_CANDIDATES: usize = 10;
pub const MAX_LAG_SECS: f64 = 2.0;
const CHROMA_FRAME: usize = 4096;
const CHROMA_HOP: usize = 2048;

pub fn chroma_frames(audio: &AudioBuffer) -> Result<Vec<[f64; 12]>> {
    let stft = Stft::new(StftConfig::new(CHROMA_FRAME, CHROMA_HOP, CHROMA_FRAME)?)?;
    Ok(chroma(&stft.forward(audio), 440.0))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Largest normalized cross-correlation of the flattened chroma sequences over frame lags up
/// to `max_lag` and the 12 circular pitch-class rotations of `b`. Lags whose overlap is shorter
/// than half the shorter sequence are skipped.
pub fn chroma_similarity(a: &[[f64; 12]], b: &[[f64; 12]], max_lag: usize) -> f64 {
    let min_overlap = (a.len().min(b.len()) / 2).max(1);
    let mut best = f64::NEG_INFINITY;
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    for lag in -(max_lag as isize)..=max_lag as isize {
        let pairs: Vec<(usize, usize)> = (0..a.len())
            .filter_map(|t| {
                let u = t as isize + lag;
                (u >= 0 && (u as usize) < b.len()).then_some((t, u as usize))
            })
            .collect();
        if pairs.len() < min_overlap {
            continue;
        }
        for rot in 0..12 {
            fa.clear();
            fb.clear();
            for &(t, u) in &pairs {
                for p in 0..12 {
                    fa.push(a[t][p]);
                    fb.push(b[u][(p + rot) % 12]);
                }
            }
            best = best.max(pearson(&fa, &fb));
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackingChoice {
    pub index: usize,
    pub scores: Vec<f64>,
    pub mix: BackingMix,
}

/// Picks the candidate most similar to `lead` (ties go to the lowest index), transposes it by
/// two semitones up or down and mixes it under the lead at an SNR drawn from
/// [`BACKING_SNR_RANGE`]. The shift sign is drawn before the draws of [`mix_backing`].
pub fn select_backing(lead: &AudioBuffer, candidates: &[AudioBuffer], rng: &mut impl Rng) -> Result<BackingChoice> {
    if candidates.is_empty() {
        return Err(Error::invalid("backing selection needs at least one candidate"));
    }
    let lead_chroma = chroma_frames(lead)?;
    let max_lag = (MAX_LAG_SECS * lead.sample_rate() as f64 / CHROMA_HOP as f64).round() as usize;
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.sample_rate() != lead.sample_rate() {
            return Err(Error::SampleRate { got: c.sample_rate(), expected: lead.sample_rate() });
        }
        scores.push(chroma_similarity(&lead_chroma, &chroma_frames(c)?, max_lag));
    }
    let index = scores.iter().enumerate().fold(0, |best, (i, s)| if *s > scores[best] { i } else { best });
    let shift = if rng.gen_bool(0.5) { SHIFT_SEMITONES } else { -SHIFT_SEMITONES };
    let mix = mix_backing(lead, &candidates[index], shift, rng)?;
    Ok(BackingChoice { index, scores, mix })
}

/// A backing vocal mixed under a lead.
#[derive(Debug, Clone, PartialEq)]
pub struct BackingMix {
    pub shift: i32,
    pub offset: usize,
    pub snr_db: f64,
    pub scale: f64,
    /// The transposed backing fitted to the lead's length, before scaling.
    pub backing: AudioBuffer,
    pub mixture: AudioBuffer,
}

/// Transposes `backing` by `shift` semitones, fits it to the lead with a random offset and mixes
/// it at an SNR drawn from [`BACKING_SNR_RANGE`] (offset drawn first).
pub fn mix_backing(lead: &AudioBuffer, backing: &AudioBuffer, shift: i32, rng: &mut impl Rng) -> Result<BackingMix> {
    if backing.sample_rate() != lead.sample_rate() {
        return Err(Error::SampleRate { got: backing.sample_rate(), expected: lead.sample_rate() });
    }
    let shifted = pitch_shift_semitones(backing, shift)?;
    let offset = draw_offset(shifted.len(), lead.len(), rng);
    let snr_db = rng.gen_range(BACKING_SNR_RANGE.0..=BACKING_SNR_RANGE.1);
    let backing = AudioBuffer::new(fit_length(shifted.samples(), lead.len(), offset), lead.sample_rate())?;
    let (mix, scale) = mix_at_snr(lead.samples(), backing.samples(), snr_db)?;
    Ok(BackingMix { shift, offset, snr_db, scale, backing, mixture: AudioBuffer::new(mix, lead.sample_rate())? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::synth::{synth_vocal, white_noise, Voice};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transposed_copy_beats_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lead = synth_vocal(Voice::LEAD, 3.0, 44_100, &mut rng).unwrap();
        let copy = pitch_shift_semitones(&lead, -2).unwrap();
        let noise = white_noise(3.0, 44_100, &mut rng).unwrap();
        for (cands, want) in [(vec![copy.clone(), noise.clone()], 0), (vec![noise, copy], 1)] {
            let choice = select_backing(&lead, &cands, &mut rng).unwrap();
            assert_eq!(choice.index, want, "scores {:?}", choice.scores);
            assert_eq!(choice.mix.shift.abs(), 2);
            assert!((BACKING_SNR_RANGE.0..=BACKING_SNR_RANGE.1).contains(&choice.mix.snr_db));
            assert_eq!(choice.mix.mixture.len(), lead.len());
        }
    }

    #[test]
    fn empty_candidates_error() {
        let lead = AudioBuffer::zeros(44_100, 44_100);
        assert!(select_backing(&lead, &[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn self_similarity_is_one() {
        let lead = synth_vocal(Voice::LEAD, 2.0, 44_100, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = chroma_frames(&lead).unwrap();
        assert!((chroma_similarity(&c, &c, 4) - 1.0).abs() < 1e-12);
    }
}
