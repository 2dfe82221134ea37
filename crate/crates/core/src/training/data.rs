//! Synthetic training sets for the toy runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::NATIVE_RATE;
use crate::dsp::AudioBuffer;
use crate::error::Result;
use crate::simulate::mix::{fit_length, mix_at_snr};
use crate::simulate::{mix_backing, simulate_pair, synth_accompaniment, synth_vocal, white_noise, Voice};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub noisy: AudioBuffer,
    pub clean: AudioBuffer,
    /// The same mixture with a backing vocal added, used with probability one half in IPE training.
    pub noisy_backing: Option<AudioBuffer>,
    /// Clean speech of the lead singer for the enrollment embedding (at least one second).
    pub enroll: Option<AudioBuffer>,
}

/// Lead melody + band-passed noise accompaniment + white noise, mixed by [`simulate_pair`].
pub fn toy_sve_items(count: usize, secs: f64, seed: u64) -> Result<Vec<TrainItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let vocal = synth_vocal(Voice::LEAD, secs, NATIVE_RATE, &mut rng)?;
            let accomp = synth_accompaniment(secs, NATIVE_RATE, &mut rng)?;
            let noise = white_noise(secs, NATIVE_RATE, &mut rng)?;
            let pair = simulate_pair(&vocal, Some(&accomp), Some(&noise), &mut rng)?;
            Ok(TrainItem { noisy: pair.noisy, clean: pair.clean, noisy_backing: None, enroll: None })
        })
        .collect()
}

/// Two singers with disjoint harmonic bands take turns as lead and backing. Each item has
/// white noise at an SNR spread evenly over [-5, 15] dB across the set, a backing variant and a
/// separate clean enrollment utterance of its lead.
pub fn toy_ipe_items(count: usize, secs: f64, seed: u64) -> Result<Vec<TrainItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (lead_voice, other) = if i % 2 == 0 { (Voice::LOW, Voice::HIGH) } else { (Voice::HIGH, Voice::LOW) };
            let lead = synth_vocal(lead_voice, secs, NATIVE_RATE, &mut rng)?;
            let backing = synth_vocal(other, secs, NATIVE_RATE, &mut rng)?;
            let enroll = synth_vocal(lead_voice, 1.2, NATIVE_RATE, &mut rng)?;
            let noise = white_noise(secs, NATIVE_RATE, &mut rng)?;
            let snr = if count > 1 { -5.0 + 20.0 * i as f64 / (count - 1) as f64 } else { 5.0 };
            let noise = fit_length(noise.samples(), lead.len(), 0);
            let with_noise = |x: &AudioBuffer| -> Result<AudioBuffer> {
                let (_, scale) = mix_at_snr(lead.samples(), &noise, snr)?;
                AudioBuffer::new(x.samples().iter().zip(&noise).map(|(a, n)| a + scale * n).collect(), NATIVE_RATE)
            };
            let duet = mix_backing(&lead, &backing, 0, &mut rng)?;
            Ok(TrainItem {
                noisy: with_noise(&lead)?,
                noisy_backing: Some(with_noise(&duet.mixture)?),
                clean: lead,
                enroll: Some(enroll),
            })
        })
        .collect()
}

/// Draws `true` with probability `p` (used for backing inclusion).
pub(crate) fn coin(rng: &mut impl Rng, p: f64) -> bool {
    rng.gen_bool(p.clamp(0.0, 1.0))
}
