//! Shared inputs for the benchmarks.

use mbtf_core::dsp::wav::NATIVE_RATE;
use mbtf_core::dsp::AudioBuffer;
use mbtf_core::nn::{ModelWeights, Tensor};
use mbtf_core::simulate::mix::mix_at_snr;
use mbtf_core::simulate::{synth_vocal, white_noise, Voice};
use mbtf_core::{MbtfConfig, Mbtfnet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic lead vocal in white noise at 5 dB.
pub fn noisy_vocal(secs: f64, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lead = synth_vocal(Voice::LEAD, secs, NATIVE_RATE, &mut rng).expect("vocal");
    let noise = white_noise(secs, NATIVE_RATE, &mut rng).expect("noise");
    let (mix, _) = mix_at_snr(lead.samples(), noise.samples(), 5.0).expect("mix");
    AudioBuffer::new(mix, NATIVE_RATE).expect("audio")
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("tensor")
}

/// Toy model with its zero-initialised heads randomised so every path does real work.
pub fn toy_model(seed: u64) -> (Mbtfnet, ModelWeights) {
    let (model, mut ws) = Mbtfnet::init(&MbtfConfig::toy(), seed).expect("toy model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let ids: Vec<_> = ws.ids().filter(|&id| ws.is_trainable(id)).collect();
    for id in ids {
        let t = ws.tensor_mut(id);
        if t.data().iter().all(|v| *v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
        }
    }
    (model, ws)
}
