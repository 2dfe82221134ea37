use crate::dsp::stft::ComplexSpectrogram;

/// Bins below this frequency do not contribute to any pitch class.
pub const CHROMA_MIN_HZ: f64 = 60.0;

/// Pitch-class energy profile, `12 x T`, row 0 = C, row 9 = A.
///
/// Each STFT bin's energy goes to the nearest equal-tempered pitch class relative to
/// `tuning_ref` (the frequency of A4). Non-zero columns are L2-normalized.
pub fn chroma(spec: &ComplexSpectrogram, tuning_ref: f64) -> Vec<[f64; 12]> {
    let t_len = spec.num_frames;
    let mut out = vec![[0.0; 12]; t_len];
    let hz_per_bin = spec.sample_rate as f64 / spec.fft_size as f64;
    for f in 1..spec.num_bins {
        let hz = f as f64 * hz_per_bin;
        if hz < CHROMA_MIN_HZ {
            continue;
        }
        let midi = 69.0 + 12.0 * (hz / tuning_ref).log2();
        let class = (midi.round() as i64).rem_euclid(12) as usize;
        for (t, col) in out.iter_mut().enumerate() {
            col[class] += spec.get(f, t).norm_sqr();
        }
    }
    for col in &mut out {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, AudioBuffer};
    use std::f64::consts::PI;

    fn tone(hz: f64) -> AudioBuffer {
        let sr = 44_100;
        let x = (0..sr / 2).map(|i| (2.0 * PI * hz * i as f64 / sr as f64).sin()).collect();
        AudioBuffer::new(x, sr as u32).unwrap()
    }

    fn argmax(col: &[f64; 12]) -> usize {
        (0..12).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap()
    }

    #[test]
    fn zero_spec_gives_zero_chroma() {
        let spec = stft(&AudioBuffer::zeros(4096, 44_100), 2048, 1024, 2048).unwrap();
        assert!(chroma(&spec, 440.0).iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn a440_maps_to_class_a_and_octaves_fold() {
        for hz in [440.0, 880.0, 220.0] {
            let spec = stft(&tone(hz), 4096, 2048, 4096).unwrap();
            let c = chroma(&spec, 440.0);
            for col in &c[1..c.len() - 1] {
                assert_eq!(argmax(col), 9, "{hz} Hz");
                assert!(col.iter().all(|v| *v >= 0.0));
                let n: f64 = col.iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
