mod common;

use common::{achieved_snrs, load_sources, write_sources, RATE};
use mbtf_core::dsp::pitch_shift_semitones;
use mbtf_core::dsp::wav::read_wav;
use mbtf_core::simulate::{
    build_test_set, read_manifest, regenerate, select_backing, simulate_pair, synth_accompaniment, synth_vocal,
    white_noise, TestSetKind, Voice,
};
use mbtf_core::simulate::testset::DEFAULT_COUNT_PER_VOCAL;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn mix_snrs_hit_their_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let v = synth_vocal(Voice::LEAD, 0.5, RATE, &mut rng).unwrap();
        let a = synth_accompaniment(0.7, RATE, &mut rng).unwrap();
        let n = white_noise(0.3, RATE, &mut rng).unwrap();
        let pair = simulate_pair(&v, Some(&a), Some(&n), &mut rng).unwrap();
        let (sa, sn) = achieved_snrs(&pair, &a);
        assert!((sa - pair.accomp.unwrap().snr_db).abs() < 0.01);
        assert!((sn - pair.noise.unwrap().snr_db).abs() < 0.01);
        assert!((-5.0..=15.0).contains(&pair.accomp.unwrap().snr_db));
    }
}

#[test]
fn selected_backing_prefers_transposed_lead() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lead = synth_vocal(Voice::LEAD, 3.0, RATE, &mut rng).unwrap();
    let copy = pitch_shift_semitones(&lead, 2).unwrap();
    let noise = white_noise(3.0, RATE, &mut rng).unwrap();
    let choice = select_backing(&lead, &[noise, copy], &mut rng).unwrap();
    assert_eq!(choice.index, 1, "{:?}", choice.scores);
}

#[test]
fn test_sets_regenerate_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    write_sources(dir.path(), 3, 1.0);
    let sources = load_sources(dir.path());
    for kind in [TestSetKind::WithoutBacking, TestSetKind::RandomBacking, TestSetKind::SelectedBacking] {
        let a = dir.path().join(format!("{kind}_a"));
        let b = dir.path().join(format!("{kind}_b"));
        let rows = build_test_set(kind, &sources, DEFAULT_COUNT_PER_VOCAL, 77, &a).unwrap();
        assert_eq!(rows.len(), 3 * 5);
        for v in &sources.vocals {
            assert_eq!(rows.iter().filter(|r| r.vocal == v.name).count(), 5);
        }
        assert_eq!(read_manifest(&a.join("manifest.tsv")).unwrap(), rows);
        regenerate(&a.join("manifest.tsv"), &sources, &b).unwrap();
        assert_eq!(std::fs::read(a.join("manifest.tsv")).unwrap(), std::fs::read(b.join("manifest.tsv")).unwrap());
        for r in &rows {
            for sub in ["noisy", "clean"] {
                let f = format!("{}.wav", r.id);
                assert_eq!(std::fs::read(a.join(sub).join(&f)).unwrap(), std::fs::read(b.join(sub).join(&f)).unwrap());
            }
            let noisy = read_wav(a.join("noisy").join(format!("{}.wav", r.id)), RATE, false).unwrap();
            assert!(noisy.peak() <= 10f64.powf(-1.0 / 20.0) + 1e-6);
            assert_eq!(r.backing.is_some(), kind != TestSetKind::WithoutBacking);
            if kind == TestSetKind::SelectedBacking {
                assert_eq!(r.shift.map(i32::abs), Some(2));
            }
        }
    }
}

#[test]
fn tampered_manifest_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    write_sources(dir.path(), 2, 1.0);
    let sources = load_sources(dir.path());
    let a = dir.path().join("set");
    build_test_set(TestSetKind::WithoutBacking, &sources, 1, 5, &a).unwrap();
    let path = a.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut rows = read_manifest(&path).unwrap();
    rows[0].snr_noise_db = rows[0].snr_noise_db.map(|v| v + 1.0);
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[1] = rows[0].to_line();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(regenerate(&path, &sources, &dir.path().join("again")).is_err());
}
