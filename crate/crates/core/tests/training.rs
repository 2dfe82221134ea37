use mbtf_core::ipe::{trained_lambda, trained_stats};
use mbtf_core::model::{MbtfConfig, Mbtfnet};
use mbtf_core::nn::{DType, LrSchedule, ModelWeights};
use mbtf_core::training::{toy_ipe_items, toy_sve_items, train_toy, LossRecord, Stage, TrainConfig};
use mbtf_core::Error;

fn quick(steps: u64) -> TrainConfig {
    TrainConfig { steps, eval_every: 0, ..TrainConfig::toy() }
}

fn toy() -> Mbtfnet {
    Mbtfnet::init(&MbtfConfig::toy(), 3).unwrap().0
}

#[test]
fn schedule_values() {
    let s = LrSchedule::new(1e-3, 5000);
    for (step, want) in [(1, 8.9443e-5), (5000, 0.44721), (20000, 0.22361)] {
        let got = s.lr(step);
        // the expected values are quoted to five significant digits
        assert!(((got - want) / want).abs() < 1e-4, "step {step}: {got}");
    }
    let direct = 1e-3f64.powf(-0.5) * 5000f64.powf(-1.5);
    assert!((s.lr(1) - direct).abs() / direct < 1e-12);
    let peak = LrSchedule::with_peak(1e-3, 100, 3e-3);
    assert!((peak.lr(100) - 3e-3).abs() < 1e-15);
    assert!(peak.lr(99) < peak.lr(100) && peak.lr(101) < peak.lr(100));
}

#[test]
fn same_seed_same_curve() {
    let items = toy_sve_items(2, 0.1, 5).unwrap();
    let m = toy();
    let a = train_toy(Stage::Sve, &m, None, &items, &quick(4), |_| {}).unwrap();
    let b = train_toy(Stage::Sve, &m, None, &items, &quick(4), |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    a.checkpoint().unwrap().write_to(&mut ba, DType::F64).unwrap();
    b.checkpoint().unwrap().write_to(&mut bb, DType::F64).unwrap();
    assert_eq!(ba, bb);
    let c = train_toy(Stage::Sve, &m, None, &items, &TrainConfig { seed: 1, ..quick(4) }, |_| {}).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn log_sees_every_step() {
    let items = toy_sve_items(1, 0.1, 6).unwrap();
    let mut lines = Vec::new();
    let out = train_toy(Stage::Sve, &toy(), None, &items, &quick(3), |r| lines.push(r.to_line())).unwrap();
    assert_eq!(lines.len(), 3);
    let parsed: Vec<LossRecord> = lines.iter().map(|l| LossRecord::parse_line(l).unwrap()).collect();
    assert_eq!(parsed, out.curve);
    assert_eq!(out.steps_run, 3);
}

#[test]
fn ipe_needs_sve_weights() {
    let items = toy_ipe_items(2, 0.1, 1).unwrap();
    let err = train_toy(Stage::Ipe, &toy(), None, &items, &quick(1), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(train_toy(Stage::Sve, &toy(), None, &[], &quick(1), |_| {}).is_err());
}

#[test]
fn ipe_training_freezes_sve() {
    let m = toy();
    let items = toy_ipe_items(2, 0.2, 2).unwrap();
    let start: ModelWeights = Mbtfnet::init(&m.cfg, 9).unwrap().1;
    let out = train_toy(Stage::Ipe, &m, Some(start.clone()), &items, &TrainConfig { eval_every: 2, ..quick(3) }, |_| {}).unwrap();
    let mut ipe_changed = false;
    for id in start.ids() {
        let name = start.name(id);
        let after = out.weights.get(name).unwrap();
        if name.starts_with("sve.") {
            assert_eq!(after.data(), start.tensor(id).data(), "{name} changed");
        } else if after.data() != start.tensor(id).data() {
            ipe_changed = true;
        }
    }
    assert!(ipe_changed);
    let lambda = trained_lambda(&out.weights).unwrap().unwrap();
    assert_eq!(Some(lambda), out.lambda_t);
    assert!(lambda > 0.0 && lambda < 1.0);
    assert_eq!(trained_stats(&out.weights).unwrap(), out.stats);
    assert!(out.curve.iter().all(|r| r.report.snr_mse > 0.0));
}

#[test]
fn loss_falls_over_windows() {
    let items = toy_sve_items(4, 0.25, 7).unwrap();
    let out = train_toy(Stage::Sve, &toy(), None, &items, &quick(150), |_| {}).unwrap();
    let windows: Vec<f64> =
        out.curve.chunks(50).map(|w| w.iter().map(|r| r.report.total).sum::<f64>() / w.len() as f64).collect();
    assert_eq!(windows.len(), 3);
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "{windows:?}");
    }
}
