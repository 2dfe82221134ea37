use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mbtf_bench::{noisy_vocal, toy_model, uniform};
use mbtf_core::dsp::{stft, Pqmf, PqmfConfig};
use mbtf_core::ipe::ToySpeakerEncoder;
use mbtf_core::model::{default_chunk_frames, EnhanceMode, Enhancer};
use mbtf_core::nn::{ConvGeom, Graph};

fn dsp(c: &mut Criterion) {
    let audio = noisy_vocal(1.0, 1);
    let pqmf = Pqmf::new(PqmfConfig::default()).unwrap();
    c.bench_function("pqmf analysis 1 s", |b| b.iter(|| pqmf.analysis(black_box(&audio)).unwrap()));
    let bands = pqmf.analysis(&audio).unwrap();
    c.bench_function("pqmf synthesis 1 s", |b| b.iter(|| pqmf.synthesis(black_box(&bands)).unwrap()));
    c.bench_function("stft 1 s", |b| b.iter(|| stft(black_box(&audio), 256, 128, 256).unwrap()));
}

fn conv(c: &mut Criterion) {
    let x = uniform(&[16, 65, 100], 2);
    let w = uniform(&[16, 16, 3, 3], 3);
    let geom = ConvGeom { pad_f: (1, 1), pad_t: (2, 0), ..ConvGeom::new((3, 3)) };
    c.bench_function("conv2d 16x65x100 k3 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new(false);
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(xv, wv, None, geom).unwrap()
        })
    });
    c.bench_function("conv2d 16x65x100 k3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(true);
            let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
            let y = g.conv2d(xv, wv, None, geom).unwrap();
            let l = g.sum(y);
            g.backward(l).unwrap()
        })
    });
}

fn model(c: &mut Criterion) {
    let (m, ws) = toy_model(4);
    let enh = Enhancer::new(&m, &ws).unwrap();
    let one = noisy_vocal(1.0, 5);
    c.bench_function("toy sve 1 s", |b| b.iter(|| enh.sve_bands(black_box(&one)).unwrap()));
    let three = noisy_vocal(3.0, 6);
    let mode = EnhanceMode::Ipe { lambda: 0.0, alpha: 0.9, chunk_frames: default_chunk_frames(m.cfg.hop, m.cfg.num_bands) };
    let mut group = c.benchmark_group("toy enhance");
    group.sample_size(10);
    group.bench_function("sve+ipe 3 s", |b| {
        b.iter(|| enh.enhance(black_box(&three), &mode, &mut ToySpeakerEncoder::new()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, dsp, conv, model);
criterion_main!(benches);
