//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use mbtf_core::dsp::AudioBuffer;
use mbtf_core::model::{MbtfConfig, Mbtfnet, EMBED_DIM};
use mbtf_core::nn::{ConvGeom, Graph, ModelWeights, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RATE: u32 = 44_100;

pub fn snr_db(reference: &[f64], est: &[f64]) -> f64 {
    let p: f64 = reference.iter().map(|v| v * v).sum();
    let e: f64 = reference.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (p / e).log10()
}

pub fn noise_audio(secs: f64, seed: u64) -> AudioBuffer {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::new((0..(secs * RATE as f64) as usize).map(|_| r.gen_range(-0.3..0.3)).collect(), RATE).unwrap()
}

/// Linear sweep from `f0` to `f1` Hz.
pub fn sweep(secs: f64, f0: f64, f1: f64) -> AudioBuffer {
    let n = (secs * RATE as f64) as usize;
    let rate = RATE as f64;
    let k = (f1 - f0) / secs;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            0.5 * (2.0 * std::f64::consts::PI * (f0 * t + 0.5 * k * t * t)).sin()
        })
        .collect();
    AudioBuffer::new(x, RATE).unwrap()
}

pub fn tone(freq: f64, secs: f64, amp: f64) -> AudioBuffer {
    let n = (secs * RATE as f64) as usize;
    let w = 2.0 * std::f64::consts::PI * freq / RATE as f64;
    AudioBuffer::new((0..n).map(|i| amp * (w * i as f64).sin()).collect(), RATE).unwrap()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Gives every all-zero trainable tensor random values so residual heads are active.
pub fn activate(ws: &mut ModelWeights, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = ws.ids().filter(|&id| ws.is_trainable(id)).collect();
    for id in ids {
        let t = ws.tensor_mut(id);
        if t.data().iter().all(|v| *v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
        }
    }
}

/// Largest central-difference mismatch of the input gradients of `build` after a fixed random
/// projection to a scalar. The error is `|a - fd| / max(1, |a|, |fd|)`.
pub fn fd_max_error(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let project = |g: &mut Graph, out: Var| -> Var {
        let shape = g.shape(out).to_vec();
        let mut r = ChaCha8Rng::seed_from_u64(4242);
        let p = g.constant(rand_tensor(&mut r, &shape));
        let m = g.mul(out, p).unwrap();
        g.sum(m)
    };
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let l = project(&mut g, out);
        g.value(l).data()[0]
    };
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = project(&mut g, out);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[k];
            worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
        }
    }
    worst
}

/// Nested-loop cross-correlation with zero padding, stride, dilation and groups.
pub fn conv_direct(x: &Tensor, w: &Tensor, bias: &[f64], geom: &ConvGeom) -> Tensor {
    let (ci, fi, ti) = (x.dim(0), x.dim(1), x.dim(2));
    let co = w.dim(0);
    let (cipg, copg) = (ci / geom.groups, co / geom.groups);
    let fo = (fi + geom.pad_f.0 + geom.pad_f.1 - geom.dilation.0 * (geom.kernel.0 - 1) - 1) / geom.stride.0 + 1;
    let to = (ti + geom.pad_t.0 + geom.pad_t.1 - geom.dilation.1 * (geom.kernel.1 - 1) - 1) / geom.stride.1 + 1;
    let mut y = vec![0.0; co * fo * to];
    for o in 0..co {
        for f in 0..fo {
            for t in 0..to {
                let mut acc = bias[o];
                for cl in 0..cipg {
                    let c = (o / copg) * cipg + cl;
                    for kf in 0..geom.kernel.0 {
                        for kt in 0..geom.kernel.1 {
                            let xf = (f * geom.stride.0 + kf * geom.dilation.0) as isize - geom.pad_f.0 as isize;
                            let xt = (t * geom.stride.1 + kt * geom.dilation.1) as isize - geom.pad_t.0 as isize;
                            if xf >= 0 && xt >= 0 && (xf as usize) < fi && (xt as usize) < ti {
                                acc += x.data()[(c * fi + xf as usize) * ti + xt as usize]
                                    * w.data()[((o * cipg + cl) * geom.kernel.0 + kf) * geom.kernel.1 + kt];
                            }
                        }
                    }
                }
                y[(o * fo + f) * to + t] = acc;
            }
        }
    }
    Tensor::new(vec![co, fo, to], y).unwrap()
}

/// Worst relative change of the SVE and PEM outputs at frames `<= cut` when every input frame
/// after `cut` is perturbed, maximized over `cuts`.
pub fn causal_leak(causal: bool, cuts: &[usize]) -> f64 {
    let cfg = MbtfConfig { causal, ..MbtfConfig::toy() };
    let (m, mut ws) = Mbtfnet::init(&cfg, 11).unwrap();
    activate(&mut ws, 12);
    let front = m.frontend().unwrap();
    let (y, layout) = front.analyze(&noise_audio(0.25, 5)).unwrap();
    let t_len = layout.num_frames;
    let run = |y: Tensor| {
        let mut g = Graph::new(false);
        let yv = g.constant(y);
        let out = m.sve.forward(&mut g, &ws, yv).unwrap();
        let z = g.constant(Tensor::new(vec![1, EMBED_DIM], vec![0.5; EMBED_DIM]).unwrap());
        let a = m.ipe.embed_to_map(&mut g, &ws, z).unwrap();
        let x_p = m.ipe.pem_forward(&mut g, &ws, out.x_s, out.z, a).unwrap();
        [g.value(out.x_s).clone(), g.value(x_p).clone()]
    };
    let base = run(y.clone());
    let mut worst = 0.0f64;
    for (k, &cut) in cuts.iter().enumerate() {
        let cut = cut.min(t_len - 2);
        let mut y2 = y.clone();
        let mut r = ChaCha8Rng::seed_from_u64(6 + k as u64);
        for (i, v) in y2.data_mut().iter_mut().enumerate() {
            if i % t_len > cut {
                *v += r.gen_range(-1.0..1.0);
            }
        }
        let b = run(y2);
        for (ta, tb) in base.iter().zip(&b) {
            let scale = ta.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (i, (p, q)) in ta.data().iter().zip(tb.data()).enumerate() {
                if i % t_len <= cut {
                    worst = worst.max((p - q).abs() / scale);
                }
            }
        }
    }
    worst
}

/// Writes `vocals/`, `accomps/` and `noises/` of synthetic Float32 WAVs under `dir`.
pub fn write_sources(dir: &std::path::Path, vocals: usize, secs: f64) {
    use mbtf_core::dsp::wav::{write_wav, WavEncoding};
    use mbtf_core::simulate::{synth_accompaniment, synth_vocal, white_noise, Voice};
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for sub in ["vocals", "accomps", "noises"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let voices = [Voice::LEAD, Voice::LOW, Voice::HIGH];
    for i in 0..vocals {
        let v = synth_vocal(voices[i % 3], secs, RATE, &mut rng).unwrap();
        write_wav(dir.join("vocals").join(format!("v{i}.wav")), &v, WavEncoding::Float32).unwrap();
    }
    for i in 0..2 {
        let a = synth_accompaniment(secs * 1.5, RATE, &mut rng).unwrap();
        write_wav(dir.join("accomps").join(format!("a{i}.wav")), &a, WavEncoding::Float32).unwrap();
    }
    let n = white_noise(secs * 0.5, RATE, &mut rng).unwrap();
    write_wav(dir.join("noises").join("n0.wav"), &n, WavEncoding::Float32).unwrap();
}

pub fn load_sources(dir: &std::path::Path) -> mbtf_core::simulate::Sources {
    mbtf_core::simulate::Sources::load(&dir.join("vocals"), Some(&dir.join("accomps")), Some(&dir.join("noises"))).unwrap()
}

/// Achieved accompaniment and noise SNRs of a simulated pair, measured from reconstructed components.
pub fn achieved_snrs(
    pair: &mbtf_core::simulate::SimulatedPair,
    accomp: &AudioBuffer,
) -> (f64, f64) {
    let n = pair.clean.len();
    let a = pair.accomp.unwrap();
    let acc: Vec<f64> = (0..n).map(|i| a.scale * accomp.samples()[(a.offset + i) % accomp.len()]).collect();
    let with_acc: Vec<f64> = pair.clean.samples().iter().zip(&acc).map(|(v, x)| v + x).collect();
    let noise: Vec<f64> = pair.noisy.samples().iter().zip(&with_acc).map(|(m, s)| m - s).collect();
    let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    (10.0 * (p(pair.clean.samples()) / p(&acc)).log10(), 10.0 * (p(&with_acc) / p(&noise)).log10())
}
