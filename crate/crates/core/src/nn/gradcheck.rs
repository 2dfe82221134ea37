//! Finite-difference and reference-implementation checks for every graph operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, LinearMap, Var};
use super::kernels::ConvGeom;
use super::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks analytic gradients of `build` (which reduces its inputs to a scalar after a random
/// projection) against central differences.
fn check(inputs: Vec<Tensor>, tol: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let rng = ChaCha8Rng::seed_from_u64(99);
    let project = |g: &mut Graph, out: Var, rng: &mut ChaCha8Rng| -> Var {
        let shape = g.shape(out).to_vec();
        let r = g.constant(rand_tensor(rng, &shape));
        let p = g.mul(out, r).unwrap();
        g.sum(p)
    };
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let mut proj_rng = rng.clone();
    let loss = project(&mut g, out, &mut proj_rng);
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let mut r = rng.clone();
        let l = project(&mut g, out, &mut r);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient reached input").to_vec();
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[k];
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs().max(a.abs())),
                "input {i} element {k}: analytic {a} vs numeric {fd}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4]);
    check(vec![a, b], 1e-6, |g, v| {
        let s = g.sigmoid(v[0]);
        let t = g.tanh(v[1]);
        let m = g.mul(s, t).unwrap();
        let d = g.sub(m, v[1]).unwrap();
        let e = g.add(d, v[0]).unwrap();
        g.scale(e, -1.5)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 2]);
    check(vec![a, b], 1e-6, |g, v| {
        let c = g.concat(&[v[0], v[1]], 2).unwrap();
        let n = g.narrow(c, 1, 1, 2).unwrap();
        let p = g.permute3(n, [2, 0, 1]).unwrap();
        let r = g.reshape(p, &[6, 4]).unwrap();
        let r = g.reshape(r, &[2, 3, 4]).unwrap();
        let gth = g.gather_axis1(r, &[0, 0, 2, 1, 2]).unwrap();
        let m = g.mean_leading(gth).unwrap();
        let b = g.broadcast_last(m, 3);
        let c0 = g.concat(&[gth, gth], 0).unwrap();
        let s = g.sum(c0);
        let s = g.broadcast_last(s, 4);
        let s = g.reshape(s, &[4]).unwrap();
        let s = g.broadcast_last(s, 3);
        let s = g.add(s, b).unwrap();
        g.tanh(s)
    });
}

#[test]
fn prelu_and_complex_mul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 2, 3]);
    let slope = rand_tensor(&mut rng, &[4]);
    let y = rand_tensor(&mut rng, &[4, 2, 3]);
    check(vec![x, slope, y], 1e-6, |g, v| {
        let p = g.prelu(v[0], v[1]).unwrap();
        g.complex_mul(p, v[2]).unwrap()
    });
}

#[test]
fn batch_norm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 2, 5]);
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    check(vec![x.clone(), gamma.clone(), beta.clone()], 1e-5, |g, v| g.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap().0);
    let mean = [0.1, -0.2, 0.3];
    let var = [1.5, 0.5, 2.0];
    check(vec![x, gamma, beta], 1e-6, |g, v| g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5).unwrap().0);
}

#[test]
fn linear_and_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, l, d, h) = (2, 4, 3, 2);
    let x = rand_tensor(&mut rng, &[b, l, d]);
    let h0 = rand_tensor(&mut rng, &[b, h]);
    let w_ih = rand_tensor(&mut rng, &[3 * h, d]);
    let w_hh = rand_tensor(&mut rng, &[3 * h, h]);
    let b_ih = rand_tensor(&mut rng, &[3 * h]);
    let b_hh = rand_tensor(&mut rng, &[3 * h]);
    let lw = rand_tensor(&mut rng, &[5, h]);
    let lb = rand_tensor(&mut rng, &[5]);
    for reverse in [false, true] {
        let inputs = vec![x.clone(), h0.clone(), w_ih.clone(), w_hh.clone(), b_ih.clone(), b_hh.clone(), lw.clone(), lb.clone()];
        check(inputs, 1e-5, |g, v| {
            let y = g.gru(v[0], Some(v[1]), [v[2], v[3], v[4], v[5]], reverse).unwrap();
            let y = g.reshape(y, &[b * l, h]).unwrap();
            g.linear(y, v[6], Some(v[7])).unwrap()
        });
    }
}

/// Plain GRU step written directly from the gate equations.
fn gru_reference(x: &[f64], w_ih: &[f64], w_hh: &[f64], b_ih: &[f64], b_hh: &[f64], d: usize, h: usize, len: usize) -> Vec<f64> {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut state = vec![0.0; h];
    let mut out = Vec::new();
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        let lin = |w: &[f64], b: &[f64], v: &[f64], row: usize| -> f64 { b[row] + (0..v.len()).map(|k| w[row * v.len() + k] * v[k]).sum::<f64>() };
        let mut next = vec![0.0; h];
        for j in 0..h {
            let r = sig(lin(w_ih, b_ih, xt, j) + lin(w_hh, b_hh, &state, j));
            let z = sig(lin(w_ih, b_ih, xt, h + j) + lin(w_hh, b_hh, &state, h + j));
            let n = (lin(w_ih, b_ih, xt, 2 * h + j) + r * lin(w_hh, b_hh, &state, 2 * h + j)).tanh();
            next[j] = (1.0 - z) * n + z * state[j];
        }
        state = next;
        out.extend_from_slice(&state);
    }
    out
}

#[test]
fn gru_matches_reference_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, d, h) = (7, 3, 4);
    let x = rand_tensor(&mut rng, &[1, l, d]);
    let ws: Vec<Tensor> = [vec![3 * h, d], vec![3 * h, h], vec![3 * h], vec![3 * h]].iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let mut g = Graph::new(false);
    let xv = g.constant(x.clone());
    let w: Vec<Var> = ws.iter().map(|t| g.constant(t.clone())).collect();
    let y = g.gru(xv, None, [w[0], w[1], w[2], w[3]], false).unwrap();
    let expect = gru_reference(x.data(), ws[0].data(), ws[1].data(), ws[2].data(), ws[3].data(), d, h, l);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Direct six-loop convolution with explicit bounds checks.
fn conv_reference(x: &Tensor, w: &Tensor, bias: &[f64], geom: &ConvGeom) -> Tensor {
    let (ci, fi, ti) = (x.dim(0), x.dim(1), x.dim(2));
    let co = w.dim(0);
    let cipg = ci / geom.groups;
    let copg = co / geom.groups;
    let (fo, to) = geom.output_size(fi, ti).unwrap();
    let mut y = vec![0.0; co * fo * to];
    for o in 0..co {
        let grp = o / copg;
        for f in 0..fo {
            for t in 0..to {
                let mut acc = bias[o];
                for cl in 0..cipg {
                    for kf in 0..geom.kernel.0 {
                        for kt in 0..geom.kernel.1 {
                            let fi_ = (f * geom.stride.0 + kf * geom.dilation.0) as isize - geom.pad_f.0 as isize;
                            let ti_ = (t * geom.stride.1 + kt * geom.dilation.1) as isize - geom.pad_t.0 as isize;
                            if fi_ < 0 || ti_ < 0 || fi_ >= fi as isize || ti_ >= ti as isize {
                                continue;
                            }
                            let c = grp * cipg + cl;
                            let xv = x.data()[(c * fi + fi_ as usize) * ti + ti_ as usize];
                            let wv = w.data()[((o * cipg + cl) * geom.kernel.0 + kf) * geom.kernel.1 + kt];
                            acc += xv * wv;
                        }
                    }
                }
                y[(o * fo + f) * to + t] = acc;
            }
        }
    }
    Tensor::new(vec![co, fo, to], y).unwrap()
}

fn random_geom(rng: &mut ChaCha8Rng) -> (ConvGeom, usize, usize) {
    let groups = [1, 2][rng.gen_range(0..2)];
    let ci = groups * rng.gen_range(1..3);
    let co = groups * rng.gen_range(1..3);
    let geom = ConvGeom {
        kernel: (rng.gen_range(1..4), rng.gen_range(1..4)),
        stride: (rng.gen_range(1..3), rng.gen_range(1..3)),
        dilation: (rng.gen_range(1..3), rng.gen_range(1..3)),
        pad_f: (rng.gen_range(0..3), rng.gen_range(0..3)),
        pad_t: (rng.gen_range(0..3), rng.gen_range(0..2)),
        groups,
    };
    (geom, ci, co)
}

#[test]
fn conv_matches_direct_loop_on_random_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 30 {
        let (geom, ci, co) = random_geom(&mut rng);
        let (f, t) = (rng.gen_range(3..9), rng.gen_range(3..9));
        if geom.output_size(f, t).is_err() {
            continue;
        }
        let x = rand_tensor(&mut rng, &[ci, f, t]);
        let w = rand_tensor(&mut rng, &[co, ci / geom.groups, geom.kernel.0, geom.kernel.1]);
        let b = rand_tensor(&mut rng, &[co]);
        let mut g = Graph::new(false);
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
        let expect = conv_reference(&x, &w, b.data(), &geom);
        assert_eq!(g.shape(y), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "{geom:?}");
        checked += 1;
    }
}

#[test]
fn conv_gradients_on_random_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 6 {
        let (geom, ci, co) = random_geom(&mut rng);
        let (f, t) = (rng.gen_range(3..7), rng.gen_range(3..7));
        if geom.output_size(f, t).is_err() {
            continue;
        }
        let x = rand_tensor(&mut rng, &[ci, f, t]);
        let w = rand_tensor(&mut rng, &[co, ci / geom.groups, geom.kernel.0, geom.kernel.1]);
        let b = rand_tensor(&mut rng, &[co]);
        check(vec![x, w, b], 1e-6, |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom).unwrap());
        checked += 1;
    }
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 20 {
        let (geom, ci, co) = random_geom(&mut rng);
        let (f, t) = (rng.gen_range(3..9), rng.gen_range(3..9));
        let Ok((fo, to)) = geom.output_size(f, t) else { continue };
        // Only sizes that the transposed convolution maps back exactly.
        let Ok((fb, tb)) = geom.transposed_size(fo, to, (0, 0)) else { continue };
        let op = (f - fb, t - tb);
        if op.0 >= geom.stride.0.max(geom.dilation.0) || op.1 >= geom.stride.1.max(geom.dilation.1) {
            continue;
        }
        let x = rand_tensor(&mut rng, &[ci, f, t]);
        let w = rand_tensor(&mut rng, &[co, ci / geom.groups, geom.kernel.0, geom.kernel.1]);
        let yb = rand_tensor(&mut rng, &[co, fo, to]);
        let mut g = Graph::new(false);
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(yb.clone()));
        let ax = g.conv2d(xv, wv, None, geom).unwrap();
        let aty = g.conv_transpose2d(yv, wv, None, geom, op).unwrap();
        assert_eq!(g.shape(aty), x.shape());
        let lhs = g.value(ax).dot(&yb);
        let rhs = x.dot(g.value(aty));
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "{geom:?}: {lhs} vs {rhs}");
        checked += 1;
    }
}

#[test]
fn transposed_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let geom = ConvGeom { kernel: (3, 2), stride: (2, 1), dilation: (1, 1), pad_f: (1, 1), pad_t: (1, 0), groups: 1 };
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 2]);
    let b = rand_tensor(&mut rng, &[3]);
    check(vec![x, w, b], 1e-6, |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), geom, (0, 0)).unwrap());
}

struct Doubler;

impl LinearMap for Doubler {
    fn input_shape(&self) -> Vec<usize> {
        vec![3]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![2]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        vec![2.0 * x[0] + x[1], x[2] - x[0]]
    }
    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        vec![2.0 * g[0] - g[1], g[0], g[1]]
    }
}

#[test]
fn losses_and_linear_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let est = rand_tensor(&mut rng, &[16]);
    let reference = Arc::new(rand_tensor(&mut rng, &[16]).into_data());
    let r2 = reference.clone();
    check(vec![est.clone()], 1e-6, move |g, v| g.neg_si_snr(v[0], r2.clone()).unwrap());
    let target = Arc::new(rand_tensor(&mut rng, &[16]).into_data());
    check(vec![est], 1e-6, move |g, v| g.squared_error(v[0], target.clone(), 7.0).unwrap());
    check(vec![rand_tensor(&mut rng, &[3])], 1e-6, |g, v| g.linear_map(v[0], Arc::new(Doubler)).unwrap());
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::new(true);
    let a = g.constant(Tensor::filled(&[2], 1.0));
    let b = g.input(Tensor::filled(&[2], 2.0));
    let c = g.mul(a, b).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalars() {
    let mut g = Graph::new(true);
    let a = g.input(Tensor::filled(&[2], 1.0));
    assert!(g.backward(a).is_err());
}
