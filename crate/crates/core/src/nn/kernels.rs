//! Raw numeric kernels shared by the autograd graph and the streaming paths.
//!
//! Convolutions use cross-correlation semantics on `[C, F, T]` planes (no kernel flip).

use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over `(frequency, time)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// Zero padding before/after on the frequency axis.
    pub pad_f: (usize, usize),
    /// Zero padding before/after on the time axis.
    pub pad_t: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize)) -> Self {
        Self { kernel, stride: (1, 1), dilation: (1, 1), pad_f: (0, 0), pad_t: (0, 0), groups: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.dilation.0 > 0
            && self.dilation.1 > 0
            && self.groups > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::config(format!("kernel, stride, dilation and groups must be positive: {self:?}")))
        }
    }

    fn out_len(len: usize, k: usize, s: usize, d: usize, pad: (usize, usize)) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = len + pad.0 + pad.1;
        if padded < span {
            None
        } else {
            Some((padded - span) / s + 1)
        }
    }

    /// Output `(F', T')` for an input `(F, T)`.
    pub fn output_size(&self, f: usize, t: usize) -> Result<(usize, usize)> {
        let fo = Self::out_len(f, self.kernel.0, self.stride.0, self.dilation.0, self.pad_f);
        let to = Self::out_len(t, self.kernel.1, self.stride.1, self.dilation.1, self.pad_t);
        match (fo, to) {
            (Some(fo), Some(to)) => Ok((fo, to)),
            (None, _) => Err(Error::shape(format!("frequency size {f} too small for kernel geometry {self:?}"))),
            (_, None) => Err(Error::shape(format!("time size {t} too small for kernel geometry {self:?}"))),
        }
    }

    /// Size of the transposed-convolution output for an input `(F, T)`, i.e. the input size of
    /// the forward convolution this one is the adjoint of, plus `output_padding`.
    pub fn transposed_size(&self, f: usize, t: usize, output_padding: (usize, usize)) -> Result<(usize, usize)> {
        let full = |n: usize, k: usize, s: usize, d: usize, pad: (usize, usize), op: usize| -> Option<usize> {
            ((n - 1) * s + d * (k - 1) + 1 + op).checked_sub(pad.0 + pad.1)
        };
        if f == 0 || t == 0 {
            return Err(Error::shape("transposed convolution of an empty input"));
        }
        let fo = full(f, self.kernel.0, self.stride.0, self.dilation.0, self.pad_f, output_padding.0);
        let to = full(t, self.kernel.1, self.stride.1, self.dilation.1, self.pad_t, output_padding.1);
        match (fo, to) {
            (Some(fo), Some(to)) if fo > 0 && to > 0 => Ok((fo, to)),
            _ => Err(Error::shape(format!("transposed convolution underflows for geometry {self:?}"))),
        }
    }
}

/// Valid output-index range `[lo, hi)` along one axis for kernel tap offset `off`
/// (input index = out * stride + off - pad).
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // need out*stride + off >= pad and out*stride + off - pad < in_len
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let limit = in_len + pad; // out*stride + off < limit
    let hi = if limit <= off { 0 } else { ((limit - off - 1) / stride + 1).min(out_len) };
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub ci: usize,
    pub fi: usize,
    pub ti: usize,
    pub co: usize,
    pub fo: usize,
    pub to: usize,
}

pub(crate) fn conv_dims(in_shape: &[usize], w_shape: &[usize], geom: &ConvGeom) -> Result<ConvDims> {
    geom.validate()?;
    if in_shape.len() != 3 {
        return Err(Error::shape(format!("conv input must be [C, F, T], got {in_shape:?}")));
    }
    if w_shape.len() != 4 || w_shape[2] != geom.kernel.0 || w_shape[3] != geom.kernel.1 {
        return Err(Error::shape(format!("conv weight {w_shape:?} does not match kernel {:?}", geom.kernel)));
    }
    let (ci, fi, ti) = (in_shape[0], in_shape[1], in_shape[2]);
    let co = w_shape[0];
    if ci % geom.groups != 0 || !co.is_multiple_of(geom.groups) {
        return Err(Error::shape(format!("channels {ci}->{co} not divisible by groups {}", geom.groups)));
    }
    if w_shape[1] != ci / geom.groups {
        return Err(Error::shape(format!(
            "input channels: weight expects {} per group, input has {ci} total",
            w_shape[1]
        )));
    }
    let (fo, to) = geom.output_size(fi, ti)?;
    Ok(ConvDims { ci, fi, ti, co, fo, to })
}

/// Shared loop nest: calls `body(co, ci, w_index, fo, fi, to_range, ti_start)` for every
/// contributing (weight tap, output row) pair.
#[inline]
fn for_each_tap(d: &ConvDims, geom: &ConvGeom, mut body: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
    let (kf_n, kt_n) = geom.kernel;
    let cipg = d.ci / geom.groups;
    let copg = d.co / geom.groups;
    for co in 0..d.co {
        let g = co / copg;
        for cl in 0..cipg {
            let ci = g * cipg + cl;
            for kf in 0..kf_n {
                let (f_lo, f_hi) = tap_range(d.fo, d.fi, geom.stride.0, kf * geom.dilation.0, geom.pad_f.0);
                for kt in 0..kt_n {
                    let (t_lo, t_hi) = tap_range(d.to, d.ti, geom.stride.1, kt * geom.dilation.1, geom.pad_t.0);
                    if t_lo >= t_hi {
                        continue;
                    }
                    let widx = ((co * cipg + cl) * kf_n + kf) * kt_n + kt;
                    for fo in f_lo..f_hi {
                        let fi = fo * geom.stride.0 + kf * geom.dilation.0 - geom.pad_f.0;
                        let ti0 = t_lo * geom.stride.1 + kt * geom.dilation.1 - geom.pad_t.0;
                        body(co, ci, widx, fo, fi, t_lo, t_hi, ti0);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], d: &ConvDims, w: &[f64], bias: Option<&[f64]>, geom: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; d.co * d.fo * d.to];
    if let Some(b) = bias {
        for (co, plane) in y.chunks_mut(d.fo * d.to).enumerate() {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let st = geom.stride.1;
    for_each_tap(d, geom, |co, ci, widx, fo, fi, t_lo, t_hi, ti0| {
        let wv = w[widx];
        let yrow = &mut y[(co * d.fo + fo) * d.to..][t_lo..t_hi];
        let xrow = &x[(ci * d.fi + fi) * d.ti..];
        if st == 1 {
            for (yv, xv) in yrow.iter_mut().zip(&xrow[ti0..ti0 + (t_hi - t_lo)]) {
                *yv += wv * xv;
            }
        } else {
            for (j, yv) in yrow.iter_mut().enumerate() {
                *yv += wv * xrow[ti0 + j * st];
            }
        }
    });
    y
}

/// Gradient w.r.t. the input of [`conv2d_forward`]; also the transposed-convolution forward.
pub(crate) fn conv2d_backward_input(gy: &[f64], d: &ConvDims, w: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; d.ci * d.fi * d.ti];
    let st = geom.stride.1;
    for_each_tap(d, geom, |co, ci, widx, fo, fi, t_lo, t_hi, ti0| {
        let wv = w[widx];
        let grow = &gy[(co * d.fo + fo) * d.to..][t_lo..t_hi];
        let xrow = &mut gx[(ci * d.fi + fi) * d.ti..];
        if st == 1 {
            for (xv, gv) in xrow[ti0..ti0 + (t_hi - t_lo)].iter_mut().zip(grow) {
                *xv += wv * gv;
            }
        } else {
            for (j, gv) in grow.iter().enumerate() {
                xrow[ti0 + j * st] += wv * gv;
            }
        }
    });
    gx
}

pub(crate) fn conv2d_backward_weight(gy: &[f64], d: &ConvDims, x: &[f64], w_len: usize, geom: &ConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0; w_len];
    let st = geom.stride.1;
    for_each_tap(d, geom, |co, ci, widx, fo, fi, t_lo, t_hi, ti0| {
        let grow = &gy[(co * d.fo + fo) * d.to..][t_lo..t_hi];
        let xrow = &x[(ci * d.fi + fi) * d.ti..];
        let acc: f64 = if st == 1 {
            grow.iter().zip(&xrow[ti0..ti0 + (t_hi - t_lo)]).map(|(a, b)| a * b).sum()
        } else {
            grow.iter().enumerate().map(|(j, g)| g * xrow[ti0 + j * st]).sum()
        };
        gw[widx] += acc;
    });
    gw
}

pub(crate) fn bias_grad(gy: &[f64], channels: usize) -> Vec<f64> {
    let plane = gy.len() / channels.max(1);
    gy.chunks(plane.max(1)).map(|c| c.iter().sum()).collect()
}

/// `c[m x n] (+)= op(a) * op(b)`, row-major, where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe the row-major buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GRU parameters in the (reset, update, new) gate order, `w_ih: [3H, D]`, `w_hh: [3H, H]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GruParams<'a> {
    pub w_ih: &'a [f64],
    pub w_hh: &'a [f64],
    pub b_ih: &'a [f64],
    pub b_hh: &'a [f64],
    pub input: usize,
    pub hidden: usize,
}

/// Per-step values kept for back-propagation through time.
#[derive(Debug, Clone, Default)]
pub(crate) struct GruTrace {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    pub hn: Vec<f64>,
    pub h_prev: Vec<f64>,
}

/// Runs `batch` independent sequences of `len` steps. `x: [B, L, D]`, `h0: [B, H]`.
/// Returns outputs `[B, L, H]` aligned with the input positions.
pub(crate) fn gru_forward(
    p: &GruParams,
    x: &[f64],
    h0: &[f64],
    batch: usize,
    len: usize,
    reverse: bool,
    mut trace: Option<&mut GruTrace>,
) -> Vec<f64> {
    let (d, h) = (p.input, p.hidden);
    let rows = batch * len;
    let mut gi = vec![0.0; rows * 3 * h];
    gemm(rows, d, 3 * h, x, false, p.w_ih, true, &mut gi, false);
    for row in gi.chunks_mut(3 * h) {
        for (v, b) in row.iter_mut().zip(p.b_ih) {
            *v += b;
        }
    }
    if let Some(tr) = trace.as_deref_mut() {
        for buf in [&mut tr.r, &mut tr.z, &mut tr.n, &mut tr.hn, &mut tr.h_prev] {
            buf.clear();
            buf.resize(rows * h, 0.0);
        }
    }
    let mut out = vec![0.0; rows * h];
    let mut gh = vec![0.0; 3 * h];
    let mut state = vec![0.0; h];
    for b in 0..batch {
        state.copy_from_slice(&h0[b * h..(b + 1) * h]);
        for s in 0..len {
            let pos = if reverse { len - 1 - s } else { s };
            let row = b * len + pos;
            gh.copy_from_slice(p.b_hh);
            gemm(1, h, 3 * h, &state, false, p.w_hh, true, &mut gh, true);
            let gir = &gi[row * 3 * h..(row + 1) * 3 * h];
            let o = &mut out[row * h..(row + 1) * h];
            for j in 0..h {
                let r = sigmoid(gir[j] + gh[j]);
                let z = sigmoid(gir[h + j] + gh[h + j]);
                let n = (gir[2 * h + j] + r * gh[2 * h + j]).tanh();
                let hv = (1.0 - z) * n + z * state[j];
                if let Some(tr) = trace.as_deref_mut() {
                    let k = row * h + j;
                    tr.r[k] = r;
                    tr.z[k] = z;
                    tr.n[k] = n;
                    tr.hn[k] = gh[2 * h + j];
                    tr.h_prev[k] = state[j];
                }
                o[j] = hv;
            }
            state.copy_from_slice(o);
        }
    }
    out
}

pub(crate) struct GruGrads {
    pub x: Vec<f64>,
    pub h0: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

pub(crate) fn gru_backward(
    p: &GruParams,
    x: &[f64],
    trace: &GruTrace,
    gout: &[f64],
    batch: usize,
    len: usize,
    reverse: bool,
) -> GruGrads {
    let (d, h) = (p.input, p.hidden);
    let rows = batch * len;
    let mut d_gi = vec![0.0; rows * 3 * h];
    let mut g = GruGrads {
        x: vec![0.0; rows * d],
        h0: vec![0.0; batch * h],
        w_ih: vec![0.0; 3 * h * d],
        w_hh: vec![0.0; 3 * h * h],
        b_ih: vec![0.0; 3 * h],
        b_hh: vec![0.0; 3 * h],
    };
    let mut dh = vec![0.0; h];
    let mut d_gh = vec![0.0; 3 * h];
    for b in 0..batch {
        dh.iter_mut().for_each(|v| *v = 0.0);
        for s in (0..len).rev() {
            let pos = if reverse { len - 1 - s } else { s };
            let row = b * len + pos;
            let base = row * h;
            let dgi = &mut d_gi[row * 3 * h..(row + 1) * 3 * h];
            for j in 0..h {
                let k = base + j;
                let (r, z, n, hn, hp) = (trace.r[k], trace.z[k], trace.n[k], trace.hn[k], trace.h_prev[k]);
                let dhj = dh[j] + gout[k];
                let dn = dhj * (1.0 - z);
                let dz = dhj * (hp - n);
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * hn;
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dgi[j] = dr_pre;
                dgi[h + j] = dz_pre;
                dgi[2 * h + j] = dn_pre;
                d_gh[j] = dr_pre;
                d_gh[h + j] = dz_pre;
                d_gh[2 * h + j] = dn_pre * r;
                dh[j] = dhj * z;
            }
            // dh_prev += W_hh^T d_gh
            gemm(1, 3 * h, h, &d_gh, false, p.w_hh, false, &mut dh, true);
            // dW_hh += d_gh (x) h_prev
            let hp = &trace.h_prev[base..base + h];
            gemm(3 * h, 1, h, &d_gh, false, hp, false, &mut g.w_hh, true);
            for (acc, v) in g.b_hh.iter_mut().zip(&d_gh) {
                *acc += v;
            }
        }
        g.h0[b * h..(b + 1) * h].copy_from_slice(&dh);
    }
    gemm(3 * h, rows, d, &d_gi, true, x, false, &mut g.w_ih, false);
    gemm(rows, 3 * h, d, &d_gi, false, p.w_ih, false, &mut g.x, false);
    for row in d_gi.chunks(3 * h) {
        for (acc, v) in g.b_ih.iter_mut().zip(row) {
            *acc += v;
        }
    }
    g
}
