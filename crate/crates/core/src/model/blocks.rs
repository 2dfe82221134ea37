//! Network blocks on `[C, F, T]` feature maps.

use crate::error::Result;
use crate::nn::layers::{BatchNorm, BiGru, Conv2d, ConvTranspose2d, Gru, Init, Linear, PRelu};
use crate::nn::{ConvGeom, Graph, ModelWeights, ParamBuilder, Tensor, Var};

/// Time-axis zero padding for a kernel of `k` taps at dilation `d`.
pub fn time_pad(k: usize, d: usize, causal: bool) -> (usize, usize) {
    let total = (k - 1) * d;
    if causal {
        (total, 0)
    } else {
        (total / 2, total - total / 2)
    }
}

fn same_pad(k: usize, d: usize) -> (usize, usize) {
    let total = (k - 1) * d;
    (total / 2, total - total / 2)
}

/// Dilated conv + batch norm + PReLU with a residual connection.
#[derive(Debug, Clone)]
pub struct DilatedBlock {
    conv: Conv2d,
    bn: BatchNorm,
    act: PRelu,
}

impl DilatedBlock {
    /// Time-axis dilation `dilation` (TDB).
    pub fn time(pb: &mut ParamBuilder, name: &str, ch: usize, kernel: (usize, usize), dilation: usize, causal: bool) -> Result<Self> {
        let geom = ConvGeom {
            kernel,
            stride: (1, 1),
            dilation: (1, dilation),
            pad_f: same_pad(kernel.0, 1),
            pad_t: time_pad(kernel.1, dilation, causal),
            groups: 1,
        };
        Self::build(pb, name, ch, geom)
    }

    /// Frequency-axis dilation `dilation` (FDB).
    pub fn freq(pb: &mut ParamBuilder, name: &str, ch: usize, kernel: (usize, usize), dilation: usize, causal: bool) -> Result<Self> {
        let geom = ConvGeom {
            kernel,
            stride: (1, 1),
            dilation: (dilation, 1),
            pad_f: same_pad(kernel.0, dilation),
            pad_t: time_pad(kernel.1, 1, causal),
            groups: 1,
        };
        Self::build(pb, name, ch, geom)
    }

    fn build(pb: &mut ParamBuilder, name: &str, ch: usize, geom: ConvGeom) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, &format!("{name}.conv"), ch, ch, geom, true, Init::Default)?,
            bn: BatchNorm::new(pb, &format!("{name}.bn"), ch)?,
            act: PRelu::new(pb, &format!("{name}.act"), ch)?,
        })
    }

    pub fn geom(&self) -> ConvGeom {
        self.conv.geom
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, ws, x)?;
        let h = self.bn.forward(g, ws, h)?;
        let h = self.act.forward(g, ws, h)?;
        g.add(x, h)
    }
}

/// Stack of dilated blocks with dilation `2^n`, `n = 1, 2, ...`.
fn time_stack(pb: &mut ParamBuilder, name: &str, ch: usize, kernel: (usize, usize), count: usize, causal: bool) -> Result<Vec<DilatedBlock>> {
    (1..=count).map(|n| DilatedBlock::time(pb, &format!("{name}.{}", n - 1), ch, kernel, 1 << n, causal)).collect()
}

fn run(blocks: &[DilatedBlock], g: &mut Graph, ws: &ModelWeights, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, ws, x)?;
    }
    Ok(x)
}

/// Dual-path convolution block: frequency-dilated blocks followed by time-dilated blocks.
#[derive(Debug, Clone)]
pub struct Dpcb {
    pub fdbs: Vec<DilatedBlock>,
    pub tdbs: Vec<DilatedBlock>,
}

impl Dpcb {
    pub fn new(pb: &mut ParamBuilder, name: &str, ch: usize, kernel: (usize, usize), fdb: usize, tdb: usize, causal: bool) -> Result<Self> {
        let fdbs = (1..=fdb)
            .map(|n| DilatedBlock::freq(pb, &format!("{name}.fdb.{}", n - 1), ch, kernel, 1 << n, causal))
            .collect::<Result<_>>()?;
        let tdbs = time_stack(pb, &format!("{name}.tdb"), ch, kernel, tdb, causal)?;
        Ok(Self { fdbs, tdbs })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let x = run(&self.fdbs, g, ws, x)?;
        run(&self.tdbs, g, ws, x)
    }
}

fn updown_geom(kernel: (usize, usize), freq_stride: usize, pad_t: (usize, usize)) -> ConvGeom {
    ConvGeom { kernel, stride: (freq_stride, 1), dilation: (1, 1), pad_f: same_pad(kernel.0, 1), pad_t, groups: 1 }
}

/// Strided conv (frequency downsampling) + BN + PReLU, then time-dilated blocks.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    conv: Conv2d,
    bn: BatchNorm,
    act: PRelu,
    tdbs: Vec<DilatedBlock>,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        freq_stride: usize,
        tdb_kernel: (usize, usize),
        tdbs: usize,
        causal: bool,
    ) -> Result<Self> {
        let geom = updown_geom(kernel, freq_stride, time_pad(kernel.1, 1, causal));
        Ok(Self {
            conv: Conv2d::new(pb, &format!("{name}.conv"), cin, cout, geom, true, Init::Default)?,
            bn: BatchNorm::new(pb, &format!("{name}.bn"), cout)?,
            act: PRelu::new(pb, &format!("{name}.act"), cout)?,
            tdbs: time_stack(pb, &format!("{name}.tdb"), cout, tdb_kernel, tdbs, causal)?,
        })
    }

    pub fn tdb_dilations(&self) -> Vec<usize> {
        self.tdbs.iter().map(|b| b.geom().dilation.1).collect()
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, ws, x)?;
        let h = self.bn.forward(g, ws, h)?;
        let h = self.act.forward(g, ws, h)?;
        run(&self.tdbs, g, ws, h)
    }
}

/// Transposed conv (frequency upsampling) on `[skip, input]`, BN, PReLU, time-dilated blocks.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    conv: ConvTranspose2d,
    bn: BatchNorm,
    act: PRelu,
    tdbs: Vec<DilatedBlock>,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        freq_stride: usize,
        tdb_kernel: (usize, usize),
        tdbs: usize,
        causal: bool,
    ) -> Result<Self> {
        // The transposed conv is the adjoint of a conv; a conv looking only at future frames
        // has an adjoint that looks only at past frames.
        let total = kernel.1 - 1;
        let pad_t = if causal { (0, total) } else { (total - total / 2, total / 2) };
        let geom = updown_geom(kernel, freq_stride, pad_t);
        Ok(Self {
            conv: ConvTranspose2d::new(pb, &format!("{name}.conv"), cin, cout, geom)?,
            bn: BatchNorm::new(pb, &format!("{name}.bn"), cout)?,
            act: PRelu::new(pb, &format!("{name}.act"), cout)?,
            tdbs: time_stack(pb, &format!("{name}.tdb"), cout, tdb_kernel, tdbs, causal)?,
        })
    }

    /// `x` and `skip` share `[C, K_i, T]`; the output frequency size is `target_f`.
    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var, skip: Var, target_f: usize) -> Result<Var> {
        let cat = g.concat(&[x, skip], 0)?;
        let shape = g.shape(cat).to_vec();
        let (f_min, _) = self.conv.geom.transposed_size(shape[1], shape[2], (0, 0))?;
        let op = target_f.checked_sub(f_min).ok_or_else(|| {
            crate::Error::shape(format!("decoder cannot reach {target_f} bins from {} (minimum {f_min})", shape[1]))
        })?;
        let h = self.conv.forward(g, ws, cat, (op, 0))?;
        let h = self.bn.forward(g, ws, h)?;
        let h = self.act.forward(g, ws, h)?;
        run(&self.tdbs, g, ws, h)
    }
}

/// One dual-path recurrent layer over `[N, K, T]`: bidirectional over frequency, then over time.
#[derive(Debug, Clone)]
pub struct DprnnLayer {
    intra: BiGru,
    intra_proj: Linear,
    inter_fwd: Gru,
    inter_bwd: Option<Gru>,
    inter_proj: Linear,
}

impl DprnnLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, n: usize, units: usize, causal: bool) -> Result<Self> {
        let intra = BiGru::new(pb, &format!("{name}.intra"), n, units)?;
        let intra_proj = Linear::new(pb, &format!("{name}.intra_proj"), 2 * units, n, Init::Zeros)?;
        let inter_fwd = Gru::new(pb, &format!("{name}.inter.fwd"), n, units)?;
        let inter_bwd = if causal { None } else { Some(Gru::new(pb, &format!("{name}.inter.bwd"), n, units)?) };
        let width = if causal { units } else { 2 * units };
        let inter_proj = Linear::new(pb, &format!("{name}.inter_proj"), width, n, Init::Zeros)?;
        Ok(Self { intra, intra_proj, inter_fwd, inter_bwd, inter_proj })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, k, t) = (s[0], s[1], s[2]);
        // frequency path: sequences over K, one per frame
        let seq = g.permute3(x, [2, 1, 0])?;
        let h = self.intra.forward(g, ws, seq)?;
        let w = g.shape(h)[2];
        let h = g.reshape(h, &[t * k, w])?;
        let h = self.intra_proj.forward(g, ws, h)?;
        let h = g.reshape(h, &[t, k, n])?;
        let h = g.permute3(h, [2, 1, 0])?;
        let x = g.add(x, h)?;
        // time path: sequences over T, one per frequency position
        let seq = g.permute3(x, [1, 2, 0])?;
        let f = self.inter_fwd.forward(g, ws, seq, false)?;
        let h = match &self.inter_bwd {
            Some(b) => {
                let r = b.forward(g, ws, seq, true)?;
                g.concat(&[f, r], 2)?
            }
            None => f,
        };
        let w = g.shape(h)[2];
        let h = g.reshape(h, &[k * t, w])?;
        let h = self.inter_proj.forward(g, ws, h)?;
        let h = g.reshape(h, &[k, t, n])?;
        let h = g.permute3(h, [2, 0, 1])?;
        g.add(x, h)
    }
}

/// Squeezed temporal convolution: pointwise squeeze, dilated depthwise temporal convs,
/// pointwise expand, residual. Operates on `[N, K, T]` with `N * K` as channels.
#[derive(Debug, Clone)]
pub struct Stcm {
    squeeze: Conv2d,
    squeeze_act: PRelu,
    temporal: Vec<(Conv2d, PRelu)>,
    expand: Conv2d,
}

impl Stcm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, squeeze: usize, dilations: usize, causal: bool) -> Result<Self> {
        let pw = ConvGeom::new((1, 1));
        let temporal = (0..dilations)
            .map(|i| {
                let d = 1 << i;
                let geom = ConvGeom {
                    kernel: (1, 3),
                    stride: (1, 1),
                    dilation: (1, d),
                    pad_f: (0, 0),
                    pad_t: time_pad(3, d, causal),
                    groups: squeeze,
                };
                Ok((
                    Conv2d::new(pb, &format!("{name}.dw.{i}"), squeeze, squeeze, geom, true, Init::Default)?,
                    PRelu::new(pb, &format!("{name}.dw_act.{i}"), squeeze)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            squeeze: Conv2d::new(pb, &format!("{name}.squeeze"), channels, squeeze, pw, true, Init::Default)?,
            squeeze_act: PRelu::new(pb, &format!("{name}.squeeze_act"), squeeze)?,
            temporal,
            expand: Conv2d::new(pb, &format!("{name}.expand"), squeeze, channels, pw, true, Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], 1, s[2]])?;
        let h = self.squeeze.forward(g, ws, flat)?;
        let mut h = self.squeeze_act.forward(g, ws, h)?;
        for (conv, act) in &self.temporal {
            let d = conv.forward(g, ws, h)?;
            let d = act.forward(g, ws, d)?;
            h = g.add(h, d)?;
        }
        let h = self.expand.forward(g, ws, h)?;
        let h = g.reshape(h, &s)?;
        g.add(x, h)
    }
}

/// Nearest-neighbour index map from `to` frequency positions onto `from` positions.
pub fn upsample_index(from: usize, to: usize) -> Vec<usize> {
    (0..to).map(|f| (f * from / to).min(from - 1)).collect()
}

/// Applies a complex ratio mask parameterized as `1 + delta` to `base`.
pub fn apply_residual_mask(g: &mut Graph, base: Var, delta: Var) -> Result<Var> {
    let shape = g.shape(delta).to_vec();
    let plane: usize = shape[1..].iter().product();
    let mut one = vec![0.0; shape.iter().product()];
    for c in (0..shape[0]).step_by(2) {
        one[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = 1.0);
    }
    let one = g.constant(Tensor::new(shape, one)?);
    let mask = g.add(delta, one)?;
    g.complex_mul(base, mask)
}

/// Per-band DPCBs conditioned on a latent, a merging DPCB, and a residual complex mask head.
/// Used for the intra-band module and, with separate weights, for personalized enhancement.
#[derive(Debug, Clone)]
pub struct BandRefiner {
    adapters: Vec<Conv2d>,
    in_proj: Vec<Conv2d>,
    dpcbs: Vec<Dpcb>,
    merge_proj: Conv2d,
    merge: Dpcb,
    head: Conv2d,
    num_bands: usize,
}

impl BandRefiner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        num_bands: usize,
        latent: usize,
        z_ch: usize,
        h: usize,
        kernel: (usize, usize),
        fdb: usize,
        tdb: usize,
        causal: bool,
    ) -> Result<Self> {
        let pw = ConvGeom::new((1, 1));
        let mut adapters = Vec::new();
        let mut in_proj = Vec::new();
        let mut dpcbs = Vec::new();
        for b in 0..num_bands {
            adapters.push(Conv2d::new(pb, &format!("{name}.band.{b}.adapter"), latent, z_ch, pw, true, Init::Default)?);
            in_proj.push(Conv2d::new(pb, &format!("{name}.band.{b}.in_proj"), 2 + z_ch, h, pw, true, Init::Default)?);
            dpcbs.push(Dpcb::new(pb, &format!("{name}.band.{b}.dpcb"), h, kernel, fdb, tdb, causal)?);
        }
        Ok(Self {
            adapters,
            in_proj,
            dpcbs,
            merge_proj: Conv2d::new(pb, &format!("{name}.merge_proj"), num_bands * h, h, pw, true, Init::Default)?,
            merge: Dpcb::new(pb, &format!("{name}.merge"), h, kernel, fdb, tdb, causal)?,
            head: Conv2d::new(pb, &format!("{name}.head"), h, 2 * num_bands, pw, true, Init::Zeros)?,
            num_bands,
        })
    }

    /// `base: [2C, F, T]`, `cond: [N, K, T]` -> refined `[2C, F, T]`.
    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, base: Var, cond: Var) -> Result<Var> {
        let f = g.shape(base)[1];
        let k = g.shape(cond)[1];
        let index = upsample_index(k, f);
        let mut outs = Vec::with_capacity(self.num_bands);
        for b in 0..self.num_bands {
            let z = self.adapters[b].forward(g, ws, cond)?;
            let z = g.gather_axis1(z, &index)?;
            let band = g.narrow(base, 0, 2 * b, 2)?;
            let x = g.concat(&[band, z], 0)?;
            let x = self.in_proj[b].forward(g, ws, x)?;
            outs.push(self.dpcbs[b].forward(g, ws, x)?);
        }
        let cat = g.concat(&outs, 0)?;
        let m = self.merge_proj.forward(g, ws, cat)?;
        let m = self.merge.forward(g, ws, m)?;
        let delta = self.head.forward(g, ws, m)?;
        apply_residual_mask(g, base, delta)
    }
}
