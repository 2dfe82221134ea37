//! Trainable parts of the IPE stage: SNR module, embedding-to-map projection and PEM.

use crate::error::{Error, Result};
use crate::ipe::sem::SpeakerEmbedding;
use crate::model::blocks::BandRefiner;
use crate::model::{MbtfConfig, EMBED_DIM};
use crate::nn::layers::{Conv2d, Gru, Init, Linear};
use crate::nn::{ConvGeom, Graph, ModelWeights, ParamBuilder, Tensor, Var};

/// Recurrent cleanliness estimator. Output frame `t` depends only on frames `<= t`.
#[derive(Debug, Clone)]
pub struct SnrModule {
    grus: Vec<Gru>,
    conv: Conv2d,
    input_dim: usize,
}

/// Log-compressed magnitudes of the enhanced and noisy band tensors, one row per frame:
/// `[1, T, 2 * C * F]`.
pub fn snr_features(x_s: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x_s.shape() != y.shape() || x_s.shape().len() != 3 {
        return Err(Error::shape(format!("SNR features: {:?} vs {:?}", x_s.shape(), y.shape())));
    }
    let s = x_s.shape();
    let (c, f, t) = (s[0] / 2, s[1], s[2]);
    let plane = f * t;
    let d = 2 * c * f;
    let mut out = vec![0.0; t * d];
    for (which, src) in [x_s, y].into_iter().enumerate() {
        let v = src.data();
        for b in 0..c {
            for fi in 0..f {
                for ti in 0..t {
                    let i = fi * t + ti;
                    let m = v[2 * b * plane + i].hypot(v[(2 * b + 1) * plane + i]);
                    out[ti * d + which * c * f + b * f + fi] = m.ln_1p();
                }
            }
        }
    }
    Tensor::new(vec![1, t, d], out)
}

impl SnrModule {
    pub fn new(pb: &mut ParamBuilder, name: &str, input_dim: usize, units: usize, layers: usize) -> Result<Self> {
        let grus = (0..layers)
            .map(|i| Gru::new(pb, &format!("{name}.gru.{i}"), if i == 0 { input_dim } else { units }, units))
            .collect::<Result<_>>()?;
        let geom = ConvGeom { kernel: (3, 3), stride: (1, 1), dilation: (1, 1), pad_f: (1, 1), pad_t: (2, 0), groups: 1 };
        let conv = Conv2d::new(pb, &format!("{name}.conv"), 1, 2, geom, true, Init::Default)?;
        Ok(Self { grus, conv, input_dim })
    }

    pub fn units(&self) -> usize {
        self.grus.last().map(|g| g.hidden).unwrap_or(self.input_dim)
    }

    /// Shared body: `feats [1, L, D]`, optional per-layer initial states, and `tail` frames of
    /// the last recurrent layer's output `[1, H, P]` prepended for the causal convolution.
    /// Returns scores for the `L` new frames, the final states and the last recurrent outputs.
    fn run(
        &self,
        g: &mut Graph,
        ws: &ModelWeights,
        feats: Var,
        states: Option<&[Vec<f64>]>,
        tail: Option<Var>,
    ) -> Result<(Var, Vec<Var>, Var)> {
        let s = g.shape(feats).to_vec();
        if s.len() != 3 || s[0] != 1 || s[2] != self.input_dim {
            return Err(Error::shape(format!("SNR module expects [1, T, {}], got {s:?}", self.input_dim)));
        }
        let len = s[1];
        let mut h = feats;
        let mut finals = Vec::with_capacity(self.grus.len());
        for (i, gru) in self.grus.iter().enumerate() {
            let w = gru.params.map(|p| g.param(ws, p));
            let h0 = match states {
                Some(st) => Some(g.constant(Tensor::new(vec![1, gru.hidden], st[i].clone())?)),
                None => None,
            };
            h = g.gru(h, h0, w, false)?;
            finals.push(g.narrow(h, 1, len - 1, 1)?);
        }
        let units = g.shape(h)[2];
        let img = g.permute3(h, [0, 2, 1])?;
        let (img, p) = match tail {
            Some(t) => {
                let p = g.shape(t)[2];
                (g.concat(&[t, img], 2)?, p)
            }
            None => (img, 0),
        };
        let conv = self.conv.forward(g, ws, img)?;
        let mean = g.mean_leading(conv)?;
        let mean = g.narrow(mean, 0, p, len)?;
        let scores = g.sigmoid(mean);
        debug_assert_eq!(g.shape(img)[1], units);
        Ok((scores, finals, img))
    }

    /// Scores `[T]` in `(0, 1)` for a whole sequence of features `[1, T, D]`.
    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, feats: Var) -> Result<Var> {
        Ok(self.run(g, ws, feats, None, None)?.0)
    }
}

/// Chunk-by-chunk evaluation of an [`SnrModule`] carrying recurrent and convolution state.
/// Largest double below one.
pub const SCORE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone)]
pub struct SnrStream {
    states: Vec<Vec<f64>>,
    tail: Option<Tensor>,
}

impl SnrStream {
    pub fn new(m: &SnrModule) -> Self {
        Self { states: m.grus.iter().map(|g| vec![0.0; g.hidden]).collect(), tail: None }
    }

    /// Scores for the frames of `feats [1, L, D]`, kept inside the open interval (0, 1) so that
    /// a threshold of 1 never accepts.
    pub fn push(&mut self, m: &SnrModule, ws: &ModelWeights, feats: Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(false);
        let x = g.constant(feats);
        let tail = self.tail.clone().map(|t| g.constant(t));
        let (scores, finals, img) = m.run(&mut g, ws, x, Some(&self.states), tail)?;
        self.states = finals.iter().map(|v| g.value(*v).data().to_vec()).collect();
        let total = g.shape(img)[2];
        let keep = total.min(2);
        let t = g.narrow(img, 2, total - keep, keep)?;
        self.tail = Some(g.value(t).clone());
        Ok(g.value(scores).data().iter().map(|v| v.clamp(f64::MIN_POSITIVE, SCORE_MAX)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct IpeNet {
    pub snr: SnrModule,
    embed: Linear,
    pem: BandRefiner,
    latent: (usize, usize),
}

impl IpeNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &MbtfConfig) -> Result<Self> {
        let (n, k) = (cfg.latent_channels(), cfg.latent_bins());
        let snr = SnrModule::new(pb, "ipe.snr", 2 * cfg.num_bands * cfg.num_bins(), cfg.snr_units, cfg.snr_gru_layers)?;
        let embed = Linear::new(pb, "ipe.embed", EMBED_DIM, n * k, Init::Default)?;
        let pem = BandRefiner::new(
            pb,
            "ipe.pem",
            cfg.num_bands,
            n,
            cfg.z_channels,
            cfg.dpcb_channels,
            cfg.dpcb_kernel,
            cfg.fdb_per_dpcb,
            cfg.tdb_per_dpcb,
            cfg.causal,
        )?;
        Ok(Self { snr, embed, pem, latent: (n, k) })
    }

    /// `a: [1, 192]` -> `A: [N, K]`.
    pub fn embed_to_map(&self, g: &mut Graph, ws: &ModelWeights, a: Var) -> Result<Var> {
        let m = self.embed.forward(g, ws, a)?;
        g.reshape(m, &[self.latent.0, self.latent.1])
    }

    /// `A` for a fixed embedding, evaluated outside any training graph.
    pub fn map_values(&self, ws: &ModelWeights, e: &SpeakerEmbedding) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let a = g.constant(Tensor::new(vec![1, EMBED_DIM], e.as_slice().to_vec())?);
        let m = self.embed_to_map(&mut g, ws, a)?;
        Ok(g.value(m).clone())
    }

    /// PEM conditioned on `cond = A (.) Z`, either `[N, K, T]` or computed from `A: [N, K]`.
    pub fn pem_forward(&self, g: &mut Graph, ws: &ModelWeights, x_s: Var, z: Var, a_map: Var) -> Result<Var> {
        let t = g.shape(z)[2];
        let cond = if g.shape(a_map).len() == 2 { g.broadcast_last(a_map, t) } else { a_map };
        let cond = g.mul(cond, z)?;
        self.pem.forward(g, ws, x_s, cond)
    }
}
