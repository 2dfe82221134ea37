//! The two-stage network: SVE (inter-band U-Net + intra-band refinement) and IPE parts.

use crate::error::{Error, Result};
use crate::ipe::IpeNet;
use crate::model::blocks::{apply_residual_mask, BandRefiner, DecoderBlock, DprnnLayer, EncoderBlock, Stcm};
use crate::model::config::MbtfConfig;
use crate::model::frontend::SubbandFrontend;
use crate::nn::layers::{Conv2d, Init};
use crate::nn::{ConvGeom, Graph, ModelWeights, ParamBuilder, Var};

/// Graph handles of one SVE forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SveVars {
    /// Rough inter-band estimate `[2C, F, T]`.
    pub x_r: Var,
    /// Refined estimate `[2C, F, T]`.
    pub x_s: Var,
    /// Encoder-stack output `[N, K, T]`.
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct Sve {
    encoder: Vec<EncoderBlock>,
    dprnn: Vec<DprnnLayer>,
    stcm: Vec<Stcm>,
    decoder: Vec<DecoderBlock>,
    inter_head: Conv2d,
    intra: BandRefiner,
    freq_sizes: Vec<usize>,
    num_bands: usize,
}

impl Sve {
    pub fn new(pb: &mut ParamBuilder, cfg: &MbtfConfig) -> Result<Self> {
        let blocks = cfg.block_channels();
        let mut encoder = Vec::new();
        for (i, &(cin, cout)) in blocks.iter().enumerate() {
            encoder.push(EncoderBlock::new(
                pb,
                &format!("sve.enc.{i}"),
                cin,
                cout,
                cfg.encoder_kernel,
                cfg.freq_stride,
                cfg.tdb_kernel,
                cfg.tdb_per_block,
                cfg.causal,
            )?);
        }
        let (n, k) = (cfg.latent_channels(), cfg.latent_bins());
        let dprnn = (0..cfg.dprnn_layers)
            .map(|i| DprnnLayer::new(pb, &format!("sve.dprnn.{i}"), n, cfg.rnn_units, cfg.causal))
            .collect::<Result<_>>()?;
        let stcm = (0..cfg.stcm_layers)
            .map(|i| Stcm::new(pb, &format!("sve.stcm.{i}"), n * k, cfg.stcm_squeeze, cfg.stcm_dilations, cfg.causal))
            .collect::<Result<_>>()?;
        let mut decoder = Vec::new();
        for (i, &(cin, cout)) in blocks.iter().enumerate() {
            decoder.push(DecoderBlock::new(
                pb,
                &format!("sve.dec.{i}"),
                2 * cout,
                cin,
                cfg.encoder_kernel,
                cfg.freq_stride,
                cfg.tdb_kernel,
                cfg.tdb_per_block,
                cfg.causal,
            )?);
        }
        let c2 = 2 * cfg.num_bands;
        let inter_head = Conv2d::new(pb, "sve.inter_head", c2, c2, ConvGeom::new((1, 1)), true, Init::Zeros)?;
        let intra = BandRefiner::new(
            pb,
            "sve.intra",
            cfg.num_bands,
            n,
            cfg.z_channels,
            cfg.dpcb_channels,
            cfg.dpcb_kernel,
            cfg.fdb_per_dpcb,
            cfg.tdb_per_dpcb,
            cfg.causal,
        )?;
        Ok(Self { encoder, dprnn, stcm, decoder, inter_head, intra, freq_sizes: cfg.freq_sizes(), num_bands: cfg.num_bands })
    }

    pub fn encoder_blocks(&self) -> &[EncoderBlock] {
        &self.encoder
    }

    /// Inter-band U-Net: rough estimate and latent.
    pub fn interband(&self, g: &mut Graph, ws: &ModelWeights, y: Var) -> Result<(Var, Var)> {
        let s = g.shape(y).to_vec();
        if s.len() != 3 || s[0] != 2 * self.num_bands || s[1] != self.freq_sizes[0] {
            return Err(Error::shape(format!(
                "expected band input [{}, {}, T], got {s:?}",
                2 * self.num_bands,
                self.freq_sizes[0]
            )));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = y;
        for block in &self.encoder {
            h = block.forward(g, ws, h)?;
            skips.push(h);
        }
        let z = h;
        for layer in &self.dprnn {
            h = layer.forward(g, ws, h)?;
        }
        for layer in &self.stcm {
            h = layer.forward(g, ws, h)?;
        }
        for (i, block) in self.decoder.iter().enumerate().rev() {
            h = block.forward(g, ws, h, skips[i], self.freq_sizes[i])?;
        }
        let delta = self.inter_head.forward(g, ws, h)?;
        let x_r = apply_residual_mask(g, y, delta)?;
        Ok((x_r, z))
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, y: Var) -> Result<SveVars> {
        let (x_r, z) = self.interband(g, ws, y)?;
        let x_s = self.intra.forward(g, ws, x_r, z)?;
        Ok(SveVars { x_r, x_s, z })
    }
}

/// Full model: SVE stage plus the IPE stage, sharing one weight store.
#[derive(Debug, Clone)]
pub struct Mbtfnet {
    pub cfg: MbtfConfig,
    pub sve: Sve,
    pub ipe: IpeNet,
}

impl Mbtfnet {
    /// Fresh model with seeded initial weights.
    pub fn init(cfg: &MbtfConfig, seed: u64) -> Result<(Self, ModelWeights)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(cfg.to_topology(), seed);
        let sve = Sve::new(&mut pb, cfg)?;
        let ipe = IpeNet::new(&mut pb, cfg)?;
        Ok((Self { cfg: cfg.clone(), sve, ipe }, pb.finish()))
    }

    /// Model described by a loaded weights file, with its parameters bound.
    pub fn from_weights(loaded: &ModelWeights) -> Result<(Self, ModelWeights)> {
        let cfg = MbtfConfig::from_topology(loaded.topology())?;
        let (model, mut ws) = Self::init(&cfg, 0)?;
        ws.adopt(loaded)?;
        Ok((model, ws))
    }

    pub fn frontend(&self) -> Result<SubbandFrontend> {
        SubbandFrontend::new(self.cfg.pqmf_config()?, self.cfg.stft_config()?)
    }

    /// Trainable parameter counts `(sve, ipe)`.
    pub fn param_counts(ws: &ModelWeights) -> (usize, usize) {
        let mut counts = (0, 0);
        for id in ws.ids().filter(|&id| ws.is_trainable(id)) {
            let n = ws.tensor(id).numel();
            if ws.name(id).starts_with("sve.") {
                counts.0 += n;
            } else if ws.name(id).starts_with("ipe.") {
                counts.1 += n;
            }
        }
        counts
    }

    /// `frozen[i]` is true for every SVE parameter (used while training the IPE stage).
    pub fn sve_frozen_mask(ws: &ModelWeights) -> Vec<bool> {
        ws.ids().map(|id| ws.name(id).starts_with("sve.")).collect()
    }
}
