//! Model topology configuration.
//!
//! The configuration round-trips through a canonical `key=value;key=value` string, which is
//! stored as the topology descriptor of every weights file.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dsp::{PqmfConfig, StftConfig};
use crate::error::{Error, Result};

/// Dimension of speaker embeddings.
pub const EMBED_DIM: usize = 192;

#[derive(Debug, Clone, PartialEq)]
pub struct MbtfConfig {
    pub num_bands: usize,
    /// Output channels of each encoder block; see [`MbtfConfig::block_channels`].
    pub encoder_channels: Vec<usize>,
    pub encoder_kernel: (usize, usize),
    pub freq_stride: usize,
    pub tdb_per_block: usize,
    pub tdb_kernel: (usize, usize),
    pub dprnn_layers: usize,
    pub rnn_units: usize,
    pub stcm_layers: usize,
    pub stcm_squeeze: usize,
    pub stcm_dilations: usize,
    pub dpcb_count: usize,
    pub fdb_per_dpcb: usize,
    pub tdb_per_dpcb: usize,
    pub dpcb_kernel: (usize, usize),
    pub dpcb_channels: usize,
    pub z_channels: usize,
    pub causal: bool,
    pub snr_gru_layers: usize,
    pub snr_units: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for MbtfConfig {
    fn default() -> Self {
        Self {
            num_bands: 4,
            encoder_channels: vec![8, 64, 64, 64, 128, 128],
            encoder_kernel: (5, 2),
            freq_stride: 2,
            tdb_per_block: 6,
            tdb_kernel: (3, 3),
            dprnn_layers: 2,
            rnn_units: 256,
            stcm_layers: 1,
            stcm_squeeze: 64,
            stcm_dilations: 4,
            dpcb_count: 4,
            fdb_per_dpcb: 5,
            tdb_per_dpcb: 5,
            dpcb_kernel: (3, 3),
            dpcb_channels: 16,
            z_channels: 8,
            causal: false,
            snr_gru_layers: 2,
            snr_units: 256,
            frame_len: 256,
            hop: 128,
            fft_size: 256,
        }
    }
}

impl MbtfConfig {
    /// Small configuration used by tests and toy training.
    pub fn toy() -> Self {
        Self {
            encoder_channels: vec![8, 16, 16, 24],
            tdb_per_block: 2,
            rnn_units: 32,
            stcm_squeeze: 32,
            fdb_per_dpcb: 2,
            tdb_per_dpcb: 2,
            dpcb_channels: 8,
            z_channels: 4,
            snr_units: 32,
            ..Self::default()
        }
    }

    /// `(in, out)` channel pairs of the encoder blocks. The first block maps the stacked
    /// real/imaginary band input onto `encoder_channels[0]`.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        let mut ins = vec![2 * self.num_bands];
        ins.extend_from_slice(&self.encoder_channels[..self.encoder_channels.len() - 1]);
        ins.into_iter().zip(self.encoder_channels.iter().copied()).collect()
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frequency sizes after each encoder block, starting with the input bins.
    pub fn freq_sizes(&self) -> Vec<usize> {
        let (k, s) = (self.encoder_kernel.0, self.freq_stride);
        let pad = k / 2;
        let mut sizes = vec![self.num_bins()];
        for _ in 0..self.encoder_channels.len() {
            let f = *sizes.last().unwrap();
            sizes.push((f + 2 * pad).saturating_sub(k) / s + 1);
        }
        sizes
    }

    /// Latent channel count `N`.
    pub fn latent_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap()
    }

    /// Latent frequency size `K`.
    pub fn latent_bins(&self) -> usize {
        *self.freq_sizes().last().unwrap()
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.frame_len, self.hop, self.fft_size)
    }

    pub fn pqmf_config(&self) -> Result<PqmfConfig> {
        if self.num_bands == 4 {
            Ok(PqmfConfig::default())
        } else {
            PqmfConfig::tuned(self.num_bands, PqmfConfig::default().kaiser_beta)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_bands,
            self.freq_stride,
            self.rnn_units,
            self.dpcb_channels,
            self.z_channels,
            self.snr_units,
            self.snr_gru_layers,
            self.stcm_squeeze,
            self.stcm_dilations,
        ];
        if positive.contains(&0) {
            return Err(Error::config("band count, strides, widths and unit counts must be positive"));
        }
        if self.num_bands < 2 {
            return Err(Error::config("at least two bands are required"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder_channels must be a non-empty list of positive counts"));
        }
        if self.dpcb_count != self.num_bands {
            return Err(Error::config(format!(
                "dpcb_count ({}) must equal num_bands ({}): one intra-band block per sub-band",
                self.dpcb_count, self.num_bands
            )));
        }
        for (name, k) in [("encoder_kernel", self.encoder_kernel), ("tdb_kernel", self.tdb_kernel), ("dpcb_kernel", self.dpcb_kernel)] {
            if k.0 == 0 || k.1 == 0 {
                return Err(Error::config(format!("{name} entries must be positive")));
            }
        }
        if self.tdb_kernel.0.is_multiple_of(2) || self.dpcb_kernel.0.is_multiple_of(2) || self.dpcb_kernel.1.is_multiple_of(2) {
            return Err(Error::config("dilation-block kernels must have odd frequency sizes (and odd time size for DPCBs)"));
        }
        if self.encoder_kernel.0.is_multiple_of(2) {
            return Err(Error::config("encoder_kernel frequency size must be odd"));
        }
        if self.freq_sizes().windows(2).any(|w| w[1] >= w[0] && w[0] > 1) || self.latent_bins() == 0 {
            return Err(Error::config("encoder frequency sizes must shrink at every block"));
        }
        self.stft_config()?;
        Ok(())
    }

    /// Canonical `key=value;...` form.
    pub fn to_topology(&self) -> String {
        let mut s = String::from("mbtfnet/1");
        for (k, v) in self.entries() {
            let _ = write!(s, ";{k}={v}");
        }
        s
    }

    pub fn from_topology(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        if parts.next() != Some("mbtfnet/1") {
            return Err(Error::Format(format!("unknown topology descriptor {s:?}")));
        }
        let mut cfg = Self::default();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Format(format!("bad topology entry {part:?}")))?;
            cfg.set(k, v).map_err(|e| Error::Format(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let pair = |p: (usize, usize)| format!("{},{}", p.0, p.1);
        let list = self.encoder_channels.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("num_bands", self.num_bands.to_string()),
            ("encoder_channels", list),
            ("encoder_kernel", pair(self.encoder_kernel)),
            ("freq_stride", self.freq_stride.to_string()),
            ("tdb_per_block", self.tdb_per_block.to_string()),
            ("tdb_kernel", pair(self.tdb_kernel)),
            ("dprnn_layers", self.dprnn_layers.to_string()),
            ("rnn_units", self.rnn_units.to_string()),
            ("stcm_layers", self.stcm_layers.to_string()),
            ("stcm_squeeze", self.stcm_squeeze.to_string()),
            ("stcm_dilations", self.stcm_dilations.to_string()),
            ("dpcb_count", self.dpcb_count.to_string()),
            ("fdb_per_dpcb", self.fdb_per_dpcb.to_string()),
            ("tdb_per_dpcb", self.tdb_per_dpcb.to_string()),
            ("dpcb_kernel", pair(self.dpcb_kernel)),
            ("dpcb_channels", self.dpcb_channels.to_string()),
            ("z_channels", self.z_channels.to_string()),
            ("causal", self.causal.to_string()),
            ("snr_gru_layers", self.snr_gru_layers.to_string()),
            ("snr_units", self.snr_units.to_string()),
            ("frame_len", self.frame_len.to_string()),
            ("hop", self.hop.to_string()),
            ("fft_size", self.fft_size.to_string()),
        ]
    }

    /// Returns `true` if `key` names a topology field (and sets it), `false` if unknown.
    pub fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.trim().parse().map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got {v:?}")))
        }
        fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
            let (a, b) = v.split_once(',').ok_or_else(|| Error::config(format!("{key}: expected \"a,b\", got {v:?}")))?;
            Ok((num(key, a)?, num(key, b)?))
        }
        match key {
            "num_bands" => self.num_bands = num(key, value)?,
            "encoder_channels" => {
                self.encoder_channels = value.split(',').map(|v| num(key, v)).collect::<Result<_>>()?;
            }
            "encoder_kernel" => self.encoder_kernel = pair(key, value)?,
            "freq_stride" => self.freq_stride = num(key, value)?,
            "tdb_per_block" => self.tdb_per_block = num(key, value)?,
            "tdb_kernel" => self.tdb_kernel = pair(key, value)?,
            "dprnn_layers" => self.dprnn_layers = num(key, value)?,
            "rnn_units" => self.rnn_units = num(key, value)?,
            "stcm_layers" => self.stcm_layers = num(key, value)?,
            "stcm_squeeze" => self.stcm_squeeze = num(key, value)?,
            "stcm_dilations" => self.stcm_dilations = num(key, value)?,
            "dpcb_count" => self.dpcb_count = num(key, value)?,
            "fdb_per_dpcb" => self.fdb_per_dpcb = num(key, value)?,
            "tdb_per_dpcb" => self.tdb_per_dpcb = num(key, value)?,
            "dpcb_kernel" => self.dpcb_kernel = pair(key, value)?,
            "dpcb_channels" => self.dpcb_channels = num(key, value)?,
            "z_channels" => self.z_channels = num(key, value)?,
            "causal" => {
                self.causal = bool::from_str(value.trim())
                    .map_err(|_| Error::config(format!("causal: expected true or false, got {value:?}")))?;
            }
            "snr_gru_layers" => self.snr_gru_layers = num(key, value)?,
            "snr_units" => self.snr_units = num(key, value)?,
            "frame_len" => self.frame_len = num(key, value)?,
            "hop" => self.hop = num(key, value)?,
            "fft_size" => self.fft_size = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.try_set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown configuration key {key:?}")))
        }
    }
}
