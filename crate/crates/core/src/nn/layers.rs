//! Parameterized layers built on the autograd graph.

use crate::error::Result;
use crate::nn::graph::{BatchStats, Graph, Var};
use crate::nn::kernels::ConvGeom;
use crate::nn::weights::{ModelWeights, ParamBuilder, ParamId};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential moving average.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform with bound `1/sqrt(fan_in)`.
    Default,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool, init: Init) -> Result<Self> {
        geom.validate()?;
        let per_group = cin / geom.groups;
        let shape = [cout, per_group, geom.kernel.0, geom.kernel.1];
        let bound = 1.0 / ((per_group * geom.kernel.0 * geom.kernel.1) as f64).sqrt();
        let w = match init {
            Init::Default => pb.uniform(&format!("{name}.weight"), &shape, bound)?,
            Init::Zeros => pb.filled(&format!("{name}.weight"), &shape, 0.0)?,
        };
        let b = if bias {
            Some(match init {
                Init::Default => pb.uniform(&format!("{name}.bias"), &[cout], bound)?,
                Init::Zeros => pb.filled(&format!("{name}.bias"), &[cout], 0.0)?,
            })
        } else {
            None
        };
        Ok(Self { w, b, geom })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let w = g.param(ws, self.w);
        let b = self.b.map(|b| g.param(ws, b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Result<Self> {
        geom.validate()?;
        let bound = 1.0 / ((cout * geom.kernel.0 * geom.kernel.1) as f64).sqrt();
        let w = pb.uniform(&format!("{name}.weight"), &[cin, cout, geom.kernel.0, geom.kernel.1], bound)?;
        let b = pb.uniform(&format!("{name}.bias"), &[cout], bound)?;
        Ok(Self { w, b, geom })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var, output_padding: (usize, usize)) -> Result<Var> {
        let w = g.param(ws, self.w);
        let b = g.param(ws, self.b);
        g.conv_transpose2d(x, w, Some(b), self.geom, output_padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.filled(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: pb.filled(&format!("{name}.bias"), &[channels], 0.0)?,
            mean: pb.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            var: pb.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
        })
    }

    /// Uses batch statistics when the graph is in training mode (recording them for the running
    /// averages) and the running statistics otherwise.
    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let gamma = g.param(ws, self.gamma);
        let beta = g.param(ws, self.beta);
        if g.is_training() {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, BN_EPS)?;
            let (mean, var) = stats.expect("batch statistics in training mode");
            g.record_batch_stats(BatchStats { running_mean: self.mean, running_var: self.var, mean, var });
            Ok(y)
        } else {
            let m = ws.tensor(self.mean).data();
            let v = ws.tensor(self.var).data();
            Ok(g.batch_norm(x, gamma, beta, Some((m, v)), BN_EPS)?.0)
        }
    }
}

/// Folds recorded batch statistics into the running averages.
pub fn update_running_stats(ws: &mut ModelWeights, stats: &[BatchStats], momentum: f64) {
    for s in stats {
        for (id, batch) in [(s.running_mean, &s.mean), (s.running_var, &s.var)] {
            for (r, b) in ws.tensor_mut(id).data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { slope: pb.filled(&format!("{name}.weight"), &[channels], 0.25)? })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let a = g.param(ws, self.slope);
        g.prelu(x, a)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, init: Init) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(match init {
            Init::Default => Self {
                w: pb.uniform(&format!("{name}.weight"), &[output, input], bound)?,
                b: pb.uniform(&format!("{name}.bias"), &[output], bound)?,
            },
            Init::Zeros => Self {
                w: pb.filled(&format!("{name}.weight"), &[output, input], 0.0)?,
                b: pb.filled(&format!("{name}.bias"), &[output], 0.0)?,
            },
        })
    }

    /// `x: [R, D] -> [R, O]`.
    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let w = g.param(ws, self.w);
        let b = g.param(ws, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Gru {
    pub params: [ParamId; 4],
    pub hidden: usize,
}

impl Gru {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            params: [
                pb.uniform(&format!("{name}.weight_ih"), &[3 * hidden, input], bound)?,
                pb.uniform(&format!("{name}.weight_hh"), &[3 * hidden, hidden], bound)?,
                pb.uniform(&format!("{name}.bias_ih"), &[3 * hidden], bound)?,
                pb.uniform(&format!("{name}.bias_hh"), &[3 * hidden], bound)?,
            ],
            hidden,
        })
    }

    fn vars(&self, g: &mut Graph, ws: &ModelWeights) -> [Var; 4] {
        self.params.map(|p| g.param(ws, p))
    }

    /// `x: [B, L, D] -> [B, L, H]`.
    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var, reverse: bool) -> Result<Var> {
        let w = self.vars(g, ws);
        g.gru(x, None, w, reverse)
    }
}

/// Forward and backward GRUs with outputs concatenated on the feature axis.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fwd: Gru::new(pb, &format!("{name}.fwd"), input, hidden)?, bwd: Gru::new(pb, &format!("{name}.bwd"), input, hidden)? })
    }

    pub fn forward(&self, g: &mut Graph, ws: &ModelWeights, x: Var) -> Result<Var> {
        let f = self.fwd.forward(g, ws, x, false)?;
        let b = self.bwd.forward(g, ws, x, true)?;
        g.concat(&[f, b], 2)
    }
}
