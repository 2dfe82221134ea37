//! Adam optimizer and learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::nn::weights::{ModelWeights, ParamId, OPTIM_PREFIX};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure(&mut self, ws: &ModelWeights) {
        if self.m.len() != ws.len() {
            self.m = ws.ids().map(|id| vec![0.0; ws.tensor(id).numel()]).collect();
            self.v = self.m.clone();
        }
    }

    /// One bias-corrected update of the parameters that received gradients.
    pub fn step(&mut self, ws: &mut ModelWeights, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        self.ensure(ws);
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !ws.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = ws.tensor_mut(*id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape(format!("gradient for parameter {i} has wrong length")));
            }
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Appends moment estimates as optimizer entries of `ws` (used for checkpoints).
    pub fn export_into(&self, ws: &mut ModelWeights) -> Result<()> {
        let ids: Vec<ParamId> = ws.ids().collect();
        for (i, id) in ids.into_iter().enumerate().take(self.m.len()) {
            let name = ws.name(id).to_string();
            let shape = ws.tensor(id).shape().to_vec();
            ws.add(format!("{OPTIM_PREFIX}m/{name}"), Tensor::new(shape.clone(), self.m[i].clone())?, false)?;
            ws.add(format!("{OPTIM_PREFIX}v/{name}"), Tensor::new(shape, self.v[i].clone())?, false)?;
        }
        ws.set_metadata("optim.step", self.step.to_string());
        Ok(())
    }

    /// Restores moments stored by [`Adam::export_into`] for the parameters of `model`.
    pub fn import_from(model: &ModelWeights, checkpoint: &ModelWeights) -> Result<Self> {
        let mut a = Adam::default();
        a.step = checkpoint
            .metadata()
            .get("optim.step")
            .map(|s| s.parse().map_err(|_| Error::Format("bad optimizer step".into())))
            .transpose()?
            .unwrap_or(0);
        for id in model.ids() {
            let name = model.name(id);
            let n = model.tensor(id).numel();
            let fetch = |kind: &str| -> Result<Vec<f64>> {
                match checkpoint.get(&format!("{OPTIM_PREFIX}{kind}/{name}")) {
                    Some(t) if t.numel() == n => Ok(t.data().to_vec()),
                    Some(_) => Err(Error::Format(format!("optimizer state for {name} has wrong size"))),
                    None => Ok(vec![0.0; n]),
                }
            };
            a.m.push(fetch("m")?);
            a.v.push(fetch("v")?);
        }
        Ok(a)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Warm-up then inverse-square-root decay: `scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub d_model: f64,
    pub warmup: u64,
    pub scale: f64,
}

impl LrSchedule {
    pub fn new(d_model: f64, warmup: u64) -> Self {
        Self { d_model, warmup, scale: 1.0 }
    }

    /// Same shape with `scale` chosen so the value at `step == warmup` is `peak`.
    pub fn with_peak(d_model: f64, warmup: u64, peak: f64) -> Self {
        let unit = Self::new(d_model, warmup);
        Self { scale: peak / unit.lr(warmup), ..unit }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * self.d_model.powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = LrSchedule::new(64.0, 4000);
        let peak = s.lr(4000);
        assert!((peak - 64f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!(s.lr(3999) < peak && s.lr(4001) < peak);
        assert!((s.lr(16000) - peak / 2.0).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ws = ModelWeights::new("q");
        let id = ws.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), true).unwrap();
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g: Vec<f64> = ws.tensor(id).data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut ws, &[(id, g)], 0.01).unwrap();
        }
        assert!(ws.tensor(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ws = ModelWeights::new("q");
        let id = ws.add("x", Tensor::new(vec![3], vec![0.0; 3]).unwrap(), true).unwrap();
        let mut opt = Adam::default();
        opt.step(&mut ws, &[(id, vec![5.0, -0.1, 1e3])], 0.1).unwrap();
        for (v, sign) in ws.tensor(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn optimizer_state_survives_export() {
        let mut ws = ModelWeights::new("q");
        let id = ws.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let mut opt = Adam::default();
        opt.step(&mut ws, &[(id, vec![0.5, -0.5])], 0.01).unwrap();
        let mut ck = ws.clone();
        opt.export_into(&mut ck).unwrap();
        let back = Adam::import_from(&ws, &ck).unwrap();
        assert_eq!(back, opt);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut ws = ModelWeights::new("q");
        let id = ws.add("x", Tensor::zeros(&[2]), true).unwrap();
        let mut g = vec![(id, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1[0] - 0.6).abs() < 1e-15);
    }
}
