//! Toy-scale training loop for both stages.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::ipe::{
    cleanliness_score, estimate_lambda, snr_features, store_ipe_metadata, CleanlinessStats, SpeakerEmbedding,
    SpeakerEncoder, ToySpeakerEncoder,
};
use crate::model::{default_chunk_frames, Enhancer, EMBED_DIM, Mbtfnet, SpecLayout, SubbandFrontend, SveBands};
use crate::nn::graph::BatchStats;
use crate::nn::layers::{update_running_stats, BN_MOMENTUM};
use crate::nn::optim::clip_grad_norm;
use crate::nn::{Adam, Graph, LrSchedule, ModelWeights, Tensor, Var};
use crate::training::data::{coin, TrainItem};
use crate::training::loss::{si_snr, LossRecord, LossReport, Stage, SNR_LOSS_WEIGHT};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    /// Evaluate (after batch-norm recalibration) every this many steps; 0 disables.
    pub eval_every: u64,
    /// Stop early once the mean SVE gain over the input reaches this many dB.
    pub target_gain_db: Option<f64>,
    pub backing_prob: f64,
}

impl TrainConfig {
    /// Settings for desk-scale runs: the verbatim schedule shape with a peak of 3e-3.
    pub fn toy() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            schedule: LrSchedule::with_peak(1e-3, 100, 3e-3),
            clip_norm: 10.0,
            eval_every: 50,
            target_gain_db: None,
            backing_prob: 0.5,
        }
    }
}

/// Mean SI-SNR values over the training items at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    /// SVE: the noisy input. IPE: the SVE output on the backing mixtures.
    pub baseline_db: f64,
    pub output_db: f64,
}

impl EvalPoint {
    pub fn gain_db(&self) -> f64 {
        self.output_db - self.baseline_db
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Trained weights, with λ_t and the cleanliness statistics in the metadata after IPE training.
    pub weights: ModelWeights,
    pub curve: Vec<LossRecord>,
    pub evals: Vec<EvalPoint>,
    pub lambda_t: Option<f64>,
    pub stats: Option<CleanlinessStats>,
    pub steps_run: u64,
    adam: Adam,
}

impl TrainOutcome {
    /// Weights plus optimizer moments and step count.
    pub fn checkpoint(&self) -> Result<ModelWeights> {
        let mut ws = self.weights.clone();
        self.adam.export_into(&mut ws)?;
        Ok(ws)
    }
}

/// Trains one stage with batch size one. `ws` are the starting weights; the IPE stage
/// requires them because the SVE part is frozen.
pub fn train_toy(
    stage: Stage,
    model: &Mbtfnet,
    ws: Option<ModelWeights>,
    items: &[TrainItem],
    tc: &TrainConfig,
    mut log: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::config("training needs at least one item"));
    }
    let ws = match (stage, ws) {
        (_, Some(ws)) => ws,
        (Stage::Sve, None) => Mbtfnet::init(&model.cfg, tc.seed)?.1,
        (Stage::Ipe, None) => return Err(Error::config("the IPE stage needs trained SVE weights")),
    };
    match stage {
        Stage::Sve => SveTrainer::new(model, items)?.run(ws, tc, &mut log),
        Stage::Ipe => IpeTrainer::new(model, &ws, items)?.run(ws, tc, &mut log),
    }
}

/// Replaces every running batch-norm statistic by the average of the batch statistics
/// recorded in `passes`.
fn recalibrate(ws: &mut ModelWeights, passes: &[Vec<BatchStats>]) {
    let Some(first) = passes.first() else { return };
    let n = passes.len() as f64;
    for (i, s) in first.iter().enumerate() {
        let mut mean = vec![0.0; s.mean.len()];
        let mut var = vec![0.0; s.var.len()];
        for p in passes {
            mean.iter_mut().zip(&p[i].mean).for_each(|(a, b)| *a += b / n);
            var.iter_mut().zip(&p[i].var).for_each(|(a, b)| *a += b / n);
        }
        ws.tensor_mut(s.running_mean).data_mut().copy_from_slice(&mean);
        ws.tensor_mut(s.running_var).data_mut().copy_from_slice(&var);
    }
}

/// Shuffled item order, reshuffled each epoch.
struct Order {
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    n: usize,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), queue: Vec::new(), n }
    }

    fn next(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = (0..self.n).collect();
            self.queue.shuffle(&mut self.rng);
        }
        self.queue.pop().expect("refilled above")
    }
}

fn apply_step(
    g: &Graph,
    loss: Var,
    ws: &mut ModelWeights,
    adam: &mut Adam,
    lr: f64,
    clip: f64,
) -> Result<()> {
    let grads = g.backward(loss)?;
    let mut pg = g.param_grads(&grads);
    clip_grad_norm(&mut pg, clip);
    adam.step(ws, &pg, lr)?;
    update_running_stats(ws, g.batch_stats(), BN_MOMENTUM);
    Ok(())
}

struct Prepared {
    y: Tensor,
    clean_spec: Arc<Vec<f64>>,
    clean_wave: Arc<Vec<f64>>,
    layout: SpecLayout,
}

fn prepare(front: &SubbandFrontend, noisy: &AudioBuffer, clean: &AudioBuffer) -> Result<Prepared> {
    if noisy.len() != clean.len() {
        return Err(Error::shape(format!("noisy and clean lengths {} vs {}", noisy.len(), clean.len())));
    }
    let (y, layout) = front.analyze(noisy)?;
    let (c, _) = front.analyze(clean)?;
    Ok(Prepared {
        y,
        clean_spec: Arc::new(c.data().to_vec()),
        clean_wave: Arc::new(clean.samples().to_vec()),
        layout,
    })
}

struct SveTrainer<'a> {
    model: &'a Mbtfnet,
    front: SubbandFrontend,
    items: &'a [TrainItem],
    data: Vec<Prepared>,
}

impl<'a> SveTrainer<'a> {
    fn new(model: &'a Mbtfnet, items: &'a [TrainItem]) -> Result<Self> {
        let front = model.frontend()?;
        let data = items.iter().map(|it| prepare(&front, &it.noisy, &it.clean)).collect::<Result<_>>()?;
        Ok(Self { model, front, items, data })
    }

    fn run(&self, mut ws: ModelWeights, tc: &TrainConfig, log: &mut dyn FnMut(&LossRecord)) -> Result<TrainOutcome> {
        let mut adam = Adam::default();
        let mut order = Order::new(self.items.len(), tc.seed);
        let mut out = Outcome::default();
        for step in 1..=tc.steps {
            let p = &self.data[order.next()];
            let lr = tc.schedule.lr(step);
            let mut g = Graph::new(true);
            let y = g.constant(p.y.clone());
            let sv = self.model.sve.forward(&mut g, &ws, y)?;
            let wave = g.linear_map(sv.x_s, self.front.wave_map(p.layout))?;
            let neg = g.neg_si_snr(wave, p.clean_wave.clone())?;
            let cm = g.squared_error(sv.x_s, p.clean_spec.clone(), (p.clean_spec.len() / 2) as f64)?;
            let total = g.add(neg, cm)?;
            let report =
                LossReport::compose(Stage::Sve, -g.value(neg).data()[0], g.value(cm).data()[0], 0.0);
            apply_step(&g, total, &mut ws, &mut adam, lr, tc.clip_norm)?;
            out.record(LossRecord { step, lr, report }, log);

            if tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.steps) {
                self.recalibrate(&mut ws)?;
                let e = self.evaluate(&ws, step)?;
                out.evals.push(e);
                if tc.target_gain_db.is_some_and(|t| e.gain_db() >= t) {
                    break;
                }
            }
        }
        Ok(out.finish(ws, adam, None, None))
    }

    fn recalibrate(&self, ws: &mut ModelWeights) -> Result<()> {
        let mut passes = Vec::with_capacity(self.data.len());
        for p in &self.data {
            let mut g = Graph::new(true);
            let y = g.constant(p.y.clone());
            self.model.sve.forward(&mut g, ws, y)?;
            passes.push(g.batch_stats().to_vec());
        }
        recalibrate(ws, &passes);
        Ok(())
    }

    fn evaluate(&self, ws: &ModelWeights, step: u64) -> Result<EvalPoint> {
        let enh = Enhancer::new(self.model, ws)?;
        let (mut base, mut outp) = (0.0, 0.0);
        for it in self.items {
            let b = enh.sve_bands(&it.noisy)?;
            let x = self.front.synthesize(&b.x_s, &b.layout)?;
            base += si_snr(it.noisy.samples(), it.clean.samples())?;
            outp += si_snr(x.samples(), it.clean.samples())?;
        }
        let n = self.items.len() as f64;
        Ok(EvalPoint { step, baseline_db: base / n, output_db: outp / n })
    }
}

/// One mixture variant with the frozen SVE outputs cached.
struct IpeSample {
    bands: SveBands,
    feats: Tensor,
    raw_scores: Vec<f64>,
    clean_spec: Arc<Vec<f64>>,
    clean_wave: Arc<Vec<f64>>,
}

struct IpeTrainer<'a> {
    model: &'a Mbtfnet,
    front: SubbandFrontend,
    /// `[plain, with backing]` per item; the second is absent when the item has no backing variant.
    samples: Vec<(IpeSample, Option<IpeSample>)>,
    enroll: Vec<SpeakerEmbedding>,
    stats: CleanlinessStats,
}

impl<'a> IpeTrainer<'a> {
    fn new(model: &'a Mbtfnet, ws: &ModelWeights, items: &'a [TrainItem]) -> Result<Self> {
        let enh = Enhancer::new(model, ws)?;
        let front = model.frontend()?;
        let sample = |noisy: &AudioBuffer, clean: &AudioBuffer| -> Result<IpeSample> {
            let p = prepare(&front, noisy, clean)?;
            let bands = enh.sve_bands(noisy)?;
            let clean_t = Tensor::new(p.layout.shape().to_vec(), p.clean_spec.to_vec())?;
            Ok(IpeSample {
                feats: snr_features(&bands.x_s, &bands.y)?,
                raw_scores: cleanliness_score(&clean_t, &bands.y)?,
                bands,
                clean_spec: p.clean_spec,
                clean_wave: p.clean_wave,
            })
        };
        let mut sem = ToySpeakerEncoder::new();
        let mut samples = Vec::with_capacity(items.len());
        let mut enroll = Vec::with_capacity(items.len());
        for it in items {
            let e = it.enroll.as_ref().ok_or_else(|| Error::config("IPE training items need an enrollment utterance"))?;
            enroll.push(sem.embed(e)?);
            let backing = it.noisy_backing.as_ref().map(|b| sample(b, &it.clean)).transpose()?;
            samples.push((sample(&it.noisy, &it.clean)?, backing));
        }
        let all: Vec<f64> = samples
            .iter()
            .flat_map(|(a, b)| a.raw_scores.iter().chain(b.iter().flat_map(|s| s.raw_scores.iter())))
            .copied()
            .collect();
        let stats = CleanlinessStats::from_scores(&all)?;
        Ok(Self { model, front, samples, enroll, stats })
    }

    fn run(&self, mut ws: ModelWeights, tc: &TrainConfig, log: &mut dyn FnMut(&LossRecord)) -> Result<TrainOutcome> {
        let frozen = Mbtfnet::sve_frozen_mask(&ws);
        let mut adam = Adam::default();
        let mut order = Order::new(self.samples.len(), tc.seed);
        let mut pick = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out = Outcome::default();
        for step in 1..=tc.steps {
            let i = order.next();
            let s = match &self.samples[i] {
                (_, Some(b)) if coin(&mut pick, tc.backing_prob) => b,
                (a, _) => a,
            };
            let lr = tc.schedule.lr(step);
            let mut g = Graph::new(true).with_frozen(frozen.clone());
            let (x_p, s_hat) = self.forward(&mut g, &ws, s, &self.enroll[i])?;
            let wave = g.linear_map(x_p, self.front.wave_map(s.bands.layout))?;
            let neg = g.neg_si_snr(wave, s.clean_wave.clone())?;
            let cm = g.squared_error(x_p, s.clean_spec.clone(), (s.clean_spec.len() / 2) as f64)?;
            let target: Vec<f64> = s.raw_scores.iter().map(|v| self.stats.target(*v)).collect();
            let t = target.len() as f64;
            let sm = g.squared_error(s_hat, Arc::new(target), t)?;
            let wsm = g.scale(sm, SNR_LOSS_WEIGHT);
            let total = g.add(neg, cm)?;
            let total = g.add(total, wsm)?;
            let report = LossReport::compose(
                Stage::Ipe,
                -g.value(neg).data()[0],
                g.value(cm).data()[0],
                g.value(sm).data()[0],
            );
            apply_step(&g, total, &mut ws, &mut adam, lr, tc.clip_norm)?;
            out.record(LossRecord { step, lr, report }, log);

            if tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.steps) {
                self.recalibrate(&mut ws, &frozen)?;
                out.evals.push(self.evaluate(&ws, step)?);
            }
        }
        let lambda_t = self.lambda_t(&ws)?;
        store_ipe_metadata(&mut ws, lambda_t, self.stats);
        Ok(out.finish(ws, adam, Some(lambda_t), Some(self.stats)))
    }

    fn forward(&self, g: &mut Graph, ws: &ModelWeights, s: &IpeSample, e: &SpeakerEmbedding) -> Result<(Var, Var)> {
        let x_s = g.constant(s.bands.x_s.clone());
        let z = g.constant(s.bands.z.clone());
        let a = g.constant(Tensor::new(vec![1, EMBED_DIM], e.as_slice().to_vec())?);
        let map = self.model.ipe.embed_to_map(g, ws, a)?;
        let x_p = self.model.ipe.pem_forward(g, ws, x_s, z, map)?;
        let feats = g.constant(s.feats.clone());
        let s_hat = self.model.ipe.snr.forward(g, ws, feats)?;
        Ok((x_p, s_hat))
    }

    fn variants(&self) -> impl Iterator<Item = (usize, &IpeSample)> {
        self.samples.iter().enumerate().flat_map(|(i, (a, b))| std::iter::once((i, a)).chain(b.iter().map(move |s| (i, s))))
    }

    /// Only the PEM normalizations are recalibrated; the SVE statistics stay frozen.
    fn recalibrate(&self, ws: &mut ModelWeights, frozen: &[bool]) -> Result<()> {
        let mut passes = Vec::new();
        for (i, s) in self.variants() {
            let mut g = Graph::new(true).with_frozen(frozen.to_vec());
            self.forward(&mut g, ws, s, &self.enroll[i])?;
            passes.push(g.batch_stats().to_vec());
        }
        recalibrate(ws, &passes);
        Ok(())
    }

    /// Mean SI-SNR of the SVE output and of the PE output on the backing mixtures (or the plain
    /// ones when no item has a backing variant).
    fn evaluate(&self, ws: &ModelWeights, step: u64) -> Result<EvalPoint> {
        let enh = Enhancer::new(self.model, ws)?;
        let (mut base, mut outp, mut n) = (0.0, 0.0, 0usize);
        let any_backing = self.samples.iter().any(|(_, b)| b.is_some());
        for (i, (a, b)) in self.samples.iter().enumerate() {
            let s = if any_backing {
                match b {
                    Some(b) => b,
                    None => continue,
                }
            } else {
                a
            };
            let x_s = self.front.synthesize(&s.bands.x_s, &s.bands.layout)?;
            let x_p = enh.personalize(&s.bands, &self.enroll[i])?;
            base += si_snr(x_s.samples(), &s.clean_wave)?;
            outp += si_snr(x_p.samples(), &s.clean_wave)?;
            n += 1;
        }
        Ok(EvalPoint { step, baseline_db: base / n as f64, output_db: outp / n as f64 })
    }

    /// Mean over every training chunk of the mean predicted score.
    fn lambda_t(&self, ws: &ModelWeights) -> Result<f64> {
        let cfg = &self.model.cfg;
        let chunk = default_chunk_frames(cfg.hop, cfg.num_bands);
        let enh = Enhancer::new(self.model, ws)?;
        let mut means = Vec::new();
        for (_, s) in self.variants() {
            let scores = enh.scores(&s.bands)?;
            means.extend(scores.chunks(chunk).map(|c| c.iter().sum::<f64>() / c.len() as f64));
        }
        estimate_lambda(&means)
    }
}

#[derive(Default)]
struct Outcome {
    curve: Vec<LossRecord>,
    evals: Vec<EvalPoint>,
}

impl Outcome {
    fn record(&mut self, r: LossRecord, log: &mut dyn FnMut(&LossRecord)) {
        log(&r);
        self.curve.push(r);
    }

    fn finish(self, weights: ModelWeights, adam: Adam, lambda_t: Option<f64>, stats: Option<CleanlinessStats>) -> TrainOutcome {
        TrainOutcome { weights, steps_run: self.curve.len() as u64, curve: self.curve, evals: self.evals, lambda_t, stats, adam }
    }
}
