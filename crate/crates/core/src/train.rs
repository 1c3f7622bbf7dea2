//! Alternating critic/generator training, evaluation and the energy estimate.
//!
//! Each batch runs one generator forward pass, then `critic_ratio` critic
//! updates against the (detached) predictions, then one generator update
//! through the frozen critic. Only the EM distance with the transport term
//! enabled uses the critic.
//!
//! # Log schema
//!
//! One [`EpochLog`] JSON object per line: `epoch`, `steps`, mean generator
//! `terms` over the epoch, mean `critic_loss`, `critic_gap` and
//! `critic_penalty` (zero when no critic is trained), and the validation
//! `val_mae` (null without validation samples).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::energy::OpCounts;
use crate::error::{Error, Result};
use crate::global::{f_net_loss, Critic, CriticArch, DistanceKind};
use crate::losses::{joint_loss, JointTerms, LossConfig};
use crate::metrics::{self, MetricsReport};
use crate::model::{ModelConfig, SaliencyNet};
use crate::optim::Adam;
use crate::parallel;
use crate::params::{apply_updates, Binder, ParamStore, Session};
use crate::spike::dataset::{prepare_all, Dataset, Prepared};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub time_steps: usize,
    pub alpha: f64,
    pub penalty_coef: f64,
    pub critic_ratio: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Expected square input side; checked against the data when set.
    pub input_size: Option<usize>,
    /// Transport/distance term on or off.
    pub sg: bool,
    pub distance: DistanceKind,
    pub critic: CriticArch,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 2e-5,
            batch_size: 2,
            time_steps: 5,
            alpha: 1.0,
            penalty_coef: 10.0,
            critic_ratio: 1,
            epochs: 10,
            seed: 0,
            input_size: None,
            sg: true,
            distance: DistanceKind::Em,
            critic: CriticArch::Conv,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("lr must be positive, got {}", self.lr)));
        }
        if self.time_steps == 0 {
            return Err(Error::Param("time_steps must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Param(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.penalty_coef >= 0.0) {
            return Err(Error::Param(format!("penalty_coef must be nonnegative, got {}", self.penalty_coef)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            sg: self.sg,
            distance: self.distance,
        }
    }

    /// Whether the critic takes part in training.
    pub fn uses_critic(&self) -> bool {
        self.sg && self.distance == DistanceKind::Em
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub terms: JointTerms,
    pub critic_loss: f64,
    pub critic_gap: f64,
    pub critic_penalty: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub terms: JointTerms,
    pub critic_loss: f64,
    pub critic_gap: f64,
    pub critic_penalty: f64,
}

/// Network, critic, their parameters and optimiser state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: SaliencyNet,
    pub critic: Critic,
    pub gen: ParamStore,
    pub critic_store: ParamStore,
    gen_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`. The critic needs the map size
    /// only for the linear architecture.
    pub fn new(cfg: TrainConfig, map_pixels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gen = ParamStore::new();
        let net = SaliencyNet::new(&mut gen, cfg.model, &mut rng)?;
        let mut critic_store = ParamStore::new();
        let critic = match cfg.critic {
            CriticArch::Conv => Critic::conv(&mut critic_store, &mut rng)?,
            CriticArch::Linear => Critic::linear(&mut critic_store, map_pixels)?,
        };
        Ok(Self {
            gen_opt: Adam::new(cfg.lr, cfg.weight_decay)?,
            critic_opt: Adam::new(cfg.lr, cfg.weight_decay)?,
            cfg,
            net,
            critic,
            gen,
            critic_store,
            rng,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One critic update on fixed target and prediction maps `[B, 1, H, W]`.
    /// Returns the loss, the transport gap and the penalty.
    pub fn critic_step(&mut self, gt: &Tensor, pred: &Tensor) -> Result<(f64, f64, f64)> {
        critic_update(
            &self.critic,
            &mut self.critic_store,
            &mut self.critic_opt,
            gt,
            pred,
            self.cfg.penalty_coef,
            &mut self.rng,
            self.step,
        )
    }

    /// Critic update(s) followed by a generator update on one batch.
    pub fn train_batch(&mut self, batch: &[&Prepared]) -> Result<BatchStats> {
        let (frames, gt) = stack_batch(batch)?;
        let mut stats = BatchStats::default();
        let gen = &self.gen;
        let mut s = Session::new(gen, true);
        let x = s.graph.constant(frames);
        let out = self.net.forward(&mut s, x)?;
        if self.cfg.uses_critic() && self.cfg.critic_ratio > 0 {
            let pred = s.graph.value(out.readout).clone();
            let k = self.cfg.critic_ratio as f64;
            for _ in 0..self.cfg.critic_ratio {
                let (loss, gap, pen) = critic_update(
                    &self.critic,
                    &mut self.critic_store,
                    &mut self.critic_opt,
                    &gt,
                    &pred,
                    self.cfg.penalty_coef,
                    &mut self.rng,
                    self.step,
                )?;
                stats.critic_loss += loss / k;
                stats.critic_gap += gap / k;
                stats.critic_penalty += pen / k;
            }
        }
        let mut frozen = Binder::frozen(&self.critic_store);
        let gt_v = s.graph.constant(gt);
        let critic = self.cfg.uses_critic().then_some((&self.critic, &mut frozen));
        let (loss, terms) = joint_loss(&mut s.graph, out.readout, gt_v, critic, &self.cfg.loss())?;
        if let Some(term) = terms.non_finite() {
            return Err(Error::Diverged {
                step: self.step,
                term: term.into(),
            });
        }
        s.graph.backward(loss)?;
        let grads = s.grads();
        let updates = s.take_buffer_updates();
        drop(s);
        self.gen_opt.step(&mut self.gen, &grads);
        apply_updates(&mut self.gen, updates)?;
        self.step += 1;
        stats.terms = terms;
        Ok(stats)
    }

    /// One pass over `train` in a seeded shuffled order.
    pub fn train_epoch(&mut self, epoch: usize, train: &[Prepared], val: &[Prepared]) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = BatchStats::default();
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let st = self.train_batch(&batch)?;
            add_stats(&mut acc, &st);
            batches += 1;
        }
        let n = batches.max(1) as f64;
        scale_stats(&mut acc, 1.0 / n);
        let val_mae = if val.is_empty() {
            None
        } else {
            Some(evaluate(&self.net, &self.gen, val, false)?.report.mae)
        };
        Ok(EpochLog {
            epoch,
            steps: batches,
            terms: acc.terms,
            critic_loss: acc.critic_loss,
            critic_gap: acc.critic_gap,
            critic_penalty: acc.critic_penalty,
            val_mae,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn critic_update(
    critic: &Critic,
    store: &mut ParamStore,
    opt: &mut Adam,
    gt: &Tensor,
    pred: &Tensor,
    penalty_coef: f64,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let out = f_net_loss(&mut g, critic, &mut b, gt, pred, penalty_coef, rng)?;
    let loss = g.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            term: "critic".into(),
        });
    }
    g.backward(out.loss)?;
    let grads = b.grads(&g);
    opt.step(store, &grads);
    Ok((loss, out.gap, out.penalty))
}

fn add_stats(acc: &mut BatchStats, s: &BatchStats) {
    let (a, t) = (&mut acc.terms, &s.terms);
    a.bce += t.bce;
    a.iou_loss += t.iou_loss;
    a.ssim_loss += t.ssim_loss;
    a.original += t.original;
    a.mse += t.mse;
    a.d_em += t.d_em;
    a.distance += t.distance;
    a.total += t.total;
    acc.critic_loss += s.critic_loss;
    acc.critic_gap += s.critic_gap;
    acc.critic_penalty += s.critic_penalty;
}

fn scale_stats(acc: &mut BatchStats, k: f64) {
    let a = &mut acc.terms;
    for v in [
        &mut a.bce,
        &mut a.iou_loss,
        &mut a.ssim_loss,
        &mut a.original,
        &mut a.mse,
        &mut a.d_em,
        &mut a.distance,
        &mut a.total,
        &mut acc.critic_loss,
        &mut acc.critic_gap,
        &mut acc.critic_penalty,
    ] {
        *v *= k;
    }
}

/// Frames `[T, B, 1, H, W]` and masks `[B, 1, H, W]` for a batch.
pub fn stack_batch(batch: &[&Prepared]) -> Result<(Tensor, Tensor)> {
    let first = batch.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let fs = first.frames.shape().to_vec();
    let (t, h, w) = (fs[0], fs[2], fs[3]);
    let plane = h * w;
    let b = batch.len();
    let mut frames = vec![0.0; t * b * plane];
    let mut gt = Vec::with_capacity(b * plane);
    for (i, p) in batch.iter().enumerate() {
        if p.frames.shape() != fs.as_slice() {
            return Err(Error::shape("stack_batch", format!("{:?} vs {:?}", p.frames.shape(), fs)));
        }
        for step in 0..t {
            let dst = (step * b + i) * plane;
            frames[dst..dst + plane].copy_from_slice(&p.frames.data()[step * plane..(step + 1) * plane]);
        }
        let m = p
            .gt
            .as_ref()
            .ok_or_else(|| Error::Input(format!("sample `{}` has no mask", p.id)))?;
        gt.extend_from_slice(m);
    }
    Ok((Tensor::new(&[t, b, 1, h, w], frames)?, Tensor::new(&[b, 1, h, w], gt)?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gen: ParamStore,
    pub critic: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Train on the dataset's training split, validating on the rest.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog) -> Result<()>) -> Result<TrainOutcome> {
    let (train_s, val_s) = dataset.split();
    if train_s.is_empty() {
        return Err(Error::Input("dataset has no training samples".into()));
    }
    let train_p = prepare_all(&train_s, cfg.time_steps)?;
    let val_p = prepare_all(&val_s, cfg.time_steps)?;
    let [h, w] = map_size(&train_p[0]);
    if let Some(side) = cfg.input_size {
        if h != side || w != side {
            return Err(Error::Param(format!("input_size {side} does not match {w}x{h} data")));
        }
    }
    let mut trainer = Trainer::new(cfg.clone(), h * w)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let e = trainer.train_epoch(epoch, &train_p, &val_p)?;
        on_epoch(&e)?;
        log.push(e);
    }
    Ok(TrainOutcome {
        gen: trainer.gen,
        critic: trainer.critic_store,
        log,
    })
}

fn map_size(p: &Prepared) -> [usize; 2] {
    let s = p.frames.shape();
    [s[2], s[3]]
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Vec<f64>>,
    pub step_maps: Vec<Vec<Vec<f64>>>,
}

/// Readout map (mean over steps of the per-step saliency) and the per-step maps.
pub fn predict(net: &SaliencyNet, store: &ParamStore, frames: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (pred, steps, _) = forward_eval(net, store, frames, false)?;
    Ok((pred, steps))
}

fn forward_eval(net: &SaliencyNet, store: &ParamStore, frames: &Tensor, count: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>, Option<OpCounts>)> {
    let s0 = frames.shape();
    if s0.len() != 4 {
        return Err(Error::shape("predict", format!("frames must be [T,1,H,W], got {s0:?}")));
    }
    let (t, h, w) = (s0[0], s0[2], s0[3]);
    let x = frames.clone().reshape(&[t, 1, 1, h, w])?;
    let mut s = Session::new(store, false);
    if count {
        s.enable_op_counts();
    }
    let xv = s.graph.constant(x);
    let out = net.forward(&mut s, xv)?;
    let pred = s.graph.value(out.readout).data().to_vec();
    let steps = s.graph.value(out.step_maps).data().chunks(h * w).map(<[f64]>::to_vec).collect();
    Ok((pred, steps, s.op_counts().cloned()))
}

/// Metrics over prepared samples, which must all carry masks. Samples are
/// processed in parallel unless serial mode is set; results are reduced in
/// sample order.
pub fn evaluate(net: &SaliencyNet, store: &ParamStore, samples: &[Prepared], with_energy: bool) -> Result<Evaluation> {
    let missing: Vec<&str> = samples.iter().filter(|p| p.gt.is_none()).map(|p| p.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("missing masks for samples: {}", missing.join(", "))));
    }
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let [h, w] = map_size(&samples[0]);
    let outs = parallel::map_indexed(samples.len(), |i| forward_eval(net, store, &samples[i].frames, with_energy));
    let mut predictions = Vec::with_capacity(samples.len());
    let mut step_maps = Vec::with_capacity(samples.len());
    let mut energy = 0.0;
    for o in outs {
        let (p, st, counts) = o?;
        predictions.push(p);
        step_maps.push(st);
        if let Some(c) = counts {
            energy += c.energy_mj();
        }
    }
    let gts: Vec<Vec<f64>> = samples.iter().map(|p| p.gt.clone().unwrap_or_default()).collect();
    let classes: Vec<String> = samples.iter().map(|p| p.scenario.to_string()).collect();
    let mut report = metrics::summarise(&predictions, &gts, &classes, w, h)?;
    if with_energy {
        report.energy_mj = Some(energy / samples.len() as f64);
    }
    Ok(Evaluation {
        report,
        predictions,
        step_maps,
    })
}

/// Instrumented forward pass over `frames [T, 1, H, W]`.
pub fn energy_estimate(net: &SaliencyNet, store: &ParamStore, frames: &Tensor) -> Result<OpCounts> {
    let (_, _, counts) = forward_eval(net, store, frames, true)?;
    Ok(counts.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike::synthetic::{Scenario, SyntheticConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            time_steps: 2,
            epochs: 1,
            model: ModelConfig {
                base_channels: 2,
                attention: crate::micro::AttentionConfig {
                    heads: 2,
                    ..Default::default()
                },
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        let cfg = SyntheticConfig::sized(16, 16, 24);
        Dataset::synthesize(&[Scenario::ConstantLight], 5, &cfg, 4, 1.0).unwrap()
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train(&tiny_data(), &cfg, |_| Ok(())).unwrap();
        let fresh = Trainer::new(cfg, 256).unwrap();
        assert_eq!(out.gen.to_bytes(), fresh.gen.to_bytes());
        assert_eq!(out.critic.to_bytes(), fresh.critic_store.to_bytes());
    }

    #[test]
    fn generator_step_leaves_critic_untouched() {
        let ds = tiny_data();
        let (tr, _) = ds.split();
        let prepared = prepare_all(&tr, 2).unwrap();
        let cfg = TrainConfig { critic_ratio: 0, ..tiny_cfg() };
        let mut t = Trainer::new(cfg, 256).unwrap();
        let before_c = t.critic_store.to_bytes();
        let before_g = t.gen.to_bytes();
        t.train_batch(&[&prepared[0], &prepared[1]]).unwrap();
        assert_eq!(t.critic_store.to_bytes(), before_c);
        assert_ne!(t.gen.to_bytes(), before_g);

        let (_, gt) = stack_batch(&[&prepared[0]]).unwrap();
        let before_g = t.gen.to_bytes();
        t.critic_step(&gt, &gt.map(|v| 0.5 * v + 0.25)).unwrap();
        assert_eq!(t.gen.to_bytes(), before_g);
        assert_ne!(t.critic_store.to_bytes(), before_c);
    }

    #[test]
    fn missing_masks_are_listed() {
        let mut ds = tiny_data();
        ds.samples[1].masks = None;
        let samples: Vec<_> = ds.samples.iter().collect();
        let p = prepare_all(&samples, 2).unwrap();
        let t = Trainer::new(tiny_cfg(), 256).unwrap();
        let err = evaluate(&t.net, &t.gen, &p, false).unwrap_err().to_string();
        assert!(err.contains(&ds.samples[1].id));
    }
}
