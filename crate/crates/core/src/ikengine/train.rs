//! Mini-batch training with Adam.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grads, IkSample, LossWeights, Mlp};
use crate::error::{Error, Result};
use crate::handmodel::KinematicModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of each mixed batch drawn from rotation-labeled samples.
    pub rotation_share: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            epochs: 10,
            seed: 0,
            rotation_share: 0.5,
        }
    }
}

/// Training samples, possibly regenerated every epoch.
pub trait SampleSource {
    /// Must be deterministic in `epoch`.
    fn epoch_samples(&self, epoch: usize) -> Cow<'_, [IkSample]>;
}

/// A fixed set of samples reused every epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<IkSample>,
}

impl SampleSource for Dataset {
    fn epoch_samples(&self, _epoch: usize) -> Cow<'_, [IkSample]> {
        Cow::Borrowed(&self.samples)
    }
}

impl SampleSource for [IkSample] {
    fn epoch_samples(&self, _epoch: usize) -> Cow<'_, [IkSample]> {
        Cow::Borrowed(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub cos: f64,
    pub l2: f64,
    pub xyz: f64,
    pub norm: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; params], v: vec![0.0; params], t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        for block in net.param_blocks_mut() {
            for p in block.iter_mut() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Batches as sample indices. When both rotation-labeled and position-only
/// samples are present each batch mixes them at `rotation_share`; once one
/// pool runs out the other fills the batch. Batches smaller than two are dropped.
fn plan_batches(samples: &[IkSample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (mut rot, mut pos): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].rotations.is_some());
    rot.shuffle(rng);
    pos.shuffle(rng);
    let b = cfg.batch_size;
    let want_rot = if rot.is_empty() {
        0
    } else if pos.is_empty() {
        b
    } else {
        ((b as f64 * cfg.rotation_share).round() as usize).clamp(1, b - 1)
    };
    let (mut ri, mut pi) = (0, 0);
    let mut batches = Vec::new();
    while ri < rot.len() || pi < pos.len() {
        let mut take_r = want_rot.min(rot.len() - ri);
        let take_p = (b - take_r).min(pos.len() - pi);
        take_r = (b - take_p).min(rot.len() - ri);
        let mut batch: Vec<usize> = rot[ri..ri + take_r].to_vec();
        batch.extend_from_slice(&pos[pi..pi + take_p]);
        ri += take_r;
        pi += take_p;
        if batch.len() >= 2 {
            batches.push(batch);
        }
    }
    batches
}

/// Train in place. Deterministic for a fixed seed and sample source.
pub fn train(
    net: &mut Mlp,
    source: &(impl SampleSource + ?Sized),
    model: &KinematicModel,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(net, source, model, cfg, |_| {})
}

/// As [`train`], reporting each finished epoch.
pub fn train_with(
    net: &mut Mlp,
    source: &(impl SampleSource + ?Sized),
    model: &KinematicModel,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainHistory> {
    if cfg.batch_size < 2 {
        return Err(Error::Contract("batch size must be at least 2".into()));
    }
    if !(cfg.learning_rate > 0.0) || !(0.0..=1.0).contains(&cfg.rotation_share) {
        return Err(Error::Contract("invalid learning rate or rotation share".into()));
    }
    let mut adam = Adam::new(net.param_count(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = TrainHistory::default();
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        let samples = source.epoch_samples(epoch);
        if samples.len() < 2 {
            return Err(Error::Contract(format!("epoch {epoch} has {} samples, need at least 2", samples.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let batches = plan_batches(&samples, cfg, &mut rng);
        let mut stats = EpochStats {
            epoch,
            learning_rate: lr,
            loss: 0.0,
            cos: 0.0,
            l2: 0.0,
            xyz: 0.0,
            norm: 0.0,
            batches: batches.len(),
        };
        let mut seen = 0.0;
        for batch in &batches {
            let refs: Vec<&IkSample> = batch.iter().map(|&i| &samples[i]).collect();
            let (terms, grads, fwd) = loss_and_grads(net, &refs, model, &cfg.weights)?;
            if !terms.total.is_finite() {
                return Err(Error::NoSolution(format!("training diverged in epoch {epoch}")));
            }
            net.update_running_stats(&fwd);
            adam.step(net, &grads.to_flat(), lr);
            let n = refs.len() as f64;
            seen += n;
            stats.loss += terms.total * n;
            stats.cos += terms.cos * n;
            stats.l2 += terms.l2 * n;
            stats.xyz += terms.xyz * n;
            stats.norm += terms.norm * n;
        }
        for v in [&mut stats.loss, &mut stats.cos, &mut stats.l2, &mut stats.xyz, &mut stats.norm] {
            *v /= seen;
        }
        on_epoch(&stats);
        history.epochs.push(stats);
        lr *= cfg.lr_decay;
    }
    Ok(history)
}
