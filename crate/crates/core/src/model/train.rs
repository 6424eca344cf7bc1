//! AdamW optimization and the deterministic training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compute_loss, InstanceTarget, LossTerms, LossWeights};
use super::{Spotter, SpotterConfig};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Parameterized, Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not biases or norms).
    pub weight_decay: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    /// Cosine decay to `min_lr_ratio · lr` over this many steps; 0 keeps the
    /// rate constant after warm-up.
    pub decay_steps: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 50,
            decay_steps: 0,
            min_lr_ratio: 0.05,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for the update that follows `step` completed updates.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if self.decay_steps > 0 {
            let t = (step as f64 / self.decay_steps as f64).min(1.0);
            self.min_lr_ratio
                + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

/// AdamW state: first and second moments per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: usize,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update; parameters without a gradient entry see a zero gradient.
    /// Returns `(lr, pre-clip gradient norm)`.
    pub fn update<M: Parameterized<T>>(
        &mut self,
        model: &mut M,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<(f64, f64)> {
        let c = self.config;
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, g)| !g.is_finite())
                .map(|(n, _)| n.as_str())
                .collect();
            return Err(Error::non_finite(format!("gradients ({})", bad.join(", "))));
        }
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        let clip = T::from_f64_lossy(clip);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            let len = p.value.len();
            let m = m_all
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = v_all
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let decay = if p.value.shape().len() >= 2 {
                T::from_f64_lossy(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let g = grads.get(&p.name);
            let (m, v, w) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for i in 0..len {
                let gi = g.map_or(T::zero(), |g| g.data()[i] * clip);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                w[i] = w[i] - decay * w[i] - step_size * m[i] / denom;
            }
        });
        Ok((lr, norm))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 2,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossTerms,
    pub lr: f64,
    pub grad_norm: f64,
    pub batch: Vec<usize>,
    /// Wall-clock seconds; the only field that varies between reruns.
    pub wall_time: f64,
}

/// Dataset indices for `step`: every index appears once per epoch, in an
/// order fixed by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: usize, len: usize, batch: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut cached: Option<(usize, Vec<usize>)> = None;
    Ok((0..batch)
        .map(|i| {
            let pos = step * batch + i;
            let epoch = pos / len;
            if cached.as_ref().is_none_or(|c| c.0 != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch as u64 + 1);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("permutation").1[pos % len]
        })
        .collect())
}

/// Model plus optimizer state; everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Spotter<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
}

const OPT_M: &str = "optimizer.m.";
const OPT_V: &str = "optimizer.v.";

impl<T: Scalar> Trainer<T> {
    pub fn new(model_config: SpotterConfig, config: TrainConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        let model = Spotter::new(model_config, config.seed)?;
        Ok(Self {
            model,
            optimizer: AdamW::new(config.optimizer),
            config,
            step: 0,
        })
    }

    /// Loss of one image and its parameter gradients.
    pub fn image_gradients(
        &self,
        image: &Tensor<T>,
        targets: &[InstanceTarget],
    ) -> Result<(LossTerms, BTreeMap<String, Tensor<T>>)> {
        let tape = Tape::new();
        let out = self.model.forward(&tape, image)?;
        let loss = compute_loss(&tape, &out, targets, &self.model.config, &self.config.loss)?;
        Ok((loss.terms, tape.backward(loss.total).into_param_grads()))
    }

    /// One update over the batch chosen for the current step.
    pub fn train_step(
        &mut self,
        images: &[Tensor<T>],
        targets: &[Vec<InstanceTarget>],
    ) -> Result<StepRecord> {
        if images.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} target lists",
                images.len(),
                targets.len()
            )));
        }
        let start = Instant::now();
        let batch = batch_indices(
            self.config.seed,
            self.step,
            images.len(),
            self.config.batch_size,
        )?;
        let scale = 1.0 / batch.len() as f64;
        let mut sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut terms = LossTerms::default();
        for &i in &batch {
            let (t, grads) = self.image_gradients(&images[i], &targets[i])?;
            accumulate_terms(&mut terms, &t, scale);
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        let s = T::from_f64_lossy(scale);
        for g in sum.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
        let (lr, grad_norm) = self.optimizer.update(&mut self.model, &sum)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: terms,
            lr,
            grad_norm,
            batch,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    /// Parameters, optimizer moments and run state in one checkpoint.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_params(&self.model);
        for (prefix, map) in [(OPT_M, &self.optimizer.m), (OPT_V, &self.optimizer.v)] {
            for (name, t) in map {
                ckpt.tensors.insert(format!("{prefix}{name}"), t.cast());
            }
        }
        ckpt.meta = serde_json::json!({
            "model": serde_json::to_value(&self.model.config)?,
            "train": serde_json::to_value(&self.config)?,
            "step": self.step,
            "optimizer_step": self.optimizer.step,
        });
        Ok(ckpt)
    }

    /// Restores a run from [`Trainer::checkpoint`] output. `steps` in the
    /// stored config may be replaced to extend the run.
    pub fn from_checkpoint(ckpt: &Checkpoint, steps: Option<usize>) -> Result<Self> {
        let model_config: SpotterConfig = meta_field(ckpt, "model")?;
        let mut config: TrainConfig = meta_field(ckpt, "train")?;
        if let Some(s) = steps {
            config.steps = s;
        }
        let step: usize = meta_field(ckpt, "step")?;
        let mut trainer = Self::new(model_config, config)?;
        ckpt.apply_to(&mut trainer.model)?;
        trainer.step = step;
        trainer.optimizer.step = meta_field(ckpt, "optimizer_step")?;
        for (name, t) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix(OPT_M) {
                trainer.optimizer.m.insert(p.to_string(), t.cast());
            } else if let Some(p) = name.strip_prefix(OPT_V) {
                trainer.optimizer.v.insert(p.to_string(), t.cast());
            }
        }
        Ok(trainer)
    }
}

/// Model configuration stored in a checkpoint's metadata.
pub fn checkpoint_model_config(ckpt: &Checkpoint) -> Result<SpotterConfig> {
    meta_field(ckpt, "model")
}

fn meta_field<D: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<D> {
    let v = ckpt
        .meta
        .get(key)
        .ok_or_else(|| Error::CheckpointMismatch {
            name: key.into(),
            message: "missing from checkpoint metadata".into(),
        })?;
    Ok(serde_json::from_value(v.clone())?)
}

fn accumulate_terms(acc: &mut LossTerms, t: &LossTerms, scale: f64) {
    acc.total += t.total * scale;
    acc.instance += t.instance * scale;
    acc.character += t.character * scale;
    acc.points += t.points * scale;
    acc.bbox += t.bbox * scale;
    acc.proposal_class += t.proposal_class * scale;
    acc.proposal_points += t.proposal_points * scale;
}
