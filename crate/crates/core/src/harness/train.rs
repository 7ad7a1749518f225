use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, LoadMode};
use crate::error::{Error, Result};
use crate::init;
use crate::model::{Architecture, DenseModel, ModelSpec, Variant};
use crate::param::{sgd_step, Module};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::data::{gen_dataset, SyntheticScene};
use super::eval::{evaluate, Metrics};

/// Learning-rate multiplier applied at each decay epoch.
pub const LR_DECAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by 0.1.
    pub lr_decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub dataset_size: usize,
    /// Held-out scenes evaluated after training; 0 skips evaluation.
    pub eval_size: usize,
    pub image_size: usize,
    pub use_sac: bool,
    pub use_rfp: bool,
    pub rfp_steps: usize,
    pub shared_backbones: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 8,
            steps_per_epoch: 25,
            lr: 0.05,
            momentum: 0.9,
            lr_decay_epochs: vec![6],
            batch_size: 4,
            dataset_size: 64,
            eval_size: 16,
            image_size: 64,
            use_sac: true,
            use_rfp: true,
            rfp_steps: 2,
            shared_backbones: false,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.use_sac = v.use_sac;
        self.use_rfp = v.use_rfp;
        self.rfp_steps = v.rfp_steps;
        self.shared_backbones = v.shared_backbones;
        self
    }

    pub fn variant(&self) -> Variant {
        Variant {
            use_sac: self.use_sac,
            use_rfp: self.use_rfp,
            rfp_steps: self.rfp_steps,
            shared_backbones: self.shared_backbones,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.architecture.clone(),
            variant: self.variant(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Learning rate in effect at `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let epoch = (step.max(1) - 1) / self.steps_per_epoch.max(1);
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * LR_DECAY.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", format!("must be a positive number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        for (key, v) in [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("dataset_size", self.dataset_size),
            ("rfp_steps", self.rfp_steps),
        ] {
            if v == 0 {
                return fail(key, "must be at least 1".into());
            }
        }
        self.architecture.backbone().validate()?;
        let a = &self.architecture;
        if a.pyramid_width == 0 || (self.use_rfp && !a.pyramid_width.is_multiple_of(4)) {
            return fail(
                "architecture.pyramid_width",
                format!("must be a positive multiple of 4 with use_rfp, got {}", a.pyramid_width),
            );
        }
        if a.sac_rate < 2 {
            return fail("architecture.sac_rate", format!("must be at least 2, got {}", a.sac_rate));
        }
        let m = a.backbone().max_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return fail(
                "image_size",
                format!("must be a positive multiple of {m}, got {}", self.image_size),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DenseModel<f32>,
    pub metrics: Metrics,
}

/// Stacks the images and per-level masks of `scenes[idx]` into one batch.
pub fn batch(scenes: &[SyntheticScene], idx: &[usize]) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let images: Vec<_> = idx.iter().map(|&i| scenes[i].image.clone()).collect();
    let image = Tensor::stack(&images)?;
    let levels = scenes[idx[0]].masks.len();
    let masks = (0..levels)
        .map(|l| {
            let per: Vec<_> = idx.iter().map(|&i| scenes[i].masks[l].clone()).collect();
            Tensor::stack(&per)
        })
        .collect::<Result<_>>()?;
    Ok((image, masks))
}

/// Seed offsets so the data, the batch order and the held-out set draw from
/// unrelated streams.
const ORDER_STREAM: u64 = 0x006f_7264_6572;
pub const EVAL_STREAM: u64 = 0x6576_616c;

pub fn train(cfg: &TrainConfig) -> Result<Trained> {
    train_with(cfg, None, &mut |_, _| {})
}

/// Runs the schedule, calling `on_step(step, loss)` after every step. A
/// non-finite loss aborts with [`Error::NonFinite`] before any update is
/// applied for that step.
///
/// `start` replaces the seeded weights. A plain checkpoint may start a SAC
/// model: the SAC-only parameters take their conversion defaults.
pub fn train_with(
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<Trained> {
    cfg.validate()?;
    let scenes = gen_dataset(cfg.seed, cfg.dataset_size, cfg.image_size, &cfg.architecture)?;
    let mut model = DenseModel::<f32>::new(&cfg.spec(), cfg.seed)?;
    if let Some(ckpt) = start {
        ckpt.apply_to(&mut model, LoadMode::FillSacDefaults)?;
    }
    let mut order_rng = init::rng(cfg.seed ^ ORDER_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Metrics::default();

    for step in 1..=cfg.total_steps() {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().expect("refilled above"));
        }
        let (image, masks) = batch(&scenes, &idx)?;

        let mut tape = Tape::new();
        let x = tape.constant(image);
        let loss = model.loss(&mut tape, x, &masks)?;
        let value = tape.value(loss).data()[0];
        metrics.loss.push(value);
        on_step(step, value);
        if !value.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        model.accumulate(&grads)?;
        sgd_step(&mut model, cfg.lr_at(step) as f32, cfg.momentum as f32)?;
    }

    if cfg.eval_size > 0 {
        let held_out = gen_dataset(cfg.seed ^ EVAL_STREAM, cfg.eval_size, cfg.image_size, &cfg.architecture)?;
        let eval = evaluate(&model, &held_out)?;
        metrics.iou = eval.iou;
        metrics.non_finite = eval.non_finite;
    }
    Ok(Trained { model, metrics })
}
