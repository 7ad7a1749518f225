//! The full dense-prediction network: an (optionally recursive, optionally
//! SAC-converted) pyramid plus a shared 3x3 prediction head.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::ConvGeometry;
use crate::param::{join, Module, Param};
use crate::rfp::{RfpConfig, RfpModel};
use crate::sac::{SacConv, DEFAULT_RATE};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Layer widths and depths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub pyramid_width: usize,
    pub sac_rate: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Architecture {
            in_channels: b.in_channels,
            stem_channels: b.stem_channels,
            stage_channels: b.stage_channels,
            blocks_per_stage: b.blocks_per_stage,
            pyramid_width: 64,
            sac_rate: DEFAULT_RATE,
        }
    }
}

impl Architecture {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stem_channels: self.stem_channels,
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
        }
    }

    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }
}

/// Which of the two mechanisms a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub use_sac: bool,
    pub use_rfp: bool,
    pub rfp_steps: usize,
    pub shared_backbones: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        use_sac: false,
        use_rfp: false,
        rfp_steps: 2,
        shared_backbones: false,
    };

    pub fn all() -> [Variant; 4] {
        let b = Variant::BASELINE;
        [
            b,
            Variant { use_sac: true, ..b },
            Variant { use_rfp: true, ..b },
            Variant {
                use_sac: true,
                use_rfp: true,
                ..b
            },
        ]
    }

    pub fn steps(&self) -> usize {
        if self.use_rfp {
            self.rfp_steps
        } else {
            1
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.use_sac, self.use_rfp) {
            (false, false) => "baseline",
            (true, false) => "sac",
            (false, true) => "rfp",
            (true, true) => "rfp+sac",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub variant: Variant,
}

impl ModelSpec {
    pub fn rfp_config(&self) -> RfpConfig {
        RfpConfig {
            backbone: self.arch.backbone(),
            width: self.arch.pyramid_width,
            steps: self.variant.steps(),
            shared_backbones: self.variant.shared_backbones,
        }
    }
}

/// Foreground probability the head predicts before training.
pub const HEAD_PRIOR: f64 = 0.1;
const HEAD_STD: f64 = 0.01;

/// 3x3 conv to one logit map, with small weights and the bias at the prior's
/// log-odds so early losses are not dominated by confident mistakes.
fn prediction_head<T: Element>(rng: &mut init::Rng, width: usize) -> Conv2d<T> {
    let w = init::normal::<T>(rng, [1, width, 3, 3]).map(|v| v * T::of(HEAD_STD));
    let bias = T::of((HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln());
    Conv2d::from_parts(w, Some(vec![bias]), ConvGeometry::new(1, 1, 1)).expect("consistent shapes")
}

#[derive(Debug, Clone)]
pub struct DenseModel<T> {
    pub pyramid: RfpModel<T>,
    pub head: Conv2d<T>,
}

impl<T: Element> DenseModel<T> {
    /// Fresh weights from `seed`. SAC variants are built plain and then
    /// converted, so they start out computing the plain network.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = init::rng(seed);
        let mut pyramid = RfpModel::random(&spec.rfp_config(), &mut rng)?;
        let head = prediction_head(&mut rng, spec.arch.pyramid_width);
        if spec.variant.use_sac {
            pyramid.convert_to_sac(spec.arch.sac_rate)?;
        }
        Ok(DenseModel { pyramid, head })
    }

    /// One logit map per pyramid level.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let feats = self.pyramid.forward(tape, image)?;
        feats.iter().map(|&f| self.head.forward(tape, f)).collect()
    }

    /// Mean binary cross-entropy per level, summed over levels.
    pub fn loss(&self, tape: &mut Tape<T>, image: Var, masks: &[Tensor<T>]) -> Result<Var> {
        let logits = self.forward(tape, image)?;
        if logits.len() != masks.len() {
            return Err(Error::dim(
                "loss",
                format!("{} levels but {} masks", logits.len(), masks.len()),
            ));
        }
        let mut total: Option<Var> = None;
        for (&z, m) in logits.iter().zip(masks) {
            let l = tape.bce_with_logits(z, m)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::usage("model has no pyramid levels"))
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let outs = self.forward(&mut tape, x)?;
        Ok(outs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn convert_to_sac(&mut self, rate: usize) -> Result<usize> {
        self.pyramid.convert_to_sac(rate)
    }

    pub fn sac_layers(&self) -> Vec<(String, &SacConv<T>)> {
        self.pyramid
            .sac_layers()
            .into_iter()
            .map(|(n, s)| (join("pyramid", &n), s))
            .collect()
    }

    pub fn to_plain(&self) -> Self {
        DenseModel {
            pyramid: self.pyramid.to_plain(),
            head: self.head.clone(),
        }
    }
}

impl<T: Element> Module<T> for DenseModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.pyramid.visit(&join(prefix, "pyramid"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.pyramid.visit_mut(&join(prefix, "pyramid"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
