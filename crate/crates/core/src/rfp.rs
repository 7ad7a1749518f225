//! Feature pyramid, the ASPP connector that turns pyramid features into
//! backbone feedback, the attention fusion between unrolled steps, and the
//! unrolled recursive pyramid itself.

use crate::backbone::{Backbone, BackboneConfig};
use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::init::Rng;
use crate::kernels::{ConvGeometry, ResizeMode};
use crate::param::{join, Module, Param};
use crate::sac::SacConv;
use crate::tape::{Tape, Var};
use crate::tensor::Element;

/// Top-down pyramid: 1x1 laterals to width `d`, bilinear upsample-and-add from
/// the coarser level, then a 3x3 output conv per level.
#[derive(Debug, Clone)]
pub struct Fpn<T> {
    pub laterals: Vec<Conv2d<T>>,
    pub outputs: Vec<Conv2d<T>>,
}

impl<T: Element> Fpn<T> {
    pub fn random(rng: &mut Rng, in_channels: &[usize], width: usize) -> Self {
        Fpn {
            laterals: in_channels
                .iter()
                .map(|&c| Conv2d::random_linear(rng, c, width, 1, ConvGeometry::new(1, 0, 1)))
                .collect(),
            outputs: in_channels
                .iter()
                .map(|_| Conv2d::random_linear(rng, width, width, 3, ConvGeometry::new(1, 1, 1)))
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.outputs[0].out_channels()
    }

    pub fn levels(&self) -> usize {
        self.laterals.len()
    }

    pub fn forward(&self, tape: &mut Tape<T>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() != self.levels() {
            return Err(Error::dim(
                "fpn",
                format!("{} stage features for {} levels", xs.len(), self.levels()),
            ));
        }
        let mut merged = vec![None; xs.len()];
        let mut above: Option<Var> = None;
        for i in (0..xs.len()).rev() {
            let xs_i = tape.shape(xs[i]);
            if xs_i.c != self.laterals[i].in_channels() {
                return Err(Error::dim(
                    "fpn",
                    format!(
                        "level {i} has {} channels, lateral expects {}",
                        xs_i.c,
                        self.laterals[i].in_channels()
                    ),
                ));
            }
            let mut p = self.laterals[i].forward(tape, xs[i])?;
            if let Some(up) = above {
                let up = tape.resize(up, xs_i.h, xs_i.w, ResizeMode::Bilinear)?;
                p = tape.add(p, up)?;
            }
            merged[i] = Some(p);
            above = Some(p);
        }
        merged
            .into_iter()
            .zip(&self.outputs)
            .map(|(p, conv)| conv.forward(tape, p.expect("every level merged")))
            .collect()
    }
}

impl<T: Element> Module<T> for Fpn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.laterals.iter().enumerate() {
            c.visit(&join(prefix, &format!("lateral/{i}")), f);
        }
        for (i, c) in self.outputs.iter().enumerate() {
            c.visit(&join(prefix, &format!("output/{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.laterals.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("lateral/{i}")), f);
        }
        for (i, c) in self.outputs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("output/{i}")), f);
        }
    }
}

/// Kernel size, atrous rate and padding of the three convolutional branches.
pub const ASPP_BRANCHES: [(usize, usize, usize); 3] = [(1, 1, 0), (3, 3, 3), (3, 6, 6)];

/// Four parallel branches each producing `d / 4` channels, concatenated with
/// no conv after the concatenation.
#[derive(Debug, Clone)]
pub struct AsppConnector<T> {
    pub branches: Vec<Conv2d<T>>,
    pub global: Conv2d<T>,
}

impl<T: Element> AsppConnector<T> {
    pub fn random(rng: &mut Rng, width: usize) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "ASPP connector width must be a positive multiple of 4, got {width}"
            )));
        }
        let quarter = width / 4;
        Ok(AsppConnector {
            branches: ASPP_BRANCHES
                .iter()
                .map(|&(k, r, p)| Conv2d::random(rng, width, quarter, k, ConvGeometry::new(1, p, r)))
                .collect(),
            global: Conv2d::random(rng, width, quarter, 1, ConvGeometry::new(1, 0, 1)),
        })
    }

    pub fn width(&self) -> usize {
        self.global.in_channels()
    }

    pub fn forward(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let s = tape.shape(f);
        if s.c != self.width() {
            return Err(Error::dim(
                "aspp",
                format!("input has {} channels, connector expects {}", s.c, self.width()),
            ));
        }
        let mut parts = Vec::with_capacity(4);
        for b in &self.branches {
            let y = b.forward(tape, f)?;
            parts.push(tape.relu(y));
        }
        let pooled = tape.global_avg_pool(f)?;
        let g = self.global.forward(tape, pooled)?;
        let g = tape.relu(g);
        parts.push(tape.resize(g, s.h, s.w, ResizeMode::Broadcast)?);
        tape.concat_channels(&parts)
    }
}

impl<T: Element> Module<T> for AsppConnector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.branches.iter().enumerate() {
            c.visit(&join(prefix, &format!("branch/{i}")), f);
        }
        self.global.visit(&join(prefix, "global"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.branches.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("branch/{i}")), f);
        }
        self.global.visit_mut(&join(prefix, "global"), f);
    }
}

/// `a = sigmoid(conv1x1(f_new))`, output `a * f_new + (1 - a) * f_prev`. The
/// attention map has one channel shared across the pyramid width.
#[derive(Debug, Clone)]
pub struct FusionModule<T> {
    pub attention: Conv2d<T>,
}

impl<T: Element> FusionModule<T> {
    pub fn random(rng: &mut Rng, width: usize) -> Self {
        FusionModule {
            attention: Conv2d::random_linear(rng, width, 1, 1, ConvGeometry::new(1, 0, 1)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, f_prev: Var, f_new: Var) -> Result<Var> {
        let (a, b) = (tape.shape(f_prev), tape.shape(f_new));
        if a != b {
            return Err(Error::dim("fusion", format!("{a} vs {b}")));
        }
        let logits = self.attention.forward(tape, f_new)?;
        let att = tape.sigmoid(logits);
        tape.lerp(att, f_new, f_prev)
    }
}

impl<T: Element> Module<T> for FusionModule<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
    }
}

/// Shape of an unrolled pyramid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfpConfig {
    pub backbone: BackboneConfig,
    pub width: usize,
    /// Unrolled steps `T`; 1 is a plain backbone + FPN.
    pub steps: usize,
    /// One backbone reused by every step instead of one per step.
    pub shared_backbones: bool,
}

/// The backbone-plus-pyramid unrolled `T` times. The FPN and connector are the
/// same objects at every step; backbones are shared or per-step.
#[derive(Debug, Clone)]
pub struct RfpModel<T> {
    pub backbones: Vec<Backbone<T>>,
    pub shared_backbones: bool,
    pub fpn: Fpn<T>,
    pub aspp: Option<AsppConnector<T>>,
    pub fusion: Option<FusionModule<T>>,
    pub steps: usize,
}

impl<T: Element> RfpModel<T> {
    /// Later per-step backbones start as copies of the first, with zero
    /// injection convs, so an untrained model reproduces the plain pyramid.
    pub fn random(cfg: &RfpConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::Config("`rfp_steps` must be >= 1".into()));
        }
        let first = Backbone::random(&cfg.backbone, rng)?;
        let fpn = Fpn::random(rng, &cfg.backbone.stage_channels, cfg.width);
        if cfg.steps == 1 {
            return Ok(RfpModel {
                backbones: vec![first],
                shared_backbones: cfg.shared_backbones,
                fpn,
                aspp: None,
                fusion: None,
                steps: 1,
            });
        }
        let aspp = AsppConnector::random(rng, cfg.width)?;
        let fusion = FusionModule::random(rng, cfg.width);
        let backbones = if cfg.shared_backbones {
            vec![first.with_injection(cfg.width)]
        } else {
            let mut v = Vec::with_capacity(cfg.steps);
            for _ in 1..cfg.steps {
                v.push(first.clone().with_injection(cfg.width));
            }
            v.insert(0, first);
            v
        };
        Ok(RfpModel {
            backbones,
            shared_backbones: cfg.shared_backbones,
            fpn,
            aspp: Some(aspp),
            fusion: Some(fusion),
            steps: cfg.steps,
        })
    }

    pub fn backbone(&self, step: usize) -> &Backbone<T> {
        if self.shared_backbones {
            &self.backbones[0]
        } else {
            &self.backbones[step]
        }
    }

    pub fn width(&self) -> usize {
        self.fpn.width()
    }

    /// The FPN pyramid of the first step only.
    pub fn fpn_forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let xs = self.backbones[0].forward(tape, image, None)?;
        self.fpn.forward(tape, &xs)
    }

    /// Final fused pyramid after `T` steps.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let mut f = self.fpn_forward(tape, image)?;
        for step in 1..self.steps {
            let (aspp, fusion) = match (&self.aspp, &self.fusion) {
                (Some(a), Some(u)) => (a, u),
                _ => return Err(Error::usage("multi-step model lacks connector or fusion")),
            };
            let feedback = f
                .iter()
                .map(|&fi| aspp.forward(tape, fi))
                .collect::<Result<Vec<_>>>()?;
            let xs = self.backbone(step).forward(tape, image, Some(&feedback))?;
            let fresh = self.fpn.forward(tape, &xs)?;
            f = f
                .iter()
                .zip(&fresh)
                .map(|(&prev, &new)| fusion.forward(tape, prev, new))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(f)
    }

    pub fn convert_to_sac(&mut self, rate: usize) -> Result<usize> {
        let mut n = 0;
        for b in &mut self.backbones {
            n += b.convert_to_sac(rate)?;
        }
        Ok(n)
    }

    pub fn sac_layers(&self) -> Vec<(String, &SacConv<T>)> {
        let mut out = Vec::new();
        for (t, b) in self.backbones.iter().enumerate() {
            for (name, s) in b.sac_layers() {
                out.push((format!("backbone/{t}/{name}"), s));
            }
        }
        out
    }

    pub fn to_plain(&self) -> Self {
        let mut out = self.clone();
        out.backbones = self.backbones.iter().map(Backbone::to_plain).collect();
        out
    }
}

impl<T: Element> Module<T> for RfpModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (t, b) in self.backbones.iter().enumerate() {
            b.visit(&join(prefix, &format!("backbone/{t}")), f);
        }
        self.fpn.visit(&join(prefix, "fpn"), f);
        if let Some(a) = &self.aspp {
            a.visit(&join(prefix, "aspp"), f);
        }
        if let Some(u) = &self.fusion {
            u.visit(&join(prefix, "fusion"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (t, b) in self.backbones.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("backbone/{t}")), f);
        }
        self.fpn.visit_mut(&join(prefix, "fpn"), f);
        if let Some(a) = &mut self.aspp {
            a.visit_mut(&join(prefix, "aspp"), f);
        }
        if let Some(u) = &mut self.fusion {
            u.visit_mut(&join(prefix, "fusion"), f);
        }
    }
}
