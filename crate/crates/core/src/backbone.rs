//! Small ResNet-style bottom-up backbone with optional feedback injection
//! into the first block of every stage.

use serde::{Deserialize, Serialize};

use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::init::Rng;
use crate::kernels::ConvGeometry;
use crate::param::{join, Module, Param};
use crate::sac::{ConvLayer, SacConv};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: 16,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Total downsampling of the last stage: the stem and every stage halve.
    pub fn max_stride(&self) -> usize {
        1 << (self.stages() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.stem_channels == 0 {
            return bad("`in_channels` and `stem_channels` must be >= 1".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("`stage_channels` needs at least one non-zero entry".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("`blocks_per_stage` must be >= 1".into());
        }
        Ok(())
    }
}

/// Bottleneck: 1x1 reduce, 3x3 (stride carrier, SAC-convertible), 1x1 expand,
/// added to an identity or 1x1 projection shortcut, then ReLU.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub reduce: Conv2d<T>,
    pub conv: ConvLayer<T>,
    pub expand: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

impl<T: Element> Block<T> {
    pub fn random(rng: &mut Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        let mid = (c_out / 4).max(1);
        let pointwise = ConvGeometry::new(1, 0, 1);
        Block {
            reduce: Conv2d::random(rng, c_in, mid, 1, pointwise),
            conv: ConvLayer::Plain(Conv2d::random(rng, mid, mid, 3, ConvGeometry::new(stride, 1, 1))),
            expand: Conv2d::zeros(mid, c_out, 1, pointwise),
            shortcut: (stride != 1 || c_in != c_out)
                .then(|| Conv2d::random_linear(rng, c_in, c_out, 1, ConvGeometry::new(stride, 0, 1))),
        }
    }

    /// `extra` is added to the residual + shortcut sum before the final ReLU.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, extra: Option<Var>) -> Result<Var> {
        let h = self.reduce.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.expand.forward(tape, h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        let mut sum = tape.add(h, skip)?;
        if let Some(e) = extra {
            sum = tape.add(sum, e)?;
        }
        Ok(tape.relu(sum))
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub blocks: Vec<Block<T>>,
    /// Zero-initialised 1x1 conv from the pyramid width to the stage width.
    pub injection: Option<Conv2d<T>>,
}

impl<T: Element> Module<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks/{i}")), f);
        }
        if let Some(inj) = &self.injection {
            inj.visit(&join(prefix, "injection"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks/{i}")), f);
        }
        if let Some(inj) = &mut self.injection {
            inj.visit_mut(&join(prefix, "injection"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub stem: ConvLayer<T>,
    pub stages: Vec<Stage<T>>,
}

impl<T: Element> Backbone<T> {
    pub fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvLayer::Plain(Conv2d::random(
            rng,
            cfg.in_channels,
            cfg.stem_channels,
            3,
            ConvGeometry::new(2, 1, 1),
        ));
        let mut c_in = cfg.stem_channels;
        let mut stages = Vec::with_capacity(cfg.stages());
        for &c_out in &cfg.stage_channels {
            let mut blocks = vec![Block::random(rng, c_in, c_out, 2)];
            for _ in 1..cfg.blocks_per_stage {
                blocks.push(Block::random(rng, c_out, c_out, 1));
            }
            stages.push(Stage {
                blocks,
                injection: None,
            });
            c_in = c_out;
        }
        Ok(Backbone { stem, stages })
    }

    /// Adds zero-initialised injection convs reading `feedback_channels`.
    /// Existing injections are reset to zero.
    pub fn with_injection(mut self, feedback_channels: usize) -> Self {
        for stage in &mut self.stages {
            let c_out = stage.blocks[0].expand.out_channels();
            stage.injection = Some(Conv2d::zeros(
                feedback_channels,
                c_out,
                1,
                ConvGeometry::new(1, 0, 1),
            ));
        }
        self
    }

    pub fn has_injection(&self) -> bool {
        self.stages.iter().all(|s| s.injection.is_some())
    }

    /// Stage outputs `x_1..x_S`. `feedback[i]`, when given, is routed through
    /// stage `i`'s injection conv and added after its first block's sum.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var, feedback: Option<&[Var]>) -> Result<Vec<Var>> {
        if let Some(fb) = feedback {
            if fb.len() != self.stages.len() {
                return Err(Error::dim(
                    "backbone",
                    format!("{} feedback maps for {} stages", fb.len(), self.stages.len()),
                ));
            }
            if !self.has_injection() {
                return Err(Error::usage("backbone has no injection convs to take feedback"));
            }
        }
        let h = self.stem.forward(tape, image)?;
        let mut h = tape.relu(h);
        let mut outs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let extra = match (feedback, &stage.injection) {
                (Some(fb), Some(inj)) => {
                    let want_c = inj.in_channels();
                    let fs = tape.shape(fb[i]);
                    // the first block's output grid, known from its shortcut geometry
                    let hs = tape.shape(h);
                    let expect = (hs.n, want_c, hs.h.div_ceil(2), hs.w.div_ceil(2));
                    if (fs.n, fs.c, fs.h, fs.w) != expect {
                        return Err(Error::dim(
                            "backbone",
                            format!(
                                "stage {i} feedback is {fs}, expected {}x{}x{}x{}",
                                expect.0, expect.1, expect.2, expect.3
                            ),
                        ));
                    }
                    Some(inj.forward(tape, fb[i])?)
                }
                _ => None,
            };
            let mut blocks = stage.blocks.iter();
            h = blocks.next().expect("stage has blocks").forward(tape, h, extra)?;
            for b in blocks {
                h = b.forward(tape, h, None)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    fn conv_slots_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut out = vec![&mut self.stem];
        for stage in &mut self.stages {
            for b in &mut stage.blocks {
                out.push(&mut b.conv);
            }
        }
        out
    }

    fn conv_slots(&self) -> Vec<(String, &ConvLayer<T>)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.blocks.iter().enumerate() {
                out.push((format!("stages/{i}/blocks/{j}/conv"), &b.conv));
            }
        }
        out
    }

    /// Converts every 3x3 conv (stem included) to SAC. 1x1 convs stay plain.
    pub fn convert_to_sac(&mut self, rate: usize) -> Result<usize> {
        if self.conv_slots().iter().any(|(_, c)| c.is_sac()) {
            return Err(Error::usage("backbone is already converted to SAC"));
        }
        let slots = self.conv_slots_mut();
        let n = slots.len();
        for slot in slots {
            slot.convert(rate)?;
        }
        Ok(n)
    }

    pub fn sac_layers(&self) -> Vec<(String, &SacConv<T>)> {
        self.conv_slots()
            .into_iter()
            .filter_map(|(name, c)| c.as_sac().map(|s| (name, s)))
            .collect()
    }

    /// Copy with every SAC layer reduced to its plain `w` / bias conv.
    pub fn to_plain(&self) -> Self {
        let mut out = self.clone();
        for slot in out.conv_slots_mut() {
            *slot = ConvLayer::Plain(slot.to_plain());
        }
        out
    }
}

impl<T: Element> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages/{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages/{i}")), f);
        }
    }
}
