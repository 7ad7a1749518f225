//! Central-difference verification of analytic gradients.
//!
//! Each fixture is a small layer (or stack of layers) together with its input,
//! both exposed as parameters, and a scalar probe loss `sum(out * R)` with a
//! fixed random `R`. Numeric derivatives come from forward passes only.

use std::fmt;

use rand::seq::index;

use crate::backbone::{Backbone, BackboneConfig};
use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::init::{self, Rng};
use crate::kernels::{ConvGeometry, ResizeMode};
use crate::model::{Architecture, DenseModel, ModelSpec, Variant};
use crate::param::{join, Module, Param};
use crate::rfp::{AsppConnector, Fpn, FusionModule, RfpConfig, RfpModel};
use crate::sac::SacConv;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Smallest fraction of samples per layer that must be usable (not kinks).
    pub min_usable: f64,
    /// Entries sampled per parameter tensor.
    pub samples: usize,
    pub seed: u64,
    /// Scales every analytic gradient by `1 + 1e-2` before comparing.
    /// A negative control: the suite must fail with this set.
    pub corrupt_analytic: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            min_usable: 0.75,
            samples: 6,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Samples where the step straddles a non-differentiable point (a ReLU
    /// kink), detected from the loss values alone: the central difference
    /// moves when the step is halved, or the one-sided slopes differ by more
    /// than curvature explains. The numeric value says nothing there.
    pub kinks: usize,
    pub worst: f64,
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: LayerKind,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub min_usable: f64,
}

impl LayerReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none() && self.usable_fraction() >= self.min_usable
    }

    pub fn usable_fraction(&self) -> f64 {
        let used: usize = self.params.iter().map(|p| p.checked).sum();
        let kinks: usize = self.params.iter().map(|p| p.kinks).sum();
        used as f64 / (used + kinks).max(1) as f64
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        // NaN counts as a failure
        self.params.iter().filter(move |p| p.worst.is_nan() || p.worst > self.tolerance)
    }
}

/// Layer types covered by the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Ops,
    Sac,
    Aspp,
    Fusion,
    Fpn,
    Backbone,
    Rfp,
    Model,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Conv,
        LayerKind::Ops,
        LayerKind::Sac,
        LayerKind::Aspp,
        LayerKind::Fusion,
        LayerKind::Fpn,
        LayerKind::Backbone,
        LayerKind::Rfp,
        LayerKind::Model,
    ];

    /// Single layers on tensors no larger than `2x4x6x6`; the 32-bit suite
    /// runs on these only.
    pub const PRIMITIVES: [LayerKind; 6] = [
        LayerKind::Conv,
        LayerKind::Ops,
        LayerKind::Sac,
        LayerKind::Aspp,
        LayerKind::Fusion,
        LayerKind::Fpn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Ops => "ops",
            LayerKind::Sac => "sac",
            LayerKind::Aspp => "aspp",
            LayerKind::Fusion => "fusion",
            LayerKind::Fpn => "fpn",
            LayerKind::Backbone => "backbone",
            LayerKind::Rfp => "rfp",
            LayerKind::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        LayerKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A module with a scalar loss to differentiate.
pub trait Probe<T: Element>: Module<T> {
    fn loss(&self, tape: &mut Tape<T>) -> Result<Var>;

    /// The same loss evaluated forward only. Implementations may reduce in
    /// `f64` so that the numeric side measures the layer, not the reduction.
    fn value(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss(&mut tape)?;
        Ok(tape.value(l).data()[0].as_f64())
    }
}

/// Compares analytic and central-difference gradients on sampled entries of
/// every parameter of `probe`.
pub fn check_probe<T: Element>(probe: &mut dyn Probe<T>, opts: &CheckOptions) -> Result<Vec<ParamCheck>> {
    let mut tape = Tape::new();
    let loss = probe.loss(&mut tape)?;
    let grads = tape.backward(loss)?;
    drop(tape);
    let base = probe.value()?;

    let mut targets: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut rng = init::rng(opts.seed);
    let mut missing = Vec::new();
    probe.visit("", &mut |name, p| {
        let Some(g) = grads.for_param(p.id()) else {
            missing.push(name.to_string());
            return;
        };
        let len = p.value().len();
        let picks = index::sample(&mut rng, len, opts.samples.min(len)).into_vec();
        let scale = if opts.corrupt_analytic { 1.0 + 1e-2 } else { 1.0 };
        let analytic = picks.iter().map(|&i| g.data()[i].as_f64() * scale).collect();
        targets.push((name.to_string(), picks, analytic));
    });
    if !missing.is_empty() {
        return Err(Error::usage(format!(
            "no gradient reached: {}",
            missing.join(", ")
        )));
    }

    let mut out = Vec::with_capacity(targets.len());
    for (name, picks, analytic) in targets {
        let mut worst = 0.0f64;
        let mut kinks = 0;
        for (&i, &a) in picks.iter().zip(&analytic) {
            let original = read_entry(probe, &name, i);
            let mut at = |delta: f64| -> Result<f64> {
                write_entry(probe, &name, i, T::of(original.as_f64() + delta));
                probe.value()
            };
            let (plus, minus) = (at(opts.step)?, at(-opts.step)?);
            let (plus_half, minus_half) = (at(opts.step / 2.0)?, at(-opts.step / 2.0)?);
            write_entry(probe, &name, i, original);
            let h = opts.step;
            let numeric = (plus - minus) / (2.0 * h);
            let refined = (plus_half - minus_half) / h;
            // one-sided slope gaps: smooth functions give gap(h) = 2 gap(h/2)
            let gap = (plus - 2.0 * base + minus) / h;
            let gap_half = (plus_half - 2.0 * base + minus_half) / (h / 2.0);
            let scale = numeric.abs().max(refined.abs()).max(opts.floor);
            let unstable = (numeric - refined).abs() / scale > opts.tolerance;
            let broken = (gap - 2.0 * gap_half).abs() / scale > opts.tolerance;
            if unstable || broken {
                kinks += 1;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            worst = if rel.is_nan() { f64::NAN } else { worst.max(rel) };
        }
        out.push(ParamCheck {
            name,
            checked: picks.len() - kinks,
            kinks,
            worst,
        });
    }
    Ok(out)
}

fn read_entry<T: Element>(m: &dyn Probe<T>, name: &str, i: usize) -> T {
    let mut v = None;
    m.visit("", &mut |n, p| {
        if n == name {
            v = Some(p.value().data()[i]);
        }
    });
    v.expect("parameter exists")
}

fn write_entry<T: Element>(m: &mut dyn Probe<T>, name: &str, i: usize, v: T) {
    m.visit_mut("", &mut |n, p| {
        if n == name {
            p.data_mut()[i] = v;
        }
    });
}

/// Runs the fixture for one layer type.
pub fn check_layer<T: Element>(kind: LayerKind, opts: &CheckOptions) -> Result<LayerReport> {
    let mut fixture = fixture::<T>(kind, opts.seed)?;
    let params = check_probe(fixture.as_mut(), opts)?;
    Ok(LayerReport {
        layer: kind,
        params,
        tolerance: opts.tolerance,
        min_usable: opts.min_usable,
    })
}

pub fn check_all<T: Element>(kinds: &[LayerKind], opts: &CheckOptions) -> Result<Vec<LayerReport>> {
    kinds.iter().map(|&k| check_layer::<T>(k, opts)).collect()
}

/// Parameters plus fixed inputs and probe weights.
struct Fixture<T, L> {
    layer: L,
    inputs: Vec<Param<T>>,
    probes: Vec<Tensor<T>>,
    forward: ForwardFn<T, L>,
}

impl<T: Element, L: Module<T>> Module<T> for Fixture<T, L> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.layer.visit(&join(prefix, "layer"), f);
        for (i, p) in self.inputs.iter().enumerate() {
            f(&join(prefix, &format!("input/{i}")), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.layer.visit_mut(&join(prefix, "layer"), f);
        for (i, p) in self.inputs.iter_mut().enumerate() {
            f(&join(prefix, &format!("input/{i}")), p);
        }
    }
}

impl<T: Element, L: Module<T>> Probe<T> for Fixture<T, L> {
    fn loss(&self, tape: &mut Tape<T>) -> Result<Var> {
        let xs: Vec<Var> = self.inputs.iter().map(|p| tape.param(p)).collect();
        let outs = (self.forward)(&self.layer, tape, &xs)?;
        probe_loss(tape, &outs, &self.probes)
    }

    fn value(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = self.inputs.iter().map(|p| tape.param(p)).collect();
        let outs = (self.forward)(&self.layer, &mut tape, &xs)?;
        Ok(outs
            .iter()
            .zip(&self.probes)
            .map(|(&o, r)| {
                let o = tape.value(o).data();
                o.iter().zip(r.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>()
            })
            .sum())
    }
}

/// `sum_k sum(out_k * probe_k)`; a scalar loss is passed through when no probe
/// is given for it.
type ForwardFn<T, L> = fn(&L, &mut Tape<T>, &[Var]) -> Result<Vec<Var>>;

fn probe_loss<T: Element>(tape: &mut Tape<T>, outs: &[Var], probes: &[Tensor<T>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (k, &o) in outs.iter().enumerate() {
        let term = match probes.get(k) {
            Some(r) => {
                let r = tape.constant(r.clone());
                let prod = tape.mul(o, r)?;
                tape.sum(prod)
            }
            None => o,
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::usage("probe has no outputs"))
}

fn input<T: Element>(rng: &mut Rng, shape: [usize; 4]) -> Param<T> {
    Param::new(init::normal(rng, shape))
}

/// Shapes of `outs` once `forward` runs on `inputs`; used to draw probes.
fn probes_for<T: Element, L>(
    layer: &L,
    inputs: &[Param<T>],
    forward: ForwardFn<T, L>,
    rng: &mut Rng,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|p| tape.param(p)).collect();
    let outs = forward(layer, &mut tape, &xs)?;
    Ok(outs
        .iter()
        .map(|&o| {
            let s = tape.shape(o);
            init::normal(rng, s)
        })
        .collect())
}

fn build<T: Element, L: Module<T> + 'static>(
    layer: L,
    inputs: Vec<Param<T>>,
    forward: ForwardFn<T, L>,
    rng: &mut Rng,
) -> Result<Box<dyn Probe<T>>> {
    let probes = probes_for(&layer, &inputs, forward, rng)?;
    Ok(Box::new(Fixture {
        layer,
        inputs,
        probes,
        forward,
    }))
}

/// Moves every parameter away from its initial value so that zero-initialised
/// paths (injection convs, global contexts, `dw`, the switch) carry gradient
/// in both directions.
fn jitter<T: Element, M: Module<T>>(m: &mut M, rng: &mut Rng, scale: f64) {
    m.visit_mut("", &mut |_, p| {
        let noise: Tensor<T> = init::normal(rng, p.value().shape());
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v = *v + T::of(scale) * *n;
        }
    });
}

/// Layers and elementwise ops that are not covered by a layer fixture.
#[derive(Debug, Clone)]
struct OpsLayer<T> {
    gate: Param<T>,
}

impl<T: Element> Module<T> for OpsLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gate"), &self.gate);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gate"), &mut self.gate);
    }
}

fn ops_forward<T: Element>(l: &OpsLayer<T>, tape: &mut Tape<T>, xs: &[Var]) -> Result<Vec<Var>> {
    let (a, b) = (xs[0], xs[1]);
    let gate = tape.param(&l.gate);
    let pooled = tape.avg_pool(a, 5, 1, 2)?;
    let s = tape.sigmoid(gate);
    let mixed = tape.lerp(s, pooled, b)?;
    let r = tape.relu(mixed);
    let prod = tape.mul(r, a)?;
    let g = tape.global_avg_pool(b)?;
    let wide = tape.resize(g, 6, 6, ResizeMode::Broadcast)?;
    let small = tape.avg_pool(b, 2, 2, 0)?;
    let up = tape.resize(small, 6, 6, ResizeMode::Bilinear)?;
    let sum = tape.add(wide, up)?;
    let cat = tape.concat_channels(&[prod, sum])?;
    let target = Tensor::from_fn(tape.shape(prod), |i| T::of((i % 3 == 0) as u8 as f64));
    let bce = tape.bce_with_logits(prod, &target)?;
    Ok(vec![cat, bce])
}

fn fixture<T: Element>(kind: LayerKind, seed: u64) -> Result<Box<dyn Probe<T>>> {
    let mut rng = init::rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ kind as u64);
    match kind {
        LayerKind::Conv => {
            let mut conv = Conv2d::<T>::random(&mut rng, 3, 4, 3, ConvGeometry::new(2, 2, 2));
            jitter(&mut conv, &mut rng, 0.1);
            let inputs = vec![input(&mut rng, [2, 3, 6, 6])];
            build(conv, inputs, |l, t, x| Ok(vec![l.forward(t, x[0])?]), &mut rng)
        }
        LayerKind::Ops => {
            let layer = OpsLayer {
                gate: Param::new(init::normal(&mut rng, [2, 1, 6, 6])),
            };
            let inputs = vec![input(&mut rng, [2, 3, 6, 6]), input(&mut rng, [2, 3, 6, 6])];
            build(layer, inputs, ops_forward, &mut rng)
        }
        LayerKind::Sac => {
            let mut layers = Vec::new();
            for stride in [1, 2] {
                let plain = Conv2d::<T>::random(&mut rng, 3, 4, 3, ConvGeometry::new(stride, 1, 1));
                let mut sac = SacConv::from_conv(&plain, 3)?;
                jitter(&mut sac, &mut rng, 0.2);
                layers.push(sac);
            }
            let inputs = vec![input(&mut rng, [2, 3, 6, 6])];
            build(
                SacPair(layers),
                inputs,
                |l, t, x| {
                    let a = l.0[0].forward(t, x[0])?;
                    let b = l.0[1].forward(t, x[0])?;
                    Ok(vec![a, b])
                },
                &mut rng,
            )
        }
        LayerKind::Aspp => {
            let aspp = AsppConnector::<T>::random(&mut rng, 4)?;
            let inputs = vec![input(&mut rng, [2, 4, 6, 6])];
            build(aspp, inputs, |l, t, x| Ok(vec![l.forward(t, x[0])?]), &mut rng)
        }
        LayerKind::Fusion => {
            let fusion = FusionModule::<T>::random(&mut rng, 4);
            let inputs = vec![input(&mut rng, [2, 4, 5, 5]), input(&mut rng, [2, 4, 5, 5])];
            build(fusion, inputs, |l, t, x| Ok(vec![l.forward(t, x[0], x[1])?]), &mut rng)
        }
        LayerKind::Fpn => {
            let fpn = Fpn::<T>::random(&mut rng, &[3, 4, 2], 4);
            let inputs = vec![
                input(&mut rng, [2, 3, 6, 6]),
                input(&mut rng, [2, 4, 3, 3]),
                input(&mut rng, [2, 2, 2, 2]),
            ];
            build(fpn, inputs, |l, t, x| l.forward(t, x), &mut rng)
        }
        LayerKind::Backbone => {
            let cfg = tiny_backbone();
            let mut b = Backbone::<T>::random(&cfg, &mut rng)?.with_injection(4);
            b.convert_to_sac(3)?;
            jitter(&mut b, &mut rng, 0.1);
            let inputs = vec![
                input(&mut rng, [1, 2, 16, 16]),
                input(&mut rng, [1, 4, 4, 4]),
                input(&mut rng, [1, 4, 2, 2]),
            ];
            build(b, inputs, |l, t, x| l.forward(t, x[0], Some(&x[1..])), &mut rng)
        }
        LayerKind::Rfp => {
            let cfg = RfpConfig {
                backbone: tiny_backbone(),
                width: 4,
                steps: 2,
                shared_backbones: false,
            };
            let mut m = RfpModel::<T>::random(&cfg, &mut rng)?;
            m.convert_to_sac(3)?;
            jitter(&mut m, &mut rng, 0.1);
            let inputs = vec![input(&mut rng, [1, 2, 16, 16])];
            build(m, inputs, |l, t, x| l.forward(t, x[0]), &mut rng)
        }
        LayerKind::Model => {
            let spec = ModelSpec {
                arch: Architecture {
                    in_channels: 2,
                    stem_channels: 4,
                    stage_channels: vec![4, 8],
                    blocks_per_stage: 1,
                    pyramid_width: 4,
                    sac_rate: 3,
                },
                variant: Variant {
                    use_sac: true,
                    use_rfp: true,
                    rfp_steps: 2,
                    shared_backbones: true,
                },
            };
            let mut m = DenseModel::<T>::new(&spec, seed)?;
            jitter(&mut m, &mut rng, 0.1);
            let masks = vec![
                Tensor::from_fn([1, 1, 4, 4], |i| T::of((i % 3 == 0) as u8 as f64)),
                Tensor::from_fn([1, 1, 2, 2], |i| T::of((i == 1) as u8 as f64)),
            ];
            let inputs = vec![input(&mut rng, [1, 2, 16, 16])];
            Ok(Box::new(LossFixture { model: m, inputs, masks }))
        }
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        in_channels: 2,
        stem_channels: 3,
        stage_channels: vec![4, 6],
        blocks_per_stage: 2,
    }
}

#[derive(Debug, Clone)]
struct SacPair<T>(Vec<SacConv<T>>);

impl<T: Element> Module<T> for SacPair<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.0.iter().enumerate() {
            s.visit(&join(prefix, &format!("stride{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.0.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stride{}", i + 1)), f);
        }
    }
}

/// The full dense model under its training loss.
struct LossFixture<T> {
    model: DenseModel<T>,
    inputs: Vec<Param<T>>,
    masks: Vec<Tensor<T>>,
}

impl<T: Element> Module<T> for LossFixture<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.model.visit(&join(prefix, "model"), f);
        f(&join(prefix, "input/0"), &self.inputs[0]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.model.visit_mut(&join(prefix, "model"), f);
        f(&join(prefix, "input/0"), &mut self.inputs[0]);
    }
}

impl<T: Element> Probe<T> for LossFixture<T> {
    fn loss(&self, tape: &mut Tape<T>) -> Result<Var> {
        let x = tape.param(&self.inputs[0]);
        self.model.loss(tape, x, &self.masks)
    }
}

