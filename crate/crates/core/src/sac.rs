//! Switchable atrous convolution.
//!
//! A converted 3x3 layer computes
//!
//! ```text
//! x1 = pre_context(x)
//! s  = switch(x1)                       // 5x5 avg pool, then 1x1 conv to one channel
//! y  = s * conv(x1, w, rate 1) + (1 - s) * conv(x1, w + dw, rate r)
//! out = post_context(y)
//! ```
//!
//! The large-rate weight is always materialised as `w + dw`, so the two
//! branches share `w` and only the difference `dw` is trained separately.
//! Conversion sets `dw = 0`, the switch to weight 0 / bias 1 and both context
//! modules to zero, which makes the converted layer reproduce the plain one
//! exactly. The switch output is left unbounded; squashing it would break
//! that property.

use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::param::{join, Module, Param, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_RATE: usize = 3;
pub const SWITCH_POOL: usize = 5;

/// 5x5 average pool (stride 1, padding 2) followed by a 1x1 conv to one
/// channel. The 1x1 conv carries the host layer's stride so the map matches
/// the layer's output grid.
#[derive(Debug, Clone)]
pub struct SwitchFunction<T> {
    pub conv: Conv2d<T>,
}

impl<T: Element> SwitchFunction<T> {
    /// Weight 0, bias 1: evaluates to exactly 1 everywhere.
    pub fn identity(c_in: usize, stride: usize) -> Self {
        let mut conv = Conv2d::zeros(c_in, 1, 1, ConvGeometry::new(stride, 0, 1));
        conv.bias.as_mut().expect("switch has a bias").fill(T::one());
        SwitchFunction { conv }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.conv.in_channels() {
            return Err(Error::dim(
                "switch",
                format!("input has {c} channels, switch expects {}", self.conv.in_channels()),
            ));
        }
        let pooled = tape.avg_pool(x, SWITCH_POOL, 1, SWITCH_POOL / 2)?;
        self.conv.forward(tape, pooled)
    }
}

impl<T: Element> Module<T> for SwitchFunction<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(prefix, f);
    }
}

/// Global average pool, 1x1 conv (no non-linearity), broadcast-added back.
#[derive(Debug, Clone)]
pub struct GlobalContext<T> {
    pub conv: Conv2d<T>,
}

impl<T: Element> GlobalContext<T> {
    pub fn zeros(channels: usize) -> Self {
        GlobalContext {
            conv: Conv2d::zeros(channels, channels, 1, ConvGeometry::new(1, 0, 1)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.conv.in_channels() {
            return Err(Error::dim(
                "global_context",
                format!("input has {c} channels, module expects {}", self.conv.in_channels()),
            ));
        }
        let pooled = tape.global_avg_pool(x)?;
        let ctx = self.conv.forward(tape, pooled)?;
        tape.add(x, ctx)
    }
}

impl<T: Element> Module<T> for GlobalContext<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(prefix, f);
    }
}

#[derive(Debug, Clone)]
pub struct SacConv<T> {
    pub weight: Param<T>,
    pub delta_weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub rate: usize,
    pub stride: usize,
    pub switch: SwitchFunction<T>,
    pub pre_context: GlobalContext<T>,
    pub post_context: GlobalContext<T>,
}

/// Intermediate values of one SAC evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SacTrace {
    pub switch: Var,
    /// Rate-1 branch.
    pub small: Var,
    /// Rate-`r` branch.
    pub large: Var,
    /// Switch-mixed output before the post context.
    pub mixed: Var,
    pub output: Var,
}

impl<T: Element> SacConv<T> {
    /// Converts a plain 3x3, rate-1, padding-1 convolution.
    pub fn from_conv(conv: &Conv2d<T>, rate: usize) -> Result<Self> {
        if conv.kernel() != 3 {
            return Err(Error::usage(format!(
                "only 3x3 convolutions convert to SAC, got {0}x{0}",
                conv.kernel()
            )));
        }
        if conv.geom.dilation != 1 {
            return Err(Error::usage(format!(
                "convolution is already dilated (rate {})",
                conv.geom.dilation
            )));
        }
        if conv.geom.padding != 1 {
            return Err(Error::usage(format!(
                "SAC conversion needs padding 1, got {}",
                conv.geom.padding
            )));
        }
        if rate < 2 {
            return Err(Error::usage(format!("SAC rate must be >= 2, got {rate}")));
        }
        let w = conv.weight.value().clone();
        let (c_out, c_in) = (conv.out_channels(), conv.in_channels());
        Ok(SacConv {
            delta_weight: Param::new(Tensor::zeros(w.shape())),
            weight: Param::new(w),
            bias: conv.bias.as_ref().map(|b| Param::vector(b.value().data().to_vec())),
            rate,
            stride: conv.geom.stride,
            switch: SwitchFunction::identity(c_in, conv.geom.stride),
            pre_context: GlobalContext::zeros(c_in),
            post_context: GlobalContext::zeros(c_out),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape().n
    }

    pub fn small_geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, 1, 1)
    }

    pub fn large_geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.rate, self.rate)
    }

    /// Resets `dw`, the switch and both context modules to their conversion
    /// values, leaving `w` and the bias alone.
    pub fn reset_conversion_state(&mut self) {
        self.delta_weight.fill(T::zero());
        self.switch.conv.weight.fill(T::zero());
        if let Some(b) = self.switch.conv.bias.as_mut() {
            b.fill(T::one());
        }
        for ctx in [&mut self.pre_context, &mut self.post_context] {
            ctx.conv.weight.fill(T::zero());
            if let Some(b) = ctx.conv.bias.as_mut() {
                b.fill(T::zero());
            }
        }
    }

    /// The plain convolution holding `w` and the bias.
    pub fn base_conv(&self) -> Conv2d<T> {
        Conv2d::from_parts(
            self.weight.value().clone(),
            self.bias.as_ref().map(|b| b.value().data().to_vec()),
            self.small_geometry(),
        )
        .expect("shapes taken from a valid layer")
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.trace(tape, x)?.output)
    }

    /// Key under which [`SacConv::trace`] marks the switch map on the tape.
    pub fn switch_key(&self) -> ParamId {
        self.switch.conv.weight.id()
    }

    pub fn trace(&self, tape: &mut Tape<T>, x: Var) -> Result<SacTrace> {
        let c = tape.shape(x).c;
        if c != self.in_channels() {
            return Err(Error::dim(
                "sac",
                format!("input has {c} channels, layer expects {}", self.in_channels()),
            ));
        }
        let x1 = self.pre_context.forward(tape, x)?;
        let switch = self.switch.forward(tape, x1)?;
        tape.mark(self.switch_key(), switch);
        let w = tape.param(&self.weight);
        let dw = tape.param(&self.delta_weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        let small = tape.conv2d(x1, w, b, self.small_geometry())?;
        let w_large = tape.add(w, dw)?;
        let large = tape.conv2d(x1, w_large, b, self.large_geometry())?;
        let mixed = tape.lerp(switch, small, large)?;
        let output = self.post_context.forward(tape, mixed)?;
        Ok(SacTrace {
            switch,
            small,
            large,
            mixed,
            output,
        })
    }
}

impl<T: Element> Module<T> for SacConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
        f(&join(prefix, "delta_weight"), &self.delta_weight);
        self.switch.visit(&join(prefix, "switch"), f);
        self.pre_context.visit(&join(prefix, "pre_context"), f);
        self.post_context.visit(&join(prefix, "post_context"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
        f(&join(prefix, "delta_weight"), &mut self.delta_weight);
        self.switch.visit_mut(&join(prefix, "switch"), f);
        self.pre_context.visit_mut(&join(prefix, "pre_context"), f);
        self.post_context.visit_mut(&join(prefix, "post_context"), f);
    }
}

/// Suffixes that exist only on converted layers.
pub const SAC_ONLY_SUFFIXES: [&str; 7] = [
    "delta_weight",
    "switch/weight",
    "switch/bias",
    "pre_context/weight",
    "pre_context/bias",
    "post_context/weight",
    "post_context/bias",
];

/// A 3x3 slot in a network that is either plain or converted.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ConvLayer<T> {
    Plain(Conv2d<T>),
    Sac(SacConv<T>),
}

impl<T: Element> ConvLayer<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            ConvLayer::Plain(c) => c.forward(tape, x),
            ConvLayer::Sac(s) => s.forward(tape, x),
        }
    }

    pub fn is_sac(&self) -> bool {
        matches!(self, ConvLayer::Sac(_))
    }

    pub fn as_sac(&self) -> Option<&SacConv<T>> {
        match self {
            ConvLayer::Sac(s) => Some(s),
            ConvLayer::Plain(_) => None,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvLayer::Plain(c) => c.out_channels(),
            ConvLayer::Sac(s) => s.out_channels(),
        }
    }

    /// Replaces a plain 3x3 layer with its SAC conversion.
    pub fn convert(&mut self, rate: usize) -> Result<()> {
        match self {
            ConvLayer::Sac(_) => Err(Error::usage("layer is already converted to SAC")),
            ConvLayer::Plain(c) => {
                *self = ConvLayer::Sac(SacConv::from_conv(c, rate)?);
                Ok(())
            }
        }
    }

    /// Reverts to the plain layer sharing `w` and the bias.
    pub fn to_plain(&self) -> Conv2d<T> {
        match self {
            ConvLayer::Plain(c) => c.clone(),
            ConvLayer::Sac(s) => s.base_conv(),
        }
    }
}

impl<T: Element> Module<T> for ConvLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            ConvLayer::Plain(c) => c.visit(prefix, f),
            ConvLayer::Sac(s) => s.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            ConvLayer::Plain(c) => c.visit_mut(prefix, f),
            ConvLayer::Sac(s) => s.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::kernels;

    fn eval<T: Element>(f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>, x: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v).unwrap();
        tape.value(out).clone()
    }

    fn random_conv(seed: u64, c_in: usize, c_out: usize, stride: usize) -> Conv2d<f64> {
        let mut rng = init::rng(seed);
        let mut c = Conv2d::random(&mut rng, c_in, c_out, 3, ConvGeometry::new(stride, 1, 1));
        let b = init::normal::<f64>(&mut rng, [1, c_out, 1, 1]);
        c.bias.as_mut().unwrap().set_data(b.data()).unwrap();
        c
    }

    #[test]
    fn switch_values() {
        let x = init::normal::<f64>(&mut init::rng(1), [2, 3, 6, 5]);
        let s = SwitchFunction::<f64>::identity(3, 1);
        let y = eval(|t, v| s.forward(t, v), &x);
        assert_eq!(y.shape(), crate::Shape::new(2, 1, 6, 5));
        assert!(y.data().iter().all(|&v| v == 1.0));

        let mut s0 = s.clone();
        s0.conv.bias.as_mut().unwrap().fill(0.0);
        assert!(eval(|t, v| s0.forward(t, v), &x).data().iter().all(|&v| v == 0.0));

        // constant input c: pooled interior is c, output sigma * c + b
        let c = 1.5;
        let xc = Tensor::<f64>::full([1, 3, 9, 9], c);
        let mut s2 = s.clone();
        s2.conv.weight.set_data(&[0.5, -1.0, 2.0]).unwrap();
        s2.conv.bias.as_mut().unwrap().fill(0.25);
        let y = eval(|t, v| s2.forward(t, v), &xc);
        for h in 2..7 {
            for w in 2..7 {
                assert!((y.at(0, 0, h, w) - (1.5 * c + 0.25)).abs() < 1e-12);
            }
        }

        let wrong = Tensor::<f64>::zeros([1, 4, 3, 3]);
        let mut tape = Tape::new();
        let v = tape.constant(wrong);
        assert!(matches!(s.forward(&mut tape, v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn global_context_values() {
        let x = init::normal::<f64>(&mut init::rng(2), [1, 4, 5, 5]);
        let g = GlobalContext::<f64>::zeros(4);
        assert_eq!(eval(|t, v| g.forward(t, v), &x), x);

        let x1 = init::normal::<f64>(&mut init::rng(3), [1, 1, 4, 4]);
        let mut g1 = GlobalContext::<f64>::zeros(1);
        g1.conv.weight.fill(1.0);
        let m = x1.sum() / 16.0;
        let y = eval(|t, v| g1.forward(t, v), &x1);
        for (a, b) in y.data().iter().zip(x1.data()) {
            assert!((a - (b + m)).abs() < 1e-12);
        }
    }

    #[test]
    fn conversion_inventory_and_defaults() {
        let conv = random_conv(4, 3, 5, 1);
        let sac = SacConv::from_conv(&conv, DEFAULT_RATE).unwrap();
        assert_eq!(sac.rate, 3);
        let names = sac.param_names();
        assert_eq!(
            names,
            vec![
                "weight",
                "bias",
                "delta_weight",
                "switch/weight",
                "switch/bias",
                "pre_context/weight",
                "pre_context/bias",
                "post_context/weight",
                "post_context/bias",
            ]
        );
        assert_eq!(sac.weight.value(), conv.weight.value());
        assert!(sac.delta_weight.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conversion_rejects_bad_layers() {
        let mut rng = init::rng(5);
        let one = Conv2d::<f32>::random(&mut rng, 2, 2, 1, ConvGeometry::new(1, 0, 1));
        assert!(matches!(SacConv::from_conv(&one, 3), Err(Error::Usage(_))));
        let dilated = Conv2d::<f32>::random(&mut rng, 2, 2, 3, ConvGeometry::new(1, 2, 2));
        assert!(matches!(SacConv::from_conv(&dilated, 3), Err(Error::Usage(_))));
        let mut layer = ConvLayer::Plain(Conv2d::<f32>::random(&mut rng, 2, 2, 3, ConvGeometry::new(1, 1, 1)));
        layer.convert(3).unwrap();
        assert!(matches!(layer.convert(3), Err(Error::Usage(_))));
    }

    #[test]
    fn converted_layer_matches_plain() {
        for (seed, stride) in [(10, 1), (11, 2)] {
            let conv = random_conv(seed, 3, 4, stride);
            let sac = SacConv::from_conv(&conv, 3).unwrap();
            for k in 0..10 {
                let x = init::normal::<f64>(&mut init::rng(100 + k), [2, 3, 9, 8]);
                let plain = eval(|t, v| conv.forward(t, v), &x);
                let mixed = eval(|t, v| sac.forward(t, v), &x);
                assert!(plain.max_abs_diff(&mixed).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_switch_gives_large_rate_conv() {
        let conv = random_conv(12, 2, 3, 1);
        let mut sac = SacConv::from_conv(&conv, 3).unwrap();
        sac.switch.conv.bias.as_mut().unwrap().fill(0.0);
        let x = init::normal::<f64>(&mut init::rng(13), [1, 2, 8, 8]);
        let got = eval(|t, v| sac.forward(t, v), &x);
        let want = kernels::conv2d(
            &x,
            conv.weight.value(),
            conv.bias.as_ref().map(|b| b.value()),
            ConvGeometry::new(1, 3, 3),
        )
        .unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn half_switch_averages_branches() {
        let conv = random_conv(14, 2, 3, 1);
        let mut sac = SacConv::from_conv(&conv, 3).unwrap();
        sac.switch.conv.bias.as_mut().unwrap().fill(0.5);
        let x = init::normal::<f64>(&mut init::rng(15), [1, 2, 7, 7]);
        let bias = conv.bias.as_ref().map(|b| b.value());
        let a = kernels::conv2d(&x, conv.weight.value(), bias, ConvGeometry::new(1, 1, 1)).unwrap();
        let b = kernels::conv2d(&x, conv.weight.value(), bias, ConvGeometry::new(1, 3, 3)).unwrap();
        let got = eval(|t, v| sac.forward(t, v), &x);
        for i in 0..got.len() {
            let mean = 0.5 * (a.data()[i] + b.data()[i]);
            assert!((got.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_only_moves_large_branch() {
        let conv = random_conv(16, 2, 2, 1);
        let base = SacConv::from_conv(&conv, 3).unwrap();
        let x = init::normal::<f64>(&mut init::rng(17), [1, 2, 8, 8]);
        let probe = |layer: &SacConv<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let tr = layer.trace(&mut tape, v).unwrap();
            (tape.value(tr.small).clone(), tape.value(tr.large).clone())
        };
        let (s0, l0) = probe(&base);

        let mut dw = base.clone();
        dw.delta_weight.data_mut()[4] = 0.7;
        let (s1, l1) = probe(&dw);
        assert_eq!(s0, s1);
        assert!(l0.max_abs_diff(&l1).unwrap() > 1e-3);

        let mut w = base.clone();
        w.weight.data_mut()[4] += 0.7;
        let (s2, l2) = probe(&w);
        assert!(s0.max_abs_diff(&s2).unwrap() > 1e-3);
        assert!(l0.max_abs_diff(&l2).unwrap() > 1e-3);
    }
}
