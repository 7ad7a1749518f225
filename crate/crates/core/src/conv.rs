//! Plain convolution layer.

use crate::error::{Error, Result};
use crate::init::{self, Rng};
use crate::kernels::ConvGeometry;
use crate::param::{join, Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Shape, Tensor};

/// Weight `(c_out, c_in, k, k)`, optional per-channel bias, and geometry.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geom: ConvGeometry,
}

impl<T: Element> Conv2d<T> {
    pub fn from_parts(weight: Tensor<T>, bias: Option<Vec<T>>, geom: ConvGeometry) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::dim("conv2d", format!("non-square kernel {ws}")));
        }
        if let Some(b) = &bias {
            if b.len() != ws.n {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias has {} values for {} output channels", b.len(), ws.n),
                ));
            }
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::geometry("conv2d", "stride and dilation must be >= 1"));
        }
        Ok(Conv2d {
            weight: Param::new(weight),
            bias: bias.map(Param::vector),
            geom,
        })
    }

    /// Fan-in scaled Gaussian weight with gain 2, for layers followed by a
    /// ReLU, and zero bias.
    pub fn random(rng: &mut Rng, c_in: usize, c_out: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Conv2d::random_scaled(rng, c_in, c_out, kernel, geom, 2.0)
    }

    /// Gain 1: variance preserving for layers with no ReLU after them.
    pub fn random_linear(rng: &mut Rng, c_in: usize, c_out: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Conv2d::random_scaled(rng, c_in, c_out, kernel, geom, 1.0)
    }

    /// Weight std `sqrt(gain / fan_in)`, zero bias.
    pub fn random_scaled(
        rng: &mut Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        gain: f64,
    ) -> Self {
        let weight = init::fan_in_normal(rng, Shape::new(c_out, c_in, kernel, kernel), c_in * kernel * kernel, gain);
        Conv2d::from_parts(weight, Some(vec![T::zero(); c_out]), geom).expect("consistent shapes")
    }

    /// All-zero weight and bias.
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Conv2d::from_parts(
            Tensor::zeros([c_out, c_in, kernel, kernel]),
            Some(vec![T::zero(); c_out]),
            geom,
        )
        .expect("consistent shapes")
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape().h
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geom)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
