//! Trainable tensors, the parameter-visiting [`Module`] trait and SGD.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::{Element, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter on a tape. Cloning a [`Param`] mints a new id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A tensor that requires gradients. `grad` is `None` until a backward pass
/// reaches it, and is cleared by [`sgd_step`].
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    value: Tensor<T>,
    /// Logical extents as stored in checkpoints, e.g. `[c_out]` for a bias.
    dims: Vec<usize>,
    grad: Option<Tensor<T>>,
    velocity: Option<Tensor<T>>,
}

impl<T: Clone> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            value: self.value.clone(),
            dims: self.dims.clone(),
            grad: self.grad.clone(),
            velocity: self.velocity.clone(),
        }
    }
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let dims = value.shape().dims().to_vec();
        Param::with_dims(value, dims)
    }

    /// Bias-style parameter with one value per channel.
    pub fn vector(values: Vec<T>) -> Self {
        let len = values.len();
        let value = Tensor::from_vec([1, len, 1, 1], values).expect("length matches");
        Param::with_dims(value, vec![len])
    }

    fn with_dims(value: Tensor<T>, dims: Vec<usize>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        Param {
            id: ParamId::fresh(),
            value,
            dims,
            grad: None,
            velocity: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    /// Overwrites the value in place; the length must not change.
    pub fn set_data(&mut self, data: &[T]) -> Result<()> {
        if data.len() != self.value.len() {
            return Err(Error::dim(
                "set_data",
                format!("{} values for {:?}", data.len(), self.dims),
            ));
        }
        self.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    pub fn fill(&mut self, v: T) {
        self.value.data_mut().fill(v);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        match self.grad.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => {
                if g.shape() != self.value.shape() {
                    return Err(Error::dim(
                        "accumulate_grad",
                        format!("{} vs {}", g.shape(), self.value.shape()),
                    ));
                }
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Anything that owns named parameters. Names are `/`-separated paths.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name.to_string()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value().len());
        n
    }

    /// Adds every gradient in `grads` to the parameter it belongs to.
    fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut("", &mut |_, p| {
            if let Some(g) = grads.for_param(p.id()) {
                if let Err(e) = p.accumulate_grad(g) {
                    result = Err(e);
                }
            }
        });
        result
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.clear_grad());
    }
}

/// Joins a path prefix and a child name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Momentum SGD: `v <- momentum * v + g; p <- p - lr * v`, then clears grads.
///
/// Fails without touching anything if some parameter has no gradient.
pub fn sgd_step<T: Element, M: Module<T> + ?Sized>(model: &mut M, lr: T, momentum: T) -> Result<()> {
    let mut missing = Vec::new();
    model.visit("", &mut |name, p| {
        if p.grad.is_none() {
            missing.push(name.to_string());
        }
    });
    if !missing.is_empty() {
        return Err(Error::usage(format!(
            "sgd_step: no gradient for {}",
            missing.join(", ")
        )));
    }
    model.visit_mut("", &mut |_, p| {
        let g = p.grad.take().expect("checked above");
        let v = p.velocity.get_or_insert_with(|| Tensor::zeros(g.shape()));
        for ((vi, &gi), pi) in v
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(p.value.data_mut().iter_mut())
        {
            *vi = momentum * *vi + gi;
            *pi = *pi - lr * *vi;
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Single(Param<f64>);

    impl Module<f64> for Single {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "p"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "p"), &mut self.0);
        }
    }

    fn single(v: f64) -> Single {
        Single(Param::new(Tensor::scalar(v)))
    }

    #[test]
    fn plain_step() {
        let mut m = single(1.0);
        m.0.accumulate_grad(&Tensor::scalar(1.0)).unwrap();
        sgd_step(&mut m, 0.1, 0.0).unwrap();
        assert!((m.0.value().data()[0] - 0.9).abs() < 1e-15);
        assert!(m.0.grad().is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let mut m = single(1.0);
        for _ in 0..2 {
            m.0.accumulate_grad(&Tensor::scalar(1.0)).unwrap();
            sgd_step(&mut m, 0.1, 0.9).unwrap();
        }
        // v1 = 1, p1 = 0.9; v2 = 1.9, p2 = 0.9 - 0.19
        assert!((m.0.value().data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut m = single(2.5);
        m.0.accumulate_grad(&Tensor::scalar(0.0)).unwrap();
        sgd_step(&mut m, 0.1, 0.9).unwrap();
        assert_eq!(m.0.value().data()[0], 2.5);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut m = single(1.0);
        assert!(matches!(sgd_step(&mut m, 0.1, 0.0), Err(Error::Usage(_))));
        assert_eq!(m.0.value().data()[0], 1.0);
    }

    #[test]
    fn clone_gets_new_id() {
        let p = Param::new(Tensor::<f32>::zeros([1, 1, 1, 1]));
        assert_ne!(p.id(), p.clone().id());
    }
}
