//! Switchable atrous convolution (SAC) and recursive feature pyramids (RFP)
//! on a small CPU tensor engine with tape-based reverse-mode gradients.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`tape`], [`param`]: NCHW tensors, the numeric
//!   primitives, gradient recording and SGD.
//! - [`sac`]: the switch function, global-context modules and the
//!   locked dual-rate convolution, with conversion from a plain 3x3 conv.
//! - [`backbone`], [`rfp`], [`model`]: a toy bottleneck backbone with feedback
//!   injection, the FPN / ASPP connector / fusion module, and the unrolled
//!   pyramid with a dense prediction head.
//! - [`checkpoint`], [`convert`]: the `RFPK` named-tensor archive and
//!   plain-to-SAC conversion with output verification.
//! - [`harness`]: synthetic scenes, training, evaluation and switch-map export.
//! - [`gradcheck`]: central-difference verification of every layer type.

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod convert;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod kernels;
pub mod model;
pub mod param;
pub mod rfp;
pub mod sac;
pub mod tape;
pub mod tensor;

pub use backbone::{Backbone, BackboneConfig, Block, Stage};
pub use checkpoint::{Checkpoint, LoadMode};
pub use conv::Conv2d;
pub use error::{Error, LoadReport, Result};
pub use kernels::{ConvGeometry, ResizeMode};
pub use model::{Architecture, DenseModel, ModelSpec, Variant};
pub use param::{sgd_step, Module, Param, ParamId};
pub use rfp::{AsppConnector, Fpn, FusionModule, RfpConfig, RfpModel};
pub use sac::{ConvLayer, GlobalContext, SacConv, SwitchFunction};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Element, Shape, Tensor};
