//! Plain-to-SAC checkpoint conversion and output-equality verification.

use crate::checkpoint::{Checkpoint, LoadMode};
use crate::error::Result;
use crate::init;
use crate::model::{DenseModel, ModelSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Largest accepted output difference after conversion, in `f32`. Ten times
/// the accumulation error observed through the default model's depth.
pub const VERIFY_TOLERANCE: f32 = 1e-5;
pub const VERIFY_INPUTS: usize = 10;

#[derive(Debug, Clone)]
pub struct Conversion {
    /// The model the checkpoint describes, reduced to plain convolutions.
    pub plain: DenseModel<f32>,
    /// The SAC model written out.
    pub sac: DenseModel<f32>,
    /// The input already held SAC parameters; conversion was a no-op.
    pub was_sac: bool,
}

/// Loads `ckpt` into `spec`'s architecture and variant (its `use_sac` flag is
/// ignored: the checkpoint decides) and converts every 3x3 conv to SAC.
pub fn convert_checkpoint(ckpt: &Checkpoint, spec: &ModelSpec) -> Result<Conversion> {
    let mut spec = spec.clone();
    spec.variant.use_sac = ckpt.has_sac();
    let mut loaded = DenseModel::<f32>::new(&spec, 0)?;
    ckpt.apply_to(&mut loaded, LoadMode::Strict)?;
    if spec.variant.use_sac {
        Ok(Conversion {
            plain: loaded.to_plain(),
            sac: loaded,
            was_sac: true,
        })
    } else {
        let mut sac = loaded.clone();
        sac.convert_to_sac(spec.arch.sac_rate)?;
        Ok(Conversion {
            plain: loaded,
            sac,
            was_sac: false,
        })
    }
}

/// Seeded standard-normal images `(1, c, size, size)`.
pub fn probe_images(seed: u64, count: usize, channels: usize, size: usize) -> Vec<Tensor<f32>> {
    let mut rng = init::rng(seed);
    (0..count)
        .map(|_| init::normal(&mut rng, [1, channels, size, size]))
        .collect()
}

/// Largest absolute difference over every pyramid feature and every logit.
pub fn max_output_diff(a: &DenseModel<f32>, b: &DenseModel<f32>, images: &[Tensor<f32>]) -> Result<f32> {
    let mut worst = 0.0f32;
    for image in images {
        let (fa, za) = outputs(a, image)?;
        let (fb, zb) = outputs(b, image)?;
        for (x, y) in fa.iter().chain(&za).zip(fb.iter().chain(&zb)) {
            worst = worst.max(x.max_abs_diff(y)?);
        }
    }
    Ok(worst)
}

type Outputs = (Vec<Tensor<f32>>, Vec<Tensor<f32>>);

fn outputs(m: &DenseModel<f32>, image: &Tensor<f32>) -> Result<Outputs> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let feats = m.pyramid.forward(&mut tape, x)?;
    let logits = feats
        .iter()
        .map(|&f| m.head.forward(&mut tape, f))
        .collect::<Result<Vec<_>>>()?;
    let read = |vs: &[crate::tape::Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((read(&feats), read(&logits)))
}
