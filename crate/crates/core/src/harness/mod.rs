//! Synthetic multi-scale mask prediction: data, training, metrics and
//! switch-map export.

mod data;
mod eval;
mod pnm;
mod train;

pub use data::{gen_dataset, mask_sizes, ObjectKind, SceneObject, SyntheticScene};
pub use eval::{evaluate, iou, Metrics};
pub use pnm::{encode_pgm, read_pnm, write_pgm, Pnm};
pub use train::{batch, train, train_with, TrainConfig, Trained, EVAL_STREAM};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Switch maps of every SAC layer for one image, in the order of
/// [`DenseModel::sac_layers`]. With a recursive pyramid the map of the last
/// unrolled step that ran the layer is kept.
pub fn switch_maps(model: &DenseModel<f32>, image: &Tensor<f32>) -> Result<Vec<(String, Tensor<f32>)>> {
    let layers = model.sac_layers();
    if layers.is_empty() {
        return Err(Error::usage("model has no SAC layers"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    model.forward(&mut tape, x)?;
    layers
        .into_iter()
        .map(|(name, sac)| {
            let v = tape
                .marked(sac.switch_key())
                .ok_or_else(|| Error::usage(format!("layer {name} did not run")))?;
            Ok((name, tape.value(v).item(0)))
        })
        .collect()
}

/// Maps a switch value to a grey level: `round(255 * clamp(s, 0, 1))`.
/// Dark pixels lean on the large-rate branch.
pub fn switch_level(s: f32) -> u8 {
    (255.0 * s.clamp(0.0, 1.0)).round() as u8
}

/// File name for a layer path: `/` becomes `.`.
pub fn switch_map_file(layer: &str) -> String {
    format!("{}.pgm", layer.replace('/', "."))
}

/// Writes one PGM per SAC layer whose path contains `selector` (all layers
/// when `None`) into `dir`, for the first image of the batch.
pub fn export_switch_maps(
    model: &DenseModel<f32>,
    image: &Tensor<f32>,
    selector: Option<&str>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = switch_maps(model, &image.item(0))?;
    let chosen: Vec<_> = maps
        .into_iter()
        .filter(|(name, _)| selector.is_none_or(|s| name.contains(s)))
        .collect();
    if chosen.is_empty() {
        return Err(Error::usage(format!(
            "no SAC layer matches {:?}",
            selector.unwrap_or_default()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(chosen.len());
    for (name, map) in chosen {
        let s = map.shape();
        let pixels: Vec<u8> = map.data()[..s.plane()].iter().map(|&v| switch_level(v)).collect();
        let path = dir.join(switch_map_file(&name));
        write_pgm(&path, s.w, s.h, &pixels)?;
        written.push(path);
    }
    Ok(written)
}
