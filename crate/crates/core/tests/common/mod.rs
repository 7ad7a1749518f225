#![allow(dead_code)]

use sacrfp::init;
use sacrfp::{Architecture, Tensor};

/// Direct nested-loop cross-correlation, written independently of the
/// library kernels.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, dil: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().dims();
    let [co, ci, k, _] = w.shape().dims();
    assert_eq!(c, ci);
    let ke = k + (k - 1) * (dil - 1);
    let oh = (h + 2 * pad - ke) / stride + 1;
    let ow = (wd + 2 * pad - ke) / stride + 1;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for q in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u * dil) as isize - pad as isize;
                                let z = (j * stride + v * dil) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                                    acc += x.at(b, q, y as usize, z as usize) * w.at(o, q, u, v);
                                }
                            }
                        }
                    }
                    out.set(b, o, i, j, acc);
                }
            }
        }
    }
    out
}

/// Spreads a `k x k` kernel over `k_e x k_e` with `r - 1` zeros between taps.
pub fn zero_insert(w: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let [co, ci, k, _] = w.shape().dims();
    let ke = k + (k - 1) * (r - 1);
    let mut out = Tensor::zeros([co, ci, ke, ke]);
    for o in 0..co {
        for q in 0..ci {
            for u in 0..k {
                for v in 0..k {
                    out.set(o, q, u * r, v * r, w.at(o, q, u, v));
                }
            }
        }
    }
    out
}

pub fn normal(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    init::normal(&mut init::rng(seed), shape)
}

/// A few-channel architecture that keeps model tests fast.
pub fn small_arch(stages: usize) -> Architecture {
    Architecture {
        in_channels: 3,
        stem_channels: 8,
        stage_channels: [8, 16, 24][..stages].to_vec(),
        blocks_per_stage: 2,
        pyramid_width: 8,
        sac_rate: 3,
    }
}
