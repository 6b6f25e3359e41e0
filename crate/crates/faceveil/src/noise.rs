//! Noise pool: training-time differentiable corruptions (JPEG approximation,
//! Gaussian noise, resize round-trip) and evaluation-only transforms (median
//! filter, random rotation, center crop). Every op is a pure function of
//! `(image, params, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sample_normal;
use crate::tape::{Tape, Var};
use crate::tensor::{ImageTensor, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseOp {
    Identity,
    /// Block-DCT quantization with a straight-through rounding gradient.
    Jpeg { quality: u32 },
    /// Additive Gaussian noise; variance stated in [-1, 1] units.
    Gaussian { variance: f64 },
    /// Bilinear downscale by `factor` then upscale back to the input size.
    Resize { factor: f64 },
    MedianFilter { kernel: usize },
    /// Rotation by an angle drawn uniformly from [-max_angle_deg, max_angle_deg].
    Rotate { max_angle_deg: f64 },
    /// Central crop of `fraction` of the linear size, resampled back.
    CenterCrop { fraction: f64 },
}

impl NoiseOp {
    pub fn differentiable(&self) -> bool {
        matches!(
            self,
            NoiseOp::Identity | NoiseOp::Jpeg { .. } | NoiseOp::Gaussian { .. } | NoiseOp::Resize { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseOp::Identity => "identity",
            NoiseOp::Jpeg { .. } => "jpeg",
            NoiseOp::Gaussian { .. } => "gaussian",
            NoiseOp::Resize { .. } => "resize",
            NoiseOp::MedianFilter { .. } => "median_filter",
            NoiseOp::Rotate { .. } => "rotate",
            NoiseOp::CenterCrop { .. } => "center_crop",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseOp::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(Error::OutOfRange(format!("jpeg quality {quality} not in 1..=100")));
                }
            }
            NoiseOp::Gaussian { variance } => {
                if variance < 0.0 {
                    return Err(Error::OutOfRange("gaussian variance must be >= 0".into()));
                }
            }
            NoiseOp::Resize { factor } => {
                if !(factor > 0.0 && factor <= 1.0) {
                    return Err(Error::OutOfRange(format!("resize factor {factor} not in (0, 1]")));
                }
            }
            NoiseOp::MedianFilter { kernel } => {
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(Error::OutOfRange("median kernel must be odd".into()));
                }
            }
            NoiseOp::Rotate { max_angle_deg } => {
                if max_angle_deg < 0.0 {
                    return Err(Error::OutOfRange("rotation range must be >= 0".into()));
                }
            }
            NoiseOp::CenterCrop { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::OutOfRange(format!("crop fraction {fraction} not in (0, 1]")));
                }
            }
            NoiseOp::Identity => {}
        }
        Ok(())
    }
}

/// A noise op bound to the seed that fixes its randomness for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedOp {
    pub op: NoiseOp,
    pub seed: u64,
}

/// Apply a differentiable op on a tape. Evaluation-only kinds are rejected.
pub fn apply_node<S: Scalar>(tape: &mut Tape<S>, x: Var, planned: &PlannedOp) -> Result<Var> {
    planned.op.validate()?;
    match planned.op {
        NoiseOp::Identity => Ok(x),
        NoiseOp::Gaussian { variance } => {
            if variance == 0.0 {
                return Ok(x);
            }
            let shape = tape.value(x).shape().to_vec();
            let n: usize = shape.iter().product();
            let std = variance.sqrt();
            let mut rng = ChaCha20Rng::seed_from_u64(planned.seed);
            let field = Tensor::new(
                shape,
                (0..n).map(|_| sample_normal(&mut rng) * std).collect::<Vec<f64>>(),
            );
            let y = tape.add_map(x, &field);
            Ok(tape.clamp(y, -1.0, 1.0))
        }
        NoiseOp::Resize { factor } => {
            let (_, h, w) = tape.value(x).dims3();
            let h2 = ((h as f64 * factor).round() as usize).max(1);
            let w2 = ((w as f64 * factor).round() as usize).max(1);
            if (h2, w2) == (h, w) {
                return Ok(x);
            }
            let small = tape.bilinear_resize(x, h2, w2);
            let back = tape.bilinear_resize(small, h, w);
            Ok(tape.clamp(back, -1.0, 1.0))
        }
        NoiseOp::Jpeg { quality } => {
            let (_, h, w) = tape.value(x).dims3();
            let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
            // to JPEG's level-shifted [−128, 127] range
            let shifted = tape.affine(x, 127.5, -0.5);
            let padded = if (hp, wp) == (h, w) { shifted } else { tape.pad_replicate(shifted, hp, wp) };
            let coeffs = tape.block_dct8(padded);
            let q = quant_map(quality, tape.value(x).dims3().0, hp, wp);
            let inv_q = q.map(|v| 1.0 / v);
            let scaled = tape.mul_map(coeffs, &inv_q);
            let rounded = tape.round_st(scaled);
            let restored = tape.mul_map(rounded, &q);
            let spatial = tape.block_idct8(restored);
            let cropped = if (hp, wp) == (h, w) { spatial } else { tape.crop(spatial, h, w) };
            let back = tape.affine(cropped, 1.0 / 127.5, 0.5 / 127.5);
            Ok(tape.clamp(back, -1.0, 1.0))
        }
        _ => Err(Error::UnknownKind(format!(
            "op '{}' is not differentiable and cannot run on the training path",
            planned.op.name()
        ))),
    }
}

/// Apply any op (training or evaluation kind) at value level.
pub fn apply(op: &NoiseOp, x: &ImageTensor, seed: u64) -> Result<ImageTensor> {
    op.validate()?;
    if op.differentiable() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let y = apply_node(&mut tape, xv, &PlannedOp { op: op.clone(), seed })?;
        return Ok(tape.value(y).clone());
    }
    match *op {
        NoiseOp::MedianFilter { kernel } => Ok(median_filter(x, kernel)),
        NoiseOp::Rotate { max_angle_deg } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let angle = if max_angle_deg == 0.0 {
                0.0
            } else {
                rng.gen_range(-max_angle_deg..=max_angle_deg)
            };
            Ok(rotate_bilinear(x, angle))
        }
        NoiseOp::CenterCrop { fraction } => Ok(center_crop_resize(x, fraction)),
        _ => unreachable!("differentiable kinds handled above"),
    }
}

/// Standard luminance quantization table scaled by quality factor, tiled over
/// all channels and blocks.
fn quant_map(quality: u32, c: usize, h: usize, w: usize) -> Tensor<f64> {
    const BASE: [[f64; 8]; 8] = [
        [16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0],
        [12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0],
        [14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0],
        [14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0],
        [18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0],
        [24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0],
        [49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0],
        [72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0],
    ];
    let scale = if quality < 50 { 5000.0 / quality as f64 } else { 200.0 - 2.0 * quality as f64 };
    let q = |u: usize, v: usize| ((BASE[u][v] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    Tensor::from_fn3(c, h, w, |_, y, x| q(y % 8, x % 8))
}

fn median_filter(x: &ImageTensor, kernel: usize) -> ImageTensor {
    let (c, h, w) = x.dims3();
    let r = kernel as isize / 2;
    let mut window = Vec::with_capacity(kernel * kernel);
    Tensor::from_fn3(c, h, w, |ci, y, xx| {
        window.clear();
        for dy in -r..=r {
            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            for dx in -r..=r {
                let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                window.push(x.at3(ci, sy, sx));
            }
        }
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        window[window.len() / 2]
    })
}

fn rotate_bilinear(x: &ImageTensor, angle_deg: f64) -> ImageTensor {
    let (c, h, w) = x.dims3();
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Tensor::from_fn3(c, h, w, |ci, y, xx| {
        // inverse-map the output pixel into source coordinates
        let dy = y as f64 - cy;
        let dx = xx as f64 - cx;
        let sy = cy + dy * cos - dx * sin;
        let sx = cx + dy * sin + dx * cos;
        if sy < -0.5 || sy > h as f64 - 0.5 || sx < -0.5 || sx > w as f64 - 0.5 {
            return -1.0; // outside the source image: black
        }
        let y0 = sy.floor().clamp(0.0, h as f64 - 1.0) as usize;
        let x0 = sx.floor().clamp(0.0, w as f64 - 1.0) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        let fx = (sx - x0 as f64).clamp(0.0, 1.0);
        let top = x.at3(ci, y0, x0) * (1.0 - fx) + x.at3(ci, y0, x1) * fx;
        let bot = x.at3(ci, y1, x0) * (1.0 - fx) + x.at3(ci, y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy).clamp(-1.0, 1.0)
    })
}

fn center_crop_resize(x: &ImageTensor, fraction: f64) -> ImageTensor {
    let (c, h, w) = x.dims3();
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    if (ch, cw) == (h, w) {
        return x.clone();
    }
    let oy = (h - ch) / 2;
    let ox = (w - cw) / 2;
    let cropped = Tensor::from_fn3(c, ch, cw, |ci, y, xx| x.at3(ci, y + oy, xx + ox));
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(&cropped);
    let back = tape.bilinear_resize(v, h, w);
    tape.value(back).clone()
}

/// Max-abs gradient of a sum probe pushed through the op.
pub fn gradient_probe(op: &NoiseOp, x: &ImageTensor, seed: u64) -> Result<f64> {
    if !op.differentiable() {
        return Err(Error::UnknownKind(format!("op '{}' is not differentiable", op.name())));
    }
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.lift());
    let y = apply_node(&mut tape, xv, &PlannedOp { op: op.clone(), seed })?;
    let probe = tape.sum_all(y);
    let grads = tape.backward(probe);
    let g = grads.get_or_zeros(xv, x.shape());
    let m = g.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if !m.is_finite() {
        return Err(Error::NumericGuard("non-finite gradient through noise op".into()));
    }
    Ok(m)
}

/// Training pool: kinds, parameters, and the per-sample application probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePool {
    pub ops: Vec<NoiseOp>,
    pub prob: f64,
}

impl Default for NoisePool {
    fn default() -> Self {
        NoisePool {
            ops: vec![
                NoiseOp::Identity,
                NoiseOp::Jpeg { quality: 50 },
                NoiseOp::Gaussian { variance: 0.003 },
                NoiseOp::Resize { factor: 0.25 },
            ],
            prob: 0.5,
        }
    }
}

impl NoisePool {
    /// Uniform draw over the configured ops.
    pub fn sample_training_op(&self, seed: u64) -> Result<NoiseOp> {
        if self.ops.is_empty() {
            return Err(Error::EmptySet("noise pool".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(self.ops[rng.gen_range(0..self.ops.len())].clone())
    }

    /// Per-sample plan: with probability `prob` a pool draw, identity otherwise.
    pub fn plan_for_sample(&self, rng: &mut ChaCha20Rng) -> Result<PlannedOp> {
        let apply: f64 = rng.gen();
        let seed: u64 = rng.gen();
        if apply < self.prob {
            Ok(PlannedOp { op: self.sample_training_op(seed)?, seed })
        } else {
            Ok(PlannedOp { op: NoiseOp::Identity, seed })
        }
    }
}

/// The evaluation transform set used by the robustness sweep.
pub fn evaluation_transforms() -> Vec<NoiseOp> {
    vec![
        NoiseOp::Identity,
        NoiseOp::Jpeg { quality: 50 },
        NoiseOp::Gaussian { variance: 0.003 },
        NoiseOp::Resize { factor: 0.5 },
        NoiseOp::MedianFilter { kernel: 5 },
        NoiseOp::Rotate { max_angle_deg: 30.0 },
        NoiseOp::CenterCrop { fraction: 224.0 / 256.0 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn natural_image(hw: usize, seed: u64) -> ImageTensor {
        // smooth gradients plus mild texture, away from the clamp boundaries
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let phase: f64 = rng.gen_range(0.0..3.0);
        Tensor::from_fn3(3, hw, hw, |c, y, x| {
            let v = 0.4 * ((x as f64 / hw as f64) * 3.1 + phase + c as f64).sin()
                + 0.3 * ((y as f64 / hw as f64) * 2.3).cos();
            v.clamp(-0.95, 0.95)
        })
    }

    #[test]
    fn identity_is_bitwise() {
        let x = natural_image(16, 1);
        let y = apply(&NoiseOp::Identity, &x, 7).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn gaussian_zero_variance_unchanged() {
        let x = natural_image(16, 2);
        let y = apply(&NoiseOp::Gaussian { variance: 0.0 }, &x, 7).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn gaussian_empirical_variance() {
        // >= 1e5 pixels on a constant mid-gray image
        let x = Tensor::zeros(&[3, 200, 200]);
        let y = apply(&NoiseOp::Gaussian { variance: 0.003 }, &x, 11).unwrap();
        let n = y.len() as f64;
        let mean: f64 = y.data().iter().sum::<f64>() / n;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(
            (var - 0.003).abs() / 0.003 < 0.10,
            "empirical variance {var} not within 10% of 0.003"
        );
    }

    #[test]
    fn ops_are_seed_deterministic_and_in_range() {
        let x = natural_image(16, 3);
        for op in evaluation_transforms() {
            let a = apply(&op, &x, 99).unwrap();
            let b = apply(&op, &x, 99).unwrap();
            assert!(a.bitwise_eq(&b), "op {} not deterministic", op.name());
            assert!(
                a.data().iter().all(|v| (-1.0..=1.0).contains(v)),
                "op {} left the value range",
                op.name()
            );
        }
    }

    #[test]
    fn resize_factor_one_is_identity() {
        let x = natural_image(16, 4);
        let y = apply(&NoiseOp::Resize { factor: 1.0 }, &x, 0).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let x = natural_image(16, 5);
        let y = apply(&NoiseOp::Rotate { max_angle_deg: 0.0 }, &x, 0).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn jpeg_q100_near_identity() {
        let x = natural_image(32, 6);
        let y = apply(&NoiseOp::Jpeg { quality: 100 }, &x, 0).unwrap();
        let mean_abs =
            x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        assert!(mean_abs <= 0.02, "jpeg(100) changed the image by {mean_abs}");
    }

    #[test]
    fn jpeg_q50_changes_but_preserves_structure() {
        let x = natural_image(32, 7);
        let y = apply(&NoiseOp::Jpeg { quality: 50 }, &x, 0).unwrap();
        let mean_abs =
            x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        assert!(mean_abs > 1e-4, "jpeg(50) should actually quantize");
        assert!(mean_abs < 0.2, "jpeg(50) distortion implausibly large: {mean_abs}");
    }

    #[test]
    fn training_sampler_uniform() {
        let pool = NoisePool::default();
        let mut counts = std::collections::BTreeMap::new();
        for seed in 0..10_000u64 {
            let op = pool.sample_training_op(seed).unwrap();
            *counts.entry(op.name()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        for (&name, &c) in &counts {
            let freq = c as f64 / 10_000.0;
            assert!(
                (freq - 0.25).abs() <= 0.02,
                "op {name} frequency {freq} outside 0.25 +/- 0.02"
            );
        }
        // same seed -> same op
        assert_eq!(
            pool.sample_training_op(123).unwrap(),
            pool.sample_training_op(123).unwrap()
        );
        // singleton pool
        let single = NoisePool { ops: vec![NoiseOp::Jpeg { quality: 50 }], prob: 1.0 };
        for s in 0..20 {
            assert_eq!(single.sample_training_op(s).unwrap().name(), "jpeg");
        }
        let empty = NoisePool { ops: vec![], prob: 0.5 };
        assert!(empty.sample_training_op(0).is_err());
    }

    #[test]
    fn gradient_probes() {
        let x = natural_image(16, 8);
        // jpeg: nonzero finite gradient reaches the input
        let g = gradient_probe(&NoiseOp::Jpeg { quality: 50 }, &x, 0).unwrap();
        assert!(g > 0.0 && g.is_finite());
        // gaussian: identity jacobian on unclamped pixels
        let g = gradient_probe(&NoiseOp::Gaussian { variance: 0.003 }, &x, 3).unwrap();
        assert!(g > 0.0 && g.is_finite());
        // resize: nonzero
        let g = gradient_probe(&NoiseOp::Resize { factor: 0.25 }, &x, 0).unwrap();
        assert!(g > 0.0 && g.is_finite());
        // eval-only op refuses
        assert!(gradient_probe(&NoiseOp::MedianFilter { kernel: 5 }, &x, 0).is_err());
    }

    #[test]
    fn gaussian_gradient_is_identity_on_interior() {
        // noise is constant once sampled, so d(out)/d(in) = 1 where unclamped
        let x = natural_image(16, 9).map(|v| v * 0.5);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.lift());
        let y = apply_node(
            &mut tape,
            xv,
            &PlannedOp { op: NoiseOp::Gaussian { variance: 0.0005 }, seed: 5 },
        )
        .unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        let gx = g.get_or_zeros(xv, x.shape());
        let interior = gx.data().iter().filter(|v| **v == 1.0).count();
        assert!(interior as f64 / gx.len() as f64 > 0.99);
    }

    #[test]
    fn resize_gradient_matches_finite_differences() {
        let x = natural_image(8, 10);
        let planned = PlannedOp { op: NoiseOp::Resize { factor: 0.25 }, seed: 0 };
        let eval = |img: &ImageTensor| -> f64 {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(img);
            let y = apply_node(&mut tape, v, &planned).unwrap();
            let m = tape.mul(y, y);
            let s = tape.sum_all(m);
            tape.value(s).item()
        };
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.lift());
        let y = apply_node(&mut tape, xv, &planned).unwrap();
        let m = tape.mul(y, y);
        let s = tape.sum_all(m);
        let grads = tape.backward(s);
        let gx = grads.get_or_zeros(xv, x.shape());
        let eps = 1e-6;
        for &i in &[0usize, 31, 64, 101, 150, 191] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let an = gx.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-9);
            assert!((fd - an).abs() / denom < 1e-3, "pixel {i}: fd={fd} an={an}");
        }
    }

    #[test]
    fn unknown_params_rejected() {
        let x = natural_image(16, 11);
        assert!(apply(&NoiseOp::Jpeg { quality: 0 }, &x, 0).is_err());
        assert!(apply(&NoiseOp::Resize { factor: 0.0 }, &x, 0).is_err());
        assert!(apply(&NoiseOp::MedianFilter { kernel: 4 }, &x, 0).is_err());
        assert!(apply(&NoiseOp::CenterCrop { fraction: 1.5 }, &x, 0).is_err());
    }
}
