//! Semantic perturbation machinery: the perturbation encoder (a structural
//! twin of the generator encoder), per-layer feature fusion between the two
//! encoders, decoder-side clean-branch injection, and the clamped
//! perturbation-magnitude loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{AttributeVector, FeaturePyramid, Generator, GeneratorParams};
use crate::nn::{Mounted, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{ImageTensor, Scalar};

/// Perturbation-encoder parameters, initialized as a bitwise copy of the
/// generator encoder.
#[derive(Clone, Debug)]
pub struct PerturbEncoderParams {
    pub params: ParamSet,
    /// Identifier of the encoder snapshot this was copied from.
    pub init_source: String,
}

impl PerturbEncoderParams {
    pub fn from_encoder(enc: &ParamSet, source_id: impl Into<String>) -> Self {
        PerturbEncoderParams { params: enc.snapshot(), init_source: source_id.into() }
    }
}

/// Fusion and clamp hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Encoder-side fusion weight toward the clean features.
    pub beta: f64,
    /// Decoder-side injection weight toward the clean branch.
    pub gamma: f64,
    /// Perturbation-norm clamp floor, stated at 3x256x256 reference scale.
    pub sigma1: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { beta: 0.5, gamma: 0.3, sigma1: 30.0 }
    }
}

/// Element count of the reference resolution the clamp floor is stated at.
pub const SIGMA1_REFERENCE_ELEMS: usize = 3 * 256 * 256;

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::OutOfRange(format!("beta {} not in [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::OutOfRange(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if self.sigma1 <= 0.0 {
            return Err(Error::OutOfRange(format!("sigma1 {} must be > 0", self.sigma1)));
        }
        Ok(())
    }

    /// The clamp floor rescaled to an image with `elems` scalars, preserving
    /// its geometric meaning across resolutions.
    pub fn effective_sigma1(&self, elems: usize) -> f64 {
        self.sigma1 * (elems as f64 / SIGMA1_REFERENCE_ELEMS as f64).sqrt()
    }
}

/// Per-layer convex combination `beta * ft + (1 - beta) * perb`.
pub fn fuse_features(
    ft: &FeaturePyramid,
    perb: &FeaturePyramid,
    beta: f64,
) -> Result<FeaturePyramid> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!("beta {beta} not in [0, 1]")));
    }
    if ft.depth() != perb.depth() {
        return Err(Error::ShapeMismatch {
            expected: format!("pyramid depth {}", ft.depth()),
            got: format!("{}", perb.depth()),
        });
    }
    let layers = ft
        .layers
        .iter()
        .zip(&perb.layers)
        .map(|(a, b)| {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", a.shape()),
                    got: format!("{:?}", b.shape()),
                });
            }
            Ok(a.zip_map(b, |x, y| beta * x + (1.0 - beta) * y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { layers })
}

/// Handles to the mounted components needed to build a protected image.
pub struct ProtectMounts<'a> {
    pub gen: &'a Generator,
    pub g_enc: &'a Mounted,
    pub g_dec: &'a Mounted,
    pub e_adv: &'a Mounted,
}

/// Tape nodes produced while building a protected image.
pub struct ProtectedGraph {
    /// The protected image.
    pub out: Var,
    /// Clean encoder pyramid of `x_cov` (reusable for reconstruction terms).
    pub clean_pyramid: Vec<Var>,
    /// The clean-branch attribute decode `G_dec(G_enc(x_cov), att_b)`, which
    /// doubles as the perturbation-loss reference image.
    pub clean_decode: Var,
}

/// Build the protected-image graph on a tape.
///
/// Both encoders run on `x_cov` in lockstep and their pyramids are fused per
/// layer with weight `beta`; the fused pyramid is decoded under `att_b`, and
/// after each decoder layer the output is blended with the corresponding
/// layer of a parallel clean-branch decode with weight `gamma`.
#[allow(clippy::needless_range_loop)] // j is the decoder layer index
pub fn generate_protected_graph<S: Scalar>(
    tape: &mut Tape<S>,
    mounts: &ProtectMounts<'_>,
    x_cov: Var,
    att_b: Var,
    cfg: &FusionConfig,
) -> ProtectedGraph {
    let gen = mounts.gen;
    let clean_pyr = gen.enc.forward(tape, mounts.g_enc, x_cov);
    let perb_pyr = gen.enc.forward(tape, mounts.e_adv, x_cov);
    let fused: Vec<Var> = clean_pyr
        .iter()
        .zip(&perb_pyr)
        .map(|(&a, &b)| tape.blend(a, b, cfg.beta))
        .collect();
    let clean_outs = gen.dec.forward_layers(tape, mounts.g_dec, &clean_pyr, att_b);
    let mut prev: Option<Var> = None;
    for j in 0..gen.dec.depth() {
        let input = gen.dec.layer_input(tape, j, prev, &fused, att_b);
        let adv = gen.dec.layer_apply(tape, mounts.g_dec, j, input);
        let out = tape.blend(clean_outs[j], adv, cfg.gamma);
        prev = Some(out);
    }
    ProtectedGraph {
        out: prev.unwrap(),
        clean_pyramid: clean_pyr,
        clean_decode: *clean_outs.last().unwrap(),
    }
}

/// The protected image node alone.
pub fn generate_protected_node<S: Scalar>(
    tape: &mut Tape<S>,
    mounts: &ProtectMounts<'_>,
    x_cov: Var,
    att_b: Var,
    cfg: &FusionConfig,
) -> Var {
    generate_protected_graph(tape, mounts, x_cov, att_b, cfg).out
}

/// Value-level protected-image generation.
pub fn generate_protected(
    gen: &Generator,
    g_params: &GeneratorParams,
    e_adv: Option<&PerturbEncoderParams>,
    x_cov: &ImageTensor,
    att_b: &AttributeVector,
    cfg: &FusionConfig,
) -> Result<ImageTensor> {
    let e_adv = e_adv.ok_or_else(|| {
        Error::MissingComponent("perturbation encoder not initialized (stage 2 required)".into())
    })?;
    cfg.validate()?;
    gen.check_image(x_cov)?;
    gen.check_att(att_b)?;
    let mut tape = Tape::<f64>::new();
    let g_enc = g_params.enc.mount(&mut tape);
    let g_dec = g_params.dec.mount(&mut tape);
    let e_m = e_adv.params.mount(&mut tape);
    let x = tape.constant(x_cov);
    let att = tape.constant(&att_b.to_tensor());
    let mounts = ProtectMounts { gen, g_enc: &g_enc, g_dec: &g_dec, e_adv: &e_m };
    let out = generate_protected_node(&mut tape, &mounts, x, att, cfg);
    Ok(tape.value(out).clone())
}

/// The pure adversarial decode (fused pyramid, no clean-branch injection).
pub fn decode_fused(
    gen: &Generator,
    g_params: &GeneratorParams,
    e_adv: &PerturbEncoderParams,
    x_cov: &ImageTensor,
    att_b: &AttributeVector,
    beta: f64,
) -> Result<ImageTensor> {
    let cfg = FusionConfig { beta, gamma: 0.0, sigma1: 30.0 };
    generate_protected(gen, g_params, Some(e_adv), x_cov, att_b, &cfg)
}

/// `max(sigma1, ||x_adv - x_ref||_2)` over one image. The norm is the
/// unreduced Euclidean norm across all pixels; ties take the constant branch.
pub fn perturbation_loss(
    x_adv: &ImageTensor,
    x_ref: &ImageTensor,
    sigma1: f64,
) -> Result<f64> {
    if sigma1 <= 0.0 {
        return Err(Error::OutOfRange(format!("sigma1 {sigma1} must be > 0")));
    }
    if x_adv.shape() != x_ref.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x_adv.shape()),
            got: format!("{:?}", x_ref.shape()),
        });
    }
    let norm = x_adv
        .data()
        .iter()
        .zip(x_ref.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(if norm > sigma1 { norm } else { sigma1 })
}

/// On-tape form of [`perturbation_loss`]; the reference image is expected to
/// be a detached/constant node.
pub fn perturbation_loss_node<S: Scalar>(
    tape: &mut Tape<S>,
    x_adv: Var,
    x_ref: Var,
    sigma1: f64,
) -> Var {
    let d = tape.sub(x_adv, x_ref);
    let n = tape.norm2(d);
    tape.max_with_const(n, sigma1)
}
