//! Attribute-conditional generator (encoder/decoder), shared-trunk
//! discriminator, and the stage-1 losses: adversarial real/fake, attribute
//! classification, and L1 reconstruction.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DecoderNet, DiscriminatorNet, EncoderNet, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{ImageTensor, Scalar, Tensor};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary attribute flags conditioning generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVector(Vec<u8>);

impl AttributeVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        for (i, &b) in bits.iter().enumerate() {
            if b > 1 {
                return Err(Error::NonBinaryAttribute { value: b.to_string(), index: i });
            }
        }
        Ok(AttributeVector(bits))
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits: Vec<u8> = s
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::NonBinaryAttribute { value: other.to_string(), index: i }),
            })
            .collect::<Result<_>>()?;
        Ok(AttributeVector(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn flipped(&self, index: usize) -> Result<Self> {
        if index >= self.0.len() {
            return Err(Error::OutOfRange(format!(
                "attribute index {index} out of range (n = {})",
                self.0.len()
            )));
        }
        let mut bits = self.0.clone();
        bits[index] ^= 1;
        Ok(AttributeVector(bits))
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.0.len()], self.0.iter().map(|&b| b as f64).collect())
    }
}

/// Ordered per-encoder-layer feature maps, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub layers: Vec<Tensor<f64>>,
}

impl FeaturePyramid {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Encoder/decoder parameter pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub enc: ParamSet,
    pub dec: ParamSet,
}

impl GeneratorParams {
    pub fn bitwise_eq(&self, other: &GeneratorParams) -> bool {
        self.enc.bitwise_eq(&other.enc) && self.dec.bitwise_eq(&other.dec)
    }
}

/// Architecture of the attribute-conditional generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCfg {
    pub image_hw: (usize, usize),
    pub in_ch: usize,
    pub widths: Vec<usize>,
    pub n_att: usize,
    pub kernel: usize,
    pub leak: f64,
}

impl Default for GeneratorCfg {
    fn default() -> Self {
        GeneratorCfg {
            image_hw: (16, 16),
            in_ch: 3,
            widths: vec![8, 16, 24, 32],
            n_att: 13,
            kernel: 4,
            leak: 0.2,
        }
    }
}

impl GeneratorCfg {
    pub fn build(&self) -> Generator {
        let enc = EncoderNet {
            cfg: crate::nn::ConvStackCfg {
                in_ch: self.in_ch,
                widths: self.widths.clone(),
                kernel: self.kernel,
                stride: 2,
                pad: if self.kernel == 2 { 0 } else { 1 },
                leak: self.leak,
            },
        };
        let dec = DecoderNet {
            enc_widths: self.widths.clone(),
            out_ch: self.in_ch,
            n_att: self.n_att,
            kernel: self.kernel,
            stride: 2,
            pad: if self.kernel == 2 { 0 } else { 1 },
        };
        Generator { enc, dec, image_hw: self.image_hw, n_att: self.n_att }
    }
}

/// The generator: encoder producing a feature pyramid, attribute-conditioned
/// decoder consuming the whole pyramid.
#[derive(Clone, Debug)]
pub struct Generator {
    pub enc: EncoderNet,
    pub dec: DecoderNet,
    pub image_hw: (usize, usize),
    pub n_att: usize,
}

impl Generator {
    pub fn init_params(&self, rng: &mut ChaCha20Rng) -> GeneratorParams {
        GeneratorParams { enc: self.enc.init_params(rng), dec: self.dec.init_params(rng) }
    }

    pub fn check_image(&self, x: &ImageTensor) -> Result<()> {
        let (c, h, w) = x.dims3();
        if c != self.enc.cfg.in_ch || (h, w) != self.image_hw {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, {}, {}]", self.enc.cfg.in_ch, self.image_hw.0, self.image_hw.1),
                got: format!("[{c}, {h}, {w}]"),
            });
        }
        Ok(())
    }

    pub fn check_att(&self, att: &AttributeVector) -> Result<()> {
        if att.len() != self.n_att {
            return Err(Error::AttributeLength { expected: self.n_att, got: att.len() });
        }
        Ok(())
    }

    /// Value-level encode.
    pub fn encode(&self, params: &GeneratorParams, x: &ImageTensor) -> Result<FeaturePyramid> {
        self.check_image(x)?;
        let mut tape = Tape::<f64>::new();
        let m = params.enc.mount(&mut tape);
        let xv = tape.constant(x);
        let pyr = self.enc.forward(&mut tape, &m, xv);
        Ok(FeaturePyramid {
            layers: pyr.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    /// Value-level decode of a pyramid under an attribute condition.
    pub fn decode(
        &self,
        params: &GeneratorParams,
        z: &FeaturePyramid,
        att: &AttributeVector,
    ) -> Result<ImageTensor> {
        self.check_att(att)?;
        if z.depth() != self.enc.depth() {
            return Err(Error::ShapeMismatch {
                expected: format!("pyramid depth {}", self.enc.depth()),
                got: format!("{}", z.depth()),
            });
        }
        let mut tape = Tape::<f64>::new();
        let m = params.dec.mount(&mut tape);
        let pyr: Vec<Var> = z.layers.iter().map(|t| tape.constant(t)).collect();
        let att_v = tape.constant(&att.to_tensor());
        let out = self.dec.forward(&mut tape, &m, &pyr, att_v);
        Ok(tape.value(out).clone())
    }

    /// `decode(encode(x), att)` in one pass.
    pub fn edit(
        &self,
        params: &GeneratorParams,
        x: &ImageTensor,
        att: &AttributeVector,
    ) -> Result<ImageTensor> {
        self.check_image(x)?;
        self.check_att(att)?;
        let mut tape = Tape::<f64>::new();
        let em = params.enc.mount(&mut tape);
        let dm = params.dec.mount(&mut tape);
        let xv = tape.constant(x);
        let att_v = tape.constant(&att.to_tensor());
        let pyr = self.enc.forward(&mut tape, &em, xv);
        let out = self.dec.forward(&mut tape, &dm, &pyr, att_v);
        Ok(tape.value(out).clone())
    }
}

// ---- loss scalar forms (pinned by unit tests) -------------------------------

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `L_D = -log D(x_cov) - log(1 - D(x_adv))`, `L_G = -log D(x_adv)` from
/// discriminator probabilities.
pub fn gan_losses_from_probs(p_cov: f64, p_adv: f64) -> Result<(f64, f64)> {
    if !p_cov.is_finite() || !p_adv.is_finite() {
        return Err(Error::NumericGuard("discriminator probability not finite".into()));
    }
    let l_d = -clamp_prob(p_cov).ln() - (1.0 - clamp_prob(p_adv)).ln();
    let l_g = -clamp_prob(p_adv).ln();
    Ok((l_d, l_g))
}

/// Per-bit binary cross-entropy summed over bits.
pub fn bce_sum_from_probs(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::AttributeLength { expected: labels.len(), got: probs.len() });
    }
    let mut acc = 0.0;
    for (i, (&p, &a)) in probs.iter().zip(labels).enumerate() {
        if a > 1 {
            return Err(Error::NonBinaryAttribute { value: a.to_string(), index: i });
        }
        if !p.is_finite() {
            return Err(Error::NumericGuard("attribute probability not finite".into()));
        }
        let pc = clamp_prob(p);
        acc -= a as f64 * pc.ln() + (1.0 - a as f64) * (1.0 - pc).ln();
    }
    Ok(acc)
}

/// Mean-over-elements L1 between two same-shape tensors.
pub fn l1_mean(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

// ---- on-tape loss builders (training path) ----------------------------------

/// `-log clamp(p)` summed to a scalar node.
fn neg_log<S: Scalar>(tape: &mut Tape<S>, p: Var) -> Var {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = tape.ln(c);
    let s = tape.sum_all(l);
    tape.scale(s, -1.0)
}

/// `-log clamp(1 - p)` summed to a scalar node.
fn neg_log_one_minus<S: Scalar>(tape: &mut Tape<S>, p: Var) -> Var {
    let om = tape.affine(p, -1.0, 1.0);
    neg_log(tape, om)
}

/// Discriminator and generator real/fake losses from the probability nodes.
pub fn gan_loss_nodes<S: Scalar>(tape: &mut Tape<S>, p_cov: Var, p_adv: Var) -> (Var, Var) {
    let d_real = neg_log(tape, p_cov);
    let d_fake = neg_log_one_minus(tape, p_adv);
    let l_d = tape.weighted_sum(&[(d_real, 1.0), (d_fake, 1.0)], 0.0);
    let l_g = neg_log(tape, p_adv);
    (l_d, l_g)
}

/// The generator-side real/fake term alone: `-log D(x_adv)`.
pub fn generator_loss_node<S: Scalar>(tape: &mut Tape<S>, p_adv: Var) -> Var {
    neg_log(tape, p_adv)
}

/// Summed per-bit BCE of attribute probabilities against a fixed label vector.
pub fn bce_sum_node<S: Scalar>(tape: &mut Tape<S>, probs: Var, labels: &AttributeVector) -> Var {
    let lab = labels.to_tensor();
    let one_minus_lab = lab.map(|v| 1.0 - v);
    let c = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_p = tape.ln(c);
    let om = tape.affine(probs, -1.0, 1.0);
    let omc = tape.clamp(om, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_omp = tape.ln(omc);
    let t1 = tape.mul_map(ln_p, &lab);
    let t2 = tape.mul_map(ln_omp, &one_minus_lab);
    let s = tape.add(t1, t2);
    let total = tape.sum_all(s);
    tape.scale(total, -1.0)
}

/// Mean-over-elements L1 between two nodes.
pub fn l1_mean_node<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.mean_all(ad)
}

// ---- value-level loss ops ----------------------------------------------------

/// Run the discriminator on both images and compute `(L_D, L_G)`.
pub fn gan_losses(
    disc: &DiscriminatorNet,
    d_params: &ParamSet,
    x_cov: &ImageTensor,
    x_adv: &ImageTensor,
) -> Result<(f64, f64)> {
    let mut tape = Tape::<f64>::new();
    let dm = d_params.mount(&mut tape);
    let cov = tape.constant(x_cov);
    let adv = tape.constant(x_adv);
    let (p_cov, _) = disc.forward(&mut tape, &dm, cov);
    let (p_adv, _) = disc.forward(&mut tape, &dm, adv);
    gan_losses_from_probs(tape.value(p_cov).data()[0], tape.value(p_adv).data()[0])
}

/// Attribute BCE on the discriminator's attribute head: the D side scores the
/// clean image against its true attributes, the G side scores the generated
/// image against the requested attributes.
pub fn attribute_losses(
    disc: &DiscriminatorNet,
    d_params: &ParamSet,
    x_cov: &ImageTensor,
    att_a: &AttributeVector,
    x_gen: &ImageTensor,
    att_b: &AttributeVector,
) -> Result<(f64, f64)> {
    let mut tape = Tape::<f64>::new();
    let dm = d_params.mount(&mut tape);
    let cov = tape.constant(x_cov);
    let gen = tape.constant(x_gen);
    let (_, att_cov) = disc.forward(&mut tape, &dm, cov);
    let (_, att_gen) = disc.forward(&mut tape, &dm, gen);
    let l_d = bce_sum_from_probs(tape.value(att_cov).data(), att_a.bits())?;
    let l_g = bce_sum_from_probs(tape.value(att_gen).data(), att_b.bits())?;
    Ok((l_d, l_g))
}

/// Mean-reduced L1 reconstruction loss.
pub fn reconstruction_loss(x_hat: &ImageTensor, x_cov: &ImageTensor) -> Result<f64> {
    l1_mean(x_hat, x_cov)
}
