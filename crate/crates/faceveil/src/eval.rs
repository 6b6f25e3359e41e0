//! Evaluation harness: attack/erasion success rates, image-quality metrics,
//! FGSM/PGD baselines, and the robustness sweep over image-processing
//! transforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{self, NoiseOp};
use crate::surrogate::{cosine_similarity, embed, SurrogateModel, ThresholdKind};
use crate::tape::Tape;
use crate::tensor::{ImageTensor, Tensor};

/// Attack success rate: fraction of protected images whose similarity to the
/// target strictly exceeds the attack threshold.
pub fn asr(model: &SurrogateModel, protected: &[ImageTensor], x_target: &ImageTensor) -> Result<f64> {
    let tau = model.tau(ThresholdKind::Attack)?;
    let sims = similarities_to_target(model, protected, x_target)?;
    asr_from_similarities(&sims, tau)
}

/// Erasion success rate: fraction of restored images whose similarity to the
/// target is strictly below the erasion threshold.
pub fn esr(model: &SurrogateModel, restored: &[ImageTensor], x_target: &ImageTensor) -> Result<f64> {
    let tau = model.tau(ThresholdKind::Erasion)?;
    let sims = similarities_to_target(model, restored, x_target)?;
    esr_from_similarities(&sims, tau)
}

pub fn similarities_to_target(
    model: &SurrogateModel,
    images: &[ImageTensor],
    x_target: &ImageTensor,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptySet("evaluation image set".into()));
    }
    let target = embed(model, x_target)?;
    images
        .iter()
        .map(|x| {
            let e = embed(model, x)?;
            cosine_similarity(&e, &target)
        })
        .collect()
}

/// Strict `> tau` indicator mean.
pub fn asr_from_similarities(sims: &[f64], tau: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::EmptySet("similarity set".into()));
    }
    Ok(sims.iter().filter(|&&s| s > tau).count() as f64 / sims.len() as f64)
}

/// Strict `< tau` indicator mean.
pub fn esr_from_similarities(sims: &[f64], tau: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::EmptySet("similarity set".into()));
    }
    Ok(sims.iter().filter(|&&s| s < tau).count() as f64 / sims.len() as f64)
}

/// PSNR that serializes its +inf sentinel losslessly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => Ok(Psnr(n.as_f64().unwrap_or(f64::INFINITY))),
            serde_json::Value::String(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            other => Err(serde::de::Error::custom(format!("bad psnr value {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub l1: f64,
    pub mse: f64,
    pub psnr: Psnr,
}

/// Mean L1, MSE, and PSNR (peak-to-peak 2 for `[-1, 1]` images; +inf when
/// identical).
pub fn quality_metrics(a: &ImageTensor, b: &ImageTensor) -> Result<QualityMetrics> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let n = a.len() as f64;
    let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() };
    Ok(QualityMetrics { l1, mse, psnr: Psnr(psnr) })
}

/// Mean quality over paired sets.
pub fn mean_quality(a: &[ImageTensor], b: &[ImageTensor]) -> Result<QualityMetrics> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::EmptySet("paired quality sets".into()));
    }
    let mut l1 = 0.0;
    let mut mse = 0.0;
    for (x, y) in a.iter().zip(b) {
        let q = quality_metrics(x, y)?;
        l1 += q.l1;
        mse += q.mse;
    }
    l1 /= a.len() as f64;
    mse /= a.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() };
    Ok(QualityMetrics { l1, mse, psnr: Psnr(psnr) })
}

/// Mean `1 - cos(FR_i(x), FR_i(target))` across the given models, with its
/// gradient with respect to the input image.
fn ensemble_target_loss_grad(
    models: &[SurrogateModel],
    x: &ImageTensor,
    x_target: &ImageTensor,
) -> Result<(f64, Tensor<f64>)> {
    if models.is_empty() {
        return Err(Error::EmptySet("model ensemble".into()));
    }
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.lift());
    let mut terms = Vec::with_capacity(models.len());
    for m in models {
        let target = embed(m, x_target)?;
        let mm = m.mount(&mut tape);
        let e = m.embed_on_tape(&mut tape, &mm, xv);
        let t = tape.constant(&Tensor::new(vec![target.dim()], target.values().to_vec()));
        let cos = tape.dot(e, t);
        terms.push(tape.affine(cos, -1.0, 1.0));
    }
    let loss = tape.mean_of(&terms);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss);
    Ok((value, grads.get_or_zeros(xv, x.shape()).to_f64()))
}

/// Single signed-gradient step toward the target, clamped to `[-1, 1]`.
/// `eps` is in `[-1, 1]` units.
pub fn fgsm_baseline(
    models: &[SurrogateModel],
    x: &ImageTensor,
    x_target: &ImageTensor,
    eps: f64,
) -> Result<ImageTensor> {
    if eps < 0.0 {
        return Err(Error::OutOfRange("eps must be >= 0".into()));
    }
    let (_, grad) = ensemble_target_loss_grad(models, x, x_target)?;
    Ok(x.zip_map(&grad, |xi, gi| (xi - eps * sign(gi)).clamp(-1.0, 1.0)))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Iterated projected signed-gradient descent on the target loss. The
/// perturbation stays inside the `eps` ball after every step; a violation is
/// an internal error.
pub fn pgd_baseline(
    models: &[SurrogateModel],
    x: &ImageTensor,
    x_target: &ImageTensor,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<ImageTensor> {
    if steps == 0 {
        return Err(Error::OutOfRange("steps must be >= 1".into()));
    }
    if eps < 0.0 || step_size < 0.0 {
        return Err(Error::OutOfRange("eps and step_size must be >= 0".into()));
    }
    let mut cur = x.clone();
    for _ in 0..steps {
        let (_, grad) = ensemble_target_loss_grad(models, &cur, x_target)?;
        let mut next = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let stepped = cur.data()[i] - step_size * sign(grad.data()[i]);
            let lo = x.data()[i] - eps;
            let hi = x.data()[i] + eps;
            next.data_mut()[i] = stepped.clamp(lo, hi).clamp(-1.0, 1.0);
        }
        let viol = next
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if viol > eps + 1e-12 {
            return Err(Error::NumericGuard(format!(
                "projection failed: perturbation {viol} exceeds eps {eps}"
            )));
        }
        cur = next;
    }
    Ok(cur)
}

/// The paper-convention baseline budget: 4/255 in [0,1] units, doubled for
/// the internal [-1, 1] range.
pub const BASELINE_EPS_UNIT: f64 = 4.0 / 255.0;
pub const BASELINE_EPS_INTERNAL: f64 = 2.0 * BASELINE_EPS_UNIT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub asr: f64,
    pub esr: f64,
}

/// Full evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-model plain ASR over the protected set.
    pub asr: BTreeMap<String, f64>,
    /// Per-model plain ESR over the restored set.
    pub esr: BTreeMap<String, f64>,
    /// Quality of protected images vs. the attribute-edited references.
    pub quality_protected: QualityMetrics,
    /// Quality of restored images vs. the clean covers.
    pub quality_restored: QualityMetrics,
    /// transform name -> model id -> (ASR, ESR) under that transform.
    pub robustness: BTreeMap<String, BTreeMap<String, RobustnessCell>>,
    pub count: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&s)
    }
}

/// One row of the optional per-image CSV: similarity of an image to the
/// target under one model, and the threshold decision.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerImageRow {
    pub image_id: String,
    pub model_id: String,
    pub similarity: f64,
    pub decision: bool,
}

/// Per-image similarity/decision rows for a set of images under every model.
/// `kind` selects which calibrated threshold and inequality applies.
pub fn per_image_rows(
    models: &[SurrogateModel],
    images: &[ImageTensor],
    image_ids: &[String],
    x_target: &ImageTensor,
    kind: ThresholdKind,
) -> Result<Vec<PerImageRow>> {
    if images.len() != image_ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} image ids", images.len()),
            got: format!("{}", image_ids.len()),
        });
    }
    let mut rows = Vec::with_capacity(models.len() * images.len());
    for m in models {
        let tau = m.tau(kind)?;
        let sims = similarities_to_target(m, images, x_target)?;
        for (id, s) in image_ids.iter().zip(&sims) {
            let decision = match kind {
                ThresholdKind::Attack => *s > tau,
                ThresholdKind::Erasion => *s < tau,
            };
            rows.push(PerImageRow {
                image_id: id.clone(),
                model_id: m.id.clone(),
                similarity: *s,
                decision,
            });
        }
    }
    Ok(rows)
}

/// Render per-image rows as CSV with the documented columns.
pub fn per_image_csv(rows: &[PerImageRow]) -> String {
    let mut out = String::from("image_id,model_id,similarity,decision\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.image_id, r.model_id, r.similarity, r.decision as u8
        ));
    }
    out
}

/// For each transform: ASR on transformed protected images and ESR on the
/// restoration of those transformed images. Seeds derive deterministically
/// from `(base_seed, transform index, image index)`.
pub fn robustness_sweep(
    protected: &[ImageTensor],
    restore_fn: &dyn Fn(&ImageTensor) -> Result<ImageTensor>,
    transforms: &[NoiseOp],
    models: &[SurrogateModel],
    x_target: &ImageTensor,
    base_seed: u64,
) -> Result<BTreeMap<String, BTreeMap<String, RobustnessCell>>> {
    if protected.is_empty() {
        return Err(Error::EmptySet("protected set".into()));
    }
    let mut table = BTreeMap::new();
    for (ti, t) in transforms.iter().enumerate() {
        let transformed: Vec<ImageTensor> = protected
            .iter()
            .enumerate()
            .map(|(i, x)| noise::apply(t, x, base_seed ^ ((ti as u64) << 32) ^ i as u64))
            .collect::<Result<_>>()?;
        let restored: Vec<ImageTensor> =
            transformed.iter().map(restore_fn).collect::<Result<_>>()?;
        let mut row = BTreeMap::new();
        for m in models {
            row.insert(
                m.id.clone(),
                RobustnessCell {
                    asr: asr(m, &transformed, x_target)?,
                    esr: esr(m, &restored, x_target)?,
                },
            );
        }
        table.insert(t.name().to_string(), row);
    }
    Ok(table)
}
