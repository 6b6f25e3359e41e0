//! Face-embedding surrogate models: a trainable toy embedder architecture,
//! cosine similarity, FAR-targeted threshold calibration, and the white-box
//! ensemble registry with its per-epoch loss history.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, BlobFile};
use crate::error::{Error, Result};
use crate::nn::{Adam, EmbedderNet, Mounted, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{ImageTensor, Scalar};

/// Unit-norm face embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn from_unnormalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two embeddings, clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", a.dim()),
            got: format!("dim {}", b.dim()),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    WhiteBoxTrain,
    BlackBoxEval,
}

/// Which calibrated threshold a FAR target feeds.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ThresholdKind {
    Attack,
    Erasion,
}

/// Conventional FAR targets: 0.01 for the attack threshold, 0.1 for erasion.
pub const FAR_ATTACK: f64 = 0.01;
pub const FAR_ERASION: f64 = 0.1;

/// A differentiable face-embedding model with calibrated decision thresholds.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub id: String,
    pub role: Role,
    pub net: EmbedderNet,
    pub params: ParamSet,
    pub input_hw: (usize, usize),
    pub tau_attack: Option<f64>,
    pub tau_erasion: Option<f64>,
}

impl SurrogateModel {
    pub fn embed_dim(&self) -> usize {
        self.net.embed_dim
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        let (c, h, w) = x.dims3();
        if c != self.net.trunk.in_ch || (h, w) != self.input_hw {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "[{}, {}, {}]",
                    self.net.trunk.in_ch, self.input_hw.0, self.input_hw.1
                ),
                got: format!("[{c}, {h}, {w}]"),
            });
        }
        Ok(())
    }

    /// Embedding forward on an existing tape; gradients flow back to `x`.
    pub fn embed_on_tape<S: Scalar>(&self, tape: &mut Tape<S>, m: &Mounted, x: Var) -> Var {
        self.net.forward(tape, m, x)
    }

    pub fn mount<S: Scalar>(&self, tape: &mut Tape<S>) -> Mounted {
        self.params.mount(tape)
    }

    pub fn tau(&self, kind: ThresholdKind) -> Result<f64> {
        match kind {
            ThresholdKind::Attack => self.tau_attack,
            ThresholdKind::Erasion => self.tau_erasion,
        }
        .ok_or_else(|| {
            Error::MissingComponent(format!(
                "model '{}' has no calibrated {kind:?} threshold",
                self.id
            ))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "id": self.id,
            "role": self.role,
            "net": self.net,
            "input_hw": self.input_hw,
            "tau_attack": self.tau_attack,
            "tau_erasion": self.tau_erasion,
        });
        let blob = BlobFile {
            kind: "embedder".into(),
            meta_json: meta.to_string(),
            sections: vec![("params".into(), checkpoint::params_to_tensors(&self.params))],
        };
        checkpoint::write_blob(path, &blob)
    }

    pub fn load(path: &Path) -> Result<SurrogateModel> {
        let blob = checkpoint::read_blob(path)?;
        if blob.kind != "embedder" {
            return Err(Error::CheckpointIntegrity(format!(
                "expected an embedder file, found kind '{}'",
                blob.kind
            )));
        }
        let meta: serde_json::Value =
            serde_json::from_str(&blob.meta_json).map_err(|e| Error::Serde(e.to_string()))?;
        let net: EmbedderNet = serde_json::from_value(meta["net"].clone())
            .map_err(|e| Error::Serde(e.to_string()))?;
        let input_hw: (usize, usize) = serde_json::from_value(meta["input_hw"].clone())
            .map_err(|e| Error::Serde(e.to_string()))?;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let template = net.init_params(&mut rng);
        let params = checkpoint::params_from_tensors(&template, blob.section("params")?)?;
        Ok(SurrogateModel {
            id: meta["id"].as_str().unwrap_or("embedder").to_string(),
            role: serde_json::from_value(meta["role"].clone())
                .map_err(|e| Error::Serde(e.to_string()))?,
            net,
            params,
            input_hw,
            tau_attack: meta["tau_attack"].as_f64(),
            tau_erasion: meta["tau_erasion"].as_f64(),
        })
    }
}

/// Embed an image in inference mode.
pub fn embed(model: &SurrogateModel, x: &ImageTensor) -> Result<Embedding> {
    model.check_input(x)?;
    let mut tape = Tape::<f64>::new();
    let m = model.mount(&mut tape);
    let xv = tape.constant(x);
    let e = model.embed_on_tape(&mut tape, &m, xv);
    let values = tape.value(e).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericGuard("non-finite embedding".into()));
    }
    Ok(Embedding { values })
}

/// The smallest threshold whose impostor acceptance rate (similarities
/// strictly above it) does not exceed `far_target`. Ties at quantile
/// boundaries resolve toward the stricter threshold; the result is clamped
/// into `[-1, 1]`.
pub fn threshold_at_far(impostor_sims: &[f64], far_target: f64) -> Result<f64> {
    if impostor_sims.is_empty() {
        return Err(Error::EmptySet("impostor similarities".into()));
    }
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(Error::OutOfRange(format!("far_target {far_target} not in (0, 1]")));
    }
    let mut sorted = impostor_sims.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len() as f64;
    let rate = |tau: f64| sorted.iter().filter(|&&s| s > tau).count() as f64 / m;
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(next_down(sorted[0]));
    candidates.extend_from_slice(&sorted);
    for &tau in &candidates {
        if rate(tau) <= far_target {
            return Ok(tau.clamp(-1.0, 1.0));
        }
    }
    Ok(sorted[sorted.len() - 1].clamp(-1.0, 1.0))
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(if x > 0.0 { x.to_bits() - 1 } else { x.to_bits() + 1 })
}

/// Embed both sides of every pair and return the similarities.
pub fn pair_similarities(
    model: &SurrogateModel,
    pairs: &[(ImageTensor, ImageTensor)],
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(a, b)| {
            let ea = embed(model, a)?;
            let eb = embed(model, b)?;
            cosine_similarity(&ea, &eb)
        })
        .collect()
}

/// Calibrate a threshold at `far_target` from impostor pairs and store it on
/// the model under `kind`. Genuine pairs are accepted for interface
/// completeness; only impostor similarities enter the FAR quantile.
pub fn calibrate_threshold(
    model: &mut SurrogateModel,
    _genuine_pairs: &[(ImageTensor, ImageTensor)],
    impostor_pairs: &[(ImageTensor, ImageTensor)],
    far_target: f64,
    kind: ThresholdKind,
) -> Result<f64> {
    if impostor_pairs.is_empty() {
        return Err(Error::EmptySet("impostor pairs".into()));
    }
    let sims = pair_similarities(model, impostor_pairs)?;
    let tau = threshold_at_far(&sims, far_target)?;
    match kind {
        ThresholdKind::Attack => model.tau_attack = Some(tau),
        ThresholdKind::Erasion => model.tau_erasion = Some(tau),
    }
    Ok(tau)
}

/// Architecture + training hyperparameters for a toy embedder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyEmbedderCfg {
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub kernel: usize,
    pub lr: f64,
    pub margin: f64,
    pub triplets_per_epoch: usize,
}

impl Default for ToyEmbedderCfg {
    fn default() -> Self {
        ToyEmbedderCfg {
            widths: vec![8, 16],
            embed_dim: 32,
            kernel: 4,
            lr: 2e-3,
            margin: 0.5,
            triplets_per_epoch: 64,
        }
    }
}

/// Train a toy embedder with a triplet margin loss on cosine similarity.
/// `epochs = 0` returns the randomly initialized model.
pub fn train_toy_embedder(
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &ToyEmbedderCfg,
    epochs: usize,
    seed: u64,
    id: &str,
    role: Role,
) -> Result<SurrogateModel> {
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", images.len()),
            got: format!("{}", labels.len()),
        });
    }
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    let usable: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least 2 identities with at least 2 images each".into(),
        ));
    }
    let (c, h, w) = images[0].dims3();
    let net = EmbedderNet {
        trunk: crate::nn::ConvStackCfg {
            in_ch: c,
            widths: cfg.widths.clone(),
            kernel: cfg.kernel,
            stride: 2,
            pad: 1,
            leak: 0.2,
        },
        embed_dim: cfg.embed_dim,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    let mut model = SurrogateModel {
        id: id.to_string(),
        role,
        net,
        params: params.clone(),
        input_hw: (h, w),
        tau_attack: None,
        tau_erasion: None,
    };
    if epochs == 0 {
        return Ok(model);
    }

    let ids: Vec<usize> = by_id.keys().copied().collect();
    let mut opt = Adam::new(cfg.lr, &params);
    for _epoch in 0..epochs {
        for _t in 0..cfg.triplets_per_epoch {
            // anchor identity with >= 2 images, negative from a different identity
            let (anchor, positive, negative) = loop {
                let ia = ids[rng.gen_range(0..ids.len())];
                let imgs_a = &by_id[&ia];
                if imgs_a.len() < 2 {
                    continue;
                }
                let a = imgs_a[rng.gen_range(0..imgs_a.len())];
                let p = loop {
                    let p = imgs_a[rng.gen_range(0..imgs_a.len())];
                    if p != a {
                        break p;
                    }
                };
                let ni = loop {
                    let i = ids[rng.gen_range(0..ids.len())];
                    if i != ia {
                        break i;
                    }
                };
                let imgs_n = &by_id[&ni];
                let n = imgs_n[rng.gen_range(0..imgs_n.len())];
                break (a, p, n);
            };

            let mut tape = Tape::<f64>::new();
            let m = params.mount(&mut tape);
            let ea = {
                let x = tape.constant(&images[anchor]);
                model.net.forward(&mut tape, &m, x)
            };
            let ep = {
                let x = tape.constant(&images[positive]);
                model.net.forward(&mut tape, &m, x)
            };
            let en = {
                let x = tape.constant(&images[negative]);
                model.net.forward(&mut tape, &m, x)
            };
            let cos_ap = tape.dot(ea, ep);
            let cos_an = tape.dot(ea, en);
            // margin - cos(a,p) + cos(a,n), hinged at zero
            let diff = tape.sub(cos_an, cos_ap);
            let shifted = tape.affine(diff, 1.0, cfg.margin);
            let loss = tape.relu(shifted);
            let g = tape.backward(loss);
            let grads = params.extract_grads(&m, &g);
            opt.step(&mut params, &grads);
        }
    }
    model.params = params;
    Ok(model)
}

/// Mean genuine-pair minus mean impostor-pair similarity on the given split.
pub fn separation_margin(
    model: &SurrogateModel,
    images: &[ImageTensor],
    labels: &[usize],
) -> Result<f64> {
    let embeddings: Vec<Embedding> =
        images.iter().map(|x| embed(model, x)).collect::<Result<_>>()?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let s = cosine_similarity(&embeddings[i], &embeddings[j])?;
            if labels[i] == labels[j] {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InsufficientData("need both genuine and impostor pairs".into()));
    }
    let mg = genuine.iter().sum::<f64>() / genuine.len() as f64;
    let mi = impostor.iter().sum::<f64>() / impostor.len() as f64;
    Ok(mg - mi)
}

/// Per-model ring buffer of the last two epochs' mean primary losses,
/// bootstrapped to (1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory {
    /// (mean at epoch t-1, mean at epoch t-2) per model.
    entries: Vec<(f64, f64)>,
}

impl LossHistory {
    pub fn new(k: usize) -> Self {
        LossHistory { entries: vec![(1.0, 1.0); k] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prev(&self, i: usize) -> f64 {
        self.entries[i].0
    }
    pub fn prev2(&self, i: usize) -> f64 {
        self.entries[i].1
    }

    /// Shift in this epoch's mean losses (one per model).
    pub fn push_epoch(&mut self, means: &[f64]) {
        assert_eq!(means.len(), self.entries.len());
        for (e, &m) in self.entries.iter_mut().zip(means) {
            *e = (m, e.0);
        }
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn restore(entries: Vec<(f64, f64)>) -> Self {
        LossHistory { entries }
    }
}

/// Ordered white-box ensemble with its loss history.
#[derive(Clone, Debug)]
pub struct SurrogateEnsemble {
    pub models: Vec<SurrogateModel>,
    pub loss_history: LossHistory,
}

impl SurrogateEnsemble {
    pub fn new(models: Vec<SurrogateModel>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "ensemble needs K >= 2 white-box models, got {}",
                models.len()
            )));
        }
        let k = models.len();
        Ok(SurrogateEnsemble { models, loss_history: LossHistory::new(k) })
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }
}

/// Manifest entry describing one registered model on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: Role,
    pub embed_dim: usize,
    pub tau_attack: Option<f64>,
    pub tau_erasion: Option<f64>,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct ModelManifest {
    pub models: Vec<ManifestEntry>,
}

impl ModelManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&s).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Load every referenced model, resolving relative paths against the
    /// manifest's directory.
    pub fn load_models(&self, manifest_path: &Path) -> Result<Vec<SurrogateModel>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.models
            .iter()
            .map(|e| {
                let p = base.join(&e.checkpoint);
                let mut m = SurrogateModel::load(&p)?;
                m.id = e.id.clone();
                m.role = e.role;
                m.tau_attack = e.tau_attack.or(m.tau_attack);
                m.tau_erasion = e.tau_erasion.or(m.tau_erasion);
                Ok(m)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_images(
        n_ids: usize,
        per_id: usize,
        hw: usize,
        seed: u64,
    ) -> (Vec<ImageTensor>, Vec<usize>) {
        // identity = a fixed random pattern; variation = small noise
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for id in 0..n_ids {
            let base: Vec<f64> = (0..3 * hw * hw).map(|_| rng.gen_range(-0.8..0.8)).collect();
            for _ in 0..per_id {
                let img: Vec<f64> = base
                    .iter()
                    .map(|&v| (v + rng.gen_range(-0.1..0.1)).clamp(-1.0, 1.0))
                    .collect();
                images.push(Tensor::new(vec![3, hw, hw], img));
                labels.push(id);
            }
        }
        (images, labels)
    }

    fn quick_cfg() -> ToyEmbedderCfg {
        ToyEmbedderCfg {
            widths: vec![4, 8],
            embed_dim: 16,
            kernel: 4,
            lr: 2e-3,
            margin: 0.5,
            triplets_per_epoch: 32,
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let (images, labels) = toy_images(2, 2, 16, 3);
        let model =
            train_toy_embedder(&images, &labels, &quick_cfg(), 0, 1, "m", Role::WhiteBoxTrain)
                .unwrap();
        let e1 = embed(&model, &images[0]).unwrap();
        let e2 = embed(&model, &images[0]).unwrap();
        assert!((e1.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e1.values(), e2.values(), "inference must be deterministic");
    }

    #[test]
    fn embed_zero_image_is_finite() {
        let (images, labels) = toy_images(2, 2, 16, 3);
        let model =
            train_toy_embedder(&images, &labels, &quick_cfg(), 0, 1, "m", Role::WhiteBoxTrain)
                .unwrap();
        let zeros = Tensor::zeros(&[3, 16, 16]);
        let e = embed(&model, &zeros).unwrap();
        assert!(e.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let (images, labels) = toy_images(2, 2, 16, 3);
        let model =
            train_toy_embedder(&images, &labels, &quick_cfg(), 0, 1, "m", Role::WhiteBoxTrain)
                .unwrap();
        let bad = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(embed(&model, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cosine_basics() {
        let v = Embedding::from_unnormalized(vec![0.3, -0.4, 0.5]);
        let nv = Embedding::from_unnormalized(vec![-0.3, 0.4, -0.5]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &nv).unwrap() + 1.0).abs() < 1e-12);
        let e1 = Embedding::from_unnormalized(vec![1.0, 0.0]);
        let e2 = Embedding::from_unnormalized(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let e3 = Embedding::from_unnormalized(vec![1.0, 0.0, 0.0]);
        assert!(cosine_similarity(&e1, &e3).is_err());
    }

    #[test]
    fn threshold_quantile_examples() {
        // all impostors accepted at far = 1.0
        let sims = vec![0.5, 0.2, 0.8];
        let tau = threshold_at_far(&sims, 1.0).unwrap();
        assert!(tau < 0.2 && tau > 0.2 - 1e-9);
        assert_eq!(sims.iter().filter(|&&s| s > tau).count(), 3);

        // exactly one of four above the threshold
        let sims = vec![0.1, 0.2, 0.3, 0.9];
        let tau = threshold_at_far(&sims, 0.25).unwrap();
        assert_eq!(tau, 0.3);

        assert!(threshold_at_far(&[], 0.5).is_err());
        assert!(threshold_at_far(&[0.5], 0.0).is_err());
        assert!(threshold_at_far(&[0.5], 1.5).is_err());
    }

    #[test]
    fn threshold_exactness_exhaustive() {
        // Brute-force check over all candidate thresholds on small sets.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = rng.gen_range(1..40);
            let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let far = rng.gen_range(0.01..1.0);
            let tau = threshold_at_far(&sims, far).unwrap();
            let rate =
                |t: f64| sims.iter().filter(|&&s| s > t).count() as f64 / sims.len() as f64;
            assert!(rate(tau) <= far, "trial {trial}: rate above target");
            // relaxing by one discrete step (previous candidate) must break the target
            let mut cands = vec![next_down(sims.iter().cloned().fold(f64::MAX, f64::min))];
            let mut sorted = sims.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            cands.extend(sorted);
            if let Some(pos) = cands.iter().position(|&c| c == tau) {
                if pos > 0 {
                    assert!(
                        rate(cands[pos - 1]) > far,
                        "trial {trial}: returned threshold is not the smallest"
                    );
                }
            }
        }
    }

    #[test]
    fn threshold_monotone_in_far() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sims: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for far in [0.02, 0.05, 0.1, 0.3, 0.7, 1.0] {
            let tau = threshold_at_far(&sims, far).unwrap();
            assert!(tau <= last, "threshold must not increase with far");
            last = tau;
        }
    }

    #[test]
    fn toy_training_separates_identities() {
        let (images, labels) = toy_images(8, 16, 16, 42);
        let (train_i, train_l): (Vec<_>, Vec<_>) = images
            .iter()
            .zip(&labels)
            .enumerate()
            .filter(|(i, _)| i % 4 != 3)
            .map(|(_, (im, &l))| (im.clone(), l))
            .unzip();
        let (held_i, held_l): (Vec<_>, Vec<_>) = images
            .iter()
            .zip(&labels)
            .enumerate()
            .filter(|(i, _)| i % 4 == 3)
            .map(|(_, (im, &l))| (im.clone(), l))
            .unzip();
        let model =
            train_toy_embedder(&train_i, &train_l, &quick_cfg(), 6, 9, "m", Role::WhiteBoxTrain)
                .unwrap();
        let margin = separation_margin(&model, &held_i, &held_l).unwrap();
        assert!(margin > 0.0, "held-out separation margin {margin} not positive");
    }

    #[test]
    fn same_seed_same_initial_params() {
        let (images, labels) = toy_images(2, 2, 16, 3);
        let a =
            train_toy_embedder(&images, &labels, &quick_cfg(), 0, 77, "a", Role::WhiteBoxTrain)
                .unwrap();
        let b =
            train_toy_embedder(&images, &labels, &quick_cfg(), 0, 77, "b", Role::WhiteBoxTrain)
                .unwrap();
        assert!(a.params.bitwise_eq(&b.params));
    }

    #[test]
    fn insufficient_identities_rejected() {
        let (images, labels) = toy_images(1, 4, 16, 3);
        assert!(matches!(
            train_toy_embedder(&images, &labels, &quick_cfg(), 1, 1, "m", Role::WhiteBoxTrain),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn ensemble_requires_two_models() {
        let (images, labels) = toy_images(2, 2, 16, 3);
        let m = train_toy_embedder(&images, &labels, &quick_cfg(), 0, 1, "m", Role::WhiteBoxTrain)
            .unwrap();
        assert!(SurrogateEnsemble::new(vec![m.clone()]).is_err());
        let e = SurrogateEnsemble::new(vec![m.clone(), m]).unwrap();
        assert_eq!(e.loss_history.prev(0), 1.0);
        assert_eq!(e.loss_history.prev2(1), 1.0);
    }

    #[test]
    fn model_file_roundtrip() {
        let (images, labels) = toy_images(2, 2, 16, 3);
        let mut model =
            train_toy_embedder(&images, &labels, &quick_cfg(), 1, 5, "m0", Role::BlackBoxEval)
                .unwrap();
        model.tau_attack = Some(0.62);
        let dir = std::env::temp_dir().join(format!("fv-sur-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m0.fvb");
        model.save(&path).unwrap();
        let back = SurrogateModel::load(&path).unwrap();
        assert!(back.params.bitwise_eq(&model.params));
        assert_eq!(back.tau_attack, Some(0.62));
        assert_eq!(back.role, Role::BlackBoxEval);
        let e1 = embed(&model, &images[0]).unwrap();
        let e2 = embed(&back, &images[0]).unwrap();
        assert_eq!(e1.values(), e2.values());
    }
}
