//! Meta-auxiliary attack optimizer for the perturbation encoder.
//!
//! Each white-box surrogate takes a turn as the primary task: its loss drives
//! a single inner gradient step on the perturbation-encoder parameters, the
//! protected image is regenerated under the stepped parameters, and the
//! remaining surrogates score it as weighted auxiliary tasks. The auxiliary
//! gradient is carried back through the inner step analytically:
//!
//! `d L_aux / d theta = (I - lr * H_pri) g'`,
//!
//! where `g'` is the auxiliary gradient at the stepped parameters and
//! `H_pri g'` is an exact Hessian-vector product obtained by running the
//! primary backward pass over dual numbers. Self-adaptive per-model weights
//! derived from the loss-history ratio keep easily attacked surrogates from
//! dominating, and the aggregate loss is clamped from below to bound the
//! perturbation intensity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{AttributeVector, Generator, GeneratorParams};
use crate::nn::{Adam, Mounted, ParamSet, ParamVec};
use crate::noise::{self, PlannedOp};
use crate::perturbation::{generate_protected_node, FusionConfig, PerturbEncoderParams, ProtectMounts};
use crate::surrogate::{cosine_similarity, embed, Embedding, LossHistory, SurrogateEnsemble, SurrogateModel};
use crate::tape::{Tape, Var};
use crate::tensor::{Dual, ImageTensor, Scalar, Tensor};

/// One rotation of the task split: a primary model and the remaining
/// auxiliaries, by ensemble index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplit {
    pub primary_index: usize,
    pub auxiliary_indices: Vec<usize>,
}

impl TaskSplit {
    pub fn new(k: usize, primary_index: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InsufficientData("task split needs K >= 2".into()));
        }
        if primary_index >= k {
            return Err(Error::OutOfRange(format!("primary index {primary_index} >= K = {k}")));
        }
        Ok(TaskSplit {
            primary_index,
            auxiliary_indices: (0..k).filter(|&i| i != primary_index).collect(),
        })
    }
}

/// Per-model weights from the loss-history ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveWeights {
    pub w: Vec<f64>,
    pub rates: Vec<f64>,
}

impl AdaptiveWeights {
    /// Neutral weights (all rates equal), used before any history exists.
    pub fn uniform(k: usize) -> Self {
        adaptive_weights(&LossHistory::new(k))
    }
}

/// Inner-step and clamp configuration for the meta attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepConfig {
    pub inner_lr: f64,
    pub epsilon: f64,
    /// Differentiate through the inner update (double gradient). The
    /// first-order switch drops the Hessian-vector term for speed.
    pub second_order: bool,
}

impl Default for MetaStepConfig {
    fn default() -> Self {
        MetaStepConfig { inner_lr: 2e-5, epsilon: 0.0, second_order: true }
    }
}

impl MetaStepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_lr <= 0.0 {
            return Err(Error::OutOfRange(format!("inner_lr {} must be > 0", self.inner_lr)));
        }
        if self.epsilon < 0.0 {
            return Err(Error::OutOfRange(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        Ok(())
    }
}

/// `1 - cos` between two embeddings; in [0, 2].
pub fn primary_loss_from_embeddings(target: &Embedding, adv: &Embedding) -> Result<f64> {
    Ok(1.0 - cosine_similarity(target, adv)?)
}

/// `1 - cos(FR(x_target), FR(x_adv))` for one model.
pub fn primary_loss(
    model: &SurrogateModel,
    x_adv: &ImageTensor,
    x_target: &ImageTensor,
) -> Result<f64> {
    let et = embed(model, x_target)?;
    let ea = embed(model, x_adv)?;
    primary_loss_from_embeddings(&et, &ea)
}

/// One plain gradient-descent step on the perturbation-encoder parameters.
/// The input set is left untouched.
pub fn inner_update(theta: &ParamSet, grad: &ParamVec, inner_lr: f64) -> Result<ParamSet> {
    if inner_lr <= 0.0 {
        return Err(Error::OutOfRange(format!("inner_lr {inner_lr} must be > 0")));
    }
    if grad.tensors().len() != theta.len()
        || grad
            .tensors()
            .iter()
            .zip(theta.tensors())
            .any(|(g, t)| g.shape() != t.shape())
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient tensors matching parameters", theta.len()),
            got: format!("{}", grad.tensors().len()),
        });
    }
    Ok(theta.minus_scaled(grad, inner_lr))
}

/// Self-adaptive weights: `rate_i = mean(L_i at t-1) / mean(L_i at t-2)`,
/// `w_i = exp(softmax_i(rate))`. A vanishing denominator yields a neutral
/// rate of 1.
pub fn adaptive_weights(history: &LossHistory) -> AdaptiveWeights {
    let k = history.len();
    let rates: Vec<f64> = (0..k)
        .map(|i| {
            let prev2 = history.prev2(i);
            if prev2.abs() < 1e-8 {
                1.0
            } else {
                history.prev(i) / prev2
            }
        })
        .collect();
    let mx = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rates.iter().map(|r| (r - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let w: Vec<f64> = exps.iter().map(|e| (e / sum).exp()).collect();
    AdaptiveWeights { w, rates }
}

/// `max(mean(pri + aux) / 2, epsilon)` per the aggregate adversarial loss.
pub fn adversarial_loss(pri_losses: &[f64], aux_losses: &[f64], epsilon: f64) -> Result<f64> {
    if pri_losses.len() != aux_losses.len() || pri_losses.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} auxiliary losses", pri_losses.len().max(1)),
            got: format!("{}", aux_losses.len()),
        });
    }
    let k = pri_losses.len() as f64;
    let mean = pri_losses
        .iter()
        .zip(aux_losses)
        .map(|(p, a)| p + a)
        .sum::<f64>()
        / (2.0 * k);
    Ok(if mean > epsilon { mean } else { epsilon })
}

/// Weighted auxiliary mean: `sum_{i != primary} w_i * means_i / (K - 1)`.
pub fn weighted_aux_mean(
    per_model_means: &[f64],
    weights: &AdaptiveWeights,
    primary_index: usize,
) -> Result<f64> {
    let k = per_model_means.len();
    if k < 2 {
        return Err(Error::InsufficientData("auxiliary mean needs K >= 2".into()));
    }
    if weights.w.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{k} weights"),
            got: format!("{}", weights.w.len()),
        });
    }
    Ok(per_model_means
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != primary_index)
        .map(|(i, &m)| weights.w[i] * m)
        .sum::<f64>()
        / (k - 1) as f64)
}

/// Everything fixed across one attack batch.
pub struct AttackContext<'a> {
    pub gen: &'a Generator,
    pub g_params: &'a GeneratorParams,
    pub ensemble: &'a SurrogateEnsemble,
    /// Target embedding per ensemble model, ensemble order.
    pub target_embeddings: &'a [Embedding],
    pub fusion: &'a FusionConfig,
}

/// One batch of covers with their requested attributes and per-sample noise.
pub struct MetaBatch<'a> {
    pub images: &'a [ImageTensor],
    pub atts: &'a [AttributeVector],
    pub noise: &'a [PlannedOp],
}

impl MetaBatch<'_> {
    fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::EmptySet("attack batch".into()));
        }
        if self.atts.len() != self.images.len() || self.noise.len() != self.images.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} attributes and noise plans", self.images.len()),
                got: format!("{} / {}", self.atts.len(), self.noise.len()),
            });
        }
        Ok(())
    }
}

/// Embed the target once per ensemble model.
pub fn target_embeddings(
    ensemble: &SurrogateEnsemble,
    x_target: &ImageTensor,
) -> Result<Vec<Embedding>> {
    ensemble.models.iter().map(|m| embed(m, x_target)).collect()
}

fn embedding_tensor(e: &Embedding) -> Tensor<f64> {
    Tensor::new(vec![e.dim()], e.values().to_vec())
}

/// Generate the (optionally corrupted) protected image for every sample.
fn protected_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    e_m: &Mounted,
    g_enc_m: &Mounted,
    g_dec_m: &Mounted,
) -> Result<Vec<Var>> {
    batch
        .images
        .iter()
        .zip(batch.atts)
        .zip(batch.noise)
        .map(|((x, att), plan)| {
            let xv = tape.constant(x);
            let attv = tape.constant(&att.to_tensor());
            let mounts =
                ProtectMounts { gen: ctx.gen, g_enc: g_enc_m, g_dec: g_dec_m, e_adv: e_m };
            let adv = generate_protected_node(tape, &mounts, xv, attv, ctx.fusion);
            noise::apply_node(tape, adv, plan)
        })
        .collect()
}

/// Batch-mean `1 - cos(target, FR(x_adv))` node for one model.
fn model_mean_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ctx: &AttackContext<'_>,
    model_idx: usize,
    model_m: &Mounted,
    x_advs: &[Var],
) -> Var {
    let model = &ctx.ensemble.models[model_idx];
    let target = embedding_tensor(&ctx.target_embeddings[model_idx]);
    let per: Vec<Var> = x_advs
        .iter()
        .map(|&xa| {
            let e = model.embed_on_tape(tape, model_m, xa);
            let t = tape.constant(&target);
            let cos = tape.dot(e, t);
            tape.affine(cos, -1.0, 1.0)
        })
        .collect();
    tape.mean_of(&per)
}

/// All K primary losses (shared generation graph) and, per model, the gradient
/// with respect to the perturbation encoder.
fn primary_all(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta: &ParamSet,
) -> Result<(Vec<f64>, Vec<ParamVec>)> {
    let mut tape = Tape::<f64>::new();
    let e_m = theta.mount(&mut tape);
    let g_enc_m = ctx.g_params.enc.mount(&mut tape);
    let g_dec_m = ctx.g_params.dec.mount(&mut tape);
    let x_advs = protected_nodes(&mut tape, ctx, batch, &e_m, &g_enc_m, &g_dec_m)?;
    let k = ctx.ensemble.k();
    let mut losses = Vec::with_capacity(k);
    let mut nodes = Vec::with_capacity(k);
    for p in 0..k {
        let m = ctx.ensemble.models[p].mount(&mut tape);
        let l = model_mean_loss(&mut tape, ctx, p, &m, &x_advs);
        losses.push(tape.value(l).item());
        nodes.push(l);
    }
    let grads = nodes
        .iter()
        .map(|&l| {
            let g = tape.backward(l);
            theta.extract_grads(&e_m, &g)
        })
        .collect();
    Ok((losses, grads))
}

/// Weighted auxiliary loss at the stepped parameters, with optional gradient.
fn aux_pass(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta_prime: &ParamSet,
    split: &TaskSplit,
    weights: &AdaptiveWeights,
    want_grad: bool,
) -> Result<(f64, Option<ParamVec>)> {
    let k = ctx.ensemble.k();
    let mut tape = Tape::<f64>::new();
    let e_m = theta_prime.mount(&mut tape);
    let g_enc_m = ctx.g_params.enc.mount(&mut tape);
    let g_dec_m = ctx.g_params.dec.mount(&mut tape);
    let x_advs = protected_nodes(&mut tape, ctx, batch, &e_m, &g_enc_m, &g_dec_m)?;
    let mut terms = Vec::with_capacity(k - 1);
    for &q in &split.auxiliary_indices {
        let m = ctx.ensemble.models[q].mount(&mut tape);
        let l = model_mean_loss(&mut tape, ctx, q, &m, &x_advs);
        terms.push((l, weights.w[q] / (k - 1) as f64));
    }
    let l_aux = tape.weighted_sum(&terms, 0.0);
    let value = tape.value(l_aux).item();
    let grad = if want_grad {
        let g = tape.backward(l_aux);
        Some(theta_prime.extract_grads(&e_m, &g))
    } else {
        None
    };
    Ok((value, grad))
}

/// Weighted auxiliary loss for one task split, evaluated at the stepped
/// parameters: the protected image is regenerated under `theta_prime` and
/// scored by every non-primary surrogate, weighted and divided by K-1.
pub fn auxiliary_loss(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta_prime: &ParamSet,
    split: &TaskSplit,
    weights: &AdaptiveWeights,
) -> Result<f64> {
    batch.validate()?;
    if ctx.ensemble.k() < 2 {
        return Err(Error::InsufficientData("auxiliary loss needs K >= 2".into()));
    }
    let (value, _) = aux_pass(ctx, batch, theta_prime, split, weights, false)?;
    Ok(value)
}

/// Exact Hessian-vector product of one model's primary loss at `theta` in
/// direction `dir`, by running the backward pass over dual numbers.
fn primary_hvp(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta: &ParamSet,
    model_idx: usize,
    dir: &ParamVec,
) -> Result<ParamVec> {
    let mut tape = Tape::<Dual>::new();
    let e_m = theta.mount_seeded(&mut tape, dir);
    let g_enc_m = ctx.g_params.enc.mount(&mut tape);
    let g_dec_m = ctx.g_params.dec.mount(&mut tape);
    let x_advs = protected_nodes(&mut tape, ctx, batch, &e_m, &g_enc_m, &g_dec_m)?;
    let m = ctx.ensemble.models[model_idx].mount(&mut tape);
    let l = model_mean_loss(&mut tape, ctx, model_idx, &m, &x_advs);
    let g = tape.backward(l);
    Ok(theta.extract_dual_grads(&e_m, &g))
}

/// Result of one meta-attack batch.
#[derive(Clone, Debug)]
pub struct MetaGrad {
    /// Clamped aggregate adversarial loss.
    pub l_adv: f64,
    /// Pre-clamp mean of primary and auxiliary losses.
    pub pre_clamp_mean: f64,
    /// `d l_adv / d theta_E` (zero when the clamp is active).
    pub grad: ParamVec,
    pub per_model_primary: Vec<f64>,
    pub per_model_aux: Vec<f64>,
}

/// Full meta-auxiliary loss and gradient for one batch, without stepping.
#[allow(clippy::needless_range_loop)] // p is the task-split index
pub fn meta_adversarial_grad(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta_e: &ParamSet,
    weights: &AdaptiveWeights,
    cfg: &MetaStepConfig,
) -> Result<MetaGrad> {
    batch.validate()?;
    cfg.validate()?;
    ctx.fusion.validate()?;
    let k = ctx.ensemble.k();
    if weights.w.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{k} adaptive weights"),
            got: format!("{}", weights.w.len()),
        });
    }

    let (pri_losses, pri_grads) = primary_all(ctx, batch, theta_e)?;
    let mut aux_losses = Vec::with_capacity(k);
    let mut total = ParamVec::zeros_like(theta_e);
    for p in 0..k {
        let split = TaskSplit::new(k, p)?;
        let theta_prime = inner_update(theta_e, &pri_grads[p], cfg.inner_lr)?;
        let (l_aux, g_prime) = aux_pass(ctx, batch, &theta_prime, &split, weights, true)?;
        aux_losses.push(l_aux);
        let g_prime = g_prime.expect("gradient requested");
        // d L_aux / d theta = (I - lr H) g'
        let mut grad_aux = g_prime.clone();
        if cfg.second_order {
            let hvp = primary_hvp(ctx, batch, theta_e, p, &g_prime)?;
            grad_aux.add_scaled(&hvp, -cfg.inner_lr);
        }
        total.add_scaled(&pri_grads[p], 1.0);
        total.add_scaled(&grad_aux, 1.0);
    }

    let pre_clamp_mean = pri_losses
        .iter()
        .zip(&aux_losses)
        .map(|(p, a)| p + a)
        .sum::<f64>()
        / (2.0 * k as f64);
    let l_adv = adversarial_loss(&pri_losses, &aux_losses, cfg.epsilon)?;
    if pre_clamp_mean > cfg.epsilon {
        total.scale(1.0 / (2.0 * k as f64));
    } else {
        total = ParamVec::zeros_like(theta_e);
    }
    if !l_adv.is_finite() {
        return Err(Error::NumericGuard("adversarial loss not finite".into()));
    }
    Ok(MetaGrad {
        l_adv,
        pre_clamp_mean,
        grad: total,
        per_model_primary: pri_losses,
        per_model_aux: aux_losses,
    })
}

/// Loss-only evaluation of the same two-level computation (used by the
/// finite-difference oracle).
#[allow(clippy::needless_range_loop)] // p is the task-split index
pub fn meta_adversarial_loss(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta_e: &ParamSet,
    weights: &AdaptiveWeights,
    cfg: &MetaStepConfig,
) -> Result<f64> {
    batch.validate()?;
    cfg.validate()?;
    let k = ctx.ensemble.k();
    let (pri_losses, pri_grads) = primary_all(ctx, batch, theta_e)?;
    let mut aux_losses = Vec::with_capacity(k);
    for p in 0..k {
        let split = TaskSplit::new(k, p)?;
        let theta_prime = inner_update(theta_e, &pri_grads[p], cfg.inner_lr)?;
        let (l_aux, _) = aux_pass(ctx, batch, &theta_prime, &split, weights, false)?;
        aux_losses.push(l_aux);
    }
    adversarial_loss(&pri_losses, &aux_losses, cfg.epsilon)
}

/// Plain ensemble-attack gradient (the no-meta ablation): the clamped mean of
/// the K primary losses.
pub fn ensemble_adversarial_grad(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    theta_e: &ParamSet,
    epsilon: f64,
) -> Result<MetaGrad> {
    batch.validate()?;
    let mut tape = Tape::<f64>::new();
    let e_m = theta_e.mount(&mut tape);
    let g_enc_m = ctx.g_params.enc.mount(&mut tape);
    let g_dec_m = ctx.g_params.dec.mount(&mut tape);
    let x_advs = protected_nodes(&mut tape, ctx, batch, &e_m, &g_enc_m, &g_dec_m)?;
    let k = ctx.ensemble.k();
    let mut nodes = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    for p in 0..k {
        let m = ctx.ensemble.models[p].mount(&mut tape);
        let l = model_mean_loss(&mut tape, ctx, p, &m, &x_advs);
        losses.push(tape.value(l).item());
        nodes.push(l);
    }
    let mean = tape.mean_of(&nodes);
    let pre_clamp_mean = tape.value(mean).item();
    let clamped = tape.max_with_const(mean, epsilon);
    let l_adv = tape.value(clamped).item();
    let g = tape.backward(clamped);
    let grad = theta_e.extract_grads(&e_m, &g);
    Ok(MetaGrad {
        l_adv,
        pre_clamp_mean,
        grad,
        per_model_primary: losses,
        per_model_aux: vec![0.0; k],
    })
}

/// One full batch of the meta-auxiliary attack with its outer update: exactly
/// one optimizer step on the perturbation encoder; the generator is read-only.
pub fn run_meta_batch(
    ctx: &AttackContext<'_>,
    batch: &MetaBatch<'_>,
    e_adv: &mut PerturbEncoderParams,
    opt: &mut Adam,
    weights: &AdaptiveWeights,
    cfg: &MetaStepConfig,
) -> Result<MetaGrad> {
    let mg = meta_adversarial_grad(ctx, batch, &e_adv.params, weights, cfg)?;
    opt.step(&mut e_adv.params, &mg.grad);
    Ok(mg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GeneratorCfg;
    use crate::noise::NoiseOp;
    use crate::surrogate::{train_toy_embedder, Role, ToyEmbedderCfg};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn task_split_covers_all_indices() {
        let s = TaskSplit::new(4, 2).unwrap();
        assert_eq!(s.auxiliary_indices, vec![0, 1, 3]);
        assert!(TaskSplit::new(1, 0).is_err());
        assert!(TaskSplit::new(3, 3).is_err());
    }

    #[test]
    fn adaptive_weights_symmetric_and_bootstrap() {
        // bootstrap history: all rates 1, K = 3
        let w = adaptive_weights(&LossHistory::new(3));
        let expect = (1.0f64 / 3.0).exp();
        for wi in &w.w {
            assert!((wi - expect).abs() < 1e-12);
        }
        // any common rate value stays symmetric
        let mut h = LossHistory::new(3);
        h.push_epoch(&[2.0, 2.0, 2.0]);
        h.push_epoch(&[5.0, 5.0, 5.0]);
        let w = adaptive_weights(&h);
        for wi in &w.w {
            assert!((wi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_weights_hand_example_k2() {
        // rates (ln 2, 0): softmax = (2/3, 1/3), w = (e^{2/3}, e^{1/3})
        let mut h = LossHistory::new(2);
        h.push_epoch(&[1.0, 1.0]); // t-2
        h.push_epoch(&[std::f64::consts::LN_2, 0.0]); // t-1
        let w = adaptive_weights(&h);
        assert!((w.rates[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((w.w[0] - (2.0f64 / 3.0).exp()).abs() < 1e-12);
        assert!((w.w[1] - (1.0f64 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn adaptive_weights_bounds_and_softmax_sum() {
        // moderate loss ratios; extreme ratios saturate the softmax in f64
        // and pin w at exactly e
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.gen_range(2..6);
            let mut h = LossHistory::new(k);
            let e2: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
            let e1: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
            h.push_epoch(&e2);
            h.push_epoch(&e1);
            let w = adaptive_weights(&h);
            let softmax_sum: f64 = w.w.iter().map(|wi| wi.ln()).sum();
            assert!((softmax_sum - 1.0).abs() < 1e-12);
            for wi in &w.w {
                assert!(*wi > 1.0 && *wi < std::f64::consts::E);
            }
        }
    }

    #[test]
    fn adaptive_weights_scale_invariant() {
        let mut h = LossHistory::new(3);
        h.push_epoch(&[0.5, 1.5, 2.5]);
        h.push_epoch(&[0.4, 1.9, 0.7]);
        let w0 = adaptive_weights(&h);
        // powers of two scale both epochs exactly
        for c in [0.5f64, 2.0, 1024.0] {
            let mut hs = LossHistory::new(3);
            hs.push_epoch(&[0.5 * c, 1.5 * c, 2.5 * c]);
            hs.push_epoch(&[0.4 * c, 1.9 * c, 0.7 * c]);
            let ws = adaptive_weights(&hs);
            assert_eq!(w0.w, ws.w, "scaling by {c} changed the weights");
        }
    }

    #[test]
    fn adaptive_weights_zero_denominator_guard() {
        let mut h = LossHistory::new(2);
        h.push_epoch(&[0.0, 1.0]); // becomes t-2 after next push
        h.push_epoch(&[0.7, 0.5]);
        let w = adaptive_weights(&h);
        assert_eq!(w.rates[0], 1.0, "degenerate history must give a neutral rate");
        assert_eq!(w.rates[1], 0.5);
    }

    #[test]
    fn adversarial_loss_examples() {
        assert_eq!(adversarial_loss(&[0.0, 0.0], &[0.0, 0.0], 0.2).unwrap(), 0.2);
        let l = adversarial_loss(&[1.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        // epsilon = 0 leaves the plain mean
        let l = adversarial_loss(&[0.3, 0.5], &[0.1, 0.2], 0.0).unwrap();
        assert!((l - (0.3 + 0.5 + 0.1 + 0.2) / 4.0).abs() < 1e-15);
        assert!(adversarial_loss(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn weighted_aux_mean_examples() {
        // K = 3, both aux losses 1, symmetric weights e^{1/3}
        let w = AdaptiveWeights::uniform(3);
        let l = weighted_aux_mean(&[9.0, 1.0, 1.0], &w, 0).unwrap();
        assert!((l - (1.0f64 / 3.0).exp()).abs() < 1e-12);
        // K = 2: single term, divisor 1
        let w = AdaptiveWeights::uniform(2);
        let l = weighted_aux_mean(&[9.0, 0.4], &w, 0).unwrap();
        assert!((l - 0.4 * (0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn primary_loss_range_examples() {
        let a = Embedding::from_unnormalized(vec![1.0, 0.0]);
        let b = Embedding::from_unnormalized(vec![0.0, 1.0]);
        let anti = Embedding::from_unnormalized(vec![-1.0, 0.0]);
        assert_eq!(primary_loss_from_embeddings(&a, &a).unwrap(), 0.0);
        assert_eq!(primary_loss_from_embeddings(&a, &b).unwrap(), 1.0);
        assert_eq!(primary_loss_from_embeddings(&a, &anti).unwrap(), 2.0);
    }

    #[test]
    fn inner_update_examples() {
        let mut theta = ParamSet::new();
        theta.add("w", Tensor::from_f64_slice(&[1], &[1.0]));
        let zero = ParamVec::zeros_like(&theta);
        let same = inner_update(&theta, &zero, 0.1).unwrap();
        assert!(same.bitwise_eq(&theta));

        let g = ParamVec::from_flat(&theta, &[2.0]);
        let stepped = inner_update(&theta, &g, 0.1).unwrap();
        assert!((stepped.tensor(0).data()[0] - 0.8).abs() < 1e-15);

        assert!(inner_update(&theta, &zero, 0.0).is_err());
    }

    #[test]
    fn inner_map_derivative_through_dual_quadratic() {
        // L(theta) = theta^2, theta = 1, lr = 0.1:
        // theta' = theta - lr * 2 theta, so d theta'/d theta = 1 - 0.2 = 0.8.
        // The dual gradient gives H v = 2v; the analytic map matches.
        let theta = 1.0;
        let v = 1.0;
        let lr = 0.1;
        let mut tape = Tape::<Dual>::new();
        let x = tape.leaf(Tensor::scalar(Dual::new(theta, v)));
        let sq = tape.mul(x, x);
        let g = tape.backward(sq);
        let hvp = g.get(x).unwrap().item().du; // = 2 v
        let dtheta_prime = v - lr * hvp;
        assert!((dtheta_prime - 0.8).abs() < 1e-15);

        // central finite differences of the inner map itself agree
        let inner_map = |th: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::scalar(th));
            let sq = tape.mul(x, x);
            let g = tape.backward(sq);
            th - lr * g.get(x).unwrap().item()
        };
        let h = 1e-6;
        let fd = (inner_map(theta + h) - inner_map(theta - h)) / (2.0 * h);
        assert!((fd - dtheta_prime).abs() < 1e-9);
    }

    // ---- integration on tiny nets ------------------------------------------

    struct TinyWorld {
        gen: Generator,
        g_params: GeneratorParams,
        e_adv: PerturbEncoderParams,
        ensemble: SurrogateEnsemble,
        targets: Vec<Embedding>,
        fusion: FusionConfig,
        images: Vec<ImageTensor>,
        atts: Vec<AttributeVector>,
        noise: Vec<PlannedOp>,
    }

    fn tiny_world(k: usize, batch: usize, with_noise: bool) -> TinyWorld {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let gcfg = GeneratorCfg {
            image_hw: (16, 16),
            in_ch: 3,
            widths: vec![1, 1, 1, 1],
            n_att: 2,
            kernel: 2,
            leak: 0.2,
        };
        let gen = gcfg.build();
        let g_params = gen.init_params(&mut rng);
        let mut e_adv = PerturbEncoderParams::from_encoder(&g_params.enc, "snap");
        // nudge so the attack surface is not at the exact identity point
        for t in e_adv.params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.01;
            }
        }
        assert!(e_adv.params.num_scalars() <= 200, "tiny perturbation encoder too large");

        let n_images = (batch + 1).max(4);
        let images: Vec<ImageTensor> = (0..n_images)
            .map(|i| {
                let mut r = ChaCha20Rng::seed_from_u64(100 + i as u64);
                Tensor::new(vec![3, 16, 16], (0..768).map(|_| r.gen_range(-0.9..0.9)).collect())
            })
            .collect();
        let labels: Vec<usize> = (0..n_images).map(|i| i % 2).collect();
        let emb_cfg = ToyEmbedderCfg {
            widths: vec![2, 2],
            embed_dim: 4,
            kernel: 4,
            lr: 1e-3,
            margin: 0.5,
            triplets_per_epoch: 4,
        };
        let models: Vec<_> = (0..k)
            .map(|i| {
                let m = train_toy_embedder(
                    &images,
                    &labels,
                    &emb_cfg,
                    0,
                    50 + i as u64,
                    &format!("m{i}"),
                    Role::WhiteBoxTrain,
                )
                .unwrap();
                assert!(m.params.num_scalars() <= 500, "tiny embedder too large");
                m
            })
            .collect();
        let ensemble = SurrogateEnsemble::new(models).unwrap();
        let x_target = images[batch].clone();
        let targets = target_embeddings(&ensemble, &x_target).unwrap();
        let atts: Vec<AttributeVector> =
            (0..batch).map(|i| AttributeVector::new(vec![(i % 2) as u8, 1]).unwrap()).collect();
        let noise: Vec<PlannedOp> = (0..batch)
            .map(|i| {
                if with_noise && i % 2 == 0 {
                    PlannedOp { op: NoiseOp::Gaussian { variance: 0.001 }, seed: 9 + i as u64 }
                } else {
                    PlannedOp { op: NoiseOp::Identity, seed: 0 }
                }
            })
            .collect();
        TinyWorld {
            gen,
            g_params,
            e_adv,
            ensemble,
            targets,
            fusion: FusionConfig { beta: 0.5, gamma: 0.3, sigma1: 30.0 },
            images: images[..batch].to_vec(),
            atts,
            noise,
        }
    }

    impl TinyWorld {
        fn ctx(&self) -> AttackContext<'_> {
            AttackContext {
                gen: &self.gen,
                g_params: &self.g_params,
                ensemble: &self.ensemble,
                target_embeddings: &self.targets,
                fusion: &self.fusion,
            }
        }
        fn batch(&self) -> MetaBatch<'_> {
            MetaBatch { images: &self.images, atts: &self.atts, noise: &self.noise }
        }
    }

    #[test]
    fn run_meta_batch_updates_only_the_perturbation_encoder() {
        let mut w = tiny_world(2, 2, true);
        let g_before = w.g_params.clone();
        let e_before = w.e_adv.params.snapshot();
        let weights = AdaptiveWeights::uniform(2);
        let cfg = MetaStepConfig { inner_lr: 1e-3, epsilon: 0.0, second_order: true };
        let mut opt = Adam::new(1e-3, &w.e_adv.params);
        let ctx = AttackContext {
            gen: &w.gen,
            g_params: &w.g_params,
            ensemble: &w.ensemble,
            target_embeddings: &w.targets,
            fusion: &w.fusion,
        };
        let batch = MetaBatch { images: &w.images, atts: &w.atts, noise: &w.noise };
        let mg = run_meta_batch(&ctx, &batch, &mut w.e_adv, &mut opt, &weights, &cfg).unwrap();
        assert!(mg.l_adv.is_finite() && mg.l_adv >= 0.0);
        assert_eq!(mg.per_model_primary.len(), 2, "each model serves as primary once");
        assert!(!w.e_adv.params.bitwise_eq(&e_before), "outer step must move E_adv");
        assert!(w.g_params.bitwise_eq(&g_before), "generator must stay frozen");
    }

    #[test]
    fn second_order_toggle_same_loss_different_grad() {
        let w = tiny_world(2, 1, false);
        let weights = AdaptiveWeights::uniform(2);
        let on = MetaStepConfig { inner_lr: 5e-2, epsilon: 0.0, second_order: true };
        let off = MetaStepConfig { second_order: false, ..on };
        let g_on = meta_adversarial_grad(&w.ctx(), &w.batch(), &w.e_adv.params, &weights, &on)
            .unwrap();
        let g_off = meta_adversarial_grad(&w.ctx(), &w.batch(), &w.e_adv.params, &weights, &off)
            .unwrap();
        assert!((g_on.l_adv - g_off.l_adv).abs() < 1e-12, "losses must agree at step 0");
        let mut diff = g_on.grad.clone();
        diff.add_scaled(&g_off.grad, -1.0);
        assert!(diff.max_abs() > 0.0, "second-order term should change the gradient");
    }

    #[test]
    fn meta_gradient_matches_finite_differences_small() {
        let w = tiny_world(2, 1, true);
        let weights = AdaptiveWeights::uniform(2);
        let cfg = MetaStepConfig { inner_lr: 5e-2, epsilon: 0.0, second_order: true };
        let mg =
            meta_adversarial_grad(&w.ctx(), &w.batch(), &w.e_adv.params, &weights, &cfg).unwrap();
        let flat_grad = mg.grad.flatten();
        let flat = w.e_adv.params.flatten();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..flat.len()).step_by(3) {
            let mut up = w.e_adv.params.clone();
            let mut fu = flat.clone();
            fu[i] += eps;
            up.assign_flat(&fu);
            let mut dn = w.e_adv.params.clone();
            let mut fdn = flat.clone();
            fdn[i] -= eps;
            dn.assign_flat(&fdn);
            let lu = meta_adversarial_loss(&w.ctx(), &w.batch(), &up, &weights, &cfg).unwrap();
            let ld = meta_adversarial_loss(&w.ctx(), &w.batch(), &dn, &weights, &cfg).unwrap();
            let fd = (lu - ld) / (2.0 * eps);
            let an = flat_grad[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max((fd - an).abs() / denom);
        }
        assert!(worst <= 1e-3, "max relative error {worst} above 1e-3");
    }

    #[test]
    fn auxiliary_loss_matches_manual_recomputation() {
        let w = tiny_world(3, 2, false);
        let weights = AdaptiveWeights::uniform(3);
        let split = TaskSplit::new(3, 1).unwrap();
        // stepped parameters: any deterministic perturbation of theta
        let mut theta_prime = w.e_adv.params.clone();
        for t in theta_prime.tensors_mut() {
            for v in t.data_mut() {
                *v *= 0.99;
            }
        }
        let got =
            auxiliary_loss(&w.ctx(), &w.batch(), &theta_prime, &split, &weights).unwrap();

        // manual route: regenerate every protected image at theta_prime and
        // average each auxiliary model's loss at value level
        let e_prime = PerturbEncoderParams { params: theta_prime, init_source: "s".into() };
        let mut per_model = vec![0.0f64; 3];
        for (i, x) in w.images.iter().enumerate() {
            let adv = crate::perturbation::generate_protected(
                &w.gen,
                &w.g_params,
                Some(&e_prime),
                x,
                &w.atts[i],
                &w.fusion,
            )
            .unwrap();
            for (q, m) in w.ensemble.models.iter().enumerate() {
                let e = embed(m, &adv).unwrap();
                per_model[q] +=
                    (1.0 - cosine_similarity(&w.targets[q], &e).unwrap()) / w.images.len() as f64;
            }
        }
        let manual = weighted_aux_mean(&per_model, &weights, 1).unwrap();
        assert!(
            (got - manual).abs() < 1e-9,
            "auxiliary loss {got} does not match manual recomputation {manual}"
        );
        // all auxiliary cosines at 1 give zero loss regardless of weights
        let zeros = weighted_aux_mean(&[0.0, 7.0, 0.0], &weights, 1).unwrap();
        assert_eq!(zeros, 0.0);
    }

    #[test]
    fn clamp_zeroes_the_gradient() {
        let w = tiny_world(2, 1, false);
        let weights = AdaptiveWeights::uniform(2);
        // epsilon far above any possible loss value (primary <= 2, w < e)
        let cfg = MetaStepConfig { inner_lr: 1e-3, epsilon: 50.0, second_order: true };
        let mg =
            meta_adversarial_grad(&w.ctx(), &w.batch(), &w.e_adv.params, &weights, &cfg).unwrap();
        assert_eq!(mg.l_adv, 50.0);
        assert_eq!(mg.grad.max_abs(), 0.0);
    }

    #[test]
    fn ensemble_ablation_gradient_flows() {
        let w = tiny_world(3, 2, false);
        let mg = ensemble_adversarial_grad(&w.ctx(), &w.batch(), &w.e_adv.params, 0.0).unwrap();
        assert_eq!(mg.per_model_primary.len(), 3);
        assert!(mg.grad.max_abs() > 0.0);
        assert!((mg.l_adv - mg.per_model_primary.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
}
