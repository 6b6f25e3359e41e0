//! Three-stage curriculum orchestration.
//!
//! Stage 1 trains the attribute-editing generator against the discriminator.
//! Stage 2 freezes the generator, initializes the perturbation encoder from
//! the encoder snapshot and the restorer from the generator snapshot, and
//! jointly optimizes both: the adversarial term comes from the meta (or plain
//! ensemble) attack and is weighted into one combined step per batch. Stage 3
//! trains the restorer alone. Freezing is enforced by never mounting frozen
//! components as trainable and is asserted bitwise by the tests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, BlobFile};
use crate::config::{AttackMode, ExperimentConfig};
use crate::dataset::TrainData;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::gan::{
    bce_sum_node, gan_loss_nodes, generator_loss_node, l1_mean_node, AttributeVector, Generator,
    GeneratorParams,
};
use crate::meta::{
    adaptive_weights, ensemble_adversarial_grad, meta_adversarial_grad, target_embeddings,
    AdaptiveWeights, AttackContext, MetaBatch, MetaStepConfig,
};
use crate::nn::{Adam, ParamSet};
use crate::noise::{self, NoisePool, PlannedOp};
use crate::perturbation::{
    generate_protected, generate_protected_graph, FusionConfig, PerturbEncoderParams,
    ProtectMounts,
};
use crate::restorer::{self, erasion_loss_node, RestorerParams};
use crate::surrogate::{SurrogateEnsemble, SurrogateModel};
use crate::tape::Tape;
use crate::tensor::{ImageTensor, Tensor};

/// Per-stage view of the experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub lambdas: crate::config::Lambdas,
    pub beta: f64,
    pub gamma: f64,
    pub sigma1: f64,
    pub epsilon: f64,
    pub inner_lr: f64,
    pub noise_pool_prob: f64,
}

impl StageConfig {
    pub fn from_experiment(cfg: &ExperimentConfig, stage: u8) -> StageConfig {
        StageConfig {
            stage,
            epochs: match stage {
                1 => cfg.stage1_epochs,
                2 => cfg.stage2_epochs,
                _ => cfg.stage3_epochs,
            },
            lr: cfg.stage_lr(stage),
            lambdas: cfg.lambdas,
            beta: cfg.beta,
            gamma: cfg.gamma,
            sigma1: cfg.sigma1,
            epsilon: cfg.epsilon,
            inner_lr: cfg.inner_lr,
            noise_pool_prob: cfg.noise_prob,
        }
    }
}

/// One structured record per epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Lambda-weighted term means over the epoch.
    pub losses: BTreeMap<String, f64>,
    pub per_model_primary: Vec<f64>,
    pub weights: Vec<f64>,
    pub l_adv: f64,
}

const CKPT_KIND: &str = "pipeline";

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    config_hash: String,
    stage_completed: u8,
    epoch_in_stage: usize,
    rng_seed: [u8; 32],
    rng_word_pos: String,
    history: Vec<(f64, f64)>,
    opt_steps: BTreeMap<String, u64>,
    e_adv_source: Option<String>,
    restorer_source: Option<String>,
}

/// The training pipeline: architectures, parameters, optimizers, rng.
#[derive(Clone)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub gen: Generator,
    pub disc: crate::nn::DiscriminatorNet,
    pub g_params: GeneratorParams,
    pub d_params: ParamSet,
    pub e_adv: Option<PerturbEncoderParams>,
    pub restorer: Option<RestorerParams>,
    /// Bitwise snapshot of the generator at the end of stage 1.
    pub stage1_snapshot: Option<GeneratorParams>,
    pub stage_completed: u8,
    pub epoch_in_stage: usize,
    pub history_entries: Vec<(f64, f64)>,
    rng: ChaCha20Rng,
    opts: BTreeMap<String, Adam>,
    pub logs: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Trainer> {
        cfg.validate()?;
        let gen = cfg.generator_cfg().build();
        let disc = crate::nn::DiscriminatorNet {
            trunk: crate::nn::ConvStackCfg {
                in_ch: 3,
                widths: cfg.disc_widths.clone(),
                kernel: cfg.kernel,
                stride: 2,
                pad: if cfg.kernel == 2 { 0 } else { 1 },
                leak: 0.2,
            },
            n_att: cfg.n_att,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let g_params = gen.init_params(&mut rng);
        let d_params = disc.init_params(&mut rng);
        Ok(Trainer {
            cfg: cfg.clone(),
            gen,
            disc,
            g_params,
            d_params,
            e_adv: None,
            restorer: None,
            stage1_snapshot: None,
            stage_completed: 0,
            epoch_in_stage: 0,
            history_entries: Vec::new(),
            rng,
            opts: BTreeMap::new(),
            logs: Vec::new(),
        })
    }

    pub fn stage_config(&self, stage: u8) -> StageConfig {
        StageConfig::from_experiment(&self.cfg, stage)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { beta: self.cfg.beta, gamma: self.cfg.gamma, sigma1: self.cfg.sigma1 }
    }

    fn effective_sigma1(&self) -> f64 {
        self.fusion().effective_sigma1(3 * self.cfg.image_size * self.cfg.image_size)
    }

    fn meta_cfg(&self) -> MetaStepConfig {
        MetaStepConfig {
            inner_lr: self.cfg.inner_lr,
            epsilon: self.cfg.epsilon,
            second_order: self.cfg.second_order,
        }
    }

    fn opt(&mut self, name: &str, lr: f64, params: &ParamSet) -> &mut Adam {
        if !self.opts.contains_key(name) {
            self.opts.insert(name.to_string(), Adam::new(lr, params));
        }
        self.opts.get_mut(name).unwrap()
    }

    /// Shuffled batch index lists for one epoch.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Requested attributes for a batch: a seeded permutation of the batch's
    /// own source attributes, so targets stay on the data distribution.
    fn sample_att_b(&mut self, data: &TrainData, batch: &[usize]) -> Vec<AttributeVector> {
        let mut perm: Vec<usize> = batch.to_vec();
        for i in (1..perm.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        perm.iter().map(|&i| data.atts[i].clone()).collect()
    }

    fn guard_finite(&self, losses: &BTreeMap<String, f64>) -> Result<()> {
        for (k, v) in losses {
            if !v.is_finite() {
                return Err(Error::NumericGuard(format!(
                    "loss term '{k}' is not finite ({v}); all terms: {losses:?}"
                )));
            }
        }
        Ok(())
    }

    // ---- stage 1 ---------------------------------------------------------

    /// One alternating discriminator + generator update on a batch. Returns
    /// the lambda-weighted term values.
    pub fn stage1_step(
        &mut self,
        data: &TrainData,
        batch: &[usize],
    ) -> Result<BTreeMap<String, f64>> {
        let att_bs = self.sample_att_b(data, batch);
        let lam = self.cfg.lambdas;

        // discriminator update
        let (l_d, l_att_d) = {
            let mut tape = Tape::<f64>::new();
            let d_m = self.d_params.mount(&mut tape);
            let genc_m = self.g_params.enc.mount(&mut tape);
            let gdec_m = self.g_params.dec.mount(&mut tape);
            let mut d_terms = Vec::new();
            let mut att_terms = Vec::new();
            for (bi, &i) in batch.iter().enumerate() {
                let x = tape.constant(&data.images[i]);
                let att_b = tape.constant(&att_bs[bi].to_tensor());
                let pyr = self.gen.enc.forward(&mut tape, &genc_m, x);
                let fake = self.gen.dec.forward(&mut tape, &gdec_m, &pyr, att_b);
                let fake = tape.detach(fake);
                let (p_real, att_real) = self.disc.forward(&mut tape, &d_m, x);
                let (p_fake, _) = self.disc.forward(&mut tape, &d_m, fake);
                let (l_d_i, _) = gan_loss_nodes(&mut tape, p_real, p_fake);
                d_terms.push(l_d_i);
                att_terms.push(bce_sum_node(&mut tape, att_real, &data.atts[i]));
            }
            let l_d = tape.mean_of(&d_terms);
            let l_att_d = tape.mean_of(&att_terms);
            let total = tape.weighted_sum(&[(l_d, 1.0), (l_att_d, lam.att)], 0.0);
            let grads = tape.backward(total);
            let d_grads = self.d_params.extract_grads(&d_m, &grads);
            let (ld_v, latd_v) = (tape.value(l_d).item(), tape.value(l_att_d).item());
            let mut d_params = std::mem::take(&mut self.d_params);
            self.opt("disc", self.cfg.stage_lr(1), &d_params).step(&mut d_params, &d_grads);
            self.d_params = d_params;
            (ld_v, latd_v)
        };

        // generator update
        let (l_rec, l_att_g, l_g) = {
            let mut tape = Tape::<f64>::new();
            let genc_m = self.g_params.enc.mount(&mut tape);
            let gdec_m = self.g_params.dec.mount(&mut tape);
            let d_m = self.d_params.mount(&mut tape);
            let mut rec_terms = Vec::new();
            let mut att_terms = Vec::new();
            let mut g_terms = Vec::new();
            for (bi, &i) in batch.iter().enumerate() {
                let x = tape.constant(&data.images[i]);
                let att_a = tape.constant(&data.atts[i].to_tensor());
                let att_b = tape.constant(&att_bs[bi].to_tensor());
                let pyr = self.gen.enc.forward(&mut tape, &genc_m, x);
                let fake = self.gen.dec.forward(&mut tape, &gdec_m, &pyr, att_b);
                let recon = self.gen.dec.forward(&mut tape, &gdec_m, &pyr, att_a);
                let (p_fake, att_fake) = self.disc.forward(&mut tape, &d_m, fake);
                rec_terms.push(l1_mean_node(&mut tape, recon, x));
                att_terms.push(bce_sum_node(&mut tape, att_fake, &att_bs[bi]));
                g_terms.push(generator_loss_node(&mut tape, p_fake));
            }
            let l_rec = tape.mean_of(&rec_terms);
            let l_att_g = tape.mean_of(&att_terms);
            let l_g = tape.mean_of(&g_terms);
            let total = tape.weighted_sum(
                &[(l_rec, lam.rec), (l_att_g, lam.att), (l_g, lam.g)],
                0.0,
            );
            let grads = tape.backward(total);
            let enc_grads = self.g_params.enc.extract_grads(&genc_m, &grads);
            let dec_grads = self.g_params.dec.extract_grads(&gdec_m, &grads);
            let vals =
                (tape.value(l_rec).item(), tape.value(l_att_g).item(), tape.value(l_g).item());
            let mut enc = std::mem::take(&mut self.g_params.enc);
            self.opt("g_enc", self.cfg.stage_lr(1), &enc).step(&mut enc, &enc_grads);
            self.g_params.enc = enc;
            let mut dec = std::mem::take(&mut self.g_params.dec);
            self.opt("g_dec", self.cfg.stage_lr(1), &dec).step(&mut dec, &dec_grads);
            self.g_params.dec = dec;
            vals
        };

        let mut losses = BTreeMap::new();
        losses.insert("d".into(), l_d);
        losses.insert("att_d".into(), lam.att * l_att_d);
        losses.insert("rec".into(), lam.rec * l_rec);
        losses.insert("att".into(), lam.att * l_att_g);
        losses.insert("g".into(), lam.g * l_g);
        self.guard_finite(&losses)?;
        Ok(losses)
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptySet("training data".into()));
        }
        if let Some(bad) = data.atts.iter().find(|a| a.len() != self.cfg.n_att) {
            return Err(Error::AttributeLength { expected: self.cfg.n_att, got: bad.len() });
        }
        Ok(())
    }

    /// One full stage-1 epoch (all batches), logged.
    pub fn stage1_epoch(&mut self, data: &TrainData) -> Result<()> {
        self.check_data(data)?;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut nb = 0usize;
        for batch in self.epoch_batches(data.len()) {
            let losses = self.stage1_step(data, &batch)?;
            for (k, v) in losses {
                *sums.entry(k).or_insert(0.0) += v;
            }
            nb += 1;
        }
        for v in sums.values_mut() {
            *v /= nb as f64;
        }
        self.logs.push(EpochLog {
            stage: 1,
            epoch: self.epoch_in_stage,
            losses: sums,
            per_model_primary: vec![],
            weights: vec![],
            l_adv: 0.0,
        });
        self.epoch_in_stage += 1;
        Ok(())
    }

    pub fn train_stage1(&mut self, data: &TrainData) -> Result<()> {
        self.check_data(data)?;
        if self.stage_completed >= 1 {
            return Ok(()); // already done
        }
        while self.epoch_in_stage < self.cfg.stage1_epochs {
            self.stage1_epoch(data)?;
        }
        self.stage_completed = 1;
        self.epoch_in_stage = 0;
        self.stage1_snapshot = Some(self.g_params.clone());
        Ok(())
    }

    // ---- stage 2 ---------------------------------------------------------

    /// Initialize stage-2 components from the frozen generator.
    pub fn begin_stage2(&mut self, k: usize) -> Result<()> {
        if self.stage_completed < 1 {
            return Err(Error::StageDependency(
                "stage 2 requires a completed stage-1 checkpoint".into(),
            ));
        }
        if self.stage1_snapshot.is_none() {
            self.stage1_snapshot = Some(self.g_params.clone());
        }
        if self.e_adv.is_none() {
            self.e_adv = Some(PerturbEncoderParams::from_encoder(&self.g_params.enc, "stage1"));
        }
        if self.restorer.is_none() {
            self.restorer =
                Some(RestorerParams::from_generator(&self.g_params, self.cfg.n_att, "stage1"));
        }
        if self.history_entries.len() != k {
            self.history_entries = vec![(1.0, 1.0); k];
        }
        Ok(())
    }

    fn plan_noise(&mut self, n: usize, pool: &NoisePool) -> Result<Vec<PlannedOp>> {
        (0..n).map(|_| pool.plan_for_sample(&mut self.rng)).collect()
    }

    /// One combined stage-2 update on a batch: the adversarial gradient from
    /// the attack plus the remaining lambda-weighted terms, applied as a
    /// single optimizer step to the perturbation encoder and restorer.
    pub fn stage2_step(
        &mut self,
        data: &TrainData,
        batch: &[usize],
        ensemble: &SurrogateEnsemble,
        targets: &[crate::surrogate::Embedding],
        weights: &AdaptiveWeights,
        acc: &mut Stage2Accumulator,
    ) -> Result<BTreeMap<String, f64>> {
        if self.e_adv.is_none() || self.restorer.is_none() {
            return Err(Error::MissingComponent("stage 2 not initialized".into()));
        }
        let lam = self.cfg.lambdas;
        let fusion = self.fusion();
        let sigma_eff = self.effective_sigma1();
        let pool = self.cfg.noise_pool();
        let att_bs = self.sample_att_b(data, batch);
        let noise_plan = self.plan_noise(batch.len(), &pool)?;
        let images: Vec<ImageTensor> = batch.iter().map(|&i| data.images[i].clone()).collect();

        // adversarial term
        let e_params_now = self.e_adv.as_ref().unwrap().params.clone();
        let mg = {
            let ctx = AttackContext {
                gen: &self.gen,
                g_params: &self.g_params,
                ensemble,
                target_embeddings: targets,
                fusion: &fusion,
            };
            let mb = MetaBatch { images: &images, atts: &att_bs, noise: &noise_plan };
            match self.cfg.attack_mode {
                AttackMode::Meta => {
                    meta_adversarial_grad(&ctx, &mb, &e_params_now, weights, &self.meta_cfg())?
                }
                AttackMode::Ensemble => {
                    ensemble_adversarial_grad(&ctx, &mb, &e_params_now, self.cfg.epsilon)?
                }
            }
        };

        // joint reconstruction/attribute/gan/perturbation/erasion terms
        let e_adv = self.e_adv.as_ref().unwrap();
        let rst = self.restorer.as_ref().unwrap();
        let mut tape = Tape::<f64>::new();
        let e_m = e_adv.params.mount(&mut tape);
        let r_m = rst.mount(&mut tape);
        let genc_m = self.g_params.enc.mount(&mut tape);
        let gdec_m = self.g_params.dec.mount(&mut tape);
        let d_m = self.d_params.mount(&mut tape);
        let mut rec_terms = Vec::new();
        let mut att_terms = Vec::new();
        let mut g_terms = Vec::new();
        let mut perb_terms = Vec::new();
        let mut era_pairs = Vec::new();
        for (bi, &i) in batch.iter().enumerate() {
            let x = tape.constant(&data.images[i]);
            let att_a = tape.constant(&data.atts[i].to_tensor());
            let att_b = tape.constant(&att_bs[bi].to_tensor());
            let mounts =
                ProtectMounts { gen: &self.gen, g_enc: &genc_m, g_dec: &gdec_m, e_adv: &e_m };
            let pg = generate_protected_graph(&mut tape, &mounts, x, att_b, &fusion);
            let x_advn = noise::apply_node(&mut tape, pg.out, &noise_plan[bi])?;
            // image-quality terms judge the uncorrupted protected image
            let (p_fake, att_fake) = self.disc.forward(&mut tape, &d_m, pg.out);
            g_terms.push(generator_loss_node(&mut tape, p_fake));
            att_terms.push(bce_sum_node(&mut tape, att_fake, &att_bs[bi]));
            let recon = self.gen.dec.forward(&mut tape, &gdec_m, &pg.clean_pyramid, att_a);
            rec_terms.push(l1_mean_node(&mut tape, recon, x));
            let reference = tape.detach(pg.clean_decode);
            perb_terms.push(crate::perturbation::perturbation_loss_node(
                &mut tape, pg.out, reference, sigma_eff,
            ));
            let x_rec = restorer::restore_node(&mut tape, &self.gen, rst, &r_m, x_advn, None);
            era_pairs.push((x_rec, x));
        }
        let l_rec = tape.mean_of(&rec_terms);
        let l_att = tape.mean_of(&att_terms);
        let l_g = tape.mean_of(&g_terms);
        let l_perb = tape.mean_of(&perb_terms);
        let l_era = erasion_loss_node(&mut tape, &era_pairs);
        let total = tape.weighted_sum(
            &[
                (l_att, lam.att),
                (l_rec, lam.rec),
                (l_g, lam.g),
                (l_era, lam.era),
                (l_perb, lam.perb),
            ],
            0.0,
        );
        let grads = tape.backward(total);
        let mut e_grads = e_adv.params.extract_grads(&e_m, &grads);
        let r_grads = rst.params.extract_grads(&r_m, &grads);
        e_grads.add_scaled(&mg.grad, lam.adv);

        let mut losses = BTreeMap::new();
        losses.insert("att".into(), lam.att * tape.value(l_att).item());
        losses.insert("rec".into(), lam.rec * tape.value(l_rec).item());
        losses.insert("g".into(), lam.g * tape.value(l_g).item());
        losses.insert("adv".into(), lam.adv * mg.l_adv);
        losses.insert("era".into(), lam.era * tape.value(l_era).item());
        losses.insert("perb".into(), lam.perb * tape.value(l_perb).item());
        self.guard_finite(&losses)?;

        // one combined optimizer step
        let mut e_comp = self.e_adv.take().unwrap();
        self.opt("e_adv", self.cfg.stage_lr(2), &e_comp.params).step(&mut e_comp.params, &e_grads);
        self.e_adv = Some(e_comp);
        let mut r_comp = self.restorer.take().unwrap();
        self.opt("restorer", self.cfg.stage_lr(2), &r_comp.params).step(&mut r_comp.params, &r_grads);
        self.restorer = Some(r_comp);

        acc.add(&mg.per_model_primary, mg.l_adv, &losses);
        Ok(losses)
    }

    /// One full stage-2 epoch: all batches under the epoch's adaptive weights,
    /// then the loss-history/weights update.
    pub fn stage2_epoch(
        &mut self,
        data: &TrainData,
        ensemble: &mut SurrogateEnsemble,
        targets: &[crate::surrogate::Embedding],
    ) -> Result<()> {
        self.check_data(data)?;
        let weights = adaptive_weights(&ensemble.loss_history);
        let mut acc = Stage2Accumulator::new(ensemble.k());
        for batch in self.epoch_batches(data.len()) {
            self.stage2_step(data, &batch, ensemble, targets, &weights, &mut acc)?;
        }
        let means = acc.primary_means();
        ensemble.loss_history.push_epoch(&means);
        self.history_entries = ensemble.loss_history.entries().to_vec();
        self.logs.push(EpochLog {
            stage: 2,
            epoch: self.epoch_in_stage,
            losses: acc.loss_means(),
            per_model_primary: means,
            weights: weights.w.clone(),
            l_adv: acc.l_adv_mean(),
        });
        self.epoch_in_stage += 1;
        Ok(())
    }

    pub fn train_stage2(
        &mut self,
        data: &TrainData,
        ensemble: &mut SurrogateEnsemble,
        x_target: &ImageTensor,
    ) -> Result<()> {
        if self.stage_completed < 1 {
            return Err(Error::StageDependency(
                "stage 2 requires a completed stage-1 checkpoint".into(),
            ));
        }
        if self.stage_completed >= 2 {
            return Ok(());
        }
        self.begin_stage2(ensemble.k())?;
        ensemble.loss_history =
            crate::surrogate::LossHistory::restore(self.history_entries.clone());
        let targets = target_embeddings(ensemble, x_target)?;
        let g_snapshot = self.stage1_snapshot.clone().unwrap();
        while self.epoch_in_stage < self.cfg.stage2_epochs {
            self.stage2_epoch(data, ensemble, &targets)?;
            debug_assert!(
                self.g_params.bitwise_eq(&g_snapshot),
                "generator moved during stage 2"
            );
        }
        self.stage_completed = 2;
        self.epoch_in_stage = 0;
        Ok(())
    }

    // ---- stage 3 ---------------------------------------------------------

    /// One restorer-only update on a batch.
    pub fn stage3_step(
        &mut self,
        data: &TrainData,
        batch: &[usize],
    ) -> Result<BTreeMap<String, f64>> {
        if self.e_adv.is_none() || self.restorer.is_none() {
            return Err(Error::StageDependency(
                "stage 3 requires a completed stage-2 checkpoint".into(),
            ));
        }
        let fusion = self.fusion();
        let pool = self.cfg.noise_pool();
        let att_bs = self.sample_att_b(data, batch);
        let noise_plan = self.plan_noise(batch.len(), &pool)?;
        let (e_adv, rst) = (self.e_adv.as_ref().unwrap(), self.restorer.as_ref().unwrap());

        let mut tape = Tape::<f64>::new();
        let e_m = e_adv.params.mount(&mut tape);
        let r_m = rst.mount(&mut tape);
        let genc_m = self.g_params.enc.mount(&mut tape);
        let gdec_m = self.g_params.dec.mount(&mut tape);
        let mut era_pairs = Vec::new();
        for (bi, &i) in batch.iter().enumerate() {
            let x = tape.constant(&data.images[i]);
            let att_b = tape.constant(&att_bs[bi].to_tensor());
            let mounts =
                ProtectMounts { gen: &self.gen, g_enc: &genc_m, g_dec: &gdec_m, e_adv: &e_m };
            let adv = crate::perturbation::generate_protected_node(
                &mut tape, &mounts, x, att_b, &fusion,
            );
            let adv = tape.detach(adv); // only R trains in stage 3
            let x_advn = noise::apply_node(&mut tape, adv, &noise_plan[bi])?;
            let x_rec = restorer::restore_node(&mut tape, &self.gen, rst, &r_m, x_advn, None);
            era_pairs.push((x_rec, x));
        }
        let l_era = erasion_loss_node(&mut tape, &era_pairs);
        let grads = tape.backward(l_era);
        let r_grads = rst.params.extract_grads(&r_m, &grads);

        let mut losses = BTreeMap::new();
        losses.insert("era".into(), tape.value(l_era).item());
        self.guard_finite(&losses)?;

        let mut r_comp = self.restorer.take().unwrap();
        self.opt("restorer3", self.cfg.stage_lr(3), &r_comp.params).step(&mut r_comp.params, &r_grads);
        self.restorer = Some(r_comp);
        Ok(losses)
    }

    /// One full stage-3 epoch, logged.
    pub fn stage3_epoch(&mut self, data: &TrainData) -> Result<()> {
        self.check_data(data)?;
        let mut sum = 0.0;
        let mut nb = 0usize;
        for batch in self.epoch_batches(data.len()) {
            let losses = self.stage3_step(data, &batch)?;
            sum += losses["era"];
            nb += 1;
        }
        let mut losses = BTreeMap::new();
        losses.insert("era".into(), sum / nb as f64);
        self.logs.push(EpochLog {
            stage: 3,
            epoch: self.epoch_in_stage,
            losses,
            per_model_primary: vec![],
            weights: vec![],
            l_adv: 0.0,
        });
        self.epoch_in_stage += 1;
        Ok(())
    }

    pub fn train_stage3(&mut self, data: &TrainData) -> Result<()> {
        if self.stage_completed < 2 {
            return Err(Error::StageDependency(
                "stage 3 requires a completed stage-2 checkpoint".into(),
            ));
        }
        if self.stage_completed >= 3 {
            return Ok(());
        }
        while self.epoch_in_stage < self.cfg.stage3_epochs {
            self.stage3_epoch(data)?;
        }
        self.stage_completed = 3;
        self.epoch_in_stage = 0;
        Ok(())
    }

    // ---- inference helpers -------------------------------------------------

    /// Protect one image under the trained pipeline.
    pub fn protect(&self, x: &ImageTensor, att_b: &AttributeVector) -> Result<ImageTensor> {
        generate_protected(
            &self.gen,
            &self.g_params,
            self.e_adv.as_ref(),
            x,
            att_b,
            &self.fusion(),
        )
    }

    /// Erase the perturbation from one protected image.
    pub fn restore(&self, x_adv: &ImageTensor) -> Result<ImageTensor> {
        let rst = self.restorer.as_ref().ok_or_else(|| {
            Error::MissingComponent("restorer not initialized (stage 2 required)".into())
        })?;
        restorer::restore(&self.gen, rst, x_adv)
    }

    /// Mean held-out reconstruction L1 (stage-1 progress metric).
    pub fn mean_reconstruction_l1(&self, data: &TrainData) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptySet("reconstruction eval set".into()));
        }
        let mut total = 0.0;
        for (x, att) in data.images.iter().zip(&data.atts) {
            let recon = self.gen.edit(&self.g_params, x, att)?;
            total += crate::gan::reconstruction_loss(&recon, x)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Mean held-out erasion loss (stage-3 progress metric); protected images
    /// are generated with per-image seeded attribute flips.
    pub fn mean_erasion_loss(&self, data: &TrainData, seed: u64) -> Result<f64> {
        let mut recs = Vec::new();
        let mut covs = Vec::new();
        for (i, x) in data.images.iter().enumerate() {
            let att_b = flip_one_bit(&data.atts[i], seed ^ i as u64)?;
            let adv = self.protect(x, &att_b)?;
            recs.push(self.restore(&adv)?);
            covs.push(x.clone());
        }
        crate::restorer::erasion_loss(&recs, &covs)
    }

    // ---- checkpointing -----------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut sections = vec![
            ("gen_enc".to_string(), checkpoint::params_to_tensors(&self.g_params.enc)),
            ("gen_dec".to_string(), checkpoint::params_to_tensors(&self.g_params.dec)),
            ("disc".to_string(), checkpoint::params_to_tensors(&self.d_params)),
        ];
        if let Some(e) = &self.e_adv {
            sections.push(("e_adv".into(), checkpoint::params_to_tensors(&e.params)));
        }
        if let Some(r) = &self.restorer {
            sections.push(("restorer".into(), checkpoint::params_to_tensors(&r.params)));
        }
        if let Some(s) = &self.stage1_snapshot {
            sections.push(("snap_enc".into(), checkpoint::params_to_tensors(&s.enc)));
            sections.push(("snap_dec".into(), checkpoint::params_to_tensors(&s.dec)));
        }
        let mut opt_steps = BTreeMap::new();
        for (name, opt) in &self.opts {
            let (m, v) = opt.state();
            opt_steps.insert(name.clone(), opt.step_count);
            sections.push((
                format!("opt.{name}.m"),
                m.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect(),
            ));
            sections.push((
                format!("opt.{name}.v"),
                v.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect(),
            ));
        }
        let meta = CkptMeta {
            config_hash: self.cfg.hash_hex(),
            stage_completed: self.stage_completed,
            epoch_in_stage: self.epoch_in_stage,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            history: self.history_entries.clone(),
            opt_steps,
            e_adv_source: self.e_adv.as_ref().map(|e| e.init_source.clone()),
            restorer_source: self.restorer.as_ref().map(|r| r.init_source.clone()),
        };
        let blob = BlobFile {
            kind: CKPT_KIND.into(),
            meta_json: serde_json::to_string(&meta).map_err(|e| Error::Serde(e.to_string()))?,
            sections,
        };
        checkpoint::write_blob(path, &blob)
    }

    pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Trainer> {
        let blob = checkpoint::read_blob(path)?;
        if blob.kind != CKPT_KIND {
            return Err(Error::CheckpointIntegrity(format!(
                "expected a pipeline checkpoint, found kind '{}'",
                blob.kind
            )));
        }
        let meta: CkptMeta =
            serde_json::from_str(&blob.meta_json).map_err(|e| Error::Serde(e.to_string()))?;
        if meta.config_hash != cfg.hash_hex() {
            return Err(Error::StageDependency(
                "checkpoint config hash does not match the current config; refusing to resume"
                    .into(),
            ));
        }
        let mut t = Trainer::new(cfg)?;
        t.g_params.enc = checkpoint::params_from_tensors(&t.g_params.enc, blob.section("gen_enc")?)?;
        t.g_params.dec = checkpoint::params_from_tensors(&t.g_params.dec, blob.section("gen_dec")?)?;
        t.d_params = checkpoint::params_from_tensors(&t.d_params, blob.section("disc")?)?;
        if blob.section_names().contains(&"snap_enc") {
            t.stage1_snapshot = Some(GeneratorParams {
                enc: checkpoint::params_from_tensors(&t.g_params.enc, blob.section("snap_enc")?)?,
                dec: checkpoint::params_from_tensors(&t.g_params.dec, blob.section("snap_dec")?)?,
            });
        }
        if blob.section_names().contains(&"e_adv") {
            let template = PerturbEncoderParams::from_encoder(&t.g_params.enc, "");
            t.e_adv = Some(PerturbEncoderParams {
                params: checkpoint::params_from_tensors(&template.params, blob.section("e_adv")?)?,
                init_source: meta.e_adv_source.clone().unwrap_or_default(),
            });
        }
        if blob.section_names().contains(&"restorer") {
            let template = RestorerParams::from_generator(&t.g_params, cfg.n_att, "");
            let params =
                checkpoint::params_from_tensors(&template.params, blob.section("restorer")?)?;
            t.restorer =
                Some(template.with_params(params, meta.restorer_source.clone().unwrap_or_default()));
        }
        // optimizer state
        for (name, steps) in &meta.opt_steps {
            let params = match name.as_str() {
                "disc" => t.d_params.clone(),
                "g_enc" => t.g_params.enc.clone(),
                "g_dec" => t.g_params.dec.clone(),
                "e_adv" => t.e_adv.as_ref().map(|e| e.params.clone()).unwrap_or_default(),
                "restorer" | "restorer3" => {
                    t.restorer.as_ref().map(|r| r.params.clone()).unwrap_or_default()
                }
                _ => continue,
            };
            let read = |sec: &str| -> Result<Vec<Tensor<f64>>> {
                Ok(blob.section(sec)?.iter().map(|(_, t)| t.clone()).collect())
            };
            let m = read(&format!("opt.{name}.m"))?;
            let v = read(&format!("opt.{name}.v"))?;
            let mut opt = Adam::new(cfg.lr, &params);
            opt.restore_state(*steps, m, v);
            t.opts.insert(name.clone(), opt);
        }
        t.stage_completed = meta.stage_completed;
        t.epoch_in_stage = meta.epoch_in_stage;
        t.history_entries = meta.history;
        t.rng = ChaCha20Rng::from_seed(meta.rng_seed);
        t.rng.set_word_pos(
            meta.rng_word_pos
                .parse::<u128>()
                .map_err(|_| Error::CheckpointIntegrity("bad rng state".into()))?,
        );
        Ok(t)
    }
}

/// Per-epoch accumulator for stage-2 statistics.
pub struct Stage2Accumulator {
    primary_sums: Vec<f64>,
    l_adv_sum: f64,
    loss_sums: BTreeMap<String, f64>,
    batches: usize,
}

impl Stage2Accumulator {
    pub fn new(k: usize) -> Self {
        Stage2Accumulator {
            primary_sums: vec![0.0; k],
            l_adv_sum: 0.0,
            loss_sums: BTreeMap::new(),
            batches: 0,
        }
    }

    fn add(&mut self, per_model_primary: &[f64], l_adv: f64, losses: &BTreeMap<String, f64>) {
        for (s, &p) in self.primary_sums.iter_mut().zip(per_model_primary) {
            *s += p;
        }
        self.l_adv_sum += l_adv;
        for (k, v) in losses {
            *self.loss_sums.entry(k.clone()).or_insert(0.0) += v;
        }
        self.batches += 1;
    }

    pub fn primary_means(&self) -> Vec<f64> {
        let n = self.batches.max(1) as f64;
        self.primary_sums.iter().map(|s| s / n).collect()
    }

    pub fn l_adv_mean(&self) -> f64 {
        self.l_adv_sum / self.batches.max(1) as f64
    }

    pub fn loss_means(&self) -> BTreeMap<String, f64> {
        let n = self.batches.max(1) as f64;
        self.loss_sums.iter().map(|(k, v)| (k.clone(), v / n)).collect()
    }
}

/// Flip one seeded attribute bit; the evaluation-time attribute policy.
pub fn flip_one_bit(att: &AttributeVector, seed: u64) -> Result<AttributeVector> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    att.flipped(rng.gen_range(0..att.len()))
}

/// Full evaluation of a trained pipeline on an evaluation split: protect every
/// image (one seeded attribute flip each), restore, score ASR/ESR per model,
/// measure quality, and run the robustness sweep.
pub fn evaluate_pipeline(
    trainer: &Trainer,
    data: &TrainData,
    models: &[SurrogateModel],
    x_target: &ImageTensor,
    transforms: &[noise::NoiseOp],
    seed: u64,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptySet("evaluation split".into()));
    }
    let mut protected = Vec::with_capacity(data.len());
    let mut references = Vec::with_capacity(data.len());
    let mut restored = Vec::with_capacity(data.len());
    for (i, x) in data.images.iter().enumerate() {
        let att_b = flip_one_bit(&data.atts[i], seed ^ i as u64)?;
        let adv = trainer.protect(x, &att_b)?;
        references.push(trainer.gen.edit(&trainer.g_params, x, &att_b)?);
        restored.push(trainer.restore(&adv)?);
        protected.push(adv);
    }
    let mut asr_map = BTreeMap::new();
    let mut esr_map = BTreeMap::new();
    for m in models {
        asr_map.insert(m.id.clone(), eval::asr(m, &protected, x_target)?);
        esr_map.insert(m.id.clone(), eval::esr(m, &restored, x_target)?);
    }
    let robustness = eval::robustness_sweep(
        &protected,
        &|x| trainer.restore(x),
        transforms,
        models,
        x_target,
        seed,
    )?;
    Ok(MetricsReport {
        asr: asr_map,
        esr: esr_map,
        quality_protected: eval::mean_quality(&protected, &references)?,
        quality_restored: eval::mean_quality(&restored, &data.images)?,
        robustness,
        count: data.len(),
    })
}
