//! Experiment configuration: a flat `key.path = value` text format.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines ignored. Keys are dotted paths from the documented set below;
//! unknown keys are rejected. The only environment override is `SEED`.
//!
//! Documented keys:
//!
//! ```text
//! seed                      u64     global rng seed
//! image.size                usize   square image side (>= 16)
//! gen.widths                list    encoder channel widths, e.g. 8,16,24,32
//! gen.n_att                 usize   attribute count
//! gen.kernel                usize   conv kernel (2 or 4)
//! disc.widths               list    discriminator trunk widths
//! batch_size                usize
//! stage1.epochs             usize
//! stage2.epochs             usize
//! stage3.epochs             usize
//! lr                        f64     learning rate (all stages)
//! stage1.lr|stage2.lr|stage3.lr    f64   optional per-stage override
//! lambdas.att|rec|g|adv|era|perb   f64
//! beta                      f64     encoder-side fusion weight
//! gamma                     f64     decoder-side injection weight
//! sigma1                    f64     perturbation clamp floor (256x256 scale)
//! epsilon                   f64     adversarial-loss clamp floor
//! inner_lr                  f64     meta inner-step learning rate
//! attack.mode               meta | ensemble
//! attack.second_order       bool
//! noise_pool.prob           f64     per-sample application probability
//! noise_pool.jpeg_quality   u32
//! noise_pool.gaussian_variance  f64
//! noise_pool.resize_factor  f64
//! target_image              path    fixed target-identity image
//! ensemble_manifest         path    white-box model manifest
//! dataset_index             path    ingested dataset index
//! embedder.widths           list    toy embedder trunk widths
//! embedder.dim              usize   embedding dimension
//! embedder.epochs           usize   toy embedder training epochs
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gan::GeneratorCfg;
use crate::noise::{NoiseOp, NoisePool};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Meta,
    Ensemble,
}

/// Loss weights, paper-scale defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub att: f64,
    pub rec: f64,
    pub g: f64,
    pub adv: f64,
    pub era: f64,
    pub perb: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { att: 10.0, rec: 150.0, g: 1.0, adv: 200.0, era: 150.0, perb: 1.0 }
    }
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub gen_widths: Vec<usize>,
    pub n_att: usize,
    pub kernel: usize,
    pub disc_widths: Vec<usize>,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub lr: f64,
    pub stage1_lr: Option<f64>,
    pub stage2_lr: Option<f64>,
    pub stage3_lr: Option<f64>,
    pub lambdas: Lambdas,
    pub beta: f64,
    pub gamma: f64,
    pub sigma1: f64,
    pub epsilon: f64,
    pub inner_lr: f64,
    pub attack_mode: AttackMode,
    pub second_order: bool,
    pub noise_prob: f64,
    pub noise_ops: Vec<String>,
    pub jpeg_quality: u32,
    pub gaussian_variance: f64,
    pub resize_factor: f64,
    pub target_image: Option<PathBuf>,
    pub ensemble_manifest: Option<PathBuf>,
    pub dataset_index: Option<PathBuf>,
    pub embedder_widths: Vec<usize>,
    pub embedder_dim: usize,
    pub embedder_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            image_size: 16,
            gen_widths: vec![8, 16, 24, 32],
            n_att: 13,
            kernel: 4,
            disc_widths: vec![8, 16, 24],
            batch_size: 8,
            stage1_epochs: 200,
            stage2_epochs: 100,
            stage3_epochs: 50,
            lr: 2e-5,
            stage1_lr: None,
            stage2_lr: None,
            stage3_lr: None,
            lambdas: Lambdas::default(),
            beta: 0.5,
            gamma: 0.3,
            sigma1: 30.0,
            epsilon: 0.0,
            inner_lr: 2e-5,
            attack_mode: AttackMode::Meta,
            second_order: true,
            noise_prob: 0.5,
            noise_ops: vec![
                "identity".into(),
                "jpeg".into(),
                "gaussian".into(),
                "resize".into(),
            ],
            jpeg_quality: 50,
            gaussian_variance: 0.003,
            resize_factor: 0.25,
            target_image: None,
            ensemble_manifest: None,
            dataset_index: None,
            embedder_widths: vec![8, 16],
            embedder_dim: 32,
            embedder_epochs: 10,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': expected integer, got '{v}'")))
}
fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': expected integer, got '{v}'")))
}
fn parse_u32(key: &str, v: &str) -> Result<u32> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': expected integer, got '{v}'")))
}
fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': expected number, got '{v}'")))
}
fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected bool, got '{v}'"))),
    }
}
fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect::<Result<Vec<_>>>()
        .and_then(|l| {
            if l.is_empty() {
                Err(Error::Config(format!("key '{key}': empty list")))
            } else {
                Ok(l)
            }
        })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let v = value.trim();
            match key {
                "seed" => cfg.seed = parse_u64(key, v)?,
                "image.size" => cfg.image_size = parse_usize(key, v)?,
                "gen.widths" => cfg.gen_widths = parse_list(key, v)?,
                "gen.n_att" => cfg.n_att = parse_usize(key, v)?,
                "gen.kernel" => cfg.kernel = parse_usize(key, v)?,
                "disc.widths" => cfg.disc_widths = parse_list(key, v)?,
                "batch_size" => cfg.batch_size = parse_usize(key, v)?,
                "stage1.epochs" => cfg.stage1_epochs = parse_usize(key, v)?,
                "stage2.epochs" => cfg.stage2_epochs = parse_usize(key, v)?,
                "stage3.epochs" => cfg.stage3_epochs = parse_usize(key, v)?,
                "lr" => cfg.lr = parse_f64(key, v)?,
                "stage1.lr" => cfg.stage1_lr = Some(parse_f64(key, v)?),
                "stage2.lr" => cfg.stage2_lr = Some(parse_f64(key, v)?),
                "stage3.lr" => cfg.stage3_lr = Some(parse_f64(key, v)?),
                "lambdas.att" => cfg.lambdas.att = parse_f64(key, v)?,
                "lambdas.rec" => cfg.lambdas.rec = parse_f64(key, v)?,
                "lambdas.g" => cfg.lambdas.g = parse_f64(key, v)?,
                "lambdas.adv" => cfg.lambdas.adv = parse_f64(key, v)?,
                "lambdas.era" => cfg.lambdas.era = parse_f64(key, v)?,
                "lambdas.perb" => cfg.lambdas.perb = parse_f64(key, v)?,
                "beta" => cfg.beta = parse_f64(key, v)?,
                "gamma" => cfg.gamma = parse_f64(key, v)?,
                "sigma1" => cfg.sigma1 = parse_f64(key, v)?,
                "epsilon" => cfg.epsilon = parse_f64(key, v)?,
                "inner_lr" => cfg.inner_lr = parse_f64(key, v)?,
                "attack.mode" => {
                    cfg.attack_mode = match v {
                        "meta" => AttackMode::Meta,
                        "ensemble" => AttackMode::Ensemble,
                        _ => {
                            return Err(Error::Config(format!(
                                "attack.mode must be 'meta' or 'ensemble', got '{v}'"
                            )))
                        }
                    }
                }
                "attack.second_order" => cfg.second_order = parse_bool(key, v)?,
                "noise_pool.prob" => cfg.noise_prob = parse_f64(key, v)?,
                "noise_pool.ops" => {
                    cfg.noise_ops = v.split(',').map(|s| s.trim().to_string()).collect();
                }
                "noise_pool.jpeg_quality" => cfg.jpeg_quality = parse_u32(key, v)?,
                "noise_pool.gaussian_variance" => cfg.gaussian_variance = parse_f64(key, v)?,
                "noise_pool.resize_factor" => cfg.resize_factor = parse_f64(key, v)?,
                "target_image" => cfg.target_image = Some(PathBuf::from(v)),
                "ensemble_manifest" => cfg.ensemble_manifest = Some(PathBuf::from(v)),
                "dataset_index" => cfg.dataset_index = Some(PathBuf::from(v)),
                "embedder.widths" => cfg.embedder_widths = parse_list(key, v)?,
                "embedder.dim" => cfg.embedder_dim = parse_usize(key, v)?,
                "embedder.epochs" => cfg.embedder_epochs = parse_usize(key, v)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The only environment override: `SEED` replaces the configured seed.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var("SEED") {
            self.seed = parse_u64("SEED", &seed)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image.size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.gen_widths.len() != 4 {
            return Err(Error::Config("gen.widths must list exactly 4 layer widths".into()));
        }
        if self.kernel != 2 && self.kernel != 4 {
            return Err(Error::Config(format!("gen.kernel {} must be 2 or 4", self.kernel)));
        }
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("beta and gamma must lie in [0, 1]".into()));
        }
        if self.sigma1 <= 0.0 || self.lr <= 0.0 || self.inner_lr <= 0.0 {
            return Err(Error::Config("sigma1, lr and inner_lr must be positive".into()));
        }
        for lr in [self.stage1_lr, self.stage2_lr, self.stage3_lr].into_iter().flatten() {
            if lr <= 0.0 {
                return Err(Error::Config("per-stage lr must be positive".into()));
            }
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        let l = &self.lambdas;
        if [l.att, l.rec, l.g, l.adv, l.era, l.perb].iter().any(|v| *v < 0.0) {
            return Err(Error::Config("all lambdas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Config("noise_pool.prob must lie in [0, 1]".into()));
        }
        for op in &self.noise_ops {
            if !matches!(op.as_str(), "identity" | "jpeg" | "gaussian" | "resize") {
                return Err(Error::Config(format!(
                    "noise_pool.ops entry '{op}' is not a differentiable training op"
                )));
            }
        }
        if self.noise_ops.is_empty() {
            return Err(Error::Config("noise_pool.ops must not be empty".into()));
        }
        if self.batch_size == 0
            || self.stage1_epochs == 0
            || self.stage2_epochs == 0
            || self.stage3_epochs == 0
        {
            return Err(Error::Config("batch_size and stage epochs must be > 0".into()));
        }
        Ok(())
    }

    /// Canonical text form: sorted `key = value` lines. Checkpoints hash this.
    pub fn to_canonical_string(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let list =
            |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("image.size".into(), self.image_size.to_string());
        kv.insert("gen.widths".into(), list(&self.gen_widths));
        kv.insert("gen.n_att".into(), self.n_att.to_string());
        kv.insert("gen.kernel".into(), self.kernel.to_string());
        kv.insert("disc.widths".into(), list(&self.disc_widths));
        kv.insert("batch_size".into(), self.batch_size.to_string());
        kv.insert("stage1.epochs".into(), self.stage1_epochs.to_string());
        kv.insert("stage2.epochs".into(), self.stage2_epochs.to_string());
        kv.insert("stage3.epochs".into(), self.stage3_epochs.to_string());
        kv.insert("lr".into(), format!("{:e}", self.lr));
        if let Some(v) = self.stage1_lr {
            kv.insert("stage1.lr".into(), format!("{v:e}"));
        }
        if let Some(v) = self.stage2_lr {
            kv.insert("stage2.lr".into(), format!("{v:e}"));
        }
        if let Some(v) = self.stage3_lr {
            kv.insert("stage3.lr".into(), format!("{v:e}"));
        }
        kv.insert("lambdas.att".into(), format!("{:e}", self.lambdas.att));
        kv.insert("lambdas.rec".into(), format!("{:e}", self.lambdas.rec));
        kv.insert("lambdas.g".into(), format!("{:e}", self.lambdas.g));
        kv.insert("lambdas.adv".into(), format!("{:e}", self.lambdas.adv));
        kv.insert("lambdas.era".into(), format!("{:e}", self.lambdas.era));
        kv.insert("lambdas.perb".into(), format!("{:e}", self.lambdas.perb));
        kv.insert("beta".into(), format!("{:e}", self.beta));
        kv.insert("gamma".into(), format!("{:e}", self.gamma));
        kv.insert("sigma1".into(), format!("{:e}", self.sigma1));
        kv.insert("epsilon".into(), format!("{:e}", self.epsilon));
        kv.insert("inner_lr".into(), format!("{:e}", self.inner_lr));
        kv.insert(
            "attack.mode".into(),
            match self.attack_mode {
                AttackMode::Meta => "meta".into(),
                AttackMode::Ensemble => "ensemble".into(),
            },
        );
        kv.insert("attack.second_order".into(), self.second_order.to_string());
        kv.insert("noise_pool.prob".into(), format!("{:e}", self.noise_prob));
        kv.insert("noise_pool.ops".into(), self.noise_ops.join(","));
        kv.insert("noise_pool.jpeg_quality".into(), self.jpeg_quality.to_string());
        kv.insert(
            "noise_pool.gaussian_variance".into(),
            format!("{:e}", self.gaussian_variance),
        );
        kv.insert("noise_pool.resize_factor".into(), format!("{:e}", self.resize_factor));
        kv.insert("embedder.widths".into(), list(&self.embedder_widths));
        kv.insert("embedder.dim".into(), self.embedder_dim.to_string());
        kv.insert("embedder.epochs".into(), self.embedder_epochs.to_string());
        if let Some(p) = &self.target_image {
            kv.insert("target_image".into(), p.display().to_string());
        }
        if let Some(p) = &self.ensemble_manifest {
            kv.insert("ensemble_manifest".into(), p.display().to_string());
        }
        if let Some(p) = &self.dataset_index {
            kv.insert("dataset_index".into(), p.display().to_string());
        }
        kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-stage learning rate, defaulting to the global one.
    pub fn stage_lr(&self, stage: u8) -> f64 {
        match stage {
            1 => self.stage1_lr.unwrap_or(self.lr),
            2 => self.stage2_lr.unwrap_or(self.lr),
            _ => self.stage3_lr.unwrap_or(self.lr),
        }
    }

    pub fn generator_cfg(&self) -> GeneratorCfg {
        GeneratorCfg {
            image_hw: (self.image_size, self.image_size),
            in_ch: 3,
            widths: self.gen_widths.clone(),
            n_att: self.n_att,
            kernel: self.kernel,
            leak: 0.2,
        }
    }

    pub fn noise_pool(&self) -> NoisePool {
        let ops = self
            .noise_ops
            .iter()
            .map(|name| match name.as_str() {
                "identity" => NoiseOp::Identity,
                "jpeg" => NoiseOp::Jpeg { quality: self.jpeg_quality },
                "gaussian" => NoiseOp::Gaussian { variance: self.gaussian_variance },
                _ => NoiseOp::Resize { factor: self.resize_factor },
            })
            .collect();
        NoisePool { ops, prob: self.noise_prob }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.lambdas.att, 10.0);
        assert_eq!(cfg.lambdas.rec, 150.0);
        assert_eq!(cfg.lambdas.g, 1.0);
        assert_eq!(cfg.lambdas.adv, 200.0);
        assert_eq!(cfg.lambdas.era, 150.0);
        assert_eq!(cfg.lambdas.perb, 1.0);
        assert_eq!(cfg.stage1_epochs, 200);
        assert_eq!(cfg.stage2_epochs, 100);
        assert_eq!(cfg.stage3_epochs, 50);
        assert_eq!(cfg.lr, 2e-5);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.sigma1, 30.0);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "
            # toy run
            seed = 7
            image.size = 16
            gen.widths = 4, 6, 8, 10
            gen.n_att = 4
            batch_size = 4   # small
            attack.mode = ensemble
            attack.second_order = false
            lambdas.adv = 50
        ";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gen_widths, vec![4, 6, 8, 10]);
        assert_eq!(cfg.attack_mode, AttackMode::Ensemble);
        assert!(!cfg.second_order);
        assert_eq!(cfg.lambdas.adv, 50.0);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("bogus.key = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::parse("seed 7"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("beta = 1.5").is_err());
        assert!(ExperimentConfig::parse("image.size = 12").is_err());
        assert!(ExperimentConfig::parse("gen.widths = 1,2").is_err());
        assert!(ExperimentConfig::parse("lr = 0").is_err());
    }

    #[test]
    fn noise_pool_ops_configurable() {
        let cfg = ExperimentConfig::parse("noise_pool.ops = identity, gaussian").unwrap();
        let pool = cfg.noise_pool();
        assert_eq!(pool.ops.len(), 2);
        assert!(ExperimentConfig::parse("noise_pool.ops = rotate").is_err());
        assert!(ExperimentConfig::parse("noise_pool.ops =").is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::parse("seed = 1").unwrap();
        let b = ExperimentConfig::parse("seed = 2").unwrap();
        assert_ne!(a.hash_hex(), b.hash_hex());
        let a2 = ExperimentConfig::parse("seed = 1").unwrap();
        assert_eq!(a.hash_hex(), a2.hash_hex());
    }
}
