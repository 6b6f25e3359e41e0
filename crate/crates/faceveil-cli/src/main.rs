//! Command-line surface for the faceveil pipeline: dataset ingestion,
//! threshold calibration, three-stage training, protection, erasion, and
//! evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use faceveil::config::ExperimentConfig;
use faceveil::dataset::{load_image, save_image, DatasetIndex, Split, TrainData};
use faceveil::error::{Error, Result};
use faceveil::eval::MetricsReport;
use faceveil::gan::AttributeVector;
use faceveil::noise::evaluation_transforms;
use faceveil::surrogate::{
    calibrate_threshold, train_toy_embedder, ManifestEntry, ModelManifest, Role, SurrogateEnsemble,
    SurrogateModel, ThresholdKind, ToyEmbedderCfg, FAR_ATTACK, FAR_ERASION,
};

use faceveil::tensor::ImageTensor;
use faceveil::trainer::{evaluate_pipeline, Trainer};

#[derive(Parser)]
#[command(name = "faceveil", version, about = "Erasable adversarial face protection pipeline")]
struct Cli {
    /// Global seed override (also honored via the SEED environment variable).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset index from pre-cropped images and an attributes CSV.
    Ingest(IngestArgs),
    /// Train (if absent) and threshold-calibrate the surrogate model registry.
    Calibrate(CalibrateArgs),
    /// Run one training stage (1, 2 or 3).
    Train(TrainArgs),
    /// Generate protected images.
    Protect(ProtectArgs),
    /// Erase the perturbation from protected images.
    Erase(EraseArgs),
    /// Evaluate attack/erasion success, quality and robustness.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of pre-cropped 8-bit RGB images.
    #[arg(long)]
    images: PathBuf,
    /// CSV with header `filename,<attr...>` and 0/1 values.
    #[arg(long)]
    attributes: PathBuf,
    /// Output index file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: PathBuf,
    /// FAR target for the attack threshold.
    #[arg(long, default_value_t = FAR_ATTACK)]
    far_attack: f64,
    /// FAR target for the erasion threshold.
    #[arg(long, default_value_t = FAR_ERASION)]
    far_erasion: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage: u8,
    /// Directory for checkpoints and logs.
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from an explicit checkpoint instead of the stage convention.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ProtectArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    images: PathBuf,
    /// Requested attributes: an explicit bit string (e.g. `0101`) or
    /// `flip:<attr_name>` to flip one source attribute per image (requires
    /// the dataset index).
    #[arg(long)]
    att_b: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EraseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output metrics report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Evaluation split: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write per-image similarity/decision rows to this CSV.
    #[arg(long)]
    per_image: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own help/version output is not an error
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, cli.seed),
        Command::Calibrate(a) => cmd_calibrate(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Protect(a) => cmd_protect(a, cli.seed),
        Command::Erase(a) => cmd_erase(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a, cli.seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.display().to_string()));
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_ingest(a: IngestArgs, seed: Option<u64>) -> Result<()> {
    refuse_overwrite(&a.out, a.force)?;
    let split_seed = seed
        .or_else(|| std::env::var("SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0);
    let index = DatasetIndex::ingest(&a.images, &a.attributes, split_seed)?;
    index.save(&a.out)?;
    println!(
        "ingested {} images ({} attributes) -> {}",
        index.entries.len(),
        index.attribute_names.len(),
        a.out.display()
    );
    Ok(())
}

fn manifest_path(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.ensemble_manifest
        .clone()
        .ok_or_else(|| Error::Config("config is missing 'ensemble_manifest'".into()))
}

fn dataset_index(cfg: &ExperimentConfig) -> Result<DatasetIndex> {
    let path = cfg
        .dataset_index
        .clone()
        .ok_or_else(|| Error::Config("config is missing 'dataset_index'".into()))?;
    DatasetIndex::load(&path)
}

fn target_image(cfg: &ExperimentConfig) -> Result<ImageTensor> {
    let path = cfg
        .target_image
        .clone()
        .ok_or_else(|| Error::Config("config is missing 'target_image'".into()))?;
    load_image(&path)
}

/// Load registry models; when the manifest does not exist yet, train the
/// default toy registry (three white-box models and one held-out black-box
/// model) from the training split and write it.
fn load_or_train_registry(cfg: &ExperimentConfig) -> Result<(ModelManifest, Vec<SurrogateModel>)> {
    let path = manifest_path(cfg)?;
    if path.exists() {
        let manifest = ModelManifest::load(&path)?;
        let models = manifest.load_models(&path)?;
        return Ok((manifest, models));
    }
    let index = dataset_index(cfg)?;
    let train = index.load_split(Split::Train)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    let roles =
        [Role::WhiteBoxTrain, Role::WhiteBoxTrain, Role::WhiteBoxTrain, Role::BlackBoxEval];
    let mut manifest = ModelManifest::default();
    let mut models = Vec::new();
    for (i, role) in roles.iter().enumerate() {
        // vary trunk widths slightly so the registry is architecturally diverse
        let widths: Vec<usize> = cfg.embedder_widths.iter().map(|w| w + (i % 2) * 2).collect();
        let ecfg = ToyEmbedderCfg {
            widths,
            embed_dim: cfg.embedder_dim,
            kernel: cfg.kernel,
            lr: 2e-3,
            margin: 0.5,
            triplets_per_epoch: 64,
        };
        let id = format!("toy{i}");
        let model = train_toy_embedder(
            &train.images,
            &train.labels,
            &ecfg,
            cfg.embedder_epochs,
            cfg.seed.wrapping_add(100 + i as u64),
            &id,
            *role,
        )?;
        let file = format!("{id}.fvb");
        model.save(&dir.join(&file))?;
        manifest.models.push(ManifestEntry {
            id,
            role: *role,
            embed_dim: cfg.embedder_dim,
            tau_attack: None,
            tau_erasion: None,
            checkpoint: file,
        });
        models.push(model);
        println!("trained registry model toy{i} ({role:?})");
    }
    manifest.save(&path)?;
    Ok((manifest, models))
}

fn cmd_calibrate(a: CalibrateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let path = manifest_path(&cfg)?;
    let (mut manifest, mut models) = load_or_train_registry(&cfg)?;
    let index = dataset_index(&cfg)?;
    let train = index.load_split(Split::Train)?;
    let (genuine, impostor) = train.calibration_pairs(1000);
    if impostor.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "need at least 100 impostor pairs for calibration, found {}",
            impostor.len()
        )));
    }
    for (model, entry) in models.iter_mut().zip(&mut manifest.models) {
        let ta =
            calibrate_threshold(model, &genuine, &impostor, a.far_attack, ThresholdKind::Attack)?;
        let te =
            calibrate_threshold(model, &genuine, &impostor, a.far_erasion, ThresholdKind::Erasion)?;
        entry.tau_attack = Some(ta);
        entry.tau_erasion = Some(te);
        println!("{}: tau_attack={ta:.4} tau_erasion={te:.4}", model.id);
    }
    manifest.save(&path)?;
    println!("manifest updated: {}", path.display());
    Ok(())
}

fn stage_ckpt(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.fvc"))
}

fn white_box_ensemble(models: Vec<SurrogateModel>) -> Result<SurrogateEnsemble> {
    let white: Vec<SurrogateModel> =
        models.into_iter().filter(|m| m.role == Role::WhiteBoxTrain).collect();
    if white.len() < 2 {
        return Err(Error::MissingComponent(
            "stage 2 needs at least two white-box surrogate models; run calibrate first".into(),
        ));
    }
    SurrogateEnsemble::new(white)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    if !(1..=3).contains(&a.stage) {
        return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", a.stage)));
    }
    let cfg = load_config(&a.config, seed)?;
    ensure_dir(&a.out_dir)?;
    let out_ckpt = stage_ckpt(&a.out_dir, a.stage);
    refuse_overwrite(&out_ckpt, a.force)?;

    let index = dataset_index(&cfg)?;
    let train = index.load_split(Split::Train)?;
    let mut trainer = match (&a.resume, a.stage) {
        (Some(path), _) => Trainer::load_checkpoint(&cfg, path)?,
        (None, 1) => Trainer::new(&cfg)?,
        (None, n) => {
            let prev = stage_ckpt(&a.out_dir, n - 1);
            if !prev.is_file() {
                return Err(Error::StageDependency(format!(
                    "stage {n} requires the stage-{} checkpoint {}",
                    n - 1,
                    prev.display()
                )));
            }
            Trainer::load_checkpoint(&cfg, &prev)?
        }
    };

    match a.stage {
        1 => trainer.train_stage1(&train)?,
        2 => {
            let (_, models) = load_or_train_registry(&cfg)?;
            let mut ensemble = white_box_ensemble(models)?;
            let target = target_image(&cfg)?;
            trainer.train_stage2(&train, &mut ensemble, &target)?;
        }
        _ => trainer.train_stage3(&train)?,
    }
    trainer.save_checkpoint(&out_ckpt)?;

    let log_path = a.out_dir.join(format!("train.stage{}.log.jsonl", a.stage));
    let mut log = String::new();
    for entry in trainer.logs.iter().filter(|l| l.stage == a.stage) {
        log.push_str(&serde_json::to_string(entry).map_err(|e| Error::Serde(e.to_string()))?);
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    println!("stage {} complete -> {}", a.stage, out_ckpt.display());
    Ok(())
}

fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::Data {
            location: path.display().to_string(),
            message: "no such file or directory".into(),
        });
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptySet(format!("no png images under {}", path.display())));
    }
    Ok(files)
}

/// Resolve the requested attributes for one input image.
fn resolve_att_b(
    spec: &str,
    file: &Path,
    cfg: &ExperimentConfig,
    index: &Option<DatasetIndex>,
) -> Result<AttributeVector> {
    if let Some(flip) = spec.strip_prefix("flip:") {
        let index = index.as_ref().ok_or_else(|| {
            Error::Config("att_b=flip:<name> needs 'dataset_index' in the config".into())
        })?;
        let name = file.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Data {
            location: file.display().to_string(),
            message: "bad file name".into(),
        })?;
        let entry =
            index.entries.iter().find(|e| e.file == name).ok_or_else(|| Error::Data {
                location: name.to_string(),
                message: "image not present in the dataset index".into(),
            })?;
        let pos = match index.attribute_names.iter().position(|a| a == flip) {
            Some(p) => p,
            None => flip.parse::<usize>().map_err(|_| {
                Error::Config(format!("unknown attribute '{flip}' (and not an index)"))
            })?,
        };
        entry.attributes.flipped(pos)
    } else {
        let att = AttributeVector::from_bitstring(spec)?;
        if att.len() != cfg.n_att {
            return Err(Error::AttributeLength { expected: cfg.n_att, got: att.len() });
        }
        Ok(att)
    }
}

fn cmd_protect(a: ProtectArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let trainer = Trainer::load_checkpoint(&cfg, &a.checkpoint)?;
    if trainer.e_adv.is_none() {
        return Err(Error::StageDependency(
            "protect needs a stage-2 (or later) checkpoint".into(),
        ));
    }
    ensure_dir(&a.out_dir)?;
    let index = cfg.dataset_index.as_ref().map(|p| DatasetIndex::load(p)).transpose()?;
    let files = list_images(&a.images)?;
    let mut sidecar = String::from("input,output,att_b\n");
    for f in &files {
        let out = a.out_dir.join(f.file_name().unwrap());
        refuse_overwrite(&out, a.force)?;
        let x = load_image(f)?;
        let att_b = resolve_att_b(&a.att_b, f, &cfg, &index)?;
        let protected = trainer.protect(&x, &att_b)?;
        save_image(&protected, &out)?;
        let bits: String = att_b.bits().iter().map(|b| char::from(b'0' + b)).collect();
        sidecar.push_str(&format!("{},{},{}\n", f.display(), out.display(), bits));
    }
    let csv = a.out_dir.join("protect.csv");
    std::fs::write(&csv, sidecar).map_err(|e| Error::io(csv.display().to_string(), e))?;
    println!("protected {} images -> {}", files.len(), a.out_dir.display());
    Ok(())
}

fn cmd_erase(a: EraseArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let trainer = Trainer::load_checkpoint(&cfg, &a.checkpoint)?;
    ensure_dir(&a.out_dir)?;
    let files = list_images(&a.images)?;
    for f in &files {
        let out = a.out_dir.join(f.file_name().unwrap());
        refuse_overwrite(&out, a.force)?;
        let x = load_image(f)?;
        let restored = trainer.restore(&x)?;
        save_image(&restored, &out)?;
    }
    println!("erased {} images -> {}", files.len(), a.out_dir.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    refuse_overwrite(&a.out, a.force)?;
    let trainer = Trainer::load_checkpoint(&cfg, &a.checkpoint)?;
    let index = dataset_index(&cfg)?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let data: TrainData = index.load_split(split)?;
    if data.is_empty() {
        return Err(Error::EmptySet(format!("evaluation split '{}'", a.split)));
    }
    let path = manifest_path(&cfg)?;
    let manifest = ModelManifest::load(&path)?;
    let models = manifest.load_models(&path)?;
    let target = target_image(&cfg)?;
    let report: MetricsReport =
        evaluate_pipeline(&trainer, &data, &models, &target, &evaluation_transforms(), cfg.seed)?;
    report.save(&a.out)?;
    if let Some(csv_path) = &a.per_image {
        refuse_overwrite(csv_path, a.force)?;
        // score the protected images exactly as the report did
        let mut protected = Vec::with_capacity(data.len());
        for (i, x) in data.images.iter().enumerate() {
            let att_b = faceveil::trainer::flip_one_bit(&data.atts[i], cfg.seed ^ i as u64)?;
            protected.push(trainer.protect(x, &att_b)?);
        }
        let rows = faceveil::eval::per_image_rows(
            &models,
            &protected,
            &data.files,
            &target,
            ThresholdKind::Attack,
        )?;
        std::fs::write(csv_path, faceveil::eval::per_image_csv(&rows))
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        println!("per-image rows -> {}", csv_path.display());
    }
    let fmt = |m: &BTreeMap<String, f64>| {
        m.iter().map(|(k, v)| format!("{k}={v:.3}")).collect::<Vec<_>>().join(" ")
    };
    println!("ASR: {}", fmt(&report.asr));
    println!("ESR: {}", fmt(&report.esr));
    println!("report -> {}", a.out.display());
    Ok(())
}
