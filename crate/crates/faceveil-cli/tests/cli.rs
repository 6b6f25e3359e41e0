//! End-to-end tests of the command-line surface: ingest, calibrate, the
//! three training stages, protect, erase, evaluate, plus exit-code and
//! determinism contracts.

use std::path::PathBuf;
use std::process::Command;

use faceveil::dataset::{write_synthetic_to_dir, SyntheticSpec};
use faceveil::surrogate::ModelManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_faceveil"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn faceveil");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn run_err(args: &[&str], expect_code: i32) -> String {
    let out = bin().args(args).output().expect("spawn faceveil");
    assert_eq!(
        out.status.code(),
        Some(expect_code),
        "command {:?}: expected exit {expect_code}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).to_string()
}

struct World {
    root: PathBuf,
    config: PathBuf,
    index: PathBuf,
    images: PathBuf,
}

fn setup(tag: &str) -> World {
    let root = std::env::temp_dir().join(format!("fv-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let images = root.join("images");
    let spec = SyntheticSpec { identities: 5, per_identity: 8, size: 16, n_att: 3, seed: 21 };
    let (_csv, data) = write_synthetic_to_dir(&spec, &images).unwrap();
    // target identity lives outside the dataset
    let tspec = SyntheticSpec { identities: 1, per_identity: 1, size: 16, n_att: 3, seed: 777 };
    let target_dir = root.join("target");
    write_synthetic_to_dir(&tspec, &target_dir).unwrap();
    let target = target_dir.join(&faceveil::dataset::generate_synthetic(&tspec).files[0]);
    let _ = data;

    let index = root.join("index.json");
    let config = root.join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "
seed = 5
image.size = 16
gen.widths = 3,4,5,6
gen.n_att = 3
gen.kernel = 4
disc.widths = 3,4,5
batch_size = 4
stage1.epochs = 4
stage2.epochs = 2
stage3.epochs = 2
lr = 0.002
inner_lr = 0.002
lambdas.adv = 10
lambdas.era = 1
embedder.widths = 3,4
embedder.dim = 8
embedder.epochs = 2
dataset_index = {}
ensemble_manifest = {}
target_image = {}
",
            index.display(),
            root.join("models/manifest.json").display(),
            target.display(),
        ),
    )
    .unwrap();
    World { root, config, index, images }
}

#[test]
fn full_cli_workflow() {
    let w = setup("flow");
    let cfg = w.config.to_str().unwrap();
    let attributes = w.images.join("attributes.csv");

    // ---- ingest -----------------------------------------------------------
    let out = run_ok(&[
        "ingest",
        "--images",
        w.images.to_str().unwrap(),
        "--attributes",
        attributes.to_str().unwrap(),
        "--out",
        w.index.to_str().unwrap(),
    ]);
    assert!(out.contains("ingested 40 images"));
    // refuses to overwrite without --force
    run_err(
        &[
            "ingest",
            "--images",
            w.images.to_str().unwrap(),
            "--attributes",
            attributes.to_str().unwrap(),
            "--out",
            w.index.to_str().unwrap(),
        ],
        2,
    );

    // ---- calibrate ---------------------------------------------------------
    run_ok(&["calibrate", "--config", cfg]);
    let manifest_path = w.root.join("models/manifest.json");
    let manifest = ModelManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.models.len(), 4);
    for m in &manifest.models {
        let ta = m.tau_attack.unwrap();
        let te = m.tau_erasion.unwrap();
        assert!(
            ta >= te,
            "attack threshold (FAR 0.01) must be at least the erasion one (FAR 0.1)"
        );
    }
    // calibrate is deterministic: rerun and compare the taus
    run_ok(&["calibrate", "--config", cfg]);
    let manifest2 = ModelManifest::load(&manifest_path).unwrap();
    for (a, b) in manifest.models.iter().zip(&manifest2.models) {
        assert_eq!(a.tau_attack, b.tau_attack);
        assert_eq!(a.tau_erasion, b.tau_erasion);
    }

    // ---- train ------------------------------------------------------------
    let out_dir = w.root.join("runs");
    let od = out_dir.to_str().unwrap();
    // stage 2 before stage 1 is a dependency error (exit 3)
    run_err(&["train", "--config", cfg, "--stage", "2", "--out-dir", od], 3);
    run_ok(&["train", "--config", cfg, "--stage", "1", "--out-dir", od]);
    assert!(out_dir.join("stage1.fvc").is_file());
    assert!(out_dir.join("train.stage1.log.jsonl").is_file());
    run_ok(&["train", "--config", cfg, "--stage", "2", "--out-dir", od]);
    run_ok(&["train", "--config", cfg, "--stage", "3", "--out-dir", od]);
    let ckpt = out_dir.join("stage3.fvc");
    assert!(ckpt.is_file());
    // stage-2 log carries the attack record
    let log = std::fs::read_to_string(out_dir.join("train.stage2.log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["att", "rec", "g", "adv", "era", "perb"] {
        assert!(first["losses"][key].is_number(), "stage-2 log missing '{key}'");
    }
    assert!(first["weights"].as_array().unwrap().len() >= 2);

    // ---- protect ----------------------------------------------------------
    // four inputs from the dataset
    let inputs = w.root.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(&w.images)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    for n in names.iter().take(4) {
        std::fs::copy(w.images.join(n), inputs.join(n)).unwrap();
    }
    let protected = w.root.join("protected");
    run_ok(&[
        "protect",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--images",
        inputs.to_str().unwrap(),
        "--att-b",
        "flip:attr0",
        "--out-dir",
        protected.to_str().unwrap(),
    ]);
    let sidecar = std::fs::read_to_string(protected.join("protect.csv")).unwrap();
    assert_eq!(sidecar.lines().count(), 5, "header plus one row per image");
    assert!(sidecar.lines().next().unwrap().contains("input,output,att_b"));
    // no silent overwrite
    run_err(
        &[
            "protect",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--images",
            inputs.to_str().unwrap(),
            "--att-b",
            "flip:attr0",
            "--out-dir",
            protected.to_str().unwrap(),
        ],
        2,
    );

    // explicit bitstring mode and determinism of repeated runs
    let p2 = w.root.join("protected2");
    let p3 = w.root.join("protected3");
    for out in [&p2, &p3] {
        run_ok(&[
            "protect",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--images",
            inputs.to_str().unwrap(),
            "--att-b",
            "101",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    }
    for n in names.iter().take(4) {
        let a = std::fs::read(p2.join(n)).unwrap();
        let b = std::fs::read(p3.join(n)).unwrap();
        assert_eq!(a, b, "repeated protect must be byte-identical");
    }

    // ---- erase ------------------------------------------------------------
    let restored = w.root.join("restored");
    run_ok(&[
        "erase",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--images",
        protected.to_str().unwrap(),
        "--out-dir",
        restored.to_str().unwrap(),
    ]);
    let restored_count = std::fs::read_dir(&restored)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "png").unwrap_or(false)
        })
        .count();
    assert_eq!(restored_count, 4);

    // ---- evaluate -----------------------------------------------------------
    let report_path = w.root.join("report.json");
    run_ok(&[
        "evaluate",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--split",
        "val",
    ]);
    let report = faceveil::eval::MetricsReport::load(&report_path).unwrap();
    assert!(report.count > 0);
    assert_eq!(report.asr.len(), 4);
    assert_eq!(report.robustness.len(), 7, "one row per evaluation transform");
    for row in report.robustness.values() {
        assert_eq!(row.len(), 4, "one (ASR, ESR) cell per model");
    }
    // report round-trips losslessly
    let json = report.to_json().unwrap();
    assert_eq!(faceveil::eval::MetricsReport::from_json(&json).unwrap(), report);

    // per-image CSV rows: one per (image, model)
    let per_image = w.root.join("per_image.csv");
    run_ok(&[
        "evaluate",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--split",
        "val",
        "--per-image",
        per_image.to_str().unwrap(),
        "--force",
    ]);
    let rows = std::fs::read_to_string(&per_image).unwrap();
    assert_eq!(rows.lines().count(), 1 + report.count * 4);
    assert!(rows.starts_with("image_id,model_id,similarity,decision"));

    // calibrate accepts FAR overrides and they move the thresholds
    run_ok(&["calibrate", "--config", cfg, "--far-attack", "0.9", "--far-erasion", "0.9"]);
    let loose = ModelManifest::load(&manifest_path).unwrap();
    for (strict, l) in manifest.models.iter().zip(&loose.models) {
        assert!(l.tau_attack.unwrap() <= strict.tau_attack.unwrap());
    }
}

#[test]
fn calibrate_refuses_too_few_impostor_pairs() {
    let w = setup("fewpairs");
    // tiny dataset: far fewer than 100 impostor pairs
    let small = w.root.join("small");
    let spec = SyntheticSpec { identities: 2, per_identity: 3, size: 16, n_att: 3, seed: 3 };
    let (csv, _) = write_synthetic_to_dir(&spec, &small).unwrap();
    run_ok(&[
        "ingest",
        "--images",
        small.to_str().unwrap(),
        "--attributes",
        csv.to_str().unwrap(),
        "--out",
        w.index.to_str().unwrap(),
        "--force",
    ]);
    let stderr = run_err(&["calibrate", "--config", w.config.to_str().unwrap()], 2);
    assert!(stderr.contains("100 impostor pairs"), "want the refusal message: {stderr}");
}

#[test]
fn ingest_rejects_bad_rows_with_location() {
    let w = setup("badrow");
    let bad_csv = w.root.join("bad.csv");
    // reference a real file so only the value is at fault
    let mut names: Vec<String> = std::fs::read_dir(&w.images)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    std::fs::write(&bad_csv, format!("filename,attr0\n{},2\n", names[0])).unwrap();
    let stderr = run_err(
        &[
            "ingest",
            "--images",
            w.images.to_str().unwrap(),
            "--attributes",
            bad_csv.to_str().unwrap(),
            "--out",
            w.root.join("idx.json").to_str().unwrap(),
        ],
        2,
    );
    assert!(stderr.contains(":2"), "diagnostic must carry the row number: {stderr}");
}

#[test]
fn usage_errors_exit_one() {
    run_err(&["train", "--bogus-flag"], 1);
    let w = setup("usage");
    // invalid stage number is a usage error
    run_err(
        &[
            "train",
            "--config",
            w.config.to_str().unwrap(),
            "--stage",
            "9",
            "--out-dir",
            w.root.join("x").to_str().unwrap(),
        ],
        1,
    );
}

#[test]
fn evaluate_empty_split_is_explicit_error() {
    let w = setup("empty");
    let attributes = w.images.join("attributes.csv");
    run_ok(&[
        "ingest",
        "--images",
        w.images.to_str().unwrap(),
        "--attributes",
        attributes.to_str().unwrap(),
        "--out",
        w.index.to_str().unwrap(),
    ]);
    // force every entry into the train split
    let mut index = faceveil::dataset::DatasetIndex::load(&w.index).unwrap();
    for e in &mut index.entries {
        e.split = faceveil::dataset::Split::Train;
    }
    index.save(&w.index).unwrap();
    run_ok(&["calibrate", "--config", w.config.to_str().unwrap()]);
    let od = w.root.join("runs");
    run_ok(&[
        "train",
        "--config",
        w.config.to_str().unwrap(),
        "--stage",
        "1",
        "--out-dir",
        od.to_str().unwrap(),
    ]);
    let stderr = run_err(
        &[
            "evaluate",
            "--config",
            w.config.to_str().unwrap(),
            "--checkpoint",
            od.join("stage1.fvc").to_str().unwrap(),
            "--out",
            w.root.join("r.json").to_str().unwrap(),
            "--split",
            "test",
        ],
        2,
    );
    assert!(stderr.contains("empty"), "want an explicit empty-set error: {stderr}");
}
