//! Command-level integration tests: flag plumbing, file outputs, and
//! determinism of the operator workflows.

use pinncast::cli::{
    cmd_check, cmd_eval, cmd_generate, cmd_train, EvalArgs, GenerateArgs, LeadSamplingArg,
    MethodArg, ModelArgs, TrainArgs, VariantArg,
};
use pinncast::data::Dataset;

fn micro_model_args() -> ModelArgs {
    ModelArgs {
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        dropout: 0.1,
        ode_method: MethodArg::Rk4,
        rk4_steps: 2,
    }
}

fn generate_args(out: std::path::PathBuf, seed: u64) -> GenerateArgs {
    GenerateArgs {
        out,
        seed,
        grid: "8x16".into(),
        samples: 24,
        blobs: 2,
        wind_scale: 0.04,
        leads: vec![6.0, 12.0],
        split: Some(vec![16, 4, 4]),
    }
}

#[test]
fn generate_is_reproducible_and_checksummed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cmd_generate(&generate_args(a.clone(), 7)).unwrap();
    cmd_generate(&generate_args(b.clone(), 7)).unwrap();
    assert_eq!(
        std::fs::read(a.with_extension("bin")).unwrap(),
        std::fs::read(b.with_extension("bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.with_extension("manifest")).unwrap(),
        std::fs::read(b.with_extension("manifest")).unwrap()
    );
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.manifest.n_samples, 24);

    // A different seed changes the checksum.
    let c = dir.path().join("c");
    cmd_generate(&generate_args(c.clone(), 8)).unwrap();
    assert_ne!(
        std::fs::read(a.with_extension("bin")).unwrap(),
        std::fs::read(c.with_extension("bin")).unwrap()
    );
}

#[test]
fn generate_into_missing_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("definitely/not/here/data");
    let err = cmd_generate(&generate_args(missing.clone(), 7)).unwrap_err();
    assert!(err.to_string().contains("not/here"), "{err}");
}

fn train_args(dataset: std::path::PathBuf, out: std::path::PathBuf, variant: VariantArg) -> TrainArgs {
    TrainArgs {
        dataset,
        out,
        config: None,
        seed: 3,
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        alpha: 0.3,
        beta: 0.8,
        variant,
        lead_sampling: LeadSamplingArg::Fixed,
        patience: 5,
        model: micro_model_args(),
    }
}

#[test]
fn train_then_eval_produces_full_metric_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_generate(&generate_args(data.clone(), 7)).unwrap();
    let out = dir.path().join("run");
    let summary = cmd_train(&train_args(data.clone(), out.clone(), VariantArg::Full)).unwrap();
    assert!(summary.checkpoint.exists());
    assert!(out.join("train_log.csv").exists());
    assert!(out.join("config.json").exists());

    let metrics = dir.path().join("metrics.csv");
    cmd_eval(&EvalArgs {
        checkpoint: summary.checkpoint,
        dataset: data,
        lead_times: vec![6.0, 12.0],
        out: metrics.clone(),
        batch_size: 8,
        truth: false,
        acc_as_printed: false,
    })
    .unwrap();
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "variable,lead_hours,rmse,acc");
    // 3 variables x 2 lead times.
    assert_eq!(lines.count(), 6);
}

#[test]
fn uniform_lead_sampling_trains_over_all_leads() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_generate(&generate_args(data.clone(), 7)).unwrap();
    let mut args = train_args(data, dir.path().join("run"), VariantArg::Vanilla);
    args.lead_sampling = LeadSamplingArg::Uniform;
    let summary = cmd_train(&args).unwrap();
    assert_eq!(summary.epochs_run, 2);
}

#[test]
fn check_suites_report_success() {
    assert!(cmd_check("attention").unwrap());
    assert!(cmd_check("physics").unwrap());
    assert!(cmd_check("bogus").is_err());
}

#[test]
fn ablate_produces_four_run_directories_and_kinetic_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_generate(&generate_args(data.clone(), 7)).unwrap();
    let ds = Dataset::load(&data).unwrap();

    let mut cfg = pinncast::model::ModelConfig::new(ds.manifest.variables.clone(), 8, 16);
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.ode.method = pinncast::odesolve::OdeMethod::Rk4Fixed;
    cfg.ode.rk4_steps = 2;
    let mut base = pinncast::train::RunConfig::new(cfg);
    base.lr = 1e-3;
    base.batch_size = 8;
    base.epochs = 1;
    base.seed = 5;

    let out = dir.path().join("ablation");
    let rows = pinncast::cli::run_ablation(&ds, &out, &base, 2).unwrap();
    assert_eq!(rows.len(), 4);
    let mut dirs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| {
            let e = e.unwrap();
            e.file_type().unwrap().is_dir().then(|| e.file_name().into_string().unwrap())
        })
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["full", "node", "two_branch", "vanilla"]);
    for d in &dirs {
        assert!(out.join(d).join("checkpoint.ckpt").exists());
    }

    let csv = pinncast::cli::ablation_csv(&rows);
    let header = csv.lines().next().unwrap();
    assert!(header.contains("test_kinetic_err"), "{header}");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_pinncast");

    // Usage error: unknown flag.
    let out = std::process::Command::new(bin)
        .args(["generate", "--no-such-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Usage error: bad path.
    let out = std::process::Command::new(bin)
        .args(["train", "--dataset", "/definitely/missing", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // A passing check suite exits 0.
    let out = std::process::Command::new(bin)
        .args(["check", "attention"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    // Help exits 0.
    let out = std::process::Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
