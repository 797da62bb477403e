//! `multipod` — dataset, training, evaluation, and inspection workflows for
//! the multi-pod CVM stage classifiers.
//!
//! Every run starts by printing its resolved configuration (including the
//! seed, which falls back to the `MULTIPOD_SEED` environment variable when a
//! `--seed` flag is absent) so logs are self-describing. Exit codes: 0 on
//! success, 1 on a runtime failure (single-line diagnostic on stderr), 2 on
//! usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use multipod::dataset::synth::{generate_synthetic, SyntheticConfig};
use multipod::dataset::{Manifest, Sex};
use multipod::error::{Error, Result};
use multipod::evaluation::{self, EvalReport};
use multipod::filters;
use multipod::model::{MultiPodConfig, MultiPodModel, PodVariant};
use multipod::pipeline::{self, AugPolicy, ImageBuffer};
use multipod::training::{self, load_checkpoint, EpochRecord, TrainConfig};

#[derive(Parser)]
#[command(
    name = "multipod",
    version,
    about = "Multi-pod convolutional networks for cervical vertebral maturation staging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset (images + manifest.csv).
    Synth(SynthArgs),
    /// Stratified train/test split of a manifest.
    Split(SplitArgs),
    /// Train a model and write runlog.csv, checkpoint.bin, summary.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a manifest.
    Eval(EvalArgs),
    /// Train a grid of configurations and tabulate test accuracies.
    Sweep(SweepArgs),
    /// Export the directional filter bank (kernels.csv + PNG tiles).
    Filters(FiltersArgs),
    /// Cut an image into its three vertebra patches.
    Patches(PatchesArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Images per maturation stage.
    #[arg(long, default_value_t = 100)]
    per_stage: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Pixel noise amplitude.
    #[arg(long, default_value_t = 8.0)]
    noise: f64,
    /// Embed each plate in a larger radiograph-like canvas with an ROI
    /// column in the manifest, instead of writing ready-cropped images.
    #[arg(long)]
    with_roi: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fraction of each class assigned to the training half.
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only records of one sex (F or M) before splitting.
    #[arg(long)]
    sex: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out manifest evaluated after every epoch.
    #[arg(long)]
    test: PathBuf,
    /// singlepod|dupod|tripod|quadpod|stacknet
    #[arg(long, default_value = "tripod")]
    variant: String,
    /// Replace the oriented filter bank with randomly initialised kernels.
    #[arg(long)]
    no_dirfilts: bool,
    /// Keep the filter bank at its informed initialisation (not trained).
    #[arg(long)]
    freeze_filters: bool,
    /// Drop the chronological-age input feature.
    #[arg(long)]
    no_age: bool,
    /// none|translate-ac|randaug|augmix
    #[arg(long, default_value = "translate-ac")]
    policy: String,
    /// Disable per-patch rotation/intensity augmentation.
    #[arg(long)]
    no_patch_aug: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads: 0 = all cores, 1 = sequential.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Also write checkpoint_epN.bin every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads: 0 = all cores, 1 = sequential.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// pods | augment | filters
    #[arg(long)]
    grid: String,
    /// Flat key=value file providing manifest/test/epochs/seeds defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated model/training seeds, e.g. 0,1,2.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FiltersArgs {
    #[arg(long, default_value_t = 1.5)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PatchesArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Split(a) => run_split(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Filters(a) => run_filters(a),
        Command::Patches(a) => run_patches(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Seed precedence: explicit flag, then MULTIPOD_SEED, then 0.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("MULTIPOD_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn print_config(command: &str, fields: serde_json::Value) {
    let mut obj = json!({ "command": command });
    if let (Some(dst), Some(src)) = (obj.as_object_mut(), fields.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    println!("{}", serde_json::to_string_pretty(&obj).expect("config serialises"));
}

fn parse_policy(s: &str) -> Result<AugPolicy> {
    match s {
        "none" => Ok(AugPolicy::None),
        "translate-ac" => Ok(AugPolicy::translate_autocontrast()),
        "randaug" => Ok(AugPolicy::randaugment()),
        "augmix" => Ok(AugPolicy::augmix()),
        other => Err(Error::config(format!(
            "unknown augmentation policy '{other}' (expected none|translate-ac|randaug|augmix)"
        ))),
    }
}

fn policy_token(p: &AugPolicy) -> &'static str {
    match p {
        AugPolicy::None => "none",
        AugPolicy::TranslateAutoContrast { .. } => "translate-ac",
        AugPolicy::RandAugmentLite { .. } => "randaug",
        AugPolicy::AugMixLite { .. } => "augmix",
    }
}

/// Returns the runtime parallel flag and, for an explicit worker count,
/// pins the global thread pool to it (first caller wins, by design).
fn configure_workers(workers: usize) -> bool {
    match workers {
        1 => false,
        0 => true,
        n => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            true
        }
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let cfg = SyntheticConfig {
        per_stage: a.per_stage,
        seed,
        noise: a.noise,
        with_roi: a.with_roi,
        ..SyntheticConfig::default()
    };
    print_config(
        "synth",
        json!({
            "per_stage": cfg.per_stage,
            "noise": cfg.noise,
            "with_roi": cfg.with_roi,
            "out": a.out,
            "seed": seed,
        }),
    );
    create_out_dir(&a.out)?;
    let manifest = generate_synthetic(&cfg, &a.out, true)?;
    println!(
        "wrote {} images and {} ({} records)",
        manifest.len(),
        a.out.join("manifest.csv").display(),
        manifest.len()
    );
    Ok(())
}

fn run_split(a: SplitArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    print_config(
        "split",
        json!({
            "manifest": a.manifest,
            "fraction": a.fraction,
            "sex": a.sex,
            "out": a.out,
            "seed": seed,
        }),
    );
    let mut manifest = Manifest::load(&a.manifest)?;
    for w in manifest.warnings() {
        eprintln!("warning: {w}");
    }
    if let Some(token) = &a.sex {
        let sex = Sex::from_token(token)
            .ok_or_else(|| Error::config(format!("unknown sex '{token}' (expected F or M)")))?;
        manifest = manifest.filter_by_sex(sex);
    }
    let (train, test) = manifest.stratified_split(a.fraction, seed)?;
    create_out_dir(&a.out)?;
    train.rebase(&a.out)?.save(&a.out.join("train.csv"))?;
    test.rebase(&a.out)?.save(&a.out.join("test.csv"))?;
    let (ht, he) = (train.class_histogram(), test.class_histogram());
    println!(
        "train {} records {:?}, test {} records {:?}",
        train.len(),
        ht,
        test.len(),
        he
    );
    Ok(())
}

fn epoch_line(r: &EpochRecord) {
    println!(
        "epoch {:>3}  lr {:<7}  train loss {:.4}  train acc {:.4}  test acc {:.4}",
        r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
    );
}

fn run_train(a: TrainArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let variant = PodVariant::from_token(&a.variant)?;
    let policy = parse_policy(&a.policy)?;
    let parallel = configure_workers(a.workers);

    let model_cfg = MultiPodConfig {
        variant,
        use_directional_filters: !a.no_dirfilts,
        freeze_filters: a.freeze_filters,
        use_age: !a.no_age,
        seed,
        ..MultiPodConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        seed,
        policy,
        patch_aug: !a.no_patch_aug,
        parallel,
        out_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    print_config(
        "train",
        json!({
            "manifest": a.manifest,
            "test": a.test,
            "variant": variant.to_string(),
            "use_directional_filters": model_cfg.use_directional_filters,
            "freeze_filters": model_cfg.freeze_filters,
            "use_age": model_cfg.use_age,
            "filter_sigma": model_cfg.filter_sigma,
            "policy": policy_token(&train_cfg.policy),
            "patch_aug": train_cfg.patch_aug,
            "epochs": train_cfg.epochs,
            "batch_size": train_cfg.batch_size,
            "lr0": train_cfg.lr0,
            "momentum": train_cfg.momentum,
            "weight_decay": train_cfg.weight_decay,
            "milestones": train_cfg.milestones,
            "workers": a.workers,
            "out": a.out,
            "seed": seed,
        }),
    );

    let train_m = Manifest::load(&a.manifest)?;
    let test_m = Manifest::load(&a.test)?;
    for w in train_m.warnings().iter().chain(test_m.warnings()) {
        eprintln!("warning: {w}");
    }
    create_out_dir(&a.out)?;

    let mut model = MultiPodModel::<f32>::build(&model_cfg)?;
    let params = model.param_count();
    println!("{} model, {} trainable parameters", variant, params);

    let log = training::train(
        &mut model,
        &train_m,
        &test_m,
        &train_cfg,
        Some(&mut |r: &EpochRecord| {
            epoch_line(r);
            true
        }),
    )?;
    log.save(&a.out.join("runlog.csv"))?;

    let row_json = |r: &EpochRecord| {
        json!({
            "epoch": r.epoch,
            "train_loss": r.train_loss,
            "train_acc": r.train_acc,
            "test_acc": r.test_acc,
            "lr": r.lr,
        })
    };
    let summary = json!({
        "variant": variant.to_string(),
        "seed": seed,
        "params": params,
        "epochs_run": log.rows.len(),
        "final": log.final_row().map(row_json),
        "best_test": log.best_test().map(row_json),
    });
    let summary_path = a.out.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )
    .map_err(|source| Error::Write {
        path: summary_path,
        source,
    })?;

    if let (Some(f), Some(b)) = (log.final_row(), log.best_test()) {
        println!(
            "final test acc {:.4}; best test acc {:.4} at epoch {}",
            f.test_acc, b.test_acc, b.epoch
        );
    }
    println!("wrote runlog.csv, checkpoint.bin, summary.json to {}", a.out.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "accuracy {:.4} over {} records (variant {}, seed {}, epoch {})",
        report.accuracy, report.n, report.variant, report.seed, report.epoch
    );
    for (i, r) in report.per_class_recall.iter().enumerate() {
        println!("  CS{} recall {:.4}", i + 1, r);
    }
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let parallel = configure_workers(a.workers);
    print_config(
        "eval",
        json!({
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "out": a.out,
            "workers": a.workers,
        }),
    );
    let mut model = load_checkpoint(&a.checkpoint)?;
    println!(
        "loaded {} checkpoint (seed {}, epoch {})",
        model.cfg.variant, model.cfg.seed, model.epoch
    );
    let manifest = Manifest::load(&a.manifest)?;
    for w in manifest.warnings() {
        eprintln!("warning: {w}");
    }
    let report = evaluation::evaluate(&mut model, &manifest, parallel)?;
    evaluation::export_report(&report, &a.out)?;
    print_report(&report);
    println!("wrote report.json, confusion.csv, confusion.png to {}", a.out.display());
    Ok(())
}

/// One grid arm: a named deviation from the shared base configuration.
struct ArmSpec {
    name: &'static str,
    variant: PodVariant,
    dirfilts: bool,
    freeze: bool,
    policy: AugPolicy,
    patch_aug: bool,
}

impl ArmSpec {
    fn base(name: &'static str) -> Self {
        ArmSpec {
            name,
            variant: PodVariant::TriPod,
            dirfilts: true,
            freeze: false,
            policy: AugPolicy::translate_autocontrast(),
            patch_aug: true,
        }
    }
}

fn grid_arms(grid: &str) -> Result<Vec<ArmSpec>> {
    let arms = match grid {
        "pods" => vec![
            ArmSpec {
                variant: PodVariant::SinglePod,
                ..ArmSpec::base("singlepod")
            },
            ArmSpec {
                variant: PodVariant::DuPod,
                ..ArmSpec::base("dupod")
            },
            ArmSpec::base("tripod"),
            ArmSpec {
                variant: PodVariant::QuadPod,
                ..ArmSpec::base("quadpod")
            },
            ArmSpec {
                variant: PodVariant::StackNet,
                ..ArmSpec::base("stacknet")
            },
        ],
        "augment" => vec![
            ArmSpec {
                policy: AugPolicy::None,
                patch_aug: false,
                ..ArmSpec::base("none")
            },
            ArmSpec::base("translate-ac"),
            ArmSpec {
                policy: AugPolicy::randaugment(),
                ..ArmSpec::base("randaug")
            },
            ArmSpec {
                policy: AugPolicy::augmix(),
                ..ArmSpec::base("augmix")
            },
        ],
        "filters" => vec![
            ArmSpec::base("tunable"),
            ArmSpec {
                freeze: true,
                ..ArmSpec::base("frozen")
            },
            ArmSpec {
                dirfilts: false,
                ..ArmSpec::base("off")
            },
        ],
        other => {
            return Err(Error::config(format!(
                "unknown grid '{other}' (expected pods|augment|filters)"
            )))
        }
    };
    Ok(arms)
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad seed '{t}' in list")))
        })
        .collect()
}

/// Flat `key=value` sweep defaults; `#` starts a comment. Recognised keys:
/// manifest, test, epochs, seeds.
fn parse_sweep_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = k.trim().to_string();
        if !matches!(key.as_str(), "manifest" | "test" | "epochs" | "seeds") {
            return Err(Error::config(format!(
                "{}:{}: unknown key '{key}' (expected manifest|test|epochs|seeds)",
                path.display(),
                lineno + 1
            )));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => parse_sweep_file(p)?,
        None => BTreeMap::new(),
    };
    // Flags override file values.
    let manifest_path = a
        .manifest
        .clone()
        .or_else(|| file.get("manifest").map(PathBuf::from))
        .ok_or_else(|| Error::config("sweep needs a train manifest (--manifest or config file)"))?;
    let test_path = a
        .test
        .clone()
        .or_else(|| file.get("test").map(PathBuf::from))
        .ok_or_else(|| Error::config("sweep needs a test manifest (--test or config file)"))?;
    let epochs = match (a.epochs, file.get("epochs")) {
        (Some(e), _) => e,
        (None, Some(v)) => v
            .parse()
            .map_err(|_| Error::config(format!("bad epochs '{v}' in config file")))?,
        (None, None) => 100,
    };
    let seeds = match (&a.seeds, file.get("seeds")) {
        (Some(s), _) => parse_seed_list(s)?,
        (None, Some(v)) => parse_seed_list(v)?,
        (None, None) => vec![0, 1, 2],
    };
    print_config(
        "sweep",
        json!({
            "grid": a.grid,
            "manifest": manifest_path,
            "test": test_path,
            "epochs": epochs,
            "seeds": seeds,
            "out": a.out,
        }),
    );

    let train_m = Manifest::load(&manifest_path)?;
    let test_m = Manifest::load(&test_path)?;
    create_out_dir(&a.out)?;
    let arms = grid_arms(&a.grid)?;

    let mut csv = String::from("arm,seed,params,test_accuracy\n");
    let mut means: Vec<(&str, f64)> = Vec::new();
    for arm in &arms {
        let mut accs = Vec::new();
        for &seed in &seeds {
            let model_cfg = MultiPodConfig {
                variant: arm.variant,
                use_directional_filters: arm.dirfilts,
                freeze_filters: arm.freeze,
                seed,
                ..MultiPodConfig::default()
            };
            let train_cfg = TrainConfig {
                epochs,
                seed,
                policy: arm.policy.clone(),
                patch_aug: arm.patch_aug,
                parallel: true,
                ..TrainConfig::default()
            };
            let mut model = MultiPodModel::<f32>::build(&model_cfg)?;
            let params = model.param_count();
            let log = training::train(&mut model, &train_m, &test_m, &train_cfg, None)?;
            let acc = log.final_row().map(|r| r.test_acc).unwrap_or(0.0);
            println!("arm {:<12} seed {seed}: test acc {acc:.4}", arm.name);
            csv.push_str(&format!("{},{},{},{:.6}\n", arm.name, seed, params, acc));
            accs.push(acc);
        }
        means.push((arm.name, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let csv_path = a.out.join("sweep.csv");
    fs::write(&csv_path, csv).map_err(|source| Error::Write {
        path: csv_path.clone(),
        source,
    })?;
    for (name, mean) in &means {
        println!("arm {name:<12} mean test acc {mean:.4}");
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn run_filters(a: FiltersArgs) -> Result<()> {
    print_config("filters", json!({ "sigma": a.sigma, "out": a.out }));
    let bank = filters::build_bank(a.sigma, false)?;
    create_out_dir(&a.out)?;

    let mut csv = String::from("orientation,theta_deg");
    for t in 0..filters::KERNEL_SIZE * filters::KERNEL_SIZE {
        csv.push_str(&format!(",t{t:02}"));
    }
    csv.push('\n');
    for k in 0..filters::ORIENTATIONS {
        csv.push_str(&format!("{k},{}", filters::orientation_deg(k)));
        for v in bank.kernel(k) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let csv_path = a.out.join("kernels.csv");
    fs::write(&csv_path, csv).map_err(|source| Error::Write {
        path: csv_path,
        source,
    })?;

    for k in 0..filters::ORIENTATIONS {
        let kern = bank.kernel(k);
        let lo = kern.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = kern.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let side = filters::KERNEL_SIZE;
        let img = ImageBuffer::from_fn(side, side, 1, |y, x, _| {
            ((kern[y * side + x] - lo) * scale) as f32
        });
        pipeline::save_png(&img, &a.out.join(format!("kernel_{k}.png")))?;
    }
    println!(
        "wrote kernels.csv and {} kernel tiles to {}",
        filters::ORIENTATIONS,
        a.out.display()
    );
    Ok(())
}

fn run_patches(a: PatchesArgs) -> Result<()> {
    print_config("patches", json!({ "image": a.image, "out": a.out }));
    let img = pipeline::load_png(&a.image)?;
    let prepared = if (img.h(), img.w()) == (pipeline::ROI_H, pipeline::ROI_W) {
        img
    } else {
        println!(
            "resizing {}x{} input to the canonical {}x{} plate",
            img.h(),
            img.w(),
            pipeline::ROI_H,
            pipeline::ROI_W
        );
        pipeline::resize_bilinear(&img, pipeline::ROI_H, pipeline::ROI_W)
    };
    let set = pipeline::extract_patches(&prepared)?;
    create_out_dir(&a.out)?;
    for (k, patch) in set.patches.iter().enumerate() {
        pipeline::save_png(patch, &a.out.join(format!("patch_{k}.png")))?;
    }
    println!("wrote patch_0.png, patch_1.png, patch_2.png to {}", a.out.display());
    Ok(())
}
