//! `ttas` command line: dataset generation, single-method training with
//! checkpoints, checkpoint evaluation, and the full experiment/ablation
//! harness.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use ttas_core::experiment::{
    self, build_spec, parse_config_text, render_ablation, render_report, run_ablation,
    run_experiment, ExperimentError,
};
use ttas_core::losses::TauSchedule;
use ttas_core::metrics::CaseMetrics;
use ttas_core::net::NetworkArchitecture;
use ttas_core::synth::{self, read_image, read_mask, write_dataset, SplitTag};
use ttas_core::train::{
    load_train_state, save_train_state, LabeledExample, Method, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(
    name = "ttas",
    about = "Semi-supervised segmentation lab: teacher/assistant/student training on synthetic effusion phantoms",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset (images, masks, manifest).
    Generate(GenerateArgs),
    /// Train one method on a generated dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the test split of a manifest.
    Evaluate(EvaluateArgs),
    /// Run the full multi-seed method comparison and write CSV reports.
    Experiment(SpecArgs),
    /// Run the labeled-set-size ablation and write per-count reports.
    Ablation(SpecArgs),
}

/// Flags mirroring the dataset config keys.
#[derive(Args, Clone, Default)]
struct DatasetFlags {
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    /// Voxel spacing in mm: sx,sy,sz.
    #[arg(long)]
    spacing_mm: Option<String>,
    /// Effusion area range as fractions of the image: min,max.
    #[arg(long)]
    effusion_area_range: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Intensity levels: background,lung,effusion.
    #[arg(long)]
    intensity_levels: Option<String>,
    /// Dataset generation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_labeled: Option<usize>,
    #[arg(long)]
    n_unlabeled: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl DatasetFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("dataset.image_size", self.image_size.map(|v| v.to_string()));
        push("dataset.spacing_mm", self.spacing_mm.clone());
        push(
            "dataset.effusion_area_range",
            self.effusion_area_range.clone(),
        );
        push("dataset.noise_sigma", self.noise_sigma.map(|v| v.to_string()));
        push("dataset.intensity_levels", self.intensity_levels.clone());
        push("dataset.seed", self.seed.map(|v| v.to_string()));
        push("dataset.n_labeled", self.n_labeled.map(|v| v.to_string()));
        push("dataset.n_unlabeled", self.n_unlabeled.map(|v| v.to_string()));
        push("dataset.n_test", self.n_test.map(|v| v.to_string()));
        out
    }
}

/// Flags mirroring the training config keys.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Learning rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// EMA coefficient in [0, 1].
    #[arg(long)]
    gamma: Option<f64>,
    /// Constant confidence threshold in (0, 1).
    #[arg(long)]
    tau: Option<f64>,
    /// Linear threshold ramp over the run: start,end.
    #[arg(long)]
    tau_ramp: Option<String>,
    /// two_sided or foreground_only.
    #[arg(long)]
    pseudo_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Alternate unlabeled and labeled batches within an epoch.
    #[arg(long)]
    interleave: Option<bool>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("train.alpha", self.alpha.map(|v| v.to_string()));
        push("train.gamma", self.gamma.map(|v| v.to_string()));
        push("train.tau", self.tau.map(|v| v.to_string()));
        push("train.tau_ramp", self.tau_ramp.clone());
        push("train.pseudo_mode", self.pseudo_mode.clone());
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push("train.batch_size", self.batch_size.map(|v| v.to_string()));
        push("train.interleave", self.interleave.map(|v| v.to_string()));
        out
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for images/, masks/ and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Config file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    dataset: DatasetFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Method to train: ttas, ts or supervised.
    #[arg(long)]
    method: String,
    /// Where to write the training-state checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training seed (weight initialization).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Training-state checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset manifest; the test split is evaluated.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for cases.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpecArgs {
    /// Output directory for the CSV reports.
    #[arg(long)]
    out: PathBuf,
    /// Config file with experiment keys; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment name.
    #[arg(long)]
    name: Option<String>,
    /// Comma-separated methods subset: ttas,ts,supervised.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated run seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Single run seed (shorthand for --seeds with one entry).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated labeled-set sizes for the ablation, decreasing.
    #[arg(long)]
    counts: Option<String>,
    /// Comma-separated Dice stratification thresholds in mL.
    #[arg(long)]
    stratification_thresholds_ml: Option<String>,
    #[command(flatten)]
    dataset: DatasetFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Errors that should exit with the usage code.
fn is_usage_error(err: &anyhow::Error) -> bool {
    match err.downcast_ref::<ExperimentError>() {
        Some(ExperimentError::UnknownConfigKey(_))
        | Some(ExperimentError::BadConfig { .. })
        | Some(ExperimentError::InvalidSpec(_)) => true,
        _ => err.downcast_ref::<UsageError>().is_some(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Experiment(args) => cmd_experiment(args, false),
        Command::Ablation(args) => cmd_experiment(args, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 1 } else { 2 })
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<BTreeMap<String, String>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(parse_config_text(&text)?)
        }
        None => Ok(BTreeMap::new()),
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let entries = load_config(args.config.as_deref())?;
    let spec = build_spec(&entries, &args.dataset.overrides())?;
    let split = synth::generate_split(
        &spec.dataset.phantom,
        spec.dataset.n_labeled,
        spec.dataset.n_unlabeled,
        spec.dataset.n_test,
    )?;
    let manifest = write_dataset(&args.out, &split)?;
    println!(
        "wrote {} labeled / {} unlabeled / {} test cases; manifest at {}",
        split.labeled.len(),
        split.unlabeled.len(),
        split.test.len(),
        manifest.display()
    );
    Ok(())
}

struct LoadedDataset {
    labeled: Vec<LabeledExample>,
    unlabeled: Vec<ttas_core::tensor::Tensor>,
    test: Vec<(String, ttas_core::tensor::Tensor, synth::MaskVolume)>,
}

fn load_dataset(manifest_path: &Path) -> anyhow::Result<LoadedDataset> {
    let entries = synth::read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = LoadedDataset {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for e in &entries {
        let (image, _) = read_image(&base.join(&e.image_path))
            .with_context(|| format!("case {}", e.id))?;
        match e.split {
            SplitTag::Labeled => {
                let mask_rel = e
                    .mask_path
                    .as_ref()
                    .ok_or_else(|| anyhow!("labeled case {} has no mask", e.id))?;
                let mask = read_mask(&base.join(mask_rel))?;
                out.labeled.push(LabeledExample {
                    image,
                    mask: mask.to_tensor(),
                });
            }
            SplitTag::Unlabeled => out.unlabeled.push(image),
            SplitTag::Test => {
                let mask_rel = e
                    .mask_path
                    .as_ref()
                    .ok_or_else(|| anyhow!("test case {} has no mask", e.id))?;
                let mask = read_mask(&base.join(mask_rel))?;
                out.test.push((e.id.clone(), image, mask));
            }
        }
    }
    Ok(out)
}

fn train_config_from_flags(
    method: Method,
    seed: u64,
    config: Option<&Path>,
    flags: &TrainFlags,
) -> anyhow::Result<TrainConfig> {
    // Route through the spec builder so config files and flags share one
    // key namespace and validation path.
    let entries = load_config(config)?;
    let mut overrides = flags.overrides();
    overrides.push(("methods".to_string(), method.as_str().to_string()));
    let spec = build_spec(&entries, &overrides)?;
    let mut cfg = spec.train[&method].clone();
    cfg.method = method;
    cfg.seed = seed;
    if let TauSchedule::LinearRamp { total_epochs, .. } = &mut cfg.tau_schedule {
        *total_epochs = cfg.epochs.max(2);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let method = Method::parse(&args.method)
        .ok_or_else(|| UsageError(format!("unknown method {:?}", args.method)))
        .map_err(anyhow::Error::from)?;
    let data = load_dataset(&args.data)?;
    if data.labeled.is_empty() {
        bail!("manifest {} has no labeled cases", args.data.display());
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let state = load_train_state(path)?;
            if state.cfg.method != method {
                bail!(
                    "checkpoint was trained with {}, requested {}",
                    state.cfg.method,
                    method
                );
            }
            Trainer::from_state(state)?
        }
        None => {
            let cfg =
                train_config_from_flags(method, args.seed, args.config.as_deref(), &args.train)?;
            Trainer::new(NetworkArchitecture::default(), cfg)?
        }
    };
    trainer.train(&data.labeled, &data.unlabeled)?;
    save_train_state(&args.ckpt, &trainer.state)?;
    let last = trainer.state.history.last();
    println!(
        "trained {} for {} epochs; labeled-set dice {}; checkpoint at {}",
        method,
        trainer.state.epoch,
        last.map_or("n/a".to_string(), |r| experiment::format_g6(r.val_dice)),
        args.ckpt.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let state = load_train_state(&args.ckpt)?;
    let method = state.cfg.method;
    let seed = state.cfg.seed;
    let trainer = Trainer::from_state(state)?;
    let data = load_dataset(&args.data)?;
    if data.test.is_empty() {
        bail!("manifest {} has no test cases", args.data.display());
    }
    let mut cases = Vec::new();
    for (id, image, gt) in &data.test {
        let probs = trainer.predict(&image.clone().into_batch())?;
        let pred = synth::MaskVolume::from_probs(&probs, gt.spacing_mm)?;
        cases.push(CaseMetrics::compute(id, &pred, gt)?);
    }
    let report = experiment::ExperimentReport {
        name: format!("evaluate_{method}"),
        methods: vec![method],
        seeds: vec![seed],
        stratification_thresholds_ml: vec![0.0],
        config_hash: trainer.state.cfg.hash(),
        runs: vec![experiment::MethodSeedRun {
            method,
            seed,
            cases,
            duration_secs: 0.0,
        }],
    };
    let files = render_report(&report, &args.out)?;
    println!(
        "evaluated {} test cases; wrote {} files under {}",
        data.test.len(),
        files.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_experiment(args: SpecArgs, ablation: bool) -> anyhow::Result<()> {
    let entries = load_config(args.config.as_deref())?;
    let mut overrides = Vec::new();
    if let Some(name) = &args.name {
        overrides.push(("name".to_string(), name.clone()));
    }
    if let Some(methods) = &args.methods {
        overrides.push(("methods".to_string(), methods.clone()));
    }
    if let Some(seeds) = &args.seeds {
        overrides.push(("seeds".to_string(), seeds.clone()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seeds".to_string(), seed.to_string()));
    }
    if let Some(counts) = &args.counts {
        overrides.push(("ablation_labeled_counts".to_string(), counts.clone()));
    }
    if let Some(t) = &args.stratification_thresholds_ml {
        overrides.push(("stratification_thresholds_ml".to_string(), t.clone()));
    }
    overrides.extend(args.dataset.overrides());
    overrides.extend(args.train.overrides());
    let mut spec = build_spec(&entries, &overrides)?;
    spec.output_dir = args.out.clone();

    if ablation {
        if spec.ablation_labeled_counts.is_none() {
            return Err(UsageError(
                "ablation requires --counts or ablation_labeled_counts in the config".into(),
            )
            .into());
        }
        let report = run_ablation(&spec)?;
        let files = render_ablation(&report, &spec.output_dir)?;
        println!(
            "wrote {} files under {}",
            files.len(),
            spec.output_dir.display()
        );
    } else {
        let report = run_experiment(&spec)?;
        let files = render_report(&report, &spec.output_dir)?;
        println!(
            "wrote {} files under {}",
            files.len(),
            spec.output_dir.display()
        );
    }
    Ok(())
}
