use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dgdata_core::checkpoint::load_checkpoint;
use dgdata_core::data::{
    load_dataset, synth_crossuser, synth_recordings, write_generic_csv, DatasetManifest, DatasetSplit, SynthConfig,
    MANIFEST_FILE,
};
use dgdata_core::methods::{FitOptions, MethodRegistry};
use dgdata_core::metrics::{evaluate, Metrics};
use dgdata_core::report::{digest_file, digest_split, report, RunManifest};
use dgdata_core::train::{TrainConfig, TrainHistory};
use dgdata_core::{CoreError, Result};

const CHECKPOINT_FILE: &str = "model.ckpt";
const PSEUDO_LABEL_FILE: &str = "pseudo_labels.csv";

#[derive(Parser)]
#[command(name = "dgdata", version, about = "Cross-user activity recognition with domain adaptation")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory holding dataset.json and one CSV per user.
    /// Without it, commands run on the built-in synthetic task.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the training seed and seeds data generation and splitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "S1")]
    source_user: String,
    #[arg(long, global = true, default_value = "S2")]
    target_user: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-user dataset as CSV.
    Synth,
    /// Train an adaptation method and evaluate it on the target test windows.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the source-only reference model.
    Baseline,
    /// Summarize run directories and verify their recorded output digests.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run DGDATA and the source-only reference on one real user pair.
    Replicate {
        #[arg(long, default_value = "oppt")]
        schema: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "dgdata")]
    method: String,
    /// Checkpoint every N epochs as well as after the last one (0: last only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct DataOptions {
    schema: String,
    window_seconds: f64,
    overlap: f64,
    val_fraction: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            schema: "generic-csv".into(),
            window_seconds: 3.0,
            overlap: 0.5,
            val_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    train: TrainConfig,
    synth: SynthConfig,
    data: DataOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            synth: SynthConfig::default(),
            data: DataOptions::default(),
        }
    }
}

struct Inputs {
    split: DatasetSplit,
    digests: BTreeMap<String, String>,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CoreError::Config("this command needs --out <dir>".into()))
    }

    fn inputs(&self, cfg: &RunConfig, schema: &str) -> Result<Inputs> {
        let seed = cfg.train.seed;
        let mut digests = BTreeMap::new();
        let split = match &self.data {
            Some(dir) => {
                let manifest_path = dir.join(MANIFEST_FILE);
                if !manifest_path.is_file() {
                    return Err(CoreError::Data(format!("{} not found", manifest_path.display())));
                }
                digests.insert(MANIFEST_FILE.to_string(), digest_file(&manifest_path)?);
                let text = std::fs::read_to_string(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
                let manifest: DatasetManifest =
                    serde_json::from_str(&text).map_err(|e| CoreError::Schema(e.to_string()))?;
                for file in manifest.files.values() {
                    digests.insert(file.clone(), digest_file(&dir.join(file))?);
                }
                let dataset = load_dataset(dir, schema)?;
                let d = &cfg.data;
                dataset.cross_user_split(
                    &self.source_user,
                    &self.target_user,
                    d.window_seconds,
                    d.overlap,
                    d.val_fraction,
                    seed,
                )?
            }
            None => synth_crossuser(&cfg.synth, seed)?,
        };
        digests.insert("split".to_string(), digest_split(&split));
        Ok(Inputs { split, digests })
    }
}

fn manifest_for(command: &str, method: &str, cfg: &RunConfig, inputs: &Inputs) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, method, cfg)?;
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("split".into(), cfg.train.seed);
    m.dataset_digests = inputs.digests.clone();
    Ok(m)
}

fn print_metrics(label: &str, metrics: &Metrics) {
    println!("{label}: target accuracy {:.4}", metrics.accuracy);
}

fn fit_and_report(cli: &Cli, command: &str, method: &str, fit: FitOptions, out: &Path) -> Result<Metrics> {
    let cfg = cli.run_config()?;
    let started = Instant::now();
    let inputs = cli.inputs(&cfg, &cfg.data.schema)?;
    let registry = MethodRegistry::default();
    let fitted = registry.get(method)?.fit(&cfg.train, &inputs.split, &fit)?;
    let metrics = evaluate(fitted.model.as_ref(), &inputs.split.target_test, inputs.split.num_classes())?;
    let mut manifest = manifest_for(command, method, &cfg, &inputs)?;
    for name in [CHECKPOINT_FILE, PSEUDO_LABEL_FILE] {
        let path = out.join(name);
        if fit.checkpoint.as_deref() == Some(&path) || fit.pseudo_label_log.as_deref() == Some(&path) {
            manifest.outputs.insert(name.to_string(), digest_file(&path)?);
        }
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    report(
        &metrics,
        &inputs.split.class_names,
        fitted.history.as_ref(),
        &mut manifest,
        out,
    )?;
    Ok(metrics)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let cfg = cli.run_config()?;
            let out = cli.out_dir()?;
            let (recordings, _) = synth_recordings(&cfg.synth, cfg.train.seed)?;
            let path = write_generic_csv(out, &recordings, &cfg.synth.class_names())?;
            println!("wrote {}", path.display());
        }
        Command::Train(args) => {
            let out = cli.out_dir()?;
            std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
            let fit = if args.method == "dgdata" {
                FitOptions {
                    checkpoint: Some(out.join(CHECKPOINT_FILE)),
                    checkpoint_every: args.checkpoint_every,
                    resume: args.resume.clone(),
                    pseudo_label_log: Some(out.join(PSEUDO_LABEL_FILE)),
                }
            } else {
                FitOptions {
                    resume: args.resume.clone(),
                    ..FitOptions::default()
                }
            };
            let metrics = fit_and_report(cli, "train", &args.method, fit, out)?;
            print_metrics(&args.method, &metrics);
        }
        Command::Baseline => {
            let metrics = fit_and_report(cli, "baseline", "source-only", FitOptions::default(), cli.out_dir()?)?;
            print_metrics("source-only", &metrics);
        }
        Command::Eval { checkpoint } => {
            let cfg = cli.run_config()?;
            let out = cli.out_dir()?;
            let started = Instant::now();
            let state = load_checkpoint(checkpoint)?;
            let inputs = cli.inputs(&cfg, &cfg.data.schema)?;
            if state.model.class_names != inputs.split.class_names {
                return Err(CoreError::Data("checkpoint classes differ from the dataset's".into()));
            }
            let metrics = evaluate(&state.model, &inputs.split.target_test, inputs.split.num_classes())?;
            let mut manifest = manifest_for("eval", "dgdata", &cfg, &inputs)?;
            manifest.dataset_digests.insert("checkpoint".into(), digest_file(checkpoint)?);
            manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            report(&metrics, &inputs.split.class_names, Some(&state.history), &mut manifest, out)?;
            print_metrics("dgdata", &metrics);
        }
        Command::Report { runs } => {
            let mut bad = Vec::new();
            for dir in runs {
                let read = |name: &str| -> Result<String> {
                    let p = dir.join(name);
                    std::fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))
                };
                let metrics: Metrics = serde_json::from_str(&read("metrics.json")?)?;
                let manifest: RunManifest = serde_json::from_str(&read("manifest.json")?)?;
                for (name, digest) in &manifest.outputs {
                    if &digest_file(&dir.join(name))? != digest {
                        bad.push(dir.join(name));
                    }
                }
                let history: Option<TrainHistory> = read("history.json").ok().map(|t| serde_json::from_str(&t)).transpose()?;
                let last_churn = history.and_then(|h| h.epochs.last().map(|r| r.state_churn));
                print!("{}\t{}\taccuracy {:.4}", dir.display(), manifest.method, metrics.accuracy);
                if let Some(c) = last_churn {
                    print!("\tfinal churn {c:.4}");
                }
                println!();
            }
            if !bad.is_empty() {
                let list: Vec<String> = bad.iter().map(|p| p.display().to_string()).collect();
                return Err(CoreError::Integrity(format!("outputs differ from their manifest: {}", list.join(", "))));
            }
        }
        Command::Replicate { schema } => {
            if cli.data.is_none() {
                return Err(CoreError::Data("replicate needs --data <dir> with a real dataset".into()));
            }
            let mut cfg = cli.run_config()?;
            cfg.data.schema = schema.clone();
            let out = cli.out_dir()?;
            let inputs = cli.inputs(&cfg, schema)?;
            let registry = MethodRegistry::default();
            let task = format!("{}→{}", cli.source_user, cli.target_user);
            for method in ["dgdata", "source-only"] {
                let started = Instant::now();
                let fitted = registry.get(method)?.fit(&cfg.train, &inputs.split, &FitOptions::default())?;
                let metrics = evaluate(fitted.model.as_ref(), &inputs.split.target_test, inputs.split.num_classes())?;
                let mut manifest = manifest_for("replicate", method, &cfg, &inputs)?;
                manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
                report(
                    &metrics,
                    &inputs.split.class_names,
                    fitted.history.as_ref(),
                    &mut manifest,
                    &out.join(method),
                )?;
                print_metrics(&format!("{schema} {task} {method}"), &metrics);
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("DGDATA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CoreError::Config(format!("DGDATA_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CoreError::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
