//! Command-line front end. Every subcommand reads its inputs from files and
//! flags only, and writes CSV artifacts into an output directory.
//!
//! Configuration precedence is built-in defaults, then a JSON config file
//! (`--config`, or `config.json` next to the manifest), then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::data::{generate_synthetic_dataset, kfold_split, Manifest, Sample, NUM_FOLDS};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Fusion, ModelConfig, Variant};
use crate::numerics::Tensor;
use crate::preprocessing::{write_npy, PiqSchema};
use crate::training::{
    evaluate, participant_sweep, read_runs_csv, run_ablation, summarize, train, unit_grid, worker_threads,
    write_ablation_csv, write_curves_csv, write_predictions_csv, write_runs_csv, write_sweep_csv, write_sweep_svg,
    AblationRow, RunResult, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "cppap", version, about = "Contextual probabilistic pleasantness predictor")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a planted label function.
    Synth(SynthArgs),
    /// Decode raw audio and images into a cache of tensors.
    Preprocess(PreprocessArgs),
    /// Train one configuration on one fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-sample predictions.
    Evaluate(EvaluateArgs),
    /// Train a grid of configurations, folds and seeds.
    Ablate(AblateArgs),
    /// Kruskal-Wallis tests over an existing runs.csv.
    Stats(StatsArgs),
    /// Sweep one participant dimension of a trained model.
    Sweep(SweepArgs),
}

/// Model and optimiser overrides shared by the data-consuming subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file of model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// PIQ schema (defaults to piq_schema.json next to the manifest).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    /// Include participant embeddings.
    #[arg(long, conflicts_with = "ep")]
    pub ip: bool,
    /// Exclude participant embeddings.
    #[arg(long)]
    pub ep: bool,
    /// Include visual embeddings.
    #[arg(long, conflicts_with = "ev")]
    pub iv: bool,
    /// Exclude visual embeddings.
    #[arg(long)]
    pub ev: bool,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub output_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Model config JSON fixing tensor shapes (default: the miniature config).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation fold; the other folds are used for training.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Checkpoint path (default: <out>/checkpoint.bin).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to score (default: the manifest recorded in the checkpoint).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Score only this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Seed for silent-masker gains (default: the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated configurations, e.g. baseline,ip-ev-lf (default: all ten).
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub configs: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    pub folds: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, default_value = "runs.csv")]
    pub runs: PathBuf,
    /// Where to write the ablation table (default: ablation.csv next to runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub dim: usize,
    /// Number of evenly spaced grid points on [0, 1].
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    /// Dataset to average over (default: the manifest recorded in the checkpoint).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Also write sweep_<dim>.svg.
    #[arg(long)]
    pub svg: bool,
}

fn parse_fusion(s: &str) -> std::result::Result<Fusion, String> {
    s.parse().map_err(|_| format!("unknown fusion `{s}` (expected ef, mf or lf)"))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|_| format!("unknown configuration `{s}`"))
}

/// Overlays the keys of `file` onto `base`, rejecting keys `base` lacks.
fn overlay(base: &mut Map<String, Value>, file: &Map<String, Value>, source: &Path) -> Result<()> {
    for (k, v) in file {
        match base.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => {
                return Err(Error::Config(format!("unknown key `{k}` in {}", source.display())));
            }
        }
    }
    Ok(())
}

fn read_json_object(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
    }
}

fn sidecar(manifest: Option<&Path>, name: &str) -> Option<PathBuf> {
    let dir = manifest?.parent()?;
    let p = dir.join(name);
    p.is_file().then_some(p)
}

/// Resolves the model and training configuration for a run.
pub fn resolve_config(args: &ConfigArgs, manifest: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    resolve_config_from(args, manifest, ModelConfig::default())
}

fn resolve_config_from(args: &ConfigArgs, manifest: Option<&Path>, model: ModelConfig) -> Result<(ModelConfig, TrainConfig)> {
    let Value::Object(mut model) = serde_json::to_value(model)? else {
        unreachable!("structs serialise to objects")
    };
    let Value::Object(mut train) = serde_json::to_value(TrainConfig::default())? else {
        unreachable!("structs serialise to objects")
    };
    let file = args.config.clone().or_else(|| sidecar(manifest, "config.json"));
    if let Some(path) = &file {
        let obj = read_json_object(path)?;
        let (mut m, mut t) = (Map::new(), Map::new());
        for (k, v) in obj {
            if train.contains_key(&k) {
                t.insert(k, v);
            } else {
                m.insert(k, v);
            }
        }
        overlay(&mut model, &m, path)?;
        overlay(&mut train, &t, path)?;
    }
    let mut model: ModelConfig = serde_json::from_value(Value::Object(model))?;
    let mut train: TrainConfig = serde_json::from_value(Value::Object(train))?;
    if let Some(f) = args.fusion {
        model.fusion = f;
    }
    if args.ip || args.ep {
        model.include_participant = args.ip;
    }
    if args.iv || args.ev {
        model.include_visual = args.iv;
    }
    if let Some(d) = args.embed_dim {
        model.embed_dim = d;
    }
    if let Some(h) = args.output_hidden {
        model.output_hidden = h;
    }
    if let Some(p) = args.dropout {
        model.dropout_rate = p;
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    if let Some(b) = args.batch {
        train.batch_size = b;
    }
    if let Some(e) = args.epochs {
        train.max_epochs = e;
    }
    if let Some(p) = args.patience {
        train.patience = p;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn load_schema(explicit: Option<&Path>, manifest: &Path) -> Result<PiqSchema> {
    match explicit.map(Path::to_path_buf).or_else(|| sidecar(Some(manifest), "piq_schema.json")) {
        Some(p) => PiqSchema::load(p),
        None => Err(Error::Config(format!(
            "no PIQ schema given and no piq_schema.json next to {}",
            manifest.display()
        ))),
    }
}

fn load_dataset(manifest: &Path, schema: Option<&Path>, config: &ModelConfig) -> Result<Vec<Sample>> {
    let m = Manifest::load(manifest)?;
    let schema = load_schema(schema, manifest)?;
    m.load_samples(&schema, config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Manifest named on the command line, else the one the model was trained on.
fn dataset_for(explicit: Option<&PathBuf>, recorded: Option<&String>) -> Result<PathBuf> {
    explicit
        .cloned()
        .or_else(|| recorded.map(PathBuf::from))
        .ok_or_else(|| Error::Config("checkpoint records no manifest; pass --manifest".into()))
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"))
}

fn print_table(rows: &[AblationRow]) {
    println!("{:<10} {:>6} {:>10} {:>10} {:>8} {:>8} {:>10} {:>10}", "config", "runs", "mean_mse", "std_mse", "delta%", "H", "p_raw", "p_adj");
    for r in rows {
        let star = if r.significant == Some(true) { "*" } else { "" };
        println!(
            "{:<10} {:>6} {:>10.5} {:>10.5} {:>8} {:>8} {:>10} {:>10}{star}",
            r.config,
            r.n_runs,
            r.mean_mse,
            r.std_mse,
            fmt_opt(r.pct_delta, 2),
            fmt_opt(r.h_statistic, 3),
            fmt_opt(r.p_raw, 4),
            fmt_opt(r.p_adjusted, 4),
        );
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let config = match &a.config {
        Some(_) => {
            let ca = ConfigArgs { config: a.config.clone(), ..Default::default() };
            resolve_config_from(&ca, None, ModelConfig::miniature())?.0
        }
        None => ModelConfig::miniature(),
    };
    let data = generate_synthetic_dataset(a.n, a.seed, &config)?;
    create_dir(&a.out)?;
    let path = data.write_to(&a.out)?;
    println!("wrote {} samples to {}", a.n, path.display());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let (config, _) = resolve_config(&a.cfg, Some(&a.manifest))?;
    let manifest = Manifest::load(&a.manifest)?;
    let schema = load_schema(a.cfg.schema.as_deref(), &a.manifest)?;
    let samples = manifest.load_samples(&schema, &config)?;
    let tensors = a.out.join("tensors");
    create_dir(&tensors)?;
    let mut rows = manifest.rows.clone();
    for (row, s) in rows.iter_mut().zip(&samples) {
        let put = |suffix: &str, t: &Tensor| -> Result<String> {
            let rel = format!("tensors/{}_{suffix}.npy", row.id);
            write_npy(a.out.join(&rel), t)?;
            Ok(rel)
        };
        row.soundscape_path = put("soundscape", &s.soundscape)?;
        row.masker_path = put("masker", &s.masker)?;
        row.image_path = put("image", &s.image)?;
    }
    schema.save(a.out.join("piq_schema.json"))?;
    let cfg_path = a.out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config)?).map_err(|e| Error::io(&cfg_path, e))?;
    let out = Manifest { dir: a.out.clone(), rows };
    out.save(a.out.join("manifest.csv"))?;
    println!("cached {} samples under {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (config, tc) = resolve_config(&a.cfg, Some(&a.manifest))?;
    let samples = load_dataset(&a.manifest, a.cfg.schema.as_deref(), &config)?;
    let (tr, va) = kfold_split(&samples, a.fold)?;
    let (run, mut model) = train(&config, &tr, &va, a.seed, a.fold, &tc)?;
    model.metadata.manifest = Some(absolute(&a.manifest).to_string_lossy().into_owned());
    create_dir(&a.out)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.out.join("checkpoint.bin"));
    save_checkpoint(&model, &ckpt)?;
    write_runs_csv(a.out.join("runs.csv"), std::slice::from_ref(&run), &[])?;
    write_curves_csv(a.out.join("curves.csv"), std::slice::from_ref(&run))?;
    println!(
        "{} fold {} seed {}: val_mse {:.6} after {} epochs (best {})",
        run.config, run.fold, run.seed, run.mse, run.epochs_run, run.best_epoch
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = dataset_for(a.manifest.as_ref(), model.metadata.manifest.as_ref())?;
    let samples = load_dataset(&manifest, a.schema.as_deref(), model.config())?;
    let refs: Vec<&Sample> = match a.fold {
        Some(f) => kfold_split(&samples, f)?.1,
        None => samples.iter().collect(),
    };
    let seed = a.seed.or(model.metadata.seed).unwrap_or(0);
    let ev = evaluate(&model, &refs, seed)?;
    create_dir(&a.out)?;
    write_predictions_csv(a.out.join("predictions.csv"), &ev.rows)?;
    println!("mse {:.6} over {} samples", ev.mse, ev.rows.len());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let (config, tc) = resolve_config(&a.cfg, Some(&a.manifest))?;
    let samples = load_dataset(&a.manifest, a.cfg.schema.as_deref(), &config)?;
    let variants = if a.configs.is_empty() { Variant::table() } else { a.configs.clone() };
    let folds: Vec<usize> = if a.folds.is_empty() { (0..NUM_FOLDS).collect() } else { a.folds.clone() };
    let seeds: Vec<u64> = if a.seeds.is_empty() { (1..=10).collect() } else { a.seeds.clone() };
    let threads = worker_threads();
    log::info!(
        "{} configs x {} folds x {} seeds on {threads} workers",
        variants.len(),
        folds.len(),
        seeds.len()
    );
    let rep = run_ablation(&samples, &config, &variants, &folds, &seeds, &tc, threads)?;
    create_dir(&a.out)?;
    write_runs_csv(a.out.join("runs.csv"), &rep.runs, &rep.failures)?;
    write_curves_csv(a.out.join("curves.csv"), &rep.runs)?;
    write_ablation_csv(a.out.join("ablation.csv"), &rep.rows)?;
    print_table(&rep.rows);
    if !rep.failures.is_empty() {
        eprintln!("{} runs failed; see runs.csv", rep.failures.len());
    }
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let rows = read_runs_csv(&a.runs)?;
    let mut order: Vec<String> = Vec::new();
    let mut runs = Vec::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        if !order.contains(&r.config) {
            order.push(r.config.clone());
        }
        let mse = r
            .mse
            .ok_or_else(|| Error::Input(format!("{} fold {} seed {}: ok run without mse", r.config, r.fold, r.seed)))?;
        runs.push(RunResult {
            config: r.config.clone(),
            fold: r.fold,
            seed: r.seed,
            mse,
            epochs_run: r.epochs_run.unwrap_or(0),
            best_epoch: r.best_epoch.unwrap_or(0),
            curve: vec![],
        });
    }
    let baseline = Variant::BASELINE.to_string();
    if !order.contains(&baseline) {
        return Err(Error::Input(format!("{} has no successful {baseline} runs", a.runs.display())));
    }
    let rep = summarize(&order, &runs, vec![])?;
    let out = a.out.clone().unwrap_or_else(|| a.runs.with_file_name("ablation.csv"));
    write_ablation_csv(&out, &rep.rows)?;
    print_table(&rep.rows);
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = dataset_for(a.manifest.as_ref(), model.metadata.manifest.as_ref())?;
    let samples = load_dataset(&manifest, a.schema.as_deref(), model.config())?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let seed = a.seed.or(model.metadata.seed).unwrap_or(0);
    let points = participant_sweep(&model, &refs, a.dim, &unit_grid(a.grid), seed)?;
    create_dir(&a.out)?;
    let csv = a.out.join(format!("sweep_{}.csv", a.dim));
    write_sweep_csv(&csv, &points)?;
    if a.svg {
        write_sweep_svg(&points, a.dim, a.out.join(format!("sweep_{}.svg", a.dim)))?;
    }
    println!("wrote {} points to {}", points.len(), csv.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// One-line error report: `error: <kind>: <message>`.
pub fn error_line(e: &Error) -> String {
    let msg = match e {
        Error::Validation(items) => items.join("; "),
        other => other.to_string().replace('\n', "; "),
    };
    format!("error: {}: {msg}", e.kind())
}

/// Process entry point. Flag errors exit with 2 (handled by clap), runtime
/// failures with 1.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
