//! `mammo`: synthetic data, splits, training, evaluation, thresholds and
//! experiment reports for patch-level mammography classification.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mammo_core::metrics::{analyze, compare_operating_points, read_scores_csv, write_scores_csv, ClinicalWeights};
use mammo_core::modelkit::{load_model, save_model, BackboneRegistry, ModelSpec};
use mammo_core::patchset::{
    load_manifest, read_manifest, stratified_split, summarize, PatchRecord, Split, SplitAssignment, SplitRatios,
};
use mammo_core::report::{
    build_registry, create_run_dir, render_report, run_experiment, Architecture, BenchmarkConstants,
    ExperimentConfig, ModelEntry, ReportFormat, RunReport,
};
use mammo_core::synthgen::{write_dataset, SynthCounts};
use mammo_core::trainer::{evaluate, train, TrainConfig};
use mammo_core::{augment::AugmentPolicy, Error, Result};

#[derive(Parser)]
#[command(name = "mammo", version, about = "Patch-level mammography classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic patch corpus (PNG images plus manifest.csv).
    Synthgen(SynthgenArgs),
    /// Load a manifest and its images, and print class counts.
    Ingest(IngestArgs),
    /// Stratified train/validation/test assignment for a manifest.
    Split(SplitArgs),
    /// Train one model and save its checkpoint.
    Train(TrainArgs),
    /// Score a split with a saved model.
    Eval(EvalArgs),
    /// ROC, AUC and operating thresholds for a scores file.
    Threshold(ThresholdArgs),
    /// Re-render a finished run's report.
    Report(ReportArgs),
    /// Run a whole experiment from a JSON config.
    Run(RunArgs),
    /// Print a model's layer table and parameter count.
    Arch(ArchArgs),
}

#[derive(Args)]
struct SynthgenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Total patches, split in the full corpus' class proportions.
    #[arg(long, conflicts_with_all = ["counts", "full"])]
    total: Option<usize>,
    /// Exact `mass,calcification,normal` counts.
    #[arg(long, value_parser = parse_counts)]
    counts: Option<SynthCounts>,
    /// The full-size corpus (10,713 patches).
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Print counts as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `train,validation,test` fractions or `75:10:15` weights.
    #[arg(long, default_value = "0.75,0.10,0.15")]
    ratios: SplitRatios,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output `id,split` CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// `baseline`, a backbone kind (`vgg16`, `resnet50`, `mobilenet`) or a
    /// provider name such as `vgg16-desk`.
    #[arg(long, default_value = "baseline", conflicts_with = "spec")]
    arch: String,
    /// Load the provider's pretrained feature weights.
    #[arg(long)]
    pretrained: bool,
    /// A JSON model spec instead of `--arch`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use the small stand-in backbones as defaults.
    #[arg(long)]
    desk_backbones: bool,
    /// Transfer-model checkpoints whose feature weights become pretrained
    /// weights for their provider.
    #[arg(long)]
    backbone_weights: Vec<PathBuf>,
}

impl ModelArgs {
    fn registry(&self) -> Result<BackboneRegistry> {
        build_registry(self.desk_backbones, &self.backbone_weights)
    }

    fn architecture(&self) -> Result<Architecture> {
        if let Some(path) = &self.spec {
            return Ok(Architecture::Spec {
                spec: ModelSpec::from_json(&read(path)?).map_err(|e| match e {
                    Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
                    e => e,
                })?,
            });
        }
        Ok(match self.arch.as_str() {
            "baseline" => Architecture::Baseline,
            other => Architecture::Transfer {
                backbone: other.to_string(),
                pretrained: self.pretrained,
            },
        })
    }

    fn spec(&self, registry: &BackboneRegistry) -> Result<ModelSpec> {
        ModelEntry {
            name: None,
            architecture: self.architecture()?,
            train: TrainConfig::default(),
        }
        .spec(registry)
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `id,split` CSV written by `mammo split`.
    #[arg(long)]
    split: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<[Vec<PatchRecord>; 3]> {
        let records = load_manifest(&self.manifest)?;
        SplitAssignment::read_csv(&self.split)?.partition(&records)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// JSON training config; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Train with flips, shifts and rotations at their default bounds.
    #[arg(long)]
    augment: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and accuracy CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    subset: Split,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output `id,label,score` CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct WeightArgs {
    /// Sensitivity weight of the clinical objective.
    #[arg(long)]
    w_tpr: Option<f64>,
    /// Specificity weight of the clinical objective.
    #[arg(long)]
    w_spec: Option<f64>,
    /// Use the clinical objective exactly as printed (sensitivity only).
    #[arg(long)]
    literal_paper_objective: bool,
}

impl WeightArgs {
    fn apply(&self, base: ClinicalWeights) -> Result<ClinicalWeights> {
        ClinicalWeights::new(self.w_tpr.unwrap_or(base.w_tpr), self.w_spec.unwrap_or(base.w_spec))
    }
}

#[derive(Args)]
struct ThresholdArgs {
    /// `id,label,score` CSV.
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
    /// Write the ROC points here.
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory, or a `report.json` inside one.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory to create the run directory in; defaults to
    /// `$MAMMO_RUN_ROOT`, then `runs`.
    #[arg(long)]
    run_root: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    format: String,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    desk_backbones: bool,
    #[arg(long)]
    backbone_weights: Vec<PathBuf>,
    /// Override every model's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the split seed.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct ArchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    json: bool,
}

fn parse_counts(s: &str) -> std::result::Result<SynthCounts, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [mass, calcification, normal] => Ok(SynthCounts {
            mass,
            calcification,
            normal,
        }),
        _ => Err("expected mass,calcification,normal".into()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synthgen(a: SynthgenArgs) -> Result<()> {
    let counts = match (a.total, a.counts, a.full) {
        (Some(total), _, _) => SynthCounts::table1_proportions(total),
        (None, Some(c), _) => c,
        (None, None, true) => SynthCounts::table1(),
        (None, None, false) => return Err(Error::Usage("give one of --total, --counts or --full".into())),
    };
    let entries = write_dataset(counts, a.seed, &a.out)?;
    print!("{}", summarize(&entries));
    println!("wrote {} patches to {}", entries.len(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let records = load_manifest(&a.manifest)?;
    let stats = summarize(&records);
    if a.json {
        print_json(&stats)
    } else {
        print!("{stats}");
        Ok(())
    }
}

fn split(a: SplitArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    let split = stratified_split(&entries, a.ratios, a.seed)?;
    split.write_csv(&a.out)?;
    for s in Split::ALL {
        println!("{s}: {}", split.size(s));
    }
    println!("split hash: {}", split.hash());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if a.augment {
        config.augment_policy = Some(AugmentPolicy::default());
    }
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    config.learning_rate = a.learning_rate.unwrap_or(config.learning_rate);
    config.seed = a.seed.unwrap_or(config.seed);
    config.early_stop_patience = a.patience.or(config.early_stop_patience);

    let registry = a.model.registry()?;
    let spec = a.model.spec(&registry)?;
    let [tr, va, _] = a.data.load()?;
    let (model, history) = train(&spec, &tr, &va, &config, &registry)?;
    save_model(&model, &a.out)?;
    if let Some(p) = &a.history {
        history.save_csv(p)?;
    }
    for e in &history.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }
    if history.stopped_early {
        println!("stopped early after {} epochs", history.len());
    }
    println!("saved {} to {}", spec.name, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let parts = a.data.load()?;
    let records = &parts[a.subset as usize];
    let e = evaluate(&model, records, a.threshold)?;
    if let Some(p) = &a.scores {
        write_scores_csv(&e.scores, p)?;
    }
    print_json(&json!({
        "subset": a.subset.as_str(),
        "records": records.len(),
        "threshold": e.threshold,
        "accuracy": e.accuracy,
        "confusion": e.confusion,
    }))
}

fn threshold(a: ThresholdArgs) -> Result<()> {
    let scored = read_scores_csv(&a.scores)?;
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let weights = a.weights.apply(ClinicalWeights::default())?;
    let (curve, summary) = analyze(&labels, &scores, weights, a.weights.literal_paper_objective)?;
    if let Some(p) = &a.roc {
        curve.write_csv(p)?;
    }
    let dominance = compare_operating_points(&curve, &BenchmarkConstants::default().radiologists);
    print_json(&json!({ "summary": summary, "radiologists": dominance }))
}

fn report(a: ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let path = if a.run.is_dir() {
        a.run.join("report.json")
    } else {
        a.run.clone()
    };
    let report = RunReport::from_json(&read(&path)?)?;
    print!("{}", render_report(&report, format));
    Ok(())
}

fn run(a: RunArgs) -> Result<bool> {
    let format: ReportFormat = a.format.parse()?;
    let mut config = ExperimentConfig::load(&a.config)?;
    config.clinical_weights = a.weights.apply(config.clinical_weights)?;
    config.literal_paper_objective |= a.weights.literal_paper_objective;
    config.desk_backbones |= a.desk_backbones;
    config.backbone_weights.extend(a.backbone_weights);
    if let Some(e) = a.epochs {
        config.models.iter_mut().for_each(|m| m.train.epochs = e);
    }
    config.split.seed = a.split_seed.unwrap_or(config.split.seed);
    config.validate()?;

    let registry = config.registry()?;
    let dir = create_run_dir(a.run_root.as_deref(), &config)?;
    log::info!("run directory {}", dir.display());
    let report = run_experiment(&config, &registry, &dir)?;
    print!("{}", render_report(&report, format));
    eprintln!("artifacts in {}", dir.display());
    for f in &report.failures {
        eprintln!("error: {}", f.error);
    }
    Ok(report.failures.is_empty())
}

fn arch(a: ArchArgs) -> Result<()> {
    let registry = a.model.registry()?;
    let spec = a.model.spec(&registry)?;
    let summary = spec.summary()?;
    if a.json {
        print_json(&summary)
    } else {
        println!("{}", spec.name);
        println!("{summary}");
        Ok(())
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_config() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synthgen(a) => synthgen(a),
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Threshold(a) => threshold(a),
        Command::Report(a) => report(a),
        Command::Arch(a) => arch(a),
        Command::Run(a) => match run(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
