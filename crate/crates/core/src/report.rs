//! Multi-model experiments and the comparison report.
//!
//! An experiment trains every listed model on the same split of one
//! dataset, scores the test split, and collects a row per model with
//! accuracy, AUC, both operating thresholds and the comparison against the
//! published radiologist operating points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{analyze, compare_operating_points, Benchmark, ClinicalWeights, Dominance, ThresholdDecision};
use crate::modelkit::{build_baseline, save_model, transfer_spec, BackboneKind, BackboneRegistry, BackboneWeights, ModelSpec};
use crate::patchset::{load_manifest, stratified_split, PatchRecord, Split, SplitRatios};
use crate::synthgen::{generate_dataset, SynthCounts};
use crate::trainer::{evaluate, train, TrainConfig};
use crate::{Error, Result};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "MAMMO_RUN_ROOT";

/// Published reference figures shown next to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConstants {
    /// Screening radiologist operating points.
    pub radiologists: Vec<Benchmark>,
    /// Five-year overall survival by cancer stage.
    pub survival_by_stage: BTreeMap<u8, f64>,
    pub paper_final: PaperFinal,
}

/// The final model's published test figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaperFinal {
    pub accuracy: f64,
    pub auc: f64,
    pub clinical_threshold: f64,
}

impl Default for BenchmarkConstants {
    fn default() -> Self {
        BenchmarkConstants {
            radiologists: vec![
                Benchmark::new(0.655, 0.841, "Rafferty study 1"),
                Benchmark::new(0.627, 0.862, "Rafferty study 2"),
                Benchmark::new(0.776, 0.988, "Kolb multi-modality"),
            ],
            survival_by_stage: [(0, 1.00), (1, 1.00), (2, 0.93), (3, 0.72), (4, 0.22)].into_iter().collect(),
            paper_final: PaperFinal {
                accuracy: 0.883,
                auc: 0.933,
                clinical_threshold: 0.17,
            },
        }
    }
}

impl BenchmarkConstants {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        let p = &self.paper_final;
        let ok = self.radiologists.iter().all(|b| rate(b.sensitivity) && rate(b.specificity))
            && self.survival_by_stage.values().all(|&v| rate(v))
            && rate(p.accuracy)
            && rate(p.auc)
            && rate(p.clinical_threshold);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("benchmark rates must lie in [0, 1]".into()))
        }
    }
}

/// Where an experiment's patches come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A manifest CSV; relative image paths resolve against its directory.
    Manifest { path: PathBuf },
    /// Synthetic patches with the class mix of the full corpus.
    Synthgen { total: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.75,
            validation: 0.10,
            test: 0.15,
            seed: 0,
        }
    }
}

/// Which network a row trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Baseline,
    /// A backbone kind (`vgg16`, `resnet50`, `mobilenet`) resolved to the
    /// registry's default provider, or a provider name such as `vgg16-desk`.
    Transfer {
        backbone: String,
        #[serde(default)]
        pretrained: bool,
    },
    Spec { spec: ModelSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    /// Row label; defaults to the spec's name.
    #[serde(default)]
    pub name: Option<String>,
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ModelEntry {
    pub fn spec(&self, registry: &BackboneRegistry) -> Result<ModelSpec> {
        match &self.architecture {
            Architecture::Baseline => Ok(build_baseline()),
            Architecture::Transfer { backbone, pretrained } => {
                let provider = match backbone.parse::<BackboneKind>() {
                    Ok(kind) => registry.default_for(kind)?,
                    Err(_) => registry.get(backbone)?,
                };
                transfer_spec(provider.as_ref(), *pretrained)
            }
            Architecture::Spec { spec } => Ok(spec.clone()),
        }
    }
}

/// A whole experiment, as read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitConfig,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub clinical_weights: ClinicalWeights,
    /// Pick the clinical threshold with the objective exactly as printed.
    #[serde(default)]
    pub literal_paper_objective: bool,
    /// Use the small stand-in backbones instead of the full topologies.
    #[serde(default)]
    pub desk_backbones: bool,
    /// Checkpoints of trained transfer models whose feature layers are
    /// registered as pretrained weights for their provider.
    #[serde(default)]
    pub backbone_weights: Vec<PathBuf>,
    /// Also write each trained model's checkpoint into the run directory.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Manifest { path } = &mut config.dataset {
            resolve(path);
        }
        config.backbone_weights.iter_mut().for_each(resolve);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("experiment lists no models".into()));
        }
        SplitRatios::new(self.split.train, self.split.validation, self.split.test)?;
        self.clinical_weights.validate()?;
        if let DatasetSource::Synthgen { total: 0, .. } = self.dataset {
            return Err(Error::Config("synthgen total must be positive".into()));
        }
        for m in &self.models {
            m.train.validate()?;
        }
        Ok(())
    }

    /// SHA-256 hex of the config's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Standard or desk providers, with every listed checkpoint attached.
    pub fn registry(&self) -> Result<BackboneRegistry> {
        build_registry(self.desk_backbones, &self.backbone_weights)
    }

    fn load_dataset(&self) -> Result<Vec<PatchRecord>> {
        match &self.dataset {
            DatasetSource::Manifest { path } => load_manifest(path),
            DatasetSource::Synthgen { total, seed } => generate_dataset(SynthCounts::table1_proportions(*total), *seed),
        }
    }
}

/// The standard registry (or the desk one) with the feature weights of each
/// listed transfer-model checkpoint attached to its provider.
pub fn build_registry(desk: bool, backbone_checkpoints: &[PathBuf]) -> Result<BackboneRegistry> {
    let mut registry = if desk {
        BackboneRegistry::desk()
    } else {
        BackboneRegistry::standard()
    };
    for path in backbone_checkpoints {
        registry.attach_weights(BackboneWeights::load(path)?)?;
    }
    Ok(registry)
}

/// `<root>/<UTC timestamp>-<config hash prefix>`, created. The root is
/// `$MAMMO_RUN_ROOT` when set, else `runs`.
pub fn create_run_dir(root: Option<&Path>, config: &ExperimentConfig) -> Result<PathBuf> {
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    };
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let dir = root.join(format!("{stamp}-{}", &config.hash()[..12]));
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

/// One trained model's results on the shared test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub batch_size: usize,
    pub preprocessing: String,
    /// Test-split accuracy at threshold 0.5.
    pub test_accuracy: f64,
    /// Epochs actually run.
    pub epochs: usize,
    pub stopped_early: bool,
    pub auc: f64,
    pub youden: ThresholdDecision,
    pub clinical: ThresholdDecision,
    pub dominance: Vec<Dominance>,
    /// ROC points, relative to the run directory.
    pub roc_artifact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFailure {
    pub model: String,
    pub error: String,
    pub config_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    /// Every row was trained and tested on this assignment.
    pub split_hash: String,
    pub split_sizes: [usize; 3],
    pub clinical_weights: ClinicalWeights,
    pub literal_paper_objective: bool,
    pub rows: Vec<ModelRow>,
    pub failures: Vec<ModelFailure>,
    pub benchmarks: BenchmarkConstants,
}

impl RunReport {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Trains and scores every model in `config`, writing per-model artifacts
/// under `run_dir`. A model that fails is recorded in
/// [`RunReport::failures`] and the rest still run; only dataset or split
/// problems abort the experiment.
pub fn run_experiment(config: &ExperimentConfig, registry: &BackboneRegistry, run_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let benchmarks = BenchmarkConstants::default();
    let records = config.load_dataset()?;
    let ratios = SplitRatios::new(config.split.train, config.split.validation, config.split.test)?;
    let split = stratified_split(&records, ratios, config.split.seed)?;
    let [train_set, val_set, test_set] = split.partition(&records)?;
    drop(records);
    write(run_dir, "split.csv", |p| split.write_csv(p))?;
    write(run_dir, "config.json", |p| {
        fs::write(p, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    })?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut used = BTreeMap::new();
    for (i, entry) in config.models.iter().enumerate() {
        let fallback = entry.name.clone().unwrap_or_else(|| format!("model {}", i + 1));
        let result = entry.spec(registry).and_then(|spec| {
            let name = entry.name.clone().unwrap_or_else(|| spec.name.clone());
            let slug = unique_slug(&name, &mut used);
            run_one(config, registry, &spec, entry, &name, &slug, [&train_set, &val_set, &test_set], &benchmarks, run_dir)
                .map_err(|e| e.context(name.clone()))
        });
        match result {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::error!("{e}");
                failures.push(ModelFailure {
                    model: fallback,
                    config_error: e.is_config(),
                    error: e.to_string(),
                });
            }
        }
    }

    let report = RunReport {
        name: config.name.clone(),
        config_hash: config.hash(),
        split_hash: split.hash(),
        split_sizes: [split.size(Split::Train), split.size(Split::Validation), split.size(Split::Test)],
        clinical_weights: config.clinical_weights,
        literal_paper_objective: config.literal_paper_objective,
        rows,
        failures,
        benchmarks,
    };
    for format in ReportFormat::ALL {
        let text = render_report(&report, format);
        write(run_dir, &format!("report.{}", format.extension()), |p| {
            fs::write(p, &text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        })?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    config: &ExperimentConfig,
    registry: &BackboneRegistry,
    spec: &ModelSpec,
    entry: &ModelEntry,
    name: &str,
    slug: &str,
    [train_set, val_set, test_set]: [&[PatchRecord]; 3],
    benchmarks: &BenchmarkConstants,
    run_dir: &Path,
) -> Result<ModelRow> {
    log::info!("training {name}");
    let (model, history) = train(spec, train_set, val_set, &entry.train, registry)?;
    let eval = evaluate(&model, test_set, 0.5)?;
    let labels: Vec<bool> = eval.scores.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = eval.scores.iter().map(|s| s.score).collect();
    let (curve, summary) = analyze(&labels, &scores, config.clinical_weights, config.literal_paper_objective)?;

    let dir = run_dir.join("models").join(slug);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    history.save_csv(&dir.join("history.csv"))?;
    crate::metrics::write_scores_csv(&eval.scores, dir.join("scores.csv"))?;
    curve.write_csv(dir.join("roc.csv"))?;
    if config.save_checkpoints {
        save_model(&model, &dir.join("model.ckpt"))?;
    }

    Ok(ModelRow {
        model: name.to_string(),
        batch_size: entry.train.batch_size,
        preprocessing: preprocessing(spec, &entry.train, registry),
        test_accuracy: eval.accuracy,
        epochs: history.len(),
        stopped_early: history.stopped_early,
        auc: summary.auc,
        youden: summary.youden,
        clinical: summary.clinical,
        dominance: compare_operating_points(&curve, &benchmarks.radiologists),
        roc_artifact: format!("models/{slug}/roc.csv"),
    })
}

fn write(dir: &Path, file: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    f(&dir.join(file))
}

fn unique_slug(name: &str, used: &mut BTreeMap<String, usize>) -> String {
    let mut slug: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    slug = slug.split('-').filter(|s| !s.is_empty()).collect::<Vec<_>>().join("-");
    if slug.is_empty() {
        slug = "model".into();
    }
    let n = used.entry(slug.clone()).or_insert(0);
    *n += 1;
    if *n > 1 {
        slug = format!("{slug}-{n}");
    }
    slug
}

/// The "special pre-processing" cell: augmentation and weight origin.
fn preprocessing(spec: &ModelSpec, config: &TrainConfig, registry: &BackboneRegistry) -> String {
    let mut parts = Vec::new();
    if let Some(p) = &config.augment_policy {
        let kinds: Vec<&str> = [
            (p.hflip_enabled, "flips"),
            (p.shift_fraction_max > 0.0, "shifts"),
            (p.rotate_degrees_max > 0.0, "rotations"),
        ]
        .into_iter()
        .filter_map(|(on, k)| on.then_some(k))
        .collect();
        if !kinds.is_empty() {
            parts.push(capitalize(&kinds.join(", ")));
        }
    }
    if spec.pretrained {
        let source = spec
            .backbone
            .as_ref()
            .and_then(|b| registry.get(&b.provider).ok())
            .and_then(|p| p.pretrained_weights())
            .map(|w| w.source.clone())
            .unwrap_or_else(|| "external weights".into());
        parts.push(format!("Pre-trained on {source}"));
    }
    if parts.is_empty() {
        "No".into()
    } else {
        parts.join("; ")
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Text, ReportFormat::Json, ReportFormat::Csv];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Usage(format!("unknown report format `{other}` (expected text, json or csv)"))),
        }
    }
}

/// Column headers of the comparison table.
pub const TABLE_HEADERS: [&str; 5] = ["Model", "Size of Batch", "Special pre-processing", "Test accuracy", "Number of epochs"];

/// Deterministic rendering; the same report always gives the same bytes.
pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Text => render_text(report),
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn render_csv(report: &RunReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "batch_size",
        "preprocessing",
        "test_accuracy",
        "epochs",
        "auc",
        "youden_threshold",
        "clinical_threshold",
    ])
    .expect("in-memory write");
    for r in &report.rows {
        w.write_record([
            r.model.clone(),
            r.batch_size.to_string(),
            r.preprocessing.clone(),
            r.test_accuracy.to_string(),
            r.epochs.to_string(),
            r.auc.to_string(),
            r.youden.threshold.to_string(),
            r.clinical.threshold.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn render_text(report: &RunReport) -> String {
    let mut headers: Vec<&str> = TABLE_HEADERS.to_vec();
    headers.extend(["AUC", "Youden threshold", "Clinical threshold"]);
    let cells: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.batch_size.to_string(),
                r.preprocessing.clone(),
                pct(r.test_accuracy),
                if r.stopped_early { format!("{} (early stop)", r.epochs) } else { r.epochs.to_string() },
                format!("{:.3}", r.auc),
                format!("{:.3}", r.youden.threshold),
                format!("{:.3}", r.clinical.threshold),
            ]
        })
        .collect();
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| cells.iter().map(|row| row[i].chars().count()).chain([h.chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |row: &[String]| -> String {
        let padded: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join(" | ").trim_end().to_string()
    };

    let mut out = String::new();
    let _ = writeln!(out, "Run: {}", report.name);
    let _ = writeln!(out, "Config hash: {}", report.config_hash);
    let [tr, va, te] = report.split_sizes;
    let _ = writeln!(out, "Split hash: {} (train {tr}, validation {va}, test {te})", report.split_hash);
    let objective = if report.literal_paper_objective {
        "literal"
    } else {
        "weighted Youden"
    };
    let _ = writeln!(
        out,
        "Clinical weights: sensitivity {}, specificity {} ({objective})",
        report.clinical_weights.w_tpr, report.clinical_weights.w_spec
    );
    out.push('\n');
    let header: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for row in &cells {
        let _ = writeln!(out, "{}", line(row));
    }
    for f in &report.failures {
        let _ = writeln!(out, "FAILED {}: {}", f.model, f.error);
    }

    out.push_str("\nRadiologist operating points (sensitivity at matching specificity)\n");
    for b in &report.benchmarks.radiologists {
        let _ = write!(out, "  {}: sensitivity {}, specificity {}", b.label, pct(b.sensitivity), pct(b.specificity));
        for r in &report.rows {
            if let Some(d) = r.dominance.iter().find(|d| d.label == b.label) {
                let verdict = if d.dominated { "dominates" } else { "below" };
                let _ = write!(out, "; {} {} ({})", r.model, pct(d.curve_sensitivity), verdict);
            }
        }
        out.push('\n');
    }
    let p = &report.benchmarks.paper_final;
    let _ = writeln!(
        out,
        "Published final model: accuracy {}, AUC {:.3}, clinical threshold {:.2}",
        pct(p.accuracy),
        p.auc,
        p.clinical_threshold
    );
    let survival: Vec<String> = report
        .benchmarks
        .survival_by_stage
        .iter()
        .map(|(stage, s)| format!("stage {stage} {}", pct(*s)))
        .collect();
    let _ = writeln!(out, "Five-year survival: {}", survival.join(", "));
    out
}
