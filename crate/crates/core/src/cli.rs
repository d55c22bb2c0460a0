//! Experiment orchestration behind the `pacf` binary: generation, training,
//! evaluation and comparison reports with SVG plots.
//!
//! Every command writes a `manifest.json` carrying the config hash next to
//! its outputs. Outputs are byte-identical for identical inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{self, AdaptationState, EvalData, EvalModel, StepRecord, TrainerConfig};
use crate::error::{PacfError, Result};
use crate::losses::{LossWeights, RegularizerKind};
use crate::mathcore::FeatureVector;
use crate::metrics::{self, MetricsReport};
use crate::synthbench::{self, format_float, DomainShiftSpec, FeatureDump, LabeledBatch};

/// Environment variable holding the worker count for parallel metrics.
pub const THREADS_ENV: &str = "PACF_THREADS";

/// Which loss terms beyond self-training are switched on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub enable_pce: bool,
    /// `None` disables the mutual regularization term.
    pub regularizer: Option<RegularizerKind>,
    pub enable_adversarial: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            enable_pce: true,
            regularizer: Some(RegularizerKind::Jsd),
            enable_adversarial: true,
        }
    }
}

/// Dump files to train or evaluate on instead of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Labeled copy of the target, used by evaluation only.
    #[serde(default)]
    pub target_hidden: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub spec: DomainShiftSpec,
    /// Keys left out fall back to [`TrainerConfig::desk`].
    #[serde(deserialize_with = "desk_trainer")]
    pub trainer: TrainerConfig,
    pub ablation: Ablation,
    pub eval_model: EvalModel,
    pub data: Option<DataPaths>,
    pub output_dir: Option<PathBuf>,
}

/// Reads a possibly partial trainer object on top of the desk settings.
fn desk_trainer<'de, D: serde::Deserializer<'de>>(
    de: D,
) -> std::result::Result<TrainerConfig, D::Error> {
    use serde::de::Error;
    let given = serde_json::Value::deserialize(de)?;
    let mut merged = serde_json::to_value(TrainerConfig::desk()).map_err(D::Error::custom)?;
    if !given.is_object() {
        return Err(D::Error::custom(format!(
            "trainer must be an object, got {given}"
        )));
    }
    merge_json(&mut merged, given);
    serde_json::from_value(merged).map_err(D::Error::custom)
}

/// Overlays `top` onto `base`, descending into objects present in both.
fn merge_json(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spec: DomainShiftSpec::default(),
            trainer: TrainerConfig::desk(),
            ablation: Ablation::default(),
            eval_model: EvalModel::Teacher,
            data: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file. Data paths are resolved against the file's
    /// directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PacfError::io(path, e))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| PacfError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(data) = &mut config.data {
            for p in [
                Some(&mut data.source),
                Some(&mut data.target),
                data.target_hidden.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.is_file() {
                    return Err(PacfError::MissingArtifact(p.clone()));
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.trainer.validate()
    }

    /// Overrides both the benchmark and the trainer seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.spec.seed = seed;
        self.trainer.seed = seed;
        self
    }

    /// Trainer settings after applying the ablation switches.
    pub fn effective_trainer(&self) -> TrainerConfig {
        let mut t = self.trainer.clone();
        let w = t.weights;
        t.weights = LossWeights {
            unsup: w.unsup,
            dis: if self.ablation.enable_adversarial {
                w.dis
            } else {
                0.0
            },
            pce: if self.ablation.enable_pce { w.pce } else { 0.0 },
            mutual: if self.ablation.regularizer.is_some() {
                w.mutual
            } else {
                0.0
            },
        };
        if let Some(kind) = self.ablation.regularizer {
            t.regularizer = kind;
        }
        t
    }

    /// SHA-256 of the compact JSON form, in lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    /// Loads the configured dumps, or generates the benchmark.
    pub fn load_data(&self) -> Result<LoadedData> {
        match &self.data {
            None => {
                let pair = synthbench::generate(&self.spec)?;
                Ok(LoadedData {
                    source: pair.source().clone(),
                    target: pair.target_features().to_vec(),
                    target_labels: Some(pair.hidden_labels().to_vec()),
                })
            }
            Some(paths) => {
                let source = synthbench::load_dump(&paths.source)?.to_labeled()?;
                let target = synthbench::load_dump(&paths.target)?.features();
                let target_labels = match &paths.target_hidden {
                    Some(p) => {
                        let labels = synthbench::load_dump(p)?.labels()?;
                        if labels.len() != target.len() {
                            return Err(PacfError::DimensionMismatch {
                                expected: target.len(),
                                got: labels.len(),
                            });
                        }
                        Some(labels)
                    }
                    None => None,
                };
                Ok(LoadedData {
                    source,
                    target,
                    target_labels,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    pub source: LabeledBatch,
    pub target: Vec<FeatureVector>,
    pub target_labels: Option<Vec<usize>>,
}

impl LoadedData {
    pub fn view(&self) -> synthbench::TrainingView<'_> {
        synthbench::TrainingView {
            source: &self.source,
            target: &self.target,
        }
    }

    pub fn eval(&self) -> EvalData<'_> {
        EvalData {
            source: &self.source,
            target: &self.target,
            target_labels: self.target_labels.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: AdaptationState,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    files: Vec<&'a str>,
}

fn ensure_dir(out: &Path) -> Result<()> {
    if out.is_dir() {
        Ok(())
    } else {
        Err(PacfError::io(
            out,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        ))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| PacfError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn write_manifest(out: &Path, command: &str, hash: &str, files: &[&str]) -> Result<()> {
    let manifest = Manifest {
        command,
        config_hash: hash,
        files: files.to_vec(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

pub const GEN_FILES: [&str; 3] = ["source.csv", "target.csv", "target_hidden.csv"];

/// Writes `source.csv`, `target.csv` (unlabeled) and `target_hidden.csv`.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    ensure_dir(out)?;
    let pair = synthbench::generate(&config.spec)?;
    let hidden = LabeledBatch {
        features: pair.target_features().to_vec(),
        labels: pair.hidden_labels().to_vec(),
    };
    synthbench::save_dump(
        &FeatureDump::labeled(pair.source()),
        &out.join(GEN_FILES[0]),
    )?;
    synthbench::save_dump(
        &FeatureDump::unlabeled(pair.target_features()),
        &out.join(GEN_FILES[1]),
    )?;
    synthbench::save_dump(&FeatureDump::labeled(&hidden), &out.join(GEN_FILES[2]))?;
    write_manifest(out, "gen", &config.hash()?, &GEN_FILES)
}

pub const METRIC_FILES: [&str; 7] = [
    "metrics.json",
    "variance.csv",
    "mean_shift.csv",
    "tp_ratio.csv",
    "summary.csv",
    "rank_scatter.csv",
    "projection.csv",
];

/// Evaluates `state` and writes the report, its CSV tables and the plot data.
fn write_metrics(
    out: &Path,
    state: &AdaptationState,
    config: &ExperimentConfig,
    data: &LoadedData,
    hash: &str,
) -> Result<MetricsReport> {
    let trainer = config.effective_trainer();
    let report = adapt::evaluate(
        state,
        config.eval_model,
        data.eval(),
        trainer.pseudo_threshold,
        hash,
    )?;
    write_json(&out.join("metrics.json"), &report)?;
    write_file(&out.join("variance.csv"), &report.variance_csv())?;
    write_file(&out.join("mean_shift.csv"), &report.mean_shift_csv())?;
    write_file(&out.join("tp_ratio.csv"), &report.tp_ratio_csv())?;
    write_file(&out.join("summary.csv"), &report.summary_csv())?;

    let params = match config.eval_model {
        EvalModel::Student => &state.student,
        EvalModel::Teacher => &state.teacher,
    };
    let mut scatter = String::from("linear_score,prototype_cosine\n");
    for (s, c) in adapt::rank_pairs(params, &state.tgt_protos, &data.target)? {
        let _ = writeln!(scatter, "{},{}", format_float(s), format_float(c));
    }
    write_file(&out.join("rank_scatter.csv"), &scatter)?;

    let mut embeddings = Vec::with_capacity(data.source.len() + data.target.len());
    for x in data.source.features.iter().chain(&data.target) {
        embeddings.push(params.embed(x)?);
    }
    let coords = metrics::pca_project_2d(&embeddings)?;
    let mut proj = String::from("domain,label,pc1,pc2\n");
    for (i, [a, b]) in coords.iter().enumerate() {
        let (domain, label) = if i < data.source.len() {
            ("source", Some(data.source.labels[i]))
        } else {
            let j = i - data.source.len();
            ("target", data.target_labels.as_ref().map(|l| l[j]))
        };
        let label = label.map_or("-1".to_string(), |l| l.to_string());
        let _ = writeln!(
            proj,
            "{domain},{label},{},{}",
            format_float(*a),
            format_float(*b)
        );
    }
    write_file(&out.join("projection.csv"), &proj)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: AdaptationState,
    pub history: Vec<StepRecord>,
    pub report: MetricsReport,
}

/// Warm-up, prototype initialization and the adaptation run; writes the
/// checkpoint, `losses.csv` and the final metrics.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    ensure_dir(out)?;
    let hash = config.hash()?;
    let data = config.load_data()?;
    let trainer = config.effective_trainer();
    let mut state = AdaptationState::prepare(data.view(), config.spec.class_count, &trainer)?;
    let history = state.train_run(data.view(), &trainer)?;

    write_json(&out.join("config.json"), config)?;
    let checkpoint = Checkpoint {
        config_hash: hash.clone(),
        state,
    };
    write_json(&out.join("checkpoint.json"), &checkpoint)?;
    write_file(&out.join("losses.csv"), &adapt::history_csv(&history))?;
    let report = write_metrics(out, &checkpoint.state, config, &data, &hash)?;

    let mut files = vec!["config.json", "checkpoint.json", "losses.csv"];
    files.extend(METRIC_FILES);
    write_manifest(out, "train", &hash, &files)?;
    Ok(TrainOutcome {
        state: checkpoint.state,
        history,
        report,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(PacfError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| PacfError::io(path, e))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    checkpoint.state.student.validate()?;
    checkpoint.state.teacher.validate()?;
    Ok(checkpoint)
}

/// Recomputes the metrics of a checkpoint on the configured data.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    config.validate()?;
    ensure_dir(out)?;
    let hash = config.hash()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let data = config.load_data()?;
    let report = write_metrics(out, &ckpt.state, config, &data, &hash)?;
    write_manifest(out, "eval", &hash, &METRIC_FILES)?;
    Ok(report)
}

struct RunArtifacts {
    name: String,
    report: MetricsReport,
    scatter: Vec<(f64, f64)>,
    projection: Vec<(bool, Option<usize>, f64, f64)>,
}

fn read_artifact(dir: &Path, file: &str) -> Result<(PathBuf, String)> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(PacfError::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| PacfError::io(&path, e))?;
    Ok((path, text))
}

fn parse_csv_rows(path: &Path, text: &str, width: usize) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| PacfError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(PacfError::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| PacfError::Parse {
        path: path.to_path_buf(),
        line: line as u64 + 2,
        reason: format!("bad value {s:?}"),
    })
}

fn load_run(dir: &Path, name: String) -> Result<RunArtifacts> {
    let (_, text) = read_artifact(dir, "metrics.json")?;
    let report: MetricsReport = serde_json::from_str(&text)?;

    let (path, text) = read_artifact(dir, "rank_scatter.csv")?;
    let mut scatter = Vec::new();
    for (i, row) in parse_csv_rows(&path, &text, 2)?.iter().enumerate() {
        scatter.push((
            parse_field(&path, i, &row[0])?,
            parse_field(&path, i, &row[1])?,
        ));
    }

    let (path, text) = read_artifact(dir, "projection.csv")?;
    let mut projection = Vec::new();
    for (i, row) in parse_csv_rows(&path, &text, 4)?.iter().enumerate() {
        let label: i64 = parse_field(&path, i, &row[1])?;
        projection.push((
            row[0] == "source",
            usize::try_from(label).ok(),
            parse_field(&path, i, &row[2])?,
            parse_field(&path, i, &row[3])?,
        ));
    }
    Ok(RunArtifacts {
        name,
        report,
        scatter,
        projection,
    })
}

/// Column names for the runs: directory names, suffixed when they collide.
fn run_names(runs: &[PathBuf]) -> Vec<String> {
    let base: Vec<String> = runs
        .iter()
        .map(|p| {
            p.file_name().map_or_else(
                || p.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            )
        })
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, n)| {
            if base.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}_{i}")
            } else {
                n.clone()
            }
        })
        .collect()
}

/// One comparison table: a key column, one column per run and, with two or
/// more runs, `delta` = last run minus first run.
fn comparison_csv(
    key_header: &str,
    names: &[String],
    rows: &[(String, Vec<Option<f64>>)],
) -> String {
    let mut out = String::from(key_header);
    for n in names {
        out.push(',');
        out.push_str(&csv_escape(n));
    }
    let with_delta = names.len() >= 2;
    if with_delta {
        out.push_str(",delta");
    }
    out.push('\n');
    for (key, values) in rows {
        out.push_str(key);
        for v in values {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&format_float(*v));
            }
        }
        if with_delta {
            out.push(',');
            if let (Some(Some(a)), Some(Some(b))) = (values.first(), values.last()) {
                out.push_str(&format_float(b - a));
            }
        }
        out.push('\n');
    }
    out
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn class_rows(
    runs: &[RunArtifacts],
    prefix: &str,
    table: impl Fn(&MetricsReport) -> (Option<&BTreeMap<usize, f64>>, Option<f64>),
) -> Vec<(String, Vec<Option<f64>>)> {
    let classes: BTreeSet<usize> = runs
        .iter()
        .filter_map(|r| table(&r.report).0)
        .flat_map(|m| m.keys().copied())
        .collect();
    let mut rows: Vec<(String, Vec<Option<f64>>)> = classes
        .into_iter()
        .map(|k| {
            let vals = runs
                .iter()
                .map(|r| table(&r.report).0.and_then(|m| m.get(&k).copied()))
                .collect();
            (format!("{prefix}{k}"), vals)
        })
        .collect();
    rows.push((
        format!("{prefix}avg."),
        runs.iter().map(|r| table(&r.report).1).collect(),
    ));
    rows
}

pub const REPORT_TABLES: [&str; 4] = [
    "variance_comparison.csv",
    "mean_shift_comparison.csv",
    "tp_ratio_comparison.csv",
    "summary_comparison.csv",
];

/// Comparison tables across runs plus, per run, a rank-agreement scatter and
/// a 2-D projection, both as SVG.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    if runs.is_empty() {
        return Err(PacfError::InvalidConfig(
            "report needs at least one run directory".into(),
        ));
    }
    ensure_dir(out)?;
    let names = run_names(runs);
    let arts: Vec<RunArtifacts> = runs
        .iter()
        .zip(&names)
        .map(|(dir, name)| load_run(dir, name.clone()))
        .collect::<Result<_>>()?;

    let mut variance = class_rows(&arts, "source,", |r| {
        (Some(&r.variance.source), r.variance.source_avg)
    });
    variance.extend(class_rows(&arts, "target,", |r| {
        (Some(&r.variance.target), r.variance.target_avg)
    }));
    let shift = class_rows(&arts, "", |r| {
        (Some(&r.mean_shift.per_class), r.mean_shift.average)
    });
    let tp = class_rows(&arts, "", |r| {
        (
            r.tp_ratio.as_ref().map(|t| &t.per_class),
            r.tp_ratio.as_ref().and_then(|t| t.average),
        )
    });
    let summary: Vec<(String, Vec<Option<f64>>)> = vec![
        (
            "proxy_a_distance".into(),
            arts.iter()
                .map(|a| Some(a.report.proxy_a_distance))
                .collect(),
        ),
        (
            "spearman_rho".into(),
            arts.iter().map(|a| Some(a.report.spearman_rho)).collect(),
        ),
        (
            "kendall_tau".into(),
            arts.iter().map(|a| Some(a.report.kendall_tau)).collect(),
        ),
        (
            "pseudo_count".into(),
            arts.iter()
                .map(|a| Some(a.report.pseudo_count as f64))
                .collect(),
        ),
    ];
    write_file(
        &out.join(REPORT_TABLES[0]),
        &comparison_csv("domain,class", &names, &variance),
    )?;
    write_file(
        &out.join(REPORT_TABLES[1]),
        &comparison_csv("class", &names, &shift),
    )?;
    write_file(
        &out.join(REPORT_TABLES[2]),
        &comparison_csv("class", &names, &tp),
    )?;
    write_file(
        &out.join(REPORT_TABLES[3]),
        &comparison_csv("metric", &names, &summary),
    )?;

    let mut files: Vec<String> = REPORT_TABLES.iter().map(|s| s.to_string()).collect();
    for a in &arts {
        let scatter_name = format!("{}_rank_scatter.svg", a.name);
        let points: Vec<(f64, f64, usize, bool)> =
            a.scatter.iter().map(|&(x, y)| (x, y, 0, true)).collect();
        let notes = [
            format!("rho = {}", format_float(a.report.spearman_rho)),
            format!("tau = {}", format_float(a.report.kendall_tau)),
        ];
        let svg = scatter_svg(
            &format!("{}: linear score vs prototype cosine", a.name),
            "linear classification score",
            "prototype cosine similarity",
            &points,
            &notes,
            &a.report.config_hash,
        );
        write_file(&out.join(&scatter_name), &svg)?;

        let proj_name = format!("{}_projection.svg", a.name);
        let points: Vec<(f64, f64, usize, bool)> = a
            .projection
            .iter()
            .map(|&(is_source, label, x, y)| (x, y, label.map_or(usize::MAX, |l| l), is_source))
            .collect();
        let svg = scatter_svg(
            &format!(
                "{}: PCA of embeddings (filled = source, hollow = target)",
                a.name
            ),
            "pc1",
            "pc2",
            &points,
            &[],
            &a.report.config_hash,
        );
        write_file(&out.join(&proj_name), &svg)?;
        files.push(scatter_name);
        files.push(proj_name);
    }
    let hashes: BTreeSet<&str> = arts.iter().map(|a| a.report.config_hash.as_str()).collect();
    let joined = hashes.into_iter().collect::<Vec<_>>().join("+");
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(out, "report", &joined, &refs)?;
    Ok(files)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Static scatter plot. Points are `(x, y, group, filled)`; group picks the
/// colour, `usize::MAX` is drawn grey.
pub fn scatter_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64, usize, bool)],
    notes: &[String],
    config_hash: &str,
) -> String {
    const W: f64 = 560.0;
    const H: f64 = 440.0;
    const M: f64 = 60.0;
    let (x0, x1) = axis_range(points.iter().map(|p| p.0));
    let (y0, y1) = axis_range(points.iter().map(|p| p.1));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(title));
    let _ = writeln!(s, "<desc>config {}</desc>", xml_escape(config_hash));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 15.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
    for (v, anchor, x, y) in [
        (x0, "start", M, H - M + 16.0),
        (x1, "end", W - M, H - M + 16.0),
        (y0, "end", M - 4.0, H - M),
        (y1, "end", M - 4.0, M + 10.0),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.3}</text>"#
        );
    }
    for &(x, y, group, filled) in points {
        let colour = PALETTE.get(group).copied().unwrap_or("#999999");
        let fill = if filled { colour } else { "none" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{fill}" stroke="{colour}" stroke-width="0.8"/>"#,
            sx(x),
            sy(y)
        );
    }
    for (i, note) in notes.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12">{}</text>"#,
            M + 8.0,
            M + 18.0 + 16.0 * i as f64,
            xml_escape(note)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads the thread count from [`THREADS_ENV`]; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(PacfError::InvalidConfig(format!(
                "{THREADS_ENV}={v:?} is not a positive integer"
            ))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash().unwrap(), a.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
        let b = a.clone().with_seed(9);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.ablation.enable_pce = false;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn ablation_switches_zero_weights() {
        let mut c = ExperimentConfig {
            ablation: Ablation {
                enable_pce: false,
                regularizer: None,
                enable_adversarial: false,
            },
            ..Default::default()
        };
        let w = c.effective_trainer().weights;
        assert_eq!((w.pce, w.mutual, w.dis, w.unsup), (0.0, 0.0, 0.0, 1.0));
        c.ablation.regularizer = Some(RegularizerKind::Kl);
        let t = c.effective_trainer();
        assert_eq!(t.regularizer, RegularizerKind::Kl);
        assert_eq!(t.weights.mutual, 1.0);
    }

    #[test]
    fn partial_trainer_fills_from_desk() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"trainer": {"steps": 7, "weights": {"pce": 0.5}}}"#).unwrap();
        let desk = TrainerConfig::desk();
        assert_eq!(c.trainer.steps, 7);
        assert_eq!(c.trainer.ema_rate, desk.ema_rate);
        assert_eq!(c.trainer.weights.pce, 0.5);
        assert_eq!(c.trainer.weights.mutual, desk.weights.mutual);
        let bad = r#"{"trainer": {"stepz": 7}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trainer": 3}"#).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trainer": {"lr": 1}}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"trainer": {"steps": 3}}"#).unwrap();
        assert_eq!(c.trainer.steps, 3);
    }

    #[test]
    fn comparison_delta_is_last_minus_first() {
        let names = vec!["a".to_string(), "b".to_string()];
        let rows = vec![("avg.".to_string(), vec![Some(2.0), Some(0.5)])];
        assert_eq!(
            comparison_csv("class", &names, &rows),
            "class,a,b,delta\navg.,2.0,0.5,-1.5\n"
        );
        let one = vec!["a".to_string()];
        let rows = vec![("avg.".to_string(), vec![Some(2.0)])];
        assert_eq!(comparison_csv("class", &one, &rows), "class,a\navg.,2.0\n");
    }

    #[test]
    fn colliding_run_names_get_suffixes() {
        let runs = vec![
            PathBuf::from("x/run"),
            PathBuf::from("y/run"),
            PathBuf::from("z/other"),
        ];
        assert_eq!(run_names(&runs), vec!["run_0", "run_1", "other"]);
    }
}
