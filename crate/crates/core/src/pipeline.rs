//! File-based pipeline stages behind the command-line tool.
//!
//! Each stage reads documented CSV files, writes its outputs into one
//! directory and records a `manifest_<stage>.json` holding the tool
//! version, the resolved configuration and SHA-256 digests of every input
//! and output. Manifests name files by basename only, so two runs with the
//! same inputs produce byte-identical trees wherever they are written.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    auc, classify, confusion, curve_svg, display_rate, fit_stump, hitting_ratio, misclassification_rate,
    pr_curve, predicted_count_bars, rates, roc_curve, write_bars, write_confusion, write_curve,
};
use crate::irt::{calibrate, AbilityFlag, Bounds, CalibrationConfig};
use crate::knn::{
    predict_cohort, read_predictions, write_predictions, PredictionMode, PredictionRecord, SimilarityConfig,
    TieBreak,
};
use crate::response_data::{csv_writer, AbsencePolicy, ColumnLayout, OutcomeLabels, ResponseMatrix};
use crate::synth::{generate, SynthConfig};
use crate::trends::{cumulative_trend, per_unit_trend, AbilityTrend, ItemSource, TrendConfig, TrendKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrtSection {
    pub policy: AbsencePolicy,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub bounds: Bounds,
}

impl Default for IrtSection {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            policy: AbsencePolicy::default(),
            tolerance: c.tolerance,
            max_iterations: c.max_iterations,
            bounds: c.bounds,
        }
    }
}

impl IrtSection {
    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            bounds: self.bounds,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendSection {
    pub kind: TrendKind,
    /// Units to estimate, `"a..b"` inclusive; empty means every unit.
    pub k_range: String,
    pub item_source: ItemSource,
}

impl Default for TrendSection {
    fn default() -> Self {
        Self {
            kind: TrendKind::Cumulative,
            k_range: String::new(),
            item_source: ItemSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub k: Vec<usize>,
    pub mode: PredictionMode,
    pub n_neighbors: usize,
    pub tie_break: TieBreak,
}

impl Default for PredictSection {
    fn default() -> Self {
        let s = SimilarityConfig::default();
        Self {
            k: vec![4, 7, 11],
            mode: PredictionMode::default(),
            n_neighbors: s.n_neighbors,
            tie_break: s.tie_break,
        }
    }
}

impl PredictSection {
    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            n_neighbors: self.n_neighbors,
            tie_break: self.tie_break,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub k: Vec<usize>,
    pub cutoffs: Vec<f64>,
    pub emit_svg: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            k: vec![4, 7, 11],
            cutoffs: vec![0.3, 0.4, 0.5],
            emit_svg: false,
        }
    }
}

/// Resolved settings for every stage. Loaded from TOML, then overridden
/// by command-line flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory. Never written to manifests.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub simulate: SynthConfig,
    pub irt: IrtSection,
    pub trend: TrendSection,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| Error::Config(e.to_string());
        self.simulate.validate().map_err(as_config)?;
        self.irt.calibration().validate().map_err(as_config)?;
        if !self.trend.k_range.is_empty() {
            parse_k_range(&self.trend.k_range)?;
        }
        if self.predict.n_neighbors == 0 {
            return Err(Error::Config("n_neighbors must be at least 1".into()));
        }
        if self.predict.k.contains(&0) || self.evaluate.k.contains(&0) {
            return Err(Error::Config("horizons start at 1".into()));
        }
        if self.evaluate.cutoffs.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("cutoffs must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parses `"a..b"`, `"a..=b"` or a single unit `"k"` as an inclusive range.
pub fn parse_k_range(text: &str) -> Result<RangeInclusive<usize>> {
    let bad = || Error::Config(format!("invalid unit range {text:?}; expected a..b"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let (lo, hi) = match text.split_once("..") {
        Some((lo, hi)) => (num(lo)?, num(hi.strip_prefix('=').unwrap_or(hi))?),
        None => {
            let k = num(text)?;
            (k, k)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn basename(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Collects outputs of one stage and writes its manifest.
struct Stage {
    dir: PathBuf,
    manifest: Manifest,
}

impl Stage {
    fn new(command: &str, config: &RunConfig, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: VERSION.into(),
                command: command.into(),
                config: config.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        })
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.manifest.inputs.push(FileDigest {
            file: basename(path),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn output(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.push(FileDigest {
            file: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn emit(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.output(name, &buf)
    }

    fn finish(self) -> Result<Manifest> {
        let name = format!("manifest_{}.json", self.manifest.command);
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

/// Writes `matrix.csv`, `labels.csv`, `theta_true.csv` and `items_true.csv`.
pub fn run_simulate(config: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut stage = Stage::new("simulate", config, out)?;
    let cohort = generate(&config.simulate)?;
    info!(
        "simulated {} students x {} items, failure rate {:.3}",
        cohort.matrix.n_students(),
        cohort.matrix.n_items(),
        cohort.failure_rate()
    );
    stage.emit("matrix.csv", |w| cohort.matrix.to_writer(w))?;
    stage.emit("labels.csv", |w| cohort.labels.to_writer(w))?;
    stage.emit("theta_true.csv", |w| {
        let mut wtr = csv_writer(w);
        wtr.write_record(["student_id", "theta_true"])?;
        for (id, t) in cohort.matrix.student_ids().iter().zip(&cohort.theta_true) {
            wtr.write_record([id.clone(), t.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("theta_true.csv", e))
    })?;
    stage.emit("items_true.csv", |w| {
        let mut wtr = csv_writer(w);
        wtr.write_record(["item_id", "a_true", "b_true"])?;
        for (j, id) in cohort.matrix.item_ids().iter().enumerate() {
            wtr.write_record([
                id.clone(),
                cohort.items_true.a[j].to_string(),
                cohort.items_true.b[j].to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("items_true.csv", e))
    })?;
    stage.finish()
}

fn read_matrix(stage: &mut Stage, path: &Path) -> Result<ResponseMatrix> {
    let bytes = stage.input(path)?;
    ResponseMatrix::from_reader(bytes.as_slice(), ColumnLayout::Tagged)
}

fn read_labels(stage: &mut Stage, path: &Path) -> Result<OutcomeLabels> {
    let bytes = stage.input(path)?;
    OutcomeLabels::from_reader(bytes.as_slice())
}

/// Full-matrix calibration: `items.csv`, `abilities.csv`, `convergence.csv`.
pub fn run_calibrate(config: &RunConfig, matrix_path: &Path, out: &Path) -> Result<Manifest> {
    let mut stage = Stage::new("calibrate", config, out)?;
    let matrix = read_matrix(&mut stage, matrix_path)?;
    let result = calibrate(&matrix.scored_view(config.irt.policy), &config.irt.calibration())?;
    if result.converged {
        info!("calibration converged after {} iterations", result.iterations);
    } else {
        warn!(
            "calibration stopped after {} iterations without meeting the tolerance",
            result.iterations
        );
    }
    let flagged_items = result.item_flags.iter().filter(|f| f.as_str() != "ok").count();
    if flagged_items > 0 {
        warn!("{flagged_items} items have degenerate responses and were set to their bounds");
    }
    let flagged_students = result.abilities.flags.iter().filter(|f| f.is_flagged()).count();
    if flagged_students > 0 {
        warn!("{flagged_students} students have degenerate or clamped abilities");
    }

    stage.emit("items.csv", |w| {
        let mut wtr = csv_writer(w);
        wtr.write_record(["item_id", "a", "b", "flag"])?;
        for (j, id) in matrix.item_ids().iter().enumerate() {
            wtr.write_record([
                id.clone(),
                result.items.a[j].to_string(),
                result.items.b[j].to_string(),
                result.item_flags[j].as_str().to_owned(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("items.csv", e))
    })?;
    stage.emit("abilities.csv", |w| {
        let mut wtr = csv_writer(w);
        wtr.write_record(["student_id", "theta", "flag"])?;
        for (i, id) in matrix.student_ids().iter().enumerate() {
            wtr.write_record([
                id.clone(),
                result.abilities.theta[i].to_string(),
                result.abilities.flags[i].as_str().to_owned(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("abilities.csv", e))
    })?;
    stage.emit("convergence.csv", |w| {
        let mut wtr = csv_writer(w);
        wtr.write_record(["iteration", "log_likelihood", "gain", "standardization"])?;
        for r in &result.trace {
            wtr.write_record([
                r.iteration.to_string(),
                r.log_likelihood.to_string(),
                r.gain.to_string(),
                r.standardization.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("convergence.csv", e))
    })?;
    stage.finish()
}

pub fn trend_file_stem(kind: TrendKind) -> &'static str {
    match kind {
        TrendKind::Cumulative => "trend_cumulative",
        TrendKind::PerUnit => "trend_per_unit",
    }
}

/// Writes `<stem>.csv`, `<stem>_flags.csv` and `<stem>_fits.csv`.
pub fn run_trend(config: &RunConfig, matrix_path: &Path, out: &Path) -> Result<Manifest> {
    let mut stage = Stage::new("trend", config, out)?;
    let matrix = read_matrix(&mut stage, matrix_path)?;
    let units = if config.trend.k_range.is_empty() {
        1..=matrix.n_tests()
    } else {
        parse_k_range(&config.trend.k_range)?
    };
    let trend_config = TrendConfig {
        policy: config.irt.policy,
        calibration: config.irt.calibration(),
        item_source: config.trend.item_source,
    };
    let trend = match config.trend.kind {
        TrendKind::Cumulative => cumulative_trend(&matrix, units, &trend_config)?,
        TrendKind::PerUnit => per_unit_trend(&matrix, units, &trend_config)?,
    };
    for fit in trend.fits().iter().filter(|f| !f.converged) {
        warn!("unit {} calibration stopped after {} iterations without meeting the tolerance", fit.unit, fit.iterations);
    }
    let stem = trend_file_stem(config.trend.kind);
    stage.emit(&format!("{stem}.csv"), |w| trend.write_values(w))?;
    stage.emit(&format!("{stem}_flags.csv"), |w| trend.write_flags(w))?;
    stage.emit(&format!("{stem}_fits.csv"), |w| {
        let mut wtr = csv_writer(w);
        wtr.write_record(["unit", "iterations", "converged", "log_likelihood"])?;
        for f in trend.fits() {
            wtr.write_record([
                f.unit.to_string(),
                f.iterations.to_string(),
                f.converged.to_string(),
                f.log_likelihood.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("fits", e))
    })?;
    stage.finish()
}

pub fn predictions_file(k: usize) -> String {
    format!("predictions_{k}.csv")
}

/// Writes `predictions_<k>.csv` for every configured horizon.
pub fn run_predict(config: &RunConfig, trend_path: &Path, labels_path: &Path, out: &Path) -> Result<Manifest> {
    let mut stage = Stage::new("predict", config, out)?;
    let bytes = stage.input(trend_path)?;
    let trend = AbilityTrend::from_reader(bytes.as_slice(), TrendKind::Cumulative)?;
    if !labels_path.exists() {
        return Err(Error::Integrity(format!(
            "outcome labels {} not found; prediction needs labeled students",
            labels_path.display()
        )));
    }
    let labels = read_labels(&mut stage, labels_path)?;
    let aligned = labels.aligned_to(trend.student_ids());
    let similarity = config.predict.similarity();
    for &k in &config.predict.k {
        let preds = predict_cohort(&trend, k, &aligned, &similarity, config.predict.mode)?;
        let records: Vec<PredictionRecord> = preds.iter().map(PredictionRecord::from).collect();
        info!("k = {k}: {} predictions", records.len());
        stage.emit(&predictions_file(k), |w| write_predictions(&records, w))?;
    }
    stage.finish()
}

fn read_abilities(bytes: &[u8]) -> Result<(Vec<String>, Vec<f64>, Vec<AbilityFlag>)> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(bytes);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["student_id", "theta", "flag"] {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "abilities header must be student_id,theta,flag".into(),
        });
    }
    let (mut ids, mut theta, mut flags) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        ids.push(rec[0].to_owned());
        theta.push(rec[1].parse::<f64>().map_err(|_| Error::Parse {
            row,
            col: 2,
            msg: format!("invalid ability {:?}", &rec[1]),
        })?);
        flags.push(AbilityFlag::parse(&rec[2]).ok_or_else(|| Error::Parse {
            row,
            col: 3,
            msg: format!("invalid flag {:?}", &rec[2]),
        })?);
    }
    Ok((ids, theta, flags))
}

fn cutoff_label(c: f64) -> String {
    c.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| v.to_string())
}

/// Confusion tables, curves and bars per horizon, a summary over all
/// horizons and cutoffs, and the full-matrix ability stump.
pub fn run_evaluate(
    config: &RunConfig,
    predictions_dir: &Path,
    labels_path: &Path,
    abilities_path: Option<&Path>,
    out: &Path,
) -> Result<Manifest> {
    let mut stage = Stage::new("evaluate", config, out)?;
    let labels = read_labels(&mut stage, labels_path)?;
    let cutoffs = &config.evaluate.cutoffs;

    let mut summary = vec![[
        "k",
        "cutoff",
        "tp",
        "fp",
        "tn",
        "fn",
        "misclassification",
        "hitting_ratio",
        "recall",
        "fpr",
    ]
    .map(String::from)
    .to_vec()];
    let mut aucs = vec![vec!["k".to_owned(), "roc_auc".to_owned()]];

    for &k in &config.evaluate.k {
        let path = predictions_dir.join(predictions_file(k));
        let bytes = stage.input(&path)?;
        let records = read_predictions(bytes.as_slice())?;
        let ids: Vec<String> = records.iter().map(|r| r.student_id.clone()).collect();
        let observed = labels.require_all(&ids)?;
        let p_fail: Vec<f64> = records.iter().map(|r| r.p_fail).collect();

        for &c in cutoffs {
            let cm = confusion(&classify(&p_fail, c), &observed)?;
            let r = rates(&cm);
            stage.emit(&format!("confusion_{k}_{}.csv", cutoff_label(c)), |w| write_confusion(&cm, w))?;
            summary.push(vec![
                k.to_string(),
                cutoff_label(c),
                cm.tp.to_string(),
                cm.fp.to_string(),
                cm.tn.to_string(),
                cm.fn_.to_string(),
                misclassification_rate(&cm)?.to_string(),
                opt(hitting_ratio(&cm)),
                opt(r.recall),
                opt(r.fpr),
            ]);
        }

        let roc = roc_curve(&p_fail, &observed)?;
        let pr = pr_curve(&p_fail, &observed)?;
        aucs.push(vec![k.to_string(), auc(&roc).to_string()]);
        stage.emit(&format!("roc_{k}.csv"), |w| write_curve(&roc, "fpr", "tpr", w))?;
        stage.emit(&format!("pr_{k}.csv"), |w| write_curve(&pr, "recall", "precision", w))?;
        let bars = predicted_count_bars(&p_fail, &observed, cutoffs)?;
        stage.emit(&format!("bars_{k}.csv"), |w| write_bars(&bars, w))?;
        if config.evaluate.emit_svg {
            let svg = curve_svg(&roc, &format!("ROC, units 1-{k}"), "FPR", "TPR");
            stage.output(&format!("roc_{k}.svg"), svg.as_bytes())?;
            let svg = curve_svg(&pr, &format!("Recall-precision, units 1-{k}"), "recall", "precision");
            stage.output(&format!("pr_{k}.svg"), svg.as_bytes())?;
        }
    }
    stage.emit("summary.csv", |w| write_rows(&summary, w))?;
    stage.emit("auc.csv", |w| write_rows(&aucs, w))?;

    if let Some(path) = abilities_path {
        let bytes = stage.input(path)?;
        let (ids, theta, flags) = read_abilities(&bytes)?;
        let observed = labels.require_all(&ids)?;
        // Students without any scored response carry no ability information.
        let keep: Vec<usize> = (0..ids.len()).filter(|&i| flags[i] != AbilityFlag::NoData).collect();
        let theta: Vec<f64> = keep.iter().map(|&i| theta[i]).collect();
        let observed: Vec<bool> = keep.iter().map(|&i| observed[i]).collect();
        let stump = fit_stump(&theta, &observed)?;
        let cm = confusion(&stump.predict(&theta), &observed)?;
        let mis = misclassification_rate(&cm)?;
        info!(
            "ability stump: fail below {}, misclassification {}, hitting ratio {}",
            stump.threshold,
            display_rate(mis),
            hitting_ratio(&cm).map_or_else(|| "NA".into(), display_rate)
        );
        let rows = vec![
            ["threshold", "errors", "misclassification", "hitting_ratio", "tp", "fp", "tn", "fn"]
                .map(String::from)
                .to_vec(),
            vec![
                stump.threshold.to_string(),
                stump.errors.to_string(),
                mis.to_string(),
                opt(hitting_ratio(&cm)),
                cm.tp.to_string(),
                cm.fp.to_string(),
                cm.tn.to_string(),
                cm.fn_.to_string(),
            ],
        ];
        stage.emit("stump.csv", |w| write_rows(&rows, w))?;
    }
    stage.finish()
}

fn write_rows(rows: &[Vec<String>], writer: &mut Vec<u8>) -> Result<()> {
    let mut wtr = csv_writer(writer);
    for r in rows {
        wtr.write_record(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<report writer>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_range_forms() {
        assert_eq!(parse_k_range("1..7").unwrap(), 1..=7);
        assert_eq!(parse_k_range("2..=4").unwrap(), 2..=4);
        assert_eq!(parse_k_range("5").unwrap(), 5..=5);
        for bad in ["0..3", "4..2", "x", "1..y"] {
            assert!(matches!(parse_k_range(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn toml_sections_and_defaults() {
        let cfg = RunConfig::from_toml(
            "[simulate]\nseed = 7\nn_students = 40\n[irt]\npolicy = \"as-missing\"\n\
             [predict]\nmode = \"loo\"\nn_neighbors = 3\n[evaluate]\ncutoffs = [0.2]\n",
        )
        .unwrap();
        assert_eq!(cfg.simulate.seed, 7);
        assert_eq!(cfg.simulate.n_tests, 14);
        assert_eq!(cfg.irt.policy, AbsencePolicy::AsMissing);
        assert_eq!(cfg.predict.mode, PredictionMode::LeaveOneOut);
        assert_eq!(cfg.predict.k, vec![4, 7, 11]);
        assert_eq!(cfg.evaluate.cutoffs, vec![0.2]);
        cfg.validate().unwrap();
        assert!(matches!(RunConfig::from_toml("[irt]\nbogus = 1\n"), Err(Error::Config(_))));
        let bad = RunConfig {
            predict: PredictSection {
                n_neighbors: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_omits_output_dir() {
        let cfg = RunConfig {
            out: Some("/somewhere/private".into()),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(!text.contains("somewhere"));
    }
}
