//! End-to-end experiment driver: configuration, artifact layout, reports.
//!
//! Output layout under the output directory:
//!
//! ```text
//! manifest.json  report.json  plots/cd_*.{svg,json}
//! <dataset>/dataset.json encoder.json blackbox.json truth_{train,calib,test}.json
//! <dataset>/surrogate_trees/  <dataset>/surrogate_mlp.json
//! <dataset>/conformal/<surrogate>+<estimator>.json  <dataset>/plots/
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blackbox::{default_grid, grid_search, GbtParams, TreeEnsemble};
use crate::conformal::{calibrate_explainer, ConformalExplainer, DifficultyConfig, DifficultyEstimator, DifficultyKind, IntervalExplanation};
use crate::data::{
    load_csv, load_instances, partition, read_json, write_json, Dataset, DatasetFile, Encoder, RawDataset, Schema,
    SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::plot::{cd_diagram_svg, interval_chart_svg, CdPlotData, IntervalBar, IntervalPlotData};
use crate::eval::{
    benchmark_methods, empirical_coverage, friedman, method_id, nemenyi_cd, time_median, top_k_features,
    BenchInputs, FriedmanResult, MethodRunResult, RankTable, TopKMode, WidthSummary, EXACT_METHOD,
};
use crate::explain::{explain_batch, ExplanationMatrix};
use crate::matrix::Matrix;
use crate::seed::substream;
use crate::surrogate::{AugmentMode, MlpConfig, MlpSurrogate, PerFeatureSurrogate, Surrogate};

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
/// Largest allowed gap between reported and recomputed coverage.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            calib: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Csv {
        name: String,
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        schema: Schema,
    },
    Synthetic {
        name: String,
        n: usize,
        d: usize,
        classes: usize,
        #[serde(default = "one")]
        class_sep: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl DatasetConfig {
    pub fn name(&self) -> &str {
        match self {
            DatasetConfig::Csv { name, .. } | DatasetConfig::Synthetic { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackBoxConfig {
    #[serde(default = "default_grid")]
    pub grid: Vec<GbtParams>,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        BlackBoxConfig { grid: default_grid() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreesSurrogateConfig {
    #[serde(default)]
    pub params: GbtParams,
    #[serde(default)]
    pub augment: AugmentMode,
}

/// The perceptron's `seed` is replaced by a substream of the root seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSurrogateConfig {
    #[serde(default)]
    pub config: MlpConfig,
    #[serde(default)]
    pub augment: AugmentMode,
}

/// Surrogate families to fit; an absent family is skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogatesConfig {
    pub trees: Option<TreesSurrogateConfig>,
    pub mlp: Option<MlpSurrogateConfig>,
}

impl Default for SurrogatesConfig {
    fn default() -> Self {
        SurrogatesConfig {
            trees: Some(TreesSurrogateConfig::default()),
            mlp: Some(MlpSurrogateConfig::default()),
        }
    }
}

fn default_estimators() -> Vec<DifficultyConfig> {
    DifficultyKind::ALL.into_iter().map(DifficultyConfig::of).collect()
}

fn default_epsilons() -> Vec<f64> {
    vec![0.05]
}

fn default_top_k() -> Vec<usize> {
    vec![10, 5]
}

fn default_repetitions() -> usize {
    3
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub black_box: BlackBoxConfig,
    #[serde(default)]
    pub surrogates: SurrogatesConfig,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<DifficultyConfig>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_top_k")]
    pub top_k: Vec<usize>,
    #[serde(default)]
    pub top_k_mode: TopKMode,
    #[serde(default = "default_repetitions")]
    pub timing_repetitions: usize,
    #[serde(default = "default_alpha")]
    pub cd_alpha: f64,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses `path` and validates the result.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets".into()));
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            let name = d.name();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || name.starts_with('.') {
                return Err(Error::Config(format!("dataset name `{name}` must be a plain file name")));
            }
            if !names.insert(name) {
                return Err(Error::Config(format!("duplicate dataset name `{name}`")));
            }
            match d {
                DatasetConfig::Csv { path, schema, .. } => {
                    schema.validate()?;
                    let p = self.resolve(path);
                    if !p.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                DatasetConfig::Synthetic { n, d, classes, class_sep, .. } => SyntheticSpec {
                    n: *n,
                    d: *d,
                    classes: *classes,
                    class_sep: *class_sep,
                }
                .validate()?,
            }
        }
        self.split_spec(0).validate()?;
        if self.black_box.grid.is_empty() {
            return Err(Error::Config("black-box grid is empty".into()));
        }
        for p in &self.black_box.grid {
            p.validate()?;
        }
        if self.surrogates.trees.is_none() && self.surrogates.mlp.is_none() {
            return Err(Error::Config("no surrogate family configured".into()));
        }
        if let Some(t) = &self.surrogates.trees {
            t.params.validate()?;
        }
        if let Some(m) = &self.surrogates.mlp {
            m.config.validate()?;
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no difficulty estimators".into()));
        }
        let mut kinds = BTreeSet::new();
        for e in &self.estimators {
            e.validate()?;
            if !kinds.insert(e.kind) {
                return Err(Error::Config(format!("estimator `{}` listed twice", e.kind)));
            }
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Config("epsilons must be non-empty and inside (0, 1)".into()));
        }
        if self.top_k.contains(&0) {
            return Err(Error::Config("top_k entries must be >= 1".into()));
        }
        if self.timing_repetitions == 0 {
            return Err(Error::Config("timing_repetitions must be >= 1".into()));
        }
        if ![0.05, 0.10].iter().any(|a| (a - self.cd_alpha).abs() < 1e-12) {
            return Err(Error::Config("cd_alpha must be 0.05 or 0.10".into()));
        }
        Ok(())
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_frac: self.split.train,
            calib_frac: self.split.calib,
            test_frac: self.split.test,
            seed,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait Stage<T> {
    fn stage(self, name: &str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError {
            stage: name.to_string(),
            error,
        })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Exclusive ownership of an output directory for the guard's lifetime.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub surrogate: Option<String>,
    pub estimator: Option<DifficultyKind>,
    pub epsilon: Option<f64>,
    pub coverage: Option<f64>,
    pub per_feature_coverage: Option<Vec<f64>>,
    pub widths: Option<WidthSummary>,
}

impl From<&MethodRunResult> for MethodMetrics {
    fn from(r: &MethodRunResult) -> Self {
        MethodMetrics {
            method: r.method.clone(),
            surrogate: r.surrogate.clone(),
            estimator: r.estimator,
            epsilon: r.epsilon,
            coverage: r.coverage,
            per_feature_coverage: r.per_feature_coverage.clone(),
            widths: r.widths.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedMethod {
    pub method: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlackBoxReport {
    pub best: GbtParams,
    pub best_index: usize,
    pub calib_log_losses: Vec<f64>,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub rows: usize,
    pub features: usize,
    pub classes: usize,
    pub label_names: Vec<String>,
    pub split_sizes: [usize; 3],
    pub black_box: BlackBoxReport,
    pub methods: Vec<MethodMetrics>,
    pub skipped: Vec<SkippedMethod>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSection {
    pub name: String,
    pub table: RankTable,
    pub friedman: Option<FriedmanResult>,
    pub critical_difference: Option<f64>,
    pub alpha: f64,
    pub notes: Vec<String>,
    /// SVG path relative to the output directory.
    pub plot: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTiming {
    pub dataset: String,
    pub methods: Vec<MethodTiming>,
}

/// Everything that depends on the wall clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    pub repetitions: usize,
    pub unit: String,
    pub datasets: Vec<DatasetTiming>,
    pub rank: Option<RankSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub importance_space: String,
    pub epsilons: Vec<f64>,
    pub top_k: Vec<usize>,
    pub datasets: Vec<DatasetReport>,
    /// Normalized-width rank tables: all features and each top-k.
    pub rank_tables: Vec<RankSection>,
    pub deviations: Vec<String>,
    pub timing: TimingSection,
}

impl Report {
    pub fn load(out: &Path) -> Result<Report> {
        read_json(&out.join(REPORT_FILE))
    }

    /// The report with its timing section cleared.
    pub fn without_timing(&self) -> Report {
        Report {
            timing: TimingSection {
                repetitions: self.timing.repetitions,
                unit: self.timing.unit.clone(),
                datasets: Vec::new(),
                rank: None,
            },
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub datasets: Vec<String>,
    pub artifacts: Vec<String>,
}

fn log(dataset: &str, msg: &str) {
    eprintln!("[{dataset}] {msg}");
}

fn load_raw(cfg: &ExperimentConfig, d: &DatasetConfig) -> Result<RawDataset> {
    match d {
        DatasetConfig::Csv { path, schema, .. } => load_csv(cfg.resolve(path), schema),
        DatasetConfig::Synthetic {
            name,
            n,
            d,
            classes,
            class_sep,
        } => SyntheticSpec {
            n: *n,
            d: *d,
            classes: *classes,
            class_sep: *class_sep,
        }
        .generate_raw(substream(cfg.seed, &format!("synthetic/{name}"))),
    }
}

/// Fitted state of one dataset, shared by reporting and benchmarking.
struct DatasetRun {
    report: DatasetReport,
    results: Vec<MethodRunResult>,
    first_explainer: Option<(String, Vec<IntervalExplanation>)>,
    truth_test: ExplanationMatrix,
}

fn run_dataset(cfg: &ExperimentConfig, d: &DatasetConfig, out: &Path) -> StageResult<DatasetRun> {
    let name = d.name().to_string();
    let dir = out.join(&name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("output")?;

    log(&name, "loading");
    let raw = load_raw(cfg, d).stage("load")?;

    log(&name, "splitting and encoding");
    let split_seed = substream(cfg.seed, &format!("split/{name}"));
    let part = partition(&raw.labels, raw.n_classes(), &cfg.split_spec(split_seed)).stage("split")?;
    let encoder = Encoder::fit(&raw, &part.train);
    let full = encoder.transform(&raw).stage("encode")?;
    let (train, calib, test) = (full.subset(&part.train), full.subset(&part.calib), full.subset(&part.test));
    write_json(&dir.join("dataset.json"), &DatasetFile::new(&full, Some(raw.schema.clone()), Some(part.tags(full.len()))))
        .stage("persist")?;
    write_json(&dir.join("encoder.json"), &encoder).stage("persist")?;

    log(&name, &format!("grid search over {} black-box configurations", cfg.black_box.grid.len()));
    let gs = grid_search(&train, &calib, &cfg.black_box.grid).stage("grid-search")?;
    let bb = Arc::new(gs.model);
    bb.save_json(dir.join("blackbox.json")).stage("persist")?;
    let correct = (0..test.len())
        .filter(|&i| bb.predict_class(test.features.row(i)).ok() == Some(test.labels[i]))
        .count();

    log(&name, "explaining train, calibration and test rows");
    let names = full.feature_names.clone();
    let truth_train = explain_batch(&bb, &train.features, &names).stage("explain")?.value;
    let truth_calib = explain_batch(&bb, &calib.features, &names).stage("explain")?.value;
    let truth_test = explain_batch(&bb, &test.features, &names).stage("explain")?.value;
    for (file, t) in [("truth_train.json", &truth_train), ("truth_calib.json", &truth_calib), ("truth_test.json", &truth_test)] {
        t.save_json(dir.join(file)).stage("persist")?;
    }

    let mut surrogates: Vec<Arc<Surrogate>> = Vec::new();
    if let Some(t) = &cfg.surrogates.trees {
        log(&name, "fitting per-feature tree surrogate");
        let s = PerFeatureSurrogate::fit(&train.features, &truth_train, &bb, &t.params, t.augment).stage("surrogate-trees")?;
        surrogates.push(Arc::new(Surrogate::Trees(s)));
    }
    if let Some(m) = &cfg.surrogates.mlp {
        log(&name, "fitting perceptron surrogate");
        let mlp_cfg = MlpConfig {
            seed: substream(cfg.seed, &format!("mlp/{name}")),
            ..m.config.clone()
        };
        let s = MlpSurrogate::fit(&train.features, &truth_train, &bb, &mlp_cfg, m.augment).stage("surrogate-mlp")?;
        surrogates.push(Arc::new(Surrogate::Mlp(s)));
    }
    for s in &surrogates {
        s.save(&dir).stage("persist")?;
    }

    log(&name, "fitting difficulty estimators");
    let mut estimators = Vec::new();
    let mut skipped = Vec::new();
    for e in &cfg.estimators {
        let bounded = DifficultyConfig {
            k: e.k.min(calib.len().saturating_sub(1)).max(1),
            ..*e
        };
        match DifficultyEstimator::fit(bounded, &train, &truth_train) {
            Ok(est) => estimators.push(est),
            Err(err @ Error::DegenerateMedian { .. }) => {
                log(&name, &format!("skipping {}: {err}", e.kind));
                for s in &surrogates {
                    skipped.push(SkippedMethod {
                        method: method_id(s.family(), e.kind),
                        reason: err.to_string(),
                    });
                }
            }
            Err(err) => return Err(err).stage("estimators"),
        }
    }

    log(&name, "calibrating");
    let conformal_dir = dir.join("conformal");
    let mut explainers = Vec::new();
    for s in &surrogates {
        for est in &estimators {
            let ce = calibrate_explainer(s.clone(), est.clone(), &calib.features, &truth_calib, bb.clone(), &cfg.epsilons)
                .stage("calibrate")?;
            ce.save(&conformal_dir, &method_id(s.family(), est.kind())).stage("persist")?;
            explainers.push(ce);
        }
    }

    log(&name, "benchmarking");
    let inputs = BenchInputs {
        black_box: &bb,
        test_x: &test.features,
        truth: &truth_test,
        epsilons: &cfg.epsilons,
        top_k: &cfg.top_k,
        top_k_mode: cfg.top_k_mode,
        repetitions: cfg.timing_repetitions,
    };
    let refs: Vec<&ConformalExplainer> = explainers.iter().collect();
    let results = benchmark_methods(&inputs, &refs).stage("benchmark")?;

    let first_explainer = match explainers.first() {
        Some(ce) => Some((
            method_id(ce.surrogate.family(), ce.estimator.kind()),
            ce.predict(&test.features, cfg.epsilons[0]).stage("plots")?.value,
        )),
        None => None,
    };

    Ok(DatasetRun {
        report: DatasetReport {
            name,
            rows: full.len(),
            features: full.width(),
            classes: full.n_classes,
            label_names: raw.label_names.clone(),
            split_sizes: [train.len(), calib.len(), test.len()],
            black_box: BlackBoxReport {
                best: gs.best,
                best_index: gs.best_index,
                calib_log_losses: gs.calib_losses,
                test_accuracy: correct as f64 / test.len().max(1) as f64,
            },
            methods: results.iter().map(MethodMetrics::from).collect(),
            skipped,
        },
        results,
        first_explainer,
        truth_test,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rank table over methods present in every row; writes its CD diagram.
fn rank_section(
    name: &str,
    rows: Vec<(String, Vec<(String, f64)>)>,
    alpha: f64,
    out: &Path,
) -> Result<Option<RankSection>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let mut notes = Vec::new();
    let first: Vec<String> = rows[0].1.iter().map(|m| m.0.clone()).collect();
    let common: Vec<String> = first
        .into_iter()
        .filter(|m| rows.iter().all(|r| r.1.iter().any(|x| &x.0 == m)))
        .collect();
    let all: BTreeSet<&String> = rows.iter().flat_map(|r| r.1.iter().map(|x| &x.0)).collect();
    for m in all {
        if !common.contains(m) {
            notes.push(format!("method `{m}` missing from some rows; excluded from ranking"));
        }
    }
    if common.len() < 2 {
        return Ok(None);
    }
    let labels: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let values: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| common.iter().map(|m| r.1.iter().find(|x| &x.0 == m).expect("common").1).collect())
        .collect();
    let table = RankTable::new(common.clone(), labels, values, true)?;
    let friedman = if table.ranks.len() >= 2 {
        Some(friedman(&table.ranks)?)
    } else {
        notes.push("fewer than 2 rows; Friedman test not applied".into());
        None
    };
    let cd = match nemenyi_cd(common.len(), table.ranks.len(), alpha) {
        Ok(cd) => Some(cd),
        Err(Error::UnsupportedK { .. }) => {
            notes.push(format!("no Nemenyi critical value for {} methods", common.len()));
            None
        }
        Err(e) => return Err(e),
    };
    let plot = if let Some(cd) = cd {
        let data = CdPlotData {
            title: format!("{name}: average rank (lower is better)"),
            methods: common.clone(),
            average_ranks: table.average_ranks.clone(),
            critical_difference: cd,
            alpha,
        };
        let rel = format!("plots/cd_{name}.svg");
        write_text(&out.join(&rel), &cd_diagram_svg(&data))?;
        write_json(&out.join(format!("plots/cd_{name}.json")), &data)?;
        Some(rel)
    } else {
        None
    };
    Ok(Some(RankSection {
        name: name.to_string(),
        table,
        friedman,
        critical_difference: cd,
        alpha,
        notes,
        plot,
    }))
}

fn width_rows(datasets: &[DatasetReport], pick: &dyn Fn(&WidthSummary) -> Option<f64>, epsilons: &[f64]) -> Vec<(String, Vec<(String, f64)>)> {
    let mut rows = Vec::new();
    for d in datasets {
        for &eps in epsilons {
            let cells: Vec<(String, f64)> = d
                .methods
                .iter()
                .filter(|m| m.epsilon == Some(eps))
                .filter_map(|m| Some((m.method.clone(), pick(m.widths.as_ref()?)?)))
                .collect();
            rows.push((format!("{}@{eps}", d.name), cells));
        }
    }
    rows
}

fn timing_section(datasets: &[(String, Vec<MethodTiming>)], reps: usize, alpha: f64, out: &Path) -> Result<TimingSection> {
    let rows = datasets
        .iter()
        .map(|(n, ms)| (n.clone(), ms.iter().map(|m| (m.method.clone(), m.seconds)).collect()))
        .collect();
    Ok(TimingSection {
        repetitions: reps,
        unit: "seconds".into(),
        datasets: datasets
            .iter()
            .map(|(n, m)| DatasetTiming {
                dataset: n.clone(),
                methods: m.clone(),
            })
            .collect(),
        rank: rank_section("time", rows, alpha, out)?,
    })
}

fn method_timings(results: &[MethodRunResult]) -> Vec<MethodTiming> {
    let mut seen = BTreeSet::new();
    results
        .iter()
        .filter(|r| seen.insert(r.method.clone()))
        .map(|r| MethodTiming {
            method: r.method.clone(),
            seconds: r.elapsed_seconds,
        })
        .collect()
}

fn interval_plot(dir: &Path, method: &str, ivs: &[IntervalExplanation], truth: &ExplanationMatrix, k: usize, mode: TopKMode) -> Result<()> {
    if ivs.is_empty() {
        return Ok(());
    }
    let top = top_k_features(truth, k.min(truth.n_features()), mode)?;
    let data = IntervalPlotData {
        title: format!("{method}, test row 0, epsilon {}", ivs[0].epsilon),
        bars: top
            .iter()
            .map(|&f| {
                let fi = ivs[0].features[f];
                IntervalBar {
                    feature: truth.feature_names[f].clone(),
                    point: fi.point,
                    lo: fi.lo,
                    hi: fi.hi,
                    truth: truth.rows.get(0, f),
                }
            })
            .collect(),
    };
    write_text(&dir.join("plots/intervals_row0.svg"), &interval_chart_svg(&data))?;
    write_json(&dir.join("plots/intervals_row0.json"), &data)
}

fn list_artifacts(out: &Path) -> Vec<String> {
    fn walk(base: &Path, dir: &Path, acc: &mut Vec<String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, acc);
            } else if let Ok(rel) = p.strip_prefix(base) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != LOCK_FILE && rel != MANIFEST_FILE {
                    acc.push(rel);
                }
            }
        }
    }
    let mut acc = Vec::new();
    walk(out, out, &mut acc);
    acc.sort();
    acc
}

fn deviations(cfg: &ExperimentConfig, runs: &[DatasetRun]) -> Vec<String> {
    let mut d = vec![
        "importance scores explain the black-box margin (log-odds), not probabilities".to_string(),
        format!(
            "top-k features are selected by mean {} importance over the test rows",
            match cfg.top_k_mode {
                TopKMode::Absolute => "absolute",
                TopKMode::Signed => "signed",
            }
        ),
        "features whose true importance range over the test rows is zero are excluded from normalized width means".to_string(),
    ];
    for r in runs {
        let mut excluded = BTreeSet::new();
        for m in &r.report.methods {
            if let Some(w) = &m.widths {
                excluded.extend(w.excluded_features.iter().copied());
            }
        }
        if !excluded.is_empty() {
            let names: Vec<&str> = excluded.iter().map(|&f| r.truth_test.feature_names[f].as_str()).collect();
            d.push(format!("{}: zero-range features excluded: {}", r.report.name, names.join(", ")));
        }
        for s in &r.report.skipped {
            d.push(format!("{}: {} skipped: {}", r.report.name, s.method, s.reason));
        }
    }
    d
}

/// Executes every stage for every dataset and writes all artifacts.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> StageResult<Report> {
    cfg.validate().stage("config")?;
    let _lock = OutputLock::acquire(out).stage("lock")?;
    let mut runs = Vec::new();
    for d in &cfg.datasets {
        let r = run_dataset(cfg, d, out)?;
        if let Some((method, ivs)) = &r.first_explainer {
            interval_plot(&out.join(d.name()), method, ivs, &r.truth_test, cfg.top_k.first().copied().unwrap_or(10), cfg.top_k_mode)
                .stage("plots")?;
        }
        runs.push(r);
    }

    let reports: Vec<DatasetReport> = runs.iter().map(|r| r.report.clone()).collect();
    let mut rank_tables = Vec::new();
    let all = width_rows(&reports, &|w| w.all, &cfg.epsilons);
    rank_tables.extend(rank_section("width_all", all, cfg.cd_alpha, out).stage("report")?);
    for &k in &cfg.top_k {
        let rows = width_rows(&reports, &|w| w.top.iter().find(|t| t.k == k).and_then(|t| t.mean), &cfg.epsilons);
        rank_tables.extend(rank_section(&format!("width_top{k}"), rows, cfg.cd_alpha, out).stage("report")?);
    }
    let timings: Vec<(String, Vec<MethodTiming>)> = runs.iter().map(|r| (r.report.name.clone(), method_timings(&r.results))).collect();
    let report = Report {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        importance_space: "margin".into(),
        epsilons: cfg.epsilons.clone(),
        top_k: cfg.top_k.clone(),
        deviations: deviations(cfg, &runs),
        datasets: reports,
        rank_tables,
        timing: timing_section(&timings, cfg.timing_repetitions, cfg.cd_alpha, out).stage("report")?,
    };
    write_json(&out.join(REPORT_FILE), &report).stage("report")?;
    write_json(
        &out.join(MANIFEST_FILE),
        &Manifest {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            config_hash: report.config_hash.clone(),
            seed: cfg.seed,
            datasets: cfg.datasets.iter().map(|d| d.name().to_string()).collect(),
            artifacts: list_artifacts(out),
        },
    )
    .stage("manifest")?;
    Ok(report)
}

/// A persisted dataset directory loaded back into memory.
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub file: DatasetFile,
    pub encoder: Encoder,
    pub black_box: Arc<TreeEnsemble>,
    pub test: Dataset,
    pub truth_test: ExplanationMatrix,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let file: DatasetFile = read_json(&dir.join("dataset.json"))?;
        let full = file.dataset()?;
        let tags = file
            .split_tags
            .clone()
            .ok_or_else(|| Error::InvalidData(format!("{}: dataset has no split tags", dir.display())))?;
        let part = crate::data::Partition::from_tags(&tags);
        Ok(LoadedDataset {
            dir: dir.to_path_buf(),
            encoder: read_json(&dir.join("encoder.json"))?,
            black_box: Arc::new(TreeEnsemble::load_json(dir.join("blackbox.json"))?),
            test: full.subset(&part.test),
            truth_test: ExplanationMatrix::load_json(dir.join("truth_test.json"))?,
            file,
        })
    }

    /// Loads the calibrated explainer `method` (`<surrogate>+<estimator>`).
    pub fn explainer(&self, method: &str) -> Result<ConformalExplainer> {
        let conformal = self.dir.join("conformal");
        let family = ConformalExplainer::surrogate_family(&conformal, method)?;
        let surrogate = Arc::new(Surrogate::load(&self.dir, &family)?);
        ConformalExplainer::load(&conformal, method, self.black_box.clone(), surrogate)
    }

    /// Encodes instance rows from a CSV in the dataset's schema (target
    /// optional) or a JSON array of already-encoded rows.
    pub fn read_instances(&self, path: &Path) -> Result<Matrix> {
        if path.extension().is_some_and(|e| e == "json") {
            let rows: Vec<Vec<f64>> = read_json(path)?;
            return Matrix::from_rows(self.file.feature_names.len(), &rows);
        }
        let schema = self
            .file
            .schema
            .as_ref()
            .ok_or_else(|| Error::InvalidData("dataset has no schema; pass encoded rows as JSON".into()))?;
        let cells = load_instances(path, schema)?;
        self.encoder.encode_rows(&cells)
    }
}

/// Re-times every method of a finished run and rewrites the report's timing section.
pub fn bench(cfg: &ExperimentConfig, out: &Path) -> StageResult<Report> {
    let mut report = Report::load(out).stage("load-report")?;
    let _lock = OutputLock::acquire(out).stage("lock")?;
    let mut timings = Vec::new();
    for d in &report.datasets {
        log(&d.name, "re-timing");
        let loaded = LoadedDataset::load(&out.join(&d.name)).stage("load-artifacts")?;
        let mut methods = Vec::new();
        let names = loaded.truth_test.feature_names.clone();
        let (_, exact, _) = time_median(cfg.timing_repetitions, || Ok(explain_batch(&loaded.black_box, &loaded.test.features, &names)?.value))
            .stage("bench")?;
        methods.push(MethodTiming {
            method: EXACT_METHOD.into(),
            seconds: exact,
        });
        let mut seen = BTreeSet::new();
        for m in d.methods.iter().filter(|m| m.surrogate.is_some()) {
            if !seen.insert(m.method.clone()) {
                continue;
            }
            let ce = loaded.explainer(&m.method).stage("load-artifacts")?;
            let eps = m.epsilon.unwrap_or(report.epsilons[0]);
            let (_, secs, _) = time_median(cfg.timing_repetitions, || Ok(ce.predict(&loaded.test.features, eps)?.value)).stage("bench")?;
            methods.push(MethodTiming {
                method: m.method.clone(),
                seconds: secs,
            });
        }
        timings.push((d.name.clone(), methods));
    }
    report.timing = timing_section(&timings, cfg.timing_repetitions, cfg.cd_alpha, out).stage("report")?;
    write_json(&out.join(REPORT_FILE), &report).stage("report")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub checked: usize,
    pub max_abs_diff: f64,
}

/// Recomputes every reported coverage from the persisted artifacts.
pub fn verify(out: &Path) -> Result<VerifyOutcome> {
    let report = Report::load(out)?;
    let mut checked = 0;
    let mut max_abs_diff = 0.0f64;
    for d in &report.datasets {
        let loaded = LoadedDataset::load(&out.join(&d.name))?;
        for m in d.methods.iter().filter(|m| m.coverage.is_some()) {
            let eps = m.epsilon.expect("interval methods carry epsilon");
            let ce = loaded.explainer(&m.method)?;
            let ivs = ce.predict(&loaded.test.features, eps)?.value;
            let cov = empirical_coverage(&ivs, &loaded.truth_test)?;
            let diff = (cov - m.coverage.expect("filtered")).abs();
            max_abs_diff = max_abs_diff.max(diff);
            if diff > VERIFY_TOLERANCE {
                return Err(Error::InvalidData(format!(
                    "{}/{} at epsilon {eps}: recomputed coverage {cov} differs from reported {}",
                    d.name,
                    m.method,
                    m.coverage.unwrap()
                )));
            }
            checked += 1;
        }
    }
    Ok(VerifyOutcome { checked, max_abs_diff })
}

/// JSON line emitted per instance by [`explain_instances`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainLine {
    pub row: usize,
    pub method: String,
    pub epsilon: f64,
    pub base_value: f64,
    pub features: Vec<ExplainFeature>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainFeature {
    pub name: String,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub sigma: f64,
}

/// Interval explanations of every row in `instances` by a persisted explainer.
pub fn explain_instances(model_dir: &Path, instances: &Path, method: &str, epsilon: f64) -> Result<Vec<ExplainLine>> {
    let loaded = LoadedDataset::load(model_dir)?;
    let ce = loaded.explainer(method)?;
    ce.level(epsilon)?;
    let x = loaded.read_instances(instances)?;
    let ivs = ce.predict(&x, epsilon)?.value;
    let base = crate::explain::expected_value(&loaded.black_box);
    let names = ce.surrogate.feature_names().to_vec();
    Ok(ivs
        .into_iter()
        .enumerate()
        .map(|(row, iv)| {
            let output = crate::explain::explained_output(&loaded.black_box, &loaded.black_box.margins_unchecked(x.row(row)));
            ExplainLine {
                row,
                method: method.to_string(),
                epsilon,
                base_value: base[output],
                features: iv
                    .features
                    .iter()
                    .enumerate()
                    .map(|(f, fi)| ExplainFeature {
                        name: names[f].clone(),
                        point: fi.point,
                        lo: fi.lo,
                        hi: fi.hi,
                        sigma: iv.sigma.get(f),
                    })
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "seed": 3,
        "output_dir": "out",
        "datasets": [{"source": "synthetic", "name": "blobs", "n": 120, "d": 3, "classes": 2}],
        "black_box": {"grid": [{"n_estimators": 10}]},
        "surrogates": {"trees": {"params": {"n_estimators": 10}}},
        "estimators": [{"kind": "none"}, {"kind": "pred-conf"}],
        "epsilons": [0.1],
        "timing_repetitions": 1
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.split, SplitFractions::default());
        assert!(cfg.surrogates.mlp.is_none());
        assert_eq!(cfg.top_k, vec![10, 5]);
        assert_eq!(cfg.estimators[1].k, 25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"seed\": 3,", "\"seed\": 3, \"sede\": 4,");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let nested = MINIMAL.replace("\"classes\": 2}", "\"classes\": 2, \"colour\": 1}");
        assert!(ExperimentConfig::from_json(&nested).is_err());
    }

    #[test]
    fn validation_failures() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut c = cfg.clone();
        c.epsilons = vec![1.0];
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.schema_version = 2;
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.datasets.push(c.datasets[0].clone());
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.datasets = vec![DatasetConfig::Csv {
            name: "missing".into(),
            path: "no/such/file.csv".into(),
            schema: Schema {
                columns: vec![crate::data::Column::numeric("a"), crate::data::Column::categorical("y")],
                target: "y".into(),
                positive_label: None,
            },
        }];
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("no/such/file.csv"), "{msg}");
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
