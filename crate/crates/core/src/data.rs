//! Tabular classification data: CSV ingestion, one-hot encoding, stratified
//! splitting, synthetic class blobs and JSON persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
        }
    }
}

/// Column layout of a CSV file, including the target column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate column `{}`", c.name)));
            }
        }
        if !seen.contains(self.target.as_str()) {
            return Err(Error::SchemaMismatch(format!(
                "target `{}` is not a schema column",
                self.target
            )));
        }
        if self.feature_columns().next().is_none() {
            return Err(Error::SchemaMismatch("schema has no feature columns".into()));
        }
        Ok(())
    }

    /// Feature columns in file order, target excluded.
    pub fn feature_columns(&self) -> impl Iterator<Item = &Column> + '_ {
        self.columns.iter().filter(move |c| c.name != self.target)
    }
}

/// A cell before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawCell {
    Number(f64),
    Category(String),
}

/// Parsed CSV rows whose categorical cells are still tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub schema: Schema,
    /// One entry per row, feature columns only, in schema order.
    pub cells: Vec<Vec<RawCell>>,
    pub labels: Vec<usize>,
    /// Target token for each class index.
    pub label_names: Vec<String>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }
}

/// Encoded classification data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if feature_names.len() != features.cols() {
            return Err(Error::DimensionMismatch {
                expected: features.cols(),
                found: feature_names.len(),
            });
        }
        if n_classes < 2 {
            return Err(Error::InvalidData(format!(
                "{n_classes} classes; classification needs at least 2"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidData(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            feature_names,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn parse_number(token: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = token.trim();
    if trimmed.is_empty() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: "missing numeric value".into(),
        });
    }
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value `{trimmed}`"),
        }),
        Err(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{trimmed}` is not a number"),
        }),
    }
}

/// Cells per row and the raw target of each row.
type Records = (Vec<Vec<RawCell>>, Vec<Option<String>>);

fn read_records(path: &Path, schema: &Schema, target_required: bool) -> Result<Records> {
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let expected: Vec<&str> = if target_required {
        schema.columns.iter().map(|c| c.name.as_str()).collect()
    } else if headers.iter().any(|h| h == &schema.target) {
        schema.columns.iter().map(|c| c.name.as_str()).collect()
    } else {
        schema.feature_columns().map(|c| c.name.as_str()).collect()
    };
    if headers != expected {
        return Err(Error::SchemaMismatch(format!(
            "{}: header {:?} does not match schema columns {:?}",
            path.display(),
            headers,
            expected
        )));
    }

    let mut cells = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Data rows are numbered from 1; the header is row 0.
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("{} fields, expected {}", record.len(), headers.len()),
            });
        }
        let mut row_cells = Vec::with_capacity(headers.len());
        let mut target = None;
        for (name, token) in headers.iter().zip(record.iter()) {
            if name == &schema.target {
                target = Some(token.trim().to_string());
                continue;
            }
            let column = schema
                .columns
                .iter()
                .find(|c| &c.name == name)
                .expect("header validated against schema");
            row_cells.push(match column.kind {
                ColumnKind::Numeric => RawCell::Number(parse_number(token, row, name)?),
                ColumnKind::Categorical => RawCell::Category(token.trim().to_string()),
            });
        }
        cells.push(row_cells);
        targets.push(target);
    }
    Ok((cells, targets))
}

/// Reads a headed CSV file laid out according to `schema`.
///
/// Target tokens are mapped to dense class indices in sorted order, except that
/// `positive_label` (when given for a binary task) always becomes class 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawDataset> {
    let path = path.as_ref();
    let (cells, targets) = read_records(path, schema, true)?;
    let targets: Vec<String> = targets.into_iter().map(|t| t.unwrap_or_default()).collect();

    let mut names: Vec<String> = targets
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(pos) = &schema.positive_label {
        let Some(at) = names.iter().position(|n| n == pos) else {
            return Err(Error::SchemaMismatch(format!(
                "positive label `{pos}` never occurs in target `{}`",
                schema.target
            )));
        };
        let label = names.remove(at);
        names.push(label);
    }
    if names.len() < 2 {
        return Err(Error::InvalidData(format!(
            "target `{}` has {} distinct values; at least 2 classes are required",
            schema.target,
            names.len()
        )));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = targets.iter().map(|t| index[t.as_str()]).collect();
    Ok(RawDataset {
        schema: schema.clone(),
        cells,
        labels,
        label_names: names,
    })
}

/// Reads unlabeled instances laid out like `schema`; the target column may be
/// present (it is ignored) or absent.
pub fn load_instances(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Vec<RawCell>>> {
    read_records(path.as_ref(), schema, false).map(|(cells, _)| cells)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncodedColumn {
    Numeric { name: String },
    Categorical { name: String, vocabulary: Vec<String> },
}

/// One-hot encoder fitted on a subset of rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<EncodedColumn>,
}

impl Encoder {
    /// Builds each categorical vocabulary from `fit_rows` only.
    pub fn fit(raw: &RawDataset, fit_rows: &[usize]) -> Encoder {
        let columns = raw
            .schema
            .feature_columns()
            .enumerate()
            .map(|(j, col)| match col.kind {
                ColumnKind::Numeric => EncodedColumn::Numeric {
                    name: col.name.clone(),
                },
                ColumnKind::Categorical => {
                    let vocabulary: BTreeSet<String> = fit_rows
                        .iter()
                        .filter_map(|&i| match &raw.cells[i][j] {
                            RawCell::Category(c) => Some(c.clone()),
                            RawCell::Number(_) => None,
                        })
                        .collect();
                    EncodedColumn::Categorical {
                        name: col.name.clone(),
                        vocabulary: vocabulary.into_iter().collect(),
                    }
                }
            })
            .collect();
        Encoder { columns }
    }

    pub fn width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                EncodedColumn::Numeric { .. } => 1,
                EncodedColumn::Categorical { vocabulary, .. } => vocabulary.len(),
            })
            .sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        for c in &self.columns {
            match c {
                EncodedColumn::Numeric { name } => names.push(name.clone()),
                EncodedColumn::Categorical { name, vocabulary } => {
                    names.extend(vocabulary.iter().map(|v| format!("{name}={v}")))
                }
            }
        }
        names
    }

    /// Unseen categories encode to an all-zero segment.
    pub fn encode_row(&self, cells: &[RawCell]) -> Result<Vec<f64>> {
        if cells.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                found: cells.len(),
            });
        }
        let mut out = Vec::with_capacity(self.width());
        for (col, cell) in self.columns.iter().zip(cells) {
            match (col, cell) {
                (EncodedColumn::Numeric { .. }, RawCell::Number(v)) => out.push(*v),
                (EncodedColumn::Categorical { vocabulary, .. }, RawCell::Category(token)) => {
                    let start = out.len();
                    out.resize(start + vocabulary.len(), 0.0);
                    if let Ok(k) = vocabulary.binary_search(token) {
                        out[start + k] = 1.0;
                    }
                }
                (EncodedColumn::Numeric { name } | EncodedColumn::Categorical { name, .. }, _) => {
                    return Err(Error::SchemaMismatch(format!(
                        "cell kind does not match column `{name}`"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn encode_rows(&self, rows: &[Vec<RawCell>]) -> Result<Matrix> {
        let mut m = Matrix::zeros(0, self.width());
        for cells in rows {
            m.push_row(&self.encode_row(cells)?)?;
        }
        Ok(m)
    }

    pub fn transform(&self, raw: &RawDataset) -> Result<Dataset> {
        Dataset::new(
            self.encode_rows(&raw.cells)?,
            raw.labels.clone(),
            self.feature_names(),
            raw.n_classes(),
        )
    }
}

/// Fits an encoder on `fit_rows` and encodes every row of `raw`.
pub fn one_hot_encode(raw: &RawDataset, fit_rows: &[usize]) -> Result<(Encoder, Dataset)> {
    let encoder = Encoder::fit(raw, fit_rows);
    let ds = encoder.transform(raw)?;
    Ok((encoder, ds))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub calib_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, calib_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_frac,
            calib_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.calib_frac, self.test_frac];
        if fracs.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidSplit(format!(
                "fractions {fracs:?} must all exceed 0"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Calib,
    Test,
}

/// Row indices of a three-way split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn tags(&self, n: usize) -> Vec<SplitTag> {
        let mut tags = vec![SplitTag::Test; n];
        for &i in &self.train {
            tags[i] = SplitTag::Train;
        }
        for &i in &self.calib {
            tags[i] = SplitTag::Calib;
        }
        tags
    }

    pub fn from_tags(tags: &[SplitTag]) -> Partition {
        let pick = |t: SplitTag| {
            tags.iter()
                .enumerate()
                .filter(|(_, &x)| x == t)
                .map(|(i, _)| i)
                .collect()
        };
        Partition {
            train: pick(SplitTag::Train),
            calib: pick(SplitTag::Calib),
            test: pick(SplitTag::Test),
        }
    }
}

/// Stratified, seeded three-way partition of `labels`.
///
/// Rows of each class are shuffled and interleaved by their within-class rank,
/// so a prefix of the interleaved order holds every class in proportion; the
/// train split is that prefix. Split sizes are `round(n * frac)` for train and
/// calibration, the remainder for test.
pub fn partition(labels: &[usize], n_classes: usize, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let n = labels.len();
    if n < 3 * n_classes {
        return Err(Error::Precondition(format!(
            "{n} rows cannot be split for {n_classes} classes (need at least {})",
            3 * n_classes
        )));
    }
    let mut rng = seed::rng(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // (rank fraction, tiebreak, row)
    let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(n);
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
        let m = rows.len() as f64;
        for (rank, &row) in rows.iter().enumerate() {
            keyed.push((rank as f64 / m, rng.random::<u64>(), row));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let n_train = (n as f64 * spec.train_frac).round() as usize;
    let n_calib = ((n as f64 * spec.calib_frac).round() as usize).min(n - n_train);
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    let mut train = order[..n_train].to_vec();
    let mut calib = order[n_train..n_train + n_calib].to_vec();
    let mut test = order[n_train + n_calib..].to_vec();

    let mut present = vec![false; n_classes];
    for &i in &train {
        present[labels[i]] = true;
    }
    if let Some(class) = present.iter().position(|p| !p) {
        return Err(Error::ClassMissingInTrain { class });
    }
    train.sort_unstable();
    calib.sort_unstable();
    test.sort_unstable();
    Ok(Partition { train, calib, test })
}

/// Splits an encoded dataset into (train, calibration, test).
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let p = partition(&ds.labels, ds.n_classes, spec)?;
    Ok((ds.subset(&p.train), ds.subset(&p.calib), ds.subset(&p.test)))
}

/// Gaussian class blobs with unit covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Scale of the per-class mean offsets, in units of the blob standard deviation.
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
}

fn default_class_sep() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(n: usize, d: usize, classes: usize) -> Self {
        SyntheticSpec {
            n,
            d,
            classes,
            class_sep: default_class_sep(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Precondition("synthetic data needs at least 2 classes".into()));
        }
        if self.n < 10 * self.classes {
            return Err(Error::Precondition(format!(
                "n = {} is below 10 rows per class ({})",
                self.n,
                10 * self.classes
            )));
        }
        if self.d < 2 {
            return Err(Error::Precondition("synthetic data needs d >= 2".into()));
        }
        if !(self.class_sep.is_finite() && self.class_sep > 0.0) {
            return Err(Error::Precondition("class_sep must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.d).map(|j| format!("x{j}")).collect()
    }

    /// Same data as [`make_synthetic`], as unencoded numeric cells with a
    /// `class` target, so it can flow through the CSV code path.
    pub fn generate_raw(&self, seed: u64) -> Result<RawDataset> {
        let ds = self.generate(seed)?;
        let mut columns: Vec<Column> = self.feature_names().into_iter().map(Column::numeric).collect();
        columns.push(Column::categorical("class"));
        Ok(RawDataset {
            schema: Schema {
                columns,
                target: "class".into(),
                positive_label: None,
            },
            cells: ds
                .features
                .iter_rows()
                .map(|r| r.iter().map(|&v| RawCell::Number(v)).collect())
                .collect(),
            labels: ds.labels,
            label_names: (0..self.classes).map(|c| c.to_string()).collect(),
        })
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = seed::rng(seed);
        let means: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.class_sep * z
                    })
                    .collect()
            })
            .collect();
        let mut data = Vec::with_capacity(self.n * self.d);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let class = i % self.classes;
            for &mu in &means[class] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + z);
            }
            labels.push(class);
        }
        Dataset::new(
            Matrix::from_vec(self.n, self.d, data)?,
            labels,
            self.feature_names(),
            self.classes,
        )
    }
}

/// Balanced Gaussian class blobs, deterministic per seed.
pub fn make_synthetic(n: usize, d: usize, classes: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(n, d, classes).generate(seed)
}

/// On-disk JSON container for an encoded dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Schema>,
    pub feature_names: Vec<String>,
    pub n_classes: usize,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tags: Option<Vec<SplitTag>>,
}

impl DatasetFile {
    pub fn new(ds: &Dataset, schema: Option<Schema>, split_tags: Option<Vec<SplitTag>>) -> Self {
        DatasetFile {
            schema,
            feature_names: ds.feature_names.clone(),
            n_classes: ds.n_classes,
            rows: ds.features.to_rows(),
            labels: ds.labels.clone(),
            split_tags,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(
            Matrix::from_rows(self.feature_names.len(), &self.rows)?,
            self.labels.clone(),
            self.feature_names.clone(),
            self.n_classes,
        )
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl Dataset {
    pub fn save_json(&self, path: impl AsRef<Path>, split_tags: Option<Vec<SplitTag>>) -> Result<()> {
        write_json(path.as_ref(), &DatasetFile::new(self, None, split_tags))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<(Dataset, Option<Vec<SplitTag>>)> {
        let file: DatasetFile = read_json(path.as_ref())?;
        Ok((file.dataset()?, file.split_tags))
    }
}
