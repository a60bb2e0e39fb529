//! Turning raw rows into index vectors.
//!
//! Numeric columns are discretized into `bin_k` categories, every category
//! is assigned a dense index through a [`FeatureDictionary`], and unseen
//! categories fall back to a per-feature `UNK` slot.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Name of the reserved slot appended to every feature in per-feature mode.
pub const UNK: &str = "<unk>";

/// Threshold used to binarize 8-bit pixels.
pub const PIXEL_THRESHOLD: u8 = 128;

/// Default number of quantile bins for numeric features.
pub const DEFAULT_QUANTILE_BINS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// The trimmed cell text is the category.
    None,
    Thresholds(Vec<f64>),
    Quantile {
        bins: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binning: Option<Binning>,
}

impl FeatureSpec {
    /// Binning after defaults: numeric columns get quantile bins, categorical
    /// columns are taken verbatim.
    pub fn effective_binning(&self) -> Binning {
        match (&self.binning, self.kind) {
            (Some(b), _) => b.clone(),
            (None, FeatureKind::Numeric) => Binning::Quantile {
                bins: DEFAULT_QUANTILE_BINS,
            },
            (None, FeatureKind::Categorical) => Binning::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub task: TaskKind,
    /// Collapse a numeric label to `0` (value 0) and `1` (value > 0).
    #[serde(default)]
    pub binarize: bool,
    /// Fixed class order; discovered from training data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub target: TargetSpec,
}

impl FeatureSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("schema lists no features".into()));
        }
        let mut names = HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name {:?}", f.name)));
            }
            if f.name == self.target.name {
                return Err(Error::Schema(format!("{:?} is both a feature and the target", f.name)));
            }
            match (f.kind, f.effective_binning()) {
                (FeatureKind::Categorical, Binning::Thresholds(_) | Binning::Quantile { .. }) => {
                    return Err(Error::Schema(format!(
                        "categorical feature {:?} cannot be binned",
                        f.name
                    )));
                }
                (_, Binning::Thresholds(t)) => {
                    if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Schema(format!(
                            "thresholds of {:?} must be finite and strictly increasing",
                            f.name
                        )));
                    }
                }
                (_, Binning::Quantile { bins }) if bins < 2 => {
                    return Err(Error::Schema(format!("{:?} needs at least 2 quantile bins", f.name)));
                }
                _ => {}
            }
        }
        if self.target.task == TaskKind::Regression && (self.target.binarize || self.target.classes.is_some()) {
            return Err(Error::Schema(
                "regression targets take no classes or binarization".into(),
            ));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }
}

/// `bin_k` where `k` counts the thresholds at or below `value`, i.e. the
/// half-open intervals `(-inf, t1), [t1, t2), ...`.
pub fn discretize(value: f64, thresholds: &[f64]) -> Result<String> {
    if value.is_nan() {
        return Err(Error::Data("cannot discretize NaN".into()));
    }
    let k = thresholds.partition_point(|&t| t <= value);
    Ok(format!("bin_{k}"))
}

/// Interior quantile cut points (linear interpolation between order
/// statistics), with duplicates dropped so they stay strictly increasing.
pub fn quantile_thresholds(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Data("quantiles of an empty column".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("quantiles of a column containing NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let mut cuts: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for k in 1..bins {
        let pos = last * k as f64 / bins as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let q = sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64);
        if cuts.last().is_none_or(|&prev| q > prev) {
            cuts.push(q);
        }
    }
    Ok(cuts)
}

/// Fitted per-feature mapping from a cell to its category string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretizer {
    Verbatim,
    Thresholds(Vec<f64>),
}

impl Discretizer {
    pub fn category(&self, cell: &str) -> Result<String> {
        match self {
            Discretizer::Verbatim => Ok(cell.trim().to_string()),
            Discretizer::Thresholds(t) => discretize(parse_number(cell)?, t),
        }
    }
}

pub(crate) fn parse_number(cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("{cell:?} is not a number")))?;
    if v.is_nan() {
        return Err(Error::Data("NaN cell".into()));
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryMode {
    /// Each feature owns a disjoint index range ending in its `UNK` slot.
    PerFeature,
    /// One vocabulary for all features, no `UNK`.
    Shared,
}

/// Dense index assignment for (feature, category) pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawDictionary", into = "RawDictionary")]
pub struct FeatureDictionary {
    mode: DictionaryMode,
    n_features: usize,
    /// One list per feature in per-feature mode, a single list in shared mode.
    vocab: Vec<Vec<String>>,
    offsets: Vec<usize>,
    lookup: Vec<HashMap<String, u32>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawDictionary {
    mode: DictionaryMode,
    n_features: usize,
    vocab: Vec<Vec<String>>,
}

impl From<FeatureDictionary> for RawDictionary {
    fn from(d: FeatureDictionary) -> Self {
        Self {
            mode: d.mode,
            n_features: d.n_features,
            vocab: d.vocab,
        }
    }
}

impl TryFrom<RawDictionary> for FeatureDictionary {
    type Error = Error;

    fn try_from(raw: RawDictionary) -> Result<Self> {
        FeatureDictionary::from_vocab(raw.mode, raw.n_features, raw.vocab)
    }
}

impl PartialEq for FeatureDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.n_features == other.n_features && self.vocab == other.vocab
    }
}

impl FeatureDictionary {
    fn from_vocab(mode: DictionaryMode, n_features: usize, vocab: Vec<Vec<String>>) -> Result<Self> {
        let expected = match mode {
            DictionaryMode::PerFeature => n_features,
            DictionaryMode::Shared => 1,
        };
        if vocab.len() != expected || n_features == 0 {
            return Err(Error::Data(format!(
                "{mode:?} dictionary over {n_features} features needs {expected} vocabularies, got {}",
                vocab.len()
            )));
        }
        let mut offsets = Vec::with_capacity(vocab.len());
        let mut lookup = Vec::with_capacity(vocab.len());
        let mut next = 0usize;
        for (f, cats) in vocab.iter().enumerate() {
            offsets.push(next);
            let mut map = HashMap::with_capacity(cats.len());
            for (i, c) in cats.iter().enumerate() {
                if map.insert(c.clone(), (next + i) as u32).is_some() {
                    return Err(Error::Data(format!("category {c:?} listed twice for vocabulary {f}")));
                }
            }
            next += cats.len();
            if mode == DictionaryMode::PerFeature {
                next += 1;
            }
            lookup.push(map);
        }
        Ok(Self {
            mode,
            n_features,
            vocab,
            offsets,
            lookup,
        })
    }

    /// Builds the dictionary from category strings of training rows:
    /// features in column order, categories in first-appearance order.
    pub fn build<R: AsRef<[String]>>(rows: &[R], mode: DictionaryMode) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Data("cannot build a dictionary from zero rows".into()));
        };
        let n_features = first.as_ref().len();
        let n_vocab = if mode == DictionaryMode::Shared { 1 } else { n_features };
        let mut vocab: Vec<Vec<String>> = vec![Vec::new(); n_vocab];
        let mut seen: Vec<HashSet<String>> = vec![HashSet::new(); n_vocab];
        for (r, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_features {
                return Err(Error::Data(format!(
                    "row {r} has {} cells, expected {n_features}",
                    row.len()
                )));
            }
            for (f, cat) in row.iter().enumerate() {
                let v = if mode == DictionaryMode::Shared { 0 } else { f };
                if mode == DictionaryMode::PerFeature && cat == UNK {
                    return Err(Error::Data(format!("row {r}, feature {f}: {UNK:?} is reserved")));
                }
                if seen[v].insert(cat.clone()) {
                    vocab[v].push(cat.clone());
                }
            }
        }
        Self::from_vocab(mode, n_features, vocab)
    }

    /// Shared two-token vocabulary used for binarized images.
    pub fn binary_shared(n_features: usize) -> Self {
        Self::from_vocab(DictionaryMode::Shared, n_features, vec![vec!["0".into(), "1".into()]])
            .expect("valid by construction")
    }

    pub fn mode(&self) -> DictionaryMode {
        self.mode
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Total number of embedding rows `V`.
    pub fn vocab_size(&self) -> usize {
        match self.mode {
            DictionaryMode::Shared => self.vocab[0].len(),
            DictionaryMode::PerFeature => self.offsets[self.n_features - 1] + self.vocab[self.n_features - 1].len() + 1,
        }
    }

    fn slot(&self, feature: usize) -> usize {
        match self.mode {
            DictionaryMode::Shared => 0,
            DictionaryMode::PerFeature => feature,
        }
    }

    /// Categories known for a feature, excluding `UNK`.
    pub fn categories(&self, feature: usize) -> &[String] {
        &self.vocab[self.slot(feature)]
    }

    pub fn unk(&self, feature: usize) -> Option<u32> {
        match self.mode {
            DictionaryMode::Shared => None,
            DictionaryMode::PerFeature => Some((self.offsets[feature] + self.vocab[feature].len()) as u32),
        }
    }

    pub fn lookup(&self, feature: usize, category: &str) -> Option<u32> {
        self.lookup[self.slot(feature)].get(category).copied()
    }

    /// Index of a category, falling back to the feature's `UNK` slot.
    pub fn index(&self, feature: usize, category: &str) -> Result<u32> {
        if feature >= self.n_features {
            return Err(Error::Index(format!("feature {feature} of {}", self.n_features)));
        }
        self.lookup(feature, category)
            .or_else(|| self.unk(feature))
            .ok_or_else(|| {
                Error::Data(format!(
                    "feature {feature}: unseen category {category:?} in a shared vocabulary"
                ))
            })
    }

    /// Inverse of [`index`](Self::index) for a given feature.
    pub fn decode(&self, feature: usize, index: u32) -> Option<&str> {
        let slot = self.slot(feature);
        let local = (index as usize).checked_sub(self.offsets[slot])?;
        let cats = &self.vocab[slot];
        match local.cmp(&cats.len()) {
            std::cmp::Ordering::Less => Some(&cats[local]),
            std::cmp::Ordering::Equal if self.mode == DictionaryMode::PerFeature => Some(UNK),
            _ => None,
        }
    }

    /// Position of an index inside its feature's range mapped to `[0, 1]`,
    /// with `UNK` at 1. This is the numeric input of the MLP baseline.
    pub fn scaled(&self, feature: usize, index: u32) -> f64 {
        let slot = self.slot(feature);
        let local = index as usize - self.offsets[slot];
        let denom = match self.mode {
            DictionaryMode::PerFeature => self.vocab[slot].len(),
            DictionaryMode::Shared => self.vocab[slot].len().saturating_sub(1),
        };
        if denom == 0 {
            0.0
        } else {
            local as f64 / denom as f64
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let raw = RawDictionary::from(self.clone());
        let bytes = serde_json::to_vec(&raw).expect("dictionary serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Target::Class(c) => c as f64,
            Target::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub indices: Vec<u32>,
    pub target: Target,
}

impl EncodedSample {
    pub fn indices_usize(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| i as usize).collect()
    }
}

/// One raw record: feature cells in schema order plus the target cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRow {
    pub cells: Vec<String>,
    pub target: String,
}

/// Binarized pixel indices: `1` at or above [`PIXEL_THRESHOLD`], else `0`.
pub fn binarize_pixels(pixels: &[u8]) -> Vec<u32> {
    pixels.iter().map(|&p| u32::from(p >= PIXEL_THRESHOLD)).collect()
}

/// Discretizers, dictionary and class list fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub schema: FeatureSchema,
    pub discretizers: Vec<Discretizer>,
    pub dictionary: FeatureDictionary,
    /// Class names by id; empty for regression.
    pub classes: Vec<String>,
}

impl Encoder {
    pub fn fit(schema: &FeatureSchema, rows: &[RawRow], mode: DictionaryMode) -> Result<Self> {
        schema.validate()?;
        if rows.is_empty() {
            return Err(Error::Data("cannot fit an encoder on zero rows".into()));
        }
        let n = schema.n_features();
        for (r, row) in rows.iter().enumerate() {
            check_arity(r, row, n)?;
        }
        let mut discretizers = Vec::with_capacity(n);
        for (f, spec) in schema.features.iter().enumerate() {
            discretizers.push(match spec.effective_binning() {
                Binning::None => Discretizer::Verbatim,
                Binning::Thresholds(t) => Discretizer::Thresholds(t),
                Binning::Quantile { bins } => {
                    let col = rows
                        .iter()
                        .enumerate()
                        .map(|(r, row)| parse_number(&row.cells[f]).map_err(|e| at(e, r, &spec.name)))
                        .collect::<Result<Vec<f64>>>()?;
                    Discretizer::Thresholds(quantile_thresholds(&col, bins)?)
                }
            });
        }
        let cats = rows
            .iter()
            .enumerate()
            .map(|(r, row)| categorize(schema, &discretizers, r, row))
            .collect::<Result<Vec<_>>>()?;
        let dictionary = FeatureDictionary::build(&cats, mode)?;
        let classes = match schema.target.task {
            TaskKind::Regression => Vec::new(),
            TaskKind::Classification => fit_classes(&schema.target, rows)?,
        };
        Ok(Self {
            schema: schema.clone(),
            discretizers,
            dictionary,
            classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn encode(&self, row: &RawRow) -> Result<EncodedSample> {
        self.encode_at(0, row)
    }

    fn encode_at(&self, r: usize, row: &RawRow) -> Result<EncodedSample> {
        check_arity(r, row, self.schema.n_features())?;
        let cats = categorize(&self.schema, &self.discretizers, r, row)?;
        let indices = cats
            .iter()
            .enumerate()
            .map(|(f, c)| self.dictionary.index(f, c))
            .collect::<Result<Vec<u32>>>()?;
        let target = self
            .encode_target(&row.target)
            .map_err(|e| at(e, r, &self.schema.target.name))?;
        Ok(EncodedSample { indices, target })
    }

    pub fn encode_all(&self, rows: &[RawRow]) -> Result<Vec<EncodedSample>> {
        rows.iter().enumerate().map(|(r, row)| self.encode_at(r, row)).collect()
    }

    pub fn encode_target(&self, cell: &str) -> Result<Target> {
        match self.schema.target.task {
            TaskKind::Regression => Ok(Target::Value(parse_number(cell)?)),
            TaskKind::Classification => {
                let name = class_name(&self.schema.target, cell)?;
                self.classes
                    .iter()
                    .position(|c| *c == name)
                    .map(Target::Class)
                    .ok_or_else(|| Error::Data(format!("unknown class {name:?}")))
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn at(e: Error, row: usize, column: &str) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("row {row}, column {column:?}: {msg}")),
        other => other,
    }
}

fn check_arity(r: usize, row: &RawRow, n: usize) -> Result<()> {
    if row.cells.len() != n {
        return Err(Error::Data(format!(
            "row {r} has {} feature cells, schema expects {n}",
            row.cells.len()
        )));
    }
    Ok(())
}

fn categorize(schema: &FeatureSchema, disc: &[Discretizer], r: usize, row: &RawRow) -> Result<Vec<String>> {
    row.cells
        .iter()
        .zip(disc)
        .zip(&schema.features)
        .map(|((cell, d), spec)| d.category(cell).map_err(|e| at(e, r, &spec.name)))
        .collect()
}

/// Class label of a raw target cell after optional binarization.
pub fn class_name(target: &TargetSpec, cell: &str) -> Result<String> {
    if target.binarize {
        let v = parse_number(cell)?;
        Ok(if v > 0.0 { "1" } else { "0" }.to_string())
    } else {
        Ok(cell.trim().to_string())
    }
}

fn fit_classes(target: &TargetSpec, rows: &[RawRow]) -> Result<Vec<String>> {
    if let Some(c) = &target.classes {
        return Ok(c.clone());
    }
    if target.binarize {
        return Ok(vec!["0".into(), "1".into()]);
    }
    let mut names: Vec<String> = rows
        .iter()
        .map(|r| r.target.trim().to_string())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    // numeric labels sort by value, anything else lexically
    let numeric: Option<Vec<f64>> = names.iter().map(|n| n.parse().ok()).collect();
    if numeric.is_some() {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    } else {
        names.sort();
    }
    Ok(names)
}
