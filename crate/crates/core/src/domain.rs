//! Tabular domain: feature schemas, examples, datasets, and the discrete
//! neighborhood structure that attacks search over.
//!
//! Categorical values are stored as indices into the declared value list and
//! numeric features take values from a finite grid, so every example has a
//! canonical integer key and the space of reachable examples is finite.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token appended to categorical value lists by [`mask_mutable`].
pub const MASK_TOKEN: &str = "__masked__";

/// Feature kind: a finite categorical value list, or a numeric range with a
/// finite grid of representable values.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Categorical { values: Vec<String> },
    Numeric { lower: f64, upper: f64, grid: Vec<f64> },
}

/// A single column of the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Whether the adversary may change this feature at all.
    pub mutable: bool,
}

impl FeatureSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    /// Number of feasible values (categories or grid points).
    pub fn cardinality(&self) -> usize {
        match &self.kind {
            FeatureKind::Categorical { values } => values.len(),
            FeatureKind::Numeric { grid, .. } => grid.len(),
        }
    }
}

/// Where per-example gain comes from: a declared numeric column, or one
/// constant for every example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GainSource {
    Column(String),
    Constant(f64),
}

/// Immutable description of a tabular problem: features, label column name,
/// and the gain source. Safe to share across threads once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
    pub label: String,
    pub gain_source: GainSource,
}

impl Schema {
    /// Builds a schema and validates it. Rejects duplicate feature names,
    /// empty or duplicated categorical value lists, non-increasing or
    /// out-of-bounds grids, and gain sources that reference a missing or
    /// non-numeric column.
    pub fn new(
        features: Vec<FeatureSpec>,
        label: impl Into<String>,
        gain_source: GainSource,
    ) -> Result<Schema> {
        let schema = Schema {
            features,
            label: label.into(),
            gain_source,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::schema("schema declares no features"));
        }
        if self.label.is_empty() {
            return Err(Error::schema("label column name is empty"));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::schema(format!("duplicate feature name '{}'", f.name)));
            }
            if f.name == self.label {
                return Err(Error::schema(format!(
                    "feature '{}' clashes with the label column",
                    f.name
                )));
            }
            match &f.kind {
                FeatureKind::Categorical { values } => {
                    if values.is_empty() {
                        return Err(Error::schema(format!(
                            "categorical feature '{}' has an empty value list",
                            f.name
                        )));
                    }
                    let mut vals = HashSet::new();
                    for v in values {
                        if !vals.insert(v.as_str()) {
                            return Err(Error::schema(format!(
                                "categorical feature '{}' repeats value '{}'",
                                f.name, v
                            )));
                        }
                    }
                }
                FeatureKind::Numeric { lower, upper, grid } => {
                    if !lower.is_finite() || !upper.is_finite() || lower > upper {
                        return Err(Error::schema(format!(
                            "numeric feature '{}' has invalid bounds [{lower}, {upper}]",
                            f.name
                        )));
                    }
                    if grid.is_empty() {
                        return Err(Error::schema(format!(
                            "numeric feature '{}' has an empty grid",
                            f.name
                        )));
                    }
                    if grid.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::schema(format!(
                            "numeric feature '{}' grid is not strictly increasing",
                            f.name
                        )));
                    }
                    if grid[0] < *lower || grid[grid.len() - 1] > *upper {
                        return Err(Error::schema(format!(
                            "numeric feature '{}' grid leaves bounds [{lower}, {upper}]",
                            f.name
                        )));
                    }
                }
            }
        }
        match &self.gain_source {
            GainSource::Constant(g) => {
                if !g.is_finite() || *g < 0.0 {
                    return Err(Error::schema(format!("constant gain {g} must be >= 0")));
                }
            }
            GainSource::Column(name) => {
                let f = self
                    .feature(name)
                    .ok_or_else(|| Error::schema(format!("gain column '{name}' is not a feature")))?;
                if f.is_categorical() {
                    return Err(Error::schema(format!("gain column '{name}' must be numeric")));
                }
            }
        }
        Ok(())
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Errors unless at least one feature is mutable. Attack entry points
    /// call this; training-only paths do not require it.
    pub fn require_mutable(&self) -> Result<()> {
        if self.features.iter().any(|f| f.mutable) {
            Ok(())
        } else {
            Err(Error::schema("no feature is mutable; nothing to attack"))
        }
    }
}

/// A single cell: categorical index into the declared value list, or a raw
/// numeric value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Cat(usize),
    Num(f64),
}

impl Value {
    pub fn as_cat(&self) -> usize {
        match self {
            Value::Cat(i) => *i,
            Value::Num(_) => panic!("numeric value where categorical expected"),
        }
    }

    pub fn as_num(&self) -> f64 {
        match self {
            Value::Num(v) => *v,
            Value::Cat(_) => panic!("categorical value where numeric expected"),
        }
    }
}

/// One labeled row. Values are aligned with `Schema::features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub values: Vec<Value>,
    pub label: u8,
}

impl Example {
    pub fn new(values: Vec<Value>, label: u8) -> Example {
        Example { values, label }
    }

    /// Copy with feature `i` replaced.
    pub fn with_value(&self, i: usize, v: Value) -> Example {
        let mut out = self.clone();
        out.values[i] = v;
        out
    }

    /// Canonical integer key for hashing and closed-set membership.
    /// Categorical cells map to their declared index, numeric cells to the
    /// bit pattern of their value (grid values are copied verbatim, so equal
    /// examples always produce equal keys).
    pub fn canonical_key(&self) -> Vec<u64> {
        self.values
            .iter()
            .map(|v| match v {
                Value::Cat(i) => *i as u64,
                Value::Num(x) => x.to_bits(),
            })
            .collect()
    }

    /// Renders feature `i` the way it appears in CSV files.
    pub fn display_value(&self, schema: &Schema, i: usize) -> String {
        match (&schema.features[i].kind, &self.values[i]) {
            (FeatureKind::Categorical { values }, Value::Cat(k)) => values[*k].clone(),
            (FeatureKind::Numeric { .. }, Value::Num(x)) => format!("{x}"),
            _ => panic!("example does not match schema at feature {i}"),
        }
    }
}

/// Serializes an example as `{feature: value, ..., label: 0|1}` for JSONL
/// records. `example_from_json` reverses it.
pub fn example_to_json(schema: &Schema, x: &Example) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (i, f) in schema.features.iter().enumerate() {
        let v = match (&f.kind, &x.values[i]) {
            (FeatureKind::Categorical { values }, Value::Cat(k)) => {
                serde_json::Value::String(values[*k].clone())
            }
            (FeatureKind::Numeric { .. }, Value::Num(n)) => serde_json::json!(n),
            _ => panic!("example does not match schema at feature {i}"),
        };
        map.insert(f.name.clone(), v);
    }
    map.insert(schema.label.clone(), serde_json::json!(x.label));
    serde_json::Value::Object(map)
}

pub fn example_from_json(schema: &Schema, v: &serde_json::Value) -> Result<Example> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::data(0, "<json>", "expected an object"))?;
    let mut values = Vec::with_capacity(schema.features.len());
    for f in &schema.features {
        let cell = obj
            .get(&f.name)
            .ok_or_else(|| Error::data(0, &f.name, "missing field"))?;
        values.push(parse_cell(f, &json_cell_to_string(cell), 0)?);
    }
    let label = obj
        .get(&schema.label)
        .and_then(|l| l.as_f64())
        .ok_or_else(|| Error::data(0, &schema.label, "missing or non-numeric label"))?;
    Ok(Example::new(values, coerce_label(label, 0, &schema.label)?))
}

fn json_cell_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// An immutable labeled table plus its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub rows: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Seeded shuffle followed by a head/tail split. `train_fraction` is
    /// rounded to a whole number of training rows.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_train = ((self.rows.len() as f64) * train_fraction).round() as usize;
        let n_train = n_train.min(self.rows.len());
        let take = |ids: &[usize]| Dataset {
            schema: self.schema.clone(),
            rows: ids.iter().map(|&i| self.rows[i].clone()).collect(),
        };
        (take(&idx[..n_train]), take(&idx[n_train..]))
    }

    /// Writes the dataset as CSV with a header row of feature names plus the
    /// label column.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut header: Vec<String> = self.schema.features.iter().map(|f| f.name.clone()).collect();
        header.push(self.schema.label.clone());
        w.write_record(&header).map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        for x in &self.rows {
            let mut rec: Vec<String> = (0..self.schema.features.len())
                .map(|i| x.display_value(&self.schema, i))
                .collect();
            rec.push(format!("{}", x.label));
            w.write_record(&rec).map_err(|e| Error::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }
}

fn coerce_label(v: f64, row: usize, column: &str) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::data(
            row,
            column,
            format!("label value {v} is not 0 or 1"),
        ))
    }
}

fn parse_cell(f: &FeatureSpec, raw: &str, row: usize) -> Result<Value> {
    let raw = raw.trim();
    match &f.kind {
        FeatureKind::Categorical { values } => match values.iter().position(|v| v == raw) {
            Some(i) => Ok(Value::Cat(i)),
            None => Err(Error::data(
                row,
                &f.name,
                format!("unknown categorical value '{raw}'"),
            )),
        },
        FeatureKind::Numeric { lower, upper, .. } => {
            let v: f64 = raw.parse().map_err(|_| {
                Error::data(row, &f.name, format!("cannot parse '{raw}' as a number"))
            })?;
            if !v.is_finite() || v < *lower || v > *upper {
                return Err(Error::data(
                    row,
                    &f.name,
                    format!("value {v} outside bounds [{lower}, {upper}]"),
                ));
            }
            Ok(Value::Num(v))
        }
    }
}

/// Loads a CSV file against a schema. The header must contain every feature
/// column and the label column; extra columns are ignored. Categorical cells
/// must match a declared value, numeric cells must lie within bounds, labels
/// must be 0 or 1, and a declared gain column must be non-negative.
pub fn load_dataset(schema: &Schema, path: &std::path::Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?
        .clone();
    let col_of = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut feature_cols = Vec::with_capacity(schema.features.len());
    for f in &schema.features {
        feature_cols.push(
            col_of(&f.name).ok_or_else(|| Error::data(0, &f.name, "column missing from header"))?,
        );
    }
    let label_col =
        col_of(&schema.label).ok_or_else(|| Error::data(0, &schema.label, "column missing from header"))?;
    let gain_col = match &schema.gain_source {
        GainSource::Column(name) => Some(schema.feature_index(name).expect("validated")),
        GainSource::Constant(_) => None,
    };

    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1; // 1-based, header is row 0
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut values = Vec::with_capacity(schema.features.len());
        for (f, &c) in schema.features.iter().zip(&feature_cols) {
            let raw = record
                .get(c)
                .ok_or_else(|| Error::data(row, &f.name, "row is short"))?;
            values.push(parse_cell(f, raw, row)?);
        }
        let raw_label = record
            .get(label_col)
            .ok_or_else(|| Error::data(row, &schema.label, "row is short"))?
            .trim();
        let label_val: f64 = raw_label.parse().map_err(|_| {
            Error::data(
                row,
                &schema.label,
                format!("cannot parse label '{raw_label}'"),
            )
        })?;
        let label = coerce_label(label_val, row, &schema.label)?;
        if let Some(gc) = gain_col {
            let g = values[gc].as_num();
            if g < 0.0 {
                return Err(Error::data(
                    row,
                    &schema.features[gc].name,
                    format!("gain value {g} is negative"),
                ));
            }
        }
        rows.push(Example::new(values, label));
    }
    Ok(Dataset {
        schema: schema.clone(),
        rows,
    })
}

/// The values feature `i` of `x` may take: just the current value when the
/// feature is immutable, otherwise every declared category or grid point.
pub fn feasible_values(schema: &Schema, x: &Example, i: usize) -> Vec<Value> {
    let f = &schema.features[i];
    if !f.mutable {
        return vec![x.values[i]];
    }
    match &f.kind {
        FeatureKind::Categorical { values } => (0..values.len()).map(Value::Cat).collect(),
        FeatureKind::Numeric { grid, .. } => grid.iter().map(|&g| Value::Num(g)).collect(),
    }
}

/// Single-feature moves from `x`: pairs of (feature index, new value) where
/// the new value is feasible and differs from the current one.
pub fn moves<'a>(schema: &'a Schema, x: &'a Example) -> impl Iterator<Item = (usize, Value)> + 'a {
    schema.features.iter().enumerate().flat_map(move |(i, f)| {
        let current = x.values[i];
        let vals: Vec<Value> = if f.mutable {
            feasible_values(schema, x, i)
        } else {
            Vec::new()
        };
        vals.into_iter()
            .filter(move |v| *v != current)
            .map(move |v| (i, v))
    })
}

/// Examples differing from `x` in exactly one feature, in feature-then-value
/// declaration order. Empty when every feature is immutable.
pub fn neighbors<'a>(schema: &'a Schema, x: &'a Example) -> impl Iterator<Item = Example> + 'a {
    moves(schema, x).map(move |(i, v)| x.with_value(i, v))
}

/// Index of the grid point nearest to `target` (raw value space). Ties pick
/// the lower grid point.
pub fn nearest_grid_index(grid: &[f64], target: f64) -> usize {
    debug_assert!(!grid.is_empty());
    let hi = grid.partition_point(|&g| g < target);
    if hi == 0 {
        return 0;
    }
    if hi == grid.len() {
        return grid.len() - 1;
    }
    let (lo, up) = (grid[hi - 1], grid[hi]);
    if (target - lo) <= (up - target) {
        hi - 1
    } else {
        hi
    }
}

/// Maps mutable features of an example to fixed sentinel values: the
/// reserved [`MASK_TOKEN`] category, or the grid point nearest 0.
#[derive(Debug, Clone)]
pub struct Masker {
    sentinels: Vec<Option<Value>>,
}

impl Masker {
    /// Builds the masked schema (mutable categorical features gain the mask
    /// token unless they already carry it) and the corresponding masker.
    /// Applying it twice changes nothing.
    pub fn new(schema: &Schema) -> (Schema, Masker) {
        let mut features = Vec::with_capacity(schema.features.len());
        let mut sentinels = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            if !f.mutable {
                features.push(f.clone());
                sentinels.push(None);
                continue;
            }
            match &f.kind {
                FeatureKind::Categorical { values } => {
                    let mut values = values.clone();
                    let idx = match values.iter().position(|v| v == MASK_TOKEN) {
                        Some(i) => i,
                        None => {
                            values.push(MASK_TOKEN.to_string());
                            values.len() - 1
                        }
                    };
                    features.push(FeatureSpec {
                        name: f.name.clone(),
                        kind: FeatureKind::Categorical { values },
                        mutable: f.mutable,
                    });
                    sentinels.push(Some(Value::Cat(idx)));
                }
                FeatureKind::Numeric { grid, .. } => {
                    let idx = nearest_grid_index(grid, 0.0);
                    features.push(f.clone());
                    sentinels.push(Some(Value::Num(grid[idx])));
                }
            }
        }
        let masked = Schema {
            features,
            label: schema.label.clone(),
            gain_source: schema.gain_source.clone(),
        };
        (masked, Masker { sentinels })
    }

    /// Replaces every mutable feature with its sentinel. The result is an
    /// example of the masked schema (categorical indices of immutable
    /// features are unchanged; mutable ones point at the mask token).
    pub fn mask_example(&self, x: &Example) -> Example {
        let values = x
            .values
            .iter()
            .zip(&self.sentinels)
            .map(|(v, s)| match s {
                Some(sentinel) => *sentinel,
                None => *v,
            })
            .collect();
        Example::new(values, x.label)
    }
}

/// Replaces all mutable feature values with fixed sentinels, yielding a
/// dataset over the masked schema. Used to train the mutability-robust
/// baseline. Idempotent.
pub fn mask_mutable(dataset: &Dataset) -> Dataset {
    let (schema, masker) = Masker::new(&dataset.schema);
    Dataset {
        schema,
        rows: dataset.rows.iter().map(|x| masker.mask_example(x)).collect(),
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Cat(i) => write!(f, "#{i}"),
            Value::Num(v) => write!(f, "{v}"),
        }
    }
}
