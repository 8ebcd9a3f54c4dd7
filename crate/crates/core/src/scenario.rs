//! On-disk schema format. One JSON file declares the features (with their
//! costs), the label column, and the gain source; loading it yields the
//! validated triple used everywhere else: `Schema` + `CostSpec` + `GainSpec`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{CostDecl, CostSpec, GainMode, GainSpec};
use crate::domain::{FeatureKind, FeatureSpec, GainSource, Schema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SchemaFile {
    pub features: Vec<FeatureDecl>,
    pub label: String,
    pub gain: GainDecl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: KindDecl,
    pub mutable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostDecl>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KindDecl {
    Categorical { values: Vec<String> },
    Numeric { min: f64, max: f64, grid: Vec<f64> },
}

/// Gain section: `{"column": name, "mode": "constant"|"variable"}` or
/// `{"constant": value}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainDecl {
    Column {
        column: String,
        #[serde(default)]
        mode: GainMode,
    },
    Constant { constant: f64 },
}

/// A fully validated problem description: schema, cost model, gain model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub schema: Schema,
    pub costs: CostSpec,
    pub gain: GainSpec,
}

impl Scenario {
    /// Assembles a scenario from parts, deriving the gain source from the
    /// schema so the two can never disagree.
    pub fn new(schema: Schema, costs: CostSpec, mode: GainMode) -> Scenario {
        let gain = GainSpec {
            source: schema.gain_source.clone(),
            mode,
        };
        Scenario {
            schema,
            costs,
            gain,
        }
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Scenario::from_json_str(&text, &path.display().to_string())
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Scenario> {
        let file: SchemaFile = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_string(),
            source: e,
        })?;
        let (gain_source, mode) = match &file.gain {
            GainDecl::Column { column, mode } => (GainSource::Column(column.clone()), *mode),
            GainDecl::Constant { constant } => (GainSource::Constant(*constant), GainMode::Constant),
        };
        let mut features = Vec::with_capacity(file.features.len());
        let mut decls = Vec::with_capacity(file.features.len());
        for f in &file.features {
            let kind = match &f.kind {
                KindDecl::Categorical { values } => FeatureKind::Categorical {
                    values: values.clone(),
                },
                KindDecl::Numeric { min, max, grid } => FeatureKind::Numeric {
                    lower: *min,
                    upper: *max,
                    grid: grid.clone(),
                },
            };
            features.push(FeatureSpec {
                name: f.name.clone(),
                kind,
                mutable: f.mutable,
            });
            decls.push(f.cost.clone());
        }
        let schema = Schema::new(features, file.label.clone(), gain_source)?;
        let costs = CostSpec::compile(&schema, &decls)?;
        Ok(Scenario::new(schema, costs, mode))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let decls = self.costs.to_decls(&self.schema);
        let features = self
            .schema
            .features
            .iter()
            .zip(decls)
            .map(|(f, cost)| FeatureDecl {
                name: f.name.clone(),
                kind: match &f.kind {
                    FeatureKind::Categorical { values } => KindDecl::Categorical {
                        values: values.clone(),
                    },
                    FeatureKind::Numeric { lower, upper, grid } => KindDecl::Numeric {
                        min: *lower,
                        max: *upper,
                        grid: grid.clone(),
                    },
                },
                mutable: f.mutable,
                cost: Some(cost),
            })
            .collect();
        let gain = match (&self.gain.source, self.gain.mode) {
            (GainSource::Column(c), mode) => GainDecl::Column {
                column: c.clone(),
                mode,
            },
            (GainSource::Constant(g), _) => GainDecl::Constant { constant: *g },
        };
        serde_json::to_value(SchemaFile {
            features,
            label: self.schema.label.clone(),
            gain,
        })
        .expect("scenario serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Loads just the schema part of a scenario file.
pub fn load_schema(path: &Path) -> Result<Schema> {
    Scenario::load(path).map(|s| s.schema)
}
