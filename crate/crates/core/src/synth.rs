//! Seeded synthetic data: a fraud-flavored tabular scenario whose labels
//! come from a logistic model over the declared features. Mutable features
//! carry real class signal, so attacks have levers to pull and defenses
//! have something to take away; immutable features keep the masked
//! baseline clearly above chance.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostDecl, CostSpec, GainMode, Transform};
use crate::domain::{Dataset, Example, FeatureKind, FeatureSpec, GainSource, Schema, Value};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

/// One generated feature. `weight` scales its contribution to the label
/// logit: value indices (categorical) or the value's position in its range
/// (numeric) map linearly onto [-1, 1] before weighting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthFeature {
    Categorical {
        name: String,
        values: Vec<String>,
        mutable: bool,
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<CostDecl>,
    },
    Numeric {
        name: String,
        min: f64,
        max: f64,
        #[serde(default = "default_grid_points")]
        grid_points: usize,
        mutable: bool,
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<CostDecl>,
    },
}

fn default_grid_points() -> usize {
    20
}

impl SynthFeature {
    fn name(&self) -> &str {
        match self {
            SynthFeature::Categorical { name, .. } | SynthFeature::Numeric { name, .. } => name,
        }
    }
}

/// Generator configuration. The default is the benchmark scenario used by
/// the evaluation harness and the CLI when no config file is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_rows")]
    pub rows: usize,
    /// Multiplier on the label logit; larger values make classes more
    /// separable.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    #[serde(default = "default_features")]
    pub features: Vec<SynthFeature>,
    #[serde(default = "default_label")]
    pub label: String,
    /// Gain column name (must be a declared numeric feature), or none to
    /// use `gain_constant` for every example.
    #[serde(default = "default_gain_column")]
    pub gain_column: Option<String>,
    #[serde(default = "default_gain_constant")]
    pub gain_constant: f64,
    #[serde(default)]
    pub gain_mode: GainMode,
}

fn default_rows() -> usize {
    2000
}

fn default_separation() -> f64 {
    1.5
}

fn default_label() -> String {
    "fraud".into()
}

fn default_gain_column() -> Option<String> {
    Some("amount".into())
}

fn default_gain_constant() -> f64 {
    1.0
}

fn default_features() -> Vec<SynthFeature> {
    vec![
        SynthFeature::Categorical {
            name: "device".into(),
            values: vec!["android".into(), "ios".into(), "web".into(), "pos".into()],
            mutable: true,
            weight: 1.0,
            cost: Some(CostDecl::Uniform { uniform: 1.0 }),
        },
        SynthFeature::Categorical {
            name: "email".into(),
            values: vec![
                "gmail".into(),
                "yahoo".into(),
                "proton".into(),
                "corp".into(),
                "edu".into(),
            ],
            mutable: true,
            weight: 0.8,
            cost: Some(CostDecl::Uniform { uniform: 2.0 }),
        },
        SynthFeature::Numeric {
            name: "hour".into(),
            min: 0.0,
            max: 1.0,
            grid_points: 24,
            mutable: true,
            weight: 0.5,
            cost: Some(CostDecl::Numeric {
                inc: 6.0,
                dec: 6.0,
                transform: Transform::Identity,
                k: 1.0,
            }),
        },
        SynthFeature::Numeric {
            name: "credit_score".into(),
            min: 0.05,
            max: 0.95,
            grid_points: 19,
            mutable: true,
            weight: -0.8,
            cost: Some(CostDecl::Numeric {
                inc: 1.0,
                dec: 1.0,
                transform: Transform::Log2Complement,
                k: 2.0,
            }),
        },
        SynthFeature::Numeric {
            name: "tenure".into(),
            min: 0.0,
            max: 1.0,
            grid_points: 21,
            mutable: false,
            weight: 1.2,
            cost: None,
        },
        SynthFeature::Categorical {
            name: "history".into(),
            values: vec!["none".into(), "good".into(), "excellent".into()],
            mutable: false,
            weight: 1.0,
            cost: None,
        },
        SynthFeature::Numeric {
            name: "amount".into(),
            min: 0.6,
            max: 4.6,
            grid_points: 20,
            mutable: false,
            weight: 0.3,
            cost: None,
        },
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: default_rows(),
            class_separation: default_separation(),
            features: default_features(),
            label: default_label(),
            gain_column: default_gain_column(),
            gain_constant: default_gain_constant(),
            gain_mode: GainMode::default(),
        }
    }
}

fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![min];
    }
    (0..n)
        .map(|i| min + (max - min) * (i as f64) / ((n - 1) as f64))
        .collect()
}

/// Position of index `i` among `n` values, mapped onto [-1, 1].
fn centered(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * (i as f64) / ((n - 1) as f64)
    }
}

/// Builds the scenario (schema + costs + gain) described by a config and
/// samples `rows` labeled examples from it. Fully determined by the seed.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<(Scenario, Dataset)> {
    if cfg.rows == 0 {
        return Err(Error::config("synthetic config requests zero rows"));
    }
    let mut features = Vec::with_capacity(cfg.features.len());
    let mut decls = Vec::with_capacity(cfg.features.len());
    for f in &cfg.features {
        match f {
            SynthFeature::Categorical {
                name,
                values,
                mutable,
                cost,
                ..
            } => {
                features.push(FeatureSpec {
                    name: name.clone(),
                    kind: FeatureKind::Categorical {
                        values: values.clone(),
                    },
                    mutable: *mutable,
                });
                decls.push(cost.clone());
            }
            SynthFeature::Numeric {
                name,
                min,
                max,
                grid_points,
                mutable,
                cost,
                ..
            } => {
                if *grid_points < 2 {
                    return Err(Error::config(format!(
                        "numeric feature '{name}' needs at least 2 grid points"
                    )));
                }
                features.push(FeatureSpec {
                    name: name.clone(),
                    kind: FeatureKind::Numeric {
                        lower: *min,
                        upper: *max,
                        grid: linspace(*min, *max, *grid_points),
                    },
                    mutable: *mutable,
                });
                decls.push(cost.clone());
            }
        }
    }
    let gain_source = match &cfg.gain_column {
        Some(col) => {
            if !cfg.features.iter().any(|f| f.name() == col) {
                return Err(Error::config(format!(
                    "gain column '{col}' is not a generated feature"
                )));
            }
            GainSource::Column(col.clone())
        }
        None => {
            if !cfg.gain_constant.is_finite() || cfg.gain_constant < 0.0 {
                return Err(Error::config(format!(
                    "constant gain {} must be finite and >= 0",
                    cfg.gain_constant
                )));
            }
            GainSource::Constant(cfg.gain_constant)
        }
    };
    let schema = Schema::new(features, cfg.label.clone(), gain_source)?;
    let costs = CostSpec::compile(&schema, &decls)?;
    let scenario = Scenario::new(schema.clone(), costs, cfg.gain_mode);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(cfg.rows);
    for _ in 0..cfg.rows {
        let mut values = Vec::with_capacity(cfg.features.len());
        let mut logit = 0.0;
        for (f, spec) in cfg.features.iter().zip(&schema.features) {
            match (f, &spec.kind) {
                (SynthFeature::Categorical { weight, .. }, FeatureKind::Categorical { values: vs }) => {
                    let k = rng.gen_range(0..vs.len());
                    logit += weight * centered(k, vs.len());
                    values.push(Value::Cat(k));
                }
                (SynthFeature::Numeric { weight, .. }, FeatureKind::Numeric { grid, .. }) => {
                    let k = rng.gen_range(0..grid.len());
                    logit += weight * centered(k, grid.len());
                    values.push(Value::Num(grid[k]));
                }
                _ => unreachable!(),
            }
        }
        let p = 1.0 / (1.0 + (-cfg.class_separation * logit).exp());
        let label = u8::from(rng.gen::<f64>() < p);
        rows.push(Example::new(values, label));
    }
    Ok((scenario, Dataset { schema, rows }))
}
