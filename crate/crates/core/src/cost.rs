//! Adversarial threat model: per-feature modification costs, per-example
//! gain, and the utility bookkeeping that budget modes are built on.
//!
//! Costs are modular: the cost of moving between two examples is the sum of
//! independent per-feature terms. Categorical features price each ordered
//! value pair (uniform or an explicit table, asymmetry allowed); numeric
//! features price the absolute difference of transformed values with
//! direction-dependent rates.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::domain::{Example, FeatureKind, GainSource, Schema, Value};
use crate::encoding::Encoder;
use crate::error::{Error, Result};

/// Monotone reparameterization applied to a numeric feature before both
/// encoding and cost measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// log2(1 - x); defined for x < 1. Makes cost proportional to doublings
    /// of the complement, e.g. pricing how far a rate is pushed toward 1.
    Log2Complement,
    /// ln(x); defined for x > 0.
    #[serde(rename = "ln")]
    NaturalLog,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log2Complement => (1.0 - x).log2(),
            Transform::NaturalLog => x.ln(),
        }
    }

    pub fn invert(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Log2Complement => 1.0 - (2f64).powf(v),
            Transform::NaturalLog => v.exp(),
        }
    }

    /// Domain check for raw values.
    pub fn in_domain(self, x: f64) -> bool {
        match self {
            Transform::Identity => x.is_finite(),
            Transform::Log2Complement => x < 1.0,
            Transform::NaturalLog => x > 0.0,
        }
    }

    fn domain_description(self) -> &'static str {
        match self {
            Transform::Identity => "any finite value",
            Transform::Log2Complement => "values < 1",
            Transform::NaturalLog => "values > 0",
        }
    }
}

/// Cost of changing a categorical feature between declared values.
#[derive(Debug, Clone, PartialEq)]
pub enum CategoricalCost {
    /// Same positive cost for every change.
    Uniform(f64),
    /// `table[from][to]`, zero diagonal, positive elsewhere. Need not be
    /// symmetric.
    Table(Vec<Vec<f64>>),
}

impl CategoricalCost {
    pub fn cost(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return 0.0;
        }
        match self {
            CategoricalCost::Uniform(c) => *c,
            CategoricalCost::Table(t) => t[from][to],
        }
    }
}

/// Cost of changing a numeric feature: `K * rate * |psi(b) - psi(a)|` where
/// the rate is `inc` when the transformed value increases and `dec` when it
/// decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericCost {
    pub inc: f64,
    pub dec: f64,
    pub k: f64,
    pub transform: Transform,
}

impl Default for NumericCost {
    fn default() -> Self {
        NumericCost {
            inc: 1.0,
            dec: 1.0,
            k: 1.0,
            transform: Transform::Identity,
        }
    }
}

impl NumericCost {
    /// Effective rate per unit of transformed-value increase.
    pub fn rate_up(&self) -> f64 {
        self.k * self.inc
    }

    /// Effective rate per unit of transformed-value decrease.
    pub fn rate_down(&self) -> f64 {
        self.k * self.dec
    }

    fn cost_checked(&self, a: f64, b: f64) -> std::result::Result<f64, f64> {
        for v in [a, b] {
            if !self.transform.in_domain(v) {
                return Err(v);
            }
        }
        let d = self.transform.apply(b) - self.transform.apply(a);
        let rate = if d >= 0.0 { self.rate_up() } else { self.rate_down() };
        Ok(rate * d.abs())
    }
}

/// Per-feature cost, aligned with the schema's feature list.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureCost {
    Categorical(CategoricalCost),
    Numeric(NumericCost),
}

/// The adversary's full cost model for one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub per_feature: Vec<FeatureCost>,
}

/// How a cost appears in the schema JSON. Numeric fields all default (rates
/// and K to 1, transform to identity), so `{}` is a valid numeric cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostDecl {
    Uniform {
        uniform: f64,
    },
    Table {
        table: BTreeMap<String, BTreeMap<String, f64>>,
    },
    Numeric {
        #[serde(default = "one")]
        inc: f64,
        #[serde(default = "one")]
        dec: f64,
        #[serde(default)]
        transform: Transform,
        #[serde(rename = "K", default = "one")]
        k: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn positive(feature: &str, what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::cost(feature, format!("{what} must be positive, got {v}")))
    }
}

impl CostSpec {
    /// Compiles raw declarations against a schema. Missing declarations
    /// default to uniform cost 1 (categorical) or unit identity rates
    /// (numeric). Tables must cover every ordered pair of declared values
    /// with positive entries (an explicit diagonal must be zero), and a
    /// numeric transform must be defined over the feature's whole range.
    pub fn compile(schema: &Schema, decls: &[Option<CostDecl>]) -> Result<CostSpec> {
        if decls.len() != schema.features.len() {
            return Err(Error::schema("cost declarations do not match feature count"));
        }
        let mut per_feature = Vec::with_capacity(decls.len());
        for (f, decl) in schema.features.iter().zip(decls) {
            let compiled = match (&f.kind, decl) {
                (FeatureKind::Categorical { .. }, None) => {
                    FeatureCost::Categorical(CategoricalCost::Uniform(1.0))
                }
                (FeatureKind::Categorical { .. }, Some(CostDecl::Uniform { uniform })) => {
                    positive(&f.name, "uniform cost", *uniform)?;
                    FeatureCost::Categorical(CategoricalCost::Uniform(*uniform))
                }
                (FeatureKind::Categorical { values }, Some(CostDecl::Table { table })) => {
                    let mut t = vec![vec![0.0; values.len()]; values.len()];
                    for (from_name, row) in table {
                        let from = values.iter().position(|v| v == from_name).ok_or_else(|| {
                            Error::cost(&f.name, format!("table row '{from_name}' is not a declared value"))
                        })?;
                        for (to_name, &c) in row {
                            let to = values.iter().position(|v| v == to_name).ok_or_else(|| {
                                Error::cost(&f.name, format!("table entry '{to_name}' is not a declared value"))
                            })?;
                            if from == to {
                                if c != 0.0 {
                                    return Err(Error::cost(
                                        &f.name,
                                        format!("diagonal entry '{from_name}' must cost 0, got {c}"),
                                    ));
                                }
                            } else {
                                positive(&f.name, &format!("cost '{from_name}' -> '{to_name}'"), c)?;
                            }
                            t[from][to] = c;
                        }
                    }
                    for a in 0..values.len() {
                        for b in 0..values.len() {
                            if a != b && t[a][b] == 0.0 {
                                return Err(Error::cost(
                                    &f.name,
                                    format!(
                                        "table is missing '{}' -> '{}'",
                                        values[a], values[b]
                                    ),
                                ));
                            }
                        }
                    }
                    FeatureCost::Categorical(CategoricalCost::Table(t))
                }
                (FeatureKind::Categorical { .. }, Some(CostDecl::Numeric { .. })) => {
                    return Err(Error::cost(&f.name, "numeric cost on a categorical feature"));
                }
                (FeatureKind::Numeric { .. }, Some(CostDecl::Uniform { .. }))
                | (FeatureKind::Numeric { .. }, Some(CostDecl::Table { .. })) => {
                    return Err(Error::cost(&f.name, "categorical cost on a numeric feature"));
                }
                (FeatureKind::Numeric { lower, upper, .. }, decl) => {
                    let nc = match decl {
                        Some(CostDecl::Numeric { inc, dec, transform, k }) => NumericCost {
                            inc: *inc,
                            dec: *dec,
                            k: *k,
                            transform: *transform,
                        },
                        None => NumericCost::default(),
                        _ => unreachable!(),
                    };
                    positive(&f.name, "inc rate", nc.inc)?;
                    positive(&f.name, "dec rate", nc.dec)?;
                    positive(&f.name, "K", nc.k)?;
                    for bound in [*lower, *upper] {
                        if !nc.transform.in_domain(bound) {
                            return Err(Error::cost(
                                &f.name,
                                format!(
                                    "transform {:?} undefined at bound {bound} (needs {})",
                                    nc.transform,
                                    nc.transform.domain_description()
                                ),
                            ));
                        }
                    }
                    FeatureCost::Numeric(nc)
                }
            };
            per_feature.push(compiled);
        }
        Ok(CostSpec { per_feature })
    }

    /// One declaration per feature, suitable for writing back to schema JSON.
    pub fn to_decls(&self, schema: &Schema) -> Vec<CostDecl> {
        self.per_feature
            .iter()
            .zip(&schema.features)
            .map(|(c, f)| match c {
                FeatureCost::Categorical(CategoricalCost::Uniform(u)) => CostDecl::Uniform { uniform: *u },
                FeatureCost::Categorical(CategoricalCost::Table(t)) => {
                    let values = match &f.kind {
                        FeatureKind::Categorical { values } => values,
                        _ => unreachable!(),
                    };
                    let mut table = BTreeMap::new();
                    for (a, row) in t.iter().enumerate() {
                        let mut out = BTreeMap::new();
                        for (b, &cost) in row.iter().enumerate() {
                            if a != b {
                                out.insert(values[b].clone(), cost);
                            }
                        }
                        table.insert(values[a].clone(), out);
                    }
                    CostDecl::Table { table }
                }
                FeatureCost::Numeric(nc) => CostDecl::Numeric {
                    inc: nc.inc,
                    dec: nc.dec,
                    transform: nc.transform,
                    k: nc.k,
                },
            })
            .collect()
    }

    /// Cost of changing feature `i` from value `a` to value `b`.
    pub fn feature_cost(&self, schema: &Schema, i: usize, a: &Value, b: &Value) -> Result<f64> {
        match (&self.per_feature[i], a, b) {
            (FeatureCost::Categorical(c), Value::Cat(x), Value::Cat(y)) => Ok(c.cost(*x, *y)),
            (FeatureCost::Numeric(nc), Value::Num(x), Value::Num(y)) => {
                nc.cost_checked(*x, *y).map_err(|v| Error::TransformDomain {
                    feature: schema.features[i].name.clone(),
                    value: v,
                    reason: format!("outside {}", nc.transform.domain_description()),
                })
            }
            _ => Err(Error::cost(
                &schema.features[i].name,
                "value kind does not match cost kind",
            )),
        }
    }

    /// Cheapest change of categorical feature `i` away from value `from`.
    /// Errors when the feature is immutable, numeric, or has nowhere to go.
    pub fn min_categorical_change_cost(
        &self,
        schema: &Schema,
        i: usize,
        from: usize,
    ) -> Result<f64> {
        let f = &schema.features[i];
        if !f.mutable {
            return Err(Error::cost(&f.name, "feature is immutable; no feasible change"));
        }
        let n = match &f.kind {
            FeatureKind::Categorical { values } => values.len(),
            FeatureKind::Numeric { .. } => {
                return Err(Error::cost(&f.name, "feature is numeric, not categorical"))
            }
        };
        let cc = match &self.per_feature[i] {
            FeatureCost::Categorical(c) => c,
            FeatureCost::Numeric(_) => unreachable!("kind validated at compile"),
        };
        (0..n)
            .filter(|&t| t != from)
            .map(|t| cc.cost(from, t))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
            .ok_or_else(|| Error::cost(&f.name, "single-valued feature; no feasible change"))
    }
}

/// Total modular cost of moving from `x` to `x_prime`: the sum of
/// per-feature costs. Zero iff the examples are equal.
pub fn total_cost(schema: &Schema, costs: &CostSpec, x: &Example, x_prime: &Example) -> Result<f64> {
    debug_assert_eq!(x.values.len(), schema.features.len());
    let mut sum = 0.0;
    for i in 0..schema.features.len() {
        sum += costs.feature_cost(schema, i, &x.values[i], &x_prime.values[i])?;
    }
    Ok(sum)
}

/// Constant vs. variable gain accounting: `Constant` reads the gain off the
/// initial example (the adversary cannot move it), `Variable` reads it off
/// whichever example is being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    #[default]
    Constant,
    Variable,
}

/// Gain configuration: source column or constant, plus evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSpec {
    pub source: GainSource,
    pub mode: GainMode,
}

impl GainSpec {
    /// Gain of a single example. Non-negative by dataset validation.
    pub fn gain_of(&self, schema: &Schema, x: &Example) -> f64 {
        match &self.source {
            GainSource::Constant(g) => *g,
            GainSource::Column(name) => {
                let i = schema.feature_index(name).expect("gain column validated");
                x.values[i].as_num()
            }
        }
    }

    /// Gain credited to an attack that turned `x` into `x_prime`. Constant
    /// mode ignores the adversarial example.
    pub fn attack_gain(&self, schema: &Schema, x: &Example, x_prime: &Example) -> f64 {
        match self.mode {
            GainMode::Constant => self.gain_of(schema, x),
            GainMode::Variable => self.gain_of(schema, x_prime),
        }
    }
}

/// Utility of a successful attack: gain minus cost. May be negative.
pub fn utility(gain: f64, cost: f64) -> f64 {
    gain - cost
}

/// Cost budget that keeps an attack's utility at or above the margin `tau`:
/// `max(gain - tau, 0)`.
pub fn cost_bound_for_margin(gain: f64, tau: f64) -> f64 {
    (gain - tau).max(0.0)
}

/// Convex surrogate of [`total_cost`] on encoded vectors: per categorical
/// feature, the cheapest change cost from the anchor's current value times
/// half the L1 difference of the one-hot block; per numeric feature, the
/// directional rate times the coordinate difference. Never exceeds the true
/// cost on pairs of encoded examples, and is exact on numeric features.
///
/// `v` must be a valid encoded example (exact one-hot blocks). Any
/// displacement on an immutable feature makes the cost infinite.
pub fn relaxed_cost(
    schema: &Schema,
    costs: &CostSpec,
    encoder: &Encoder,
    v: &ArrayView1<f64>,
    v_prime: &ArrayView1<f64>,
) -> Result<f64> {
    let mut sum = 0.0;
    for (i, f) in schema.features.iter().enumerate() {
        let span = encoder.span(i);
        let a = v.slice(ndarray::s![span.start..span.start + span.len]);
        let b = v_prime.slice(ndarray::s![span.start..span.start + span.len]);
        let l1: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        if !f.mutable {
            if l1 != 0.0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        match &costs.per_feature[i] {
            FeatureCost::Categorical(_) => {
                if l1 == 0.0 {
                    continue;
                }
                let from = a
                    .iter()
                    .enumerate()
                    .max_by(|(_, p), (_, q)| p.partial_cmp(q).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                let minc = costs.min_categorical_change_cost(schema, i, from)?;
                sum += minc * 0.5 * l1;
            }
            FeatureCost::Numeric(nc) => {
                let d = b[0] - a[0];
                let rate = if d >= 0.0 { nc.rate_up() } else { nc.rate_down() };
                sum += rate * d.abs();
            }
        }
    }
    Ok(sum)
}
