//! Feature-vector encoding: categorical features become one-hot blocks,
//! numeric features become a single transformed coordinate. The `Encoder`
//! owns the layout (which coordinates belong to which feature) and is the
//! bridge between discrete examples and the continuous space that models,
//! gradients, and projections live in.

use ndarray::{Array1, ArrayView1};

use crate::cost::{CostSpec, FeatureCost, Transform};
use crate::domain::{nearest_grid_index, Example, FeatureKind, Schema, Value};
use crate::error::{Error, Result};

/// Contiguous coordinate range of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum EncFeature {
    Cat {
        n: usize,
    },
    Num {
        transform: Transform,
        grid: Vec<f64>,
        lower: f64,
        upper: f64,
    },
}

/// Maps examples to dense f64 vectors and back. Built once per
/// (schema, costs) pair; the costs contribute only the numeric transforms.
#[derive(Debug, Clone)]
pub struct Encoder {
    spans: Vec<Span>,
    features: Vec<EncFeature>,
    dim: usize,
}

impl Encoder {
    pub fn new(schema: &Schema, costs: &CostSpec) -> Result<Encoder> {
        if costs.per_feature.len() != schema.features.len() {
            return Err(Error::schema("cost spec does not match feature count"));
        }
        let mut spans = Vec::with_capacity(schema.features.len());
        let mut features = Vec::with_capacity(schema.features.len());
        let mut dim = 0;
        for (f, c) in schema.features.iter().zip(&costs.per_feature) {
            match (&f.kind, c) {
                (FeatureKind::Categorical { values }, FeatureCost::Categorical(_)) => {
                    spans.push(Span {
                        start: dim,
                        len: values.len(),
                    });
                    features.push(EncFeature::Cat { n: values.len() });
                    dim += values.len();
                }
                (FeatureKind::Numeric { lower, upper, grid }, FeatureCost::Numeric(nc)) => {
                    for g in grid {
                        if !nc.transform.in_domain(*g) {
                            return Err(Error::TransformDomain {
                                feature: f.name.clone(),
                                value: *g,
                                reason: "grid point outside transform domain".into(),
                            });
                        }
                    }
                    spans.push(Span { start: dim, len: 1 });
                    features.push(EncFeature::Num {
                        transform: nc.transform,
                        grid: grid.clone(),
                        lower: *lower,
                        upper: *upper,
                    });
                    dim += 1;
                }
                _ => {
                    return Err(Error::cost(
                        &f.name,
                        "cost kind does not match feature kind",
                    ))
                }
            }
        }
        Ok(Encoder {
            spans,
            features,
            dim,
        })
    }

    /// Encoded dimensionality d.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn span(&self, feature: usize) -> Span {
        self.spans[feature]
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    /// Kind check used by projection weight assembly.
    pub fn is_categorical(&self, feature: usize) -> bool {
        matches!(self.features[feature], EncFeature::Cat { .. })
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    /// phi(x): one-hot blocks and transformed numeric coordinates.
    pub fn encode(&self, x: &Example) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        for (i, ef) in self.features.iter().enumerate() {
            let span = self.spans[i];
            match (ef, &x.values[i]) {
                (EncFeature::Cat { n }, Value::Cat(k)) => {
                    debug_assert!(k < n);
                    v[span.start + k] = 1.0;
                }
                (EncFeature::Num { transform, .. }, Value::Num(raw)) => {
                    v[span.start] = transform.apply(*raw);
                }
                _ => panic!("example does not match encoder at feature {i}"),
            }
        }
        v
    }

    /// Inverse map onto the feasible space: each categorical block decodes to
    /// its argmax (ties pick the lowest declared index), each numeric
    /// coordinate is pulled back through its transform, clamped to bounds,
    /// and snapped to the nearest grid point.
    pub fn decode_values(&self, v: &ArrayView1<f64>) -> Vec<Value> {
        debug_assert_eq!(v.len(), self.dim);
        self.features
            .iter()
            .enumerate()
            .map(|(i, ef)| {
                let span = self.spans[i];
                match ef {
                    EncFeature::Cat { .. } => {
                        let mut best = 0;
                        let mut best_val = f64::NEG_INFINITY;
                        for k in 0..span.len {
                            let val = v[span.start + k];
                            if val > best_val {
                                best_val = val;
                                best = k;
                            }
                        }
                        Value::Cat(best)
                    }
                    EncFeature::Num {
                        transform,
                        grid,
                        lower,
                        upper,
                    } => {
                        let raw = transform.invert(v[span.start]).clamp(*lower, *upper);
                        Value::Num(grid[nearest_grid_index(grid, raw)])
                    }
                }
            })
            .collect()
    }

    /// [`Encoder::decode_values`] packaged as an example with the given label.
    pub fn decode(&self, v: &ArrayView1<f64>, label: u8) -> Example {
        Example::new(self.decode_values(v), label)
    }
}
