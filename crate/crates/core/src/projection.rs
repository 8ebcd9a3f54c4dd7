//! Euclidean projection onto cost-bounded perturbation sets.
//!
//! The feasible set is the relaxed-cost ball around an encoded example: a
//! weighted L1 ball whose weights come from the cost model (cheapest change
//! cost for one-hot blocks, directional rates for numeric coordinates).
//! The projection is the exact sort-based scan; `reference` holds two
//! independent slow solvers used to validate it.

use ndarray::{Array1, ArrayView1};

use crate::cost::{CostSpec, FeatureCost};
use crate::domain::{FeatureKind, Schema};
use crate::encoding::Encoder;
use crate::error::{Error, Result};

fn validate_weights(w: &[f64]) -> Result<()> {
    for (i, &wi) in w.iter().enumerate() {
        if !wi.is_finite() || wi <= 0.0 {
            return Err(Error::config(format!(
                "projection weight {wi} at coordinate {i} must be positive and finite"
            )));
        }
    }
    Ok(())
}

/// Projects `u` onto `{t : sum_i w_i |t_i| <= eps}` in Euclidean norm.
///
/// Sort-based exact scan: order coordinates by `|u_i| / w_i`, find the
/// breakpoint index of the active set, compute the multiplier from the
/// suffix sums, and soft-threshold magnitudes. Points already inside the
/// ball are returned unchanged; `eps = 0` returns the zero vector. Signs
/// are never flipped and magnitudes never grow.
pub fn project_weighted_simplex(u: &ArrayView1<f64>, w: &[f64], eps: f64) -> Result<Array1<f64>> {
    if u.len() != w.len() {
        return Err(Error::config("point and weights differ in dimension"));
    }
    validate_weights(w)?;
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::config(format!("radius {eps} must be finite and >= 0")));
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::config("point has non-finite coordinates"));
    }
    let weighted_l1: f64 = u.iter().zip(w).map(|(x, wi)| wi * x.abs()).sum();
    if weighted_l1 <= eps {
        return Ok(u.to_owned());
    }
    if eps == 0.0 {
        return Ok(Array1::zeros(u.len()));
    }

    let m = u.len();
    let mut order: Vec<usize> = (0..m).collect();
    let z: Vec<f64> = (0..m).map(|i| u[i].abs() / w[i]).collect();
    order.sort_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap().then(a.cmp(&b)));

    // suffix sums over the sorted order: suffix[j] covers positions j..m
    let mut suffix_wu = vec![0.0; m + 1];
    let mut suffix_w2 = vec![0.0; m + 1];
    for j in (0..m).rev() {
        let i = order[j];
        suffix_wu[j] = suffix_wu[j + 1] + w[i] * u[i].abs();
        suffix_w2[j] = suffix_w2[j + 1] + w[i] * w[i];
    }

    // Largest j (1-based) whose multiplier over the strict suffix would
    // already drop coordinate j; 0 when no coordinate gets dropped.
    let mut cut = 0usize;
    for j in 1..=m {
        if suffix_w2[j] > 0.0 && (suffix_wu[j] - eps) / suffix_w2[j] > z[order[j - 1]] {
            cut = j;
        }
    }
    // clamp: a point sitting on the boundary can yield a multiplier that is
    // zero or epsilon-negative through summation rounding
    let lambda = ((suffix_wu[cut] - eps) / suffix_w2[cut]).max(0.0);

    let mut t = Array1::zeros(m);
    for i in 0..m {
        let mag = (u[i].abs() - w[i] * lambda).max(0.0);
        t[i] = mag.copysign(u[i]);
    }
    Ok(t)
}

/// Per-coordinate projection weights for a perturbation `delta` around the
/// encoded anchor `v`: every coordinate of a categorical block carries the
/// cheapest change cost away from the anchor's current value, and a numeric
/// coordinate carries its decrease rate when `delta` is negative, otherwise
/// its increase rate. Errors on a categorical block with no feasible change
/// (a single declared value).
pub fn assemble_weights(
    schema: &Schema,
    costs: &CostSpec,
    encoder: &Encoder,
    v: &ArrayView1<f64>,
    delta: &ArrayView1<f64>,
) -> Result<Vec<f64>> {
    let mut w = vec![0.0; encoder.dim()];
    for (i, f) in schema.features.iter().enumerate() {
        let span = encoder.span(i);
        match &costs.per_feature[i] {
            FeatureCost::Categorical(cc) => {
                let n = match &f.kind {
                    FeatureKind::Categorical { values } => values.len(),
                    _ => unreachable!("kinds validated at encoder construction"),
                };
                if n < 2 {
                    return Err(Error::cost(
                        &f.name,
                        "categorical block has no feasible change",
                    ));
                }
                let from = (0..n)
                    .max_by(|&a, &b| v[span.start + a].partial_cmp(&v[span.start + b]).unwrap())
                    .unwrap();
                let minc = (0..n)
                    .filter(|&t| t != from)
                    .map(|t| cc.cost(from, t))
                    .fold(f64::INFINITY, f64::min);
                for k in 0..span.len {
                    w[span.start + k] = minc;
                }
            }
            FeatureCost::Numeric(nc) => {
                w[span.start] = if delta[span.start] < 0.0 {
                    nc.rate_down()
                } else {
                    nc.rate_up()
                };
            }
        }
    }
    validate_weights(&w)?;
    Ok(w)
}

/// Euclidean projection of a proposed point `v_prime` onto the relaxed-cost
/// ball of radius `eps` around the encoded example `v`; returns the
/// projected displacement `delta*`.
///
/// Displacements on immutable features (and categorical blocks with nowhere
/// to go) are zeroed first: their feasible change set is empty, so any such
/// movement has infinite cost. Categorical block weights are halved for the
/// scan because a block's relaxed cost is its cheapest change cost times
/// *half* the block's L1 displacement.
pub fn project_cost_ball(
    schema: &Schema,
    costs: &CostSpec,
    encoder: &Encoder,
    v: &ArrayView1<f64>,
    v_prime: &ArrayView1<f64>,
    eps: f64,
) -> Result<Array1<f64>> {
    if v.len() != encoder.dim() || v_prime.len() != encoder.dim() {
        return Err(Error::config("vector dimension does not match encoder"));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::config(format!("radius {eps} must be finite and >= 0")));
    }
    let mut delta: Array1<f64> = v_prime - v;

    // scan weights; coordinates forced to zero keep a harmless placeholder
    let mut w = vec![1.0; encoder.dim()];
    for (i, f) in schema.features.iter().enumerate() {
        let span = encoder.span(i);
        let blocked = !f.mutable || (f.is_categorical() && span.len < 2);
        if blocked {
            for k in 0..span.len {
                delta[span.start + k] = 0.0;
            }
            continue;
        }
        match &costs.per_feature[i] {
            FeatureCost::Categorical(cc) => {
                let from = (0..span.len)
                    .max_by(|&a, &b| v[span.start + a].partial_cmp(&v[span.start + b]).unwrap())
                    .unwrap();
                let minc = (0..span.len)
                    .filter(|&t| t != from)
                    .map(|t| cc.cost(from, t))
                    .fold(f64::INFINITY, f64::min);
                for k in 0..span.len {
                    w[span.start + k] = 0.5 * minc;
                }
            }
            FeatureCost::Numeric(nc) => {
                w[span.start] = if delta[span.start] < 0.0 {
                    nc.rate_down()
                } else {
                    nc.rate_up()
                };
            }
        }
    }
    if eps == 0.0 {
        return Ok(Array1::zeros(encoder.dim()));
    }
    project_weighted_simplex(&delta.view(), &w, eps)
}

/// Slow reference solvers for the same projection problem, kept apart from
/// the production path so the test suites have something independent to
/// compare against.
pub mod reference {
    use ndarray::{Array1, ArrayView1};

    fn soft_threshold(u: &ArrayView1<f64>, w: &[f64], lambda: f64) -> Array1<f64> {
        Array1::from_shape_fn(u.len(), |i| {
            (u[i].abs() - w[i] * lambda).max(0.0).copysign(u[i])
        })
    }

    fn weighted_l1(t: &Array1<f64>, w: &[f64]) -> f64 {
        t.iter().zip(w).map(|(x, wi)| wi * x.abs()).sum()
    }

    /// Bisection on the dual multiplier: the ball constraint of the
    /// soft-thresholded point is monotone decreasing in the multiplier, so
    /// the optimum is bracketed and bisected to machine precision.
    pub fn project_dual_bisection(u: &ArrayView1<f64>, w: &[f64], eps: f64) -> Array1<f64> {
        if weighted_l1(&u.to_owned(), w) <= eps {
            return u.to_owned();
        }
        if eps == 0.0 {
            return Array1::zeros(u.len());
        }
        let mut lo = 0.0;
        let mut hi = u
            .iter()
            .zip(w)
            .map(|(x, wi)| x.abs() / wi)
            .fold(0.0, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if weighted_l1(&soft_threshold(u, w, mid), w) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        soft_threshold(u, w, hi)
    }

    /// Exhaustive KKT search over every candidate active set; exact but
    /// exponential, for cross-checking low-dimensional instances.
    pub fn project_active_set(u: &ArrayView1<f64>, w: &[f64], eps: f64) -> Option<Array1<f64>> {
        let m = u.len();
        assert!(m <= 20, "active-set enumeration is exponential");
        if weighted_l1(&u.to_owned(), w) <= eps {
            return Some(u.to_owned());
        }
        let mut best: Option<(f64, Array1<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let (num, den): (f64, f64) = active
                .iter()
                .fold((0.0, 0.0), |(n, d), &i| (n + w[i] * u[i].abs(), d + w[i] * w[i]));
            if den == 0.0 {
                continue;
            }
            let lambda = (num - eps) / den;
            if lambda <= 0.0 {
                continue;
            }
            // KKT consistency of the candidate set
            let ok_active = active.iter().all(|&i| u[i].abs() - w[i] * lambda > 1e-12);
            let ok_inactive = (0..m)
                .filter(|i| mask & (1 << i) == 0)
                .all(|i| u[i].abs() - w[i] * lambda <= 1e-9);
            if !(ok_active && ok_inactive) {
                continue;
            }
            let mut t = Array1::zeros(m);
            for &i in &active {
                t[i] = (u[i].abs() - w[i] * lambda).copysign(u[i]);
            }
            let dist: f64 = (&t - u).iter().map(|d| d * d).sum();
            if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
                best = Some((dist, t));
            }
        }
        best.map(|(_, t)| t)
    }
}
