//! Projection-based adversarial training and the white-box PGD attack
//! baseline.
//!
//! The inner maximization runs PGD in the encoded space: L1-normalized
//! gradient ascent steps of size `2*eps/n`, each followed by a Euclidean
//! projection onto the relaxed cost ball. Training wraps the shared
//! mini-batch loop from `model::fit`, so a zero budget reduces to clean
//! training bit for bit.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::cost::total_cost;
use crate::domain::{Dataset, Example};
use crate::encoding::Encoder;
use crate::error::{Error, Result};
use crate::model::{fit, Arch, EpochLog, ModelParams, TrainHyper};
use crate::projection::project_cost_ball;
use crate::scenario::Scenario;
use crate::search::{AttackOutcome, AttackStatus};

/// Which adversary the defense trains against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DefenseMode {
    /// One shared perturbation budget for every training sample.
    CostBounded { epsilon: f64 },
    /// Per-sample budgets `[gain - tau]+`: high-gain samples get hardened
    /// aggressively, unprofitable ones train clean.
    UtilityBounded { tau: f64 },
}

fn default_pgd_steps() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    #[serde(flatten)]
    pub mode: DefenseMode,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
}

impl AdvTrainConfig {
    pub fn cost_bounded(epsilon: f64) -> AdvTrainConfig {
        AdvTrainConfig {
            mode: DefenseMode::CostBounded { epsilon },
            pgd_steps: default_pgd_steps(),
        }
    }

    pub fn utility_bounded(tau: f64) -> AdvTrainConfig {
        AdvTrainConfig {
            mode: DefenseMode::UtilityBounded { tau },
            pgd_steps: default_pgd_steps(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.pgd_steps == 0 {
            return Err(Error::config("PGD needs at least one step"));
        }
        let budget_ok = match self.mode {
            DefenseMode::CostBounded { epsilon } => epsilon.is_finite() && epsilon >= 0.0,
            DefenseMode::UtilityBounded { tau } => tau.is_finite() && tau >= 0.0,
        };
        if !budget_ok {
            return Err(Error::config("defense budget must be finite and >= 0"));
        }
        Ok(())
    }
}

/// PGD inner maximization: returns a displacement `delta` with
/// `relaxed_cost(v, v + delta) <= eps` that approximately maximizes the
/// loss at `(v + delta, y)`. Steps with a zero gradient leave `delta`
/// unchanged; `eps = 0` returns the zero displacement immediately.
pub fn pgd_inner_max(
    model: &ModelParams,
    scn: &Scenario,
    encoder: &Encoder,
    v: &Array1<f64>,
    y: f64,
    eps: f64,
    n: usize,
) -> Result<Array1<f64>> {
    if n == 0 {
        return Err(Error::config("PGD needs at least one step"));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::config("PGD budget must be finite and >= 0"));
    }
    if eps == 0.0 {
        return Ok(Array1::zeros(v.len()));
    }
    let alpha = 2.0 * eps / n as f64;
    let mut delta: Array1<f64> = Array1::zeros(v.len());
    for _ in 0..n {
        let point = v + &delta;
        let (_, grad) = model.loss_and_grad_input(&point.view(), y);
        let l1: f64 = grad.iter().map(|g| g.abs()).sum();
        if l1 > 0.0 {
            delta = &delta + &grad.mapv(|g| alpha * g / l1);
        }
        let proposed = v + &delta;
        delta = project_cost_ball(
            &scn.schema,
            &scn.costs,
            encoder,
            &v.view(),
            &proposed.view(),
            eps,
        )?;
    }
    Ok(delta)
}

/// Adversarial training with per-sample budgets. Wraps the shared
/// mini-batch loop: each sample is perturbed by the PGD inner maximization
/// under its own budget right before the gradient step. Samples with a
/// zero budget pass through untouched, so budgets of all zero reproduce
/// clean training exactly.
pub fn adv_train(
    scn: &Scenario,
    encoder: &Encoder,
    dataset: &Dataset,
    arch: Arch,
    cfg: &AdvTrainConfig,
    hyper: &TrainHyper,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    let xs: Vec<Array1<f64>> = dataset.rows.iter().map(|r| encoder.encode(r)).collect();
    let ys: Vec<f64> = dataset.rows.iter().map(|r| f64::from(r.label)).collect();
    if ys.iter().all(|&y| y == 0.0) || ys.iter().all(|&y| y == 1.0) {
        return Err(Error::model("training set contains a single class"));
    }
    let budgets: Vec<f64> = match cfg.mode {
        DefenseMode::CostBounded { epsilon } => vec![epsilon; dataset.rows.len()],
        DefenseMode::UtilityBounded { tau } => dataset
            .rows
            .iter()
            .map(|r| crate::cost::cost_bound_for_margin(scn.gain.gain_of(&scn.schema, r), tau))
            .collect(),
    };
    let steps = cfg.pgd_steps;
    let mut first_error: Option<Error> = None;
    let mut perturb = |model: &ModelParams, idx: usize, x: &Array1<f64>, y: f64| {
        let eps = budgets[idx];
        if eps <= 0.0 || first_error.is_some() {
            return x.clone();
        }
        match pgd_inner_max(model, scn, encoder, x, y, eps, steps) {
            Ok(delta) => x + &delta,
            Err(e) => {
                first_error = Some(e);
                x.clone()
            }
        }
    };
    let fitted = fit(&xs, &ys, arch, hyper, Some(&mut perturb))?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(fitted),
    }
}

/// Adversarial training against a shared cost budget.
pub fn adv_train_cost_bounded(
    scn: &Scenario,
    encoder: &Encoder,
    dataset: &Dataset,
    arch: Arch,
    epsilon: f64,
    pgd_steps: usize,
    hyper: &TrainHyper,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let cfg = AdvTrainConfig {
        mode: DefenseMode::CostBounded { epsilon },
        pgd_steps,
    };
    adv_train(scn, encoder, dataset, arch, &cfg, hyper)
}

/// Adversarial training against a utility-seeking adversary with profit
/// margin `tau`; per-sample budgets come from each sample's unperturbed
/// gain.
pub fn adv_train_utility_bounded(
    scn: &Scenario,
    encoder: &Encoder,
    dataset: &Dataset,
    arch: Arch,
    tau: f64,
    pgd_steps: usize,
    hyper: &TrainHyper,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let cfg = AdvTrainConfig {
        mode: DefenseMode::UtilityBounded { tau },
        pgd_steps,
    };
    adv_train(scn, encoder, dataset, arch, &cfg, hyper)
}

/// Why a PGD attack run did not count as a success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdFailure {
    /// The decoded example still gets the source label.
    NotMisclassified,
    /// The label flipped, but the decoded example's true discrete cost
    /// exceeds the budget.
    DecodedOverBudget,
}

impl PgdFailure {
    pub fn label(&self) -> &'static str {
        match self {
            PgdFailure::NotMisclassified => "not_misclassified",
            PgdFailure::DecodedOverBudget => "decoded_over_budget",
        }
    }
}

/// Outcome of the white-box PGD baseline, with the extra failure
/// diagnostic the graph attacks do not need.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub outcome: AttackOutcome,
    pub failure: Option<PgdFailure>,
    /// The decoded candidate, kept even on failure for inspection.
    pub decoded: Example,
}

/// White-box PGD attack: gradient PGD in encoded space, then decode to a
/// feasible example and audit honestly. Success requires both that the
/// decoded example flips the model's label and that its true discrete
/// cost fits the budget; continuous-space success that does not survive
/// decoding is reported as failure.
pub fn pgd_attack_baseline(
    model: &ModelParams,
    scn: &Scenario,
    encoder: &Encoder,
    x: &Example,
    eps: f64,
    n: usize,
) -> Result<PgdOutcome> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::config("attack budget must be finite and >= 0"));
    }
    let started = std::time::Instant::now();
    let y_source = x.label;
    let y_target = 1 - (y_source & 1);
    let v = encoder.encode(x);
    let delta = pgd_inner_max(model, scn, encoder, &v, f64::from(y_source), eps, n)?;
    let adv_point = &v + &delta;
    let mut decoded = encoder.decode(&adv_point.view(), y_target);
    // immutable features never move in the encoded space; copy them
    // verbatim so grid snapping cannot invent an edit
    for (i, f) in scn.schema.features.iter().enumerate() {
        if !f.mutable {
            decoded.values[i] = x.values[i].clone();
        }
    }
    let true_cost = total_cost(&scn.schema, &scn.costs, x, &decoded)?;
    let flipped = model.predict_label(&encoder.encode(&decoded).view()) == y_target;
    let within = true_cost <= eps + 1e-9;
    let (status, failure) = match (flipped, within) {
        (true, true) => (AttackStatus::Success, None),
        (false, _) => (AttackStatus::NoSolution, Some(PgdFailure::NotMisclassified)),
        (true, false) => (
            AttackStatus::BudgetExhausted,
            Some(PgdFailure::DecodedOverBudget),
        ),
    };
    let success = status == AttackStatus::Success;
    let gain = scn.gain.attack_gain(&scn.schema, x, &decoded);
    let outcome = AttackOutcome {
        status,
        adversarial: success.then(|| decoded.clone()),
        cost: success.then_some(true_cost),
        gain: success.then_some(gain),
        utility: success.then(|| crate::cost::utility(gain, true_cost)),
        expansions: 0,
        queries: 0,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(PgdOutcome {
        outcome,
        failure,
        decoded,
    })
}
