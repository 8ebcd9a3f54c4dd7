//! Best-first graph search for low-cost evasion of a black-box classifier.
//!
//! Nodes are feasible examples, edges are single-feature changes, and edge
//! direction always points away from the initial example. Because the cost
//! model is modular across features, the cost of a node is the direct
//! modular cost from the initial example and does not depend on the path
//! taken, which is what makes uniform-cost search exactly optimal here.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::cost::total_cost;
use crate::domain::{example_to_json, moves, Example, Schema};
use crate::error::{Error, Result};
use crate::model::Oracle;
use crate::scenario::Scenario;

/// Default bound on node expansions per search.
pub const DEFAULT_ITERATION_CAP: u64 = 100_000;

/// Which scoring function orders the open queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoringKind {
    /// Confidence change toward the target class per unit of edge cost.
    UniversalGreedy,
    /// Target-class confidence per unit of edge cost, ignoring the parent.
    BasicGreedy,
    /// Cost from the root plus `lambda` times the remaining-distance
    /// heuristic (source-class confidence).
    AStar { lambda: f64 },
    /// Heuristic divided by the remaining budget; needs a finite budget.
    PotentialSearch,
    /// Cost from the root alone; optimal with an unbounded beam.
    UniformCost,
}

impl ScoringKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScoringKind::UniversalGreedy => "universal_greedy",
            ScoringKind::BasicGreedy => "basic_greedy",
            ScoringKind::AStar { .. } => "astar",
            ScoringKind::PotentialSearch => "potential_search",
            ScoringKind::UniformCost => "uniform_cost",
        }
    }
}

/// What limits the search and what counts as the returned solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BudgetMode {
    /// Stop at the first goal whose cost stays within `epsilon`.
    CostBounded { epsilon: f64 },
    /// Derive the per-example budget from the example's gain minus the
    /// required profit margin `tau`, then run cost-bounded.
    UtilityBounded { tau: f64 },
    /// No budget; first goal popped by uniform-cost order is cost-minimal.
    MinCost,
    /// Explore everything within `epsilon` and keep the goal with the
    /// highest utility, not the first one found.
    MaxUtility { epsilon: f64 },
}

impl BudgetMode {
    pub fn label(&self) -> &'static str {
        match self {
            BudgetMode::CostBounded { .. } => "cost_bounded",
            BudgetMode::UtilityBounded { .. } => "utility_bounded",
            BudgetMode::MinCost => "min_cost",
            BudgetMode::MaxUtility { .. } => "max_utility",
        }
    }

    /// The mode's defining parameter, for reporting.
    pub fn epsilon_or_tau(&self) -> Option<f64> {
        match *self {
            BudgetMode::CostBounded { epsilon } | BudgetMode::MaxUtility { epsilon } => {
                Some(epsilon)
            }
            BudgetMode::UtilityBounded { tau } => Some(tau),
            BudgetMode::MinCost => None,
        }
    }
}

/// Knobs of one search run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: BudgetMode,
    /// Open-queue capacity; `None` leaves it unbounded.
    pub beam: Option<usize>,
    /// Hard bound on node expansions.
    pub iteration_cap: u64,
    /// Class the attack drives the model toward; defaults to flipping the
    /// example's own label.
    pub target: Option<u8>,
}

impl SearchConfig {
    pub fn new(budget: BudgetMode) -> SearchConfig {
        SearchConfig {
            budget,
            beam: Some(1),
            iteration_cap: DEFAULT_ITERATION_CAP,
            target: None,
        }
    }

    pub fn with_beam(mut self, beam: Option<usize>) -> SearchConfig {
        self.beam = beam;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    /// A goal was returned; budget and label invariants hold.
    Success,
    /// The reachable component was exhausted and nothing was cut by the
    /// budget: no solution exists under the explored expansion order.
    NoSolution,
    /// The queue emptied but at least one child was discarded for
    /// exceeding the budget.
    BudgetExhausted,
    /// The expansion cap was hit first.
    IterationCap,
}

/// Everything a single attack run reports. Money-valued fields are present
/// exactly when `status` is `Success`.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub status: AttackStatus,
    pub adversarial: Option<Example>,
    pub cost: Option<f64>,
    pub gain: Option<f64>,
    pub utility: Option<f64>,
    pub expansions: u64,
    pub queries: u64,
    pub seconds: f64,
}

/// One attack outcome flattened for JSON-lines streaming.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub example_id: u64,
    pub status: AttackStatus,
    pub cost: Option<f64>,
    pub gain: Option<f64>,
    pub utility: Option<f64>,
    pub expansions: u64,
    pub queries: u64,
    pub seconds: f64,
    pub budget_mode: String,
    pub epsilon_or_tau: Option<f64>,
    pub scoring: String,
    pub beam: Option<u64>,
    pub adversarial: Option<serde_json::Value>,
    /// Model identifier, set by the experiment runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Attack identifier, set by the experiment runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    /// Whether the model classified the unperturbed example correctly,
    /// set by the experiment runner (success-rate numerators require it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initially_correct: Option<bool>,
    /// Failure diagnostic of the gradient baseline, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl OutcomeRecord {
    pub fn new(
        example_id: u64,
        schema: &Schema,
        outcome: &AttackOutcome,
        scoring: ScoringKind,
        config: &SearchConfig,
    ) -> OutcomeRecord {
        OutcomeRecord {
            example_id,
            status: outcome.status,
            cost: outcome.cost,
            gain: outcome.gain,
            utility: outcome.utility,
            expansions: outcome.expansions,
            queries: outcome.queries,
            seconds: outcome.seconds,
            budget_mode: config.budget.label().to_string(),
            epsilon_or_tau: config.budget.epsilon_or_tau(),
            scoring: scoring.label().to_string(),
            beam: config.beam.map(|b| b as u64),
            adversarial: outcome
                .adversarial
                .as_ref()
                .map(|x| example_to_json(schema, x)),
            model: None,
            attack: None,
            initially_correct: None,
            failure: None,
        }
    }
}

/// Confidence the oracle assigns to the example's own class: `f` itself
/// when the source class is 1, otherwise `1 - f`. All heuristics below use
/// this orientation, so driving it down always means approaching the goal.
pub fn source_confidence(f: f64, y_source: u8) -> f64 {
    if y_source == 1 {
        f
    } else {
        1.0 - f
    }
}

/// Confidence drop toward the target per unit of edge cost; more negative
/// is better. `f_v`/`f_t` are raw oracle scores of parent and candidate.
pub fn score_universal_greedy(f_v: f64, f_t: f64, edge_cost: f64, y_source: u8) -> f64 {
    (source_confidence(f_t, y_source) - source_confidence(f_v, y_source)) / edge_cost
}

/// Negated target-class confidence per unit of edge cost.
pub fn score_basic_greedy(f_t: f64, edge_cost: f64, y_source: u8) -> f64 {
    -(1.0 - source_confidence(f_t, y_source)) / edge_cost
}

/// Cost so far plus weighted remaining-distance heuristic.
pub fn score_astar(cost_from_root: f64, h_t: f64, lambda: f64) -> f64 {
    cost_from_root + lambda * h_t
}

/// Remaining-distance heuristic scaled by the inverse of the remaining
/// budget; a candidate sitting exactly on the budget is pushed to the back
/// of the queue.
pub fn score_potential_search(h_t: f64, cost_from_root: f64, eps: f64) -> f64 {
    let room = eps - cost_from_root;
    if room <= 0.0 {
        f64::INFINITY
    } else {
        h_t / room
    }
}

struct Node {
    example: Example,
    cost: f64,
    f: f64,
}

type OpenQueue = BTreeMap<(OrderedFloat<f64>, u64), Node>;

/// Inserts into a capacity-bounded min-queue. On overflow the worst entry
/// goes; among equal worst scores the latest insertion goes, so earlier
/// entries win ties and a tying newcomer is simply not admitted.
fn push_bounded(open: &mut OpenQueue, beam: Option<usize>, key: (OrderedFloat<f64>, u64), node: Node) {
    if let Some(b) = beam {
        if open.len() >= b {
            let worst = *open.last_key_value().expect("non-empty by len check").0;
            if key < worst {
                open.remove(&worst);
            } else {
                return;
            }
        }
    }
    open.insert(key, node);
}

fn label_of(score: f64) -> u8 {
    u8::from(score > 0.5)
}

/// Runs one best-first evasion search from `x` against the oracle.
///
/// The open queue pops the lowest score first, ties broken by insertion
/// order. A node is closed once popped and never revisited; children whose
/// direct cost from `x` exceeds the effective budget are discarded and
/// flip the final failure status to `BudgetExhausted`. If `x` is already
/// classified as the target the search returns immediately at cost 0.
///
/// Errors cover configuration only (bad beam or cap, negative budgets,
/// potential search without a finite budget); search failures come back as
/// statuses.
pub fn best_first_search(
    scn: &Scenario,
    oracle: &dyn Oracle,
    x: &Example,
    scoring: ScoringKind,
    config: &SearchConfig,
) -> Result<AttackOutcome> {
    if config.beam == Some(0) {
        return Err(Error::config("beam capacity must be at least 1"));
    }
    if config.iteration_cap == 0 {
        return Err(Error::config("iteration cap must be at least 1"));
    }
    if let ScoringKind::AStar { lambda } = scoring {
        if !(lambda > 0.0) {
            return Err(Error::config("greediness must be positive"));
        }
    }
    match config.budget {
        BudgetMode::CostBounded { epsilon } => {
            if epsilon.is_nan() || epsilon < 0.0 {
                return Err(Error::config("cost bound must be >= 0"));
            }
        }
        BudgetMode::UtilityBounded { tau } => {
            if !tau.is_finite() || tau < 0.0 {
                return Err(Error::config("utility margin must be finite and >= 0"));
            }
        }
        BudgetMode::MaxUtility { epsilon } => {
            if !epsilon.is_finite() || epsilon < 0.0 {
                return Err(Error::config(
                    "utility maximization needs a finite cost budget",
                ));
            }
        }
        BudgetMode::MinCost => {}
    }

    let schema = &scn.schema;
    let y_source = x.label;
    let y_target = config.target.unwrap_or(1 - (y_source & 1));
    let eps = match config.budget {
        BudgetMode::CostBounded { epsilon } | BudgetMode::MaxUtility { epsilon } => epsilon,
        BudgetMode::UtilityBounded { tau } => {
            crate::cost::cost_bound_for_margin(scn.gain.gain_of(schema, x), tau)
        }
        BudgetMode::MinCost => f64::INFINITY,
    };
    if matches!(scoring, ScoringKind::PotentialSearch) && !eps.is_finite() {
        return Err(Error::config(
            "potential search needs a finite cost budget",
        ));
    }
    let collect_all = matches!(config.budget, BudgetMode::MaxUtility { .. });

    let started = Instant::now();
    let queries_before = oracle.queries();
    let finish = |status: AttackStatus,
                  goal: Option<(Example, f64, f64)>,
                  expansions: u64| {
        let (adversarial, cost, gain) = match goal {
            Some((e, c, g)) => (Some(e), Some(c), Some(g)),
            None => (None, None, None),
        };
        AttackOutcome {
            status,
            utility: match (gain, cost) {
                (Some(g), Some(c)) => Some(crate::cost::utility(g, c)),
                _ => None,
            },
            adversarial,
            cost,
            gain,
            expansions,
            queries: oracle.queries() - queries_before,
            seconds: started.elapsed().as_secs_f64(),
        }
    };

    let f_root = oracle.score(x);
    let mut best_goal: Option<(Example, f64, f64, f64)> = None; // example, cost, gain, utility
    let record_goal = |best: &mut Option<(Example, f64, f64, f64)>, e: &Example, c: f64| {
        let mut goal = e.clone();
        goal.label = y_target;
        let g = scn.gain.attack_gain(schema, x, &goal);
        let u = crate::cost::utility(g, c);
        // strict improvement only, so the first goal wins utility ties
        if best.as_ref().map_or(true, |(_, _, _, bu)| u > *bu) {
            *best = Some((goal, c, g, u));
        }
    };

    if label_of(f_root) == y_target {
        record_goal(&mut best_goal, x, 0.0);
        if !collect_all {
            let (e, c, g, _) = best_goal.unwrap();
            return Ok(finish(AttackStatus::Success, Some((e, c, g)), 0));
        }
    }

    let mut open: OpenQueue = BTreeMap::new();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut seq = 0u64;
    seen.insert(x.canonical_key());
    let root_score = match scoring {
        ScoringKind::UniformCost => 0.0,
        ScoringKind::AStar { lambda } => {
            score_astar(0.0, source_confidence(f_root, y_source), lambda)
        }
        ScoringKind::PotentialSearch => {
            score_potential_search(source_confidence(f_root, y_source), 0.0, eps)
        }
        // edge-based scores have no incoming edge at the root
        ScoringKind::UniversalGreedy | ScoringKind::BasicGreedy => 0.0,
    };
    open.insert(
        (OrderedFloat(root_score), seq),
        Node {
            example: x.clone(),
            cost: 0.0,
            f: f_root,
        },
    );
    seq += 1;

    let mut budget_pruned = false;
    let mut expansions = 0u64;

    while let Some((_, node)) = open.pop_first() {
        if label_of(node.f) == y_target {
            if !collect_all {
                let mut goal = node.example;
                goal.label = y_target;
                let g = scn.gain.attack_gain(schema, x, &goal);
                return Ok(finish(AttackStatus::Success, Some((goal, node.cost, g)), expansions));
            }
            record_goal(&mut best_goal, &node.example, node.cost);
        }
        if expansions == config.iteration_cap {
            return Ok(match best_goal {
                Some((e, c, g, _)) => finish(AttackStatus::Success, Some((e, c, g)), expansions),
                None => finish(AttackStatus::IterationCap, None, expansions),
            });
        }
        expansions += 1;

        for (i, value) in moves(schema, &node.example) {
            let child = node.example.with_value(i, value);
            let key = child.canonical_key();
            if seen.contains(&key) {
                continue;
            }
            seen.insert(key);
            let child_cost = total_cost(schema, &scn.costs, x, &child)?;
            if child_cost > eps {
                budget_pruned = true;
                continue;
            }
            let f_t = oracle.score(&child);
            let h_t = source_confidence(f_t, y_source);
            let score = match scoring {
                ScoringKind::UniversalGreedy => {
                    let edge = scn
                        .costs
                        .feature_cost(schema, i, &node.example.values[i], &child.values[i])?;
                    score_universal_greedy(node.f, f_t, edge, y_source)
                }
                ScoringKind::BasicGreedy => {
                    let edge = scn
                        .costs
                        .feature_cost(schema, i, &node.example.values[i], &child.values[i])?;
                    score_basic_greedy(f_t, edge, y_source)
                }
                ScoringKind::AStar { lambda } => score_astar(child_cost, h_t, lambda),
                ScoringKind::PotentialSearch => score_potential_search(h_t, child_cost, eps),
                ScoringKind::UniformCost => child_cost,
            };
            push_bounded(
                &mut open,
                config.beam,
                (OrderedFloat(score), seq),
                Node {
                    example: child,
                    cost: child_cost,
                    f: f_t,
                },
            );
            seq += 1;
        }
    }

    Ok(match best_goal {
        Some((e, c, g, _)) => finish(AttackStatus::Success, Some((e, c, g)), expansions),
        None if budget_pruned => finish(AttackStatus::BudgetExhausted, None, expansions),
        None => finish(AttackStatus::NoSolution, None, expansions),
    })
}

/// First goal within cost budget `eps`.
pub fn attack_cost_bounded(
    scn: &Scenario,
    oracle: &dyn Oracle,
    x: &Example,
    eps: f64,
    scoring: ScoringKind,
    beam: Option<usize>,
) -> Result<AttackOutcome> {
    let config = SearchConfig::new(BudgetMode::CostBounded { epsilon: eps }).with_beam(beam);
    best_first_search(scn, oracle, x, scoring, &config)
}

/// Cost-bounded attack with the budget derived from the example's gain
/// minus the margin `tau`; an unprofitable example gets budget 0.
pub fn attack_utility_bounded(
    scn: &Scenario,
    oracle: &dyn Oracle,
    x: &Example,
    tau: f64,
    scoring: ScoringKind,
    beam: Option<usize>,
) -> Result<AttackOutcome> {
    let config = SearchConfig::new(BudgetMode::UtilityBounded { tau }).with_beam(beam);
    best_first_search(scn, oracle, x, scoring, &config)
}

/// Exact minimal-cost attack: uniform-cost order, no budget, unbounded
/// beam. The first goal popped has the minimum cost over the whole
/// reachable component.
pub fn attack_min_cost(scn: &Scenario, oracle: &dyn Oracle, x: &Example) -> Result<AttackOutcome> {
    let config = SearchConfig::new(BudgetMode::MinCost).with_beam(None);
    best_first_search(scn, oracle, x, ScoringKind::UniformCost, &config)
}

/// Highest-utility goal within cost budget `eps`; the search keeps going
/// past goals until the component or the iteration cap is exhausted.
pub fn attack_max_utility(
    scn: &Scenario,
    oracle: &dyn Oracle,
    x: &Example,
    eps: f64,
    scoring: ScoringKind,
    beam: Option<usize>,
) -> Result<AttackOutcome> {
    let config = SearchConfig::new(BudgetMode::MaxUtility { epsilon: eps }).with_beam(beam);
    best_first_search(scn, oracle, x, scoring, &config)
}

/// Exhaustive solvers over the whole feasible graph, exponential in the
/// feature count. They exist so tests can compare search outcomes against
/// ground truth on small schemas.
pub mod reference {
    use super::*;
    use crate::domain::feasible_values;

    /// Every feasible example (immutable features pinned to their current
    /// values) with its direct modular cost from `x`.
    pub fn enumerate_with_costs(
        scn: &Scenario,
        x: &Example,
        limit: usize,
    ) -> Result<Vec<(Example, f64)>> {
        let schema = &scn.schema;
        let choices: Vec<Vec<crate::domain::Value>> = (0..schema.features.len())
            .map(|i| feasible_values(schema, x, i))
            .collect();
        let count: usize = choices.iter().map(|c| c.len()).product();
        if count > limit {
            return Err(Error::config(format!(
                "{count} nodes exceed the enumeration limit {limit}"
            )));
        }
        let mut out = Vec::with_capacity(count);
        let mut stack = vec![x.clone()];
        for (i, vals) in choices.iter().enumerate() {
            let mut next = Vec::with_capacity(stack.len() * vals.len());
            for partial in &stack {
                for v in vals {
                    next.push(partial.with_value(i, v.clone()));
                }
            }
            stack = next;
        }
        for e in stack {
            let c = total_cost(schema, &scn.costs, x, &e)?;
            out.push((e, c));
        }
        Ok(out)
    }

    /// Minimum-cost goal over the whole graph; ties keep the first in
    /// enumeration order.
    pub fn min_cost_goal(
        scn: &Scenario,
        oracle: &dyn Oracle,
        x: &Example,
        y_target: u8,
        limit: usize,
    ) -> Result<Option<(Example, f64)>> {
        let mut best: Option<(Example, f64)> = None;
        for (e, c) in enumerate_with_costs(scn, x, limit)? {
            if oracle.label(&e) == y_target && best.as_ref().map_or(true, |(_, bc)| c < *bc) {
                best = Some((e, c));
            }
        }
        Ok(best)
    }

    /// Maximum-utility goal subject to cost <= eps; ties keep the first in
    /// enumeration order.
    pub fn max_utility_goal(
        scn: &Scenario,
        oracle: &dyn Oracle,
        x: &Example,
        y_target: u8,
        eps: f64,
        limit: usize,
    ) -> Result<Option<(Example, f64, f64)>> {
        let mut best: Option<(Example, f64, f64)> = None;
        for (e, c) in enumerate_with_costs(scn, x, limit)? {
            if c > eps || oracle.label(&e) != y_target {
                continue;
            }
            let mut goal = e;
            goal.label = y_target;
            let u = crate::cost::utility(scn.gain.attack_gain(&scn.schema, x, &goal), c);
            if best.as_ref().map_or(true, |(_, _, bu)| u > *bu) {
                best = Some((goal, c, u));
            }
        }
        Ok(best)
    }
}
