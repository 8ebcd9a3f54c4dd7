//! Experiment orchestration: trains a roster of models (clean, defended,
//! and a masking-robust baseline), runs a grid of attacks against each,
//! and writes a report directory whose every aggregate can be re-derived
//! from the per-example records it ships with. [`audit_report`] performs
//! that re-derivation from disk alone, trusting nothing the runner kept in
//! memory.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advtrain::{adv_train_cost_bounded, adv_train_utility_bounded, pgd_attack_baseline};
use crate::cost::{cost_bound_for_margin, total_cost, utility, CostSpec};
use crate::domain::{example_from_json, example_to_json, load_dataset, Dataset, Example, Masker};
use crate::encoding::Encoder;
use crate::error::{Error, Result};
use crate::model::{parse_arch, train, BlackBox, MaskedModel, ModelParams, TrainHyper};
use crate::scenario::Scenario;
use crate::search::{
    best_first_search, AttackStatus, BudgetMode, OutcomeRecord, ScoringKind, SearchConfig,
    DEFAULT_ITERATION_CAP,
};
use crate::synth::{generate, SynthConfig};

/// Where the experiment's examples come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    /// Generate a fresh synthetic dataset from the experiment seed.
    Synthetic {
        #[serde(default)]
        config: SynthConfig,
    },
    /// Load a scenario file and a CSV of rows conforming to it.
    Csv { schema: PathBuf, data: PathBuf },
}

/// One architecture to train. The roster expands each spec into a clean
/// model, one defended model per configured defense parameter, and the
/// robust baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Architecture string, e.g. `lr` or `mlp:16,8`.
    pub arch: String,
    /// Training hyperparameters. The seed field is ignored; every model's
    /// seed is derived from the experiment seed so one knob replays the
    /// whole run.
    #[serde(default)]
    pub hyper: Option<TrainHyper>,
}

fn default_beam() -> Option<usize> {
    Some(1)
}

fn default_pgd_steps() -> usize {
    20
}

/// One attack to run against every model in the roster.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AttackSpec {
    /// Best-first graph search over single-feature edits.
    Graph {
        budget: BudgetMode,
        scoring: ScoringKind,
        /// Open-queue capacity; `null` leaves it unbounded.
        #[serde(default = "default_beam")]
        beam: Option<usize>,
    },
    /// White-box gradient baseline: PGD in the relaxed space, decoded and
    /// audited against the true discrete cost.
    Pgd {
        epsilon: f64,
        #[serde(default = "default_pgd_steps")]
        steps: usize,
    },
}

fn default_true() -> bool {
    true
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_iteration_cap() -> u64 {
    DEFAULT_ITERATION_CAP
}

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub models: Vec<ModelSpec>,
    /// Cost budgets to train cost-bounded defenses at (may be empty).
    #[serde(default)]
    pub defense_epsilons: Vec<f64>,
    /// Profit margins to train utility-bounded defenses at (may be empty).
    #[serde(default)]
    pub defense_taus: Vec<f64>,
    /// Inner-maximization steps used by adversarial training.
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    pub attacks: Vec<AttackSpec>,
    /// Also train the masking-robust baseline for each spec.
    #[serde(default = "default_true")]
    pub robust_baseline: bool,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Expansion cap applied to every graph attack.
    #[serde(default = "default_iteration_cap")]
    pub attack_iteration_cap: u64,
    /// Truncate the test split to this many examples before attacking.
    /// The persisted test set is the truncated one, so reported rates stay
    /// rates over the shipped file.
    #[serde(default)]
    pub max_attack_examples: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config("experiment needs at least one model"));
        }
        if self.attacks.is_empty() {
            return Err(Error::config("experiment needs at least one attack"));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.models.len() {
            return Err(Error::config("model names must be unique"));
        }
        for m in &self.models {
            if m.name.is_empty() {
                return Err(Error::config("model name must be non-empty"));
            }
            parse_arch(&m.arch)?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train fraction must lie strictly in (0, 1)"));
        }
        for &e in &self.defense_epsilons {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::config("defense cost budgets must be finite and >= 0"));
            }
        }
        for &t in &self.defense_taus {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::config("defense margins must be finite and >= 0"));
            }
        }
        if self.pgd_steps == 0 {
            return Err(Error::config("inner maximization needs at least one step"));
        }
        if self.attack_iteration_cap == 0 {
            return Err(Error::config("iteration cap must be at least 1"));
        }
        if self.max_attack_examples == Some(0) {
            return Err(Error::config("max attack examples must be at least 1"));
        }
        let mut attack_names = Vec::new();
        for a in &self.attacks {
            a.validate()?;
            attack_names.push(a.name());
        }
        attack_names.sort_unstable();
        attack_names.dedup();
        if attack_names.len() != self.attacks.len() {
            return Err(Error::config("attack grid contains duplicate attacks"));
        }
        Ok(())
    }
}

/// Renders a parameter for attack and model names: `2`, `0.5`, `inf`.
fn fmt_param(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Graph {
                budget,
                scoring,
                beam,
            } => {
                if *beam == Some(0) {
                    return Err(Error::config("beam capacity must be at least 1"));
                }
                match *budget {
                    BudgetMode::CostBounded { epsilon } => {
                        if epsilon.is_nan() || epsilon < 0.0 {
                            return Err(Error::config("attack cost budget must be >= 0"));
                        }
                    }
                    BudgetMode::UtilityBounded { tau } => {
                        if !tau.is_finite() || tau < 0.0 {
                            return Err(Error::config("attack margin must be finite and >= 0"));
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
                let finite_budget = match *budget {
                    BudgetMode::CostBounded { epsilon } => epsilon.is_finite(),
                    BudgetMode::MinCost => false,
                    _ => true,
                };
                if matches!(scoring, ScoringKind::PotentialSearch) && !finite_budget {
                    return Err(Error::config("potential search needs a finite cost budget"));
                }
                if let ScoringKind::AStar { lambda } = scoring {
                    if !(*lambda > 0.0) {
                        return Err(Error::config("greediness must be positive"));
                    }
                }
            }
            AttackSpec::Pgd { epsilon, steps } => {
                if !epsilon.is_finite() || *epsilon < 0.0 {
                    return Err(Error::config("attack cost budget must be finite and >= 0"));
                }
                if *steps == 0 {
                    return Err(Error::config("gradient attack needs at least one step"));
                }
            }
        }
        Ok(())
    }

    /// Stable identifier used in report files, derived from the attack's
    /// parameters: `cb_e2_universal_greedy_b1`, `mincost_uniform_cost_binf`,
    /// `pgd_e2_n20`.
    pub fn name(&self) -> String {
        match self {
            AttackSpec::Graph {
                budget,
                scoring,
                beam,
            } => {
                let budget_part = match *budget {
                    BudgetMode::CostBounded { epsilon } => format!("cb_e{}", fmt_param(epsilon)),
                    BudgetMode::UtilityBounded { tau } => format!("ub_t{}", fmt_param(tau)),
                    BudgetMode::MinCost => "mincost".into(),
                    BudgetMode::MaxUtility { epsilon } => {
                        format!("maxutil_e{}", fmt_param(epsilon))
                    }
                };
                let beam_part = match beam {
                    Some(b) => format!("b{b}"),
                    None => "binf".into(),
                };
                format!("{budget_part}_{}_{beam_part}", scoring.label())
            }
            AttackSpec::Pgd { epsilon, steps } => {
                format!("pgd_e{}_n{steps}", fmt_param(*epsilon))
            }
        }
    }
}

/// How a roster member was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Clean,
    CostBounded,
    UtilityBounded,
    Robust,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Clean => "clean",
            ModelKind::CostBounded => "cost_bounded",
            ModelKind::UtilityBounded => "utility_bounded",
            ModelKind::Robust => "robust",
        }
    }
}

/// Aggregate measurements for one (model, attack) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    /// Clean test accuracy of the model (attack-independent).
    pub accuracy: f64,
    /// Fraction of the test set both classified correctly and attacked
    /// successfully.
    pub success_rate: f64,
    /// Mean cost over the successes counted above; absent without any.
    pub avg_cost: Option<f64>,
    /// Mean utility over the same successes; absent without any.
    pub avg_utility: Option<f64>,
    /// Success rate divided by the summed per-example attack seconds.
    /// Hardware-dependent; reported for orientation, never gated on.
    pub success_time_ratio: f64,
    /// Total oracle queries issued by the attack over the whole test set.
    pub query_total: u64,
}

/// Computes a cell's metrics from its per-example records. `accuracy` is
/// the model's clean accuracy; `test_size` the denominator for rates.
pub fn summarize(records: &[OutcomeRecord], accuracy: f64, test_size: usize) -> Metrics {
    let mut successes = 0usize;
    let mut cost_sum = 0.0;
    let mut utility_sum = 0.0;
    let mut seconds = 0.0;
    let mut query_total = 0u64;
    for r in records {
        seconds += r.seconds;
        query_total += r.queries;
        if r.status == AttackStatus::Success && r.initially_correct == Some(true) {
            successes += 1;
            cost_sum += r.cost.unwrap_or(0.0);
            utility_sum += r.utility.unwrap_or(0.0);
        }
    }
    let success_rate = successes as f64 / test_size as f64;
    Metrics {
        accuracy,
        success_rate,
        avg_cost: (successes > 0).then(|| cost_sum / successes as f64),
        avg_utility: (successes > 0).then(|| utility_sum / successes as f64),
        success_time_ratio: if seconds > 0.0 { success_rate / seconds } else { 0.0 },
        query_total,
    }
}

/// Accuracy of the constant majority-class predictor on a test set.
pub fn random_baseline(test: &Dataset) -> f64 {
    if test.rows.is_empty() {
        return 0.0;
    }
    let ones = test.rows.iter().filter(|x| x.label == 1).count() as f64;
    let frac = ones / test.rows.len() as f64;
    frac.max(1.0 - frac)
}

/// One (model, attack) row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub model: String,
    pub kind: ModelKind,
    /// The defense's budget or margin, absent for clean and robust models.
    pub defense_param: Option<f64>,
    pub attack: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// One trained roster member as listed in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub kind: ModelKind,
    pub defense_param: Option<f64>,
    pub arch: String,
    pub accuracy: f64,
}

/// Everything the experiment reports, as written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub random_accuracy: f64,
    pub test_size: usize,
    pub models: Vec<ModelSummary>,
    pub cells: Vec<CellReport>,
}

/// A trained model together with the pieces its attacks need.
struct RosterModel {
    name: String,
    kind: ModelKind,
    defense_param: Option<f64>,
    arch_label: String,
    accuracy: f64,
    target: Target,
}

enum Target {
    Plain(ModelParams),
    /// The masking baseline: trained on the masked schema, queried through
    /// the masker.
    Robust {
        params: ModelParams,
        encoder: Encoder,
        masker: Masker,
    },
}

fn load_source(source: &DataSource, seed: u64) -> Result<(Scenario, Dataset)> {
    match source {
        DataSource::Synthetic { config } => generate(config, seed),
        DataSource::Csv { schema, data } => {
            let scn = Scenario::load(schema)?;
            let ds = load_dataset(&scn.schema, data)?;
            Ok((scn, ds))
        }
    }
}

/// Seed offsets: data generation uses the experiment seed itself, the
/// train/test split adds 1, and each trained model gets
/// `seed + 1000 * (spec_index + 1) + slot` where slots number one base
/// model's variants in order (clean, defenses, robust).
fn model_seed(experiment_seed: u64, spec_index: usize, slot: u64) -> u64 {
    experiment_seed
        .wrapping_add(1000 * (spec_index as u64 + 1))
        .wrapping_add(slot)
}

fn plain_accuracy(params: &ModelParams, encoder: &Encoder, test: &Dataset) -> f64 {
    let xs: Vec<_> = test.rows.iter().map(|r| encoder.encode(r)).collect();
    let ys: Vec<f64> = test.rows.iter().map(|r| f64::from(r.label)).collect();
    params.accuracy(&xs, &ys)
}

fn masked_accuracy(
    params: &ModelParams,
    encoder: &Encoder,
    masker: &Masker,
    test: &Dataset,
) -> f64 {
    let hits = test
        .rows
        .iter()
        .filter(|x| {
            let masked = masker.mask_example(x);
            params.predict_label(&encoder.encode(&masked).view()) == x.label
        })
        .count();
    hits as f64 / test.rows.len() as f64
}

fn train_roster(
    cfg: &ExperimentConfig,
    scn: &Scenario,
    encoder: &Encoder,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<Vec<RosterModel>> {
    let mut roster = Vec::new();
    for (spec_index, spec) in cfg.models.iter().enumerate() {
        let arch = parse_arch(&spec.arch)?;
        let arch_label = arch.label();
        let base_hyper = spec.hyper.clone().unwrap_or_default();
        let mut slot = 0u64;
        let hyper_for = |slot: &mut u64| {
            let mut h = base_hyper.clone();
            h.seed = model_seed(cfg.seed, spec_index, *slot);
            *slot += 1;
            h
        };

        let hyper = hyper_for(&mut slot);
        let (params, _) = train(train_ds, encoder, arch.clone(), &hyper)?;
        roster.push(RosterModel {
            name: format!("{}_clean", spec.name),
            kind: ModelKind::Clean,
            defense_param: None,
            arch_label: arch_label.clone(),
            accuracy: plain_accuracy(&params, encoder, test_ds),
            target: Target::Plain(params),
        });

        for &epsilon in &cfg.defense_epsilons {
            let hyper = hyper_for(&mut slot);
            let (params, _) = adv_train_cost_bounded(
                scn,
                encoder,
                train_ds,
                arch.clone(),
                epsilon,
                cfg.pgd_steps,
                &hyper,
            )?;
            roster.push(RosterModel {
                name: format!("{}_cb_e{}", spec.name, fmt_param(epsilon)),
                kind: ModelKind::CostBounded,
                defense_param: Some(epsilon),
                arch_label: arch_label.clone(),
                accuracy: plain_accuracy(&params, encoder, test_ds),
                target: Target::Plain(params),
            });
        }

        for &tau in &cfg.defense_taus {
            let hyper = hyper_for(&mut slot);
            let (params, _) = adv_train_utility_bounded(
                scn,
                encoder,
                train_ds,
                arch.clone(),
                tau,
                cfg.pgd_steps,
                &hyper,
            )?;
            roster.push(RosterModel {
                name: format!("{}_ub_t{}", spec.name, fmt_param(tau)),
                kind: ModelKind::UtilityBounded,
                defense_param: Some(tau),
                arch_label: arch_label.clone(),
                accuracy: plain_accuracy(&params, encoder, test_ds),
                target: Target::Plain(params),
            });
        }

        if cfg.robust_baseline {
            let hyper = hyper_for(&mut slot);
            let (masked_schema, masker) = Masker::new(&scn.schema);
            let decls = vec![None; masked_schema.features.len()];
            let masked_costs = CostSpec::compile(&masked_schema, &decls)?;
            let masked_encoder = Encoder::new(&masked_schema, &masked_costs)?;
            let masked_train = Dataset {
                schema: masked_schema,
                rows: train_ds.rows.iter().map(|x| masker.mask_example(x)).collect(),
            };
            let (params, _) = train(&masked_train, &masked_encoder, arch.clone(), &hyper)?;
            roster.push(RosterModel {
                name: format!("{}_robust", spec.name),
                kind: ModelKind::Robust,
                defense_param: None,
                arch_label: arch_label.clone(),
                accuracy: masked_accuracy(&params, &masked_encoder, &masker, test_ds),
                target: Target::Robust {
                    params,
                    encoder: masked_encoder,
                    masker,
                },
            });
        }
    }
    Ok(roster)
}

/// Whether the model classifies `x` correctly, computed outside any
/// query-counting oracle so attack query totals stay pure.
fn initially_correct(model: &RosterModel, encoder: &Encoder, x: &Example) -> bool {
    match &model.target {
        Target::Plain(params) => params.predict_label(&encoder.encode(x).view()) == x.label,
        Target::Robust {
            params,
            encoder: menc,
            masker,
        } => {
            let masked = masker.mask_example(x);
            params.predict_label(&menc.encode(&masked).view()) == x.label
        }
    }
}

/// Runs one attack against one model for a single example.
fn attack_example(
    scn: &Scenario,
    encoder: &Encoder,
    model: &RosterModel,
    attack: &AttackSpec,
    cap: u64,
    example_id: u64,
    x: &Example,
) -> Result<OutcomeRecord> {
    let correct = initially_correct(model, encoder, x);
    let mut record = match (attack, &model.target) {
        (
            AttackSpec::Graph {
                budget,
                scoring,
                beam,
            },
            target,
        ) => {
            let config = SearchConfig {
                budget: *budget,
                beam: *beam,
                iteration_cap: cap,
                target: None,
            };
            let outcome = match target {
                Target::Plain(params) => {
                    let oracle = BlackBox::new(params, encoder);
                    best_first_search(scn, &oracle, x, *scoring, &config)?
                }
                Target::Robust {
                    params,
                    encoder: menc,
                    masker,
                } => {
                    let oracle =
                        MaskedModel::new(params.clone(), menc.clone(), masker.clone());
                    best_first_search(scn, &oracle, x, *scoring, &config)?
                }
            };
            OutcomeRecord::new(example_id, &scn.schema, &outcome, *scoring, &config)
        }
        (AttackSpec::Pgd { epsilon, steps }, Target::Plain(params)) => {
            let pgd = pgd_attack_baseline(params, scn, encoder, x, *epsilon, *steps)?;
            pgd_record(scn, example_id, *epsilon, pgd.outcome, pgd.failure)
        }
        (AttackSpec::Pgd { epsilon, .. }, Target::Robust { .. }) => {
            // Masking makes the score constant in every coordinate the
            // adversary controls, so the gradient there is identically
            // zero and PGD never leaves the start point. Build that
            // outcome directly.
            let started = std::time::Instant::now();
            let (status, failure, goal) = if correct {
                (
                    AttackStatus::NoSolution,
                    Some(crate::advtrain::PgdFailure::NotMisclassified),
                    None,
                )
            } else {
                let mut goal = x.clone();
                goal.label = 1 - (x.label & 1);
                let gain = scn.gain.attack_gain(&scn.schema, x, &goal);
                (AttackStatus::Success, None, Some((goal, gain)))
            };
            let outcome = crate::search::AttackOutcome {
                status,
                adversarial: goal.as_ref().map(|(g, _)| g.clone()),
                cost: goal.as_ref().map(|_| 0.0),
                gain: goal.as_ref().map(|(_, g)| *g),
                utility: goal.as_ref().map(|(_, g)| utility(*g, 0.0)),
                expansions: 0,
                queries: 0,
                seconds: started.elapsed().as_secs_f64(),
            };
            pgd_record(scn, example_id, *epsilon, outcome, failure)
        }
    };
    record.model = Some(model.name.clone());
    record.attack = Some(attack.name());
    record.initially_correct = Some(correct);
    Ok(record)
}

fn pgd_record(
    scn: &Scenario,
    example_id: u64,
    epsilon: f64,
    outcome: crate::search::AttackOutcome,
    failure: Option<crate::advtrain::PgdFailure>,
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
        budget_mode: "pgd".into(),
        epsilon_or_tau: Some(epsilon),
        scoring: "gradient".into(),
        beam: None,
        adversarial: outcome
            .adversarial
            .as_ref()
            .map(|g| example_to_json(&scn.schema, g)),
        model: None,
        attack: None,
        initially_correct: None,
        failure: failure.map(|f| f.label().to_string()),
    }
}

fn run_cell(
    scn: &Scenario,
    encoder: &Encoder,
    model: &RosterModel,
    attack: &AttackSpec,
    cap: u64,
    test: &Dataset,
) -> Result<Vec<OutcomeRecord>> {
    let results: Vec<Result<OutcomeRecord>> = test
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, x)| attack_example(scn, encoder, model, attack, cap, i as u64, x))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r.map_err(|e| {
            Error::config(format!(
                "cell {}/{} failed: {e}",
                model.name,
                attack.name()
            ))
        })?);
    }
    Ok(records)
}

const METRICS_HEADER: [&str; 10] = [
    "model",
    "kind",
    "defense_param",
    "attack",
    "accuracy",
    "success_rate",
    "avg_cost",
    "avg_utility",
    "success_time_ratio",
    "query_total",
];

const TRADEOFF_HEADER: [&str; 7] = [
    "model",
    "kind",
    "defense_param",
    "attack",
    "accuracy",
    "success_rate",
    "avg_utility",
];

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_metrics_csv(path: &Path, cells: &[CellReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let write_err = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    w.write_record(METRICS_HEADER).map_err(write_err)?;
    for c in cells {
        let m = &c.metrics;
        w.write_record([
            c.model.as_str(),
            c.kind.label(),
            &opt_field(c.defense_param),
            c.attack.as_str(),
            &format!("{}", m.accuracy),
            &format!("{}", m.success_rate),
            &opt_field(m.avg_cost),
            &opt_field(m.avg_utility),
            &format!("{}", m.success_time_ratio),
            &format!("{}", m.query_total),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_tradeoff_csv(path: &Path, cells: &[CellReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let write_err = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    w.write_record(TRADEOFF_HEADER).map_err(write_err)?;
    for c in cells {
        let m = &c.metrics;
        w.write_record([
            c.model.as_str(),
            c.kind.label(),
            &opt_field(c.defense_param),
            c.attack.as_str(),
            &format!("{}", m.accuracy),
            &format!("{}", m.success_rate),
            &opt_field(m.avg_utility),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs the whole experiment and writes the report directory: the scenario
/// (`scenario.json`), the attacked test split (`test_set.csv`), every
/// per-example record (`outcomes.jsonl`), per-cell aggregates
/// (`metrics.csv`), accuracy-robustness curve points (`tradeoff.csv`), and
/// the overall summary (`summary.json`). Deterministic per config except
/// for wall-clock fields (`seconds`, `success_time_ratio`).
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (scn, data) = load_source(&cfg.data, cfg.seed)?;
    let (train_ds, mut test_ds) = data.split(cfg.train_fraction, cfg.seed.wrapping_add(1));
    if let Some(limit) = cfg.max_attack_examples {
        test_ds.rows.truncate(limit);
    }
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::config("train/test split left one side empty"));
    }
    let encoder = Encoder::new(&scn.schema, &scn.costs)?;

    scn.save(&out.join("scenario.json"))?;
    test_ds.save_csv(&out.join("test_set.csv"))?;

    let roster = train_roster(cfg, &scn, &encoder, &train_ds, &test_ds)?;

    let outcomes_path = out.join("outcomes.jsonl");
    let mut outcomes_file =
        std::fs::File::create(&outcomes_path).map_err(|e| Error::io(&outcomes_path, e))?;
    let mut cells = Vec::new();
    for model in &roster {
        for attack in &cfg.attacks {
            let records = run_cell(
                &scn,
                &encoder,
                model,
                attack,
                cfg.attack_iteration_cap,
                &test_ds,
            )?;
            for r in &records {
                let line = serde_json::to_string(r).map_err(|e| Error::json(&outcomes_path, e))?;
                writeln!(outcomes_file, "{line}").map_err(|e| Error::io(&outcomes_path, e))?;
            }
            cells.push(CellReport {
                model: model.name.clone(),
                kind: model.kind,
                defense_param: model.defense_param,
                attack: attack.name(),
                metrics: summarize(&records, model.accuracy, test_ds.len()),
            });
        }
    }
    outcomes_file
        .flush()
        .map_err(|e| Error::io(&outcomes_path, e))?;

    let report = Report {
        random_accuracy: random_baseline(&test_ds),
        test_size: test_ds.len(),
        models: roster
            .iter()
            .map(|m| ModelSummary {
                name: m.name.clone(),
                kind: m.kind,
                defense_param: m.defense_param,
                arch: m.arch_label.clone(),
                accuracy: m.accuracy,
            })
            .collect(),
        cells,
    };

    write_metrics_csv(&out.join("metrics.csv"), &report.cells)?;
    write_tradeoff_csv(&out.join("tradeoff.csv"), &report.cells)?;
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&summary_path, e))?;
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;

    audit_report(out)?;
    Ok(report)
}

/// What the audit verified, for reporting.
#[derive(Debug, Clone, Copy)]
pub struct AuditStats {
    pub cells: usize,
    pub records: usize,
}

/// Tolerance for re-derived money aggregates and rates.
const AUDIT_TOL: f64 = 1e-6;
/// Slack for budget-compliance checks, matching the gradient baseline's
/// decode audit.
const BUDGET_SLACK: f64 = 1e-9;

struct MetricsRow {
    model: String,
    kind: String,
    defense_param: Option<f64>,
    attack: String,
    metrics: Metrics,
}

fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
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
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::audit(format!(
            "{}: unexpected header {:?}",
            path.display(),
            headers
        )));
    }
    let parse_f64 = |field: &str, row: usize, name: &str| -> Result<f64> {
        field.parse::<f64>().map_err(|_| {
            Error::audit(format!(
                "{}: row {row}: cannot parse {name} value '{field}'",
                path.display()
            ))
        })
    };
    let parse_opt = |field: &str, row: usize, name: &str| -> Result<Option<f64>> {
        if field.is_empty() {
            Ok(None)
        } else {
            parse_f64(field, row, name).map(Some)
        }
    };
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        if record.len() != METRICS_HEADER.len() {
            return Err(Error::audit(format!(
                "{}: row {i} has {} fields",
                path.display(),
                record.len()
            )));
        }
        rows.push(MetricsRow {
            model: record[0].to_string(),
            kind: record[1].to_string(),
            defense_param: parse_opt(&record[2], i, "defense_param")?,
            attack: record[3].to_string(),
            metrics: Metrics {
                accuracy: parse_f64(&record[4], i, "accuracy")?,
                success_rate: parse_f64(&record[5], i, "success_rate")?,
                avg_cost: parse_opt(&record[6], i, "avg_cost")?,
                avg_utility: parse_opt(&record[7], i, "avg_utility")?,
                success_time_ratio: parse_f64(&record[8], i, "success_time_ratio")?,
                query_total: record[9].parse::<u64>().map_err(|_| {
                    Error::audit(format!(
                        "{}: row {i}: cannot parse query_total '{}'",
                        path.display(),
                        &record[9]
                    ))
                })?,
            },
        });
    }
    Ok(rows)
}

fn load_outcomes(path: &Path) -> Result<Vec<OutcomeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: OutcomeRecord = serde_json::from_str(line).map_err(|e| {
            Error::audit(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        records.push(r);
    }
    Ok(records)
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn near_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => near(a, b, tol),
        _ => false,
    }
}

/// Re-derives every reported aggregate from the report directory alone and
/// fails on any discrepancy: stored adversarial examples must reproduce
/// their recorded cost, gain, and utility through the cost model; recorded
/// costs must respect the recorded budgets; per-cell aggregates must match
/// `metrics.csv`, `tradeoff.csv`, and `summary.json`; robust-model rows
/// must report zero success.
pub fn audit_report(dir: &Path) -> Result<AuditStats> {
    let scn = Scenario::load(&dir.join("scenario.json"))?;
    let test = load_dataset(&scn.schema, &dir.join("test_set.csv"))?;
    if test.is_empty() {
        return Err(Error::audit("test set is empty"));
    }
    let records = load_outcomes(&dir.join("outcomes.jsonl"))?;
    let metrics_path = dir.join("metrics.csv");
    let rows = parse_metrics_csv(&metrics_path)?;

    // group records by (model, attack) in file order
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&OutcomeRecord>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let (Some(model), Some(attack)) = (&r.model, &r.attack) else {
            return Err(Error::audit(format!(
                "outcome record {i} is missing its model or attack tag"
            )));
        };
        let key = (model.clone(), attack.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }

    if order.len() != rows.len() {
        return Err(Error::audit(format!(
            "outcomes contain {} cells but metrics.csv has {} rows",
            order.len(),
            rows.len()
        )));
    }

    for (row_idx, row) in rows.iter().enumerate() {
        let key = (row.model.clone(), row.attack.clone());
        if order[row_idx] != key {
            return Err(Error::audit(format!(
                "metrics.csv row {row_idx} is {}/{} but outcomes order has {}/{}",
                row.model, row.attack, order[row_idx].0, order[row_idx].1
            )));
        }
        let cell = &groups[&key];
        audit_cell(&scn, &test, row, row_idx, cell)?;
    }

    // a cell's initially_correct flags are a property of the model alone,
    // so they must agree across that model's attacks
    let mut flags_by_model: HashMap<&str, Vec<bool>> = HashMap::new();
    for key in &order {
        let flags: Vec<bool> = groups[key]
            .iter()
            .map(|r| r.initially_correct.unwrap_or(false))
            .collect();
        match flags_by_model.get(key.0.as_str()) {
            Some(prev) if *prev != flags => {
                return Err(Error::audit(format!(
                    "model {} reports different initial classifications across attacks",
                    key.0
                )));
            }
            Some(_) => {}
            None => {
                flags_by_model.insert(key.0.as_str(), flags);
            }
        }
    }

    audit_tradeoff(&dir.join("tradeoff.csv"), &rows)?;
    audit_summary(&dir.join("summary.json"), &test, &rows)?;

    Ok(AuditStats {
        cells: rows.len(),
        records: records.len(),
    })
}

fn audit_cell(
    scn: &Scenario,
    test: &Dataset,
    row: &MetricsRow,
    row_idx: usize,
    cell: &[&OutcomeRecord],
) -> Result<()> {
    let name = format!("{}/{}", row.model, row.attack);
    if cell.len() != test.len() {
        return Err(Error::audit(format!(
            "cell {name} has {} records for {} test examples",
            cell.len(),
            test.len()
        )));
    }
    let mut successes = 0usize;
    let mut cost_sum = 0.0;
    let mut utility_sum = 0.0;
    let mut seconds = 0.0;
    let mut query_total = 0u64;
    let mut correct = 0usize;
    for (i, r) in cell.iter().enumerate() {
        if r.example_id != i as u64 {
            return Err(Error::audit(format!(
                "cell {name}: record {i} carries example_id {}",
                r.example_id
            )));
        }
        let x = &test.rows[i];
        audit_record(scn, x, r, &name)?;
        seconds += r.seconds;
        query_total += r.queries;
        if r.initially_correct == Some(true) {
            correct += 1;
        }
        if r.status == AttackStatus::Success && r.initially_correct == Some(true) {
            successes += 1;
            cost_sum += r.cost.unwrap_or(0.0);
            utility_sum += r.utility.unwrap_or(0.0);
        }
    }
    let n = test.len() as f64;
    let success_rate = successes as f64 / n;
    if !near(success_rate, row.metrics.success_rate, AUDIT_TOL) {
        return Err(Error::audit(format!(
            "cell {name}: success_rate {} reported, {success_rate} re-derived",
            row.metrics.success_rate
        )));
    }
    let avg_cost = (successes > 0).then(|| cost_sum / successes as f64);
    if !near_opt(avg_cost, row.metrics.avg_cost, AUDIT_TOL) {
        return Err(Error::audit(format!(
            "cell {name}: avg_cost {:?} reported, {avg_cost:?} re-derived",
            row.metrics.avg_cost
        )));
    }
    let avg_utility = (successes > 0).then(|| utility_sum / successes as f64);
    if !near_opt(avg_utility, row.metrics.avg_utility, AUDIT_TOL) {
        return Err(Error::audit(format!(
            "cell {name}: avg_utility {:?} reported, {avg_utility:?} re-derived",
            row.metrics.avg_utility
        )));
    }
    if query_total != row.metrics.query_total {
        return Err(Error::audit(format!(
            "cell {name}: query_total {} reported, {query_total} re-derived",
            row.metrics.query_total
        )));
    }
    let ratio = if seconds > 0.0 { success_rate / seconds } else { 0.0 };
    if !near(ratio, row.metrics.success_time_ratio, AUDIT_TOL.max(ratio.abs() * 1e-9)) {
        return Err(Error::audit(format!(
            "cell {name}: success_time_ratio {} reported, {ratio} re-derived",
            row.metrics.success_time_ratio
        )));
    }
    if !near(correct as f64 / n, row.metrics.accuracy, AUDIT_TOL) {
        return Err(Error::audit(format!(
            "cell {name}: accuracy {} reported, but {correct} of {} records are marked initially correct",
            row.metrics.accuracy,
            test.len()
        )));
    }
    if row.kind == "robust" && (successes != 0 || row.metrics.success_rate != 0.0) {
        return Err(Error::audit(format!(
            "robust cell {name} (row {row_idx}) reports nonzero success"
        )));
    }
    Ok(())
}

fn audit_record(scn: &Scenario, x: &Example, r: &OutcomeRecord, cell: &str) -> Result<()> {
    let id = r.example_id;
    let fail = |msg: String| Err(Error::audit(format!("cell {cell}, example {id}: {msg}")));
    if r.status == AttackStatus::Success {
        let (Some(adv_json), Some(cost), Some(gain), Some(util)) =
            (&r.adversarial, r.cost, r.gain, r.utility)
        else {
            return fail("success record is missing its example or money fields".into());
        };
        let adv = example_from_json(&scn.schema, adv_json)
            .map_err(|e| Error::audit(format!("cell {cell}, example {id}: {e}")))?;
        for (i, f) in scn.schema.features.iter().enumerate() {
            if !f.mutable && adv.values[i] != x.values[i] {
                return fail(format!("immutable feature {} was changed", f.name));
            }
        }
        if adv.label != 1 - (x.label & 1) {
            return fail("adversarial example does not carry the flipped label".into());
        }
        let true_cost = total_cost(&scn.schema, &scn.costs, x, &adv)
            .map_err(|e| Error::audit(format!("cell {cell}, example {id}: {e}")))?;
        if !near(true_cost, cost, AUDIT_TOL) {
            return fail(format!("recorded cost {cost}, recomputed {true_cost}"));
        }
        let true_gain = scn.gain.attack_gain(&scn.schema, x, &adv);
        if !near(true_gain, gain, AUDIT_TOL) {
            return fail(format!("recorded gain {gain}, recomputed {true_gain}"));
        }
        if !near(utility(true_gain, true_cost), util, AUDIT_TOL) {
            return fail(format!(
                "recorded utility {util}, recomputed {}",
                utility(true_gain, true_cost)
            ));
        }
        let budget = match r.budget_mode.as_str() {
            "cost_bounded" | "max_utility" | "pgd" => r.epsilon_or_tau,
            "utility_bounded" => {
                let tau = r.epsilon_or_tau.ok_or_else(|| {
                    Error::audit(format!("cell {cell}, example {id}: missing margin"))
                })?;
                Some(cost_bound_for_margin(scn.gain.gain_of(&scn.schema, x), tau))
            }
            "min_cost" => None,
            other => return fail(format!("unknown budget mode '{other}'")),
        };
        if let Some(eps) = budget {
            if true_cost > eps + BUDGET_SLACK {
                return fail(format!("cost {true_cost} exceeds budget {eps}"));
            }
        }
        if r.failure.is_some() {
            return fail("success record carries a failure diagnostic".into());
        }
    } else {
        if r.adversarial.is_some() || r.cost.is_some() || r.gain.is_some() || r.utility.is_some()
        {
            return fail(format!(
                "{:?} record carries success-only fields",
                r.status
            ));
        }
    }
    Ok(())
}

fn audit_tradeoff(path: &Path, rows: &[MetricsRow]) -> Result<()> {
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
    if headers.iter().collect::<Vec<_>>() != TRADEOFF_HEADER {
        return Err(Error::audit(format!(
            "{}: unexpected header {:?}",
            path.display(),
            headers
        )));
    }
    let mut count = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let Some(row) = rows.get(i) else {
            return Err(Error::audit(format!(
                "{}: more rows than metrics.csv",
                path.display()
            )));
        };
        let expected = [
            row.model.clone(),
            row.kind.clone(),
            opt_field(row.defense_param),
            row.attack.clone(),
            format!("{}", row.metrics.accuracy),
            format!("{}", row.metrics.success_rate),
            opt_field(row.metrics.avg_utility),
        ];
        let got: Vec<&str> = record.iter().collect();
        if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::audit(format!(
                "{}: row {i} disagrees with metrics.csv",
                path.display()
            )));
        }
        count += 1;
    }
    if count != rows.len() {
        return Err(Error::audit(format!(
            "{}: {} rows for {} metrics rows",
            path.display(),
            count,
            rows.len()
        )));
    }
    Ok(())
}

fn audit_summary(path: &Path, test: &Dataset, rows: &[MetricsRow]) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if report.test_size != test.len() {
        return Err(Error::audit(format!(
            "summary test_size {} but test set has {} rows",
            report.test_size,
            test.len()
        )));
    }
    let expected = random_baseline(test);
    if !near(report.random_accuracy, expected, 1e-12) {
        return Err(Error::audit(format!(
            "summary random_accuracy {} but majority class gives {expected}",
            report.random_accuracy
        )));
    }
    if report.cells.len() != rows.len() {
        return Err(Error::audit(format!(
            "summary lists {} cells but metrics.csv has {}",
            report.cells.len(),
            rows.len()
        )));
    }
    for (i, (cell, row)) in report.cells.iter().zip(rows).enumerate() {
        let matches = cell.model == row.model
            && cell.kind.label() == row.kind
            && near_opt(cell.defense_param, row.defense_param, 0.0)
            && cell.attack == row.attack
            && near(cell.metrics.accuracy, row.metrics.accuracy, 1e-9)
            && near(cell.metrics.success_rate, row.metrics.success_rate, 1e-9)
            && near_opt(cell.metrics.avg_cost, row.metrics.avg_cost, 1e-9)
            && near_opt(cell.metrics.avg_utility, row.metrics.avg_utility, 1e-9)
            && cell.metrics.query_total == row.metrics.query_total;
        if !matches {
            return Err(Error::audit(format!(
                "summary cell {i} disagrees with metrics.csv row {i}"
            )));
        }
    }
    for m in &report.models {
        if m.kind == ModelKind::Robust {
            for row in rows.iter().filter(|r| r.model == m.name) {
                if row.metrics.success_rate != 0.0 {
                    return Err(Error::audit(format!(
                        "robust model {} has nonzero success_rate in metrics.csv",
                        m.name
                    )));
                }
            }
        }
    }
    Ok(())
}
