//! Command-line surface of the toolkit. Every subcommand is deterministic
//! given identical flags and seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 metric-audit failure.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use advtab::advtrain::{adv_train, AdvTrainConfig, DefenseMode};
use advtab::domain::load_dataset;
use advtab::encoding::Encoder;
use advtab::eval::{audit_report, run_experiment, summarize, AttackSpec, ExperimentConfig};
use advtab::model::{
    load_model, parse_arch, save_model, train, BlackBox, TrainHyper,
};
use advtab::projection::project_weighted_simplex;
use advtab::scenario::Scenario;
use advtab::search::{
    best_first_search, BudgetMode, OutcomeRecord, ScoringKind, SearchConfig,
    DEFAULT_ITERATION_CAP,
};
use advtab::synth::{generate, SynthConfig};

/// Cost-aware adversarial attacks and defenses for tabular classifiers.
#[derive(Parser)]
#[command(name = "advtab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset plus its scenario file.
    Synth(SynthArgs),
    /// Train a clean model on a dataset.
    Train(TrainArgs),
    /// Run a graph-search evasion attack against a trained model.
    Attack(AttackArgs),
    /// Adversarially train a defended model.
    Defend(DefendArgs),
    /// Run a full experiment: model roster, attack grid, audited report.
    Eval(EvalArgs),
    /// Project a displacement onto a weighted L1 ball (debugging helper).
    Project(ProjectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config JSON; defaults to the built-in benchmark scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of rows to generate.
    #[arg(long)]
    rows: Option<usize>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives scenario.json and data.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Scenario file (schema, costs, gain).
    #[arg(long)]
    schema: PathBuf,
    /// Training rows CSV.
    #[arg(long)]
    data: PathBuf,
    /// Architecture: `lr` or `mlp:H1,H2,...`.
    #[arg(long, default_value = "lr")]
    arch: String,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// RNG seed for initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Fixed cost budget (needs --epsilon; `inf` allowed).
    Cb,
    /// Per-example budget from gain minus margin (needs --tau).
    Ub,
    /// Provably cheapest evasion; forces uniform-cost order.
    Mincost,
    /// Highest-utility evasion within a finite budget (needs --epsilon).
    Maxutil,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    /// Confidence drop per unit cost, relative to the parent.
    Ug,
    /// Target-class confidence per unit cost.
    Greedy,
    /// Path cost plus weighted heuristic.
    Astar,
    /// Heuristic over remaining budget.
    Ps,
    /// Path cost alone.
    Ucs,
}

#[derive(Clone, Copy, Debug)]
struct Beam(Option<usize>);

fn parse_beam(s: &str) -> Result<Beam, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(Beam(None));
    }
    let n: usize = s
        .parse()
        .map_err(|_| format!("beam must be a positive integer or 'inf', got '{s}'"))?;
    if n == 0 {
        return Err("beam must be at least 1".into());
    }
    Ok(Beam(Some(n)))
}

#[derive(Args)]
struct AttackArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Scenario file (schema, costs, gain).
    #[arg(long)]
    schema: PathBuf,
    /// Examples to attack, CSV.
    #[arg(long)]
    data: PathBuf,
    /// Budget mode.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Cost budget for cb and maxutil.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Profit margin for ub.
    #[arg(long)]
    tau: Option<f64>,
    /// Queue ordering.
    #[arg(long, value_enum, default_value_t = ScoringArg::Ug)]
    scoring: ScoringArg,
    /// Heuristic weight of the astar scoring.
    #[arg(long, default_value_t = 1.0)]
    greediness: f64,
    /// Open-queue capacity; `inf` leaves it unbounded.
    #[arg(long, default_value = "1", value_parser = parse_beam)]
    beam: Beam,
    /// Expansion cap per example.
    #[arg(long, default_value_t = DEFAULT_ITERATION_CAP)]
    cap: u64,
    /// Attack only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
    /// Output JSONL of per-example outcome records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefendModeArg {
    /// Harden against a fixed cost budget (needs --epsilon).
    Cb,
    /// Harden against a profit-seeking adversary (needs --tau).
    Ub,
}

#[derive(Args)]
struct DefendArgs {
    /// Scenario file (schema, costs, gain).
    #[arg(long)]
    schema: PathBuf,
    /// Training rows CSV.
    #[arg(long)]
    data: PathBuf,
    /// Adversary the defense trains against.
    #[arg(long, value_enum)]
    mode: DefendModeArg,
    /// Cost budget for cb.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Profit margin for ub.
    #[arg(long)]
    tau: Option<f64>,
    /// Inner-maximization steps per sample.
    #[arg(long, default_value_t = 20)]
    pgd_steps: usize,
    /// Architecture: `lr` or `mlp:H1,H2,...`.
    #[arg(long, default_value = "lr")]
    arch: String,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// RNG seed for initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSONL file of per-epoch training logs.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config JSON.
    #[arg(long, required_unless_present = "audit_only", conflicts_with = "audit_only")]
    config: Option<PathBuf>,
    /// Report directory to write (or, with --audit-only, to verify).
    #[arg(long)]
    out: PathBuf,
    /// Verify an existing report directory instead of running.
    #[arg(long)]
    audit_only: bool,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProjectArgs {
    /// Comma-separated coordinates of the displacement to project.
    #[arg(long)]
    point: String,
    /// Comma-separated positive weights; defaults to all ones.
    #[arg(long)]
    weights: Option<String>,
    /// Weighted L1 radius.
    #[arg(long)]
    radius: f64,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version land here too; only real parse failures are
            // usage errors
            let is_usage = e.use_stderr();
            let _ = e.print();
            return i32::from(is_usage);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Defend(a) => cmd_defend(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<advtab::Error>() {
                Some(advtab::Error::Audit { .. }) => 3,
                _ => 2,
            }
        }
    }
}

fn read_to_string(path: &PathBuf) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| advtab::Error::io(path, e))?)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    // a consumer that closes the pipe early (e.g. `advtab eval ... | head`)
    // is done listening, not an error worth a nonzero exit
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str::<SynthConfig>(&read_to_string(path)?)
            .map_err(|e| advtab::Error::json(path, e))?,
        None => SynthConfig::default(),
    };
    if let Some(rows) = a.rows {
        cfg.rows = rows;
    }
    let (scn, data) = generate(&cfg, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| advtab::Error::io(&a.out, e))?;
    let scenario_path = a.out.join("scenario.json");
    let data_path = a.out.join("data.csv");
    scn.save(&scenario_path)?;
    data.save_csv(&data_path)?;
    print_json(&serde_json::json!({
        "scenario": scenario_path,
        "data": data_path,
        "rows": data.len(),
        "seed": a.seed,
    }))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let scn = Scenario::load(&a.schema)?;
    let dataset = load_dataset(&scn.schema, &a.data)?;
    let arch = parse_arch(&a.arch)?;
    let encoder = Encoder::new(&scn.schema, &scn.costs)?;
    let hyper = TrainHyper {
        lambda: a.lambda,
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
    };
    let (params, logs) = train(&dataset, &encoder, arch.clone(), &hyper)?;
    let train_meta = serde_json::json!({ "hyper": hyper, "rows": dataset.len() });
    save_model(&params, serde_json::Value::Null, train_meta, &a.out)?;
    let last = logs.last().expect("at least one epoch");
    print_json(&serde_json::json!({
        "model": a.out,
        "arch": arch.label(),
        "rows": dataset.len(),
        "epochs": logs.len(),
        "train_accuracy": last.clean_acc,
        "final_loss": last.clean_loss,
    }))
}

fn build_budget(mode: ModeArg, epsilon: Option<f64>, tau: Option<f64>) -> Result<BudgetMode> {
    let reject_eps = || -> Result<()> {
        match epsilon {
            Some(_) => Err(advtab::Error::config("--epsilon does not apply to this mode").into()),
            None => Ok(()),
        }
    };
    let reject_tau = || -> Result<()> {
        match tau {
            Some(_) => Err(advtab::Error::config("--tau does not apply to this mode").into()),
            None => Ok(()),
        }
    };
    match mode {
        ModeArg::Cb => {
            reject_tau()?;
            let epsilon =
                epsilon.ok_or_else(|| advtab::Error::config("--mode cb needs --epsilon"))?;
            Ok(BudgetMode::CostBounded { epsilon })
        }
        ModeArg::Ub => {
            reject_eps()?;
            let tau = tau.ok_or_else(|| advtab::Error::config("--mode ub needs --tau"))?;
            Ok(BudgetMode::UtilityBounded { tau })
        }
        ModeArg::Mincost => {
            reject_eps()?;
            reject_tau()?;
            Ok(BudgetMode::MinCost)
        }
        ModeArg::Maxutil => {
            reject_tau()?;
            let epsilon =
                epsilon.ok_or_else(|| advtab::Error::config("--mode maxutil needs --epsilon"))?;
            Ok(BudgetMode::MaxUtility { epsilon })
        }
    }
}

fn build_scoring(s: ScoringArg, greediness: f64) -> ScoringKind {
    match s {
        ScoringArg::Ug => ScoringKind::UniversalGreedy,
        ScoringArg::Greedy => ScoringKind::BasicGreedy,
        ScoringArg::Astar => ScoringKind::AStar { lambda: greediness },
        ScoringArg::Ps => ScoringKind::PotentialSearch,
        ScoringArg::Ucs => ScoringKind::UniformCost,
    }
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let budget = build_budget(a.mode, a.epsilon, a.tau)?;
    let scoring = build_scoring(a.scoring, a.greediness);
    let spec = AttackSpec::Graph {
        budget,
        scoring,
        beam: a.beam.0,
    };
    spec.validate()?;
    let scn = Scenario::load(&a.schema)?;
    let dataset = load_dataset(&scn.schema, &a.data)?;
    let (params, _, _) = load_model(&a.model)?;
    let encoder = Encoder::new(&scn.schema, &scn.costs)?;
    if params.input_dim() != encoder.dim() {
        return Err(advtab::Error::model(format!(
            "model expects {} inputs but the schema encodes to {}",
            params.input_dim(),
            encoder.dim()
        ))
        .into());
    }
    let config = SearchConfig {
        budget,
        beam: a.beam.0,
        iteration_cap: a.cap,
        target: None,
    };
    let model_tag = a
        .model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());

    let n = a.limit.unwrap_or(dataset.len()).min(dataset.len());
    if n == 0 {
        return Err(advtab::Error::config("no rows to attack").into());
    }
    let rows = &dataset.rows[..n];
    let results: Vec<advtab::Result<OutcomeRecord>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let correct = params.predict_label(&encoder.encode(x).view()) == x.label;
            let oracle = BlackBox::new(&params, &encoder);
            let outcome = best_first_search(&scn, &oracle, x, scoring, &config)?;
            let mut record = OutcomeRecord::new(i as u64, &scn.schema, &outcome, scoring, &config);
            record.model = Some(model_tag.clone());
            record.attack = Some(spec.name());
            record.initially_correct = Some(correct);
            Ok(record)
        })
        .collect();
    let mut records = Vec::with_capacity(n);
    for r in results {
        records.push(r?);
    }

    let mut file = std::fs::File::create(&a.out).map_err(|e| advtab::Error::io(&a.out, e))?;
    for r in &records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| advtab::Error::io(&a.out, e))?;
    }
    file.flush().map_err(|e| advtab::Error::io(&a.out, e))?;

    let correct = records
        .iter()
        .filter(|r| r.initially_correct == Some(true))
        .count();
    let metrics = summarize(&records, correct as f64 / n as f64, n);
    let mut statuses: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        let key = serde_json::to_value(r.status)?
            .as_str()
            .expect("status serializes to a string")
            .to_string();
        *statuses.entry(key).or_default() += 1;
    }
    print_json(&serde_json::json!({
        "outcomes": a.out,
        "attack": spec.name(),
        "examples": n,
        "statuses": statuses,
        "metrics": metrics,
    }))
}

fn cmd_defend(a: DefendArgs) -> Result<()> {
    let scn = Scenario::load(&a.schema)?;
    let dataset = load_dataset(&scn.schema, &a.data)?;
    let arch = parse_arch(&a.arch)?;
    let encoder = Encoder::new(&scn.schema, &scn.costs)?;
    let mode = match a.mode {
        DefendModeArg::Cb => {
            if a.tau.is_some() {
                return Err(advtab::Error::config("--tau does not apply to --mode cb").into());
            }
            let epsilon =
                a.epsilon.ok_or_else(|| advtab::Error::config("--mode cb needs --epsilon"))?;
            DefenseMode::CostBounded { epsilon }
        }
        DefendModeArg::Ub => {
            if a.epsilon.is_some() {
                return Err(advtab::Error::config("--epsilon does not apply to --mode ub").into());
            }
            let tau = a.tau.ok_or_else(|| advtab::Error::config("--mode ub needs --tau"))?;
            DefenseMode::UtilityBounded { tau }
        }
    };
    let cfg = AdvTrainConfig {
        mode,
        pgd_steps: a.pgd_steps,
    };
    let hyper = TrainHyper {
        lambda: a.lambda,
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
    };
    let (params, logs) = adv_train(&scn, &encoder, &dataset, arch.clone(), &cfg, &hyper)?;
    let defense_meta = serde_json::to_value(cfg)?;
    let train_meta = serde_json::json!({ "hyper": hyper, "rows": dataset.len() });
    save_model(&params, defense_meta, train_meta, &a.out)?;
    if let Some(log_path) = &a.log {
        let mut file =
            std::fs::File::create(log_path).map_err(|e| advtab::Error::io(log_path, e))?;
        for l in &logs {
            let line = serde_json::to_string(l)?;
            writeln!(file, "{line}").map_err(|e| advtab::Error::io(log_path, e))?;
        }
    }
    let last = logs.last().expect("at least one epoch");
    print_json(&serde_json::json!({
        "model": a.out,
        "arch": arch.label(),
        "rows": dataset.len(),
        "epochs": logs.len(),
        "train_accuracy": last.clean_acc,
        "adv_loss": last.adv_loss,
    }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.audit_only {
        let stats = audit_report(&a.out)?;
        return print_json(&serde_json::json!({
            "audit": "pass",
            "report": a.out,
            "cells": stats.cells,
            "records": stats.records,
        }));
    }
    let config_path = a.config.as_ref().expect("clap enforces --config");
    let mut cfg: ExperimentConfig = serde_json::from_str(&read_to_string(config_path)?)
        .map_err(|e| advtab::Error::json(config_path, e))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let report = run_experiment(&cfg, &a.out)?;
    print_json(&serde_json::to_value(&report)?)
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| {
                advtab::Error::config(format!("{flag}: cannot parse '{s}' as a number")).into()
            })
        })
        .collect()
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let point = parse_list("--point", &a.point)?;
    let weights = match &a.weights {
        Some(w) => parse_list("--weights", w)?,
        None => vec![1.0; point.len()],
    };
    let u = ndarray::Array1::from_vec(point.clone());
    let projected = project_weighted_simplex(&u.view(), &weights, a.radius)?;
    let norm = |v: &[f64]| -> f64 {
        v.iter()
            .zip(&weights)
            .map(|(x, w)| w * x.abs())
            .sum()
    };
    let proj_vec: Vec<f64> = projected.to_vec();
    print_json(&serde_json::json!({
        "point": point,
        "weights": weights,
        "radius": a.radius,
        "projection": proj_vec,
        "weighted_norm_before": norm(&point),
        "weighted_norm_after": norm(&proj_vec),
    }))
}
