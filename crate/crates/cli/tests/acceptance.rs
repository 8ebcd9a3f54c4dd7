//! Acceptance harness. Every test exercises one release gate end to end and
//! prints a single `[PASS]` or `[FAIL]` line, so a full run reads as a
//! checklist: `cargo test --test acceptance -- --nocapture`. Tolerances and
//! time limits are pinned next to the assertions they guard; failure
//! messages carry the measured numbers.

use std::process::Command;
use std::time::Instant;

use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use advtab::advtrain::{adv_train_cost_bounded, adv_train_utility_bounded, pgd_attack_baseline};
use advtab::cost::{cost_bound_for_margin, total_cost, CostDecl, CostSpec, GainMode, Transform};
use advtab::domain::{
    example_from_json, load_dataset, Dataset, Example, FeatureKind, FeatureSpec, GainSource,
    Masker, Schema, Value,
};
use advtab::encoding::Encoder;
use advtab::error::Error;
use advtab::eval::{
    audit_report, run_experiment, AttackSpec, DataSource, ExperimentConfig, ModelKind, ModelSpec,
};
use advtab::model::{train, Arch, BlackBox, ModelParams, Oracle, TrainHyper};
use advtab::projection;
use advtab::scenario::Scenario;
use advtab::search::{
    attack_cost_bounded, attack_min_cost, attack_utility_bounded, best_first_search, reference,
    AttackOutcome, AttackStatus, BudgetMode, ScoringKind, SearchConfig, DEFAULT_ITERATION_CAP,
};
use advtab::search::OutcomeRecord;
use advtab::synth::{generate, SynthConfig, SynthFeature};

type Check = Result<(), String>;

fn check(name: &str, outcome: Check) {
    match outcome {
        Ok(()) => println!("[PASS] {name}"),
        Err(msg) => {
            println!("[FAIL] {name}: {msg}");
            panic!("{name}: {msg}");
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Benchmark scenario at a given size, split 80/20 on `seed + 1`.
fn benchmark(rows: usize, seed: u64) -> Result<(Scenario, Encoder, Dataset, Dataset), String> {
    let cfg = SynthConfig {
        rows,
        ..SynthConfig::default()
    };
    let (scn, data) = generate(&cfg, seed).map_err(err)?;
    let encoder = Encoder::new(&scn.schema, &scn.costs).map_err(err)?;
    let (train_ds, test_ds) = data.split(0.8, seed + 1);
    Ok((scn, encoder, train_ds, test_ds))
}

fn accuracy(model: &ModelParams, encoder: &Encoder, rows: &[Example]) -> f64 {
    let hits = rows
        .iter()
        .filter(|r| model.predict_label(&encoder.encode(r).view()) == r.label)
        .count();
    hits as f64 / rows.len() as f64
}

/// Success rate over `rows`: the numerator counts examples the model got
/// right whose attack then succeeded, the denominator is the whole set.
fn graph_success_rate(
    scn: &Scenario,
    encoder: &Encoder,
    model: &ModelParams,
    rows: &[Example],
    budget: BudgetMode,
    scoring: ScoringKind,
    beam: Option<usize>,
) -> Result<f64, String> {
    let hits = rows
        .par_iter()
        .map(|x| -> Result<usize, String> {
            let correct = model.predict_label(&encoder.encode(x).view()) == x.label;
            let bb = BlackBox::new(model, encoder);
            let config = SearchConfig::new(budget).with_beam(beam);
            let out = best_first_search(scn, &bb, x, scoring, &config).map_err(err)?;
            Ok(usize::from(correct && out.status == AttackStatus::Success))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / rows.len() as f64)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic keyed hash of the feature values, scaled into [0, 1).
/// Arbitrary enough to make goal sets irregular, cheap enough to brute
/// force.
struct HashOracle {
    key: u64,
}

impl Oracle for HashOracle {
    fn score(&self, x: &Example) -> f64 {
        let mut h = self.key;
        for v in x.canonical_key() {
            h = splitmix(h ^ v);
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Random scenario with 3 to 5 features, mixed kinds, uniform or directional
/// costs, and a mutable state space of at most 10^4 nodes.
fn random_scenario(rng: &mut ChaCha8Rng) -> Result<Scenario, String> {
    let nf = rng.gen_range(3..=5);
    let mut features = Vec::with_capacity(nf);
    let mut decls = Vec::with_capacity(nf);
    for i in 0..nf {
        let mutable = rng.gen_bool(0.75);
        let name = format!("f{i}");
        if rng.gen_bool(0.5) {
            let k = rng.gen_range(2..=4);
            let values = (0..k).map(|j| format!("v{j}")).collect();
            features.push(FeatureSpec {
                name,
                kind: FeatureKind::Categorical { values },
                mutable,
            });
            decls.push(Some(CostDecl::Uniform {
                uniform: rng.gen_range(0.5..3.0),
            }));
        } else {
            let k = rng.gen_range(2..=5);
            let mut ticks: Vec<usize> = (0..=20).collect();
            ticks.shuffle(rng);
            ticks.truncate(k);
            ticks.sort_unstable();
            let grid: Vec<f64> = ticks.iter().map(|&t| t as f64 / 20.0).collect();
            features.push(FeatureSpec {
                name,
                kind: FeatureKind::Numeric {
                    lower: 0.0,
                    upper: 1.0,
                    grid,
                },
                mutable,
            });
            decls.push(Some(CostDecl::Numeric {
                inc: rng.gen_range(0.25..2.0),
                dec: rng.gen_range(0.25..2.0),
                transform: Transform::Identity,
                k: 1.0,
            }));
        }
    }
    if !features.iter().any(|f| f.mutable) {
        features[0].mutable = true;
    }
    let schema = Schema::new(features, "y", GainSource::Constant(1.0)).map_err(err)?;
    let costs = CostSpec::compile(&schema, &decls).map_err(err)?;
    Ok(Scenario::new(schema, costs, GainMode::Constant))
}

fn random_root(rng: &mut ChaCha8Rng, scn: &Scenario, oracle: &dyn Oracle) -> Example {
    let values = scn
        .schema
        .features
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Categorical { values } => Value::Cat(rng.gen_range(0..values.len())),
            FeatureKind::Numeric { grid, .. } => Value::Num(grid[rng.gen_range(0..grid.len())]),
        })
        .collect();
    let mut root = Example::new(values, 0);
    // label the root with the oracle's own verdict so it never starts as a
    // goal; the attack must actually move something
    root.label = oracle.label(&root);
    root
}

#[test]
fn a01_min_cost_search_matches_brute_force_exactly() {
    check("min-cost search is exact on 50 random schemas", (|| {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
        let mut solved = 0usize;
        for case in 0..50 {
            let scn = random_scenario(&mut rng)?;
            let nodes: usize = scn
                .schema
                .features
                .iter()
                .map(|f| if f.mutable { f.cardinality() } else { 1 })
                .product();
            if nodes > 10_000 {
                return Err(format!("case {case}: state space has {nodes} nodes"));
            }
            let oracle = HashOracle { key: rng.gen() };
            let root = random_root(&mut rng, &scn, &oracle);
            let got = attack_min_cost(&scn, &oracle, &root).map_err(err)?;
            let target = 1 - root.label;
            let want =
                reference::min_cost_goal(&scn, &oracle, &root, target, 20_000).map_err(err)?;
            match (got.status, &want) {
                (AttackStatus::Success, Some((_, best))) => {
                    let cost = got.cost.expect("success carries a cost");
                    if cost != *best {
                        return Err(format!(
                            "case {case}: search found cost {cost}, brute force found {best}"
                        ));
                    }
                    solved += 1;
                }
                (AttackStatus::NoSolution, None) => {}
                (status, want) => {
                    return Err(format!(
                        "case {case}: search status {status:?} but brute-force minimum is {:?}",
                        want.as_ref().map(|(_, c)| c)
                    ));
                }
            }
        }
        if solved < 25 {
            return Err(format!("only {solved}/50 cases had any goal; generator too hostile"));
        }
        let secs = started.elapsed().as_secs_f64();
        if secs >= 60.0 {
            return Err(format!("took {secs:.1} s, limit is 60 s"));
        }
        Ok(())
    })());
}

#[test]
fn a02_greedy_cost_overhead_stays_near_minimal() {
    check("greedy cost overhead vs exact minimum", (|| {
        let started = Instant::now();
        let (scn, encoder, train_ds, test_ds) = benchmark(600, 7)?;
        let (model, _) = train(&train_ds, &encoder, Arch::Lr, &TrainHyper::default()).map_err(err)?;
        let pairs = test_ds
            .rows
            .par_iter()
            .map(|x| -> Result<Option<(f64, f64)>, String> {
                if model.predict_label(&encoder.encode(x).view()) != x.label {
                    return Ok(None);
                }
                let bb = BlackBox::new(&model, &encoder);
                let greedy = attack_cost_bounded(
                    &scn,
                    &bb,
                    x,
                    f64::INFINITY,
                    ScoringKind::UniversalGreedy,
                    Some(1),
                )
                .map_err(err)?;
                let bb = BlackBox::new(&model, &encoder);
                let exact = attack_min_cost(&scn, &bb, x).map_err(err)?;
                match (greedy.status, exact.status) {
                    (AttackStatus::Success, AttackStatus::Success) => Ok(Some((
                        greedy.cost.expect("success carries a cost"),
                        exact.cost.expect("success carries a cost"),
                    ))),
                    _ => Ok(None),
                }
            })
            .collect::<Result<Vec<_>, String>>()?;
        let mut ratios: Vec<f64> = pairs
            .into_iter()
            .flatten()
            .map(|(g, e)| g / e)
            .collect();
        if ratios.len() < 10 {
            return Err(format!(
                "only {} jointly successful attacks; benchmark too small to judge overhead",
                ratios.len()
            ));
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = median(&ratios);
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        if med > 1.5 + 1e-9 {
            return Err(format!(
                "median overhead {med:.3} > 1.5 over {} joint successes",
                ratios.len()
            ));
        }
        if mean > 2.0 + 1e-9 {
            return Err(format!(
                "mean overhead {mean:.3} > 2.0 over {} joint successes",
                ratios.len()
            ));
        }
        let secs = started.elapsed().as_secs_f64();
        if secs >= 120.0 {
            return Err(format!("took {secs:.1} s, limit is 120 s"));
        }
        Ok(())
    })());
}

#[test]
fn a03_weighted_projection_matches_dual_bisection_oracle() {
    check("weighted projection agrees with the bisection oracle", (|| {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
        for case in 0..10_000 {
            let dim = rng.gen_range(1..=32);
            let u: Array1<f64> = Array1::from_shape_fn(dim, |_| {
                if rng.gen_bool(0.15) {
                    0.0
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            });
            let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..4.0)).collect();
            let norm: f64 = u.iter().zip(&w).map(|(x, wi)| wi * x.abs()).sum();
            let eps = match case % 5 {
                0 => 0.0,
                1 => norm * 1.1 + 0.1,
                _ => rng.gen_range(0.0..norm.max(0.1)),
            };
            let p = projection::project_weighted_simplex(&u.view(), &w, eps).map_err(err)?;
            let q = projection::reference::project_dual_bisection(&u.view(), &w, eps);
            let dist = p
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist > 1e-6 {
                return Err(format!(
                    "case {case} (dim {dim}, eps {eps:.4}): {dist:.2e} from the oracle"
                ));
            }
            let pnorm: f64 = p.iter().zip(&w).map(|(x, wi)| wi * x.abs()).sum();
            if pnorm > eps + 1e-9 {
                return Err(format!(
                    "case {case}: projected norm {pnorm:.12} exceeds radius {eps:.12}"
                ));
            }
            for (i, (&pi, &ui)) in p.iter().zip(u.iter()).enumerate() {
                if pi * ui < 0.0 || pi.abs() > ui.abs() + 1e-12 {
                    return Err(format!(
                        "case {case} coordinate {i}: {ui} projected to {pi}, sign or magnitude broken"
                    ));
                }
            }
        }
        let secs = started.elapsed().as_secs_f64();
        if secs >= 30.0 {
            return Err(format!("took {secs:.1} s, limit is 30 s"));
        }
        Ok(())
    })());
}

/// Smallest |pre-activation| over the hidden layers; infinity for a model
/// without hidden layers. Probes this close to a ReLU kink are resampled so
/// the finite-difference stencil never straddles one.
fn kink_margin(model: &ModelParams, v: &Array1<f64>) -> f64 {
    let mut a = v.clone();
    let mut margin = f64::INFINITY;
    for layer in &model.layers[..model.layers.len() - 1] {
        let z = layer.w.dot(&a) + &layer.b;
        for &zi in z.iter() {
            margin = margin.min(zi.abs());
        }
        a = z.mapv(|x| x.max(0.0));
    }
    margin
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

#[test]
fn a04_analytic_gradients_match_finite_differences() {
    check("gradient checks on both architectures", (|| {
        const H: f64 = 1e-5;
        const TOL: f64 = 1e-4;
        for (name, arch) in [
            ("lr", Arch::Lr),
            ("mlp:16,8", Arch::Mlp { hidden: vec![16, 8] }),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
            let mut done = 0usize;
            let mut attempts = 0usize;
            while done < 100 {
                attempts += 1;
                if attempts > 2_000 {
                    return Err(format!("{name}: could not draw 100 kink-free probes"));
                }
                let dim = rng.gen_range(3..=9);
                let lambda = 10f64.powf(rng.gen_range(-4.0..-2.0));
                let model = ModelParams::init(arch.clone(), dim, lambda, rng.gen());
                let x = Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0));
                let y = f64::from(rng.gen_bool(0.5));
                let i = rng.gen_range(0..dim);
                let mut xp = x.clone();
                xp[i] += H;
                let mut xm = x.clone();
                xm[i] -= H;
                if [&x, &xp, &xm].iter().any(|v| kink_margin(&model, v) < 1e-3) {
                    continue;
                }
                let (_, grad) = model.loss_and_grad_input(&x.view(), y);
                let numeric = (model.loss_and_grad_input(&xp.view(), y).0
                    - model.loss_and_grad_input(&xm.view(), y).0)
                    / (2.0 * H);
                let e = rel_err(grad[i], numeric);
                if e > TOL {
                    return Err(format!(
                        "{name} probe {done}: input gradient {:.6e} vs numeric {numeric:.6e} (rel {e:.2e})",
                        grad[i]
                    ));
                }

                let xs: Vec<Array1<f64>> = (0..6)
                    .map(|_| Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0)))
                    .collect();
                let ys: Vec<f64> = (0..6).map(|_| f64::from(rng.gen_bool(0.5))).collect();
                if xs.iter().any(|v| kink_margin(&model, v) < 1e-3) {
                    continue;
                }
                let (_, grads) = model.loss_and_grad_params(&xs, &ys);
                let l = rng.gen_range(0..model.layers.len());
                let (rows, cols) = model.layers[l].w.dim();
                let flat = rng.gen_range(0..rows * cols + rows);
                let analytic;
                let mut plus = model.clone();
                let mut minus = model.clone();
                if flat < rows * cols {
                    let (r, c) = (flat / cols, flat % cols);
                    analytic = grads[l].w[[r, c]];
                    plus.layers[l].w[[r, c]] += H;
                    minus.layers[l].w[[r, c]] -= H;
                } else {
                    let r = flat - rows * cols;
                    analytic = grads[l].b[r];
                    plus.layers[l].b[r] += H;
                    minus.layers[l].b[r] -= H;
                }
                let numeric =
                    (plus.regularized_loss(&xs, &ys) - minus.regularized_loss(&xs, &ys)) / (2.0 * H);
                let e = rel_err(analytic, numeric);
                if e > TOL {
                    return Err(format!(
                        "{name} probe {done}: parameter gradient {analytic:.6e} vs numeric {numeric:.6e} (rel {e:.2e})"
                    ));
                }
                done += 1;
            }
        }
        Ok(())
    })());
}

fn same_outcome(a: &AttackOutcome, b: &AttackOutcome) -> bool {
    a.status == b.status
        && a.cost == b.cost
        && a.gain == b.gain
        && a.utility == b.utility
        && a.expansions == b.expansions
        && a.queries == b.queries
        && a.adversarial == b.adversarial
}

#[test]
fn a05_margin_and_budget_formulations_coincide_under_constant_gain() {
    check("margin attack and training reduce to budget forms bit for bit", (|| {
        let cfg = SynthConfig {
            rows: 240,
            gain_column: None,
            gain_constant: 5.0,
            ..SynthConfig::default()
        };
        let (scn, data) = generate(&cfg, 21).map_err(err)?;
        let encoder = Encoder::new(&scn.schema, &scn.costs).map_err(err)?;
        let (train_ds, test_ds) = data.split(0.8, 22);
        let tau = 3.0;
        let eps = 5.0 - tau;

        let hyper = TrainHyper {
            epochs: 30,
            ..TrainHyper::default()
        };
        let (model, _) = train(&train_ds, &encoder, Arch::Lr, &hyper).map_err(err)?;
        for (scoring, beam) in [
            (ScoringKind::UniversalGreedy, Some(4)),
            (ScoringKind::UniformCost, None),
        ] {
            for (i, x) in test_ds.rows.iter().enumerate() {
                let bb = BlackBox::new(&model, &encoder);
                let by_margin =
                    attack_utility_bounded(&scn, &bb, x, tau, scoring, beam).map_err(err)?;
                let bb = BlackBox::new(&model, &encoder);
                let by_budget =
                    attack_cost_bounded(&scn, &bb, x, eps, scoring, beam).map_err(err)?;
                if !same_outcome(&by_margin, &by_budget) {
                    return Err(format!(
                        "example {i} under {}: margin run {:?}/{:?} differs from budget run {:?}/{:?}",
                        scoring.label(),
                        by_margin.status,
                        by_margin.cost,
                        by_budget.status,
                        by_budget.cost
                    ));
                }
            }
        }

        let hyper = TrainHyper {
            epochs: 12,
            ..TrainHyper::default()
        };
        let (by_margin, margin_logs) =
            adv_train_utility_bounded(&scn, &encoder, &train_ds, Arch::Lr, tau, 10, &hyper)
                .map_err(err)?;
        let (by_budget, budget_logs) =
            adv_train_cost_bounded(&scn, &encoder, &train_ds, Arch::Lr, eps, 10, &hyper)
                .map_err(err)?;
        if by_margin.layers != by_budget.layers {
            return Err("trained parameters differ between the two formulations".into());
        }
        for (a, b) in margin_logs.iter().zip(&budget_logs) {
            let same = a.clean_loss.to_bits() == b.clean_loss.to_bits()
                && a.clean_acc.to_bits() == b.clean_acc.to_bits()
                && a.adv_loss.map(f64::to_bits) == b.adv_loss.map(f64::to_bits);
            if !same {
                return Err(format!("epoch {} training logs diverge", a.epoch));
            }
        }
        Ok(())
    })());
}

#[test]
fn a06_success_rate_is_monotone_in_the_budget() {
    check("evadability never drops as the budget grows", (|| {
        let cfg = SynthConfig {
            rows: 200,
            features: vec![
                SynthFeature::Categorical {
                    name: "device".into(),
                    values: vec!["a".into(), "b".into(), "c".into()],
                    mutable: true,
                    weight: 1.0,
                    cost: Some(CostDecl::Uniform { uniform: 1.0 }),
                },
                SynthFeature::Numeric {
                    name: "hour".into(),
                    min: 0.0,
                    max: 1.0,
                    grid_points: 8,
                    mutable: true,
                    weight: 0.6,
                    cost: Some(CostDecl::Numeric {
                        inc: 2.0,
                        dec: 2.0,
                        transform: Transform::Identity,
                        k: 1.0,
                    }),
                },
                SynthFeature::Numeric {
                    name: "score".into(),
                    min: 0.0,
                    max: 1.0,
                    grid_points: 6,
                    mutable: true,
                    weight: -0.8,
                    cost: None,
                },
                SynthFeature::Numeric {
                    name: "tenure".into(),
                    min: 0.0,
                    max: 1.0,
                    grid_points: 5,
                    mutable: false,
                    weight: 1.2,
                    cost: None,
                },
            ],
            gain_column: None,
            ..SynthConfig::default()
        };
        let (scn, data) = generate(&cfg, 31).map_err(err)?;
        let encoder = Encoder::new(&scn.schema, &scn.costs).map_err(err)?;
        let (train_ds, test_ds) = data.split(0.8, 32);
        let hyper = TrainHyper {
            epochs: 30,
            ..TrainHyper::default()
        };
        let (model, _) = train(&train_ds, &encoder, Arch::Lr, &hyper).map_err(err)?;

        let grid = [0.5, 1.0, 2.0, 4.0, 8.0];
        let mut counts = Vec::with_capacity(grid.len());
        for eps in grid {
            let successes = test_ds
                .rows
                .par_iter()
                .map(|x| -> Result<usize, String> {
                    let bb = BlackBox::new(&model, &encoder);
                    let out =
                        attack_cost_bounded(&scn, &bb, x, eps, ScoringKind::UniformCost, None)
                            .map_err(err)?;
                    Ok(usize::from(out.status == AttackStatus::Success))
                })
                .collect::<Result<Vec<_>, String>>()?
                .iter()
                .sum::<usize>();
            counts.push(successes);
        }
        if counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("success counts {counts:?} are not monotone over {grid:?}"));
        }
        if counts[grid.len() - 1] == 0 {
            return Err("no attack succeeded even at the largest budget".into());
        }
        Ok(())
    })());
}

#[test]
fn a07_budget_matched_training_blunts_min_cost_attacks() {
    check("adversarial training cuts success at the trained budget", (|| {
        let started = Instant::now();
        let eps = 2.0;
        let (scn, encoder, train_ds, test_ds) = benchmark(1200, 41)?;
        let hyper = TrainHyper::default();
        let (clean, _) = train(&train_ds, &encoder, Arch::Lr, &hyper).map_err(err)?;
        let (defended, _) =
            adv_train_cost_bounded(&scn, &encoder, &train_ds, Arch::Lr, eps, 20, &hyper)
                .map_err(err)?;

        let (masked_schema, masker) = Masker::new(&scn.schema);
        let masked_costs =
            CostSpec::compile(&masked_schema, &vec![None; masked_schema.features.len()])
                .map_err(err)?;
        let masked_encoder = Encoder::new(&masked_schema, &masked_costs).map_err(err)?;
        let masked_train = Dataset {
            schema: masked_schema.clone(),
            rows: train_ds.rows.iter().map(|r| masker.mask_example(r)).collect(),
        };
        let (robust, _) = train(&masked_train, &masked_encoder, Arch::Lr, &hyper).map_err(err)?;
        let masked_test: Vec<Example> =
            test_ds.rows.iter().map(|r| masker.mask_example(r)).collect();

        let budget = BudgetMode::CostBounded { epsilon: eps };
        let on_clean = graph_success_rate(
            &scn, &encoder, &clean, &test_ds.rows, budget, ScoringKind::UniformCost, None,
        )?;
        let on_defended = graph_success_rate(
            &scn, &encoder, &defended, &test_ds.rows, budget, ScoringKind::UniformCost, None,
        )?;
        let acc_defended = accuracy(&defended, &encoder, &test_ds.rows);
        let acc_robust = accuracy(&robust, &masked_encoder, &masked_test);

        if on_clean - on_defended < 0.10 {
            return Err(format!(
                "success only fell from {on_clean:.3} to {on_defended:.3}; need a 10 point drop"
            ));
        }
        if acc_defended < acc_robust {
            return Err(format!(
                "defended accuracy {acc_defended:.3} fell below the masked baseline {acc_robust:.3}"
            ));
        }
        let secs = started.elapsed().as_secs_f64();
        if secs >= 300.0 {
            return Err(format!("took {secs:.1} s, limit is 300 s"));
        }
        Ok(())
    })());
}

#[test]
fn a08_margin_training_concedes_less_utility_than_budget_training() {
    check("margin-aware defense concedes less profit at matched accuracy", (|| {
        let tau = 1.0;
        let (scn, encoder, train_ds, test_ds) = benchmark(1000, 51)?;
        let hyper = TrainHyper::default();
        let (by_margin, _) =
            adv_train_utility_bounded(&scn, &encoder, &train_ds, Arch::Lr, tau, 20, &hyper)
                .map_err(err)?;
        // resource-matched flat budget: the mean of the per-example budgets
        // the margin defense trained against
        let mean_budget = train_ds
            .rows
            .iter()
            .map(|r| cost_bound_for_margin(scn.gain.gain_of(&scn.schema, r), tau))
            .sum::<f64>()
            / train_ds.len() as f64;
        let (by_budget, _) =
            adv_train_cost_bounded(&scn, &encoder, &train_ds, Arch::Lr, mean_budget, 20, &hyper)
                .map_err(err)?;

        let acc_margin = accuracy(&by_margin, &encoder, &test_ds.rows);
        let acc_budget = accuracy(&by_budget, &encoder, &test_ds.rows);
        if (acc_margin - acc_budget).abs() > 0.02 + 1e-12 {
            return Err(format!(
                "clean accuracies {acc_margin:.3} vs {acc_budget:.3} differ by more than 2 points; \
                 comparison is not matched"
            ));
        }

        // utility the attacker extracts per test example, counting only
        // genuine evasions: an already-misclassified root needs no attack
        // and would credit the same "free" gain to both models
        let avg_utility = |model: &ModelParams| -> Result<f64, String> {
            let utilities = test_ds
                .rows
                .par_iter()
                .map(|x| -> Result<f64, String> {
                    if model.predict_label(&encoder.encode(x).view()) != x.label {
                        return Ok(0.0);
                    }
                    let bb = BlackBox::new(model, &encoder);
                    let out =
                        attack_utility_bounded(&scn, &bb, x, tau, ScoringKind::UniformCost, None)
                            .map_err(err)?;
                    Ok(match out.status {
                        AttackStatus::Success => out.utility.unwrap_or(0.0),
                        _ => 0.0,
                    })
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok(utilities.iter().sum::<f64>() / utilities.len() as f64)
        };
        let leaked_margin = avg_utility(&by_margin)?;
        let leaked_budget = avg_utility(&by_budget)?;
        if leaked_budget <= 0.0 && leaked_margin <= 0.0 {
            return Err("the margin attack extracted nothing from either model; vacuous".into());
        }
        if leaked_margin >= leaked_budget {
            return Err(format!(
                "margin-trained model leaked {leaked_margin:.4} per example, \
                 budget-trained leaked {leaked_budget:.4}; expected strictly less"
            ));
        }
        Ok(())
    })());
}

#[test]
fn a09_masked_models_shut_out_every_attack() {
    check("masked baseline is immune to the whole attack battery", (|| {
        let dir = tempfile::tempdir().map_err(err)?;
        let cfg = ExperimentConfig {
            data: DataSource::Synthetic {
                config: SynthConfig {
                    rows: 160,
                    ..SynthConfig::default()
                },
            },
            models: vec![ModelSpec {
                name: "lr".into(),
                arch: "lr".into(),
                hyper: Some(TrainHyper {
                    epochs: 4,
                    ..TrainHyper::default()
                }),
            }],
            defense_epsilons: vec![],
            defense_taus: vec![],
            pgd_steps: 10,
            attacks: vec![
                AttackSpec::Graph {
                    budget: BudgetMode::CostBounded { epsilon: 2.0 },
                    scoring: ScoringKind::UniversalGreedy,
                    beam: Some(1),
                },
                AttackSpec::Graph {
                    budget: BudgetMode::MinCost,
                    scoring: ScoringKind::UniformCost,
                    beam: None,
                },
                AttackSpec::Pgd {
                    epsilon: 2.0,
                    steps: 10,
                },
            ],
            robust_baseline: true,
            train_fraction: 0.8,
            seed: 61,
            attack_iteration_cap: DEFAULT_ITERATION_CAP,
            max_attack_examples: Some(24),
        };
        let report = run_experiment(&cfg, dir.path()).map_err(err)?;
        let robust: Vec<_> = report
            .cells
            .iter()
            .filter(|c| matches!(c.kind, ModelKind::Robust))
            .collect();
        if robust.len() != 3 {
            return Err(format!("expected 3 robust cells, found {}", robust.len()));
        }
        for cell in robust {
            if cell.metrics.success_rate != 0.0 {
                return Err(format!(
                    "attack {} succeeded against the masked model at rate {}",
                    cell.attack, cell.metrics.success_rate
                ));
            }
        }
        Ok(())
    })());
}

#[test]
fn a10_beam_width_barely_moves_greedy_success_rates() {
    check("greedy success rates agree across beam widths", (|| {
        let eps = 4.0;
        let (scn, encoder, train_ds, test_ds) = benchmark(1000, 71)?;
        let (model, _) = train(&train_ds, &encoder, Arch::Lr, &TrainHyper::default()).map_err(err)?;
        let budget = BudgetMode::CostBounded { epsilon: eps };
        let mut rates = Vec::new();
        for beam in [1usize, 10, 100] {
            let rate = graph_success_rate(
                &scn,
                &encoder,
                &model,
                &test_ds.rows,
                budget,
                ScoringKind::UniversalGreedy,
                Some(beam),
            )?;
            rates.push(rate);
        }
        let max = rates.iter().cloned().fold(f64::MIN, f64::max);
        let min = rates.iter().cloned().fold(f64::MAX, f64::min);
        if max - min > 0.015 + 1e-12 {
            return Err(format!(
                "rates {rates:?} for beams 1/10/100 spread {:.4}, above 1.5 points",
                max - min
            ));
        }
        Ok(())
    })());
}

#[test]
fn a11_graph_search_beats_the_gradient_baseline_on_the_mlp() {
    check("graph attack dominates audited gradient baseline on the MLP", (|| {
        let (scn, encoder, train_ds, test_ds) = benchmark(1000, 81)?;
        let (model, _) = train(
            &train_ds,
            &encoder,
            Arch::Mlp { hidden: vec![16] },
            &TrainHyper::default(),
        )
        .map_err(err)?;
        for eps in [1.0, 2.0, 4.0, 8.0] {
            let graph_rate = graph_success_rate(
                &scn,
                &encoder,
                &model,
                &test_ds.rows,
                BudgetMode::CostBounded { epsilon: eps },
                ScoringKind::UniversalGreedy,
                Some(1),
            )?;
            let pgd_hits = test_ds
                .rows
                .par_iter()
                .map(|x| -> Result<usize, String> {
                    let correct = model.predict_label(&encoder.encode(x).view()) == x.label;
                    let out =
                        pgd_attack_baseline(&model, &scn, &encoder, x, eps, 20).map_err(err)?;
                    if out.outcome.status == AttackStatus::Success {
                        // feasibility audit: the decoded example must truly
                        // flip the label and stay within the budget
                        let cost =
                            total_cost(&scn.schema, &scn.costs, x, &out.decoded).map_err(err)?;
                        if cost > eps + 1e-9 {
                            return Err(format!(
                                "gradient baseline claimed success at cost {cost} over budget {eps}"
                            ));
                        }
                        if model.predict_label(&encoder.encode(&out.decoded).view()) == x.label {
                            return Err(
                                "gradient baseline claimed success without flipping the label"
                                    .into(),
                            );
                        }
                        return Ok(usize::from(correct));
                    }
                    Ok(0)
                })
                .collect::<Result<Vec<_>, String>>()?
                .iter()
                .sum::<usize>();
            let pgd_rate = pgd_hits as f64 / test_ds.rows.len() as f64;
            if graph_rate < pgd_rate {
                return Err(format!(
                    "at budget {eps}: graph {graph_rate:.3} below gradient baseline {pgd_rate:.3}"
                ));
            }
        }
        Ok(())
    })());
}

#[test]
fn a12_reports_replay_within_tolerance_and_tampering_exits_three() {
    check("reported numbers replay from disk and tampering is caught", (|| {
        let dir = tempfile::tempdir().map_err(err)?;
        let cfg = ExperimentConfig {
            data: DataSource::Synthetic {
                config: SynthConfig {
                    rows: 140,
                    ..SynthConfig::default()
                },
            },
            models: vec![ModelSpec {
                name: "lr".into(),
                arch: "lr".into(),
                hyper: Some(TrainHyper {
                    epochs: 3,
                    ..TrainHyper::default()
                }),
            }],
            defense_epsilons: vec![],
            defense_taus: vec![],
            pgd_steps: 10,
            attacks: vec![AttackSpec::Graph {
                budget: BudgetMode::CostBounded { epsilon: 2.0 },
                scoring: ScoringKind::UniversalGreedy,
                beam: Some(1),
            }],
            robust_baseline: false,
            train_fraction: 0.8,
            seed: 91,
            attack_iteration_cap: DEFAULT_ITERATION_CAP,
            max_attack_examples: Some(12),
        };
        run_experiment(&cfg, dir.path()).map_err(err)?;
        audit_report(dir.path()).map_err(|e| format!("fresh report failed its audit: {e}"))?;

        // independent replay: every stored success must reproduce its cost
        // and utility from the adversarial example alone
        let scn = Scenario::load(&dir.path().join("scenario.json")).map_err(err)?;
        let test = load_dataset(&scn.schema, &dir.path().join("test_set.csv")).map_err(err)?;
        let outcomes_path = dir.path().join("outcomes.jsonl");
        let text = std::fs::read_to_string(&outcomes_path).map_err(err)?;
        let mut successes = 0usize;
        for line in text.lines() {
            let rec: OutcomeRecord = serde_json::from_str(line).map_err(err)?;
            if rec.status != AttackStatus::Success {
                continue;
            }
            successes += 1;
            let adv = rec
                .adversarial
                .as_ref()
                .ok_or("success record without an adversarial example")?;
            let adv = example_from_json(&scn.schema, adv).map_err(err)?;
            let src = &test.rows[rec.example_id as usize];
            let cost = total_cost(&scn.schema, &scn.costs, src, &adv).map_err(err)?;
            let gain = scn.gain.attack_gain(&scn.schema, src, &adv);
            let stored_cost = rec.cost.ok_or("success record without a cost")?;
            let stored_utility = rec.utility.ok_or("success record without a utility")?;
            if (cost - stored_cost).abs() > 1e-6 {
                return Err(format!(
                    "example {}: stored cost {stored_cost} but replay gives {cost}",
                    rec.example_id
                ));
            }
            if ((gain - cost) - stored_utility).abs() > 1e-6 {
                return Err(format!(
                    "example {}: stored utility {stored_utility} but replay gives {}",
                    rec.example_id,
                    gain - cost
                ));
            }
        }
        if successes == 0 {
            return Err("no successful attack to replay; report would be vacuous".into());
        }

        // fault injection: shave a stored cost and expect the audit, both as
        // a library call and through the CLI, to reject the directory
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let idx = lines
            .iter()
            .position(|l| l.contains("\"status\":\"success\""))
            .ok_or("no success line to tamper with")?;
        let mut doctored: serde_json::Value = serde_json::from_str(&lines[idx]).map_err(err)?;
        let shaved = doctored["cost"].as_f64().ok_or("tampered line has no cost")? - 0.25;
        doctored["cost"] = serde_json::json!(shaved);
        lines[idx] = doctored.to_string();
        std::fs::write(&outcomes_path, lines.join("\n") + "\n").map_err(err)?;

        match audit_report(dir.path()) {
            Err(Error::Audit { .. }) => {}
            other => return Err(format!("tampered report audited as {other:?}")),
        }
        let status = Command::new(env!("CARGO_BIN_EXE_advtab"))
            .args(["eval", "--audit-only", "--out"])
            .arg(dir.path())
            .output()
            .map_err(err)?;
        if status.status.code() != Some(3) {
            return Err(format!(
                "CLI audit of the tampered report exited {:?}, expected 3",
                status.status.code()
            ));
        }

        std::fs::write(&outcomes_path, &text).map_err(err)?;
        let status = Command::new(env!("CARGO_BIN_EXE_advtab"))
            .args(["eval", "--audit-only", "--out"])
            .arg(dir.path())
            .output()
            .map_err(err)?;
        if status.status.code() != Some(0) {
            return Err(format!(
                "CLI audit of the restored report exited {:?}, expected 0",
                status.status.code()
            ));
        }
        Ok(())
    })());
}
