//! Drives the public API end to end the way a downstream crate would:
//! hand-built scenarios, synthetic generation, CSV round trips, training,
//! the attack helpers, and adversarial training.

use advtab::advtrain::adv_train_cost_bounded;
use advtab::cost::{cost_bound_for_margin, CostDecl, CostSpec, GainMode, Transform};
use advtab::domain::{
    load_dataset, Example, FeatureKind, FeatureSpec, GainSource, Schema, Value,
};
use advtab::encoding::Encoder;
use advtab::model::{train, Arch, BlackBox, Oracle, TrainHyper};
use advtab::scenario::Scenario;
use advtab::search::{
    attack_cost_bounded, attack_max_utility, attack_min_cost, attack_utility_bounded,
    AttackStatus, ScoringKind,
};
use advtab::synth::{generate, SynthConfig};
use anyhow::Result;

/// Three features, one immutable: a 45-example space small enough to
/// reason about by hand. Asymmetric numeric rates, gain from `payout`.
fn tiny_scenario() -> Result<Scenario> {
    let schema = Schema::new(
        vec![
            FeatureSpec {
                name: "channel".into(),
                kind: FeatureKind::Categorical {
                    values: vec!["mail".into(), "phone".into(), "web".into()],
                },
                mutable: true,
            },
            FeatureSpec {
                name: "rate".into(),
                kind: FeatureKind::Numeric {
                    lower: 0.0,
                    upper: 1.0,
                    grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                },
                mutable: true,
            },
            FeatureSpec {
                name: "payout".into(),
                kind: FeatureKind::Numeric {
                    lower: 1.0,
                    upper: 3.0,
                    grid: vec![1.0, 2.0, 3.0],
                },
                mutable: false,
            },
        ],
        "y",
        GainSource::Column("payout".into()),
    )?;
    let decls = vec![
        Some(CostDecl::Uniform { uniform: 1.0 }),
        Some(CostDecl::Numeric {
            inc: 2.0,
            dec: 1.0,
            transform: Transform::Identity,
            k: 1.0,
        }),
        None,
    ];
    let costs = CostSpec::compile(&schema, &decls)?;
    Ok(Scenario::new(schema, costs, GainMode::Constant))
}

/// Deterministic stand-in for a model: scores depend on the two mutable
/// features only.
struct RuleOracle;

impl Oracle for RuleOracle {
    fn score(&self, x: &Example) -> f64 {
        let base = [0.0, 0.2, 0.45][x.values[0].as_cat()];
        base + 0.5 * x.values[1].as_num()
    }
}

#[test]
fn attack_helpers_agree_on_their_guarantees() -> Result<()> {
    // eps sits between attainable costs (all multiples of 0.25 here), so
    // no outcome rides on a float boundary
    const EPS: f64 = 1.4;
    const TAU: f64 = 0.75;
    let scn = tiny_scenario()?;
    let oracle = RuleOracle;

    let mut successes = 0;
    let mut exhausted = 0;
    for channel in 0..3usize {
        for &rate in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            for &payout in &[1.0, 2.0, 3.0] {
                let values = vec![Value::Cat(channel), Value::Num(rate), Value::Num(payout)];
                let mut x = Example::new(values, 0);
                x.label = oracle.label(&x);

                let mc = attack_min_cost(&scn, &oracle, &x)?;
                let cb =
                    attack_cost_bounded(&scn, &oracle, &x, EPS, ScoringKind::UniversalGreedy, None)?;
                let ucs =
                    attack_cost_bounded(&scn, &oracle, &x, EPS, ScoringKind::UniformCost, None)?;
                let mu =
                    attack_max_utility(&scn, &oracle, &x, EPS, ScoringKind::UniversalGreedy, None)?;

                // the budgeted searches are complete: they succeed exactly
                // when the true minimum fits the budget
                match (cb.status, mc.status) {
                    (AttackStatus::Success, AttackStatus::Success) => {
                        assert!(mc.cost.unwrap() <= cb.cost.unwrap());
                        assert!(cb.cost.unwrap() <= EPS);
                        successes += 1;
                    }
                    (AttackStatus::Success, other) => {
                        panic!("budgeted search succeeded but the exact solver reported {other:?}")
                    }
                    (not_success, AttackStatus::Success) => {
                        assert_eq!(not_success, AttackStatus::BudgetExhausted);
                        assert!(mc.cost.unwrap() > EPS);
                        exhausted += 1;
                    }
                    (a, b) => assert_eq!(a, b),
                }

                // uniform-cost order pops goals cheapest first, so within
                // the budget it matches the exact solver outright
                assert_eq!(ucs.status == AttackStatus::Success, cb.status == AttackStatus::Success);
                if ucs.status == AttackStatus::Success {
                    assert_eq!(ucs.cost, mc.cost);
                }

                // utility maximization sees every goal the first-hit search
                // can reach, and keeps the best one
                assert_eq!(mu.status == AttackStatus::Success, cb.status == AttackStatus::Success);
                if mu.status == AttackStatus::Success {
                    assert!(mu.utility.unwrap() >= cb.utility.unwrap());
                    assert!(mu.utility.unwrap() >= ucs.utility.unwrap());
                }

                // a margin attack is a budget attack with the budget derived
                // from this example's gain
                let gain = scn.gain.gain_of(&scn.schema, &x);
                let ub = attack_utility_bounded(
                    &scn,
                    &oracle,
                    &x,
                    TAU,
                    ScoringKind::UniversalGreedy,
                    None,
                )?;
                let cb_tau = attack_cost_bounded(
                    &scn,
                    &oracle,
                    &x,
                    cost_bound_for_margin(gain, TAU),
                    ScoringKind::UniversalGreedy,
                    None,
                )?;
                assert_eq!(ub.status, cb_tau.status);
                assert_eq!(ub.cost, cb_tau.cost);
                assert_eq!(ub.gain, cb_tau.gain);
                assert_eq!(ub.utility, cb_tau.utility);
                assert_eq!(ub.expansions, cb_tau.expansions);
            }
        }
    }
    assert!(successes > 0, "no root was evadable within the budget");
    assert!(exhausted > 0, "every root was evadable, the budget never bit");
    Ok(())
}

#[test]
fn saved_scenario_and_csv_reload_to_the_same_training_run() -> Result<()> {
    let cfg = SynthConfig {
        rows: 160,
        ..SynthConfig::default()
    };
    let (scn, data) = generate(&cfg, 11)?;

    let dir = tempfile::tempdir()?;
    let scn_path = dir.path().join("scenario.json");
    let csv_path = dir.path().join("data.csv");
    scn.save(&scn_path)?;
    data.save_csv(&csv_path)?;

    let reloaded = Scenario::load(&scn_path)?;
    assert_eq!(reloaded.schema, scn.schema);
    assert_eq!(reloaded.costs, scn.costs);
    assert_eq!(reloaded.gain.mode, scn.gain.mode);
    let rows = load_dataset(&reloaded.schema, &csv_path)?;
    assert_eq!(rows.rows, data.rows);

    let hyper = TrainHyper {
        epochs: 10,
        ..TrainHyper::default()
    };
    let encoder = Encoder::new(&scn.schema, &scn.costs)?;
    let (a, _) = train(&data, &encoder, Arch::Lr, &hyper)?;
    let (b, _) = train(&rows, &encoder, Arch::Lr, &hyper)?;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert_eq!(la.w, lb.w);
        assert_eq!(la.b, lb.b);
    }
    Ok(())
}

#[test]
fn adversarial_training_blunts_the_greedy_attack() -> Result<()> {
    const EPS: f64 = 2.0;
    let cfg = SynthConfig {
        rows: 500,
        ..SynthConfig::default()
    };
    let (scn, data) = generate(&cfg, 23)?;
    let (train_set, test_set) = data.split(0.8, 24);
    let encoder = Encoder::new(&scn.schema, &scn.costs)?;
    let hyper = TrainHyper {
        epochs: 30,
        ..TrainHyper::default()
    };

    let (clean, _) = train(&train_set, &encoder, Arch::Lr, &hyper)?;
    let (defended, _) =
        adv_train_cost_bounded(&scn, &encoder, &train_set, Arch::Lr, EPS, 10, &hyper)?;

    let evasions = |model: &advtab::model::ModelParams| -> Result<usize> {
        let oracle = BlackBox::new(model, &encoder);
        let mut hits = 0;
        for x in &test_set.rows {
            if model.predict_label(&encoder.encode(x).view()) != x.label {
                continue;
            }
            let out =
                attack_cost_bounded(&scn, &oracle, x, EPS, ScoringKind::UniversalGreedy, Some(1))?;
            if out.status == AttackStatus::Success {
                hits += 1;
            }
        }
        assert!(oracle.queries() > 0, "the oracle never counted a query");
        Ok(hits)
    };

    let before = evasions(&clean)?;
    let after = evasions(&defended)?;
    assert!(
        after < before,
        "defense did not reduce evasions: {before} before, {after} after"
    );
    Ok(())
}
