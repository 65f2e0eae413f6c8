//! Paired episodes and action menus from the simulator.

use glucobench::bench::{evaluate_effects, evaluate_policy};
use glucobench::counterfactual::{CounterfactualConfig, DEFAULT_LEADS_MIN};
use glucobench::forecast::{Oracle, Zoh};
use glucobench::sim::{generate_action_rollouts, generate_paired_episodes, generate_standard, menu_for, sample_cohort, EpisodeConfig, Family, Perturbation, ScenarioConfig, StandardTrajectory};

fn cohort(n: usize) -> Vec<StandardTrajectory> {
    sample_cohort(n, 31).iter().map(|s| generate_standard(s, &ScenarioConfig::default())).collect()
}

#[test]
fn arms_share_history_and_context() {
    for t in cohort(3) {
        let pairs = generate_paired_episodes(&t, &menu_for(&[Family::Basal, Family::Bolus]), &EpisodeConfig::default());
        assert_eq!(pairs.len(), 4 * 10);
        for p in &pairs {
            let f = p.arm_record(&t.record, false, 288);
            let c = p.arm_record(&t.record, true, 288);
            assert_eq!(f.cgm[..288], c.cgm[..288]);
            assert_eq!(f.cgm[..288], t.record.cgm[p.origin - 287..=p.origin]);
            assert_eq!(f.meal, c.meal);
            assert_eq!(p.factual.cgm, p.context.simulate_factual());
            if !p.valid {
                assert_eq!(p.factual, p.counterfactual);
            }
        }
    }
}

#[test]
fn insulin_direction_sets_effect_sign() {
    let mut checked = 0;
    for t in cohort(5) {
        let pairs = generate_paired_episodes(&t, &menu_for(&[Family::Basal, Family::Bolus]), &EpisodeConfig::default());
        for p in pairs.iter().filter(|p| p.valid) {
            let more_insulin = match p.perturbation {
                Perturbation::BasalScale { multiplier } => multiplier > 1.0,
                Perturbation::BolusScale { factor } => factor > 1.0,
                Perturbation::BolusAdd => true,
                Perturbation::BolusShift { .. } => continue,
            };
            let less_insulin = matches!(p.perturbation, Perturbation::BasalScale { multiplier } if multiplier < 1.0)
                || matches!(p.perturbation, Perturbation::BolusScale { factor } if factor < 1.0);
            for (f, c) in p.factual.cgm.iter().zip(&p.counterfactual.cgm) {
                if more_insulin {
                    assert!(c <= &(f + 1e-9), "{:?}: {c} > {f}", p.perturbation);
                }
                if less_insulin {
                    assert!(c >= &(f - 1e-9), "{:?}: {c} < {f}", p.perturbation);
                }
            }
            checked += 1;
        }
    }
    assert!(checked > 60, "only {checked} checked");
}

#[test]
fn action_menu_costs_and_zero_action() {
    for t in cohort(3) {
        let pairs = generate_paired_episodes(&t, &menu_for(&[Family::Basal]), &EpisodeConfig::default());
        let m = generate_action_rollouts(&pairs[0], t.avg_bolus());
        assert_eq!(m.actions.len(), 9);
        assert_eq!(m.actions[0], 0.0);
        assert_eq!(m.factual_action, 0.0);
        assert_eq!(m.trajectories[0], pairs[0].factual.cgm);
        assert!(m.costs.iter().all(|c| c.is_finite() && *c >= 0.0));
    }
}

#[test]
fn oracle_scores_perfectly_and_hold_does_not() {
    let t = &cohort(1)[0];
    let pairs = generate_paired_episodes(t, &menu_for(&[Family::Bolus]), &EpisodeConfig::default());
    let cf = CounterfactualConfig::default();
    let rows = evaluate_effects(&Oracle::exact(), t, &pairs, 288, &DEFAULT_LEADS_MIN, &cf).unwrap();
    assert!(rows.iter().all(|r| r.effect_rmse.is_none_or(|v| v == 0.0)));
    // a hold forecast predicts no effect at all
    let rows = evaluate_effects(&Zoh, t, &pairs, 288, &DEFAULT_LEADS_MIN, &cf).unwrap();
    assert!(rows.iter().all(|r| r.kendall_tau_b.is_none()));
    let sel = evaluate_policy(&Oracle::exact(), t, &pairs, 288).unwrap();
    assert!(sel.iter().all(|s| s.matched && s.regret == 0.0));
}
