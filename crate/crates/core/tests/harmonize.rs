//! Pipeline-level harmonization tests on irregular event logs.

use glucobench::harmonize::{run_pipeline, BolusKind, BolusObservation, HarmonizeConfig, MealObservation, Observation, RawCohortEvents};
use glucobench::sim::{generate_standard, sample_cohort, ScenarioConfig};
use proptest::prelude::*;

const T0: i64 = 1_704_067_200;

fn irregular_log(jitter: &[i64], boluses: &[(i64, f64)], meals: &[i64]) -> RawCohortEvents {
    RawCohortEvents {
        cgm: jitter
            .iter()
            .enumerate()
            .map(|(i, j)| Observation { pat_id: "p".into(), time: T0 + i as i64 * 300 + j, value: 100.0 + (i % 40) as f64 })
            .collect(),
        bolus: boluses
            .iter()
            .map(|&(t, amount)| BolusObservation {
                pat_id: "p".into(),
                time: T0 + t,
                amount,
                kind: if amount > 3.0 { BolusKind::Extended } else { BolusKind::Standard },
            })
            .collect(),
        meal: meals.iter().map(|&t| MealObservation { pat_id: "p".into(), time: T0 + t, carbs: Some(40.0) }).collect(),
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bolus_mass_is_conserved(
        jitter in prop::collection::vec(-100i64..100, 400),
        boluses in prop::collection::vec((-3_000i64..130_000, 0.1f64..6.0), 0..40),
        meals in prop::collection::vec(-3_000i64..130_000, 0..10),
    ) {
        let cfg = HarmonizeConfig { max_no_bolus_span: None, ..Default::default() };
        let (recs, diag) = run_pipeline(&irregular_log(&jitter, &boluses, &meals), &cfg);
        let placed: f64 = recs.iter().map(|r| r.bolus_standard.iter().chain(&r.bolus_extended).sum::<f64>()).sum();
        let inside: f64 = boluses
            .iter()
            .filter(|(t, _)| recs.iter().any(|r| T0 + t >= r.grid.start - 285 && T0 + t <= r.grid.end() + 15))
            .map(|(_, a)| a)
            .sum();
        prop_assert!((placed - inside).abs() < 1e-9, "placed {placed} vs in-range {inside}");
        let outside = boluses.len() - boluses.iter().filter(|(t, _)| recs.iter().any(|r| T0 + t >= r.grid.start - 285 && T0 + t <= r.grid.end() + 15)).count();
        prop_assert_eq!(diag.bolus_outside_segments, outside);
        let carbs: f64 = recs.iter().map(|r| r.meal.iter().sum::<f64>()).sum();
        prop_assert!((carbs - 40.0 * (meals.len() - diag.meal_outside_segments) as f64).abs() < 1e-9);
        for r in &recs {
            prop_assert_eq!(r.grid.start % 300, 0);
            prop_assert!(r.len() >= 312);
        }
    }

    #[test]
    fn harmonized_output_is_a_fixed_point(jitter in prop::collection::vec(-100i64..100, 400)) {
        let boluses: Vec<(i64, f64)> = (0..400).step_by(50).map(|i| (i * 300 + 7, 1.5)).collect();
        let (once, _) = run_pipeline(&irregular_log(&jitter, &boluses, &[]), &HarmonizeConfig::default());
        let (twice, diag) = run_pipeline(&RawCohortEvents::from_records(&once), &HarmonizeConfig::default());
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(diag.cgm_duplicates + diag.records_too_short + diag.bolus_outside_segments, 0);
    }
}

#[test]
fn simulated_records_survive_harmonization() {
    let cfg = ScenarioConfig { days: 3, ..Default::default() };
    let recs: Vec<_> = sample_cohort(4, 7).iter().map(|s| generate_standard(s, &cfg).record).collect();
    let (out, diag) = run_pipeline(&RawCohortEvents::from_records(&recs), &HarmonizeConfig::default());
    assert_eq!(diag.subjects_failed, 0);
    let total = |rs: &[glucobench::timeseries::SequenceRecord]| rs.iter().map(|r| r.bolus().iter().sum::<f64>()).sum::<f64>();
    assert!(out.len() >= recs.len());
    assert!(total(&out) <= total(&recs) + 1e-9);
    for r in &out {
        let src = recs.iter().find(|s| s.pat_id == r.pat_id).unwrap();
        let off = src.grid.index_of(r.grid.start).unwrap();
        assert_eq!(r.cgm[..], src.cgm[off..off + r.len()]);
    }
}

#[test]
fn multiple_subjects_get_sequential_ids() {
    let mut ev = irregular_log(&[0; 400], &[(0, 1.0), (40_000, 1.0), (80_000, 1.0)], &[]);
    let mut other = ev.cgm.clone();
    for o in &mut other {
        o.pat_id = "a".into();
    }
    ev.cgm.extend(other);
    ev.bolus.extend(ev.bolus.clone().into_iter().map(|mut b| {
        b.pat_id = "a".into();
        b
    }));
    let (recs, _) = run_pipeline(&ev, &HarmonizeConfig::default());
    let ids: Vec<(String, u64)> = recs.iter().map(|r| (r.pat_id.clone(), r.seq_id)).collect();
    assert_eq!(ids, [("a".to_string(), 0), ("p".to_string(), 1)]);
}
