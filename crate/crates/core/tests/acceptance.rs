//! Acceptance gate. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use glucobench::bench::{episode_menus, evaluate_gating, evaluate_policy, index_trajectories};
use glucobench::counterfactual::{evaluate_episode, kendall_tau_b, policy_regret, CounterfactualConfig, DEFAULT_LEADS_MIN};
use glucobench::forecast::{fit_arx, ArxConfig, Forecaster, Oracle, Zoh};
use glucobench::gating::{apply_refractory, detect_events, gating_counts, generate_alarms, match_alarms, GatingConfig, HypoEvent};
use glucobench::harmonize::{run_pipeline, BolusKind, BolusObservation, Diagnostics, HarmonizeConfig, MealObservation, Observation, RawCohortEvents};
use glucobench::report::{macro_average, run_benchmark, RunConfig};
use glucobench::risk::bgri_f;
use glucobench::sim::{generate_paired_episodes, generate_standard, menu_for, sample_cohort, EpisodeConfig, Family, ScenarioConfig, StandardTrajectory};
use glucobench::timeseries::{extract_windows, SequenceRecord, Slice, SliceConfig, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let (pass, detail) = match outcome {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over budget")),
        Err(e) => (false, e),
    };
    println!(
        "{} {name} [{:.2}s / {}s] {detail}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("bgri_fixed_points", 1, bgri_fixed_points),
        ("event_detector_brute_force", 30, event_detector_brute_force),
        ("alarm_protocol_invariants", 5, alarm_protocol_invariants),
        ("oracle_bracket", 300, oracle_bracket),
        ("recall_ordering_zoh_arx_oracle", 600, recall_ordering),
        ("post_bolus_recall_degradation", 600, post_bolus_degradation),
        ("harmonization_fidelity", 10, harmonization_fidelity),
        ("policy_regret_invariants", 60, policy_regret_invariants),
        ("kendall_tau_b_brute_force", 10, kendall_brute_force),
        ("end_to_end_determinism", 900, end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, secs, f) in criteria {
        if !run(name, Duration::from_secs(secs), f) {
            failed += 1;
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

// ── Risk ──────────────────────────────────────────────────────────────

fn bgri_fixed_points() -> Check {
    let mid = bgri_f(112.5);
    let lo = 10.0 * bgri_f(20.0).powi(2);
    let hi = 10.0 * bgri_f(600.0).powi(2);
    ensure(mid.abs() < 0.01, || format!("f(112.5) = {mid}"))?;
    ensure((lo - 100.0).abs() < 0.1, || format!("10 f(20)^2 = {lo}"))?;
    ensure((hi - 100.0).abs() < 0.1, || format!("10 f(600)^2 = {hi}"))?;
    Ok(format!("f(112.5)={mid:.5} r(20)={lo:.4} r(600)={hi:.4}"))
}

// ── Events and alarms ─────────────────────────────────────────────────

/// Run-length view of the detector: an event opens at the start of the
/// first below-threshold run of length >= 3 and closes at the start of the
/// next at-or-above run of length >= 3.
fn brute_events(cgm: &[f64], thr: f64) -> Vec<HypoEvent> {
    let mut runs: Vec<(bool, usize, usize)> = Vec::new();
    for (i, g) in cgm.iter().enumerate() {
        let below = *g < thr;
        match runs.last_mut() {
            Some((b, _, len)) if *b == below => *len += 1,
            _ => runs.push((below, i, 1)),
        }
    }
    let mut out = Vec::new();
    let mut r = 0;
    while r < runs.len() {
        let (below, start, len) = runs[r];
        if !(below && len >= 3) {
            r += 1;
            continue;
        }
        let close = (r + 1..runs.len()).find(|&q| !runs[q].0 && runs[q].2 >= 3);
        match close {
            Some(q) => {
                out.push(HypoEvent { onset: start, end: runs[q].1 });
                r = q + 1;
            }
            None => {
                out.push(HypoEvent { onset: start, end: cgm.len() - 1 });
                break;
            }
        }
    }
    out
}

fn event_detector_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let levels = [55.0, 65.0, 69.9, 70.0, 70.1, 85.0, 120.0];
    let mut total = 0;
    for trial in 0..10_000 {
        let n = rng.random_range(0..=200);
        let mut cgm = Vec::with_capacity(n);
        while cgm.len() < n {
            let v = levels[rng.random_range(0..levels.len())];
            let run = rng.random_range(1..=6);
            cgm.extend(std::iter::repeat_n(v, run.min(n - cgm.len())));
        }
        let got = detect_events(&cgm, 70.0);
        let want = brute_events(&cgm, 70.0);
        ensure(got == want, || format!("trial {trial}: {got:?} != {want:?} on {cgm:?}"))?;
        total += want.len();
    }
    Ok(format!("10000 series, {total} events"))
}

fn fixture_record(cgm: Vec<f64>) -> SequenceRecord {
    SequenceRecord::from_cgm("fixture", 0, TimeGrid::new(1_704_067_200, 300, cgm.len()).unwrap(), cgm)
}

fn alarm_protocol_invariants() -> Check {
    let cfg = GatingConfig::default();
    let ph = cfg.lead_steps(300).map_err(|e| e.to_string())?;

    // refractory spacing on raw candidate sets and through the alarm generator
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..2000 {
        let r = rng.random_range(1..=12);
        let mut cand: Vec<usize> = (0..rng.random_range(0..60)).map(|_| rng.random_range(0..300)).collect();
        cand.sort_unstable();
        cand.dedup();
        let kept = apply_refractory(&cand, r);
        ensure(kept.windows(2).all(|w| w[1] >= w[0] + r), || format!("spacing broken: {kept:?} r={r}"))?;
        ensure(kept.first() == cand.first(), || "first candidate dropped".into())?;
        for c in &cand {
            let covered = kept.iter().any(|k| k <= c && *c < k + r);
            ensure(covered, || format!("candidate {c} neither kept nor suppressed"))?;
        }
        let preds: Vec<Vec<f64>> = (0..200).map(|_| (0..ph).map(|_| rng.random_range(50.0..90.0)).collect()).collect();
        let alarms = generate_alarms(0..200, 300, &cfg, |t| Ok(preds[t].clone())).map_err(|e| e.to_string())?;
        ensure(alarms.windows(2).all(|w| w[1] >= w[0] + ph), || format!("generated spacing broken: {alarms:?}"))?;
    }

    // matching interval
    let ev = [HypoEvent { onset: 100, end: 110 }];
    for a in 80..=120usize {
        let detected = match_alarms(&ev, &[a], ph).detecting_alarm[0].is_some();
        let want = (100 - ph..=99).contains(&a);
        ensure(detected == want, || format!("alarm {a}: detected={detected}"))?;
    }

    // lead 25 min: the forecaster sees five steps ahead, then holds
    let mut cgm = vec![120.0; 400];
    cgm[200..=210].fill(60.0);
    let rec = fixture_record(cgm.clone());
    let origins = 0..rec.len() - ph;
    let alarms = generate_alarms(origins.clone(), 300, &cfg, |t| Ok((1..=ph).map(|k| cgm[t + k.min(5)]).collect()))
        .map_err(|e| e.to_string())?;
    ensure(alarms == [195, 201, 207], || format!("lead-25 alarms {alarms:?}"))?;
    let m = gating_counts(&rec, &alarms, origins.clone(), &cfg).map_err(|e| e.to_string())?[&Slice::Overall]
        .metrics()
        .map_err(|e| e.to_string())?;
    ensure(m.events == 1 && m.detected == 1 && m.false_alarms == 0, || format!("lead-25 counts {m:?}"))?;
    ensure(m.median_lead_min == Some(25.0), || format!("lead-25 lead {:?}", m.median_lead_min))?;

    // onset-coincident: a hold forecast alarms at the onset itself
    let alarms = generate_alarms(origins.clone(), 300, &cfg, |t| Ok(vec![cgm[t]; ph])).map_err(|e| e.to_string())?;
    ensure(alarms == [200, 206], || format!("coincident alarms {alarms:?}"))?;
    let m = gating_counts(&rec, &alarms, origins, &cfg).map_err(|e| e.to_string())?[&Slice::Overall]
        .metrics()
        .map_err(|e| e.to_string())?;
    ensure(m.events == 1 && m.detected == 0 && m.false_alarms == 0, || format!("coincident counts {m:?}"))?;
    ensure(m.recall == Some(0.0), || "coincident recall".into())?;
    Ok(format!("matching interval [t0-{ph}, t0-1] steps; fixtures exact"))
}

// ── Simulation-backed criteria ────────────────────────────────────────

fn trajectories(n: usize, first_seed: u64, cfg: &ScenarioConfig) -> Vec<StandardTrajectory> {
    sample_cohort(n, first_seed).iter().map(|s| generate_standard(s, cfg)).collect()
}

fn oracle_bracket() -> Check {
    let cohort = trajectories(20, 1, &ScenarioConfig::default());
    let menu = menu_for(&[Family::Basal, Family::Bolus]);
    let cf = CounterfactualConfig { exclude_null_truth: true, ..Default::default() };
    let (oracle, negated) = (Oracle::exact(), Oracle::negated());
    let (mut menus, mut strict, mut episodes) = (0usize, 0usize, 0usize);
    for t in &cohort {
        let pairs = generate_paired_episodes(t, &menu, &EpisodeConfig::default());
        for m in episode_menus(&oracle, t, &pairs, 288).map_err(|e| e.to_string())? {
            menus += 1;
            for r in evaluate_episode(&m, &DEFAULT_LEADS_MIN, 5, &cf).map_err(|e| e.to_string())? {
                ensure(r.effect_rmse.is_none_or(|v| v == 0.0), || format!("oracle eRMSE {r:?}"))?;
                ensure(r.sign_agreement.is_none_or(|v| v == 1.0), || format!("oracle SA {r:?}"))?;
                ensure(r.kendall_tau_b.is_none_or(|v| v == 1.0), || format!("oracle tau {r:?}"))?;
            }
        }
        for s in evaluate_policy(&oracle, t, &pairs, 288).map_err(|e| e.to_string())? {
            episodes += 1;
            ensure(s.matched && s.regret == 0.0, || format!("oracle selection {s:?}"))?;
        }
        for m in episode_menus(&negated, t, &pairs, 288).map_err(|e| e.to_string())? {
            for r in evaluate_episode(&m, &DEFAULT_LEADS_MIN, 5, &cf).map_err(|e| e.to_string())? {
                ensure(r.sign_agreement.is_none_or(|v| v == 0.0), || format!("negated SA {r:?}"))?;
            }
            for lead_min in DEFAULT_LEADS_MIN {
                let pairs = m.pairs((lead_min / 5) as usize);
                let mut truth: Vec<f64> = pairs.iter().map(|p| p.delta_true).collect();
                let pred: Vec<f64> = pairs.iter().map(|p| p.delta_pred).collect();
                let tau = kendall_tau_b(&truth, &pred);
                truth.sort_by(f64::total_cmp);
                if truth.len() >= 2 && truth.windows(2).all(|w| w[0] < w[1]) {
                    strict += 1;
                    ensure(tau == Some(-1.0), || format!("negated tau {tau:?} on a strict menu"))?;
                }
            }
        }
    }
    ensure(strict > 0, || "no strictly ordered menus".into())?;
    Ok(format!("{menus} menus, {episodes} action episodes, {strict} strict menu-leads"))
}

fn train_arx(cfg: &ScenarioConfig) -> Result<glucobench::forecast::ArxParams, String> {
    let train = trajectories(20, 1001, cfg);
    let sc = SliceConfig::default();
    let samples: Vec<_> = train.iter().flat_map(|t| extract_windows(&t.record, 288, 24, 1, &sc)).collect();
    fit_arx(&samples, &ArxConfig::default()).map_err(|e| e.to_string())
}

fn macro_recall(model: &dyn Forecaster, test: &[StandardTrajectory], slice: Slice) -> Result<f64, String> {
    let recs: Vec<SequenceRecord> = test.iter().map(|t| t.record.clone()).collect();
    let idx = index_trajectories(test);
    let res = evaluate_gating(model, &recs, Some(&idx), 288, &GatingConfig::default()).map_err(|e| e.to_string())?;
    let vals = res
        .values()
        .map(|per| per.get(&slice).map_or(Ok(None), |c| c.metrics().map(|m| m.recall)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    macro_average(&vals).mean.ok_or_else(|| format!("no {slice} events"))
}

fn recall_ordering() -> Check {
    let cfg = ScenarioConfig::default();
    let arx = train_arx(&cfg)?;
    let test = trajectories(30, 1, &cfg);
    let zoh = macro_recall(&Zoh, &test, Slice::Overall)?;
    let arx = macro_recall(&arx, &test, Slice::Overall)?;
    let oracle = macro_recall(&Oracle::exact(), &test, Slice::Overall)?;
    let detail = format!("recall zoh={zoh:.3} arx={arx:.3} oracle={oracle:.3}");
    ensure(zoh < 0.1, || detail.clone())?;
    ensure(oracle == 1.0, || detail.clone())?;
    ensure(zoh < arx && arx < oracle, || detail.clone())?;
    Ok(detail)
}

/// Share of scored overall events with a bolus in the preceding `window_min`.
fn bolus_led_share(test: &[StandardTrajectory], window_min: usize) -> f64 {
    let (mut led, mut total) = (0usize, 0usize);
    for t in test {
        let r = &t.record;
        for e in detect_events(&r.cgm, 70.0) {
            if e.onset < 288 + 6 {
                continue;
            }
            total += 1;
            let from = e.onset.saturating_sub(window_min / 5);
            if (from..e.onset).any(|i| r.bolus_at(i) > 0.0) {
                led += 1;
            }
        }
    }
    led as f64 / total.max(1) as f64
}

fn post_bolus_degradation() -> Check {
    let cfg = ScenarioConfig { overestimate_prob: 1.0, ..Default::default() };
    let arx = train_arx(&cfg)?;
    let test = trajectories(30, 1, &cfg);
    let share = bolus_led_share(&test, 180);
    let overall = macro_recall(&arx, &test, Slice::Overall)?;
    let post = macro_recall(&arx, &test, Slice::PostBolus)?;
    let detail = format!("bolus-led events {:.0}%, recall overall={overall:.3} post_bolus={post:.3}", 100.0 * share);
    ensure(share > 0.5, || format!("cohort not insulin-driven: {detail}"))?;
    ensure(post <= overall, || detail.clone())?;
    Ok(detail)
}

// ── Harmonization ─────────────────────────────────────────────────────

const T0: i64 = 1_704_067_200;
const STEP: i64 = 300;

fn obs(time: i64, value: f64) -> Observation {
    Observation { pat_id: "p".into(), time, value }
}

fn bolus(time: i64, amount: f64) -> BolusObservation {
    BolusObservation { pat_id: "p".into(), time, amount, kind: BolusKind::Standard }
}

/// Readings on grid indices `idx`, with a 1 U bolus every six hours.
fn subject(idx: impl IntoIterator<Item = usize>, value: impl Fn(usize) -> f64, n_steps: usize) -> RawCohortEvents {
    RawCohortEvents {
        cgm: idx.into_iter().map(|i| obs(T0 + i as i64 * STEP, value(i))).collect(),
        bolus: (0..n_steps).step_by(72).map(|i| bolus(T0 + i as i64 * STEP, 1.0)).collect(),
        ..Default::default()
    }
}

fn pipeline(ev: &RawCohortEvents) -> (Vec<SequenceRecord>, Diagnostics) {
    run_pipeline(ev, &HarmonizeConfig::default())
}

fn harmonization_fidelity() -> Check {
    // 15 s dedup: a reading 15 s after a grid reading replaces it, 16 s does not
    let mut ev = subject(0..400, |_| 100.0, 400);
    ev.cgm.push(obs(T0 + 100 * STEP + 15, 160.0));
    ev.cgm.push(obs(T0 + 200 * STEP + 10, 130.0));
    ev.cgm.push(obs(T0 + 200 * STEP + 20, 190.0));
    let (r, d) = pipeline(&ev);
    ensure(d.cgm_duplicates == 3 && r.len() == 1, || format!("dedup diag {d:?}"))?;
    let want = 100.0 + 60.0 * 300.0 / 315.0;
    ensure((r[0].cgm[100] - want).abs() < 1e-9, || format!("dedup cgm[100] {}", r[0].cgm[100]))?;
    ensure((r[0].cgm[200] - 184.375).abs() < 1e-9, || format!("chained dedup cgm[200] {}", r[0].cgm[200]))?;
    let mut ev = subject(0..400, |_| 100.0, 400);
    ev.cgm.push(obs(T0 + 100 * STEP + 16, 160.0));
    let (r, d) = pipeline(&ev);
    ensure(d.cgm_duplicates == 0 && r[0].cgm[100] == 100.0, || format!("16 s kept apart: {d:?}"))?;

    // 30 min gap: bridged at exactly 30 min, split beyond it
    let level = |i: usize| if i >= 365 { 130.0 } else { 100.0 };
    let (r, _) = pipeline(&subject((0..720).filter(|i| !(360..365).contains(i)), level, 720));
    ensure(r.len() == 1 && r[0].len() == 720, || format!("30 min gap gave {} records", r.len()))?;
    ensure(r[0].cgm[359..=365] == [100.0, 105.0, 110.0, 115.0, 120.0, 125.0, 130.0], || format!("bridge {:?}", &r[0].cgm[359..=365]))?;
    let (r, _) = pipeline(&subject((0..720).filter(|i| !(360..366).contains(i)), level, 720));
    let lens: Vec<usize> = r.iter().map(SequenceRecord::len).collect();
    ensure(lens == [360, 354], || format!("35 min gap lengths {lens:?}"))?;
    ensure(r[1].grid.start == T0 + 366 * STEP, || "second segment start".into())?;

    // 5 min grid: off-grid readings, aligned start, linear interpolation
    let mut ev = subject(0..0, |_| 0.0, 400);
    ev.cgm = (0..400).map(|i| { let t = T0 + 150 + i * STEP; obs(t, 100.0 + (t - T0) as f64 / 60.0) }).collect();
    let (r, _) = pipeline(&ev);
    let g = r[0].grid;
    ensure(g.step == 300 && g.start == T0 + 300 && g.n_steps == 399, || format!("grid {g:?}"))?;
    ensure(r[0].cgm.iter().enumerate().all(|(j, v)| (v - (105.0 + 5.0 * j as f64)).abs() < 1e-9), || "grid interpolation".into())?;

    // 3 h basal lookback and 15 s lookahead
    for (offset, first, second) in [(-10_800, 0.8, 0.8), (-10_801, 0.0, 0.0), (15, 0.8, 0.8), (16, 0.0, 0.8)] {
        let mut ev = subject(0..400, |_| 100.0, 400);
        ev.basal = vec![obs(T0 + offset, 0.8)];
        let (r, _) = pipeline(&ev);
        let b = &r[0].basal;
        ensure(b[0] == first && b[1] == second && b[2..].iter().all(|v| *v == second), || format!("basal at {offset} s: {:?}", &b[..3]))?;
    }

    // 285 s / 15 s bolus window, shared edges go to the earlier slot
    let t = T0 + 100 * STEP;
    let mut ev = subject(0..400, |_| 100.0, 400);
    ev.bolus.extend([bolus(t - 284, 1.0), bolus(t + 15, 2.0), bolus(t + 16, 4.0), bolus(t - 285, 8.0)]);
    ev.meal.push(MealObservation { pat_id: "p".into(), time: t - 285, carbs: Some(30.0) });
    let (r, _) = pipeline(&ev);
    let b = &r[0].bolus_standard;
    ensure(b[99] == 8.0 && b[100] == 3.0 && b[101] == 4.0, || format!("bolus slots {:?}", &b[99..=101]))?;
    ensure(r[0].meal[99] == 30.0, || "meal slot".into())?;

    // 12 h span filter, clock from the record start
    let mut ev = subject(0..720, |_| 100.0, 720);
    ev.bolus = [0usize, 300, 372, 444, 516, 588, 660].iter().map(|&i| bolus(T0 + i as i64 * STEP, 1.0)).collect();
    let (r, d) = pipeline(&ev);
    ensure(r.len() == 1 && r[0].grid.start == T0 + 300 * STEP && r[0].len() == 420, || format!("span filter {:?}", r.iter().map(|x| (x.grid.start, x.len())).collect::<Vec<_>>()))?;
    ensure(d.steps_removed_no_bolus == 155 && d.records_too_short == 1, || format!("span diag {d:?}"))?;
    let mut ev = subject(0..720, |_| 100.0, 720);
    ev.bolus = (0..720).step_by(144).map(|i| bolus(T0 + i as i64 * STEP, 1.0)).collect();
    let (r, d) = pipeline(&ev);
    ensure(r.len() == 1 && r[0].len() == 720 && d.steps_removed_no_bolus == 0, || "exactly 12 h kept".into())?;

    // 312-step minimum
    let (r, _) = pipeline(&subject(0..312, |_| 100.0, 312));
    ensure(r.len() == 1 && r[0].len() == 312, || "312 steps dropped".into())?;
    let (r, d) = pipeline(&subject(0..311, |_| 100.0, 311));
    ensure(r.is_empty() && d.records_too_short == 1, || "311 steps kept".into())?;

    Ok("dedup, gap, grid, basal, bolus window, span, minimum length".into())
}

// ── Selection and ranking ─────────────────────────────────────────────

fn policy_regret_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut positive = 0;
    for ep in 0..1000 {
        let n = rng.random_range(1..=9);
        let actions: Vec<f64> = (0..n).map(|k| k as f64 * 0.5).collect();
        // coarse costs so ties occur
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 + rng.random_range(-0.5..0.5)).collect();
        let factual = actions[rng.random_range(0..n)];
        let o = policy_regret(&truth, &pred, &actions, factual).map_err(|e| e.to_string())?;
        let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(o.regret >= 0.0, || format!("episode {ep}: negative regret"))?;
        ensure(truth[o.optimal] == min, || format!("episode {ep}: optimum not a minimiser"))?;
        ensure((o.regret == 0.0) == (truth[o.chosen] == min), || format!("episode {ep}: regret zero iff optimal"))?;

        // strictly increasing transforms and shifts leave both choices unchanged
        let scale = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-50.0..50.0);
        let t2: Vec<f64> = truth.iter().map(|c| scale * c + shift).collect();
        let p2: Vec<f64> = pred.iter().map(|c| (c + 10.0).powi(3)).collect();
        let o2 = policy_regret(&t2, &p2, &actions, factual).map_err(|e| e.to_string())?;
        ensure(o2.chosen == o.chosen && o2.optimal == o.optimal, || format!("episode {ep}: argmin moved"))?;
        ensure((o2.regret - scale * o.regret).abs() < 1e-9 * (1.0 + o2.regret.abs()), || format!("episode {ep}: regret not scaled"))?;
        if o.regret > 0.0 {
            positive += 1;
        }
    }
    Ok(format!("1000 episodes, {positive} with positive regret"))
}

fn brute_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut s, mut untied_x, mut untied_y) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let sx = (x[i] - x[j]).signum() as i64 * (x[i] != x[j]) as i64;
            let sy = (y[i] - y[j]).signum() as i64 * (y[i] != y[j]) as i64;
            s += sx * sy;
            untied_x += sx.abs();
            untied_y += sy.abs();
        }
    }
    if untied_x == 0 || untied_y == 0 {
        return None;
    }
    Some(s as f64 / ((untied_x as f64) * (untied_y as f64)).sqrt())
}

fn kendall_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut ties = 0;
    for trial in 0..1000 {
        let n = rng.random_range(0..=9);
        let span = rng.random_range(1..=10);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..span) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..span) as f64 * 0.5).collect();
        let got = kendall_tau_b(&x, &y);
        let want = brute_tau(&x, &y);
        let same = match (got, want) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        ensure(same, || format!("trial {trial}: {got:?} vs {want:?} on {x:?} {y:?}"))?;
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            ties += 1;
        }
    }
    Ok(format!("1000 trials, {ties} with tied inputs"))
}

// ── Determinism ───────────────────────────────────────────────────────

fn read_dir_bytes(dir: &std::path::Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, std::fs::read(&p).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn end_to_end_determinism() -> Check {
    let cfg = RunConfig::default();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (reports, _) = run_benchmark(&cfg, a.path()).map_err(|e| e.to_string())?;
    run_benchmark(&cfg, b.path()).map_err(|e| e.to_string())?;
    let (fa, fb) = (read_dir_bytes(a.path())?, read_dir_bytes(b.path())?);
    ensure(fa.keys().eq(fb.keys()), || "file sets differ".into())?;
    for (name, bytes) in &fa {
        ensure(Some(bytes) == fb.get(name), || format!("{name} differs"))?;
    }
    ensure(!reports.is_empty(), || "no reports".into())?;
    Ok(format!("{} files identical, {} reports", fa.len(), reports.len()))
}
