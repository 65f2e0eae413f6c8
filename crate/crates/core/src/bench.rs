//! Evaluation drivers: run a forecaster over records or simulated episodes
//! and collect per-subject metric rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::counterfactual::{evaluate_episode, evaluate_selection, CounterfactualConfig, EpisodeMenu, EpisodeMetrics, MenuEntry, SelectionRow};
use crate::error::{Error, Result};
use crate::forecast::{ForecastRequest, Forecaster};
use crate::gating::{gating_counts, generate_alarms, GatingConfig, GatingCounts};
use crate::risk::{peg_zone, rmse};
use crate::sim::{generate_action_rollouts, EpisodePair, StandardTrajectory};
use crate::timeseries::{extract_windows, ForecastSample, SequenceRecord, Slice, SliceConfig, MINUTE};

/// Simulated trajectories keyed by subject, for oracle contexts.
pub type TrajectoryIndex<'a> = BTreeMap<&'a str, &'a StandardTrajectory>;

pub fn index_trajectories(trajectories: &[StandardTrajectory]) -> TrajectoryIndex<'_> {
    trajectories.iter().map(|t| (t.subject.subject_id.as_str(), t)).collect()
}

fn request_for<'a>(
    model: &dyn Forecaster,
    sample: &ForecastSample<'a>,
    sims: Option<&TrajectoryIndex<'_>>,
) -> Result<ForecastRequest<'a>> {
    let mut req = ForecastRequest::from_sample(sample, model.action_conditional());
    if let Some(t) = sims.and_then(|s| s.get(sample.record.pat_id.as_str())) {
        req.sim = Some(std::borrow::Cow::Owned(t.context_at(sample.origin, sample.horizon_len)));
    }
    Ok(req)
}

// ── Pointwise forecasting ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastEvalConfig {
    pub history_len: usize,
    pub horizon_len: usize,
    pub stride: usize,
    pub leads_min: Vec<i64>,
    pub slices: SliceConfig,
}

impl Default for ForecastEvalConfig {
    fn default() -> Self {
        Self { history_len: 288, horizon_len: 24, stride: 1, leads_min: vec![30, 60, 120], slices: SliceConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub subject_id: String,
    pub slice: Slice,
    pub lead_min: i64,
    pub samples: usize,
    pub rmse: f64,
    /// Percentage of predictions in error grid zones C–E.
    pub peg_unsafe_pct: f64,
}

/// RMSE and unsafe error-grid fraction per subject, slice and lead.
pub fn evaluate_forecasts(
    model: &dyn Forecaster,
    records: &[SequenceRecord],
    sims: Option<&TrajectoryIndex<'_>>,
    cfg: &ForecastEvalConfig,
) -> Result<Vec<ForecastRow>> {
    type Acc = (Vec<f64>, Vec<f64>);
    let mut acc: BTreeMap<(String, Slice, i64), Acc> = BTreeMap::new();
    for rec in records {
        let step_min = rec.grid.step / MINUTE;
        let leads: Vec<(i64, usize)> = cfg
            .leads_min
            .iter()
            .map(|&m| {
                let k = (m / step_min) as usize;
                if m % step_min != 0 || k == 0 || k > cfg.horizon_len {
                    Err(Error::InvalidInput(format!("lead {m} min does not fit the horizon")))
                } else {
                    Ok((m, k))
                }
            })
            .collect::<Result<_>>()?;
        for s in extract_windows(rec, cfg.history_len, cfg.horizon_len, cfg.stride, &cfg.slices) {
            let pred = model.predict(&request_for(model, &s, sims)?)?;
            let truth = s.target();
            for slice in Slice::ALL {
                if !s.tags.contains(slice) {
                    continue;
                }
                for &(m, k) in &leads {
                    let e = acc.entry((rec.pat_id.clone(), slice, m)).or_default();
                    e.0.push(pred[k - 1]);
                    e.1.push(truth[k - 1]);
                }
            }
        }
    }
    acc.into_iter()
        .map(|((subject_id, slice, lead_min), (p, t))| {
            let pairs: Vec<(f64, f64)> = t.iter().copied().zip(p.iter().map(|v| v.max(1.0))).collect();
            let bad = pairs.iter().map(|&(r, q)| peg_zone(r, q).map(|z| z.is_unsafe() as usize)).sum::<Result<usize>>()?;
            Ok(ForecastRow {
                subject_id,
                slice,
                lead_min,
                samples: p.len(),
                rmse: rmse(&p, &t)?,
                peg_unsafe_pct: 100.0 * bad as f64 / pairs.len() as f64,
            })
        })
        .collect()
}

// ── Alarm gating ──────────────────────────────────────────────────────

/// Per-subject, per-slice alarm tallies.
pub fn evaluate_gating(
    model: &dyn Forecaster,
    records: &[SequenceRecord],
    sims: Option<&TrajectoryIndex<'_>>,
    history_len: usize,
    cfg: &GatingConfig,
) -> Result<BTreeMap<String, BTreeMap<Slice, GatingCounts>>> {
    let mut out: BTreeMap<String, BTreeMap<Slice, GatingCounts>> = BTreeMap::new();
    for rec in records {
        let leads = cfg.lead_steps(rec.grid.step)?;
        let horizon = leads.max(model.min_horizon());
        let subject = out.entry(rec.pat_id.clone()).or_default();
        if rec.len() < history_len + horizon {
            // too short to issue a single forecast; still contributes duration
            let counts = gating_counts(rec, &[], 0..0, cfg)?;
            for (slice, c) in counts {
                subject.entry(slice).or_default().merge(&c);
            }
            continue;
        }
        let origins = history_len - 1..rec.len() - horizon;
        let alarms = generate_alarms(origins.clone(), rec.grid.step, cfg, |origin| {
            let s = ForecastSample::new(rec, origin, history_len, horizon, &cfg.slices)?;
            model.predict(&request_for(model, &s, sims)?)
        })?;
        for (slice, c) in gating_counts(rec, &alarms, origins, cfg)? {
            subject.entry(slice).or_default().merge(&c);
        }
    }
    Ok(out)
}

/// One subject × slice line of the gating results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingRow {
    pub subject_id: String,
    pub slice: Slice,
    pub events: usize,
    pub detected: usize,
    pub alarms: usize,
    pub false_alarms: usize,
    pub recall: Option<f64>,
    pub fa_per_day: f64,
    pub median_lead_min: Option<f64>,
    pub days: f64,
}

pub fn gating_rows(results: &BTreeMap<String, BTreeMap<Slice, GatingCounts>>) -> Result<Vec<GatingRow>> {
    let mut rows = Vec::new();
    for (subject, per) in results {
        for (&slice, c) in per {
            let m = c.metrics()?;
            rows.push(GatingRow {
                subject_id: subject.clone(),
                slice,
                events: m.events,
                detected: m.detected,
                alarms: m.alarms,
                false_alarms: m.false_alarms,
                recall: m.recall,
                fa_per_day: m.fa_per_day,
                median_lead_min: m.median_lead_min,
                days: m.days,
            });
        }
    }
    Ok(rows)
}

// ── Counterfactual episodes ───────────────────────────────────────────

/// Group paired episodes by (episode, family) and attach model predictions.
pub fn episode_menus(
    model: &dyn Forecaster,
    traj: &StandardTrajectory,
    pairs: &[EpisodePair],
    history_len: usize,
) -> Result<Vec<EpisodeMenu>> {
    let mut groups: BTreeMap<(usize, crate::sim::Family), Vec<&EpisodePair>> = BTreeMap::new();
    for p in pairs {
        groups.entry((p.episode, p.perturbation.family())).or_default().push(p);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((episode, family), ps) in groups {
        let first = ps[0];
        let horizon = first.factual.cgm.len();
        let sample = ForecastSample::new(&traj.record, first.origin, history_len, horizon, &SliceConfig::default())?;
        let base = ForecastRequest::from_sample(&sample, true).with_sim(&first.context);
        let pred_fact = model.predict(&base)?;
        let mut entries = Vec::with_capacity(ps.len());
        for p in ps {
            let pred_cf = if p.valid {
                model.predict(&base.clone().with_plan(p.counterfactual.basal.clone(), p.counterfactual.bolus.clone()))?
            } else {
                pred_fact.clone()
            };
            entries.push(MenuEntry { label: p.perturbation.label(), valid: p.valid, true_cf: p.counterfactual.cgm.clone(), pred_cf });
        }
        out.push(EpisodeMenu {
            subject_id: traj.subject.subject_id.clone(),
            episode,
            family,
            true_fact: first.factual.cgm.clone(),
            pred_fact,
            entries,
        });
    }
    Ok(out)
}

pub fn evaluate_effects(
    model: &dyn Forecaster,
    traj: &StandardTrajectory,
    pairs: &[EpisodePair],
    history_len: usize,
    leads_min: &[i64],
    cfg: &CounterfactualConfig,
) -> Result<Vec<EpisodeMetrics>> {
    let step_min = traj.record.grid.step / MINUTE;
    let mut rows = Vec::new();
    for menu in episode_menus(model, traj, pairs, history_len)? {
        rows.extend(evaluate_episode(&menu, leads_min, step_min, cfg)?);
    }
    Ok(rows)
}

/// Action-menu selection for every distinct episode in `pairs`.
pub fn evaluate_policy(
    model: &dyn Forecaster,
    traj: &StandardTrajectory,
    pairs: &[EpisodePair],
    history_len: usize,
) -> Result<Vec<SelectionRow>> {
    let avg = traj.avg_bolus();
    let mut seen = std::collections::BTreeSet::new();
    let mut rows = Vec::new();
    for p in pairs {
        if !seen.insert(p.episode) {
            continue;
        }
        let menu = generate_action_rollouts(p, avg);
        let horizon = p.factual.cgm.len();
        let sample = ForecastSample::new(&traj.record, p.origin, history_len, horizon, &SliceConfig::default())?;
        let base = ForecastRequest::from_sample(&sample, true).with_sim(&p.context);
        let preds = menu
            .actions
            .iter()
            .map(|a| {
                let (basal, bolus) = crate::sim::ActionMenuRollouts::plan(&p.context, *a);
                model.predict(&base.clone().with_plan(basal, bolus))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_selection(&p.subject_id, p.episode, &menu.actions, menu.factual_action, &menu.costs, &preds)?);
    }
    Ok(rows)
}
