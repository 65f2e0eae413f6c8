//! Interventional metrics: effect RMSE, sign agreement and Kendall τ_b over
//! perturbation menus, plus model-based action selection scored by match
//! rate and policy regret.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::bgri_cost;
use crate::sim::Family;

/// Leads at which effects are scored, minutes.
pub const DEFAULT_LEADS_MIN: [i64; 3] = [30, 60, 120];

// ── Pointwise effect metrics ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectPair {
    pub delta_true: f64,
    pub delta_pred: f64,
}

/// `None` for no pairs.
pub fn effect_rmse(pairs: &[EffectPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let sse: f64 = pairs.iter().map(|p| (p.delta_pred - p.delta_true).powi(2)).sum();
    Some((sse / pairs.len() as f64).sqrt())
}

/// Sign with a dead band: values within `eps` of zero are 0.
pub fn sign(x: f64, eps: f64) -> i8 {
    if x > eps {
        1
    } else if x < -eps {
        -1
    } else {
        0
    }
}

/// Fraction of pairs whose effects share a sign; two null effects agree.
pub fn sign_agreement(pairs: &[EffectPair], eps: f64) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let hits = pairs.iter().filter(|p| sign(p.delta_pred, eps) == sign(p.delta_true, eps)).count();
    Some(hits as f64 / pairs.len() as f64)
}

/// Tie-corrected Kendall τ_b; `None` for fewer than two items or when
/// either list is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tied_x += 1,
                (_, 0) => tied_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + tied_x) * (concordant + discordant + tied_y)) as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

// ── Action selection ──────────────────────────────────────────────────

/// Index of the lowest cost, ties broken by the action closest to `factual`
/// and then by menu order.
pub fn select_action(costs: &[f64], actions: &[f64], factual: f64) -> Result<usize> {
    if costs.is_empty() || costs.len() != actions.len() {
        return Err(Error::LengthMismatch { expected: actions.len(), got: costs.len() });
    }
    if costs.iter().any(|c| c.is_nan()) {
        return Err(Error::InvalidInput("NaN action cost".into()));
    }
    let mut best = 0;
    for i in 1..costs.len() {
        let better = match costs[i].total_cmp(&costs[best]) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Equal => (actions[i] - factual).abs() < (actions[best] - factual).abs(),
            std::cmp::Ordering::Greater => false,
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Outcome of model-based action selection on one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub chosen: usize,
    pub optimal: usize,
    pub matched: bool,
    /// `J(chosen) - J(optimal)`, never negative.
    pub regret: f64,
}

pub fn policy_regret(true_costs: &[f64], pred_costs: &[f64], actions: &[f64], factual: f64) -> Result<SelectionOutcome> {
    if true_costs.len() != pred_costs.len() {
        return Err(Error::LengthMismatch { expected: true_costs.len(), got: pred_costs.len() });
    }
    let optimal = select_action(true_costs, actions, factual)?;
    let chosen = select_action(pred_costs, actions, factual)?;
    Ok(SelectionOutcome {
        chosen,
        optimal,
        matched: chosen == optimal,
        regret: true_costs[chosen] - true_costs[optimal],
    })
}

// ── Episode evaluation ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    /// Dead band for sign agreement, mg/dL.
    pub sign_epsilon: f64,
    /// Score sign agreement only on pairs with a non-null true effect.
    pub exclude_null_truth: bool,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self { sign_epsilon: 0.0, exclude_null_truth: false }
    }
}

/// One perturbation of an episode with true and predicted counterfactual futures.
#[derive(Debug, Clone, PartialEq)]
pub struct MenuEntry {
    pub label: String,
    pub valid: bool,
    pub true_cf: Vec<f64>,
    pub pred_cf: Vec<f64>,
}

/// A perturbation family applied to one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMenu {
    pub subject_id: String,
    pub episode: usize,
    pub family: Family,
    pub true_fact: Vec<f64>,
    pub pred_fact: Vec<f64>,
    pub entries: Vec<MenuEntry>,
}

impl EpisodeMenu {
    /// Effect pairs at the 1-based step `lead` over valid entries.
    pub fn pairs(&self, lead: usize) -> Vec<EffectPair> {
        let k = lead - 1;
        self.entries
            .iter()
            .filter(|e| e.valid)
            .map(|e| EffectPair {
                delta_true: e.true_cf[k] - self.true_fact[k],
                delta_pred: e.pred_cf[k] - self.pred_fact[k],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub subject_id: String,
    pub episode: usize,
    pub family: Family,
    pub lead_min: i64,
    pub n_valid: usize,
    pub effect_rmse: Option<f64>,
    pub sign_agreement: Option<f64>,
    pub kendall_tau_b: Option<f64>,
}

/// Per-lead metrics of one episode menu. `step_min` is the grid step in minutes.
pub fn evaluate_episode(menu: &EpisodeMenu, leads_min: &[i64], step_min: i64, cfg: &CounterfactualConfig) -> Result<Vec<EpisodeMetrics>> {
    let mut out = Vec::with_capacity(leads_min.len());
    for &lead_min in leads_min {
        if lead_min <= 0 || lead_min % step_min != 0 {
            return Err(Error::InvalidInput(format!("lead {lead_min} min is not a positive multiple of {step_min} min")));
        }
        let lead = (lead_min / step_min) as usize;
        if lead > menu.true_fact.len() {
            return Err(Error::LengthMismatch { expected: lead, got: menu.true_fact.len() });
        }
        let pairs = menu.pairs(lead);
        let sa_pairs: Vec<EffectPair> = if cfg.exclude_null_truth {
            pairs.iter().copied().filter(|p| sign(p.delta_true, cfg.sign_epsilon) != 0).collect()
        } else {
            pairs.clone()
        };
        let xs: Vec<f64> = pairs.iter().map(|p| p.delta_true).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.delta_pred).collect();
        out.push(EpisodeMetrics {
            subject_id: menu.subject_id.clone(),
            episode: menu.episode,
            family: menu.family,
            lead_min,
            n_valid: pairs.len(),
            effect_rmse: effect_rmse(&pairs),
            sign_agreement: sign_agreement(&sa_pairs, cfg.sign_epsilon),
            kendall_tau_b: kendall_tau_b(&xs, &ys),
        });
    }
    Ok(out)
}

/// Action-menu outcomes of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub subject_id: String,
    pub episode: usize,
    pub chosen_action: f64,
    pub optimal_action: f64,
    pub matched: bool,
    pub regret: f64,
}

/// Score predicted trajectories for every menu action against the true costs.
pub fn evaluate_selection(
    subject_id: &str,
    episode: usize,
    actions: &[f64],
    factual: f64,
    true_costs: &[f64],
    pred_trajectories: &[Vec<f64>],
) -> Result<SelectionRow> {
    let pred_costs = pred_trajectories.iter().map(|t| bgri_cost(t)).collect::<Result<Vec<_>>>()?;
    let o = policy_regret(true_costs, &pred_costs, actions, factual)?;
    Ok(SelectionRow {
        subject_id: subject_id.to_string(),
        episode,
        chosen_action: actions[o.chosen],
        optimal_action: actions[o.optimal],
        matched: o.matched,
        regret: o.regret,
    })
}

// ── Aggregation ───────────────────────────────────────────────────────

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Subject-level means of each metric per (family, lead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEffectMetrics {
    pub subject_id: String,
    pub family: Family,
    pub lead_min: i64,
    pub episodes: usize,
    pub effect_rmse: Option<f64>,
    pub sign_agreement: Option<f64>,
    pub kendall_tau_b: Option<f64>,
}

pub fn aggregate_by_subject(rows: &[EpisodeMetrics]) -> Vec<SubjectEffectMetrics> {
    let mut groups: BTreeMap<(String, Family, i64), Vec<&EpisodeMetrics>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.subject_id.clone(), r.family, r.lead_min)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((subject_id, family, lead_min), rs)| SubjectEffectMetrics {
            subject_id,
            family,
            lead_min,
            episodes: rs.len(),
            effect_rmse: mean_defined(rs.iter().map(|r| r.effect_rmse)),
            sign_agreement: mean_defined(rs.iter().map(|r| r.sign_agreement)),
            kendall_tau_b: mean_defined(rs.iter().map(|r| r.kendall_tau_b)),
        })
        .collect()
}

/// Per-subject action match rate and mean regret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSelectionMetrics {
    pub subject_id: String,
    pub episodes: usize,
    pub action_match_rate: f64,
    pub regret: f64,
}

pub fn action_match_rate(rows: &[SelectionRow]) -> Option<f64> {
    mean_defined(rows.iter().map(|r| Some(if r.matched { 1.0 } else { 0.0 })))
}

pub fn aggregate_selection(rows: &[SelectionRow]) -> Vec<SubjectSelectionMetrics> {
    let mut groups: BTreeMap<&str, Vec<&SelectionRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.subject_id).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(id, rs)| SubjectSelectionMetrics {
            subject_id: id.to_string(),
            episodes: rs.len(),
            action_match_rate: rs.iter().filter(|r| r.matched).count() as f64 / rs.len() as f64,
            regret: rs.iter().map(|r| r.regret).sum::<f64>() / rs.len() as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(delta_pred: f64, delta_true: f64) -> EffectPair {
        EffectPair { delta_true, delta_pred }
    }

    #[test]
    fn effect_rmse_examples() {
        assert_eq!(effect_rmse(&[p(0.0, 10.0), p(0.0, 10.0)]), Some(10.0));
        assert_eq!(effect_rmse(&[p(5.0, 10.0), p(-5.0, 0.0)]), Some(5.0));
        assert_eq!(effect_rmse(&[]), None);
    }

    #[test]
    fn sign_agreement_examples() {
        assert_eq!(sign_agreement(&[p(0.0, 0.0)], 0.0), Some(1.0));
        assert_eq!(sign_agreement(&[p(-3.0, 2.0), p(1.0, -1.0)], 0.0), Some(0.0));
        assert_eq!(sign_agreement(&[p(3.0, 2.0), p(0.0, -1.0)], 0.0), Some(0.5));
        // dead band maps small effects to zero
        assert_eq!(sign_agreement(&[p(0.4, -0.3)], 0.5), Some(1.0));
    }

    #[test]
    fn tau_b_examples() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), Some(1.0));
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let t = kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(kendall_tau_b(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(kendall_tau_b(&[1.0], &[1.0]), None);
    }

    #[test]
    fn selection_tie_break() {
        let actions = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(select_action(&[5.0, 5.0, 5.0, 5.0], &actions, 2.2).unwrap(), 2);
        assert_eq!(select_action(&[5.0, 4.0, 4.0, 6.0], &actions, 3.0).unwrap(), 2);
        assert_eq!(select_action(&[1.0, 4.0, 4.0, 6.0], &actions, 3.0).unwrap(), 0);
        assert!(select_action(&[], &[], 0.0).is_err());
    }

    #[test]
    fn regret_is_nonnegative_and_zero_for_exact_costs() {
        let actions = [0.0, 1.0, 2.0];
        let j = [3.0, 1.0, 2.0];
        let o = policy_regret(&j, &j, &actions, 0.0).unwrap();
        assert!(o.matched && o.regret == 0.0);
        let o = policy_regret(&j, &[0.0, 9.0, 9.0], &actions, 0.0).unwrap();
        assert!(!o.matched && o.regret == 2.0);
    }

    #[test]
    fn episode_metrics_and_aggregation() {
        let menu = EpisodeMenu {
            subject_id: "s".into(),
            episode: 0,
            family: Family::Basal,
            true_fact: vec![100.0; 6],
            pred_fact: vec![100.0; 6],
            entries: vec![
                MenuEntry { label: "a".into(), valid: true, true_cf: vec![110.0; 6], pred_cf: vec![105.0; 6] },
                MenuEntry { label: "b".into(), valid: true, true_cf: vec![90.0; 6], pred_cf: vec![99.0; 6] },
                MenuEntry { label: "c".into(), valid: false, true_cf: vec![0.0; 6], pred_cf: vec![0.0; 6] },
            ],
        };
        let m = evaluate_episode(&menu, &[30], 5, &CounterfactualConfig::default()).unwrap();
        assert_eq!(m[0].n_valid, 2);
        assert_eq!(m[0].sign_agreement, Some(1.0));
        assert_eq!(m[0].kendall_tau_b, Some(1.0));
        assert!((m[0].effect_rmse.unwrap() - ((25.0 + 81.0) / 2.0f64).sqrt()).abs() < 1e-12);
        assert!(evaluate_episode(&menu, &[60], 5, &CounterfactualConfig::default()).is_err());

        let mut rows = m.clone();
        let mut other = m[0].clone();
        other.effect_rmse = Some(1.0);
        other.kendall_tau_b = None;
        rows.push(other);
        let s = aggregate_by_subject(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].kendall_tau_b, Some(1.0));
        assert!((s[0].effect_rmse.unwrap() - (m[0].effect_rmse.unwrap() + 1.0) / 2.0).abs() < 1e-12);
    }
}
