//! Forecast-gated hypoglycemia alarms: event detection on the observed
//! trace, alarm generation from forecasts, alarm/event matching and
//! recall / false-alarm / lead-time metrics per slice.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{tags_at, SequenceRecord, Slice, SliceConfig, SliceTags, DAY, MINUTE};

pub const HYPO_THRESHOLD: f64 = 70.0;
/// Consecutive readings needed to open or close an event.
pub const RUN_LENGTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingConfig {
    pub threshold: f64,
    /// Prediction horizon (look-ahead window), seconds.
    pub ph: i64,
    pub slices: SliceConfig,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self { threshold: HYPO_THRESHOLD, ph: 30 * MINUTE, slices: SliceConfig::default() }
    }
}

impl GatingConfig {
    /// Forecast leads (in steps) inspected by the alarm rule.
    pub fn lead_steps(&self, step: i64) -> Result<usize> {
        if self.ph <= 0 || step <= 0 || self.ph % step != 0 {
            return Err(Error::InvalidInput(format!("horizon {}s is not a positive multiple of the step {step}s", self.ph)));
        }
        Ok((self.ph / step) as usize)
    }
}

// ── Events ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypoEvent {
    /// First index of the opening run.
    pub onset: usize,
    /// First index of the closing run, or the last index when unresolved.
    pub end: usize,
}

fn run_from(cgm: &[f64], i: usize, pred: impl Fn(f64) -> bool) -> bool {
    i + RUN_LENGTH <= cgm.len() && cgm[i..i + RUN_LENGTH].iter().all(|g| pred(*g))
}

/// Hypoglycemic events: onset at the first of three consecutive readings
/// below `threshold`, end at the first of three consecutive readings at or
/// above it.
pub fn detect_events(cgm: &[f64], threshold: f64) -> Vec<HypoEvent> {
    let mut events = Vec::new();
    let mut i = 0;
    while i < cgm.len() {
        if !run_from(cgm, i, |g| g < threshold) {
            i += 1;
            continue;
        }
        let onset = i;
        let mut j = onset + RUN_LENGTH;
        let end = loop {
            if j >= cgm.len() {
                break cgm.len() - 1;
            }
            if run_from(cgm, j, |g| g >= threshold) {
                break j;
            }
            j += 1;
        };
        events.push(HypoEvent { onset, end });
        i = end + 1;
    }
    events
}

// ── Alarms ────────────────────────────────────────────────────────────

/// Origins whose forecast dips below `threshold` at any of the first `leads` steps.
pub fn candidate_alarms<F>(origins: impl IntoIterator<Item = usize>, leads: usize, threshold: f64, mut predict: F) -> Result<Vec<usize>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    for t in origins {
        let pred = predict(t)?;
        if pred.len() < leads {
            return Err(Error::LengthMismatch { expected: leads, got: pred.len() });
        }
        if pred[..leads].iter().any(|g| *g < threshold) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Drop candidates raised less than `refractory` steps after the last kept alarm.
pub fn apply_refractory(candidates: &[usize], refractory: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &c in candidates {
        if kept.last().is_none_or(|last| c >= last + refractory) {
            kept.push(c);
        }
    }
    kept
}

/// Alarm indices for one record.
pub fn generate_alarms<F>(origins: impl IntoIterator<Item = usize>, step: i64, cfg: &GatingConfig, predict: F) -> Result<Vec<usize>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let leads = cfg.lead_steps(step)?;
    let cand = candidate_alarms(origins, leads, cfg.threshold, predict)?;
    Ok(apply_refractory(&cand, leads))
}

// ── Matching ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Per event, the earliest alarm in `[onset - PH, onset - step]`.
    pub detecting_alarm: Vec<Option<usize>>,
    /// Per alarm, the earliest event whose window `[onset - PH, end]` holds it.
    pub matched_event: Vec<Option<usize>>,
}

/// Match sorted alarm indices to events; `ph_steps` is the horizon in steps.
pub fn match_alarms(events: &[HypoEvent], alarms: &[usize], ph_steps: usize) -> MatchResult {
    let detecting_alarm = events
        .iter()
        .map(|e| alarms.iter().copied().find(|&a| a + ph_steps >= e.onset && a < e.onset))
        .collect();
    let matched_event = alarms
        .iter()
        .map(|&a| events.iter().position(|e| a + ph_steps >= e.onset && a <= e.end))
        .collect();
    MatchResult { detecting_alarm, matched_event }
}

// ── Metrics ───────────────────────────────────────────────────────────

/// Additive event/alarm tallies; merge across records and subjects.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatingCounts {
    pub events: usize,
    pub detected: usize,
    pub alarms: usize,
    pub false_alarms: usize,
    /// Lead times of detected events, minutes.
    pub leads_min: Vec<f64>,
    pub duration_secs: i64,
}

impl GatingCounts {
    pub fn merge(&mut self, other: &GatingCounts) {
        self.events += other.events;
        self.detected += other.detected;
        self.alarms += other.alarms;
        self.false_alarms += other.false_alarms;
        self.leads_min.extend_from_slice(&other.leads_min);
        self.duration_secs += other.duration_secs;
    }

    pub fn metrics(&self) -> Result<GatingMetrics> {
        if self.duration_secs <= 0 {
            return Err(Error::ZeroDuration);
        }
        let days = self.duration_secs as f64 / DAY as f64;
        Ok(GatingMetrics {
            recall: (self.events > 0).then(|| self.detected as f64 / self.events as f64),
            fa_per_day: self.false_alarms as f64 / days,
            median_lead_min: median(&self.leads_min),
            events: self.events,
            detected: self.detected,
            alarms: self.alarms,
            false_alarms: self.false_alarms,
            days,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingMetrics {
    /// `None` when the slice holds no events.
    pub recall: Option<f64>,
    pub fa_per_day: f64,
    pub median_lead_min: Option<f64>,
    pub events: usize,
    pub detected: usize,
    pub alarms: usize,
    pub false_alarms: usize,
    pub days: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-slice tallies for one record given its alarm indices, which were
/// issued from the forecast origins in `origins`.
///
/// Only events whose whole detection window lies within `origins` are
/// scored. Events take the slice tags of their onset and alarms those of
/// their origin; the false-alarm denominator is the record duration for
/// every slice.
pub fn gating_counts(
    record: &SequenceRecord,
    alarms: &[usize],
    origins: Range<usize>,
    cfg: &GatingConfig,
) -> Result<BTreeMap<Slice, GatingCounts>> {
    let step = record.grid.step;
    let ph_steps = cfg.lead_steps(step)?;
    let all_events = detect_events(&record.cgm, cfg.threshold);
    let m = match_alarms(&all_events, alarms, ph_steps);
    let scored: Vec<usize> = (0..all_events.len())
        .filter(|&k| {
            let o = all_events[k].onset;
            o >= origins.start + ph_steps && o <= origins.end
        })
        .collect();
    let events: Vec<HypoEvent> = scored.iter().map(|&k| all_events[k]).collect();
    let detecting: Vec<Option<usize>> = scored.iter().map(|&k| m.detecting_alarm[k]).collect();
    let event_tags: Vec<SliceTags> = events.iter().map(|e| tags_at(record, e.onset, &cfg.slices)).collect();
    let alarm_tags: Vec<SliceTags> = alarms.iter().map(|a| tags_at(record, *a, &cfg.slices)).collect();

    let mut out = BTreeMap::new();
    for slice in Slice::ALL {
        let mut c = GatingCounts { duration_secs: record.grid.duration_secs(), ..Default::default() };
        for (k, e) in events.iter().enumerate() {
            if !event_tags[k].contains(slice) {
                continue;
            }
            c.events += 1;
            if let Some(a) = detecting[k] {
                c.detected += 1;
                c.leads_min.push(((e.onset - a) as i64 * step) as f64 / MINUTE as f64);
            }
        }
        for (k, _) in alarms.iter().enumerate() {
            if !alarm_tags[k].contains(slice) {
                continue;
            }
            c.alarms += 1;
            if m.matched_event[k].is_none() {
                c.false_alarms += 1;
            }
        }
        out.insert(slice, c);
    }
    Ok(out)
}
