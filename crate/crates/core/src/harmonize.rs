//! Conversion of raw per-subject event logs into gridded [`SequenceRecord`]s.
//!
//! Step order per subject: CGM deduplication, gap segmentation, resampling
//! onto the 5-minute grid, basal/bolus/meal/weight alignment, the optional
//! no-bolus span filter, minimum-length filtering and finally cohort-wide
//! sequence identifiers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::timeseries::{
    interpolate_to_grid, split_on_gaps, SequenceRecord, TimeGrid, DEFAULT_MAX_GAP, DEFAULT_MIN_STEPS, DEFAULT_STEP,
    HOUR,
};

// ── Inputs ────────────────────────────────────────────────────────────

/// A timestamped scalar observation (glucose, basal rate, weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pat_id: String,
    pub time: i64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BolusKind {
    Standard,
    Extended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BolusObservation {
    pub pat_id: String,
    pub time: i64,
    pub amount: f64,
    pub kind: BolusKind,
}

/// Meal event; `carbs` is `None` when only the occurrence is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealObservation {
    pub pat_id: String,
    pub time: i64,
    pub carbs: Option<f64>,
}

/// Output contract of the cohort-specific export parsers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawCohortEvents {
    pub cgm: Vec<Observation>,
    pub basal: Vec<Observation>,
    pub bolus: Vec<BolusObservation>,
    pub meal: Vec<MealObservation>,
    pub weight: Vec<Observation>,
}

impl RawCohortEvents {
    /// Event-log view of already harmonized records.
    pub fn from_records(records: &[SequenceRecord]) -> Self {
        let mut ev = RawCohortEvents::default();
        for r in records {
            for i in 0..r.len() {
                let t = r.grid.time(i);
                let obs = |value: f64| Observation { pat_id: r.pat_id.clone(), time: t, value };
                ev.cgm.push(obs(r.cgm[i]));
                ev.basal.push(obs(r.basal[i]));
                for (amount, kind) in [
                    (r.bolus_standard[i], BolusKind::Standard),
                    (r.bolus_extended[i], BolusKind::Extended),
                ] {
                    if amount > 0.0 {
                        ev.bolus.push(BolusObservation { pat_id: r.pat_id.clone(), time: t, amount, kind });
                    }
                }
                if r.meal[i] > 0.0 {
                    ev.meal.push(MealObservation { pat_id: r.pat_id.clone(), time: t, carbs: Some(r.meal[i]) });
                }
                if let Some(w) = &r.weight {
                    ev.weight.push(obs(w[i]));
                }
            }
        }
        ev
    }

    fn by_subject(&self) -> BTreeMap<String, SubjectEvents> {
        let mut map: BTreeMap<String, SubjectEvents> = BTreeMap::new();
        for o in &self.cgm {
            map.entry(o.pat_id.clone()).or_default().cgm.push((o.time, o.value));
        }
        for o in &self.basal {
            map.entry(o.pat_id.clone()).or_default().basal.push((o.time, o.value));
        }
        for o in &self.bolus {
            map.entry(o.pat_id.clone()).or_default().bolus.push((o.time, o.amount, o.kind));
        }
        for o in &self.meal {
            map.entry(o.pat_id.clone()).or_default().meal.push((o.time, o.carbs.unwrap_or(1.0)));
        }
        for o in &self.weight {
            map.entry(o.pat_id.clone()).or_default().weight.push((o.time, o.value));
        }
        map
    }
}

#[derive(Debug, Default)]
struct SubjectEvents {
    cgm: Vec<(i64, f64)>,
    basal: Vec<(i64, f64)>,
    bolus: Vec<(i64, f64, BolusKind)>,
    meal: Vec<(i64, f64)>,
    weight: Vec<(i64, f64)>,
}

/// Pipeline thresholds. All durations are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonizeConfig {
    pub dedup_tolerance: i64,
    pub gap_threshold: i64,
    pub grid_step: i64,
    pub basal_lookback: i64,
    pub basal_lookahead: i64,
    pub bolus_window_before: i64,
    pub bolus_window_after: i64,
    /// `None` disables the no-bolus span filter.
    pub max_no_bolus_span: Option<i64>,
    pub min_segment_steps: usize,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            dedup_tolerance: 15,
            gap_threshold: DEFAULT_MAX_GAP,
            grid_step: DEFAULT_STEP,
            basal_lookback: 3 * HOUR,
            basal_lookahead: 15,
            bolus_window_before: 285,
            bolus_window_after: 15,
            max_no_bolus_span: Some(12 * HOUR),
            min_segment_steps: DEFAULT_MIN_STEPS,
        }
    }
}

impl HarmonizeConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("dedup_tolerance", self.dedup_tolerance),
            ("gap_threshold", self.gap_threshold),
            ("grid_step", self.grid_step),
            ("basal_lookback", self.basal_lookback),
            ("basal_lookahead", self.basal_lookahead),
            ("bolus_window_before", self.bolus_window_before),
            ("bolus_window_after", self.bolus_window_after),
        ];
        for (name, v) in positive {
            if v <= 0 {
                return Err(crate::Error::InvalidInput(format!("{name} must be > 0, got {v}")));
            }
        }
        if let Some(span) = self.max_no_bolus_span {
            if span <= 0 {
                return Err(crate::Error::InvalidInput("max_no_bolus_span must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Counts of discarded inputs, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cgm_invalid: usize,
    pub cgm_duplicates: usize,
    pub segments_too_sparse: usize,
    pub bolus_outside_segments: usize,
    pub meal_outside_segments: usize,
    pub steps_removed_no_bolus: usize,
    pub records_too_short: usize,
    pub subjects_failed: usize,
}

// ── Channel operations ────────────────────────────────────────────────

/// Collapse chains of glucose records no more than `tolerance` apart,
/// keeping the latest record of each chain. Input must be time-sorted.
pub fn dedup_cgm(records: &[(i64, f64)], tolerance: i64) -> Vec<(i64, f64)> {
    let mut out: Vec<(i64, f64)> = Vec::with_capacity(records.len());
    let mut prev_time: Option<i64> = None;
    for &(t, v) in records {
        match prev_time {
            Some(p) if t - p <= tolerance => {
                *out.last_mut().expect("cluster has a member") = (t, v);
            }
            _ => out.push((t, v)),
        }
        prev_time = Some(t);
    }
    out
}

/// Piecewise-constant basal rate on `grid`: the latest record in
/// `[t - lookback, t + lookahead]`, forward-filled, starting from zero.
pub fn align_basal(records: &[(i64, f64)], grid: &TimeGrid, lookback: i64, lookahead: i64) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.n_steps);
    let mut current = 0.0;
    for t in grid.times() {
        let upto = records.partition_point(|(rt, _)| *rt <= t + lookahead);
        if upto > 0 {
            let (rt, rate) = records[upto - 1];
            if rt >= t - lookback {
                current = rate;
            }
        }
        out.push(current);
    }
    out
}

/// Grid index receiving an event at `time`: the earliest grid point `t`
/// with `t - before <= time <= t + after`.
pub fn event_slot(time: i64, grid: &TimeGrid, before: i64, after: i64) -> Option<usize> {
    let off = time - after - grid.start;
    let k = if off <= 0 { 0 } else { (off + grid.step - 1) / grid.step };
    let k = usize::try_from(k).ok()?;
    (k < grid.n_steps && grid.time(k) - before <= time).then_some(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BolusChannels {
    pub standard: Vec<f64>,
    pub extended: Vec<f64>,
    /// Records that fell into no window of this grid.
    pub dropped: usize,
}

/// Sum bolus records into the grid step whose alignment window contains them.
pub fn align_bolus(records: &[(i64, f64, BolusKind)], grid: &TimeGrid, before: i64, after: i64) -> BolusChannels {
    let mut standard = vec![0.0; grid.n_steps];
    let mut extended = vec![0.0; grid.n_steps];
    let mut dropped = 0;
    for &(t, amount, kind) in records {
        match event_slot(t, grid, before, after) {
            Some(k) => match kind {
                BolusKind::Standard => standard[k] += amount,
                BolusKind::Extended => extended[k] += amount,
            },
            None => dropped += 1,
        }
    }
    BolusChannels { standard, extended, dropped }
}

/// Sparse event channel (meals) aligned like boluses. Returns the channel
/// and the number of events outside the grid.
pub fn align_events(records: &[(i64, f64)], grid: &TimeGrid, before: i64, after: i64) -> (Vec<f64>, usize) {
    let mut ch = vec![0.0; grid.n_steps];
    let mut dropped = 0;
    for &(t, v) in records {
        match event_slot(t, grid, before, after) {
            Some(k) => ch[k] += v,
            None => dropped += 1,
        }
    }
    (ch, dropped)
}

/// Weight by linear interpolation between measurements, constant beyond them.
/// `None` without any measurement.
pub fn align_weight(records: &[(i64, f64)], grid: &TimeGrid) -> Option<Vec<f64>> {
    let (first, last) = (records.first()?, records.last()?);
    Some(
        grid.times()
            .map(|t| {
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let k = records.partition_point(|(rt, _)| *rt <= t);
                let (t0, w0) = records[k - 1];
                if t0 == t {
                    return w0;
                }
                let (t1, w1) = records[k];
                w0 + (w1 - w0) * (t - t0) as f64 / (t1 - t0) as f64
            })
            .collect(),
    )
}

/// Remove grid points more than `max_span` seconds after the last nonzero
/// bolus (or the record start, if none yet) and return the remaining pieces.
pub fn filter_no_bolus_spans(record: &SequenceRecord, max_span: i64) -> Vec<SequenceRecord> {
    let mut keep = Vec::with_capacity(record.len());
    let mut last_bolus = record.grid.start;
    for i in 0..record.len() {
        let t = record.grid.time(i);
        if record.bolus_at(i) > 0.0 {
            last_bolus = t;
        }
        keep.push(t - last_bolus <= max_span);
    }
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < keep.len() {
        if !keep[i] {
            i += 1;
            continue;
        }
        let from = i;
        while i < keep.len() && keep[i] {
            i += 1;
        }
        pieces.push(record.slice(from, i));
    }
    pieces
}

// ── Pipeline ──────────────────────────────────────────────────────────

fn harmonize_subject(
    pat_id: &str,
    mut ev: SubjectEvents,
    cfg: &HarmonizeConfig,
    diag: &mut Diagnostics,
) -> Vec<SequenceRecord> {
    let before = ev.cgm.len();
    ev.cgm.retain(|(_, g)| g.is_finite() && *g > 0.0);
    diag.cgm_invalid += before - ev.cgm.len();
    ev.cgm.sort_by_key(|(t, _)| *t);
    ev.basal.retain(|(_, r)| r.is_finite() && *r >= 0.0);
    ev.basal.sort_by_key(|(t, _)| *t);
    ev.bolus.retain(|(_, a, _)| a.is_finite() && *a >= 0.0);
    ev.bolus.sort_by_key(|(t, _, _)| *t);
    ev.meal.retain(|(_, c)| c.is_finite() && *c >= 0.0);
    ev.meal.sort_by_key(|(t, _)| *t);
    ev.weight.retain(|(_, w)| w.is_finite() && *w > 0.0);
    ev.weight.sort_by_key(|(t, _)| *t);

    let cgm = dedup_cgm(&ev.cgm, cfg.dedup_tolerance);
    diag.cgm_duplicates += ev.cgm.len() - cgm.len();
    let (times, values): (Vec<i64>, Vec<f64>) = cgm.into_iter().unzip();

    let mut bolus_used = vec![false; ev.bolus.len()];
    let mut meal_used = vec![false; ev.meal.len()];
    let mut out = Vec::new();
    for seg in split_on_gaps(&times, &values, cfg.gap_threshold) {
        let Some(series) = interpolate_to_grid(&seg, cfg.grid_step) else {
            diag.segments_too_sparse += 1;
            continue;
        };
        let grid = series.grid;
        let basal = align_basal(&ev.basal, &grid, cfg.basal_lookback, cfg.basal_lookahead);

        let mut bolus_standard = vec![0.0; grid.n_steps];
        let mut bolus_extended = vec![0.0; grid.n_steps];
        for (k, &(t, amount, kind)) in ev.bolus.iter().enumerate() {
            if let Some(slot) = event_slot(t, &grid, cfg.bolus_window_before, cfg.bolus_window_after) {
                bolus_used[k] = true;
                match kind {
                    BolusKind::Standard => bolus_standard[slot] += amount,
                    BolusKind::Extended => bolus_extended[slot] += amount,
                }
            }
        }
        let mut meal = vec![0.0; grid.n_steps];
        for (k, &(t, carbs)) in ev.meal.iter().enumerate() {
            if let Some(slot) = event_slot(t, &grid, cfg.bolus_window_before, cfg.bolus_window_after) {
                meal_used[k] = true;
                meal[slot] += carbs;
            }
        }
        let record = SequenceRecord {
            pat_id: pat_id.to_string(),
            seq_id: 0,
            grid,
            cgm: series.values,
            basal,
            bolus_standard,
            bolus_extended,
            meal,
            weight: align_weight(&ev.weight, &grid),
        };
        let pieces = match cfg.max_no_bolus_span {
            Some(span) => {
                let pieces = filter_no_bolus_spans(&record, span);
                let kept: usize = pieces.iter().map(SequenceRecord::len).sum();
                diag.steps_removed_no_bolus += record.len() - kept;
                pieces
            }
            None => vec![record],
        };
        for p in pieces {
            if p.len() >= cfg.min_segment_steps {
                out.push(p);
            } else {
                diag.records_too_short += 1;
            }
        }
    }
    diag.bolus_outside_segments += bolus_used.iter().filter(|u| !**u).count();
    diag.meal_outside_segments += meal_used.iter().filter(|u| !**u).count();
    out
}

/// Run the full harmonization pipeline over a cohort.
///
/// Sequence ids are assigned cohort-wide in `(pat_id, start time)` order.
pub fn run_pipeline(events: &RawCohortEvents, cfg: &HarmonizeConfig) -> (Vec<SequenceRecord>, Diagnostics) {
    let mut diag = Diagnostics::default();
    if let Err(e) = cfg.validate() {
        log::error!("invalid harmonization config: {e}");
        diag.subjects_failed = events.by_subject().len();
        return (Vec::new(), diag);
    }
    let mut records = Vec::new();
    for (pat_id, ev) in events.by_subject() {
        let recs = harmonize_subject(&pat_id, ev, cfg, &mut diag);
        let mut ok = Vec::with_capacity(recs.len());
        for r in recs {
            match r.validate() {
                Ok(()) => ok.push(r),
                Err(e) => {
                    log::warn!("subject {pat_id}: dropping record: {e}");
                    diag.subjects_failed += 1;
                }
            }
        }
        records.extend(ok);
    }
    records.sort_by(|a, b| (a.pat_id.as_str(), a.grid.start).cmp(&(b.pat_id.as_str(), b.grid.start)));
    for (i, r) in records.iter_mut().enumerate() {
        r.seq_id = i as u64;
    }
    (records, diag)
}
