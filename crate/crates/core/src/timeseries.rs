//! Gridded multichannel glucose records, gap segmentation, forecast windows,
//! slice tagging and subject-level splits.
//!
//! Timestamps are integer seconds since the Unix epoch. Grid points are
//! aligned to multiples of the grid step so that independently resampled
//! channels and re-runs of the harmonization pipeline land on the same
//! instants.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTE: i64 = 60;
pub const HOUR: i64 = 3600;
pub const DAY: i64 = 86_400;

/// Default grid step (5 minutes).
pub const DEFAULT_STEP: i64 = 5 * MINUTE;
/// Default split threshold for CGM missingness (30 minutes).
pub const DEFAULT_MAX_GAP: i64 = 30 * MINUTE;
/// 24 h of history plus a 2 h horizon on the 5-minute grid.
pub const DEFAULT_MIN_STEPS: usize = 312;

// ── Grid ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: i64,
    pub step: i64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(start: i64, step: i64, n_steps: usize) -> Result<Self> {
        if step <= 0 {
            return Err(Error::InvalidInput(format!("grid step must be > 0, got {step}")));
        }
        Ok(Self { start, step, n_steps })
    }

    #[inline]
    pub fn time(&self, index: usize) -> i64 {
        self.start + index as i64 * self.step
    }

    /// Timestamp of the last grid point.
    pub fn end(&self) -> i64 {
        self.time(self.n_steps.saturating_sub(1))
    }

    /// Index of an exact grid timestamp.
    pub fn index_of(&self, ts: i64) -> Option<usize> {
        let off = ts - self.start;
        if off < 0 || off % self.step != 0 {
            return None;
        }
        let idx = (off / self.step) as usize;
        (idx < self.n_steps).then_some(idx)
    }

    pub fn duration_secs(&self) -> i64 {
        self.n_steps as i64 * self.step
    }

    pub fn times(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.n_steps).map(|i| self.time(i))
    }
}

// ── Records ───────────────────────────────────────────────────────────

/// One contiguous, uniformly gridded segment for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub pat_id: String,
    pub seq_id: u64,
    pub grid: TimeGrid,
    /// Glucose, mg/dL.
    pub cgm: Vec<f64>,
    /// Basal rate, U/h.
    pub basal: Vec<f64>,
    /// Standard bolus delivered at each grid step, U.
    pub bolus_standard: Vec<f64>,
    /// Extended bolus delivered at each grid step, U.
    pub bolus_extended: Vec<f64>,
    /// Carbohydrates in grams, or 1.0 as an event indicator.
    pub meal: Vec<f64>,
    /// Body weight, kg.
    pub weight: Option<Vec<f64>>,
}

impl SequenceRecord {
    /// Record with only glucose and zeroed action channels.
    pub fn from_cgm(pat_id: impl Into<String>, seq_id: u64, grid: TimeGrid, cgm: Vec<f64>) -> Self {
        let n = cgm.len();
        Self {
            pat_id: pat_id.into(),
            seq_id,
            grid,
            cgm,
            basal: vec![0.0; n],
            bolus_standard: vec![0.0; n],
            bolus_extended: vec![0.0; n],
            meal: vec![0.0; n],
            weight: None,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.grid.n_steps == 0
    }

    /// Total bolus (standard + extended) at grid index `i`.
    #[inline]
    pub fn bolus_at(&self, i: usize) -> f64 {
        self.bolus_standard[i] + self.bolus_extended[i]
    }

    pub fn bolus(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.bolus_at(i)).collect()
    }

    pub fn duration_days(&self) -> f64 {
        self.grid.duration_secs() as f64 / DAY as f64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_steps;
        if self.grid.step <= 0 {
            return Err(Error::InvalidInput("grid step must be > 0".into()));
        }
        for (name, ch) in [
            ("cgm", &self.cgm),
            ("basal", &self.basal),
            ("bolus_standard", &self.bolus_standard),
            ("bolus_extended", &self.bolus_extended),
            ("meal", &self.meal),
        ] {
            if ch.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{}/{}: channel {name} has {} values for {n} grid steps",
                    self.pat_id,
                    self.seq_id,
                    ch.len()
                )));
            }
        }
        if let Some(w) = &self.weight {
            if w.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: w.len() });
            }
        }
        if let Some(i) = self.cgm.iter().position(|g| !g.is_finite() || *g <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "{}/{}: cgm[{i}] = {} is not a positive finite value",
                self.pat_id, self.seq_id, self.cgm[i]
            )));
        }
        let neg = |ch: &[f64]| ch.iter().any(|v| !v.is_finite() || *v < 0.0);
        if neg(&self.bolus_standard) || neg(&self.bolus_extended) || neg(&self.meal) || neg(&self.basal) {
            return Err(Error::InvalidInput(format!(
                "{}/{}: action channels must be finite and non-negative",
                self.pat_id, self.seq_id
            )));
        }
        Ok(())
    }

    /// Sub-record covering grid indices `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> SequenceRecord {
        let grid = TimeGrid {
            start: self.grid.time(from),
            step: self.grid.step,
            n_steps: to - from,
        };
        SequenceRecord {
            pat_id: self.pat_id.clone(),
            seq_id: self.seq_id,
            grid,
            cgm: self.cgm[from..to].to_vec(),
            basal: self.basal[from..to].to_vec(),
            bolus_standard: self.bolus_standard[from..to].to_vec(),
            bolus_extended: self.bolus_extended[from..to].to_vec(),
            meal: self.meal[from..to].to_vec(),
            weight: self.weight.as_ref().map(|w| w[from..to].to_vec()),
        }
    }
}

// ── Slices ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    Overall,
    PostBolus,
    Nocturnal,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Overall, Slice::PostBolus, Slice::Nocturnal];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Overall => "overall",
            Slice::PostBolus => "post_bolus",
            Slice::Nocturnal => "nocturnal",
        }
    }
}

impl std::str::FromStr for Slice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "overall" => Ok(Slice::Overall),
            "post_bolus" | "post-bolus" => Ok(Slice::PostBolus),
            "nocturnal" => Ok(Slice::Nocturnal),
            other => Err(Error::InvalidInput(format!("unknown slice '{other}'"))),
        }
    }
}

impl std::fmt::Display for Slice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Slice membership of one forecast origin. `overall` is implicit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceTags {
    pub post_bolus: bool,
    pub nocturnal: bool,
}

impl SliceTags {
    pub fn contains(&self, slice: Slice) -> bool {
        match slice {
            Slice::Overall => true,
            Slice::PostBolus => self.post_bolus,
            Slice::Nocturnal => self.nocturnal,
        }
    }

    pub fn to_set(self) -> BTreeSet<Slice> {
        Slice::ALL.into_iter().filter(|s| self.contains(*s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    /// Bolus lookback for the post-bolus slice; membership window is
    /// the half-open interval (origin - window, origin].
    pub post_bolus_window: i64,
    /// Local clock interval [night_start, night_end) in seconds after midnight.
    pub night_start: i64,
    pub night_end: i64,
    /// Fixed offset from UTC of the cohort's local clock.
    pub utc_offset: i64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            post_bolus_window: 60 * MINUTE,
            night_start: 0,
            night_end: 6 * HOUR,
            utc_offset: 0,
        }
    }
}

/// Slice tags for grid index `index` of `record`.
pub fn tags_at(record: &SequenceRecord, index: usize, cfg: &SliceConfig) -> SliceTags {
    let origin_time = record.grid.time(index);
    let earliest = origin_time - cfg.post_bolus_window;
    let mut post_bolus = false;
    let mut j = index as isize;
    while j >= 0 {
        let ju = j as usize;
        let t = record.grid.time(ju);
        if t <= earliest {
            break;
        }
        if record.bolus_at(ju) > 0.0 {
            post_bolus = true;
            break;
        }
        j -= 1;
    }
    let clock = (origin_time + cfg.utc_offset).rem_euclid(DAY);
    let nocturnal = clock >= cfg.night_start && clock < cfg.night_end;
    SliceTags { post_bolus, nocturnal }
}

// ── Forecast samples ──────────────────────────────────────────────────

/// One evaluation unit: history `[origin-H+1, origin]`, target `[origin+1, origin+L]`.
#[derive(Debug, Clone, Copy)]
pub struct ForecastSample<'a> {
    pub record: &'a SequenceRecord,
    pub origin: usize,
    pub history_len: usize,
    pub horizon_len: usize,
    pub tags: SliceTags,
}

impl<'a> ForecastSample<'a> {
    pub fn new(
        record: &'a SequenceRecord,
        origin: usize,
        history_len: usize,
        horizon_len: usize,
        cfg: &SliceConfig,
    ) -> Result<Self> {
        if history_len == 0 || origin + 1 < history_len || origin + horizon_len >= record.len() {
            return Err(Error::InvalidInput(format!(
                "origin {origin} with H={history_len}, L={horizon_len} does not fit a record of {} steps",
                record.len()
            )));
        }
        Ok(Self {
            record,
            origin,
            history_len,
            horizon_len,
            tags: tags_at(record, origin, cfg),
        })
    }

    pub fn history_start(&self) -> usize {
        self.origin + 1 - self.history_len
    }

    pub fn target(&self) -> &'a [f64] {
        &self.record.cgm[self.origin + 1..=self.origin + self.horizon_len]
    }

    pub fn origin_time(&self) -> i64 {
        self.record.grid.time(self.origin)
    }
}

/// Re-derive the slice tags of a sample from its record and origin.
pub fn tag_slices(sample: &ForecastSample<'_>, cfg: &SliceConfig) -> SliceTags {
    tags_at(sample.record, sample.origin, cfg)
}

/// All windows of history `h` and horizon `l` at the given origin stride.
pub fn extract_windows<'a>(
    record: &'a SequenceRecord,
    h: usize,
    l: usize,
    stride: usize,
    cfg: &SliceConfig,
) -> Vec<ForecastSample<'a>> {
    let n = record.len();
    if h == 0 || stride == 0 || n < h + l {
        return Vec::new();
    }
    (h - 1..n - l)
        .step_by(stride)
        .map(|origin| ForecastSample {
            record,
            origin,
            history_len: h,
            horizon_len: l,
            tags: tags_at(record, origin, cfg),
        })
        .collect()
}

// ── Segmentation and resampling ───────────────────────────────────────

/// Irregular observations between two gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSegment {
    pub times: Vec<i64>,
    pub values: Vec<f64>,
}

impl RawSegment {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Split sorted observations wherever consecutive timestamps are more than `max_gap` apart.
pub fn split_on_gaps(timestamps: &[i64], values: &[f64], max_gap: i64) -> Vec<RawSegment> {
    debug_assert_eq!(timestamps.len(), values.len());
    let mut out = Vec::new();
    let mut cur = RawSegment { times: Vec::new(), values: Vec::new() };
    for (i, (&t, &v)) in timestamps.iter().zip(values).enumerate() {
        if i > 0 && t - timestamps[i - 1] > max_gap {
            out.push(std::mem::replace(&mut cur, RawSegment { times: Vec::new(), values: Vec::new() }));
        }
        cur.times.push(t);
        cur.values.push(v);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// A single channel resampled onto a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSeries {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

/// Linear interpolation of one gap-bounded segment onto the step-aligned grid
/// spanning it. Returns `None` for segments with fewer than two observations
/// or that contain no grid point.
pub fn interpolate_to_grid(segment: &RawSegment, step: i64) -> Option<GriddedSeries> {
    if segment.len() < 2 || step <= 0 {
        return None;
    }
    let first = segment.times[0];
    let last = *segment.times.last()?;
    let start = first.div_euclid(step) * step + if first.rem_euclid(step) == 0 { 0 } else { step };
    let end = last.div_euclid(step) * step;
    if start > end {
        return None;
    }
    let n = ((end - start) / step) as usize + 1;
    let mut values = Vec::with_capacity(n);
    let mut k = 0usize;
    for i in 0..n {
        let t = start + i as i64 * step;
        while k + 1 < segment.len() && segment.times[k + 1] < t {
            k += 1;
        }
        let (t0, v0) = (segment.times[k], segment.values[k]);
        let v = if t0 == t {
            v0
        } else {
            let (t1, v1) = (segment.times[k + 1], segment.values[k + 1]);
            if t1 == t {
                v1
            } else {
                v0 + (v1 - v0) * (t - t0) as f64 / (t1 - t0) as f64
            }
        };
        values.push(v);
    }
    Some(GriddedSeries {
        grid: TimeGrid { start, step, n_steps: n },
        values,
    })
}

// ── Subject splits ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl SplitAssignment {
    pub fn of(&self, pat_id: &str) -> Option<Split> {
        if self.train.contains(pat_id) {
            Some(Split::Train)
        } else if self.valid.contains(pat_id) {
            Some(Split::Valid)
        } else if self.test.contains(pat_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn get(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Seeded subject-level partition into train/valid/test.
///
/// Valid and test sizes are the rounded ratio shares (at least one subject
/// for any nonzero ratio); train takes the remainder.
pub fn split_patients<S: AsRef<str>>(subject_ids: &[S], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let ids: Vec<String> = subject_ids
        .iter()
        .map(|s| s.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = ids.len();
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(Error::NotEnoughSubjects { subjects: n, splits: nonzero });
    }
    let share = |r: f64| -> usize {
        if r > 0.0 {
            ((n as f64 * r).round() as usize).max(1)
        } else {
            0
        }
    };
    let mut n_valid = share(ratios[1]);
    let mut n_test = share(ratios[2]);
    let min_train = usize::from(ratios[0] > 0.0);
    // shrink the larger held-out share until train keeps its minimum
    while n_valid + n_test + min_train > n {
        if n_test >= n_valid && n_test > usize::from(ratios[2] > 0.0) {
            n_test -= 1;
        } else if n_valid > usize::from(ratios[1] > 0.0) {
            n_valid -= 1;
        } else {
            n_test -= 1;
        }
    }
    let n_train = n - n_valid - n_test;

    let mut shuffled = ids;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut it = shuffled.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let valid = it.by_ref().take(n_valid).collect();
    let test = it.collect();
    Ok(SplitAssignment { train, valid, test, ratios, seed })
}
