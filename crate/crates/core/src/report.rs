//! Patient-level aggregation, bootstrap intervals, report files and the
//! end-to-end benchmark run.
//!
//! Every metric is computed per patient first and then averaged with equal
//! weight per patient. Confidence intervals resample patients.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    evaluate_effects, evaluate_forecasts, evaluate_gating, evaluate_policy, gating_rows, index_trajectories, ForecastEvalConfig,
    ForecastRow, GatingRow,
};
use crate::counterfactual::{aggregate_by_subject, aggregate_selection, CounterfactualConfig, EpisodeMetrics, SelectionRow};
use crate::error::{Error, Result};
use crate::forecast::{fit_arx, select_ridge, ArxConfig, Forecaster, Oracle, Zoh};
use crate::gating::GatingConfig;
use crate::harmonize::HarmonizeConfig;
use crate::io::{read_harmonized, write_csv_with_header, write_json};
use crate::sim::{generate_paired_episodes, generate_standard, menu_for, sample_cohort, EpisodeConfig, Family, ScenarioConfig, StandardTrajectory};
use crate::timeseries::{extract_windows, split_patients, SequenceRecord, Slice, SliceConfig, MINUTE};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

// ── Seeds ─────────────────────────────────────────────────────────────

/// Stage seed: the first eight bytes (little endian) of
/// SHA-256(master seed as 8 LE bytes ‖ label).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

// ── Macro averaging ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMean {
    pub mean: Option<f64>,
    pub n_defined: usize,
    /// Patients without a defined (finite) value.
    pub n_excluded: usize,
}

pub fn macro_average(values: &[Option<f64>]) -> MacroMean {
    let defined: Vec<f64> = values.iter().filter_map(|v| v.filter(|x| x.is_finite())).collect();
    MacroMean {
        mean: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        n_defined: defined.len(),
        n_excluded: values.len() - defined.len(),
    }
}

// ── Bootstrap ─────────────────────────────────────────────────────────

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile interval of the mean, resampling patients with
/// replacement. `None` for an empty input; one value gives a point interval.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    let n = values.len();
    match n {
        0 => return None,
        1 => return Some((values[0], values[0])),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n as f64;
    // the percentile interval can miss the point estimate on tiny skewed samples
    Some((quantile_sorted(&means, 0.025).min(mean), quantile_sorted(&means, 0.975).max(mean)))
}

// ── Metric reports ────────────────────────────────────────────────────

/// Identifies one aggregated number in the report tables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReportKey {
    pub cohort: String,
    pub model: String,
    pub metric: String,
    /// Data slice, or intervention family for counterfactual metrics.
    pub slice: String,
    pub horizon_min: Option<i64>,
}

impl ReportKey {
    pub fn new(cohort: &str, model: &str, metric: &str, slice: &str, horizon_min: Option<i64>) -> Self {
        ReportKey { cohort: cohort.into(), model: model.into(), metric: metric.into(), slice: slice.into(), horizon_min }
    }

    fn label(&self) -> String {
        let h = self.horizon_min.map(|h| h.to_string()).unwrap_or_default();
        format!("bootstrap/{}/{}/{}/{}/{h}", self.cohort, self.model, self.metric, self.slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub key: ReportKey,
    pub per_patient: BTreeMap<String, Option<f64>>,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_patients: usize,
    pub n_excluded: usize,
}

impl MetricReport {
    /// Macro mean and bootstrap interval; the bootstrap seed is derived from
    /// `master_seed` and the key so reports do not depend on emission order.
    pub fn build(key: ReportKey, per_patient: BTreeMap<String, Option<f64>>, resamples: usize, master_seed: u64) -> Self {
        let per_patient: BTreeMap<_, _> = per_patient.into_iter().map(|(k, v)| (k, v.filter(|x| x.is_finite()))).collect();
        let values: Vec<Option<f64>> = per_patient.values().copied().collect();
        let m = macro_average(&values);
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let ci = bootstrap_ci(&defined, resamples, derive_seed(master_seed, &key.label()));
        MetricReport {
            key,
            per_patient,
            mean: m.mean,
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
            n_patients: m.n_defined,
            n_excluded: m.n_excluded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(m), Some(lo), Some(hi)) = (self.mean, self.ci_low, self.ci_high) {
            if !(lo <= m && m <= hi) {
                return Err(Error::InvalidInput(format!("{:?}: interval [{lo}, {hi}] excludes mean {m}", self.key)));
            }
        }
        if self.per_patient.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{:?}: non-finite patient value", self.key)));
        }
        Ok(())
    }
}

fn forecast_metric(row: &ForecastRow, metric: &str) -> f64 {
    match metric {
        "rmse" => row.rmse,
        _ => row.peg_unsafe_pct,
    }
}

/// RMSE and unsafe-zone percentage per (slice, lead).
pub fn forecast_reports(
    cohort: &str,
    model: &str,
    rows: &[ForecastRow],
    patients: &[String],
    slices: &[Slice],
    leads_min: &[i64],
    resamples: usize,
    seed: u64,
) -> Vec<MetricReport> {
    let mut out = Vec::new();
    for metric in ["rmse", "peg_unsafe_pct"] {
        for &slice in slices {
            for &lead in leads_min {
                let mut per: BTreeMap<String, Option<f64>> = patients.iter().map(|p| (p.clone(), None)).collect();
                for r in rows.iter().filter(|r| r.slice == slice && r.lead_min == lead) {
                    per.insert(r.subject_id.clone(), Some(forecast_metric(r, metric)));
                }
                out.push(MetricReport::build(ReportKey::new(cohort, model, metric, slice.name(), Some(lead)), per, resamples, seed));
            }
        }
    }
    out
}

/// Recall, false alarms per day and median lead time per slice.
pub fn gating_reports(cohort: &str, model: &str, rows: &[GatingRow], slices: &[Slice], ph_min: i64, resamples: usize, seed: u64) -> Vec<MetricReport> {
    type Get = fn(&GatingRow) -> Option<f64>;
    let metrics: [(&str, Get); 3] =
        [("recall", |r| r.recall), ("fa_per_day", |r| Some(r.fa_per_day)), ("median_lead_min", |r| r.median_lead_min)];
    let mut out = Vec::new();
    for (metric, get) in metrics {
        for &slice in slices {
            let per = rows.iter().filter(|r| r.slice == slice).map(|r| (r.subject_id.clone(), get(r))).collect();
            out.push(MetricReport::build(ReportKey::new(cohort, model, metric, slice.name(), Some(ph_min)), per, resamples, seed));
        }
    }
    out
}

/// Effect RMSE, sign agreement and Kendall tau-b per (family, lead),
/// macro-averaged over subjects.
pub fn effect_reports(cohort: &str, model: &str, rows: &[EpisodeMetrics], resamples: usize, seed: u64) -> Vec<MetricReport> {
    let subjects = aggregate_by_subject(rows);
    let mut groups: BTreeMap<(Family, i64), Vec<_>> = BTreeMap::new();
    for s in &subjects {
        groups.entry((s.family, s.lead_min)).or_default().push(s);
    }
    let mut out = Vec::new();
    for ((family, lead), ss) in groups {
        type Get = fn(&crate::counterfactual::SubjectEffectMetrics) -> Option<f64>;
        let metrics: [(&str, Get); 3] =
            [("effect_rmse", |s| s.effect_rmse), ("sign_agreement", |s| s.sign_agreement), ("kendall_tau_b", |s| s.kendall_tau_b)];
        for (metric, get) in metrics {
            let per = ss.iter().map(|s| (s.subject_id.clone(), get(s))).collect();
            out.push(MetricReport::build(ReportKey::new(cohort, model, metric, family.name(), Some(lead)), per, resamples, seed));
        }
    }
    out
}

/// Action match rate and regret, macro-averaged over subjects.
pub fn selection_reports(cohort: &str, model: &str, rows: &[SelectionRow], resamples: usize, seed: u64) -> Vec<MetricReport> {
    let subjects = aggregate_selection(rows);
    let amr = subjects.iter().map(|s| (s.subject_id.clone(), Some(s.action_match_rate))).collect();
    let regret = subjects.iter().map(|s| (s.subject_id.clone(), Some(s.regret))).collect();
    vec![
        MetricReport::build(ReportKey::new(cohort, model, "action_match_rate", "bolus_action", None), amr, resamples, seed),
        MetricReport::build(ReportKey::new(cohort, model, "regret", "bolus_action", None), regret, resamples, seed),
    ]
}

// ── Pareto data ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub cohort: String,
    pub slice: String,
    pub horizon_min: Option<i64>,
    pub model: String,
    pub recall: f64,
    pub fa_per_day: f64,
    /// Some other model has strictly higher recall and strictly fewer false alarms.
    pub dominated: bool,
}

/// Recall/false-alarm points per (cohort, slice, horizon) with dominance flags.
pub fn pareto_points(reports: &[MetricReport]) -> Vec<ParetoPoint> {
    let lookup: BTreeMap<(&str, &str, &str, Option<i64>, &str), f64> = reports
        .iter()
        .filter_map(|r| {
            let k = &r.key;
            r.mean.map(|m| ((k.cohort.as_str(), k.slice.as_str(), k.model.as_str(), k.horizon_min, k.metric.as_str()), m))
        })
        .collect();
    let mut points: Vec<ParetoPoint> = lookup
        .iter()
        .filter(|(k, _)| k.4 == "recall")
        .filter_map(|(&(cohort, slice, model, horizon_min, _), &recall)| {
            let fa = *lookup.get(&(cohort, slice, model, horizon_min, "fa_per_day"))?;
            Some(ParetoPoint {
                cohort: cohort.into(),
                slice: slice.into(),
                horizon_min,
                model: model.into(),
                recall,
                fa_per_day: fa,
                dominated: false,
            })
        })
        .collect();
    let snapshot = points.clone();
    for p in &mut points {
        p.dominated = snapshot.iter().any(|q| {
            q.cohort == p.cohort
                && q.slice == p.slice
                && q.horizon_min == p.horizon_min
                && q.recall > p.recall
                && q.fa_per_day < p.fa_per_day
        });
    }
    points
}

// ── Emission ──────────────────────────────────────────────────────────

pub const TABLE_HEADER: [&str; 10] =
    ["cohort", "model", "metric", "slice", "horizon_min", "mean", "ci_low", "ci_high", "n_patients", "n_excluded"];
pub const PARETO_HEADER: [&str; 7] = ["cohort", "slice", "horizon_min", "model", "recall", "fa_per_day", "dominated"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub table: PathBuf,
    pub pareto: PathBuf,
}

#[derive(Serialize)]
struct TableRow<'a> {
    cohort: &'a str,
    model: &'a str,
    metric: &'a str,
    slice: &'a str,
    horizon_min: Option<i64>,
    mean: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    n_patients: usize,
    n_excluded: usize,
}

/// Write `summary.json`, `table.csv` (cohort × horizon × metric × model)
/// and `pareto.csv` into `dir`.
pub fn emit_report(dir: impl AsRef<Path>, reports: &[MetricReport]) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in reports {
        r.validate()?;
    }
    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| {
        let (x, y) = (&a.key, &b.key);
        (&x.cohort, x.horizon_min, &x.metric, &x.slice, &x.model).cmp(&(&y.cohort, y.horizon_min, &y.metric, &y.slice, &y.model))
    });
    let files = ReportFiles { summary: dir.join("summary.json"), table: dir.join("table.csv"), pareto: dir.join("pareto.csv") };
    write_json(&files.summary, &ReportSummary { schema_version: REPORT_SCHEMA_VERSION, reports: sorted.clone() })?;
    let rows: Vec<TableRow> = sorted
        .iter()
        .map(|r| TableRow {
            cohort: &r.key.cohort,
            model: &r.key.model,
            metric: &r.key.metric,
            slice: &r.key.slice,
            horizon_min: r.key.horizon_min,
            mean: r.mean,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n_patients: r.n_patients,
            n_excluded: r.n_excluded,
        })
        .collect();
    write_csv_with_header(&files.table, &TABLE_HEADER, &rows)?;
    write_csv_with_header(&files.pareto, &PARETO_HEADER, &pareto_points(&sorted))?;
    Ok(files)
}

// ── Run configuration ─────────────────────────────────────────────────

/// A harmonized cohort CSV evaluated alongside the synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSource {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub name: String,
    /// Number of virtual subjects; zero disables the synthetic cohort.
    pub subjects: usize,
    pub scenario: ScenarioConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { name: "synthetic".into(), subjects: 40, scenario: ScenarioConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub harmonize: HarmonizeConfig,
    pub cohorts: Vec<CohortSource>,
    pub simulation: SimulationConfig,
    /// Any of zoh, arx, arx_ac, oracle, negated_oracle.
    pub models: Vec<String>,
    pub arx: ArxConfig,
    /// Ridge weights tried on the validation split; empty keeps `arx.ridge`.
    pub ridge_grid: Vec<f64>,
    /// Train / validation / test subject shares.
    pub split: [f64; 3],
    pub history_len: usize,
    pub horizon_len: usize,
    /// Window stride for model fitting and forecast evaluation.
    pub stride: usize,
    pub leads_min: Vec<i64>,
    pub ph_min: i64,
    pub threshold: f64,
    pub slices: Vec<Slice>,
    pub slice_config: SliceConfig,
    pub families: Vec<Family>,
    pub episodes: EpisodeConfig,
    pub counterfactual: CounterfactualConfig,
    pub bootstrap_resamples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            harmonize: HarmonizeConfig::default(),
            cohorts: Vec::new(),
            simulation: SimulationConfig::default(),
            models: ["zoh", "arx", "arx_ac", "oracle"].map(String::from).to_vec(),
            arx: ArxConfig::default(),
            ridge_grid: vec![0.1, 1.0, 10.0],
            split: [0.6, 0.1, 0.3],
            history_len: 288,
            horizon_len: 24,
            stride: 1,
            leads_min: vec![30, 60, 120],
            ph_min: 30,
            threshold: crate::gating::HYPO_THRESHOLD,
            slices: Slice::ALL.to_vec(),
            slice_config: SliceConfig::default(),
            families: vec![Family::Basal, Family::Bolus],
            episodes: EpisodeConfig::default(),
            counterfactual: CounterfactualConfig::default(),
            bootstrap_resamples: DEFAULT_RESAMPLES,
        }
    }
}

/// Set `dotted.key` in a TOML table; the value is parsed as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidInput(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::InvalidInput(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse a TOML config (or defaults when `text` is empty) and apply
    /// `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = table.try_into()?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Structural checks that need no file access.
    pub fn check(&self) -> Result<()> {
        self.harmonize.validate()?;
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.history_len == 0 || self.horizon_len == 0 || self.stride == 0 {
            return bad("history_len, horizon_len and stride must be positive".into());
        }
        if self.ph_min <= 0 || self.leads_min.iter().any(|&l| l <= 0) {
            return bad("horizons must be positive".into());
        }
        for m in &self.models {
            if !MODEL_NAMES.contains(&m.as_str()) {
                return bad(format!("unknown model '{m}' (expected one of {MODEL_NAMES:?})"));
            }
        }
        Ok(())
    }

    /// Every referenced cohort file must exist.
    pub fn validate(&self) -> Result<()> {
        self.check()?;
        for c in &self.cohorts {
            if !c.path.is_file() {
                return Err(Error::InvalidInput(format!("cohort '{}': {} does not exist", c.name, c.path.display())));
            }
        }
        Ok(())
    }

    pub fn gating(&self) -> GatingConfig {
        GatingConfig { threshold: self.threshold, ph: self.ph_min * MINUTE, slices: self.slice_config }
    }

    pub fn forecast_eval(&self) -> ForecastEvalConfig {
        ForecastEvalConfig {
            history_len: self.history_len,
            horizon_len: self.horizon_len,
            stride: self.stride,
            leads_min: self.leads_min.clone(),
            slices: self.slice_config,
        }
    }
}

pub const MODEL_NAMES: [&str; 5] = ["zoh", "arx", "arx_ac", "oracle", "negated_oracle"];

// ── End-to-end run ────────────────────────────────────────────────────

/// Per-row outputs of one cohort, kept next to the report tables.
#[derive(Debug, Clone, Default)]
pub struct CohortOutputs {
    pub reports: Vec<MetricReport>,
    pub forecast_rows: Vec<(String, ForecastRow)>,
    pub gating_rows: Vec<(String, GatingRow)>,
    pub effect_rows: Vec<(String, EpisodeMetrics)>,
    pub selection_rows: Vec<(String, SelectionRow)>,
}

fn records_of<'a>(records: &'a [SequenceRecord], ids: &std::collections::BTreeSet<String>) -> Vec<&'a SequenceRecord> {
    records.iter().filter(|r| ids.contains(&r.pat_id)).collect()
}

fn windows<'a>(records: &[&'a SequenceRecord], cfg: &RunConfig) -> Vec<crate::timeseries::ForecastSample<'a>> {
    records.iter().flat_map(|r| extract_windows(r, cfg.history_len, cfg.horizon_len, cfg.stride, &cfg.slice_config)).collect()
}

fn build_model(name: &str, cfg: &RunConfig, train: &[&SequenceRecord], valid: &[&SequenceRecord]) -> Result<Box<dyn Forecaster>> {
    let arx = |action_conditional: bool| -> Result<Box<dyn Forecaster>> {
        let arx_cfg = ArxConfig { action_conditional, ..cfg.arx.clone() };
        let tr = windows(train, cfg);
        let va = windows(valid, cfg);
        let lead = ((cfg.ph_min * MINUTE) / crate::timeseries::DEFAULT_STEP).clamp(1, cfg.horizon_len as i64) as usize;
        let params = if cfg.ridge_grid.is_empty() || va.is_empty() {
            fit_arx(&tr, &arx_cfg)?
        } else {
            select_ridge(&tr, &va, &cfg.ridge_grid, lead, &arx_cfg)?
        };
        log::info!("{name}: ridge {} on {} windows", params.ridge, tr.len());
        Ok(Box::new(params))
    };
    match name {
        "zoh" => Ok(Box::new(Zoh)),
        "arx" => arx(false),
        "arx_ac" => arx(true),
        "oracle" => Ok(Box::new(Oracle::exact())),
        "negated_oracle" => Ok(Box::new(Oracle::negated())),
        other => Err(Error::InvalidInput(format!("unknown model '{other}'"))),
    }
}

/// Fit every configured model on the train split and evaluate on the test
/// split. Simulator-backed cohorts also get the counterfactual arms.
pub fn evaluate_cohort(
    cohort: &str,
    records: &[SequenceRecord],
    trajectories: Option<&[StandardTrajectory]>,
    cfg: &RunConfig,
) -> Result<CohortOutputs> {
    let ids: Vec<&str> = records.iter().map(|r| r.pat_id.as_str()).collect();
    let split = split_patients(&ids, cfg.split, derive_seed(cfg.seed, &format!("split/{cohort}")))?;
    let train = records_of(records, &split.train);
    let valid = records_of(records, &split.valid);
    let test: Vec<SequenceRecord> = records_of(records, &split.test).into_iter().cloned().collect();
    let patients: Vec<String> = split.test.iter().cloned().collect();
    log::info!("{cohort}: {} train / {} valid / {} test subjects", split.train.len(), split.valid.len(), split.test.len());

    let test_trajs: Vec<&StandardTrajectory> =
        trajectories.map(|ts| ts.iter().filter(|t| split.test.contains(&t.subject.subject_id)).collect()).unwrap_or_default();
    let owned: Vec<StandardTrajectory> = test_trajs.iter().map(|t| (*t).clone()).collect();
    let index = index_trajectories(&owned);
    let sims = trajectories.map(|_| &index);

    let menu = menu_for(&cfg.families);
    let episodes: Vec<_> = owned.iter().map(|t| generate_paired_episodes(t, &menu, &cfg.episodes)).collect();

    let gating_cfg = cfg.gating();
    let resamples = cfg.bootstrap_resamples;
    let mut out = CohortOutputs::default();
    for name in &cfg.models {
        if name.contains("oracle") && trajectories.is_none() {
            log::warn!("{cohort}: skipping {name}, the cohort has no simulator");
            continue;
        }
        let model = build_model(name, cfg, &train, &valid)?;

        let frows = evaluate_forecasts(model.as_ref(), &test, sims, &cfg.forecast_eval())?;
        out.reports.extend(forecast_reports(cohort, name, &frows, &patients, &cfg.slices, &cfg.leads_min, resamples, cfg.seed));
        out.forecast_rows.extend(frows.into_iter().map(|r| (name.clone(), r)));

        let grows = gating_rows(&evaluate_gating(model.as_ref(), &test, sims, cfg.history_len, &gating_cfg)?)?;
        out.reports.extend(gating_reports(cohort, name, &grows, &cfg.slices, cfg.ph_min, resamples, cfg.seed));
        out.gating_rows.extend(grows.into_iter().map(|r| (name.clone(), r)));

        if trajectories.is_some() {
            let mut effects = Vec::new();
            let mut selections = Vec::new();
            for (traj, pairs) in owned.iter().zip(&episodes) {
                effects.extend(evaluate_effects(model.as_ref(), traj, pairs, cfg.history_len, &cfg.leads_min, &cfg.counterfactual)?);
                selections.extend(evaluate_policy(model.as_ref(), traj, pairs, cfg.history_len)?);
            }
            out.reports.extend(effect_reports(cohort, name, &effects, resamples, cfg.seed));
            out.reports.extend(selection_reports(cohort, name, &selections, resamples, cfg.seed));
            out.effect_rows.extend(effects.into_iter().map(|r| (name.clone(), r)));
            out.selection_rows.extend(selections.into_iter().map(|r| (name.clone(), r)));
        }
    }
    Ok(out)
}

/// The synthetic cohort of a run: subject seeds start at a value derived
/// from the master seed.
pub fn simulate_cohort(cfg: &RunConfig) -> Vec<StandardTrajectory> {
    let first = derive_seed(cfg.seed, "simulation") % 100_000;
    sample_cohort(cfg.simulation.subjects, first).iter().map(|s| generate_standard(s, &cfg.simulation.scenario)).collect()
}

/// Field names of a flat serializable row.
fn header_of<T: Serialize>(row: &T) -> Result<Vec<String>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.serialize(row)?;
    let bytes = wr.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    Ok(rd.headers()?.iter().map(String::from).collect())
}

fn write_tagged<T: Serialize>(path: &Path, rows: &[(&str, &str, &T)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let mut header = vec!["cohort".to_string(), "model".to_string()];
    if let Some((_, _, first)) = rows.first() {
        header.extend(header_of(first)?);
    }
    wr.write_record(&header)?;
    for row in rows {
        wr.serialize(row)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

fn tagged<'a, T>(
    cohorts: &'a [(String, CohortOutputs)],
    field: impl Fn(&'a CohortOutputs) -> &'a Vec<(String, T)>,
) -> Vec<(&'a str, &'a str, &'a T)> {
    cohorts.iter().flat_map(|(c, o)| field(o).iter().map(move |(m, r)| (c.as_str(), m.as_str(), r))).collect()
}

/// Simulate, fit, evaluate and write the report files into `out_dir`.
/// Output bytes are a pure function of `cfg`.
pub fn run_benchmark(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<(Vec<MetricReport>, ReportFiles)> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut cohorts: Vec<(String, CohortOutputs)> = Vec::new();
    if cfg.simulation.subjects > 0 {
        let trajs = simulate_cohort(cfg);
        let records: Vec<SequenceRecord> = trajs.iter().map(|t| t.record.clone()).collect();
        let name = cfg.simulation.name.clone();
        cohorts.push((name.clone(), evaluate_cohort(&name, &records, Some(&trajs), cfg)?));
    }
    for c in &cfg.cohorts {
        let mut records = read_harmonized(&c.path)?;
        for r in &mut records {
            r.validate()?;
        }
        records.sort_by(|a, b| (&a.pat_id, a.seq_id).cmp(&(&b.pat_id, b.seq_id)));
        cohorts.push((c.name.clone(), evaluate_cohort(&c.name, &records, None, cfg)?));
    }

    let files = emit_report(out_dir, &cohorts.iter().flat_map(|(_, o)| o.reports.iter().cloned()).collect::<Vec<_>>())?;
    write_tagged(&out_dir.join("forecast_rows.csv"), &tagged(&cohorts, |o| &o.forecast_rows))?;
    write_tagged(&out_dir.join("gating_rows.csv"), &tagged(&cohorts, |o| &o.gating_rows))?;
    write_tagged(&out_dir.join("effect_rows.csv"), &tagged(&cohorts, |o| &o.effect_rows))?;
    write_tagged(&out_dir.join("selection_rows.csv"), &tagged(&cohorts, |o| &o.selection_rows))?;
    let reports = cohorts.into_iter().flat_map(|(_, o)| o.reports).collect();
    Ok((reports, files))
}
