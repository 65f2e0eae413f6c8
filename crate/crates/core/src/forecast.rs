//! Point forecasters behind a shared request/response interface.
//!
//! A request carries the history channels up to the origin and, in
//! action-conditional mode, the planned basal and bolus over the horizon.
//! Simulator-generated requests may also carry a [`SimContext`], which the
//! oracle forecasters replay.

use std::borrow::Cow;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimContext;
use crate::timeseries::ForecastSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Cgm,
    Basal,
    Bolus,
    Meal,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Cgm, Channel::Basal, Channel::Bolus, Channel::Meal];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Cgm => "cgm",
            Channel::Basal => "basal",
            Channel::Bolus => "bolus",
            Channel::Meal => "meal",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!("unknown channel '{s}'")))
    }
}

fn names(channels: &[Channel]) -> Vec<String> {
    channels.iter().map(|c| c.name().to_string()).collect()
}

// ── Requests ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedActions<'a> {
    pub basal: Cow<'a, [f64]>,
    pub bolus: Cow<'a, [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRequest<'a> {
    /// History arrays ending at the origin, one per channel.
    pub history: Vec<(Channel, Cow<'a, [f64]>)>,
    pub planned: Option<PlannedActions<'a>>,
    pub horizon_len: usize,
    pub sim: Option<Cow<'a, SimContext>>,
}

impl<'a> ForecastRequest<'a> {
    /// Request for a windowed sample; `with_plan` attaches the recorded
    /// basal and bolus over the horizon as the planned actions.
    pub fn from_sample(sample: &ForecastSample<'a>, with_plan: bool) -> Self {
        let r = sample.record;
        let hist = sample.history_start()..sample.origin + 1;
        let fut = sample.origin + 1..sample.origin + 1 + sample.horizon_len;
        let bolus_sum = |range: std::ops::Range<usize>| -> Cow<'a, [f64]> {
            if r.bolus_extended[range.clone()].iter().all(|b| *b == 0.0) {
                Cow::Borrowed(&r.bolus_standard[range])
            } else {
                Cow::Owned(range.map(|i| r.bolus_at(i)).collect())
            }
        };
        let history = vec![
            (Channel::Cgm, Cow::Borrowed(&r.cgm[hist.clone()])),
            (Channel::Basal, Cow::Borrowed(&r.basal[hist.clone()])),
            (Channel::Bolus, bolus_sum(hist.clone())),
            (Channel::Meal, Cow::Borrowed(&r.meal[hist])),
        ];
        let planned = with_plan.then(|| PlannedActions {
            basal: Cow::Borrowed(&r.basal[fut.clone()]),
            bolus: bolus_sum(fut),
        });
        ForecastRequest { history, planned, horizon_len: sample.horizon_len, sim: None }
    }

    pub fn with_sim(mut self, ctx: &'a SimContext) -> Self {
        self.sim = Some(Cow::Borrowed(ctx));
        self
    }

    pub fn with_plan(mut self, basal: Vec<f64>, bolus: Vec<f64>) -> Self {
        self.planned = Some(PlannedActions { basal: Cow::Owned(basal), bolus: Cow::Owned(bolus) });
        self
    }

    pub fn channel(&self, c: Channel) -> Option<&[f64]> {
        self.history.iter().find(|(k, _)| *k == c).map(|(_, v)| v.as_ref())
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.history.iter().map(|(c, _)| *c).collect()
    }

    pub fn last_glucose(&self) -> Result<f64> {
        self.channel(Channel::Cgm)
            .and_then(|g| g.last().copied())
            .ok_or_else(|| Error::InvalidInput("request has no glucose history".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let Some((_, first)) = self.history.first() else {
            return Err(Error::InvalidInput("empty history".into()));
        };
        for (_, v) in &self.history {
            if v.len() != first.len() {
                return Err(Error::LengthMismatch { expected: first.len(), got: v.len() });
            }
        }
        if let Some(p) = &self.planned {
            for v in [&p.basal, &p.bolus] {
                if v.len() != self.horizon_len {
                    return Err(Error::LengthMismatch { expected: self.horizon_len, got: v.len() });
                }
            }
        }
        Ok(())
    }
}

/// Point forecast of the next `horizon_len` glucose values.
pub type ForecastOutput = Vec<f64>;

pub trait Forecaster: Send + Sync {
    fn name(&self) -> &str;

    fn predict(&self, request: &ForecastRequest<'_>) -> Result<ForecastOutput>;

    /// Whether predictions depend on the planned actions.
    fn action_conditional(&self) -> bool {
        false
    }

    /// Shortest horizon a request must carry, if the model needs one.
    fn min_horizon(&self) -> usize {
        1
    }
}

// ── Zero-order hold ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct Zoh;

pub fn zoh_predict(request: &ForecastRequest<'_>) -> Result<ForecastOutput> {
    Ok(vec![request.last_glucose()?; request.horizon_len])
}

impl Forecaster for Zoh {
    fn name(&self) -> &str {
        "zoh"
    }

    fn predict(&self, request: &ForecastRequest<'_>) -> Result<ForecastOutput> {
        zoh_predict(request)
    }
}

// ── ARX ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArxConfig {
    pub lags: usize,
    pub ridge: f64,
    pub channels: Vec<Channel>,
    pub action_conditional: bool,
}

impl Default for ArxConfig {
    fn default() -> Self {
        Self { lags: 12, ridge: 1.0, channels: Channel::ALL.to_vec(), action_conditional: false }
    }
}

/// Direct multi-horizon ARX: one linear head per lead on raw-scale inputs.
///
/// Feature layout per head: for each channel, lags 0..p (lag 0 is the
/// origin), then in action-conditional mode the planned basal and bolus at
/// leads 1..L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxParams {
    pub lags: usize,
    pub ridge: f64,
    pub channels: Vec<Channel>,
    pub action_conditional: bool,
    pub horizon: usize,
    pub intercepts: Vec<f64>,
    /// `coefficients[k]` is the weight vector of lead `k + 1`.
    pub coefficients: Vec<Vec<f64>>,
}

impl ArxParams {
    pub fn n_features(&self) -> usize {
        feature_len(self.lags, self.channels.len(), self.action_conditional, self.horizon)
    }

    /// Weight of `channel` at `lag` for lead `lead` (1-based).
    pub fn coefficient(&self, lead: usize, channel: Channel, lag: usize) -> Option<f64> {
        let c = self.channels.iter().position(|k| *k == channel)?;
        (lag < self.lags).then(|| self.coefficients.get(lead.checked_sub(1)?)).flatten().map(|w| w[c * self.lags + lag])
    }

    fn features(&self, req: &ForecastRequest<'_>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_features());
        for &c in &self.channels {
            let h = req.channel(c).ok_or_else(|| Error::ChannelMismatch {
                expected: names(&self.channels),
                got: names(&req.channels()),
            })?;
            if h.len() < self.lags {
                return Err(Error::LengthMismatch { expected: self.lags, got: h.len() });
            }
            out.extend(h.iter().rev().take(self.lags));
        }
        if self.action_conditional {
            let p = req.planned.as_ref().ok_or_else(|| {
                Error::InvalidInput("action-conditional model needs planned basal and bolus".into())
            })?;
            for v in [&p.basal, &p.bolus] {
                if v.len() < self.horizon {
                    return Err(Error::LengthMismatch { expected: self.horizon, got: v.len() });
                }
                out.extend_from_slice(&v[..self.horizon]);
            }
        }
        Ok(out)
    }
}

fn feature_len(lags: usize, channels: usize, action_conditional: bool, horizon: usize) -> usize {
    lags * channels + if action_conditional { 2 * horizon } else { 0 }
}

pub fn arx_predict(params: &ArxParams, request: &ForecastRequest<'_>) -> Result<ForecastOutput> {
    if request.horizon_len > params.horizon {
        return Err(Error::InvalidInput(format!(
            "model horizon {} is shorter than the requested {}",
            params.horizon, request.horizon_len
        )));
    }
    let x = params.features(request)?;
    Ok(params.coefficients[..request.horizon_len]
        .iter()
        .zip(&params.intercepts)
        .map(|(w, b)| b + w.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>())
        .collect())
}

impl Forecaster for ArxParams {
    fn name(&self) -> &str {
        if self.action_conditional {
            "arx_ac"
        } else {
            "arx"
        }
    }

    fn predict(&self, request: &ForecastRequest<'_>) -> Result<ForecastOutput> {
        arx_predict(self, request)
    }

    fn action_conditional(&self) -> bool {
        self.action_conditional
    }

    fn min_horizon(&self) -> usize {
        if self.action_conditional {
            self.horizon
        } else {
            1
        }
    }
}

/// Fit by ridge regression in standardized coordinates.
///
/// Each channel (and each planned-action block) is scaled by its pooled
/// standard deviation over the training features, the target by the pooled
/// deviation of all leads; zero-variance groups keep unit scale. The
/// intercept is not penalized. All heads share one normal matrix.
pub fn fit_arx(samples: &[ForecastSample<'_>], cfg: &ArxConfig) -> Result<ArxParams> {
    let horizon = samples.first().map(|s| s.horizon_len).unwrap_or(0);
    if cfg.lags == 0 || cfg.channels.is_empty() || horizon == 0 {
        return Err(Error::InvalidInput("ARX needs at least one lag, channel and lead".into()));
    }
    if !(cfg.ridge >= 0.0 && cfg.ridge.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge weight must be finite and non-negative, got {}", cfg.ridge)));
    }
    let d = feature_len(cfg.lags, cfg.channels.len(), cfg.action_conditional, horizon);
    let needed = cfg.lags * cfg.channels.len() + horizon + 1;
    if samples.len() < needed {
        return Err(Error::InvalidInput(format!("ARX needs at least {needed} training samples, got {}", samples.len())));
    }
    let template = ArxParams {
        lags: cfg.lags,
        ridge: cfg.ridge,
        channels: cfg.channels.clone(),
        action_conditional: cfg.action_conditional,
        horizon,
        intercepts: Vec::new(),
        coefficients: Vec::new(),
    };

    // Moments are accumulated around the first sample to limit cancellation.
    let mut shift_x: Option<Vec<f64>> = None;
    let mut shift_y = 0.0;
    let mut sx = vec![0.0; d];
    let mut sy = vec![0.0; horizon];
    let mut sxx = DMatrix::<f64>::zeros(d, d);
    let mut sxy = DMatrix::<f64>::zeros(d, horizon);
    let mut syy = 0.0;
    for s in samples {
        if s.horizon_len != horizon {
            return Err(Error::LengthMismatch { expected: horizon, got: s.horizon_len });
        }
        let req = ForecastRequest::from_sample(s, cfg.action_conditional);
        let mut x = template.features(&req)?;
        let mut y = s.target().to_vec();
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite training feature".into()));
        }
        let sh = shift_x.get_or_insert_with(|| {
            shift_y = y[0];
            x.clone()
        });
        x.iter_mut().zip(sh.iter()).for_each(|(v, c)| *v -= c);
        y.iter_mut().for_each(|v| *v -= shift_y);
        for i in 0..d {
            sx[i] += x[i];
            if x[i] == 0.0 {
                continue;
            }
            for j in i..d {
                sxx[(i, j)] += x[i] * x[j];
            }
            for k in 0..horizon {
                sxy[(i, k)] += x[i] * y[k];
            }
        }
        for k in 0..horizon {
            sy[k] += y[k];
            syy += y[k] * y[k];
        }
    }
    let n = samples.len() as f64;
    let shift_x = shift_x.expect("non-empty");
    let mx: Vec<f64> = sx.iter().map(|v| v / n).collect();
    let my: Vec<f64> = sy.iter().map(|v| v / n).collect();
    // centered cross products
    let mut cxx = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = sxx[(i, j)] - n * mx[i] * mx[j];
            cxx[(i, j)] = v;
            cxx[(j, i)] = v;
        }
    }
    let mut cxy = DMatrix::<f64>::zeros(d, horizon);
    for i in 0..d {
        for k in 0..horizon {
            cxy[(i, k)] = sxy[(i, k)] - n * mx[i] * my[k];
        }
    }

    // pooled group scales
    let mut groups: Vec<std::ops::Range<usize>> =
        (0..cfg.channels.len()).map(|c| c * cfg.lags..(c + 1) * cfg.lags).collect();
    if cfg.action_conditional {
        let base = cfg.lags * cfg.channels.len();
        groups.push(base..base + horizon);
        groups.push(base + horizon..base + 2 * horizon);
    }
    let pooled_sd = |sum: f64, sumsq: f64, count: f64| {
        let var = (sumsq / count - (sum / count).powi(2)).max(0.0);
        if var > 1e-12 {
            var.sqrt()
        } else {
            1.0
        }
    };
    let mut scale = vec![1.0; d];
    for g in &groups {
        let sum: f64 = g.clone().map(|i| sx[i]).sum();
        let sumsq: f64 = g.clone().map(|i| sxx[(i, i)]).sum();
        let sd = pooled_sd(sum, sumsq, n * g.len() as f64);
        g.clone().for_each(|i| scale[i] = sd);
    }
    let scale_y = pooled_sd(sy.iter().sum(), syy, n * horizon as f64);

    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = cxx[(i, j)] / (scale[i] * scale[j]);
        }
        a[(i, i)] += cfg.ridge;
    }
    let mut b = DMatrix::<f64>::zeros(d, horizon);
    for i in 0..d {
        for k in 0..horizon {
            b[(i, k)] = cxy[(i, k)] / (scale[i] * scale_y);
        }
    }
    let max_diag = (0..d).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let chol = a.clone().cholesky().ok_or(Error::SingularSystem)?;
    let l = chol.l_dirty();
    if (0..d).any(|i| l[(i, i)].powi(2) <= 1e-12 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::SingularSystem);
    }
    let w = chol.solve(&b);

    let mut coefficients = Vec::with_capacity(horizon);
    let mut intercepts = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let beta: Vec<f64> = (0..d).map(|i| w[(i, k)] * scale_y / scale[i]).collect();
        // intercept on the original (unshifted) scale
        let mean_x_raw: Vec<f64> = (0..d).map(|i| mx[i] + shift_x[i]).collect();
        let mean_y_raw = my[k] + shift_y;
        let b0 = mean_y_raw - beta.iter().zip(&mean_x_raw).map(|(a, v)| a * v).sum::<f64>();
        intercepts.push(b0);
        coefficients.push(beta);
    }
    Ok(ArxParams { intercepts, coefficients, ..template })
}

/// Root mean squared error at one lead (1-based) over samples.
pub fn lead_rmse(model: &dyn Forecaster, samples: &[ForecastSample<'_>], lead: usize, with_plan: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut sse = 0.0;
    for s in samples {
        let pred = model.predict(&ForecastRequest::from_sample(s, with_plan))?;
        let e = pred[lead - 1] - s.target()[lead - 1];
        sse += e * e;
    }
    Ok((sse / samples.len() as f64).sqrt())
}

/// Pick the ridge weight with the lowest validation RMSE at `lead`
/// (first of the grid on ties) and return the model fitted with it.
pub fn select_ridge(
    train: &[ForecastSample<'_>],
    valid: &[ForecastSample<'_>],
    grid: &[f64],
    lead: usize,
    cfg: &ArxConfig,
) -> Result<ArxParams> {
    let mut best: Option<(f64, ArxParams)> = None;
    for &ridge in grid {
        let model = fit_arx(train, &ArxConfig { ridge, ..cfg.clone() })?;
        let score = lead_rmse(&model, valid, lead, cfg.action_conditional)?;
        log::debug!("ridge {ridge}: validation rmse {score:.3} at lead {lead}");
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, model));
        }
    }
    best.map(|(_, m)| m).ok_or_else(|| Error::InvalidInput("empty ridge grid".into()))
}

// ── Simulator oracles ─────────────────────────────────────────────────

/// Replays the simulator under the requested plan (or the factual plan when
/// none is given). The negated variant mirrors the intervention effect
/// around the factual trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct Oracle {
    pub negated: bool,
}

impl Oracle {
    pub fn exact() -> Self {
        Oracle { negated: false }
    }

    pub fn negated() -> Self {
        Oracle { negated: true }
    }
}

pub fn oracle_predict(request: &ForecastRequest<'_>, negated: bool) -> Result<ForecastOutput> {
    let ctx = request.sim.as_deref().ok_or(Error::NoSimulatorContext)?;
    let l = request.horizon_len;
    if l > ctx.horizon() {
        return Err(Error::LengthMismatch { expected: ctx.horizon(), got: l });
    }
    let factual = ctx.simulate(&ctx.factual_basal[..l], &ctx.factual_bolus[..l]);
    let Some(plan) = &request.planned else {
        return Ok(factual);
    };
    let truth = ctx.simulate(&plan.basal[..l], &plan.bolus[..l]);
    if !negated {
        return Ok(truth);
    }
    Ok(factual.iter().zip(&truth).map(|(f, c)| f - (c - f)).collect())
}

impl Forecaster for Oracle {
    fn name(&self) -> &str {
        if self.negated {
            "negated_oracle"
        } else {
            "oracle"
        }
    }

    fn predict(&self, request: &ForecastRequest<'_>) -> Result<ForecastOutput> {
        oracle_predict(request, self.negated)
    }

    fn action_conditional(&self) -> bool {
        true
    }
}

// ── Model files ───────────────────────────────────────────────────────

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Zoh,
    Arx(ArxParams),
    /// Simulator replay; only usable where simulator contexts exist.
    Oracle { negated: bool },
}

impl ModelSpec {
    pub fn into_forecaster(self) -> Box<dyn Forecaster> {
        match self {
            ModelSpec::Zoh => Box::new(Zoh),
            ModelSpec::Arx(p) => Box::new(p),
            ModelSpec::Oracle { negated } => Box::new(Oracle { negated }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub spec: ModelSpec,
}

pub fn save_model(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<()> {
    crate::io::write_json(path, &ModelFile { schema_version: MODEL_SCHEMA_VERSION, spec: spec.clone() })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let file: ModelFile = crate::io::read_json(path)?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion(format!(
            "model file has schema version {}, expected {MODEL_SCHEMA_VERSION}",
            file.schema_version
        )));
    }
    Ok(file.spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{extract_windows, SequenceRecord, SliceConfig, TimeGrid};

    fn record(cgm: Vec<f64>) -> SequenceRecord {
        let n = cgm.len();
        SequenceRecord::from_cgm("p", 0, TimeGrid { start: 0, step: 300, n_steps: n }, cgm)
    }

    fn request(cgm: &[f64], horizon: usize) -> ForecastRequest<'_> {
        ForecastRequest { history: vec![(Channel::Cgm, Cow::Borrowed(cgm))], planned: None, horizon_len: horizon, sim: None }
    }

    #[test]
    fn zoh_holds_last_value() {
        assert_eq!(Zoh.predict(&request(&[100.0, 120.0, 142.0], 4)).unwrap(), vec![142.0; 4]);
        assert_eq!(Zoh.predict(&request(&[100.0; 5], 2)).unwrap(), vec![100.0; 2]);
        assert!(Zoh.predict(&request(&[], 2)).is_err());
    }

    fn ar1_record(n: usize) -> SequenceRecord {
        // restart the decay every 40 steps so the series stays well scaled
        record((0..n).map(|i| 200.0 * 0.9f64.powi((i % 40) as i32)).collect())
    }

    #[test]
    fn arx_recovers_ar1() {
        let rec = ar1_record(2000);
        // only windows without a restart inside lag/target span
        let samples: Vec<_> = extract_windows(&rec, 1, 1, 1, &SliceConfig::default())
            .into_iter()
            .filter(|s| s.origin % 40 != 39)
            .collect();
        let cfg = ArxConfig { lags: 1, ridge: 0.0, channels: vec![Channel::Cgm], action_conditional: false };
        let m = fit_arx(&samples, &cfg).unwrap();
        assert!((m.coefficient(1, Channel::Cgm, 0).unwrap() - 0.9).abs() < 1e-6);
        assert!(m.intercepts[0].abs() < 1e-6);
    }

    #[test]
    fn arx_hand_built_params() {
        let p = ArxParams {
            lags: 1,
            ridge: 0.0,
            channels: vec![Channel::Cgm],
            action_conditional: false,
            horizon: 1,
            intercepts: vec![5.0],
            coefficients: vec![vec![0.9]],
        };
        assert!((p.predict(&request(&[80.0, 100.0], 1)).unwrap()[0] - 95.0).abs() < 1e-12);
        let z = ArxParams { intercepts: vec![120.0, 120.0], coefficients: vec![vec![0.0], vec![0.0]], horizon: 2, ..p.clone() };
        assert_eq!(z.predict(&request(&[80.0], 2)).unwrap(), vec![120.0, 120.0]);
        let wrong = ForecastRequest { history: vec![(Channel::Basal, Cow::Owned(vec![1.0]))], ..request(&[], 1) };
        assert!(matches!(p.predict(&wrong), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn arx_constant_series_and_ridge_limits() {
        let rec = record(vec![150.0; 400]);
        let samples = extract_windows(&rec, 12, 6, 1, &SliceConfig::default());
        let cfg = ArxConfig { channels: vec![Channel::Cgm], ..Default::default() };
        let m = fit_arx(&samples, &cfg).unwrap();
        for p in m.predict(&ForecastRequest::from_sample(&samples[0], false)).unwrap() {
            assert!((p - 150.0).abs() < 1e-9);
        }
        assert!(matches!(fit_arx(&samples, &ArxConfig { ridge: 0.0, ..cfg.clone() }), Err(Error::SingularSystem)));

        let rec = ar1_record(1000);
        let samples = extract_windows(&rec, 12, 6, 1, &SliceConfig::default());
        let huge = fit_arx(&samples, &ArxConfig { ridge: 1e15, ..cfg }).unwrap();
        let mean1 = samples.iter().map(|s| s.target()[0]).sum::<f64>() / samples.len() as f64;
        assert!(huge.coefficients.iter().flatten().all(|c| c.abs() < 1e-6));
        assert!((huge.predict(&ForecastRequest::from_sample(&samples[3], false)).unwrap()[0] - mean1).abs() < 1e-3);
    }

    #[test]
    fn arx_needs_enough_samples() {
        let rec = ar1_record(40);
        let samples = extract_windows(&rec, 12, 24, 1, &SliceConfig::default());
        assert!(fit_arx(&samples, &ArxConfig::default()).is_err());
    }

    #[test]
    fn model_file_round_trip_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let spec = ModelSpec::Arx(ArxParams {
            lags: 1,
            ridge: 1.0,
            channels: vec![Channel::Cgm],
            action_conditional: false,
            horizon: 1,
            intercepts: vec![1.5],
            coefficients: vec![vec![0.25]],
        });
        save_model(&path, &spec).unwrap();
        assert_eq!(load_model(&path).unwrap(), spec);
        save_model(&path, &ModelSpec::Zoh).unwrap();
        assert_eq!(load_model(&path).unwrap(), ModelSpec::Zoh);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_model(&path), Err(Error::SchemaVersion(_))));
    }

    #[test]
    fn oracle_needs_context() {
        assert!(matches!(Oracle::exact().predict(&request(&[100.0], 1)), Err(Error::NoSimulatorContext)));
    }
}
