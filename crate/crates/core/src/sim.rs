//! Deterministic virtual-patient simulator, behaviour policy and the paired
//! factual/counterfactual episode generator.
//!
//! Physiology is a Bergman-style minimal model with a two-compartment
//! subcutaneous insulin chain and a two-compartment gut:
//!
//! ```text
//! dG/dt   = -p1 (G - Gb) - X G + 1000 Ra / (Vg w) + d
//! dX/dt   = -p2 X + p3 (Ip - Ib)
//! dS1/dt  = u / (Vi w) - ka S1
//! dS2/dt  = ka (S1 - S2)
//! dIp/dt  = ka S2 - ke Ip
//! dQ1/dt  = -Q1 / tau
//! dQ2/dt  = (Q1 - Q2) / tau,      Ra = Q2 / tau
//! ```
//!
//! with `u` in µU/min, boluses and carbohydrates entering `S1` and `Q1` as
//! impulses. `d` is an unannounced glucose flux (snacks, activity, sensor
//! drift folded together) drawn as an AR(1) process per grid step. `X` is
//! remote insulin action relative to basal and is signed: insulin below
//! basal raises glucose. Integration is classical RK4 with a
//! one-minute internal step.
//!
//! Grid convention: glucose at index `i` is read before the actions of index
//! `i` are applied, so an action at `i` first shows up in glucose at `i + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::risk::bgri_cost;
use crate::timeseries::{SequenceRecord, TimeGrid, DAY, DEFAULT_STEP, HOUR, MINUTE};

/// 2024-01-01 00:00:00 UTC; simulated days start at local midnight.
pub const SIM_EPOCH: i64 = 1_704_067_200;
pub const STEPS_PER_DAY: usize = (DAY / DEFAULT_STEP) as usize;
/// Output clamp for simulated glucose, mg/dL.
pub const G_MIN: f64 = 20.0;
pub const G_MAX: f64 = 600.0;
/// Episode length after onset (2 h on the 5-minute grid).
pub const EPISODE_STEPS: usize = 24;
/// Bolus scales of the action-selection menu, in units of the subject's mean bolus.
pub const ACTION_SCALES: [f64; 9] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

// ── Subjects ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSubject {
    pub subject_id: String,
    pub seed: u64,
    /// Glucose effectiveness, 1/min.
    pub p1: f64,
    /// Remote insulin decay, 1/min.
    pub p2: f64,
    /// Insulin action gain, 1/min² per µU/mL.
    pub p3: f64,
    /// Basal glucose, mg/dL.
    pub gb: f64,
    /// Basal plasma insulin, µU/mL (in equilibrium with `basal_rate`).
    pub ib: f64,
    /// Glucose distribution volume, dL/kg.
    pub vg: f64,
    /// Insulin distribution volume, mL/kg.
    pub vi: f64,
    /// Subcutaneous absorption rate, 1/min.
    pub ka: f64,
    /// Plasma insulin elimination rate, 1/min.
    pub ke: f64,
    /// Meal absorption time constant, min.
    pub tau_m: f64,
    /// Carb ratio used by the behaviour policy, g/U.
    pub cr: f64,
    /// Correction factor used by the behaviour policy, mg/dL per U.
    pub cf: f64,
    pub weight: f64,
    /// Scheduled basal rate, U/h.
    pub basal_rate: f64,
}

/// Sampling ranges of the subject parameters (uniform).
pub mod ranges {
    pub const P1: (f64, f64) = (0.006, 0.014);
    pub const P2: (f64, f64) = (0.012, 0.025);
    /// Insulin sensitivity p3 / p2.
    pub const SI: (f64, f64) = (4.0e-4, 8.0e-4);
    pub const GB: (f64, f64) = (105.0, 135.0);
    pub const VG: (f64, f64) = (1.4, 1.9);
    pub const VI: (f64, f64) = (100.0, 160.0);
    pub const KA: (f64, f64) = (0.014, 0.025);
    pub const KE: (f64, f64) = (0.10, 0.18);
    pub const TAU_M: (f64, f64) = (35.0, 55.0);
    pub const WEIGHT: (f64, f64) = (55.0, 95.0);
    pub const BASAL: (f64, f64) = (0.6, 1.4);
    /// Policy carb ratio relative to the area-balanced ratio.
    pub const CR_BIAS: (f64, f64) = (0.9, 1.25);
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Plasma insulin in equilibrium with a basal rate (U/h).
fn equilibrium_insulin(rate_u_per_h: f64, vi: f64, weight: f64, ke: f64) -> f64 {
    rate_u_per_h * 1e6 / 60.0 / (vi * weight * ke)
}

/// Draw one virtual subject. Identical seeds give identical subjects.
pub fn sample_subject(seed: u64) -> VirtualSubject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_u64);
    let p1 = uniform(&mut rng, ranges::P1);
    let p2 = uniform(&mut rng, ranges::P2);
    let si = uniform(&mut rng, ranges::SI);
    let gb = uniform(&mut rng, ranges::GB);
    let vg = uniform(&mut rng, ranges::VG);
    let vi = uniform(&mut rng, ranges::VI);
    let ka = uniform(&mut rng, ranges::KA);
    let ke = uniform(&mut rng, ranges::KE);
    let tau_m = uniform(&mut rng, ranges::TAU_M);
    let weight = uniform(&mut rng, ranges::WEIGHT);
    let basal_rate = uniform(&mut rng, ranges::BASAL);
    let cr_bias = uniform(&mut rng, ranges::CR_BIAS);

    // Carbs per unit that balance glucose areas in the linearized model.
    let insulin_area_per_unit = gb * si * 1e6 / (vi * weight * ke);
    let carb_area_per_gram = 1000.0 / (vg * weight);
    let cr = cr_bias * insulin_area_per_unit / carb_area_per_gram;
    // Mean drop over four hours per unit.
    let cf = insulin_area_per_unit / p1 / 240.0;

    VirtualSubject {
        subject_id: format!("vs{seed:05}"),
        seed,
        p1,
        p2,
        p3: si * p2,
        gb,
        ib: equilibrium_insulin(basal_rate, vi, weight, ke),
        vg,
        vi,
        ka,
        ke,
        tau_m,
        cr,
        cf,
        weight,
        basal_rate,
    }
}

/// `n` subjects with consecutive seeds starting at `first_seed`.
pub fn sample_cohort(n: usize, first_seed: u64) -> Vec<VirtualSubject> {
    (0..n as u64).map(|i| sample_subject(first_seed + i)).collect()
}

// ── Dynamics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub g: f64,
    pub x: f64,
    pub s1: f64,
    pub s2: f64,
    pub ip: f64,
    pub q1: f64,
    pub q2: f64,
}

impl SimState {
    /// Equilibrium under the subject's scheduled basal rate without meals.
    pub fn steady(s: &VirtualSubject) -> Self {
        let u = s.basal_rate * 1e6 / 60.0;
        SimState {
            g: s.gb,
            x: 0.0,
            s1: u / (s.vi * s.weight * s.ka),
            s2: u / (s.vi * s.weight * s.ka),
            ip: s.ib,
            q1: 0.0,
            q2: 0.0,
        }
    }

    /// Noiseless glucose as reported on the grid.
    #[inline]
    pub fn output(&self) -> f64 {
        self.g.clamp(G_MIN, G_MAX)
    }

    /// Sensor reading with additive noise.
    #[inline]
    pub fn reading(&self, noise: f64) -> f64 {
        (self.g + noise).clamp(G_MIN, G_MAX)
    }

    fn axpy(&self, h: f64, d: &SimState) -> SimState {
        SimState {
            g: self.g + h * d.g,
            x: self.x + h * d.x,
            s1: self.s1 + h * d.s1,
            s2: self.s2 + h * d.s2,
            ip: self.ip + h * d.ip,
            q1: self.q1 + h * d.q1,
            q2: self.q2 + h * d.q2,
        }
    }

    fn clamp_nonneg(&mut self) {
        self.g = self.g.max(0.0);
        self.s1 = self.s1.max(0.0);
        self.s2 = self.s2.max(0.0);
        self.ip = self.ip.max(0.0);
        self.q1 = self.q1.max(0.0);
        self.q2 = self.q2.max(0.0);
    }
}

/// Actions and exogenous inputs of one grid step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepInput {
    /// U/h
    pub basal: f64,
    /// U
    pub bolus: f64,
    /// g
    pub carbs: f64,
    /// mg/dL/min
    pub disturbance: f64,
}

fn derivative(s: &VirtualSubject, st: &SimState, u: f64, d: f64) -> SimState {
    let ra = st.q2 / s.tau_m;
    SimState {
        g: -s.p1 * (st.g - s.gb) - st.x * st.g + 1000.0 * ra / (s.vg * s.weight) + d,
        x: -s.p2 * st.x + s.p3 * (st.ip - s.ib),
        s1: u / (s.vi * s.weight) - s.ka * st.s1,
        s2: s.ka * (st.s1 - st.s2),
        ip: s.ka * st.s2 - s.ke * st.ip,
        q1: -st.q1 / s.tau_m,
        q2: (st.q1 - st.q2) / s.tau_m,
    }
}

/// Advance `dt_min` minutes (a whole number of one-minute RK4 steps) after
/// delivering the bolus and carbohydrates of `input`.
pub fn step(s: &VirtualSubject, state: &SimState, input: &StepInput, dt_min: u32) -> SimState {
    let mut st = *state;
    st.s1 += input.bolus * 1e6 / (s.vi * s.weight);
    st.q1 += input.carbs;
    let u = input.basal * 1e6 / 60.0;
    let d = input.disturbance;
    for _ in 0..dt_min {
        let k1 = derivative(s, &st, u, d);
        let k2 = derivative(s, &st.axpy(0.5, &k1), u, d);
        let k3 = derivative(s, &st.axpy(0.5, &k2), u, d);
        let k4 = derivative(s, &st.axpy(1.0, &k3), u, d);
        st = SimState {
            g: st.g + (k1.g + 2.0 * k2.g + 2.0 * k3.g + k4.g) / 6.0,
            x: st.x + (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x) / 6.0,
            s1: st.s1 + (k1.s1 + 2.0 * k2.s1 + 2.0 * k3.s1 + k4.s1) / 6.0,
            s2: st.s2 + (k1.s2 + 2.0 * k2.s2 + 2.0 * k3.s2 + k4.s2) / 6.0,
            ip: st.ip + (k1.ip + 2.0 * k2.ip + 2.0 * k3.ip + k4.ip) / 6.0,
            q1: st.q1 + (k1.q1 + 2.0 * k2.q1 + 2.0 * k3.q1 + k4.q1) / 6.0,
            q2: st.q2 + (k1.q2 + 2.0 * k2.q2 + 2.0 * k3.q2 + k4.q2) / 6.0,
        };
        st.clamp_nonneg();
    }
    st
}

/// Inputs outside the insulin plan, identical across counterfactual arms.
#[derive(Debug, Clone, Copy)]
pub struct Exogenous<'a> {
    pub carbs: &'a [f64],
    pub disturbance: &'a [f64],
    pub noise: &'a [f64],
}

const GRID_MINUTES: u32 = (DEFAULT_STEP / MINUTE) as u32;

/// Open-loop replay of an insulin plan from `start`.
///
/// Returns sensor readings at the `len` grid points beginning with `start`
/// itself; the action at position `k` is applied after reading `k`.
pub fn rollout(
    s: &VirtualSubject,
    start: &SimState,
    basal: &[f64],
    bolus: &[f64],
    exo: &Exogenous<'_>,
) -> Vec<f64> {
    let len = basal.len();
    debug_assert!(bolus.len() == len && exo.carbs.len() >= len && exo.disturbance.len() >= len && exo.noise.len() >= len);
    let mut st = *start;
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        out.push(st.reading(exo.noise[k]));
        if k + 1 < len {
            let input = StepInput { basal: basal[k], bolus: bolus[k], carbs: exo.carbs[k], disturbance: exo.disturbance[k] };
            st = step(s, &st, &input, GRID_MINUTES);
        }
    }
    out
}

// ── Behaviour policy ──────────────────────────────────────────────────

/// Target glucose for correction boluses, mg/dL.
pub const CORRECTION_TARGET: f64 = 120.0;

/// Basal–bolus therapy: scheduled basal, and at announced meals a bolus of
/// `carbs / CR + max(0, (G - 120) / CF)`.
pub fn behavior_policy(subject: &VirtualSubject, glucose: f64, announced_carbs: Option<f64>) -> (f64, f64) {
    let bolus = match announced_carbs {
        Some(c) if c > 0.0 => c / subject.cr + ((glucose - CORRECTION_TARGET) / subject.cf).max(0.0),
        _ => 0.0,
    };
    (subject.basal_rate, bolus)
}

// ── Standard trajectories ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub days: usize,
    /// Probability that a meal is smaller than announced.
    pub overestimate_prob: f64,
    /// Fraction of the announced carbs eaten when overestimated.
    pub overestimate_range: (f64, f64),
    /// Fraction eaten otherwise.
    pub normal_range: (f64, f64),
    /// Meal time jitter (± seconds).
    pub time_jitter: i64,
    /// Longest delay between the logged meal (and its bolus) and eating, seconds.
    pub max_meal_delay: i64,
    /// Stationary standard deviation of the CGM noise, mg/dL (0 = noiseless).
    pub sensor_noise_sd: f64,
    /// Per-step autocorrelation of the CGM noise.
    pub sensor_noise_phi: f64,
    /// Per-step autocorrelation of the glucose disturbance.
    pub disturbance_phi: f64,
    /// Innovation standard deviation of the disturbance, mg/dL/min.
    pub disturbance_sd: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            days: 15,
            overestimate_prob: 0.25,
            overestimate_range: (0.3, 0.7),
            normal_range: (0.9, 1.15),
            time_jitter: 45 * MINUTE,
            max_meal_delay: 45 * MINUTE,
            sensor_noise_sd: 1.0,
            sensor_noise_phi: 0.9,
            disturbance_phi: 0.95,
            disturbance_sd: 0.06,
        }
    }
}

/// Nominal (time of day, announced carbs, carbs jitter) of the daily meals.
const MEALS: [(i64, f64, f64); 3] = [
    (7 * HOUR + 30 * MINUTE, 50.0, 15.0),
    (12 * HOUR + 30 * MINUTE, 70.0, 20.0),
    (19 * HOUR, 80.0, 20.0),
];

/// A standard trajectory with the simulator state at every grid point.
#[derive(Debug, Clone)]
pub struct StandardTrajectory {
    pub subject: VirtualSubject,
    pub record: SequenceRecord,
    /// State at each grid index, before that index's actions.
    pub states: Vec<SimState>,
    /// Carbohydrates actually eaten per grid index. The record's meal
    /// channel holds the announced (logged) amounts.
    pub eaten: Vec<f64>,
    /// Glucose disturbance per grid index, mg/dL/min.
    pub disturbance: Vec<f64>,
    /// Sensor noise per grid index, mg/dL.
    pub noise: Vec<f64>,
}

impl StandardTrajectory {
    /// Mean of the nonzero boluses.
    pub fn avg_bolus(&self) -> f64 {
        let nz: Vec<f64> = self.record.bolus_standard.iter().copied().filter(|b| *b > 0.0).collect();
        if nz.is_empty() {
            0.0
        } else {
            nz.iter().sum::<f64>() / nz.len() as f64
        }
    }

    /// State after the actions of `origin`, i.e. the starting point of any
    /// forecast issued at `origin`.
    pub fn context_at(&self, origin: usize, horizon: usize) -> SimContext {
        let r = &self.record;
        let range = origin + 1..=origin + horizon;
        SimContext {
            subject: self.subject.clone(),
            state: self.states[origin + 1],
            carbs: self.eaten[range.clone()].to_vec(),
            disturbance: self.disturbance[range.clone()].to_vec(),
            noise: self.noise[range.clone()].to_vec(),
            factual_basal: r.basal[range.clone()].to_vec(),
            factual_bolus: range.map(|i| r.bolus_at(i)).collect(),
        }
    }
}

/// Simulate `cfg.days` days of basal–bolus therapy with three jittered meals per day.
pub fn generate_standard(subject: &VirtualSubject, cfg: &ScenarioConfig) -> StandardTrajectory {
    let n = cfg.days * STEPS_PER_DAY;
    let mut rng = ChaCha8Rng::seed_from_u64(subject.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x57a4);
    let mut announced = vec![0.0; n];
    let mut eaten = vec![0.0; n];
    for day in 0..cfg.days {
        for (tod, mean, jitter) in MEALS {
            let dt = rng.random_range(-cfg.time_jitter..=cfg.time_jitter);
            let idx = (day as i64 * DAY + tod + dt) / DEFAULT_STEP;
            let carbs = (mean + jitter * (2.0 * rng.random::<f64>() - 1.0)).round();
            let frac = if rng.random::<f64>() < cfg.overestimate_prob {
                uniform(&mut rng, cfg.overestimate_range)
            } else {
                uniform(&mut rng, cfg.normal_range)
            };
            let delay = (rng.random_range(0..=cfg.max_meal_delay.max(0)) / DEFAULT_STEP) as usize;
            if let Ok(i) = usize::try_from(idx) {
                if i < n {
                    announced[i] += carbs;
                }
                if i + delay < n {
                    eaten[i + delay] += (carbs * frac).round();
                }
            }
        }
    }

    let grid = TimeGrid { start: SIM_EPOCH, step: DEFAULT_STEP, n_steps: n };
    let mut record = SequenceRecord::from_cgm(subject.subject_id.clone(), 0, grid, vec![0.0; n]);
    record.weight = Some(vec![subject.weight; n]);
    let mut states = Vec::with_capacity(n);
    let mut st = SimState::steady(subject);
    let mut disturbance = vec![0.0; n];
    if cfg.disturbance_sd > 0.0 {
        let innov = Normal::new(0.0, cfg.disturbance_sd).expect("finite sd");
        let mut d = 0.0;
        for v in disturbance.iter_mut() {
            d = cfg.disturbance_phi * d + innov.sample(&mut rng);
            *v = d;
        }
    }
    let mut noise = vec![0.0; n];
    if cfg.sensor_noise_sd > 0.0 {
        let phi = cfg.sensor_noise_phi;
        let innov = Normal::new(0.0, cfg.sensor_noise_sd * (1.0 - phi * phi).sqrt()).expect("finite sd");
        let mut e = cfg.sensor_noise_sd * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        for v in noise.iter_mut() {
            *v = e;
            e = phi * e + innov.sample(&mut rng);
        }
    }
    for i in 0..n {
        let reading = st.reading(noise[i]);
        record.cgm[i] = reading;
        let ann = (announced[i] > 0.0).then_some(announced[i]);
        let (basal, bolus) = behavior_policy(subject, reading, ann);
        record.basal[i] = basal;
        record.bolus_standard[i] = bolus;
        record.meal[i] = announced[i];
        states.push(st);
        let input = StepInput { basal, bolus, carbs: eaten[i], disturbance: disturbance[i] };
        st = step(subject, &st, &input, GRID_MINUTES);
    }
    states.push(st);
    StandardTrajectory { subject: subject.clone(), record, states, eaten, disturbance, noise }
}

/// Everything the simulator needs to replay the future from a forecast origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimContext {
    pub subject: VirtualSubject,
    /// State at `origin + 1` before its actions.
    pub state: SimState,
    /// Carbohydrates at `origin + 1 ..= origin + L` (held fixed across plans).
    pub carbs: Vec<f64>,
    /// Disturbance over the same steps (held fixed across plans).
    pub disturbance: Vec<f64>,
    /// Sensor noise over the same steps.
    pub noise: Vec<f64>,
    pub factual_basal: Vec<f64>,
    pub factual_bolus: Vec<f64>,
}

impl SimContext {
    pub fn horizon(&self) -> usize {
        self.carbs.len()
    }

    /// Simulated glucose at `origin + 1 ..= origin + L` under the plan.
    pub fn simulate(&self, basal: &[f64], bolus: &[f64]) -> Vec<f64> {
        let exo = Exogenous { carbs: &self.carbs, disturbance: &self.disturbance, noise: &self.noise };
        rollout(&self.subject, &self.state, basal, bolus, &exo)
    }

    pub fn simulate_factual(&self) -> Vec<f64> {
        self.simulate(&self.factual_basal, &self.factual_bolus)
    }
}

// ── Perturbations ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Basal,
    Bolus,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Basal => "basal",
            Family::Bolus => "bolus",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "basal" => Ok(Family::Basal),
            "bolus" => Ok(Family::Bolus),
            other => Err(crate::Error::InvalidInput(format!("unknown perturbation family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Multiply the basal rate over the whole episode.
    BasalScale { multiplier: f64 },
    /// Multiply the target bolus (0 removes it).
    BolusScale { factor: f64 },
    /// Move the target bolus by a number of minutes.
    BolusShift { minutes: i64 },
    /// Extra bolus of the subject's mean size at the first step of the episode.
    BolusAdd,
}

impl Perturbation {
    pub fn family(&self) -> Family {
        match self {
            Perturbation::BasalScale { .. } => Family::Basal,
            _ => Family::Bolus,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Perturbation::BasalScale { multiplier } => format!("basal_x{multiplier}"),
            Perturbation::BolusScale { factor } if factor == 0.0 => "bolus_remove".into(),
            Perturbation::BolusScale { factor } => format!("bolus_x{factor}"),
            Perturbation::BolusShift { minutes } if minutes < 0 => format!("bolus_advance_{}min", -minutes),
            Perturbation::BolusShift { minutes } => format!("bolus_delay_{minutes}min"),
            Perturbation::BolusAdd => "bolus_add_mean".into(),
        }
    }

    /// Numeric parameter (multiplier, factor, minutes, or 1 for an added bolus).
    pub fn parameter(&self) -> f64 {
        match *self {
            Perturbation::BasalScale { multiplier } => multiplier,
            Perturbation::BolusScale { factor } => factor,
            Perturbation::BolusShift { minutes } => minutes as f64,
            Perturbation::BolusAdd => 1.0,
        }
    }

    /// Modified plan over the episode, or `None` when the scenario is invalid
    /// (no target bolus, or a shift that leaves the episode).
    pub fn apply(&self, basal: &[f64], bolus: &[f64], mean_bolus: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut basal = basal.to_vec();
        let mut bolus = bolus.to_vec();
        if let Perturbation::BasalScale { multiplier } = *self {
            basal.iter_mut().for_each(|b| *b *= multiplier);
            return Some((basal, bolus));
        }
        let target = bolus.iter().position(|b| *b > 0.0)?;
        match *self {
            Perturbation::BolusScale { factor } => bolus[target] *= factor,
            Perturbation::BolusShift { minutes } => {
                let shift = minutes / (DEFAULT_STEP / MINUTE);
                let dest = usize::try_from(target as i64 + shift).ok().filter(|d| *d < bolus.len())?;
                let amount = std::mem::take(&mut bolus[target]);
                bolus[dest] += amount;
            }
            Perturbation::BolusAdd => bolus[0] += mean_bolus,
            Perturbation::BasalScale { .. } => unreachable!(),
        }
        Some((basal, bolus))
    }
}

pub fn basal_menu() -> Vec<Perturbation> {
    [0.0, 0.5, 1.5, 2.0].into_iter().map(|multiplier| Perturbation::BasalScale { multiplier }).collect()
}

pub fn bolus_menu() -> Vec<Perturbation> {
    vec![
        Perturbation::BolusScale { factor: 0.0 },
        Perturbation::BolusScale { factor: 0.5 },
        Perturbation::BolusScale { factor: 2.0 },
        Perturbation::BolusShift { minutes: -30 },
        Perturbation::BolusShift { minutes: 30 },
        Perturbation::BolusAdd,
    ]
}

pub fn menu_for(families: &[Family]) -> Vec<Perturbation> {
    let mut out = Vec::new();
    for f in families {
        match f {
            Family::Basal => out.extend(basal_menu()),
            Family::Bolus => out.extend(bolus_menu()),
        }
    }
    out
}

// ── Episodes ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub onsets: usize,
    /// Minimum spacing between onsets, seconds.
    pub min_spacing: i64,
    /// Zero-based day from which onsets are drawn.
    pub onset_day: usize,
    pub horizon: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { onsets: 4, min_spacing: 3 * HOUR, onset_day: 14, horizon: EPISODE_STEPS }
    }
}

/// The future channels of one arm over the episode (meals as logged).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub cgm: Vec<f64>,
    pub basal: Vec<f64>,
    pub bolus: Vec<f64>,
    pub meal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePair {
    pub subject_id: String,
    pub episode: usize,
    /// Grid index of the forecast origin in the standard record.
    pub origin: usize,
    pub onset_time: i64,
    pub perturbation: Perturbation,
    pub valid: bool,
    pub factual: Rollout,
    /// Equal to `factual` for invalid scenarios.
    pub counterfactual: Rollout,
    pub context: SimContext,
}

impl EpisodePair {
    /// Full record of one arm: `history_len` shared steps up to the origin
    /// followed by the arm's episode.
    pub fn arm_record(&self, standard: &SequenceRecord, counterfactual: bool, history_len: usize) -> SequenceRecord {
        let from = self.origin + 1 - history_len;
        let mut rec = standard.slice(from, self.origin + 1);
        let arm = if counterfactual { &self.counterfactual } else { &self.factual };
        let n = arm.cgm.len();
        rec.grid.n_steps += n;
        rec.cgm.extend_from_slice(&arm.cgm);
        rec.basal.extend_from_slice(&arm.basal);
        rec.bolus_standard.extend_from_slice(&arm.bolus);
        rec.bolus_extended.extend(std::iter::repeat_n(0.0, n));
        rec.meal.extend_from_slice(&arm.meal);
        if let Some(w) = rec.weight.as_mut() {
            let last = *w.last().unwrap_or(&0.0);
            w.extend(std::iter::repeat_n(last, n));
        }
        rec
    }
}

/// Seeded onset origins on `cfg.onset_day`, pairwise at least `min_spacing` apart.
pub fn sample_onsets(traj: &StandardTrajectory, cfg: &EpisodeConfig) -> Vec<usize> {
    let n = traj.record.len();
    let lo = cfg.onset_day * STEPS_PER_DAY;
    let hi = ((cfg.onset_day + 1) * STEPS_PER_DAY).min(n.saturating_sub(cfg.horizon + 1));
    if hi <= lo || cfg.onsets == 0 {
        return Vec::new();
    }
    let spacing = (cfg.min_spacing / DEFAULT_STEP) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(traj.subject.seed.wrapping_add(0x0e5e7));
    for _ in 0..10_000 {
        let mut o: Vec<usize> = (0..cfg.onsets).map(|_| rng.random_range(lo..hi)).collect();
        o.sort_unstable();
        if o.windows(2).all(|w| w[1] - w[0] >= spacing) {
            return o;
        }
    }
    // evenly spaced fallback when the constraint is too tight to sample
    let gap = (hi - lo) / cfg.onsets;
    (0..cfg.onsets).map(|k| lo + k * gap).collect()
}

/// Paired factual/counterfactual episodes for every onset and menu entry.
pub fn generate_paired_episodes(
    traj: &StandardTrajectory,
    menu: &[Perturbation],
    cfg: &EpisodeConfig,
) -> Vec<EpisodePair> {
    let mean_bolus = traj.avg_bolus();
    let mut out = Vec::with_capacity(menu.len() * cfg.onsets);
    for (episode, origin) in sample_onsets(traj, cfg).into_iter().enumerate() {
        let ctx = traj.context_at(origin, cfg.horizon);
        let logged_meal = traj.record.meal[origin + 1..=origin + cfg.horizon].to_vec();
        let factual = Rollout {
            cgm: ctx.simulate_factual(),
            basal: ctx.factual_basal.clone(),
            bolus: ctx.factual_bolus.clone(),
            meal: logged_meal.clone(),
        };
        for p in menu {
            let (valid, counterfactual) = match p.apply(&ctx.factual_basal, &ctx.factual_bolus, mean_bolus) {
                Some((basal, bolus)) => (
                    true,
                    Rollout { cgm: ctx.simulate(&basal, &bolus), basal, bolus, meal: logged_meal.clone() },
                ),
                None => (false, factual.clone()),
            };
            out.push(EpisodePair {
                subject_id: traj.subject.subject_id.clone(),
                episode,
                origin,
                onset_time: traj.record.grid.time(origin),
                perturbation: *p,
                valid,
                factual: factual.clone(),
                counterfactual,
                context: ctx.clone(),
            });
        }
    }
    out
}

/// Simulated outcomes of the bolus action menu for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMenuRollouts {
    pub subject_id: String,
    pub episode: usize,
    pub origin: usize,
    /// Menu entries are extra insulin on top of the factual plan, so the
    /// factual action is always 0.
    pub factual_action: f64,
    pub actions: Vec<f64>,
    pub trajectories: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub context: SimContext,
}

impl ActionMenuRollouts {
    /// Bolus plan when candidate `a` is added at the first episode step.
    pub fn plan(ctx: &SimContext, a: f64) -> (Vec<f64>, Vec<f64>) {
        let mut bolus = ctx.factual_bolus.clone();
        if let Some(b) = bolus.first_mut() {
            *b += a;
        }
        (ctx.factual_basal.clone(), bolus)
    }
}

/// Nine candidate extra boluses `{0, 0.25, …, 2} × avg_bolus` at the start of
/// the episode, each rolled out and scored with the risk cost.
pub fn generate_action_rollouts(pair: &EpisodePair, avg_bolus: f64) -> ActionMenuRollouts {
    let ctx = &pair.context;
    let actions: Vec<f64> = ACTION_SCALES.iter().map(|s| s * avg_bolus).collect();
    let trajectories: Vec<Vec<f64>> = actions
        .iter()
        .map(|a| {
            let (basal, bolus) = ActionMenuRollouts::plan(ctx, *a);
            ctx.simulate(&basal, &bolus)
        })
        .collect();
    let costs = trajectories.iter().map(|t| bgri_cost(t).expect("non-empty episode")).collect();
    ActionMenuRollouts {
        subject_id: pair.subject_id.clone(),
        episode: pair.episode,
        origin: pair.origin,
        factual_action: 0.0,
        actions,
        trajectories,
        costs,
        context: ctx.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> VirtualSubject {
        sample_subject(1)
    }

    #[test]
    fn subjects_are_deterministic_and_distinct() {
        assert_eq!(sample_subject(42), sample_subject(42));
        let cohort = sample_cohort(100, 0);
        for i in 0..cohort.len() {
            for j in i + 1..cohort.len() {
                assert_ne!(cohort[i], cohort[j]);
            }
        }
    }

    #[test]
    fn steady_state_holds_for_a_day() {
        let s = reference();
        let st0 = SimState::steady(&s);
        let mut st = st0;
        for _ in 0..STEPS_PER_DAY {
            st = step(&s, &st, &StepInput { basal: s.basal_rate, ..Default::default() }, 5);
        }
        assert!((st.g - st0.g).abs() < 1e-6);
        assert!(st.x.abs() < 1e-6);
        assert!((st.ip - st0.ip).abs() < 1e-6);
        assert!((st.s1 - st0.s1).abs() < 1e-6);
        assert!((st.s2 - st0.s2).abs() < 1e-6);
    }

    fn single_event(bolus: f64, carbs: f64) -> Vec<f64> {
        let s = reference();
        let basal = StepInput { basal: s.basal_rate, ..Default::default() };
        let mut st = step(&s, &SimState::steady(&s), &StepInput { bolus, carbs, ..basal }, 5);
        let mut g = vec![st.g];
        for _ in 0..200 {
            st = step(&s, &st, &basal, 5);
            g.push(st.g);
        }
        g
    }

    #[test]
    fn bolus_dips_then_recovers() {
        let s = reference();
        let g = single_event(2.0, 0.0);
        let (imin, gmin) = g.iter().copied().enumerate().fold((0, f64::MAX), |a, (i, v)| if v < a.1 { (i, v) } else { a });
        assert!(gmin < s.gb - 5.0);
        assert!(g[..=imin].windows(2).all(|w| w[1] <= w[0]));
        assert!(g[imin..].windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!((g.last().unwrap() - s.gb).abs() < 0.05 * (s.gb - gmin));
    }

    #[test]
    fn meal_rises_then_returns() {
        let s = reference();
        let g = single_event(0.0, 50.0);
        let (imax, gmax) = g.iter().copied().enumerate().fold((0, f64::MIN), |a, (i, v)| if v > a.1 { (i, v) } else { a });
        assert!(gmax > s.gb + 20.0);
        assert!(g[..=imax].windows(2).all(|w| w[1] >= w[0]));
        assert!((g.last().unwrap() - s.gb).abs() < 0.1 * (gmax - s.gb));
    }

    #[test]
    fn policy_formula() {
        let mut s = reference();
        s.cr = 10.0;
        s.cf = 30.0;
        assert_eq!(behavior_policy(&s, 120.0, Some(60.0)).1, 6.0);
        assert_eq!(behavior_policy(&s, 180.0, Some(60.0)).1, 8.0);
        assert_eq!(behavior_policy(&s, 300.0, None).1, 0.0);
        assert_eq!(behavior_policy(&s, 80.0, Some(60.0)).1, 6.0);
    }

    #[test]
    fn standard_trajectory_shape() {
        let s = reference();
        let a = generate_standard(&s, &ScenarioConfig::default());
        assert_eq!(a.record.len(), 15 * 288);
        a.record.validate().unwrap();
        let b = generate_standard(&s, &ScenarioConfig::default());
        assert_eq!(a.record, b.record);
        let inside = a.record.cgm.iter().filter(|g| **g > 40.0 && **g < 400.0).count();
        assert!(inside as f64 >= 0.95 * a.record.len() as f64);
        // boluses only at announced meals
        for i in 0..a.record.len() {
            if a.record.bolus_at(i) > 0.0 {
                assert!(a.record.meal[i] > 0.0);
            }
        }
    }

    #[test]
    fn factual_replay_matches_standard_trajectory() {
        let traj = generate_standard(&reference(), &ScenarioConfig::default());
        for origin in [500, 2000, 4000] {
            let ctx = traj.context_at(origin, 24);
            assert_eq!(ctx.simulate_factual(), traj.record.cgm[origin + 1..=origin + 24].to_vec());
        }
    }

    #[test]
    fn perturbation_validity() {
        let basal = vec![1.0; 24];
        let mut bolus = vec![0.0; 24];
        assert!(Perturbation::BolusScale { factor: 2.0 }.apply(&basal, &bolus, 3.0).is_none());
        assert!(Perturbation::BolusAdd.apply(&basal, &bolus, 3.0).is_none());
        let (b, _) = Perturbation::BasalScale { multiplier: 0.5 }.apply(&basal, &bolus, 3.0).unwrap();
        assert!(b.iter().all(|v| *v == 0.5));

        // bolus 100 min into the episode: index 19 (minutes are (index + 1) * 5)
        bolus[19] = 4.0;
        assert!(Perturbation::BolusShift { minutes: 30 }.apply(&basal, &bolus, 3.0).is_none());
        let (_, adv) = Perturbation::BolusShift { minutes: -30 }.apply(&basal, &bolus, 3.0).unwrap();
        assert_eq!((adv[13], adv[19]), (4.0, 0.0));
        let (_, add) = Perturbation::BolusAdd.apply(&basal, &bolus, 3.0).unwrap();
        assert_eq!((add[0], add[19]), (3.0, 4.0));

        let mut early = vec![0.0; 24];
        early[6] = 2.0;
        assert!(Perturbation::BolusShift { minutes: -30 }.apply(&basal, &early, 3.0).is_some());
        early[6] = 0.0;
        early[5] = 2.0;
        assert!(Perturbation::BolusShift { minutes: -30 }.apply(&basal, &early, 3.0).is_none());
        let mut late = vec![0.0; 24];
        late[17] = 2.0;
        assert!(Perturbation::BolusShift { minutes: 30 }.apply(&basal, &late, 3.0).is_some());
    }

    #[test]
    fn episodes_and_pairing() {
        let traj = generate_standard(&reference(), &ScenarioConfig::default());
        let cfg = EpisodeConfig::default();
        let onsets = sample_onsets(&traj, &cfg);
        assert_eq!(onsets.len(), 4);
        assert!(onsets.windows(2).all(|w| w[1] - w[0] >= 36));
        assert!(onsets.iter().all(|o| *o >= 14 * 288 && o + 24 < traj.record.len()));

        let pairs = generate_paired_episodes(&traj, &basal_menu(), &cfg);
        assert_eq!(pairs.len(), 16);
        assert!(pairs.iter().all(|p| p.valid));
        for p in &pairs {
            let f = p.arm_record(&traj.record, false, 288);
            let c = p.arm_record(&traj.record, true, 288);
            assert_eq!(f.len(), 312);
            assert_eq!(&f.cgm[..288], &c.cgm[..288]);
            assert_eq!(&f.bolus_standard[..288], &c.bolus_standard[..288]);
            assert_eq!(f.meal, c.meal);
        }
    }

    #[test]
    fn basal_sign_sanity() {
        let traj = generate_standard(&reference(), &ScenarioConfig::default());
        for p in generate_paired_episodes(&traj, &basal_menu(), &EpisodeConfig::default()) {
            let delta = p.counterfactual.cgm[23] - p.factual.cgm[23];
            match p.perturbation {
                Perturbation::BasalScale { multiplier } if multiplier < 1.0 => assert!(delta >= 0.0),
                _ => assert!(delta <= 0.0),
            }
        }
    }

    #[test]
    fn action_menu_is_monotone_in_insulin() {
        let traj = generate_standard(&reference(), &ScenarioConfig::default());
        let pairs = generate_paired_episodes(&traj, &basal_menu()[..1], &EpisodeConfig::default());
        for p in &pairs {
            let m = generate_action_rollouts(p, traj.avg_bolus());
            assert_eq!(m.actions.len(), 9);
            assert_eq!(m.trajectories[0], p.factual.cgm);
            for w in m.trajectories.windows(2) {
                assert!(w[1].iter().zip(&w[0]).all(|(hi, lo)| *hi <= *lo));
            }
        }
    }
}
