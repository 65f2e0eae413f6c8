//! `glucobench` command line: data preparation, model fitting and the four
//! evaluation arms, each stage reading and writing plain files.
//!
//! Every subcommand accepts `--config <toml>` (the run configuration schema)
//! and `--set key=value`; explicit flags take precedence over both.
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use glucobench::bench::{evaluate_effects, evaluate_forecasts, evaluate_gating, evaluate_policy, gating_rows, index_trajectories};
use glucobench::counterfactual::{aggregate_by_subject, aggregate_selection};
use glucobench::forecast::{fit_arx, load_model, save_model, select_ridge, ArxConfig, ForecastRequest, ModelSpec};
use glucobench::harmonize::run_pipeline;
use glucobench::io::{format_time, read_harmonized, read_json, read_raw_events, write_csv, write_harmonized, write_json};
use glucobench::report::{
    effect_reports, emit_report, forecast_reports, gating_reports, run_benchmark, selection_reports, simulate_cohort, MetricReport,
    ReportSummary, RunConfig,
};
use glucobench::sim::{
    generate_action_rollouts, generate_paired_episodes, generate_standard, menu_for, Family, ScenarioConfig, StandardTrajectory,
    VirtualSubject,
};
use glucobench::timeseries::{extract_windows, SequenceRecord, Slice, DEFAULT_STEP, MINUTE};

// ── Arguments ─────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "glucobench", version, about = "Task-aware evaluation of glucose forecasters")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set episodes.onsets=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Harmonized cohort CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory written by `simulate`; provides the cohort and oracle contexts.
    #[arg(long)]
    sim: Option<PathBuf>,
    /// Cohort label used in reports (defaults to the input file stem).
    #[arg(long)]
    cohort: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw per-channel event CSVs into the harmonized grid schema.
    Harmonize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Simulate a virtual cohort under the behaviour policy.
    Simulate {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build paired factual/counterfactual episodes from a simulated cohort.
    MakeEpisodes {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Roll out the bolus action menu for every episode.
    MakeActionMenu {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a forecaster and write its model file.
    Fit {
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Training cohort (harmonized CSV).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation cohort for ridge selection.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        lags: Option<usize>,
        /// Fixed ridge weight (skips selection).
        #[arg(long)]
        ridge: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write point forecasts for every window of a cohort.
    Predict {
        #[arg(long)]
        model_file: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// RMSE and error-grid safety per slice and lead.
    EvalForecast {
        #[arg(long)]
        model_file: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Leads in minutes.
        #[arg(long, value_delimiter = ',')]
        leads: Vec<i64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Hypoglycemia alarm recall, false alarms per day and lead time.
    EvalGating {
        #[arg(long)]
        model_file: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Prediction horizon in minutes.
        #[arg(long)]
        ph: Option<i64>,
        /// Alarm threshold, mg/dL.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        slices: Vec<Slice>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Intervention-effect accuracy on paired episodes.
    EvalCounterfactual {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        sim: PathBuf,
        #[arg(long, value_delimiter = ',')]
        leads: Vec<i64>,
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
        #[arg(long)]
        cohort: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Regret of model-chosen bolus actions.
    EvalPolicyRegret {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        cohort: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full benchmark, or merge summaries written by the eval commands.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Summary files to merge instead of running the benchmark.
        #[arg(long = "from", value_delimiter = ',')]
        from: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelKind {
    Zoh,
    Arx,
    ArxAc,
    Oracle,
    NegatedOracle,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

// ── Errors ────────────────────────────────────────────────────────────

enum Failure {
    Usage(String),
    Data(glucobench::Error),
}

impl From<glucobench::Error> for Failure {
    fn from(e: glucobench::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

// ── Configuration ─────────────────────────────────────────────────────

/// Flag values are applied as overrides on top of the config file.
#[derive(Default)]
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn value(&mut self, key: &str, v: Option<impl Display>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
        self
    }

    fn list<T: Display>(&mut self, key: &str, items: &[T], quote: bool) -> &mut Self {
        if !items.is_empty() {
            let body: Vec<String> = items.iter().map(|i| if quote { format!("\"{i}\"") } else { i.to_string() }).collect();
            self.0.push((key.into(), format!("[{}]", body.join(", "))));
        }
        self
    }
}

fn load_config(args: &ConfigArgs, flags: &Overrides) -> CliResult<RunConfig> {
    let mut all = args.set.clone();
    all.extend(flags.0.iter().cloned());
    RunConfig::load(args.config.as_deref(), &all).map_err(|e| usage(format!("configuration: {e}")))
}

// ── Simulated cohorts on disk ─────────────────────────────────────────

const SIM_SCHEMA_VERSION: u32 = 1;
const SIM_MANIFEST: &str = "simulation.json";
const SIM_COHORT: &str = "cohort.csv";

/// Subjects and scenario of a simulated cohort; trajectories are
/// regenerated from these deterministically.
#[derive(Debug, Serialize, Deserialize)]
struct SimulationManifest {
    schema_version: u32,
    scenario: ScenarioConfig,
    subjects: Vec<VirtualSubject>,
}

fn load_simulation(dir: &Path) -> CliResult<Vec<StandardTrajectory>> {
    let m: SimulationManifest = read_json(dir.join(SIM_MANIFEST))?;
    if m.schema_version != SIM_SCHEMA_VERSION {
        return Err(glucobench::Error::SchemaVersion(format!("simulation manifest version {}", m.schema_version)).into());
    }
    Ok(m.subjects.iter().map(|s| generate_standard(s, &m.scenario)).collect())
}

struct Loaded {
    cohort: String,
    records: Vec<SequenceRecord>,
    trajectories: Vec<StandardTrajectory>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cohort".into())
}

fn load_inputs(inputs: &Inputs) -> CliResult<Loaded> {
    let trajectories = match &inputs.sim {
        Some(dir) => load_simulation(dir)?,
        None => Vec::new(),
    };
    let records = match (&inputs.data, &inputs.sim) {
        (Some(p), _) => read_records(p)?,
        (None, Some(_)) => trajectories.iter().map(|t| t.record.clone()).collect(),
        (None, None) => return Err(usage("one of --data or --sim is required")),
    };
    let cohort = inputs.cohort.clone().unwrap_or_else(|| match (&inputs.data, &inputs.sim) {
        (Some(p), _) => stem(p),
        (None, Some(d)) => stem(d),
        _ => unreachable!(),
    });
    Ok(Loaded { cohort, records, trajectories })
}

fn read_records(path: &Path) -> CliResult<Vec<SequenceRecord>> {
    let records = read_harmonized(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

fn make_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn patients(records: &[SequenceRecord]) -> Vec<String> {
    records.iter().map(|r| r.pat_id.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect()
}

fn write_summary(out: &Path, reports: &[MetricReport]) -> CliResult<()> {
    let files = emit_report(out, reports)?;
    log::info!("wrote {}", files.summary.display());
    Ok(())
}

// ── Subcommands ───────────────────────────────────────────────────────

fn cmd_harmonize(input: &Path, out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let run = load_config(cfg, &Overrides::default())?;
    let events = read_raw_events(input)?;
    let (records, diag) = run_pipeline(&events, &run.harmonize);
    make_dir(out)?;
    write_harmonized(out.join("harmonized.csv"), &records)?;
    write_json(out.join("diagnostics.json"), &diag)?;
    log::info!("{} records from {} subjects", records.len(), patients(&records).len());
    Ok(())
}

fn cmd_simulate(subjects: Option<usize>, days: Option<usize>, seed: Option<u64>, out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.value("simulation.subjects", subjects).value("simulation.scenario.days", days).value("seed", seed);
    let run = load_config(cfg, &o)?;
    if run.simulation.subjects == 0 || run.simulation.scenario.days == 0 {
        return Err(usage("--subjects and --days must be positive"));
    }
    let trajectories = simulate_cohort(&run);
    make_dir(out)?;
    let records: Vec<SequenceRecord> = trajectories.iter().map(|t| t.record.clone()).collect();
    write_harmonized(out.join(SIM_COHORT), &records)?;
    let manifest = SimulationManifest {
        schema_version: SIM_SCHEMA_VERSION,
        scenario: run.simulation.scenario,
        subjects: trajectories.iter().map(|t| t.subject.clone()).collect(),
    };
    write_json(out.join(SIM_MANIFEST), &manifest)?;
    Ok(())
}

#[derive(Serialize)]
struct EpisodeManifestRow {
    subject_id: String,
    episode: usize,
    onset_time: String,
    family: Family,
    perturbation: String,
    parameter: f64,
    valid: bool,
    factual_seq_id: u64,
    counterfactual_seq_id: Option<u64>,
}

fn cmd_make_episodes(sim: &Path, families: &[Family], out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.list("families", families, true);
    let run = load_config(cfg, &o)?;
    let menu = menu_for(&run.families);
    let mut arms = Vec::new();
    let mut rows = Vec::new();
    for traj in load_simulation(sim)? {
        for (k, pair) in generate_paired_episodes(&traj, &menu, &run.episodes).iter().enumerate() {
            // one factual arm per episode, one counterfactual arm per valid entry
            let factual_seq_id = pair.episode as u64 * 100;
            if k % menu.len() == 0 {
                let mut rec = pair.arm_record(&traj.record, false, run.history_len);
                rec.seq_id = factual_seq_id;
                arms.push(rec);
            }
            let counterfactual_seq_id = pair.valid.then(|| factual_seq_id + (k % menu.len()) as u64 + 1);
            if let Some(id) = counterfactual_seq_id {
                let mut rec = pair.arm_record(&traj.record, true, run.history_len);
                rec.seq_id = id;
                arms.push(rec);
            }
            rows.push(EpisodeManifestRow {
                subject_id: pair.subject_id.clone(),
                episode: pair.episode,
                onset_time: format_time(pair.onset_time),
                family: pair.perturbation.family(),
                perturbation: pair.perturbation.label(),
                parameter: pair.perturbation.parameter(),
                valid: pair.valid,
                factual_seq_id,
                counterfactual_seq_id,
            });
        }
    }
    make_dir(out)?;
    write_harmonized(out.join("episodes.csv"), &arms)?;
    write_csv(out.join("episode_manifest.csv"), &rows)?;
    Ok(())
}

/// A single-entry menu: one pair per episode fixes the origin and context.
fn one_per_episode() -> Vec<glucobench::sim::Perturbation> {
    menu_for(&[Family::Basal])[..1].to_vec()
}

#[derive(Serialize)]
struct ActionRow {
    subject_id: String,
    episode: usize,
    onset_time: String,
    action_index: usize,
    action: f64,
    is_factual: bool,
    cost: f64,
}

#[derive(Serialize)]
struct ActionTrajectoryRow {
    subject_id: String,
    episode: usize,
    action_index: usize,
    lead_min: i64,
    glucose: f64,
}

fn cmd_make_action_menu(sim: &Path, out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let run = load_config(cfg, &Overrides::default())?;
    let mut costs = Vec::new();
    let mut trajectories = Vec::new();
    let step_min = DEFAULT_STEP / MINUTE;
    for traj in load_simulation(sim)? {
        let avg = traj.avg_bolus();
        for pair in generate_paired_episodes(&traj, &one_per_episode(), &run.episodes) {
            let menu = generate_action_rollouts(&pair, avg);
            for (i, (&a, &c)) in menu.actions.iter().zip(&menu.costs).enumerate() {
                costs.push(ActionRow {
                    subject_id: menu.subject_id.clone(),
                    episode: menu.episode,
                    onset_time: format_time(pair.onset_time),
                    action_index: i,
                    action: a,
                    is_factual: a == menu.factual_action,
                    cost: c,
                });
                for (k, &g) in menu.trajectories[i].iter().enumerate() {
                    trajectories.push(ActionTrajectoryRow {
                        subject_id: menu.subject_id.clone(),
                        episode: menu.episode,
                        action_index: i,
                        lead_min: (k as i64 + 1) * step_min,
                        glucose: g,
                    });
                }
            }
        }
    }
    make_dir(out)?;
    write_csv(out.join("action_menu.csv"), &costs)?;
    write_csv(out.join("action_trajectories.csv"), &trajectories)?;
    Ok(())
}

fn windows<'a>(records: &'a [SequenceRecord], run: &RunConfig) -> Vec<glucobench::timeseries::ForecastSample<'a>> {
    records.iter().flat_map(|r| extract_windows(r, run.history_len, run.horizon_len, run.stride, &run.slice_config)).collect()
}

fn cmd_fit(
    model: ModelKind,
    data: Option<&Path>,
    valid: Option<&Path>,
    lags: Option<usize>,
    ridge: Option<f64>,
    out: &Path,
    cfg: &ConfigArgs,
) -> CliResult<()> {
    let mut o = Overrides::default();
    o.value("arx.lags", lags).value("arx.ridge", ridge);
    let run = load_config(cfg, &o)?;
    let spec = match model {
        ModelKind::Zoh => ModelSpec::Zoh,
        ModelKind::Oracle => ModelSpec::Oracle { negated: false },
        ModelKind::NegatedOracle => ModelSpec::Oracle { negated: true },
        ModelKind::Arx | ModelKind::ArxAc => {
            let data = data.ok_or_else(|| usage("--data is required for ARX"))?;
            let train = read_records(data)?;
            let arx = ArxConfig { action_conditional: model == ModelKind::ArxAc, ..run.arx.clone() };
            let tr = windows(&train, &run);
            let params = match valid {
                Some(v) if ridge.is_none() && !run.ridge_grid.is_empty() => {
                    let valid = read_records(v)?;
                    let lead = ((run.ph_min * MINUTE) / DEFAULT_STEP).clamp(1, run.horizon_len as i64) as usize;
                    select_ridge(&tr, &windows(&valid, &run), &run.ridge_grid, lead, &arx)?
                }
                _ => fit_arx(&tr, &arx)?,
            };
            log::info!("fitted on {} windows, ridge {}", tr.len(), params.ridge);
            ModelSpec::Arx(params)
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    save_model(out, &spec)?;
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    pat_id: String,
    seq_id: u64,
    origin_time: String,
    lead_min: i64,
    prediction: f64,
    reference: f64,
}

fn cmd_predict(model_file: &Path, inputs: &Inputs, stride: Option<usize>, out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.value("stride", stride);
    let run = load_config(cfg, &o)?;
    let model = load_model(model_file)?.into_forecaster();
    let data = load_inputs(inputs)?;
    let owned = data.trajectories;
    let index = index_trajectories(&owned);
    let mut rows = Vec::new();
    for rec in &data.records {
        let step_min = rec.grid.step / MINUTE;
        let horizon = run.horizon_len.max(model.min_horizon());
        for s in extract_windows(rec, run.history_len, horizon, run.stride, &run.slice_config) {
            let mut req = ForecastRequest::from_sample(&s, model.action_conditional());
            if let Some(t) = index.get(rec.pat_id.as_str()) {
                req.sim = Some(std::borrow::Cow::Owned(t.context_at(s.origin, horizon)));
            }
            let pred = model.predict(&req)?;
            for (k, (&p, &r)) in pred.iter().zip(s.target()).enumerate().take(run.horizon_len) {
                rows.push(PredictionRow {
                    pat_id: rec.pat_id.clone(),
                    seq_id: rec.seq_id,
                    origin_time: format_time(s.origin_time()),
                    lead_min: (k as i64 + 1) * step_min,
                    prediction: p,
                    reference: r,
                });
            }
        }
    }
    write_csv(out, &rows)?;
    Ok(())
}

fn cmd_eval_forecast(model_file: &Path, inputs: &Inputs, leads: &[i64], out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.list("leads_min", leads, false);
    let run = load_config(cfg, &o)?;
    let model = load_model(model_file)?.into_forecaster();
    let data = load_inputs(inputs)?;
    let index = index_trajectories(&data.trajectories);
    let sims = (!data.trajectories.is_empty()).then_some(&index);
    let rows = evaluate_forecasts(model.as_ref(), &data.records, sims, &run.forecast_eval())?;
    make_dir(out)?;
    write_csv(out.join("forecast_rows.csv"), &rows)?;
    let reports = forecast_reports(
        &data.cohort,
        model.name(),
        &rows,
        &patients(&data.records),
        &run.slices,
        &run.leads_min,
        run.bootstrap_resamples,
        run.seed,
    );
    write_summary(out, &reports)
}

fn cmd_eval_gating(
    model_file: &Path,
    inputs: &Inputs,
    ph: Option<i64>,
    threshold: Option<f64>,
    slices: &[Slice],
    out: &Path,
    cfg: &ConfigArgs,
) -> CliResult<()> {
    let mut o = Overrides::default();
    o.value("ph_min", ph).value("threshold", threshold.map(|t| format!("{t:?}"))).list("slices", slices, true);
    let run = load_config(cfg, &o)?;
    let model = load_model(model_file)?.into_forecaster();
    let data = load_inputs(inputs)?;
    let index = index_trajectories(&data.trajectories);
    let sims = (!data.trajectories.is_empty()).then_some(&index);
    let counts = evaluate_gating(model.as_ref(), &data.records, sims, run.history_len, &run.gating())?;
    let rows: Vec<_> = gating_rows(&counts)?.into_iter().filter(|r| run.slices.contains(&r.slice)).collect();
    make_dir(out)?;
    write_csv(out.join("gating_rows.csv"), &rows)?;
    let reports = gating_reports(&data.cohort, model.name(), &rows, &run.slices, run.ph_min, run.bootstrap_resamples, run.seed);
    write_summary(out, &reports)
}

fn cmd_eval_counterfactual(
    model_file: &Path,
    sim: &Path,
    leads: &[i64],
    families: &[Family],
    cohort: Option<String>,
    out: &Path,
    cfg: &ConfigArgs,
) -> CliResult<()> {
    let mut o = Overrides::default();
    o.list("leads_min", leads, false).list("families", families, true);
    let run = load_config(cfg, &o)?;
    let model = load_model(model_file)?.into_forecaster();
    let menu = menu_for(&run.families);
    let mut rows = Vec::new();
    for traj in load_simulation(sim)? {
        let pairs = generate_paired_episodes(&traj, &menu, &run.episodes);
        rows.extend(evaluate_effects(model.as_ref(), &traj, &pairs, run.history_len, &run.leads_min, &run.counterfactual)?);
    }
    make_dir(out)?;
    write_csv(out.join("episode_metrics.csv"), &rows)?;
    write_csv(out.join("subject_metrics.csv"), &aggregate_by_subject(&rows))?;
    let cohort = cohort.unwrap_or_else(|| stem(sim));
    write_summary(out, &effect_reports(&cohort, model.name(), &rows, run.bootstrap_resamples, run.seed))
}

fn cmd_eval_policy_regret(model_file: &Path, sim: &Path, cohort: Option<String>, out: &Path, cfg: &ConfigArgs) -> CliResult<()> {
    let run = load_config(cfg, &Overrides::default())?;
    let model = load_model(model_file)?.into_forecaster();
    let menu = one_per_episode();
    let mut rows = Vec::new();
    for traj in load_simulation(sim)? {
        let pairs = generate_paired_episodes(&traj, &menu, &run.episodes);
        rows.extend(evaluate_policy(model.as_ref(), &traj, &pairs, run.history_len)?);
    }
    make_dir(out)?;
    write_csv(out.join("selection_rows.csv"), &rows)?;
    write_csv(out.join("subject_selection.csv"), &aggregate_selection(&rows))?;
    let cohort = cohort.unwrap_or_else(|| stem(sim));
    write_summary(out, &selection_reports(&cohort, model.name(), &rows, run.bootstrap_resamples, run.seed))
}

fn cmd_report(out: &Path, seed: Option<u64>, from: &[PathBuf], cfg: &ConfigArgs) -> CliResult<()> {
    if !from.is_empty() {
        let mut reports = Vec::new();
        for p in from {
            let s: ReportSummary = read_json(p)?;
            reports.extend(s.reports);
        }
        return write_summary(out, &reports);
    }
    let mut o = Overrides::default();
    o.value("seed", seed);
    let run = load_config(cfg, &o)?;
    run.validate().map_err(|e| usage(e.to_string()))?;
    let (reports, files) = run_benchmark(&run, out)?;
    log::info!("{} metric reports in {}", reports.len(), files.table.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Harmonize { input, out, cfg } => cmd_harmonize(&input, &out, &cfg),
        Command::Simulate { subjects, days, seed, out, cfg } => cmd_simulate(subjects, days, seed, &out, &cfg),
        Command::MakeEpisodes { sim, families, out, cfg } => cmd_make_episodes(&sim, &families, &out, &cfg),
        Command::MakeActionMenu { sim, out, cfg } => cmd_make_action_menu(&sim, &out, &cfg),
        Command::Fit { model, data, valid, lags, ridge, out, cfg } => {
            cmd_fit(model, data.as_deref(), valid.as_deref(), lags, ridge, &out, &cfg)
        }
        Command::Predict { model_file, inputs, stride, out, cfg } => cmd_predict(&model_file, &inputs, stride, &out, &cfg),
        Command::EvalForecast { model_file, inputs, leads, out, cfg } => cmd_eval_forecast(&model_file, &inputs, &leads, &out, &cfg),
        Command::EvalGating { model_file, inputs, ph, threshold, slices, out, cfg } => {
            cmd_eval_gating(&model_file, &inputs, ph, threshold, &slices, &out, &cfg)
        }
        Command::EvalCounterfactual { model_file, sim, leads, families, cohort, out, cfg } => {
            cmd_eval_counterfactual(&model_file, &sim, &leads, &families, cohort, &out, &cfg)
        }
        Command::EvalPolicyRegret { model_file, sim, cohort, out, cfg } => cmd_eval_policy_regret(&model_file, &sim, cohort, &out, &cfg),
        Command::Report { out, seed, from, cfg } => cmd_report(&out, seed, &from, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
