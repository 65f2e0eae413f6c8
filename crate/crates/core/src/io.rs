//! CSV file formats.
//!
//! Harmonized records use the columns
//! `pat_id,seq_id,date,cgm,basal,bolus_standard,bolus_extended,weight_kg,meal`
//! with `date` as `YYYY-MM-DD HH:MM:SS` (UTC) and an empty `weight_kg` when the
//! record has no weight channel.
//!
//! Raw event logs live in one directory with one file per channel; missing
//! files are treated as empty:
//!
//! | file         | header                              |
//! |--------------|-------------------------------------|
//! | `cgm.csv`    | `pat_id,timestamp,glucose`          |
//! | `basal.csv`  | `pat_id,timestamp,rate`             |
//! | `bolus.csv`  | `pat_id,timestamp,amount,kind`      |
//! | `meal.csv`   | `pat_id,timestamp,carbs`            |
//! | `weight.csv` | `pat_id,timestamp,weight_kg`        |
//!
//! `timestamp` is either integer seconds since the epoch or a `date`-style
//! string; `kind` is `standard` or `extended`; an empty `carbs` marks a meal
//! whose size is unknown.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonize::{BolusKind, BolusObservation, MealObservation, Observation, RawCohortEvents};
use crate::timeseries::{SequenceRecord, TimeGrid, DEFAULT_STEP};

pub const HARMONIZED_HEADER: [&str; 9] = [
    "pat_id",
    "seq_id",
    "date",
    "cgm",
    "basal",
    "bolus_standard",
    "bolus_extended",
    "weight_kg",
    "meal",
];

const DATE_FMT: &str = "%Y-%m-%d %H:%M:%S";

pub fn format_time(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.naive_utc().format(DATE_FMT).to_string())
        .unwrap_or_else(|| ts.to_string())
}

pub fn parse_time(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    NaiveDateTime::parse_from_str(s, DATE_FMT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .map(|d| d.and_utc().timestamp())
        .map_err(|_| Error::InvalidInput(format!("unparseable timestamp '{s}'")))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

// ── Harmonized records ────────────────────────────────────────────────

pub fn write_harmonized_to<W: Write>(w: W, records: &[SequenceRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(HARMONIZED_HEADER)?;
    for r in records {
        let seq = r.seq_id.to_string();
        for i in 0..r.len() {
            let weight = r.weight.as_ref().map(|w| w[i].to_string()).unwrap_or_default();
            wr.write_record([
                r.pat_id.as_str(),
                seq.as_str(),
                format_time(r.grid.time(i)).as_str(),
                r.cgm[i].to_string().as_str(),
                r.basal[i].to_string().as_str(),
                r.bolus_standard[i].to_string().as_str(),
                r.bolus_extended[i].to_string().as_str(),
                weight.as_str(),
                r.meal[i].to_string().as_str(),
            ])?;
        }
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_harmonized(path: impl AsRef<Path>, records: &[SequenceRecord]) -> Result<()> {
    let path = path.as_ref();
    write_harmonized_to(create(path)?, records)
}

#[derive(Debug, Deserialize)]
struct HarmonizedRow {
    pat_id: String,
    seq_id: u64,
    date: String,
    cgm: f64,
    basal: f64,
    bolus_standard: f64,
    bolus_extended: f64,
    weight_kg: Option<f64>,
    meal: f64,
}

struct Builder {
    pat_id: String,
    seq_id: u64,
    times: Vec<i64>,
    rec: SequenceRecord,
    weight: Vec<Option<f64>>,
}

impl Builder {
    fn finish(self) -> Result<SequenceRecord> {
        let Builder { pat_id, seq_id, times, mut rec, weight } = self;
        let step = if times.len() >= 2 { times[1] - times[0] } else { DEFAULT_STEP };
        if times.windows(2).any(|w| w[1] - w[0] != step) {
            return Err(Error::InvalidInput(format!("record {pat_id}/{seq_id} is not on a uniform grid")));
        }
        rec.grid = TimeGrid::new(times[0], step, times.len())?;
        rec.weight = if weight.iter().all(Option::is_some) {
            Some(weight.into_iter().flatten().collect())
        } else if weight.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::InvalidInput(format!("record {pat_id}/{seq_id} has a partial weight channel")));
        };
        rec.validate()?;
        Ok(rec)
    }
}

pub fn read_harmonized_from<R: Read>(r: R) -> Result<Vec<SequenceRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    let mut cur: Option<Builder> = None;
    for row in rd.deserialize() {
        let row: HarmonizedRow = row?;
        let same = cur.as_ref().is_some_and(|b| b.pat_id == row.pat_id && b.seq_id == row.seq_id);
        if !same {
            if let Some(b) = cur.take() {
                out.push(b.finish()?);
            }
            let mut rec = SequenceRecord::from_cgm(row.pat_id.clone(), row.seq_id, TimeGrid { start: 0, step: 1, n_steps: 0 }, vec![]);
            rec.basal.clear();
            cur = Some(Builder { pat_id: row.pat_id.clone(), seq_id: row.seq_id, times: vec![], rec, weight: vec![] });
        }
        let b = cur.as_mut().expect("builder initialised");
        b.times.push(parse_time(&row.date)?);
        b.rec.cgm.push(row.cgm);
        b.rec.basal.push(row.basal);
        b.rec.bolus_standard.push(row.bolus_standard);
        b.rec.bolus_extended.push(row.bolus_extended);
        b.rec.meal.push(row.meal);
        b.weight.push(row.weight_kg);
    }
    if let Some(b) = cur {
        out.push(b.finish()?);
    }
    Ok(out)
}

pub fn read_harmonized(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    read_harmonized_from(open(path.as_ref())?)
}

// ── Raw event logs ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CgmRow {
    pat_id: String,
    timestamp: String,
    glucose: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BasalRow {
    pat_id: String,
    timestamp: String,
    rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BolusRow {
    pat_id: String,
    timestamp: String,
    amount: f64,
    kind: BolusKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct MealRow {
    pat_id: String,
    timestamp: String,
    carbs: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightRow {
    pat_id: String,
    timestamp: String,
    weight_kg: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_reader(open(path)?);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(create(path)?);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw_events(dir: impl AsRef<Path>) -> Result<RawCohortEvents> {
    let dir = dir.as_ref();
    let obs = |pat_id: String, ts: &str, value: f64| -> Result<Observation> {
        Ok(Observation { pat_id, time: parse_time(ts)?, value })
    };
    let cgm = read_rows::<CgmRow>(&dir.join("cgm.csv"))?
        .into_iter()
        .map(|r| obs(r.pat_id, &r.timestamp, r.glucose))
        .collect::<Result<_>>()?;
    let basal = read_rows::<BasalRow>(&dir.join("basal.csv"))?
        .into_iter()
        .map(|r| obs(r.pat_id, &r.timestamp, r.rate))
        .collect::<Result<_>>()?;
    let weight = read_rows::<WeightRow>(&dir.join("weight.csv"))?
        .into_iter()
        .map(|r| obs(r.pat_id, &r.timestamp, r.weight_kg))
        .collect::<Result<_>>()?;
    let bolus = read_rows::<BolusRow>(&dir.join("bolus.csv"))?
        .into_iter()
        .map(|r| {
            Ok(BolusObservation { pat_id: r.pat_id, time: parse_time(&r.timestamp)?, amount: r.amount, kind: r.kind })
        })
        .collect::<Result<_>>()?;
    let meal = read_rows::<MealRow>(&dir.join("meal.csv"))?
        .into_iter()
        .map(|r| Ok(MealObservation { pat_id: r.pat_id, time: parse_time(&r.timestamp)?, carbs: r.carbs }))
        .collect::<Result<_>>()?;
    Ok(RawCohortEvents { cgm, basal, bolus, meal, weight })
}

pub fn write_raw_events(dir: impl AsRef<Path>, ev: &RawCohortEvents) -> Result<()> {
    let dir = dir.as_ref();
    let ts = |t: i64| t.to_string();
    write_rows(
        &dir.join("cgm.csv"),
        &ev.cgm.iter().map(|o| CgmRow { pat_id: o.pat_id.clone(), timestamp: ts(o.time), glucose: o.value }).collect::<Vec<_>>(),
    )?;
    write_rows(
        &dir.join("basal.csv"),
        &ev.basal.iter().map(|o| BasalRow { pat_id: o.pat_id.clone(), timestamp: ts(o.time), rate: o.value }).collect::<Vec<_>>(),
    )?;
    write_rows(
        &dir.join("bolus.csv"),
        &ev.bolus
            .iter()
            .map(|o| BolusRow { pat_id: o.pat_id.clone(), timestamp: ts(o.time), amount: o.amount, kind: o.kind })
            .collect::<Vec<_>>(),
    )?;
    write_rows(
        &dir.join("meal.csv"),
        &ev.meal.iter().map(|o| MealRow { pat_id: o.pat_id.clone(), timestamp: ts(o.time), carbs: o.carbs }).collect::<Vec<_>>(),
    )?;
    write_rows(
        &dir.join("weight.csv"),
        &ev.weight
            .iter()
            .map(|o| WeightRow { pat_id: o.pat_id.clone(), timestamp: ts(o.time), weight_kg: o.value })
            .collect::<Vec<_>>(),
    )
}

/// Serialize any value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    Ok(serde_json::from_reader(std::io::BufReader::new(open(path)?))?)
}

/// Write rows of any serializable type as CSV (header from field names).
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

/// Write a CSV with an explicit header, which also covers the empty case.
pub fn write_csv_with_header<T: Serialize>(path: impl AsRef<Path>, header: &[&str], rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    wr.write_record(header)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_reader(open(path.as_ref())?);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}
