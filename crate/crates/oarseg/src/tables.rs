//! CSV tables: training logs, per-run metrics, aggregates and skipped cells.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a table back recovers the exact values. Undefined values are empty fields.

use std::collections::BTreeMap;
use std::path::Path;

use oarseg_core::evaluation::{AggregateRow, MetricsRecord, VolumeDice};
use oarseg_core::sampling::SamplingMode;
use oarseg_core::training::TrainingLog;

use crate::error::{AppError, Result};
use crate::files::write_atomic;

pub const METRICS_HEADER: [&str; 8] = ["run_id", "mode", "m", "repetition", "seed", "volume", "class", "dice"];
pub const AGGREGATE_HEADER: [&str; 8] = ["mode", "m", "class", "mean_dice", "ci95_half_width", "n", "excluded", "low_n"];
pub const SKIPPED_HEADER: [&str; 5] = ["run_id", "mode", "m", "repetition", "reason"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn to_bytes(header: Vec<String>, rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory CSV");
    for r in rows {
        w.write_record(&r).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

/// `iteration,total,lambda_<class>…,presence_<class>…`.
pub fn training_log_csv(log: &TrainingLog) -> Vec<u8> {
    let mut header = vec!["iteration".to_string(), "total".to_string()];
    header.extend(log.roster.iter().map(|c| format!("lambda_{c}")));
    header.extend(log.roster.iter().map(|c| format!("presence_{c}")));
    let rows = log
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.iteration.to_string(), r.total.to_string()];
            row.extend(r.lambda.iter().map(|&l| opt(l)));
            row.extend(r.presence.iter().map(|p| p.to_string()));
            row
        })
        .collect();
    to_bytes(header, rows)
}

/// `iteration,mean_dice` for every validation pass.
pub fn validation_csv(log: &TrainingLog) -> Vec<u8> {
    let rows = log.validations.iter().map(|v| vec![v.iteration.to_string(), opt(v.mean_dice)]).collect();
    to_bytes(vec!["iteration".into(), "mean_dice".into()], rows)
}

/// One row per (test volume, class) in roster order.
pub fn metrics_csv(record: &MetricsRecord) -> Vec<u8> {
    let mut rows = Vec::new();
    for v in &record.volumes {
        for (class, d) in record.roster.iter().zip(&v.dice) {
            rows.push(vec![
                record.run_id.clone(),
                record.mode.to_string(),
                record.m.to_string(),
                record.repetition.to_string(),
                record.seed.to_string(),
                v.volume.clone(),
                class.clone(),
                opt(*d),
            ]);
        }
    }
    to_bytes(METRICS_HEADER.iter().map(|s| s.to_string()).collect(), rows)
}

fn field<'a>(path: &Path, rec: &'a csv::StringRecord, i: usize) -> Result<&'a str> {
    rec.get(i).ok_or_else(|| AppError::malformed(path, format!("row has no column {i}")))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| AppError::malformed(path, format!("bad {what} value {s:?}")))
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(path, s, "dice").map(Some)
    }
}

/// Reads a table written by [`metrics_csv`]; `roster` fixes the class order.
pub fn read_metrics_csv(path: &Path, roster: &[String]) -> Result<MetricsRecord> {
    let csv_err = |source| AppError::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(AppError::malformed(path, format!("unexpected header {:?}", header)));
    }
    let mut meta: Option<(String, SamplingMode, usize, usize, u64)> = None;
    let mut volumes: Vec<VolumeDice> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mode = field(path, &rec, 1)?;
        let mode = SamplingMode::parse(mode).ok_or_else(|| AppError::malformed(path, format!("unknown mode {mode:?}")))?;
        let this = (
            field(path, &rec, 0)?.to_string(),
            mode,
            parse(path, field(path, &rec, 2)?, "m")?,
            parse(path, field(path, &rec, 3)?, "repetition")?,
            parse(path, field(path, &rec, 4)?, "seed")?,
        );
        match &meta {
            None => meta = Some(this),
            Some(m) if *m != this => return Err(AppError::malformed(path, "rows describe more than one run")),
            Some(_) => {}
        }
        let volume = field(path, &rec, 5)?;
        if volumes.last().is_none_or(|v| v.volume != volume || v.dice.len() == roster.len()) {
            volumes.push(VolumeDice { volume: volume.to_string(), dice: Vec::with_capacity(roster.len()) });
        }
        let current = volumes.last_mut().expect("just pushed");
        let expected = &roster[current.dice.len()];
        if field(path, &rec, 6)? != expected {
            return Err(AppError::malformed(path, format!("expected class {expected} for volume {volume}")));
        }
        current.dice.push(parse_opt(path, field(path, &rec, 7)?)?);
    }
    let Some((run_id, mode, m, repetition, seed)) = meta else {
        return Err(AppError::malformed(path, "no metrics rows"));
    };
    if volumes.iter().any(|v| v.dice.len() != roster.len()) {
        return Err(AppError::malformed(path, "a volume lacks some classes"));
    }
    Ok(MetricsRecord { run_id, mode, m, repetition, seed, roster: roster.to_vec(), volumes })
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Vec<u8> {
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.m.to_string(),
                r.class.clone(),
                r.mean_dice.to_string(),
                r.ci95_half_width.to_string(),
                r.n.to_string(),
                r.excluded.to_string(),
                r.low_n.to_string(),
            ]
        })
        .collect();
    to_bytes(AGGREGATE_HEADER.iter().map(|s| s.to_string()).collect(), body)
}

/// Parses an aggregate table into rows keyed by (mode, M, class).
pub fn read_aggregate_csv(path: &Path) -> Result<BTreeMap<(String, usize, String), AggregateRow>> {
    let csv_err = |source| AppError::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(AGGREGATE_HEADER) {
        return Err(AppError::malformed(path, format!("unexpected header {:?}", header)));
    }
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mode_s = field(path, &rec, 0)?;
        let mode = SamplingMode::parse(mode_s).ok_or_else(|| AppError::malformed(path, format!("unknown mode {mode_s:?}")))?;
        let row = AggregateRow {
            mode,
            m: parse(path, field(path, &rec, 1)?, "m")?,
            class: field(path, &rec, 2)?.to_string(),
            mean_dice: parse(path, field(path, &rec, 3)?, "mean_dice")?,
            ci95_half_width: parse(path, field(path, &rec, 4)?, "ci95_half_width")?,
            n: parse(path, field(path, &rec, 5)?, "n")?,
            excluded: parse(path, field(path, &rec, 6)?, "excluded")?,
            low_n: parse(path, field(path, &rec, 7)?, "low_n")?,
        };
        out.insert((mode_s.to_string(), row.m, row.class.clone()), row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedCell {
    pub run_id: String,
    pub mode: SamplingMode,
    pub m: usize,
    pub repetition: usize,
    pub reason: String,
}

pub fn skipped_csv(cells: &[SkippedCell]) -> Vec<u8> {
    let rows = cells
        .iter()
        .map(|c| vec![c.run_id.clone(), c.mode.to_string(), c.m.to_string(), c.repetition.to_string(), c.reason.clone()])
        .collect();
    to_bytes(SKIPPED_HEADER.iter().map(|s| s.to_string()).collect(), rows)
}

pub fn write_table(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
