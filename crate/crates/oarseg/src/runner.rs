//! Resumable execution of the experiment grid.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.json                      resolved experiment config
//! index.json                       availability index of the training split
//! runs/<run_id>/plan.json          subset plan
//! runs/<run_id>/model.ckpt         selected checkpoint
//! runs/<run_id>/train_log.csv      per-iteration losses
//! runs/<run_id>/validation.csv     validation Dice passes
//! runs/<run_id>/metrics.csv        test Dice; written last, marks the run complete
//! skipped.csv                      infeasible cells and why
//! aggregate.csv                    per (mode, M, class) mean Dice and 95% CI
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use oarseg_core::evaluation::{aggregate, AggregateRow, MetricsRecord};
use oarseg_core::experiment::{build_dataset, cells, plan_cell, run_planned_cell, Cell, Dataset, ExperimentConfig};
use oarseg_core::sampling::SubsetPlan;
use oarseg_core::Error as CoreError;

use crate::checkpoint::save_checkpoint;
use crate::error::{AppError, Result};
use crate::files::{create_dir, read_json, write_json};
use crate::tables::{
    aggregate_csv, metrics_csv, read_metrics_csv, skipped_csv, training_log_csv, validation_csv, write_table,
    SkippedCell,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Trained,
    Resumed,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub cell: Cell,
    pub status: CellStatus,
    pub plan: Option<SubsetPlan>,
    pub record: Option<MetricsRecord>,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }

    pub fn records(&self) -> Vec<MetricsRecord> {
        self.cells.iter().filter_map(|c| c.record.clone()).collect()
    }
}

pub fn run_dir(output_dir: &Path, cell: &Cell) -> PathBuf {
    output_dir.join("runs").join(cell.run_id())
}

fn infeasible(e: &CoreError) -> bool {
    matches!(e, CoreError::NotEnoughFullyLabeled { .. } | CoreError::NotEnoughClassVolumes { .. })
}

fn run_one(cfg: &ExperimentConfig, dataset: &Dataset, out: &Path, cell: &Cell) -> Result<CellReport> {
    let dir = run_dir(out, cell);
    let metrics_path = dir.join("metrics.csv");
    let plan_path = dir.join("plan.json");
    let roster = cfg.dataset.phantom.roster();
    if metrics_path.exists() {
        let record = read_metrics_csv(&metrics_path, &roster)?;
        if record.run_id != cell.run_id() || record.seed != cell.seed {
            return Err(AppError::malformed(&metrics_path, "belongs to a different run"));
        }
        let plan: SubsetPlan = read_json(&plan_path)?;
        return Ok(CellReport { cell: *cell, status: CellStatus::Resumed, plan: Some(plan), record: Some(record), skip_reason: None });
    }
    let plan = match plan_cell(dataset, cell) {
        Ok(p) => p,
        Err(e) if infeasible(&e) => {
            return Ok(CellReport {
                cell: *cell,
                status: CellStatus::Skipped,
                plan: None,
                record: None,
                skip_reason: Some(e.to_string()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    plan.check(&dataset.index).map_err(|e| AppError::Runtime(format!("{}: sampled plan fails its invariants: {e}", cell.run_id())))?;
    create_dir(&dir)?;
    write_json(&plan_path, &plan)?;
    let outcome = run_planned_cell(cfg, dataset, cell, plan)?;
    save_checkpoint(&dir.join("model.ckpt"), &outcome.params)?;
    write_table(&dir.join("train_log.csv"), &training_log_csv(&outcome.log))?;
    write_table(&dir.join("validation.csv"), &validation_csv(&outcome.log))?;
    write_table(&metrics_path, &metrics_csv(&outcome.record))?;
    Ok(CellReport {
        cell: *cell,
        status: CellStatus::Trained,
        plan: Some(outcome.plan),
        record: Some(outcome.record),
        skip_reason: None,
    })
}

/// Concentrated and distributed plans of equal M must include the same
/// number of labeled structures.
fn check_budget_parity(reports: &[CellReport]) -> Result<()> {
    let mut by_m: BTreeMap<usize, Vec<(String, usize)>> = BTreeMap::new();
    for r in reports {
        if let Some(p) = &r.plan {
            by_m.entry(r.cell.m).or_default().push((r.cell.run_id(), p.labeled_structures()));
        }
    }
    for (m, plans) in by_m {
        if let Some((id, n)) = plans.iter().find(|(_, n)| *n != plans[0].1) {
            return Err(AppError::Runtime(format!(
                "budget parity violated at M={m}: {id} has {n} labeled structures, {} has {}",
                plans[0].0, plans[0].1
            )));
        }
    }
    Ok(())
}

/// Runs (or resumes) every cell of the grid and writes the aggregate.
///
/// `progress` receives one human-readable line per finished cell.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    create_dir(&out)?;
    let config_path = out.join("config.json");
    if config_path.exists() {
        let previous: ExperimentConfig = read_json(&config_path)?;
        if previous != *cfg {
            return Err(AppError::Usage(format!(
                "{} holds results of a different experiment config; use a fresh output_dir",
                out.display()
            )));
        }
    } else {
        write_json(&config_path, cfg)?;
    }
    let dataset = build_dataset(&cfg.dataset, cfg.master_seed)?;
    write_json(&out.join("index.json"), &dataset.index)?;

    let grid = cells(cfg);
    let results: Mutex<Vec<Option<Result<CellReport>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.max_parallel.min(grid.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = grid.get(i) else { break };
                let r = run_one(cfg, &dataset, &out, cell);
                let line = match &r {
                    Ok(rep) => match rep.status {
                        CellStatus::Trained => format!("{}: trained", cell.run_id()),
                        CellStatus::Resumed => format!("{}: already complete", cell.run_id()),
                        CellStatus::Skipped => {
                            format!("{}: skipped ({})", cell.run_id(), rep.skip_reason.as_deref().unwrap_or(""))
                        }
                    },
                    Err(e) => format!("{}: failed: {e}", cell.run_id()),
                };
                let failed = r.is_err();
                results.lock().expect("results lock")[i] = Some(r);
                progress(&line);
                if failed {
                    // Stop handing out new cells; running ones finish.
                    next.store(grid.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut reports = Vec::with_capacity(grid.len());
    for r in results.into_inner().expect("results lock").into_iter().flatten() {
        reports.push(r?);
    }

    check_budget_parity(&reports)?;
    let skipped: Vec<SkippedCell> = reports
        .iter()
        .filter(|r| r.status == CellStatus::Skipped)
        .map(|r| SkippedCell {
            run_id: r.cell.run_id(),
            mode: r.cell.mode,
            m: r.cell.m,
            repetition: r.cell.repetition,
            reason: r.skip_reason.clone().unwrap_or_default(),
        })
        .collect();
    write_table(&out.join("skipped.csv"), &skipped_csv(&skipped))?;
    let records: Vec<MetricsRecord> = reports.iter().filter_map(|r| r.record.clone()).collect();
    if records.is_empty() {
        return Err(AppError::Core(CoreError::Empty("experiment results (every cell was skipped)")));
    }
    let rows = aggregate(&records)?;
    write_table(&out.join("aggregate.csv"), &aggregate_csv(&rows))?;
    Ok(ExperimentReport { cells: reports, aggregate: rows })
}

/// Loads and validates an experiment config file.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}
