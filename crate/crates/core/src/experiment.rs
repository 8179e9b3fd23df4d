//! The label-budget experiment grid: for every (mode, M, repetition) cell a
//! subset is sampled, a network trained and the test split scored.
//!
//! This module is pure; the runner that persists cells, resumes and writes
//! CSVs lives in the `oarseg` crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_volume, MetricsRecord};
use crate::network::{ModelParams, NetworkConfig};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::rng::{derive_seed, rng_from_seed, str_word};
use crate::sampling::{apply_plan, sample, DatasetIndex, SamplingMode, SubsetPlan};
use crate::training::{train, TrainerConfig, TrainingLog};
use crate::volume::{drop_labels, LabeledVolume};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub phantom: PhantomSpec,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub test_volumes: usize,
    /// The first this many training volumes keep every label.
    pub fully_labeled_train: usize,
    /// Per-class probability that the remaining training volumes keep a label.
    pub label_keep_probability: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            phantom: PhantomSpec::desk(),
            train_volumes: 30,
            val_volumes: 2,
            test_volumes: 20,
            fully_labeled_train: 15,
            label_keep_probability: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub m_values: Vec<usize>,
    pub modes: Vec<SamplingMode>,
    pub repetitions: usize,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub master_seed: u64,
    pub output_dir: String,
    #[serde(default = "one")]
    pub max_parallel: usize,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Both modes, M ∈ {1, 2, 4, 8}, three repetitions on desk phantoms.
    pub fn desk(output_dir: &str) -> Self {
        let dataset = DatasetConfig::default();
        let n = dataset.phantom.structures.len();
        ExperimentConfig {
            dataset,
            m_values: vec![1, 2, 4, 8],
            modes: vec![SamplingMode::Concentrated, SamplingMode::Distributed],
            repetitions: 3,
            network: NetworkConfig::desk(n),
            trainer: TrainerConfig::desk(),
            master_seed: 2019,
            output_dir: output_dir.into(),
            max_parallel: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset.phantom.validate()?;
        self.network.validate()?;
        self.trainer.validate()?;
        let d = &self.dataset;
        if d.train_volumes == 0 || d.test_volumes == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        if d.fully_labeled_train > d.train_volumes {
            return bad("fully_labeled_train exceeds train_volumes".into());
        }
        if !(0.0..=1.0).contains(&d.label_keep_probability) {
            return bad("label_keep_probability must lie in [0, 1]".into());
        }
        if self.network.num_classes != d.phantom.structures.len() {
            return bad(format!(
                "network has {} classes, phantom roster has {}",
                self.network.num_classes,
                d.phantom.structures.len()
            ));
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return bad("m_values must be non-empty and positive".into());
        }
        if self.modes.is_empty() || self.repetitions == 0 || self.max_parallel == 0 {
            return bad("modes, repetitions and max_parallel must be non-empty/positive".into());
        }
        if d.phantom.dims.iter().any(|&n| n < self.trainer.patch_size) {
            return bad("phantom dims smaller than the training patch".into());
        }
        Ok(())
    }
}

/// Disjoint train/validation/test splits plus the training availability index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledVolume>,
    pub val: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
    pub index: DatasetIndex,
}

/// Generates the phantom splits. Validation and test volumes keep every
/// label; training volumes past `fully_labeled_train` lose labels through
/// [`thin_labels`].
pub fn build_dataset(cfg: &DatasetConfig, master_seed: u64) -> Result<Dataset> {
    let mut train = generate_split(&cfg.phantom, master_seed, "train", cfg.train_volumes)?;
    let val = generate_split(&cfg.phantom, master_seed, "val", cfg.val_volumes)?;
    let test = generate_split(&cfg.phantom, master_seed, "test", cfg.test_volumes)?;
    thin_labels(&mut train, cfg.fully_labeled_train, cfg.label_keep_probability, master_seed)?;
    let index = DatasetIndex::from_volumes(&train)?;
    Ok(Dataset { train, val, test, index })
}

/// `count` fully annotated phantoms named `<split>_000`, `<split>_001`, ….
pub fn generate_split(spec: &PhantomSpec, master_seed: u64, split: &str, count: usize) -> Result<Vec<LabeledVolume>> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(master_seed, &[str_word("volume"), str_word(split), i as u64]);
            generate_phantom(spec, &format!("{split}_{i:03}"), seed)
        })
        .collect()
}

/// Simulates incomplete annotation: every volume from position `keep_first`
/// on keeps each label with probability `keep_probability`, but always keeps
/// at least one and never all of them.
pub fn thin_labels(volumes: &mut [LabeledVolume], keep_first: usize, keep_probability: f64, master_seed: u64) -> Result<()> {
    for (i, v) in volumes.iter_mut().enumerate().skip(keep_first) {
        let k = v.num_classes();
        if k < 2 {
            continue;
        }
        let mut rng = rng_from_seed(derive_seed(master_seed, &[str_word("labels"), i as u64]));
        let mut keep: Vec<usize> = (0..k).filter(|_| rng.random::<f64>() < keep_probability).collect();
        if keep.is_empty() {
            keep.push(rng.random_range(0..k));
        }
        if keep.len() == k {
            keep.remove(rng.random_range(0..k));
        }
        *v = drop_labels(v, &keep)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub mode: SamplingMode,
    pub m: usize,
    pub repetition: usize,
    pub seed: u64,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("{}_m{:03}_r{:02}", self.mode, self.m, self.repetition)
    }
}

/// Stable per-cell seed from the master seed, mode, M and repetition.
pub fn cell_seed(master: u64, mode: SamplingMode, m: usize, repetition: usize) -> u64 {
    derive_seed(master, &[str_word("cell"), str_word(mode.as_str()), m as u64, repetition as u64])
}

/// All grid cells, ordered by mode, M, repetition.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &mode in &cfg.modes {
        for &m in &cfg.m_values {
            for repetition in 0..cfg.repetitions {
                out.push(Cell { mode, m, repetition, seed: cell_seed(cfg.master_seed, mode, m, repetition) });
            }
        }
    }
    out
}

pub fn plan_cell(dataset: &Dataset, cell: &Cell) -> Result<SubsetPlan> {
    sample(&dataset.index, cell.mode, cell.m, cell.seed)
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub plan: SubsetPlan,
    pub params: ModelParams,
    pub log: TrainingLog,
    pub record: MetricsRecord,
}

/// Trains and scores one cell from an already sampled plan.
pub fn run_planned_cell(cfg: &ExperimentConfig, dataset: &Dataset, cell: &Cell, plan: SubsetPlan) -> Result<CellOutcome> {
    let volumes = apply_plan(&plan, &dataset.train)?;
    let trainer = TrainerConfig { seed: cell.seed, ..cfg.trainer.clone() };
    let (params, log) = train(&volumes, &dataset.val, &cfg.network, &trainer)?;
    let record = score(&params, &dataset.test, &trainer, cell)?;
    Ok(CellOutcome { plan, params, log, record })
}

pub fn run_cell(cfg: &ExperimentConfig, dataset: &Dataset, cell: &Cell) -> Result<CellOutcome> {
    let plan = plan_cell(dataset, cell)?;
    run_planned_cell(cfg, dataset, cell, plan)
}

/// Scores `params` on every test volume.
pub fn score(params: &ModelParams, test: &[LabeledVolume], trainer: &TrainerConfig, cell: &Cell) -> Result<MetricsRecord> {
    let roster = test.first().ok_or(Error::Empty("test split"))?.roster.clone();
    let volumes = test
        .iter()
        .map(|v| evaluate_volume(params, v, trainer.patch_size, trainer.inference_overlap, trainer.threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRecord {
        run_id: cell.run_id(),
        mode: cell.mode,
        m: cell.m,
        repetition: cell.repetition,
        seed: cell.seed,
        roster,
        volumes,
    })
}
