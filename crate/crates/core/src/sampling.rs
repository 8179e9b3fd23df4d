//! Label-subset sampling.
//!
//! A subset of size `M` is one in which every class is annotated exactly `M`
//! times. Two regimes produce such subsets:
//!
//! * concentrated: `M` fully annotated volumes, all of their labels kept;
//! * distributed: each class kept in `M` volumes, spread as evenly as
//!   possible over as many volumes as possible.
//!
//! The distributed sampler shuffles volumes by seed and assigns each class's
//! slots round-robin to the least-loaded eligible volume (ties broken by
//! shuffled rank). Availability gaps can leave that greedy pass unbalanced,
//! so it is followed by augmenting-path moves that shift one label at a time
//! from a volume carrying `L` labels towards one carrying at most `L - 2`.
//! When no such move exists the load vector minimizes `Σ load²`, which is
//! the most even assignment availability permits.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::volume::{class_index, drop_labels, LabeledVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Concentrated,
    Distributed,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Concentrated => "concentrated",
            SamplingMode::Distributed => "distributed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "concentrated" => Some(SamplingMode::Concentrated),
            "distributed" => Some(SamplingMode::Distributed),
            _ => None,
        }
    }
}

impl core::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// Annotated classes, by roster name.
    pub classes: Vec<String>,
}

/// Which classes are annotated in which volume.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetIndex {
    pub roster: Vec<String>,
    pub volumes: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn from_volumes(volumes: &[LabeledVolume]) -> Result<Self> {
        let roster = volumes.first().ok_or(Error::Empty("volume collection"))?.roster.clone();
        let mut entries = Vec::with_capacity(volumes.len());
        for v in volumes {
            if v.roster != roster {
                return Err(Error::Config(format!("volume {} has a different class roster", v.id)));
            }
            let classes = v.present_classes().into_iter().map(|c| roster[c].clone()).collect();
            entries.push(IndexEntry { id: v.id.clone(), classes });
        }
        let index = DatasetIndex { roster, volumes: entries };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        self.available_sets().map(|_| ())
    }

    /// Available class indices per volume; checks id uniqueness and containment.
    pub fn available_sets(&self) -> Result<Vec<BTreeSet<usize>>> {
        let mut ids = BTreeSet::new();
        let mut out = Vec::with_capacity(self.volumes.len());
        for v in &self.volumes {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::Config(format!("duplicate volume id {}", v.id)));
            }
            let set = v.classes.iter().map(|c| class_index(&self.roster, c)).collect::<Result<BTreeSet<_>>>()?;
            out.push(set);
        }
        Ok(out)
    }

    pub fn fully_labeled_count(&self) -> usize {
        self.volumes.iter().filter(|v| self.roster.iter().all(|c| v.classes.contains(c))).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PlanEntry {
    pub id: String,
    /// Included classes, in roster order. Empty means the volume is unused.
    pub classes: Vec<String>,
}

/// Per-volume, per-class inclusion decisions of one training subset.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SubsetPlan {
    pub mode: SamplingMode,
    pub m: usize,
    pub seed: u64,
    pub roster: Vec<String>,
    pub volumes: Vec<PlanEntry>,
}

impl SubsetPlan {
    /// Total number of (volume, class) labels the plan includes.
    pub fn labeled_structures(&self) -> usize {
        self.volumes.iter().map(|v| v.classes.len()).sum()
    }

    pub fn used_volumes(&self) -> usize {
        self.volumes.iter().filter(|v| !v.classes.is_empty()).count()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        self.roster.iter().map(|c| self.volumes.iter().filter(|v| v.classes.contains(c)).count()).collect()
    }

    /// Number of labels per used volume.
    pub fn loads(&self) -> Vec<usize> {
        self.volumes.iter().map(|v| v.classes.len()).filter(|&l| l > 0).collect()
    }

    pub fn includes(&self, id: &str, class: &str) -> bool {
        self.volumes.iter().any(|v| v.id == id && v.classes.iter().any(|c| c == class))
    }

    /// Checks the plan against `index`: ids and roster agree, every included
    /// label is available, every class is included exactly `m` times, and a
    /// distributed plan's loads differ by at most one.
    pub fn check(&self, index: &DatasetIndex) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.roster != index.roster {
            return fail("plan roster differs from the index roster".into());
        }
        if self.m == 0 {
            return fail("plan size m must be positive".into());
        }
        let avail = index.available_sets()?;
        for p in &self.volumes {
            let Some(pos) = index.volumes.iter().position(|v| v.id == p.id) else {
                return Err(Error::MissingVolume(p.id.clone()));
            };
            let mut seen = BTreeSet::new();
            for c in &p.classes {
                let ci = class_index(&self.roster, c)?;
                if !avail[pos].contains(&ci) {
                    return fail(format!("{} includes {c}, which it does not annotate", p.id));
                }
                if !seen.insert(ci) {
                    return fail(format!("{} lists {c} twice", p.id));
                }
            }
        }
        for (c, count) in self.roster.iter().zip(self.per_class_counts()) {
            if count != self.m {
                return fail(format!("class {c} included {count} times, expected {}", self.m));
            }
        }
        if self.mode == SamplingMode::Distributed {
            let loads = self.loads();
            let (lo, hi) = (loads.iter().min().copied().unwrap_or(0), loads.iter().max().copied().unwrap_or(0));
            if hi - lo > 1 {
                return fail(format!("labels unevenly spread: volumes carry between {lo} and {hi}"));
            }
        }
        Ok(())
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("subset size M must be positive".into()));
    }
    Ok(())
}

fn build_plan(index: &DatasetIndex, mode: SamplingMode, m: usize, seed: u64, sets: &[BTreeSet<usize>]) -> SubsetPlan {
    let volumes = index
        .volumes
        .iter()
        .zip(sets)
        .map(|(v, s)| PlanEntry { id: v.id.clone(), classes: s.iter().map(|&c| index.roster[c].clone()).collect() })
        .collect();
    SubsetPlan { mode, m, seed, roster: index.roster.clone(), volumes }
}

/// Selects `m` fully annotated volumes and keeps all of their labels.
pub fn sample_concentrated(index: &DatasetIndex, m: usize, seed: u64) -> Result<SubsetPlan> {
    check_m(m)?;
    let avail = index.available_sets()?;
    let k = index.roster.len();
    let mut full: Vec<usize> = (0..avail.len()).filter(|&i| avail[i].len() == k).collect();
    if full.len() < m {
        return Err(Error::NotEnoughFullyLabeled { available: full.len(), requested: m });
    }
    full.shuffle(&mut rng_from_seed(seed));
    let mut sets = vec![BTreeSet::new(); avail.len()];
    for &i in &full[..m] {
        sets[i] = (0..k).collect();
    }
    Ok(build_plan(index, SamplingMode::Concentrated, m, seed, &sets))
}

/// Keeps every class in exactly `m` volumes, spread as evenly as possible.
pub fn sample_distributed(index: &DatasetIndex, m: usize, seed: u64) -> Result<SubsetPlan> {
    check_m(m)?;
    let avail = index.available_sets()?;
    let k = index.roster.len();
    for c in 0..k {
        let n = avail.iter().filter(|s| s.contains(&c)).count();
        if n < m {
            return Err(Error::NotEnoughClassVolumes { class: index.roster[c].clone(), available: n, requested: m });
        }
    }
    let v = avail.len();
    let mut order: Vec<usize> = (0..v).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut rank = vec![0usize; v];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut assigned: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); v];
    for _ in 0..m {
        for c in 0..k {
            let best = order
                .iter()
                .copied()
                .filter(|&i| avail[i].contains(&c) && !assigned[i].contains(&c))
                .min_by_key(|&i| (assigned[i].len(), rank[i]))
                .expect("availability checked above");
            assigned[best].insert(c);
        }
    }
    rebalance(&avail, &mut assigned, &order);
    Ok(build_plan(index, SamplingMode::Distributed, m, seed, &assigned))
}

/// Moves labels along augmenting paths until no volume with load `L` can
/// reach one with load `≤ L - 2`.
fn rebalance(avail: &[BTreeSet<usize>], assigned: &mut [BTreeSet<usize>], order: &[usize]) {
    loop {
        let mut sources: Vec<usize> = order.to_vec();
        sources.sort_by_key(|&i| core::cmp::Reverse(assigned[i].len()));
        let path = sources.iter().find_map(|&s| augmenting_path(avail, assigned, order, s));
        let Some(path) = path else { return };
        // path: (from, to, class) hops starting at the overloaded source
        for &(from, to, class) in path.iter().rev() {
            assigned[from].remove(&class);
            assigned[to].insert(class);
        }
    }
}

fn augmenting_path(
    avail: &[BTreeSet<usize>],
    assigned: &[BTreeSet<usize>],
    order: &[usize],
    source: usize,
) -> Option<Vec<(usize, usize, usize)>> {
    let load = assigned[source].len();
    if load < 2 {
        return None;
    }
    let v = avail.len();
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; v];
    let mut seen = vec![false; v];
    seen[source] = true;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &w in order {
            if seen[w] {
                continue;
            }
            let Some(&c) = assigned[u].iter().find(|&&c| avail[w].contains(&c) && !assigned[w].contains(&c)) else {
                continue;
            };
            seen[w] = true;
            prev[w] = Some((u, c));
            if assigned[w].len() + 2 <= load {
                let mut path = Vec::new();
                let mut cur = w;
                while let Some((p, c)) = prev[cur] {
                    path.push((p, cur, c));
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(w);
        }
    }
    None
}

/// Dispatches on `mode`.
pub fn sample(index: &DatasetIndex, mode: SamplingMode, m: usize, seed: u64) -> Result<SubsetPlan> {
    match mode {
        SamplingMode::Concentrated => sample_concentrated(index, m, seed),
        SamplingMode::Distributed => sample_distributed(index, m, seed),
    }
}

/// Restricts each planned volume to its planned labels; volumes the plan does
/// not use are omitted.
pub fn apply_plan(plan: &SubsetPlan, volumes: &[LabeledVolume]) -> Result<Vec<LabeledVolume>> {
    let mut out = Vec::new();
    for entry in plan.volumes.iter().filter(|e| !e.classes.is_empty()) {
        let vol = volumes.iter().find(|v| v.id == entry.id).ok_or_else(|| Error::MissingVolume(entry.id.clone()))?;
        let keep = entry.classes.iter().map(|c| vol.class_index(c)).collect::<Result<Vec<_>>>()?;
        if let Some(&c) = keep.iter().find(|&&c| vol.masks[c].is_none()) {
            return Err(Error::Config(format!("plan includes {} for {}, which is not annotated", vol.roster[c], vol.id)));
        }
        out.push(drop_labels(vol, &keep)?);
    }
    Ok(out)
}
