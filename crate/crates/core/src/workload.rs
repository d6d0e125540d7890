//! Synthetic service-DAG workloads.
//!
//! Topologies are layered: `fat` controls how many levels the tasks are spread
//! over and `density` how many extra edges connect earlier levels to later
//! ones. Weights are then drawn uniformly from [`WeightRanges`].
//!
//! Every random draw comes from a ChaCha8 stream keyed by `(seed, stream id)`,
//! so datasets are reproducible across platforms and independent of the order
//! (or thread) in which DAGs are generated.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{DagEdge, ServiceDag, TaskSpec};

/// Streams at or above this id are reserved for topology generation.
const TOPOLOGY_STREAM_BASE: u64 = 1 << 63;
/// Stream used for train/eval splitting.
const SPLIT_STREAM: u64 = u64::MAX;

/// A ChaCha8 generator positioned on stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed dataset file {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkloadError + '_ {
    move |source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyParams {
    pub num_tasks: usize,
    pub fat: f64,
    pub density: f64,
    pub seed: u64,
}

/// A generated topology: the unit-weight skeleton, its level sizes and any
/// parameter clamping that happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub dag: ServiceDag,
    pub tasks_per_level: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn generate_topology(p: &TopologyParams) -> Topology {
    generate_topology_with(p, &mut ChaCha8Rng::seed_from_u64(p.seed))
}

fn generate_topology_with(p: &TopologyParams, rng: &mut ChaCha8Rng) -> Topology {
    let mut warnings = Vec::new();
    let n = if p.num_tasks == 0 {
        warnings.push("num_tasks 0 clamped to 1".to_string());
        1
    } else {
        p.num_tasks
    };
    let fat = if !(p.fat > 0.0 && p.fat <= 1.0) {
        let f = if p.fat.is_nan() { 1.0 } else { p.fat.clamp(1e-3, 1.0) };
        warnings.push(format!("fat {} clamped to {f}", p.fat));
        f
    } else {
        p.fat
    };
    let density = if !(0.0..=1.0).contains(&p.density) {
        let d = if p.density.is_nan() { 0.0 } else { p.density.clamp(0.0, 1.0) };
        warnings.push(format!("density {} clamped to {d}", p.density));
        d
    } else {
        p.density
    };

    let levels = ((n as f64).sqrt() / fat).round().clamp(1.0, n as f64) as usize;
    let mut sizes: Vec<usize> = (0..levels)
        .map(|i| n / levels + usize::from(i < n % levels))
        .collect();
    // Jitter: each level may hand one task to a random neighbour level.
    if levels > 1 {
        for i in 0..levels {
            if sizes[i] > 1 && rng.gen_bool(0.5) {
                let j = if i == 0 {
                    1
                } else if i == levels - 1 || rng.gen_bool(0.5) {
                    i - 1
                } else {
                    i + 1
                };
                sizes[i] -= 1;
                sizes[j] += 1;
            }
        }
    }

    let mut starts = Vec::with_capacity(levels);
    let mut acc = 0;
    for &s in &sizes {
        starts.push(acc);
        acc += s;
    }
    let tasks = (0..n)
        .map(|id| TaskSpec {
            id,
            cpu_cycles: 1.0,
            ram_bytes: 1.0,
            deadline_s: 1.0,
        })
        .collect();
    let mut edges = Vec::new();
    for level in 1..levels {
        let prev = starts[level - 1]..starts[level];
        for dst in starts[level]..starts[level] + sizes[level] {
            let mandatory = rng.gen_range(prev.clone());
            for src in 0..starts[level] {
                if src == mandatory || rng.gen_bool(density) {
                    edges.push(DagEdge {
                        src,
                        dst,
                        data_bytes: 1.0,
                    });
                }
            }
        }
    }
    Topology {
        dag: ServiceDag {
            id: 0,
            tasks,
            edges,
        },
        tasks_per_level: sizes,
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Range { low, high }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.gen_range(self.low..=self.high)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    fn is_valid(&self) -> bool {
        self.low > 0.0 && self.low <= self.high && self.high.is_finite()
    }
}

/// Weight ranges in base units: cycles, bytes, bytes, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRanges {
    pub cycles: Range,
    pub ram_bytes: Range,
    pub edge_bytes: Range,
    pub deadline_s: Range,
}

impl Default for WeightRanges {
    fn default() -> Self {
        WeightRanges {
            cycles: Range::new(1e7, 3e8),
            ram_bytes: Range::new(25e6, 100e6),
            edge_bytes: Range::new(50e3, 2000e3),
            deadline_s: Range::new(0.025, 0.1),
        }
    }
}

impl WeightRanges {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (name, r) in [
            ("cycles", self.cycles),
            ("ram_bytes", self.ram_bytes),
            ("edge_bytes", self.edge_bytes),
            ("deadline_s", self.deadline_s),
        ] {
            if !r.is_valid() {
                return Err(WorkloadError::InvalidSpec(format!(
                    "range {name} must satisfy 0 < low <= high"
                )));
            }
        }
        Ok(())
    }
}

pub fn assign_weights(skeleton: &ServiceDag, ranges: &WeightRanges, seed: u64) -> ServiceDag {
    assign_weights_with(skeleton, ranges, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assign_weights_with(skeleton: &ServiceDag, r: &WeightRanges, rng: &mut ChaCha8Rng) -> ServiceDag {
    let tasks = skeleton
        .tasks
        .iter()
        .map(|t| TaskSpec {
            id: t.id,
            cpu_cycles: r.cycles.sample(rng),
            ram_bytes: r.ram_bytes.sample(rng),
            deadline_s: r.deadline_s.sample(rng),
        })
        .collect();
    let edges = skeleton
        .edges
        .iter()
        .map(|e| DagEdge {
            src: e.src,
            dst: e.dst,
            data_bytes: r.edge_bytes.sample(rng),
        })
        .collect();
    ServiceDag {
        id: skeleton.id,
        tasks,
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task_counts: Vec<usize>,
    pub fats: Vec<f64>,
    pub densities: Vec<f64>,
    /// Topologies generated per `(L, fat, density)` grid point.
    #[serde(default = "one")]
    pub topologies_per_point: usize,
    pub weightings_per_topology: usize,
    pub train_fraction: f64,
    #[serde(default)]
    pub ranges: WeightRanges,
    pub seed: u64,
    /// Leave-one-L-out: train on every other L, evaluate only on this one.
    #[serde(default)]
    pub holdout_tasks: Option<usize>,
}

fn one() -> usize {
    1
}

impl DatasetSpec {
    /// The full 10 x 5 x 5 grid with 100 weightings per topology.
    pub fn full_scale(seed: u64) -> Self {
        DatasetSpec {
            task_counts: (1..=10).map(|i| i * 5).collect(),
            fats: vec![0.4, 0.5, 0.6, 0.7, 0.8],
            densities: vec![0.4, 0.5, 0.6, 0.7, 0.8],
            topologies_per_point: 1,
            weightings_per_topology: 100,
            train_fraction: 0.8,
            ranges: WeightRanges::default(),
            seed,
            holdout_tasks: None,
        }
    }

    pub fn num_topologies(&self) -> usize {
        self.task_counts.len() * self.fats.len() * self.densities.len() * self.topologies_per_point
    }

    pub fn num_dags(&self) -> usize {
        self.num_topologies() * self.weightings_per_topology
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(WorkloadError::InvalidSpec("train_fraction must be in (0, 1)".into()));
        }
        if self.num_dags() == 0 {
            return Err(WorkloadError::InvalidSpec("dataset would be empty".into()));
        }
        if self.task_counts.contains(&0) {
            return Err(WorkloadError::InvalidSpec("task counts must be >= 1".into()));
        }
        if let Some(h) = self.holdout_tasks {
            if !self.task_counts.contains(&h) || self.task_counts.len() < 2 {
                return Err(WorkloadError::InvalidSpec(format!(
                    "holdout L={h} needs to be one of several grid values"
                )));
            }
        }
        self.ranges.validate()
    }

    /// Grid point of topology `t`: L varies slowest, then fat, then density.
    fn grid_point(&self, t: usize) -> (usize, f64, f64) {
        let per = self.topologies_per_point;
        let g = t / per;
        let nd = self.densities.len();
        let nf = self.fats.len();
        (
            self.task_counts[g / (nf * nd)],
            self.fats[(g / nd) % nf],
            self.densities[g % nd],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    pub num_tasks: usize,
    pub fat: f64,
    pub density: f64,
    pub topology: usize,
    pub weighting: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

/// An in-memory dataset split into training and evaluation services.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<ServiceDag>,
    pub eval: Vec<ServiceDag>,
}

/// Generates every DAG of `spec` in memory.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, WorkloadError> {
    spec.validate()?;
    let topologies: Vec<(usize, f64, f64, ServiceDag)> = (0..spec.num_topologies())
        .into_par_iter()
        .map(|t| {
            let (l, fat, density) = spec.grid_point(t);
            let params = TopologyParams {
                num_tasks: l,
                fat,
                density,
                seed: spec.seed,
            };
            let mut rng = stream_rng(spec.seed, TOPOLOGY_STREAM_BASE | t as u64);
            (l, fat, density, generate_topology_with(&params, &mut rng).dag)
        })
        .collect();
    let w = spec.weightings_per_topology;
    let dags: Vec<ServiceDag> = (0..spec.num_dags())
        .into_par_iter()
        .map(|i| {
            let id = i as u64;
            let mut rng = stream_rng(spec.seed, id);
            let mut d = assign_weights_with(&topologies[i / w].3, &spec.ranges, &mut rng);
            d.id = id;
            d
        })
        .collect();

    let splits = split_ids(spec, &topologies);
    let entries = dags
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (l, fat, density, _) = &topologies[i / w];
            ManifestEntry {
                id: d.id,
                file: dag_file_name(d.id),
                num_tasks: *l,
                fat: *fat,
                density: *density,
                topology: i / w,
                weighting: i % w,
                split: splits[i],
            }
        })
        .collect();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (d, s) in dags.into_iter().zip(&splits) {
        match s {
            Split::Train => train.push(d),
            Split::Eval => eval.push(d),
        }
    }
    Ok(Dataset {
        manifest: Manifest {
            spec: spec.clone(),
            entries,
        },
        train,
        eval,
    })
}

/// Per-L stratified split, or the leave-one-L-out partition when a holdout is set.
fn split_ids(spec: &DatasetSpec, topologies: &[(usize, f64, f64, ServiceDag)]) -> Vec<Split> {
    let w = spec.weightings_per_topology;
    let n = spec.num_dags();
    let mut out = vec![Split::Train; n];
    if let Some(h) = spec.holdout_tasks {
        for (i, s) in out.iter_mut().enumerate() {
            if topologies[i / w].0 == h {
                *s = Split::Eval;
            }
        }
        return out;
    }
    let mut by_l: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_l.entry(topologies[i / w].0).or_default().push(i);
    }
    let mut rng = stream_rng(spec.seed, SPLIT_STREAM);
    for ids in by_l.values_mut() {
        ids.shuffle(&mut rng);
        let n_train = ((ids.len() as f64) * spec.train_fraction).round() as usize;
        for &i in &ids[n_train.min(ids.len())..] {
            out[i] = Split::Eval;
        }
    }
    out
}

fn dag_file_name(id: u64) -> String {
    format!("dags/{id:06}.json")
}

/// Generates the dataset and writes `manifest.json` plus one JSON file per DAG.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset, WorkloadError> {
    let ds = generate_dataset(spec)?;
    let dag_dir = out_dir.join("dags");
    fs::create_dir_all(&dag_dir).map_err(io_err(&dag_dir))?;
    ds.train
        .par_iter()
        .chain(ds.eval.par_iter())
        .try_for_each(|d| write_json(&out_dir.join(dag_file_name(d.id)), d))?;
    write_json(&out_dir.join("manifest.json"), &ds.manifest)?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, WorkloadError> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for e in &manifest.entries {
        let d: ServiceDag = read_json(&dir.join(&e.file))?;
        match e.split {
            Split::Train => train.push(d),
            Split::Eval => eval.push(d),
        }
    }
    Ok(Dataset {
        manifest,
        train,
        eval,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkloadError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, value).map_err(|source| WorkloadError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, WorkloadError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| WorkloadError::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::validate_dag;

    #[test]
    fn single_task_topology() {
        for (fat, density) in [(0.4, 0.8), (0.8, 0.0), (1.0, 1.0)] {
            let t = generate_topology(&TopologyParams {
                num_tasks: 1,
                fat,
                density,
                seed: 3,
            });
            assert_eq!(t.dag.tasks.len(), 1);
            assert!(t.dag.edges.is_empty());
        }
    }

    #[test]
    fn clamps_out_of_range_params() {
        let t = generate_topology(&TopologyParams {
            num_tasks: 6,
            fat: 2.0,
            density: 1.5,
            seed: 1,
        });
        assert_eq!(t.warnings.len(), 2);
        assert!(validate_dag(&t.dag).is_ok());
    }

    #[test]
    fn collapsed_range_is_exact() {
        let skel = generate_topology(&TopologyParams {
            num_tasks: 10,
            fat: 0.5,
            density: 0.5,
            seed: 9,
        })
        .dag;
        let mut r = WeightRanges::default();
        r.cycles = Range::new(5e7, 5e7);
        let d = assign_weights(&skel, &r, 4);
        assert!(d.tasks.iter().all(|t| t.cpu_cycles == 5e7));
        assert_eq!(d.edges.len(), skel.edges.len());
    }

    #[test]
    fn default_ranges_bound_samples() {
        let r = WeightRanges::default();
        for seed in 0..20 {
            let skel = generate_topology(&TopologyParams {
                num_tasks: 20,
                fat: 0.6,
                density: 0.6,
                seed,
            })
            .dag;
            let d = assign_weights(&skel, &r, seed);
            for t in &d.tasks {
                assert!(r.cycles.contains(t.cpu_cycles));
                assert!(r.ram_bytes.contains(t.ram_bytes));
                assert!(r.deadline_s.contains(t.deadline_s));
            }
            assert!(d.edges.iter().all(|e| r.edge_bytes.contains(e.data_bytes)));
        }
    }

    #[test]
    fn desk_scale_split_counts() {
        let spec = DatasetSpec {
            task_counts: vec![5, 10],
            fats: vec![0.4, 0.8],
            densities: vec![0.5],
            topologies_per_point: 1,
            weightings_per_topology: 10,
            train_fraction: 0.8,
            ranges: WeightRanges::default(),
            seed: 1,
            holdout_tasks: None,
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len() + ds.eval.len(), 40);
        assert_eq!(ds.train.len(), 32);
        // Stratified: each L contributes 4 eval DAGs.
        let eval_l5 = ds
            .manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Eval && e.num_tasks == 5)
            .count();
        assert_eq!(eval_l5, 4);
    }

    #[test]
    fn full_scale_counts() {
        let spec = DatasetSpec::full_scale(0);
        assert_eq!(spec.num_topologies(), 250);
        assert_eq!(spec.num_dags(), 25_000);
        let n_train = spec.task_counts.len() * 25 * ((100.0 * spec.train_fraction) as usize);
        assert_eq!(n_train, 20_000);
    }

    #[test]
    fn rejects_bad_fraction() {
        let mut spec = DatasetSpec::full_scale(0);
        spec.train_fraction = 1.0;
        assert!(matches!(generate_dataset(&spec), Err(WorkloadError::InvalidSpec(_))));
    }
}
