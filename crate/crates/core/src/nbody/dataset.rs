use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::GeometricGraph;
use crate::rng;
use crate::tensor::Tensor;

use super::simulate::{simulate, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub particles: usize,
    /// Frame used as model input.
    pub input_frame: usize,
    /// Frames between input and target.
    pub delta_t: usize,
    pub dt: f64,
    pub substeps: usize,
    pub softening: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 1000,
            val: 200,
            test: 200,
            particles: 30,
            input_frame: 30,
            delta_t: 10,
            dt: 1e-3,
            substeps: 10,
            softening: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            particles: self.particles,
            frames: self.input_frame + self.delta_t + 1,
            dt: self.dt,
            substeps: self.substeps,
            softening: self.softening,
        }
    }
}

/// One supervision unit: the input graph at frame `t` and the positions at
/// frame `t + delta_t`, with the same node order.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: GeometricGraph,
    pub target: Tensor,
    pub charges: Vec<f64>,
    pub delta_t: usize,
    /// Seed of the trajectory this pair was cut from.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seed of trajectory `k` (numbered across all splits). `mix64` is a
/// bijection, so distinct `k` never share a seed.
pub fn trajectory_seed(base: u64, k: u64) -> u64 {
    rng::mix64(base.wrapping_add(k))
}

/// One-hot of the charge sign: `[1, 0]` for positive, `[0, 1]` otherwise.
pub fn charge_features(charges: &[f64]) -> Tensor {
    let rows: Vec<[f64; 2]> = charges
        .iter()
        .map(|&c| if c > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    Tensor::new(charges.len(), 2, rows.concat()).expect("sized")
}

/// Fully connected graph with one-hot charge features and `e_ij = c_i c_j`.
pub fn charged_graph(positions: Tensor, velocities: Tensor, charges: &[f64]) -> Result<GeometricGraph> {
    let n = charges.len();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    let mut attr = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push((i, j));
                attr.push(charges[i] * charges[j]);
            }
        }
    }
    let e = edges.len();
    GeometricGraph::new(
        positions,
        velocities,
        charge_features(charges),
        edges,
        Tensor::new(e, 1, attr)?,
    )
}

fn make_pair(cfg: &DatasetConfig, seed: u64) -> Result<SamplePair> {
    let traj = simulate(&cfg.sim_config(), seed)?;
    let t = cfg.input_frame;
    let input = charged_graph(
        traj.positions[t].clone(),
        traj.velocities[t].clone(),
        &traj.charges,
    )?;
    Ok(SamplePair {
        input,
        target: traj.positions[t + cfg.delta_t].clone(),
        charges: traj.charges,
        delta_t: cfg.delta_t,
        seed,
    })
}

/// Simulates one independent trajectory per sample, in parallel.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.sim_config().validate()?;
    if cfg.train == 0 {
        return Err(Error::invalid("the training split must not be empty"));
    }
    let build = |offset: usize, count: usize| -> Result<Vec<SamplePair>> {
        (offset..offset + count)
            .into_par_iter()
            .map(|k| make_pair(cfg, trajectory_seed(cfg.seed, k as u64)))
            .collect()
    };
    Ok(Dataset {
        config: cfg.clone(),
        train: build(0, cfg.train)?,
        val: build(cfg.train, cfg.val)?,
        test: build(cfg.train + cfg.val, cfg.test)?,
    })
}
