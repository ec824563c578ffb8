//! Charged-particle simulator and the datasets cut from its trajectories.

mod cloud;
mod dataset;
pub mod format;
mod simulate;

pub use cloud::{synthetic_cloud, HORIZON};
pub use dataset::{
    build_dataset, charge_features, charged_graph, trajectory_seed, Dataset, DatasetConfig,
    SamplePair, Split,
};
pub use simulate::{
    forces, random_initial_state, simulate, simulate_from, total_momentum, SimConfig, Trajectory,
};
