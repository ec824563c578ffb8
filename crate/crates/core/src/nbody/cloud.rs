//! Synthetic point clouds for timing and scaling runs. Nodes move
//! ballistically, so targets are cheap to produce at any size.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{radius_graph, GeometricGraph};
use crate::rng;
use crate::tensor::Tensor;

use super::dataset::{charge_features, SamplePair};

/// Horizon of the ballistic target `x + HORIZON * v`.
pub const HORIZON: f64 = 0.1;

/// Uniform positions in the unit cube, standard normal velocities, random
/// unit charges. Edges join every pair closer than `radius`, or all pairs
/// when `radius` is `None`; `e_ij = c_i c_j` as in the simulator data.
pub fn synthetic_cloud(nodes: usize, radius: Option<f64>, seed: u64) -> Result<SamplePair> {
    if nodes < 2 {
        return Err(Error::invalid("a cloud needs at least two nodes"));
    }
    let mut r = rng::rng(seed);
    let x: Vec<f64> = (0..nodes * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let v: Vec<f64> = (0..nodes * 3).map(|_| StandardNormal.sample(&mut r)).collect();
    let charges: Vec<f64> = (0..nodes)
        .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let positions = Tensor::new(nodes, 3, x)?;
    let velocities = Tensor::new(nodes, 3, v)?;
    let edges = match radius {
        Some(rad) => radius_graph(&positions, rad)?,
        None => (0..nodes)
            .flat_map(|i| (0..nodes).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect(),
    };
    let attr: Vec<f64> = edges.iter().map(|&(i, j)| charges[i] * charges[j]).collect();
    let target = positions.add(&velocities.scale(HORIZON))?;
    let e = edges.len();
    let input = GeometricGraph::new(
        positions,
        velocities,
        charge_features(&charges),
        edges,
        Tensor::new(e, 1, attr)?,
    )?;
    Ok(SamplePair {
        input,
        target,
        charges,
        delta_t: 0,
        seed,
    })
}
