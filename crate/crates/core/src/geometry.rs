//! Geometric graphs, E(3) transforms, radius graphs and edge dropping.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One sample: node coordinates, velocities and features plus directed,
/// attributed edges. Row `k` of `edge_attr` belongs to `edges[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricGraph {
    pub positions: Tensor,
    pub velocities: Tensor,
    pub features: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub edge_attr: Tensor,
}

impl GeometricGraph {
    pub fn new(
        positions: Tensor,
        velocities: Tensor,
        features: Tensor,
        edges: Vec<(usize, usize)>,
        edge_attr: Tensor,
    ) -> Result<Self> {
        let g = Self {
            positions,
            velocities,
            features,
            edges,
            edge_attr,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.positions.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn edge_attr_dim(&self) -> usize {
        self.edge_attr.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.positions.cols() != 3 || self.velocities.shape() != [n, 3] {
            return Err(Error::invalid(format!(
                "positions {:?} and velocities {:?} must both be N x 3",
                self.positions.shape(),
                self.velocities.shape()
            )));
        }
        if self.features.rows() != n {
            return Err(Error::invalid(format!(
                "{} feature rows for {n} nodes",
                self.features.rows()
            )));
        }
        if self.edge_attr.rows() != self.edges.len() {
            return Err(Error::invalid(format!(
                "{} edge attribute rows for {} edges",
                self.edge_attr.rows(),
                self.edges.len()
            )));
        }
        for &(i, j) in &self.edges {
            if i == j || i >= n || j >= n {
                return Err(Error::invalid(format!("bad edge ({i}, {j}) for {n} nodes")));
            }
        }
        if !self.positions.is_finite() || !self.velocities.is_finite() {
            return Err(Error::NonFinite { op: "graph" });
        }
        Ok(())
    }

    /// Euclidean length of every edge.
    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(i, j)| distance(self.positions.row(i), self.positions.row(j)))
            .collect()
    }

    /// Same nodes, restricted to the edges at `keep` (in that order).
    pub fn with_edge_subset(&self, keep: &[usize]) -> Self {
        let edges = keep.iter().map(|&k| self.edges[k]).collect();
        let edge_attr = self.edge_attr.gather_rows(keep).expect("indices in range");
        Self {
            edges,
            edge_attr,
            ..self.clone()
        }
    }
}

pub(crate) fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    sq_distance(a, b).sqrt()
}

/// Arithmetic mean of the rows of an `N x 3` matrix.
pub fn center_of_mass(positions: &Tensor) -> Result<[f64; 3]> {
    if positions.rows() == 0 {
        return Err(Error::invalid("center of mass of an empty point set"));
    }
    let m = positions.mean_rows()?;
    Ok([m.data()[0], m.data()[1], m.data()[2]])
}

/// Directed edges `(i, j)` with `0 < |x_i - x_j| <= r`, ascending by `(i, j)`.
pub fn radius_graph(positions: &Tensor, r: f64) -> Result<Vec<(usize, usize)>> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("cutoff radius must be positive, got {r}")));
    }
    if !positions.is_finite() {
        return Err(Error::NonFinite { op: "radius_graph" });
    }
    let n = positions.rows();
    let r2 = r * r;
    let cell = |p: &[f64]| -> [i64; 3] { [0, 1, 2].map(|k| (p[k] / r).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for i in 0..n {
        grid.entry(cell(positions.row(i))).or_default().push(i);
    }
    let mut edges = Vec::new();
    let mut nbrs = Vec::new();
    for i in 0..n {
        let xi = positions.row(i);
        let c = cell(xi);
        nbrs.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &j in bucket {
                            let d2 = sq_distance(xi, positions.row(j));
                            if j != i && d2 > 0.0 && d2 <= r2 {
                                nbrs.push(j);
                            }
                        }
                    }
                }
            }
        }
        nbrs.sort_unstable();
        edges.extend(nbrs.iter().map(|&j| (i, j)));
    }
    Ok(edges)
}

/// Removes the longest `ceil(p * units)` undirected pairs, where a unit is
/// an unordered pair `{i, j}` together with whichever of its two directions
/// are present. Pairs are ranked by `(length, min, max)`. The surviving
/// edges keep their original order.
pub fn drop_longest_edges(graph: &GeometricGraph, p: f64) -> Result<GeometricGraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("drop rate must lie in [0, 1], got {p}")));
    }
    let lengths = graph.edge_lengths();
    let mut units: HashMap<(usize, usize), f64> = HashMap::new();
    for (k, &(i, j)) in graph.edges.iter().enumerate() {
        units.entry((i.min(j), i.max(j))).or_insert(lengths[k]);
    }
    let mut ranked: Vec<((usize, usize), f64)> = units.into_iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n_drop = (p * ranked.len() as f64).ceil() as usize;
    let kept_units = ranked.len() - n_drop.min(ranked.len());
    let survivors: std::collections::HashSet<(usize, usize)> =
        ranked[..kept_units].iter().map(|u| u.0).collect();
    let keep: Vec<usize> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| survivors.contains(&(i.min(j), i.max(j))))
        .map(|(k, _)| k)
        .collect();
    Ok(graph.with_edge_subset(&keep))
}

/// `x -> x O + t` on row vectors; velocities only see `O`.
#[derive(Clone, Debug, PartialEq)]
pub struct E3Transform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for E3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl E3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.rotation;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `max |O^T O - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let m = &self.rotation;
        let mut err: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][a] * m[k][b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                err = err.max((dot - target).abs());
            }
        }
        err
    }

    pub fn rotation_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.rotation).expect("3x3")
    }

    /// Applies `x O + t` to every row of an `N x 3` matrix.
    pub fn apply_points(&self, points: &Tensor) -> Tensor {
        let mut out = self.apply_vectors(points);
        for r in 0..out.rows() {
            for (v, t) in out.row_mut(r).iter_mut().zip(&self.translation) {
                *v += t;
            }
        }
        out
    }

    /// Applies `v O` to every row of an `N x 3` matrix.
    pub fn apply_vectors(&self, vectors: &Tensor) -> Tensor {
        vectors.matmul(&self.rotation_tensor()).expect("N x 3")
    }
}

/// Uniform rotation from a normalized Gaussian quaternion, optionally
/// composed with an axis flip (probability 1/2), and a translation uniform
/// in `[-t_max, t_max]^3`.
pub fn random_rotation(seed: u64, allow_reflection: bool, t_max: f64) -> E3Transform {
    let mut r = rng::rng(seed);
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut r));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / norm);
    let mut rotation = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    let flip: bool = r.random_bool(0.5);
    if allow_reflection && flip {
        for row in &mut rotation {
            row[0] = -row[0];
        }
    }
    let translation = if t_max > 0.0 {
        std::array::from_fn(|_| r.random_range(-t_max..=t_max))
    } else {
        [0.0; 3]
    };
    E3Transform {
        rotation,
        translation,
    }
}

/// `X -> X O + t`, `V -> V O`; features and edges are untouched.
pub fn apply_transform(graph: &GeometricGraph, g: &E3Transform) -> GeometricGraph {
    GeometricGraph {
        positions: g.apply_points(&graph.positions),
        velocities: g.apply_vectors(&graph.velocities),
        ..graph.clone()
    }
}
