use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub particles: usize,
    /// Recorded frames, including the initial state.
    pub frames: usize,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps between recorded frames.
    pub substeps: usize,
    pub softening: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            particles: 30,
            frames: 41,
            dt: 1e-3,
            substeps: 10,
            softening: 0.1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::invalid("a charged system needs at least two particles"));
        }
        if !(self.softening > 0.0) {
            return Err(Error::invalid("softening must be positive"));
        }
        if !(self.dt > 0.0) || self.substeps == 0 || self.frames == 0 {
            return Err(Error::invalid("dt, substeps and frames must be positive"));
        }
        Ok(())
    }
}

/// Recorded states of one simulation; frame 0 is the initial condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub charges: Vec<f64>,
    pub positions: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
}

/// Unit masses, so accelerations equal forces:
/// `F_i = sum_j c_i c_j (x_i - x_j) / (|x_i - x_j|^2 + eps^2)^(3/2)`.
/// Each pair is evaluated once and applied with opposite signs.
pub fn forces(charges: &[f64], x: &[[f64; 3]], softening: f64) -> Vec<[f64; 3]> {
    let n = x.len();
    let eps2 = softening * softening;
    let mut f = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = [x[i][0] - x[j][0], x[i][1] - x[j][1], x[i][2] - x[j][2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps2;
            let s = charges[i] * charges[j] / (r2 * r2.sqrt());
            for k in 0..3 {
                f[i][k] += s * d[k];
                f[j][k] -= s * d[k];
            }
        }
    }
    f
}

fn to_tensor(rows: &[[f64; 3]]) -> Tensor {
    Tensor::from_rows(rows).expect("rows of three")
}

/// Kick-drift-kick leapfrog from the given initial state.
pub fn simulate_from(
    charges: &[f64],
    positions: &Tensor,
    velocities: &Tensor,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = charges.len();
    if positions.shape() != [n, 3] || velocities.shape() != [n, 3] {
        return Err(Error::invalid("initial state must be N x 3 for N charges"));
    }
    let read = |t: &Tensor| -> Vec<[f64; 3]> {
        (0..n).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect()
    };
    let mut x = read(positions);
    let mut v = read(velocities);
    let mut out = Trajectory {
        charges: charges.to_vec(),
        positions: vec![to_tensor(&x)],
        velocities: vec![to_tensor(&v)],
    };
    let half = 0.5 * cfg.dt;
    let mut a = forces(charges, &x, cfg.softening);
    for _ in 1..cfg.frames {
        for _ in 0..cfg.substeps {
            for i in 0..n {
                for k in 0..3 {
                    v[i][k] += half * a[i][k];
                    x[i][k] += cfg.dt * v[i][k];
                }
            }
            a = forces(charges, &x, cfg.softening);
            for i in 0..n {
                for k in 0..3 {
                    v[i][k] += half * a[i][k];
                }
            }
        }
        let (xt, vt) = (to_tensor(&x), to_tensor(&v));
        if !xt.is_finite() || !vt.is_finite() {
            return Err(Error::NonFinite { op: "simulate" });
        }
        out.positions.push(xt);
        out.velocities.push(vt);
    }
    Ok(out)
}

/// Random charges (uniform +-1), positions ~ N(0, 1), velocities ~ N(0, 0.5).
pub fn random_initial_state(particles: usize, seed: u64) -> (Vec<f64>, Tensor, Tensor) {
    let mut r = rng::rng(seed);
    let pos = Normal::new(0.0, 1.0).expect("valid");
    let vel = Normal::new(0.0, 0.5).expect("valid");
    let charges = (0..particles)
        .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let x = (0..particles * 3).map(|_| pos.sample(&mut r)).collect();
    let v = (0..particles * 3).map(|_| vel.sample(&mut r)).collect();
    (
        charges,
        Tensor::new(particles, 3, x).expect("sized"),
        Tensor::new(particles, 3, v).expect("sized"),
    )
}

pub fn simulate(cfg: &SimConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let (charges, x, v) = random_initial_state(cfg.particles, seed);
    simulate_from(&charges, &x, &v, cfg)
}

/// Sum of velocities (unit masses).
pub fn total_momentum(velocities: &Tensor) -> [f64; 3] {
    let s = velocities.sum_rows();
    [s.data()[0], s.data()[1], s.data()[2]]
}
