//! Position MSE, the truncated RBF-kernel MMD between virtual and real
//! coordinates, and their weighted sum.
//!
//! The MMD omits the real-real kernel term, which does not depend on the
//! virtual coordinates. Its values are therefore not a true squared MMD and
//! can be negative.

use std::sync::Arc;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::sq_distance;
use crate::model::ForwardOutput;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    /// Weight of the MMD term.
    pub mmd_weight: f64,
    /// RBF bandwidth, in position units.
    pub bandwidth: f64,
    /// Ground-truth rows sampled for the MMD each step.
    pub mmd_samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mmd_weight: 0.03,
            bandwidth: 1.5,
            mmd_samples: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mmd_weight >= 0.0) {
            return Err(Error::invalid("MMD weight must be non-negative"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid("MMD bandwidth must be positive"));
        }
        if self.mmd_samples == 0 {
            return Err(Error::invalid("MMD needs at least one sampled node"));
        }
        Ok(())
    }
}

/// `exp(-|x - y|^2 / (2 sigma^2))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    (-sq_distance(x, y) / (2.0 * sigma * sigma)).exp()
}

/// Mean of the squared error over all `3N` entries.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let diff = pred.sub(target)?;
    if diff.is_empty() {
        return Err(Error::invalid("MSE of an empty prediction"));
    }
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Truncated MMD between virtual rows `z` (`C x 3`) and reference rows
/// `x_ref` (`Ns x 3`).
pub fn mmd(z: &Tensor, x_ref: &Tensor, sigma: f64) -> Result<f64> {
    let (c, ns) = (z.rows(), x_ref.rows());
    if c == 0 || ns == 0 {
        return Err(Error::invalid("MMD needs at least one virtual and one real row"));
    }
    let mut zz = 0.0;
    for a in 0..c {
        for b in 0..c {
            zz += rbf_kernel(z.row(a), z.row(b), sigma);
        }
    }
    let mut xz = 0.0;
    for i in 0..ns {
        for a in 0..c {
            xz += rbf_kernel(x_ref.row(i), z.row(a), sigma);
        }
    }
    Ok(zz / (c * c) as f64 - xz / (ns * c) as f64)
}

/// Sum of squared errors against a constant target.
pub fn sum_squared_error(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum_all(sq)
}

pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let entries = target.len();
    if entries == 0 {
        return Err(Error::invalid("MSE of an empty prediction"));
    }
    let sse = sum_squared_error(tape, pred, target)?;
    tape.scale(sse, 1.0 / entries as f64)
}

fn kernel_mean(tape: &mut Tape, a: Var, ia: Vec<usize>, b: Var, ib: Vec<usize>, sigma: f64) -> Result<Var> {
    let pairs = ia.len();
    let ra = tape.gather_rows(a, Arc::from(ia))?;
    let rb = tape.gather_rows(b, Arc::from(ib))?;
    let d = tape.sub(ra, rb)?;
    let d2 = tape.row_sqnorm(d)?;
    let arg = tape.scale(d2, -1.0 / (2.0 * sigma * sigma))?;
    let k = tape.exp(arg)?;
    let total = tape.sum_all(k)?;
    tape.scale(total, 1.0 / pairs as f64)
}

/// Tape version of [`mmd`]; gradients flow into `z` only.
pub fn mmd_loss(tape: &mut Tape, z: Var, x_ref: &Tensor, sigma: f64) -> Result<Var> {
    let c = tape.shape(z)[0];
    let ns = x_ref.rows();
    if c == 0 || ns == 0 {
        return Err(Error::invalid("MMD needs at least one virtual and one real row"));
    }
    let (za, zb): (Vec<usize>, Vec<usize>) = (0..c * c).map(|p| (p / c, p % c)).unzip();
    let spread = kernel_mean(tape, z, za, z, zb, sigma)?;
    let x = tape.constant(x_ref.clone())?;
    let (xi, zj): (Vec<usize>, Vec<usize>) = (0..ns * c).map(|p| (p / c, p % c)).unzip();
    let coverage = kernel_mean(tape, x, xi, z, zj, sigma)?;
    tape.sub(spread, coverage)
}

/// `min(k, n)` distinct indices drawn uniformly from `0..n`, ascending.
pub fn sample_rows(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng(seed);
    let mut picked = rand::seq::index::sample(&mut r, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

/// The pieces of a training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mse: Var,
    pub mmd: Option<Var>,
}

/// `MSE + weight * MMD(Z, sampled target rows)`. The weighted MMD is left
/// out entirely when the weight is 0 or there is no virtual set.
pub fn weighted_objective(
    tape: &mut Tape,
    mse_part: Var,
    virtual_z: Option<Var>,
    target: &Tensor,
    cfg: &LossConfig,
    weight: f64,
    sampler_seed: u64,
) -> Result<LossParts> {
    let mmd = match virtual_z {
        Some(z) if weight > 0.0 && target.rows() > 0 => {
            let rows = sample_rows(target.rows(), cfg.mmd_samples, sampler_seed);
            let reference = target.gather_rows(&rows)?;
            Some(mmd_loss(tape, z, &reference, cfg.bandwidth)?)
        }
        _ => None,
    };
    let total = match mmd {
        Some(m) => {
            let weighted = tape.scale(m, weight)?;
            tape.add(mse_part, weighted)?
        }
        None => mse_part,
    };
    Ok(LossParts {
        total,
        mse: mse_part,
        mmd,
    })
}

/// Single-worker objective `MSE(X^L, X_gt) + lambda * MMD(Z^L, sample of X_gt)`.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    target: &Tensor,
    cfg: &LossConfig,
    sampler_seed: u64,
) -> Result<LossParts> {
    let mse_part = mse_loss(tape, out.positions, target)?;
    let z = out.virtual_set.map(|(z, _)| z);
    weighted_objective(tape, mse_part, z, target, cfg, cfg.mmd_weight, sampler_seed)
}
