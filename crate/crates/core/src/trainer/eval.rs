use std::time::{Duration, Instant};

use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, drop_longest_edges, random_rotation, E3Transform, GeometricGraph};
use crate::losses::mse;
use crate::model::Model;
use crate::nbody::SamplePair;
use crate::rng;
use crate::tensor::Tensor;

use super::train::prepare;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Random transforms per sample; 0 evaluates the untouched inputs.
    pub rotations: usize,
    pub seed: u64,
    pub reflections: bool,
    /// Half-width of the uniform translation; 0 disables translations.
    pub translation: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rotations: 1,
            seed: 0,
            reflections: false,
            translation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mse: f64,
    /// Forward passes only, after one untimed warm-up pass.
    pub seconds: f64,
    pub forwards: usize,
    pub samples: usize,
}

fn transforms(cfg: &EvalConfig, sample: usize) -> Vec<E3Transform> {
    if cfg.rotations == 0 {
        return vec![E3Transform::identity()];
    }
    (0..cfg.rotations)
        .map(|k| {
            let seed = rng::derive(rng::derive(cfg.seed, sample as u64), k as u64);
            random_rotation(seed, cfg.reflections, cfg.translation)
        })
        .collect()
}

/// Mean position MSE over every (sample, transform); each transform moves
/// input and target together.
pub fn evaluate(model: &Model, store: &ParamStore, pairs: &[SamplePair], cfg: &EvalConfig) -> Result<EvalReport> {
    model.check_params(store)?;
    if pairs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let prepared = prepare(pairs, model.config().drop_rate)?;
    model.predict(store, &prepared[0].graph)?;
    let mut elapsed = Duration::ZERO;
    let mut total = 0.0;
    let mut forwards = 0;
    for (i, s) in prepared.iter().enumerate() {
        for t in transforms(cfg, i) {
            let graph = apply_transform(&s.graph, &t);
            let target = t.apply_points(&s.target);
            let start = Instant::now();
            let pred = model.predict(store, &graph)?;
            elapsed += start.elapsed();
            total += mse(&pred.positions, &target)?;
            forwards += 1;
        }
    }
    Ok(EvalReport {
        mse: total / forwards as f64,
        seconds: elapsed.as_secs_f64(),
        forwards,
        samples: pairs.len(),
    })
}

/// Feeds predictions back as inputs `steps` times. Velocities of the next
/// input are finite differences over `interval` time units; with
/// `interval == 0` the input velocities are kept. Edges keep the topology
/// of `pair.input` and are re-dropped by length at every step.
pub fn rollout(model: &Model, store: &ParamStore, pair: &SamplePair, steps: usize, interval: f64) -> Result<Vec<Tensor>> {
    model.check_params(store)?;
    let mut current: GeometricGraph = pair.input.clone();
    let mut frames = Vec::with_capacity(steps);
    for _ in 0..steps {
        let input = drop_longest_edges(&current, model.config().drop_rate)?;
        let next = model.predict(store, &input)?.positions;
        if interval > 0.0 {
            current.velocities = next.sub(&current.positions)?.scale(1.0 / interval);
        }
        current.positions = next.clone();
        current.validate()?;
        frames.push(next);
    }
    Ok(frames)
}
