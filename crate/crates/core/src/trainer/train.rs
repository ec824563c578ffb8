use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::dist::{
    adjust_cutoff, build_local_graph, dist_forward, dist_loss, make_group, partition, replica_fingerprint,
    run_group, verify_replicas, Collective, LocalEdges, PartitionKind, RoundKind, Transport, TransportCounters,
    WorkerView,
};
use crate::error::{Error, Result};
use crate::geometry::{drop_longest_edges, radius_graph, GeometricGraph};
use crate::losses::{total_loss, LossConfig};
use crate::model::{Model, ModelConfig, VirtualSet};
use crate::nbody::SamplePair;
use crate::rng;
use crate::tensor::Tensor;

use super::adam::{adam_step, AdamConfig, AdamState};

/// A mean batch loss above this aborts training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    /// Validate every this many epochs (and after the last one).
    pub eval_period: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2500,
            patience: 200,
            batch_size: 16,
            eval_period: 1,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_period == 0 {
            return Err(Error::invalid("epochs, batch size and eval period must be positive"));
        }
        if self.patience > self.epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds the epoch budget {}",
                self.patience, self.epochs
            )));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

/// Options for training one graph across several workers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistConfig {
    pub devices: usize,
    pub partition: PartitionKind,
    pub radius_mode: RadiusMode,
    /// Local cutoff. Without one, workers keep the sample edges among their
    /// own nodes.
    pub radius: Option<f64>,
    pub transport: Transport,
}

impl Default for DistConfig {
    fn default() -> Self {
        Self {
            devices: 1,
            partition: PartitionKind::Random,
            radius_mode: RadiusMode::Fixed,
            radius: None,
            transport: Transport::Inproc,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    #[default]
    Fixed,
    /// Grow the cutoff per sample until the local edge total matches the
    /// single-worker count at the configured radius.
    Dynamic,
}

impl std::str::FromStr for RadiusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::invalid(format!("unknown radius mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RadiusMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Dynamic => "dynamic",
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample objective over the epoch.
    pub train_loss: f64,
    /// `None` on epochs without validation.
    pub val_mse: Option<f64>,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transport: Option<TransportCounters>,
}

impl EpochMetrics {
    /// Equal up to wall-clock fields.
    pub fn same_run(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_mse.map(f64::to_bits) == other.val_mse.map(f64::to_bits)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters from the epoch with the lowest validation MSE.
    pub params: ParamStore,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

pub type EpochSink<'a> = dyn FnMut(&EpochMetrics) -> Result<()> + Send + 'a;

const TAG_INIT: u64 = 0x696e_6974;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_SAMPLER: u64 = 0x6d6d_6473;
const TAG_PARTITION: u64 = 0x7061_7274;

pub fn init_seed(seed: u64) -> u64 {
    rng::derive(seed, TAG_INIT)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive(rng::derive(seed, TAG_SHUFFLE), epoch as u64)));
    order
}

fn sampler_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    rng::derive(rng::derive(rng::derive(seed, TAG_SAMPLER), epoch as u64), sample as u64)
}

/// Seed of the partition of training sample `sample`; fixed for the run.
pub fn partition_seed(seed: u64, sample: usize) -> u64 {
    rng::derive(rng::derive(seed, TAG_PARTITION), sample as u64)
}

/// `sum (pred - target)^2 / (3 * total_nodes)`; summed over workers it is
/// the global position MSE.
fn scaled_sse(pred: &Tensor, target: &Tensor, total_nodes: usize) -> f64 {
    let sse: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    sse / (3 * total_nodes) as f64
}

/// What the epoch loop needs from a single- or multi-worker backend.
trait Engine {
    /// Takes one optimizer step; returns the summed objective of the batch.
    fn train_batch(&mut self, epoch: usize, batch: &[usize]) -> Result<f64>;
    fn validate(&mut self) -> Result<f64>;
    fn params(&self) -> &ParamStore;
    fn transport_since_last(&mut self) -> Option<TransportCounters>;
}

fn drive(
    engine: &mut dyn Engine,
    cfg: &TrainConfig,
    n_train: usize,
    sink: &mut EpochSink<'_>,
) -> Result<TrainOutput> {
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for batch in epoch_order(n_train, cfg.seed, epoch).chunks(cfg.batch_size) {
            let batch_sum = engine.train_batch(epoch, batch)?;
            let mean = batch_sum / batch.len() as f64;
            if !mean.is_finite() || mean > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch, loss: mean });
            }
            loss_sum += batch_sum;
        }
        let validate = epoch % cfg.eval_period == 0 || epoch == cfg.epochs;
        let val_mse = if validate { Some(engine.validate()?) } else { None };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
            transport: engine.transport_since_last(),
        };
        sink(&metrics)?;
        history.push(metrics);
        if let Some(v) = val_mse {
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((epoch, v, engine.params().clone()));
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
            if epoch - best_epoch >= cfg.patience && epoch < cfg.epochs {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_mse, params) = best.ok_or_else(|| Error::invalid("no validation was run"))?;
    Ok(TrainOutput {
        params,
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}

/// An input graph with the model's edge dropping applied, and its target.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub graph: GeometricGraph,
    pub target: Tensor,
}

pub fn prepare(pairs: &[SamplePair], drop_rate: f64) -> Result<Vec<PreparedSample>> {
    pairs
        .par_iter()
        .map(|p| {
            Ok(PreparedSample {
                graph: drop_longest_edges(&p.input, drop_rate)?,
                target: p.target.clone(),
            })
        })
        .collect()
}

fn check_splits(train: &[SamplePair], val: &[SamplePair]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs nonempty train and validation splits"));
    }
    Ok(())
}

struct LocalEngine<'a> {
    model: &'a Model,
    store: ParamStore,
    adam: AdamState,
    train: Vec<PreparedSample>,
    val: Vec<PreparedSample>,
    loss: LossConfig,
    seed: u64,
}

impl Engine for LocalEngine<'_> {
    fn train_batch(&mut self, epoch: usize, batch: &[usize]) -> Result<f64> {
        let (model, store, loss, seed) = (self.model, &self.store, &self.loss, self.seed);
        let train = &self.train;
        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|&i| {
                let s = &train[i];
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, store, &s.graph)?;
                let parts = total_loss(&mut tape, &out, &s.target, loss, sampler_seed(seed, epoch, i))?;
                let value = tape.value(parts.total).item()?;
                Ok((value, tape.backward(parts.total)?))
            })
            .collect();
        self.store.zero_grads();
        let mut sum = 0.0;
        for r in results {
            let (value, grads) = r?;
            sum += value;
            self.store.accumulate(&grads)?;
        }
        self.store.scale_grads(1.0 / batch.len() as f64);
        adam_step(&mut self.store, &mut self.adam)?;
        Ok(sum)
    }

    fn validate(&mut self) -> Result<f64> {
        let (model, store) = (self.model, &self.store);
        let parts: Vec<Result<f64>> = self
            .val
            .par_iter()
            .map(|s| {
                let pred = model.predict(store, &s.graph)?;
                Ok(scaled_sse(&pred.positions, &s.target, s.graph.num_nodes()))
            })
            .collect();
        let mut sum = 0.0;
        for p in parts {
            sum += p?;
        }
        Ok(sum / self.val.len() as f64)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn transport_since_last(&mut self) -> Option<TransportCounters> {
        None
    }
}

/// Single-worker training. Per-sample gradients within a batch run in
/// parallel and are summed in sample order.
pub fn train(
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut EpochSink<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_splits(train_pairs, val_pairs)?;
    let model = Model::new(model_cfg.clone())?;
    let store = model.init_params(init_seed(cfg.seed));
    let adam = AdamState::new(&store, cfg.adam.clone())?;
    let mut engine = LocalEngine {
        model: &model,
        store,
        adam,
        train: prepare(train_pairs, model_cfg.drop_rate)?,
        val: prepare(val_pairs, model_cfg.drop_rate)?,
        loss: cfg.loss.clone(),
        seed: cfg.seed,
    };
    drive(&mut engine, cfg, train_pairs.len(), sink)
}

/// One device's share of a sample.
#[derive(Clone, Debug)]
pub struct DeviceSample {
    pub view: WorkerView,
    pub local_target: Tensor,
}

/// Splits `pair` for `device`. Every device derives the same partition and
/// cutoff from the same inputs.
pub fn device_sample(
    pair: &SamplePair,
    drop_rate: f64,
    dist: &DistConfig,
    part_seed: u64,
    device: usize,
) -> Result<DeviceSample> {
    let g = &pair.input;
    let part = partition(dist.partition, &g.positions, dist.devices, part_seed)?;
    let radius_view = |r: f64| -> Result<WorkerView> {
        let mut v = build_local_graph(g, &part, device, LocalEdges::Radius(r))?;
        v.graph = drop_longest_edges(&v.graph, drop_rate)?;
        Ok(v)
    };
    let view = match (dist.radius_mode, dist.radius) {
        (RadiusMode::Fixed, None) => {
            build_local_graph(&drop_longest_edges(g, drop_rate)?, &part, device, LocalEdges::Induced)?
        }
        (RadiusMode::Fixed, Some(r)) => radius_view(r)?,
        (RadiusMode::Dynamic, Some(r0)) => {
            let target = radius_graph(&g.positions, r0)?.len();
            radius_view(adjust_cutoff(&g.positions, &part, r0, target)?.radius)?
        }
        (RadiusMode::Dynamic, None) => {
            return Err(Error::invalid("dynamic radius mode needs an initial radius"));
        }
    };
    let local_target = view.local_rows(&pair.target)?;
    Ok(DeviceSample { view, local_target })
}

struct DistEngine<'a> {
    model: &'a Model,
    comm: Arc<dyn Collective>,
    store: ParamStore,
    adam: AdamState,
    train: Vec<DeviceSample>,
    val: Vec<DeviceSample>,
    loss: LossConfig,
    seed: u64,
    last_counters: TransportCounters,
}

impl Engine for DistEngine<'_> {
    fn train_batch(&mut self, epoch: usize, batch: &[usize]) -> Result<f64> {
        self.store.zero_grads();
        let mut local_sum = 0.0;
        for &i in batch {
            let s = &self.train[i];
            let mut tape = Tape::new();
            let out = dist_forward(self.model, &mut tape, &self.store, &s.view, &self.comm)?;
            let parts = dist_loss(&mut tape, &out, &s.view, &s.local_target, &self.loss, sampler_seed(self.seed, epoch, i))?;
            local_sum += tape.value(parts.total).item()?;
            let grads = tape.backward(parts.total)?;
            self.store.accumulate(&grads)?;
        }
        // Gradients and the batch loss travel in the same round.
        let mut flat = self.store.flat_grads();
        let n = flat.len();
        flat.push(local_sum);
        let summed = self.comm.all_reduce_sum(&Tensor::new(1, n + 1, flat)?, RoundKind::GradSync)?;
        self.store.set_flat_grads(&summed.data()[..n])?;
        self.store.scale_grads(1.0 / batch.len() as f64);
        adam_step(&mut self.store, &mut self.adam)?;
        Ok(summed.data()[n])
    }

    fn validate(&mut self) -> Result<f64> {
        let mut local = 0.0;
        for s in &self.val {
            let mut tape = Tape::inference();
            let out = dist_forward(self.model, &mut tape, &self.store, &s.view, &self.comm)?;
            local += scaled_sse(tape.value(out.positions), &s.local_target, s.view.total_nodes);
        }
        let total = self.comm.all_reduce_sum(&Tensor::scalar(local), RoundKind::Control)?;
        Ok(total.item()? / self.val.len() as f64)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn transport_since_last(&mut self) -> Option<TransportCounters> {
        let now = self.comm.counters();
        let delta = now.since(&self.last_counters);
        self.last_counters = now;
        Some(delta)
    }
}

#[derive(Clone, Debug)]
pub struct DistTrainOutput {
    /// Device 0's result; every device holds the same.
    pub output: TrainOutput,
    /// Final (not best) parameters of every device.
    pub replicas: Vec<ParamStore>,
    /// Every device's `(Z, S)` for the first training sample under the
    /// final parameters.
    pub virtual_sets: Vec<Option<VirtualSet>>,
    pub counters: Vec<TransportCounters>,
}

/// Data-parallel training over one partitioned graph per sample. Each
/// device runs the whole loop on its own replica; gradients are summed in
/// one round per optimizer step. Only device 0 reports epochs to `sink`.
pub fn dist_train(
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dist: &DistConfig,
    sink: &mut EpochSink<'_>,
) -> Result<DistTrainOutput> {
    cfg.validate()?;
    check_splits(train_pairs, val_pairs)?;
    let model = Model::new(model_cfg.clone())?;
    let init = model.init_params(init_seed(cfg.seed));
    let comms = make_group(dist.transport, dist.devices)?;
    let sink = Mutex::new(sink);
    let split = |pairs: &[SamplePair], device: usize, salt: u64| -> Result<Vec<DeviceSample>> {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| device_sample(p, model_cfg.drop_rate, dist, partition_seed(cfg.seed ^ salt, i), device))
            .collect()
    };
    let results = run_group(&comms, |comm| {
        let device = comm.device();
        let mut engine = DistEngine {
            model: &model,
            comm: comm.clone(),
            store: init.clone(),
            adam: AdamState::new(&init, cfg.adam.clone())?,
            train: split(train_pairs, device, 0)?,
            val: split(val_pairs, device, 1)?,
            loss: cfg.loss.clone(),
            seed: cfg.seed,
            last_counters: comm.counters(),
        };
        let output = if device == 0 {
            let mut guard = sink.lock().unwrap();
            drive(&mut engine, cfg, train_pairs.len(), &mut **guard)?
        } else {
            drive(&mut engine, cfg, train_pairs.len(), &mut |_| Ok(()))?
        };
        let mut tape = Tape::inference();
        let out = dist_forward(&model, &mut tape, &engine.store, &engine.train[0].view, comm)?;
        let virtual_set = out.read(&tape).virtual_set;
        let extra: Vec<&Tensor> = virtual_set.iter().flat_map(|v| [&v.z, &v.s]).collect();
        verify_replicas(comm.as_ref(), replica_fingerprint(&engine.store, &extra))?;
        Ok((output, engine.store, virtual_set, comm.counters()))
    })?;
    let mut replicas = Vec::new();
    let mut virtual_sets = Vec::new();
    let mut counters = Vec::new();
    let mut first = None;
    for (output, store, vs, c) in results {
        first.get_or_insert(output);
        replicas.push(store);
        virtual_sets.push(vs);
        counters.push(c);
    }
    Ok(DistTrainOutput {
        output: first.expect("at least one device"),
        replicas,
        virtual_sets,
        counters,
    })
}
