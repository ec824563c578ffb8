//! Self-checks runnable from a release build: E(3) equivariance, gradients
//! against finite differences, distributed gradients against the
//! single-process objective, and invariance of the MMD penalty.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::Serialize;
use vegn::autodiff::{grad_check, GradCheckOptions, OpKind};
use vegn::dist::{build_views, dist_pass, oracle_gradient, partition_random, union_graph, LocalEdges, Transport};
use vegn::geometry::{apply_transform, drop_longest_edges, random_rotation, GeometricGraph};
use vegn::losses::{mmd, total_loss, LossConfig};
use vegn::model::{Backbone, Model, ModelConfig};
use vegn::nbody::synthetic_cloud;
use vegn::{rng, Tensor};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Equivariance,
    Gradcheck,
    DistOracle,
    Mmd,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(match s {
            "all" => Suite::All,
            "equivariance" => Suite::Equivariance,
            "gradcheck" => Suite::Gradcheck,
            "dist-oracle" => Suite::DistOracle,
            "mmd" => Suite::Mmd,
            other => return Err(CliError::Usage(format!("unknown suite `{other}`"))),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::All => "all",
            Suite::Equivariance => "equivariance",
            Suite::Gradcheck => "gradcheck",
            Suite::DistOracle => "dist-oracle",
            Suite::Mmd => "mmd",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub tolerance: Option<f64>,
    pub negative_control: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub case: String,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub tolerance: f64,
    pub max_error: f64,
    pub passed: bool,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    fn new(suite: Suite, tolerance: f64, rows: Vec<CheckRow>) -> Self {
        let max_error = rows.iter().fold(0.0f64, |m, r| if r.error.is_nan() { f64::NAN } else { m.max(r.error) });
        Self {
            suite: suite.to_string(),
            tolerance,
            passed: max_error < tolerance,
            max_error,
            rows,
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!("{} (tolerance {:e})\n", self.suite, self.tolerance);
        let width = self.rows.iter().map(|r| r.case.len()).max().unwrap_or(4);
        for r in &self.rows {
            let mark = if r.error < self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!("  {:<width$}  {:>12.3e}  {mark}\n", r.case, r.error));
        }
        out.push_str(&format!(
            "  max {:e}: {}\n",
            self.max_error,
            if self.passed { "pass" } else { "fail" }
        ));
        out
    }
}

const BACKBONES: [Backbone; 4] = [Backbone::FastEgnn, Backbone::FastRf, Backbone::FastSchnet, Backbone::Egnn];

fn config(backbone: Backbone, layers: usize, hidden: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        backbone,
        layers,
        hidden,
        virtual_channels: if backbone == Backbone::Egnn { 0 } else { channels },
        ..ModelConfig::default()
    }
}

fn cloud(nodes: usize, seed: u64) -> CliResult<(GeometricGraph, Tensor)> {
    let pair = synthetic_cloud(nodes, None, seed)?;
    Ok((pair.input, pair.target))
}

fn permute_graph(g: &GeometricGraph, perm: &[usize]) -> CliResult<GeometricGraph> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    let edges = g.edges.iter().map(|&(i, j)| (inv[i], inv[j])).collect();
    Ok(GeometricGraph::new(
        g.positions.gather_rows(perm)?,
        g.velocities.gather_rows(perm)?,
        g.features.gather_rows(perm)?,
        edges,
        g.edge_attr.clone(),
    )?)
}

fn equivariance(opts: &CheckOptions) -> CliResult<SuiteReport> {
    let mut rows = Vec::new();
    for (b, backbone) in BACKBONES.into_iter().enumerate() {
        let model = Model::new(config(backbone, 3, 16, 3))?;
        let store = model.init_params(opts.seed);
        let (g, _) = cloud(16, rng::derive(opts.seed, b as u64))?;
        let g = drop_longest_edges(&g, 0.25)?;
        let base = model.predict(&store, &g)?;
        for k in 0..5u64 {
            let t = random_rotation(rng::derive(opts.seed ^ 0xe3, k), true, 10.0);
            let out = model.predict(&store, &apply_transform(&g, &t))?;
            let mut expected = t.clone();
            if opts.negative_control {
                for row in &mut expected.rotation {
                    row[2] = -row[2];
                }
            }
            let mut err = out.positions.max_abs_diff(&expected.apply_points(&base.positions));
            if let (Some(a), Some(z)) = (&out.virtual_set, &base.virtual_set) {
                err = err.max(a.z.max_abs_diff(&expected.apply_points(&z.z)));
                err = err.max(a.s.max_abs_diff(&z.s));
            }
            rows.push(CheckRow {
                case: format!("{backbone} transform {k} (det {:+.0})", t.determinant()),
                error: err,
            });
        }
        if let Some(z) = &base.virtual_set {
            let mut r = rng::rng(rng::derive(opts.seed ^ 0x9e, b as u64));
            let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
            perm.shuffle(&mut r);
            let out = model.predict(&store, &permute_graph(&g, &perm)?)?;
            let a = out.virtual_set.as_ref().expect("virtual channels");
            rows.push(CheckRow {
                case: format!("{backbone} node permutation"),
                error: a.z.max_abs_diff(&z.z).max(a.s.max_abs_diff(&z.s)),
            });
        }
    }
    Ok(SuiteReport::new(Suite::Equivariance, opts.tolerance.unwrap_or(1e-9), rows))
}

fn gradcheck(opts: &CheckOptions) -> CliResult<SuiteReport> {
    let tolerance = opts.tolerance.unwrap_or(1e-4);
    let loss_cfg = LossConfig::default();
    let mut rows = Vec::new();
    for (b, backbone) in BACKBONES.into_iter().enumerate() {
        let model = Model::new(config(backbone, 2, 5, 2))?;
        let store = model.init_params(opts.seed);
        let (g, target) = cloud(6, rng::derive(opts.seed, 100 + b as u64))?;
        let report = grad_check(
            &store,
            |tape, s| {
                let out = model.forward(tape, s, &g)?;
                Ok(total_loss(tape, &out, &target, &loss_cfg, opts.seed)?.total)
            },
            &GradCheckOptions {
                tolerance,
                fault: opts.negative_control.then_some(OpKind::MatMul),
                ..GradCheckOptions::default()
            },
        )?;
        rows.push(CheckRow {
            case: format!("{backbone} N=6 C={} L=2", model.config().virtual_channels),
            error: report.max_rel_error,
        });
    }
    Ok(SuiteReport::new(Suite::Gradcheck, tolerance, rows))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale.max(f64::MIN_POSITIVE)
}

fn dist_oracle(opts: &CheckOptions) -> CliResult<SuiteReport> {
    let loss_cfg = LossConfig::default();
    let mut rows = Vec::new();
    for devices in [2, 4] {
        for channels in [1, 3] {
            let n = 12;
            let seed = rng::derive(opts.seed, (devices * 10 + channels) as u64);
            let model = Model::new(config(Backbone::FastEgnn, 2, 8, channels))?;
            let store = model.init_params(seed);
            let (g, target) = cloud(n, seed)?;
            let g = drop_longest_edges(&g, 0.5)?;
            let part = partition_random(n, devices, seed)?;
            let pass = dist_pass(
                &model,
                &store,
                &g,
                &target,
                &part,
                LocalEdges::Induced,
                &loss_cfg,
                seed,
                Transport::Inproc,
            )?;
            let mut grads = pass.grads;
            if opts.negative_control {
                grads[0] = -grads[0];
            }
            let union = union_graph(&g, &build_views(&g, &part, LocalEdges::Induced)?)?;
            let (_, oracle) = oracle_gradient(&model, &store, &union, &target, &part, &loss_cfg, seed)?;
            let mut err = relative_error(&grads, &oracle);
            if !pass.replicas_identical {
                err = f64::INFINITY;
            }
            rows.push(CheckRow {
                case: format!("D={devices} C={channels} L=2 N={n}"),
                error: err,
            });
        }
    }
    Ok(SuiteReport::new(Suite::DistOracle, opts.tolerance.unwrap_or(1e-8), rows))
}

fn mmd_invariance(opts: &CheckOptions) -> CliResult<SuiteReport> {
    let mut rows = Vec::new();
    for k in 0..10u64 {
        let (z, _) = cloud(3, rng::derive(opts.seed ^ 0x33, k))?;
        let (x, _) = cloud(8, rng::derive(opts.seed ^ 0x88, k))?;
        let t = random_rotation(rng::derive(opts.seed ^ 0x77, k), true, 5.0);
        let base = mmd(&z.positions, &x.positions, 1.5)?;
        let moved_z = if opts.negative_control {
            z.positions.clone()
        } else {
            t.apply_points(&z.positions)
        };
        let moved = mmd(&moved_z, &t.apply_points(&x.positions), 1.5)?;
        rows.push(CheckRow {
            case: format!("transform {k}"),
            error: (moved - base).abs(),
        });
    }
    Ok(SuiteReport::new(Suite::Mmd, opts.tolerance.unwrap_or(1e-12), rows))
}

pub fn run(suite: Suite, opts: &CheckOptions) -> CliResult<Vec<SuiteReport>> {
    let selected: Vec<Suite> = match suite {
        Suite::All => vec![Suite::Equivariance, Suite::Gradcheck, Suite::DistOracle, Suite::Mmd],
        one => vec![one],
    };
    selected
        .into_iter()
        .map(|s| match s {
            Suite::Equivariance => equivariance(opts),
            Suite::Gradcheck => gradcheck(opts),
            Suite::DistOracle => dist_oracle(opts),
            Suite::Mmd => mmd_invariance(opts),
            Suite::All => unreachable!(),
        })
        .collect()
}
