//! Equivariant message passing with an ordered set of virtual nodes.

mod config;
mod egnn;
pub mod stages;

use std::sync::Arc;

pub use config::{Backbone, ModelConfig, VirtualMessageMode};

use crate::autodiff::{Mlp, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{center_of_mass, GeometricGraph};
use crate::rng;
use crate::tensor::Tensor;

use stages::{EdgeTape, PairIndex, RealUpdate};

/// Init gain of the last layer of every MLP that weights a coordinate
/// difference. With unit gain, squared distances feed back through the
/// stack and outputs grow without bound at depth four.
pub const COORD_GAIN: f64 = 1e-3;

/// Name of the learnable initial virtual features (`F x C`).
pub const VIRTUAL_FEATURES: &str = "virtual.s";

/// Sums a tensor over every worker that holds part of the graph.
pub trait Reducer {
    fn sum(&self, tape: &mut Tape, local: Var) -> Result<Var>;
}

/// The whole graph lives here; sums are already complete.
pub struct LocalReducer;

impl Reducer for LocalReducer {
    fn sum(&self, _tape: &mut Tape, local: Var) -> Result<Var> {
        Ok(local)
    }
}

/// Virtual coordinates (`C x 3`, one channel per row) and features
/// (`C x F`). Channel order is meaningful and never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualSet {
    pub z: Tensor,
    pub s: Tensor,
}

impl VirtualSet {
    pub fn channels(&self) -> usize {
        self.z.rows()
    }
}

/// Every channel starts at the centre of mass; features come from the
/// learned `F x C` matrix.
pub fn init_virtual(positions: &Tensor, channels: usize, learned_s: &Tensor) -> Result<VirtualSet> {
    if channels == 0 {
        return Err(Error::invalid("virtual set needs at least one channel"));
    }
    if learned_s.cols() != channels {
        return Err(Error::Shape {
            op: "init_virtual",
            lhs: learned_s.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    let com = center_of_mass(positions)?;
    let z = Tensor::from_rows(&vec![com; channels])?;
    Ok(VirtualSet {
        z,
        s: learned_s.transpose(),
    })
}

/// Tape handles to a forward pass's outputs.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub positions: Var,
    pub features: Var,
    /// `(z, s)` after the last layer, absent without virtual channels.
    pub virtual_set: Option<(Var, Var)>,
}

/// Forward outputs copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub positions: Tensor,
    pub features: Tensor,
    pub virtual_set: Option<VirtualSet>,
}

impl ForwardOutput {
    pub fn read(&self, tape: &Tape) -> Prediction {
        Prediction {
            positions: tape.value(self.positions).clone(),
            features: tape.value(self.features).clone(),
            virtual_set: self.virtual_set.map(|(z, s)| VirtualSet {
                z: tape.value(z).clone(),
                s: tape.value(s).clone(),
            }),
        }
    }
}

/// The MLPs owned by one layer. Which ones exist depends on the backbone.
#[derive(Clone, Debug)]
pub struct LayerMlps {
    pub edge_message: Option<Mlp>,
    pub edge_filter: Option<Mlp>,
    pub edge_coord: Option<Mlp>,
    pub virtual_message: Option<Mlp>,
    pub virtual_coord: Option<Mlp>,
    pub velocity: Mlp,
    pub node_update: Option<Mlp>,
    pub virtual_position: Option<Mlp>,
    pub virtual_feature: Option<Mlp>,
}

impl LayerMlps {
    fn new(cfg: &ModelConfig, layer: usize) -> Result<Self> {
        let f = cfg.hidden;
        let c = cfg.virtual_channels;
        let e = cfg.edge_attr_dim;
        let feat = cfg.backbone.has_features();
        let fh = if feat { f } else { 0 };
        let name = |role: &str| format!("layer{layer}.{role}");

        let (edge_message, edge_filter, edge_coord) = match cfg.backbone {
            Backbone::Egnn | Backbone::FastEgnn => (
                Some(Mlp::new(name("edge_message"), &[2 * f + 1 + e, f, f])),
                None,
                Mlp::new(name("edge_coord"), &[f, f, 1]).with_output_gain(COORD_GAIN),
            ),
            Backbone::FastRf => (
                Some(Mlp::new(name("edge_message"), &[1, f, f])),
                None,
                Mlp::new(name("edge_coord"), &[f, f, 1]).with_output_gain(COORD_GAIN),
            ),
            Backbone::FastSchnet => (
                None,
                Some(Mlp::new(name("edge_filter"), &[1 + e, f, f])),
                Mlp::new(name("edge_coord"), &[2 * f + e, f, 1]).with_output_gain(COORD_GAIN),
            ),
        };

        let virtual_message = (c > 0).then(|| {
            let width = match cfg.message_mode {
                VirtualMessageMode::PerPair => 2 * fh + 1 + c,
                VirtualMessageMode::Global => fh + fh * c + c + c * c,
            };
            Mlp::new(name("virtual_message"), &[width, f, f])
        });
        let virtual_coord = if c == 0 {
            None
        } else if cfg.share_coord_mlp {
            if edge_coord.input_width() != f {
                return Err(Error::invalid(
                    "this backbone's edge coordinate MLP cannot be shared with the virtual one",
                ));
            }
            Some(edge_coord.clone())
        } else {
            Some(Mlp::new(name("virtual_coord"), &[f, f, 1]).with_output_gain(COORD_GAIN))
        };
        let node_update = feat.then(|| {
            let width = if c > 0 { 3 * f } else { 2 * f };
            Mlp::new(name("node_update"), &[width, f, f])
        });
        Ok(Self {
            edge_message,
            edge_filter,
            edge_coord: Some(edge_coord),
            virtual_message,
            virtual_coord,
            velocity: Mlp::new(name("velocity"), &[fh, f, 1]),
            node_update,
            virtual_position: (c > 0).then(|| Mlp::new(name("virtual_position"), &[f, f, 1]).with_output_gain(COORD_GAIN)),
            virtual_feature: (c > 0 && feat).then(|| Mlp::new(name("virtual_feature"), &[2 * f, f, f])),
        })
    }

    fn all(&self) -> impl Iterator<Item = &Mlp> {
        [
            &self.edge_message,
            &self.edge_filter,
            &self.edge_coord,
            &self.virtual_message,
            &self.virtual_coord,
            &self.node_update,
            &self.virtual_position,
            &self.virtual_feature,
        ]
        .into_iter()
        .flatten()
        .chain(std::iter::once(&self.velocity))
    }

    fn real_update(&self) -> RealUpdate<'_> {
        RealUpdate {
            edge_coord: self.edge_coord.as_ref(),
            virtual_coord: self.virtual_coord.as_ref(),
            velocity: &self.velocity,
            node_update: self.node_update.as_ref(),
        }
    }
}

/// A configured network: its layer structure, without parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    embed: Option<Mlp>,
    layers: Vec<LayerMlps>,
}

/// Inputs of one graph recorded as tape constants.
struct GraphInputs {
    x: Var,
    v0: Var,
    h: Var,
    edge_attr: Var,
    edges: EdgeTape,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let embed = config
            .backbone
            .has_features()
            .then(|| Mlp::new("embed", &[config.node_feature_dim, config.hidden]));
        let layers = (0..config.layers)
            .map(|l| LayerMlps::new(&config, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            embed,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerMlps] {
        &self.layers
    }

    /// Fresh, seeded parameters for every MLP plus the virtual features.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for mlp in self.embed.iter().chain(self.layers.iter().flat_map(LayerMlps::all)) {
            mlp.init(&mut store, seed);
        }
        let c = self.config.virtual_channels;
        if c > 0 && self.config.backbone.has_features() {
            use rand_distr::{Distribution, StandardNormal};
            let mut r = rng::rng(rng::derive(seed, rng::hash_str(VIRTUAL_FEATURES)));
            let data = (0..self.config.hidden * c)
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            store.insert(
                VIRTUAL_FEATURES,
                Tensor::new(self.config.hidden, c, data).expect("sized"),
            );
        }
        store
    }

    /// Errors unless `store` holds exactly this model's parameters.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init_params(0).layout();
        let found = store.layout();
        if expected != found {
            let missing: Vec<_> = expected.iter().filter(|e| !found.contains(e)).collect();
            let extra: Vec<_> = found.iter().filter(|e| !expected.contains(e)).collect();
            return Err(Error::invalid(format!(
                "parameters do not match the model: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        Ok(())
    }

    fn check_graph(&self, graph: &GeometricGraph) -> Result<()> {
        if graph.feature_dim() != self.config.node_feature_dim
            || graph.edge_attr_dim() != self.config.edge_attr_dim
        {
            return Err(Error::invalid(format!(
                "graph has {} node features and {} edge attributes, model expects {} and {}",
                graph.feature_dim(),
                graph.edge_attr_dim(),
                self.config.node_feature_dim,
                self.config.edge_attr_dim
            )));
        }
        Ok(())
    }

    /// Single-worker forward pass.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &GeometricGraph) -> Result<ForwardOutput> {
        self.forward_with(tape, store, graph, &LocalReducer)
    }

    /// Inference without gradients.
    pub fn predict(&self, store: &ParamStore, graph: &GeometricGraph) -> Result<Prediction> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, store, graph)?;
        Ok(out.read(&tape))
    }

    /// Forward pass over the nodes held by this worker. Sums over real
    /// nodes (centre of mass, virtual aggregation) go through `reducer`;
    /// everything else is local.
    pub fn forward_with<R: Reducer + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &GeometricGraph,
        reducer: &R,
    ) -> Result<ForwardOutput> {
        self.check_graph(graph)?;
        if self.config.backbone == Backbone::Egnn {
            return egnn::forward(self, tape, store, graph);
        }
        let n = graph.num_nodes();
        let c = self.config.virtual_channels;
        let feat = self.config.backbone.has_features();
        let inputs = self.record_inputs_with(tape, store, graph)?;
        let pairs = PairIndex::new(n, c);
        let has_edges = !inputs.edges.is_empty();

        let mut x = inputs.x;
        let mut h = inputs.h;
        let mut virt: Option<(Var, Var)> = None;

        for (l, layer) in self.layers.iter().enumerate() {
            let edge_msgs = match (self.config.backbone, has_edges) {
                (Backbone::FastSchnet, _) | (_, false) => None,
                _ => {
                    let mlp = layer.edge_message.as_ref().expect("edge MLP");
                    let msgs = if feat {
                        stages::real_real_message(tape, store, mlp, h, x, inputs.edge_attr, &inputs.edges)
                    } else {
                        let empty_attr = tape
                            .constant(Tensor::zeros(inputs.edges.len(), 0))
                            .map_err(|e| e.at(l, "real_real"))?;
                        stages::real_real_message(tape, store, mlp, h, x, empty_attr, &inputs.edges)
                    };
                    Some(msgs.map_err(|e| e.at(l, "real_real"))?)
                }
            };
            let filter_msgs = if self.config.backbone == Backbone::FastSchnet && has_edges {
                Some(
                    stages::schnet_messages(
                        tape,
                        store,
                        layer.edge_filter.as_ref().expect("filter MLP"),
                        layer.edge_coord.as_ref().expect("coordinate MLP"),
                        h,
                        x,
                        inputs.edge_attr,
                        &inputs.edges,
                    )
                    .map_err(|e| e.at(l, "real_real"))?,
                )
            } else {
                None
            };

            let mut pair_msgs = None;
            let mut total_nodes = n as f64;
            if c > 0 {
                let (com, total) = center(tape, reducer, x).map_err(|e| e.at(l, "center"))?;
                total_nodes = total;
                let (z, s) = match virt {
                    Some(v) => v,
                    None => self
                        .initial_virtual(tape, store, com)
                        .map_err(|e| e.at(l, "virtual_init"))?,
                };
                virt = Some((z, s));
                let gram = stages::virtual_global_message(tape, z, com)
                    .map_err(|e| e.at(l, "virtual_global"))?;
                let pm = stages::real_virtual_message(
                    tape,
                    store,
                    layer.virtual_message.as_ref().expect("virtual MLP"),
                    self.config.message_mode,
                    h,
                    s,
                    x,
                    z,
                    gram,
                    &pairs,
                )
                .map_err(|e| e.at(l, "real_virtual"))?;
                pair_msgs = Some(pm);
            }

            let pair_arg = pair_msgs.as_ref().map(|pm| (pm, &pairs));
            let (x_next, h_next) = match self.config.backbone {
                Backbone::FastSchnet => stages::schnet_real_aggregate(
                    tape,
                    store,
                    layer.virtual_coord.as_ref(),
                    &layer.velocity,
                    layer.node_update.as_ref().expect("node MLP"),
                    x,
                    h,
                    inputs.v0,
                    filter_msgs.as_ref().map(|m| (m, &inputs.edges)),
                    pair_arg,
                ),
                _ => stages::real_aggregate(
                    tape,
                    store,
                    &layer.real_update(),
                    x,
                    h,
                    inputs.v0,
                    edge_msgs.as_ref().map(|m| (m, &inputs.edges)),
                    pair_arg,
                ),
            }
            .map_err(|e| e.at(l, "real_aggregate"))?;

            if let (Some(pm), Some((z, s))) = (&pair_msgs, virt) {
                let next = stages::virtual_aggregate(
                    tape,
                    store,
                    layer.virtual_position.as_ref().expect("virtual position MLP"),
                    layer.virtual_feature.as_ref(),
                    z,
                    s,
                    pm,
                    &pairs,
                    total_nodes,
                    reducer,
                )
                .map_err(|e| e.at(l, "virtual_aggregate"))?;
                virt = Some(next);
            }
            x = x_next;
            h = h_next;
        }

        // With no layers the virtual set still exists at its initial state.
        if c > 0 && virt.is_none() {
            let (com, _) = center(tape, reducer, x).map_err(|e| e.at(0, "center"))?;
            virt = Some(
                self.initial_virtual(tape, store, com)
                    .map_err(|e| e.at(0, "virtual_init"))?,
            );
        }
        Ok(ForwardOutput {
            positions: x,
            features: h,
            virtual_set: virt,
        })
    }

    fn record_inputs_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &GeometricGraph,
    ) -> Result<GraphInputs> {
        let n = graph.num_nodes();
        let x = tape.constant(graph.positions.clone())?;
        let v0 = tape.constant(graph.velocities.clone())?;
        let edge_attr = tape.constant(graph.edge_attr.clone())?;
        let edges = EdgeTape::record(tape, &graph.edges, n)?;
        let h = match &self.embed {
            Some(embed) => {
                let raw = tape.constant(graph.features.clone())?;
                embed.forward(tape, store, raw)?
            }
            None => tape.constant(Tensor::zeros(n, 0))?,
        };
        Ok(GraphInputs {
            x,
            v0,
            h,
            edge_attr,
            edges,
        })
    }

    fn initial_virtual(&self, tape: &mut Tape, store: &ParamStore, com: Var) -> Result<(Var, Var)> {
        let c = self.config.virtual_channels;
        let rows: Arc<[usize]> = vec![0; c].into();
        let z = tape.gather_rows(com, rows)?;
        let s = if self.config.backbone.has_features() {
            let learned = tape.param(store, VIRTUAL_FEATURES)?;
            tape.transpose(learned)?
        } else {
            tape.constant(Tensor::zeros(c, 0))?
        };
        Ok((z, s))
    }
}

/// Centre of mass of every worker's nodes, from one reduction of
/// `[sum_i x_i, count]`. Returns the `1 x 3` centre and the global count.
pub fn center<R: Reducer + ?Sized>(tape: &mut Tape, reducer: &R, x: Var) -> Result<(Var, f64)> {
    let n_local = tape.shape(x)[0] as f64;
    let sum = tape.sum_rows(x)?;
    let count = tape.constant(Tensor::scalar(n_local))?;
    let payload = tape.concat_cols(&[sum, count])?;
    let total = reducer.sum(tape, payload)?;
    let n_total = tape.value(total).get(0, 3);
    if n_total < 1.0 {
        return Err(Error::invalid("centre of mass of an empty graph"));
    }
    let sum_total = tape.slice_cols(total, 0, 3)?;
    Ok((tape.scale(sum_total, 1.0 / n_total)?, n_total))
}

/// Rebuilds the Gram matrix of `z_c - x_i` from the centred Gram matrix and
/// the squared distances `d_c = |z_c - x_i|^2`:
/// `A_ab = G_ab + (d_a + d_b - G_aa - G_bb) / 2`.
pub fn gram_from_distances(centred: &Tensor, distances: &[f64]) -> Result<Tensor> {
    let c = distances.len();
    if centred.shape() != [c, c] {
        return Err(Error::Shape {
            op: "gram_from_distances",
            lhs: centred.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let mut out = Tensor::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            let v = centred.get(a, b)
                + 0.5 * (distances[a] + distances[b] - centred.get(a, a) - centred.get(b, b));
            out.set(a, b, v);
        }
    }
    Ok(out)
}
