//! Plain EGNN with velocity, no virtual nodes.

use crate::autodiff::{ParamStore, Tape};
use crate::error::Result;
use crate::geometry::GeometricGraph;
use crate::tensor::Tensor;

use super::stages::{factored_mlp, EdgeTape};
use super::{ForwardOutput, Model};

pub(super) fn forward(
    model: &Model,
    tape: &mut Tape,
    store: &ParamStore,
    graph: &GeometricGraph,
) -> Result<ForwardOutput> {
    let n = graph.num_nodes();
    let f = model.config().hidden;
    let mut x = tape.constant(graph.positions.clone())?;
    let v0 = tape.constant(graph.velocities.clone())?;
    let e = tape.constant(graph.edge_attr.clone())?;
    let edges = EdgeTape::record(tape, &graph.edges, n)?;
    let raw = tape.constant(graph.features.clone())?;
    let mut h = model.embed.as_ref().expect("egnn embeds features").forward(tape, store, raw)?;

    for (l, layer) in model.layers().iter().enumerate() {
        let step = |tape: &mut Tape| -> Result<_> {
            let node_update = layer.node_update.as_ref().expect("node MLP");
            let (x_moved, mean_msg) = if edges.is_empty() {
                (x, tape.constant(Tensor::zeros(n, f))?)
            } else {
                let xi = tape.gather_rows(x, edges.src.clone())?;
                let xj = tape.gather_rows(x, edges.dst.clone())?;
                let diff = tape.sub(xi, xj)?;
                let d2 = tape.row_sqnorm(diff)?;
                let msg = factored_mlp(
                    tape,
                    store,
                    layer.edge_message.as_ref().expect("edge MLP"),
                    &[(h, &edges.src), (h, &edges.dst)],
                    &[d2, e],
                    edges.len(),
                )?;
                let w = layer.edge_coord.as_ref().expect("coordinate MLP").forward(tape, store, msg)?;
                let pull = tape.mul_col(diff, w)?;
                let pull = tape.scatter_add_rows(pull, edges.src.clone(), n)?;
                let pull = tape.mul_col(pull, edges.inv_degree)?;
                let moved = tape.add(x, pull)?;
                let msum = tape.scatter_add_rows(msg, edges.src.clone(), n)?;
                (moved, tape.mul_col(msum, edges.inv_degree)?)
            };
            let speed = layer.velocity.forward(tape, store, h)?;
            let drift = tape.mul_col(v0, speed)?;
            let x_next = tape.add(x_moved, drift)?;
            let input = tape.concat_cols(&[h, mean_msg])?;
            let dh = node_update.forward(tape, store, input)?;
            let h_next = tape.add(h, dh)?;
            Ok((x_next, h_next))
        };
        let (x_next, h_next) = step(tape).map_err(|err| err.at(l, "egnn_layer"))?;
        x = x_next;
        h = h_next;
    }
    Ok(ForwardOutput {
        positions: x,
        features: h,
        virtual_set: None,
    })
}
