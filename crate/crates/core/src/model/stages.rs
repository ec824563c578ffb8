//! The per-layer message and aggregation stages, written against the tape.
//!
//! Real nodes are rows of `x` (`N x 3`) and `h` (`N x F`); virtual channels
//! are rows of `z` (`C x 3`) and `s` (`C x F`). Real-virtual pairs are laid
//! out node-major: pair `p = i * C + c`.

use std::sync::Arc;

use crate::autodiff::{Mlp, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::VirtualMessageMode;
use super::Reducer;

/// Edge endpoints recorded for one forward pass.
pub struct EdgeTape {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `1 / |N(i)|` per node as an `N x 1` constant, 0 for isolated nodes.
    pub inv_degree: Var,
}

impl EdgeTape {
    pub fn record(tape: &mut Tape, edges: &[(usize, usize)], nodes: usize) -> Result<Self> {
        let src: Arc<[usize]> = edges.iter().map(|e| e.0).collect();
        let dst: Arc<[usize]> = edges.iter().map(|e| e.1).collect();
        let mut degree = vec![0usize; nodes];
        for &i in src.iter() {
            degree[i] += 1;
        }
        let inv = degree
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
            .collect();
        let inv_degree = tape.constant(Tensor::new(nodes, 1, inv)?)?;
        Ok(Self {
            src,
            dst,
            inv_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Node-major index of every (real node, virtual channel) pair.
pub struct PairIndex {
    pub node: Arc<[usize]>,
    pub channel: Arc<[usize]>,
    pub nodes: usize,
    pub channels: usize,
}

impl PairIndex {
    pub fn new(nodes: usize, channels: usize) -> Self {
        let node = (0..nodes * channels).map(|p| p / channels).collect();
        let channel = (0..nodes * channels).map(|p| p % channels).collect();
        Self {
            node,
            channel,
            nodes,
            channels,
        }
    }
}

/// Applies `mlp` to the column concatenation of `value[index]` for each
/// gathered part, followed by the dense parts. The first layer is applied
/// to each gathered part before gathering, which is exact and much cheaper
/// when many rows share a source row. Zero-width parts are skipped.
pub fn factored_mlp(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp,
    gathered: &[(Var, &Arc<[usize]>)],
    dense: &[Var],
    rows: usize,
) -> Result<Var> {
    let w0 = tape.param(store, &mlp.weight_name(0))?;
    let b0 = tape.param(store, &mlp.bias_name(0))?;
    let mut offset = 0;
    let mut acc: Option<Var> = None;
    for &(v, index) in gathered {
        let w = tape.shape(v)[1];
        if w == 0 {
            continue;
        }
        let part = tape.slice_rows(w0, offset, offset + w)?;
        let proj = tape.matmul(v, part)?;
        let rows_proj = tape.gather_rows(proj, index.clone())?;
        acc = Some(match acc {
            Some(a) => tape.add(a, rows_proj)?,
            None => rows_proj,
        });
        offset += w;
    }
    let dense: Vec<Var> = dense
        .iter()
        .copied()
        .filter(|&v| tape.shape(v)[1] > 0)
        .collect();
    if !dense.is_empty() {
        let d = if dense.len() == 1 {
            dense[0]
        } else {
            tape.concat_cols(&dense)?
        };
        let w = tape.shape(d)[1];
        let part = tape.slice_rows(w0, offset, offset + w)?;
        let proj = tape.matmul(d, part)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, proj)?,
            None => proj,
        });
        offset += w;
    }
    if offset != mlp.input_width() {
        return Err(Error::Shape {
            op: "mlp",
            lhs: vec![rows, offset],
            rhs: vec![mlp.input_width()],
        });
    }
    let acc = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::zeros(rows, mlp.layer_width(0)))?,
    };
    let first = tape.add_row(acc, b0)?;
    mlp.forward_tail(tape, store, first)
}

/// Real-real messages and the matching relative positions `x_i - x_j`.
pub struct EdgeMessages {
    pub message: Var,
    pub offset: Var,
}

/// `m_ij = mlp(h_i, h_j, |x_i - x_j|^2, e_ij)` for every edge.
pub fn real_real_message(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp,
    h: Var,
    x: Var,
    edge_attr: Var,
    edges: &EdgeTape,
) -> Result<EdgeMessages> {
    let xi = tape.gather_rows(x, edges.src.clone())?;
    let xj = tape.gather_rows(x, edges.dst.clone())?;
    let offset = tape.sub(xi, xj)?;
    let d2 = tape.row_sqnorm(offset)?;
    let message = factored_mlp(
        tape,
        store,
        mlp,
        &[(h, &edges.src), (h, &edges.dst)],
        &[d2, edge_attr],
        edges.len(),
    )?;
    Ok(EdgeMessages { message, offset })
}

/// Gram matrix of the centred virtual coordinates, `C x C`.
pub fn virtual_global_message(tape: &mut Tape, z: Var, com: Var) -> Result<Var> {
    let neg = tape.scale(com, -1.0)?;
    let centred = tape.add_row(z, neg)?;
    let t = tape.transpose(centred)?;
    tape.matmul(centred, t)
}

/// Real-virtual messages (one row per pair) and `x_i - z_c`.
pub struct PairMessages {
    pub message: Var,
    pub offset: Var,
}

/// Per pair: `m_ic = mlp(h_i, s_c, |x_i - z_c|^2, gram[c])`.
/// Global: `m_i = mlp(h_i, vec(S), (|x_i - z_c|^2)_c, vec(gram))`, repeated
/// for every channel.
#[allow(clippy::too_many_arguments)]
pub fn real_virtual_message(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp,
    mode: VirtualMessageMode,
    h: Var,
    s: Var,
    x: Var,
    z: Var,
    gram: Var,
    pairs: &PairIndex,
) -> Result<PairMessages> {
    let xi = tape.gather_rows(x, pairs.node.clone())?;
    let zc = tape.gather_rows(z, pairs.channel.clone())?;
    let offset = tape.sub(xi, zc)?;
    let d2 = tape.row_sqnorm(offset)?;
    let message = match mode {
        VirtualMessageMode::PerPair => {
            let gram_c = tape.gather_rows(gram, pairs.channel.clone())?;
            factored_mlp(
                tape,
                store,
                mlp,
                &[(h, &pairs.node), (s, &pairs.channel)],
                &[d2, gram_c],
                pairs.node.len(),
            )?
        }
        VirtualMessageMode::Global => {
            let (n, c) = (pairs.nodes, pairs.channels);
            let own: Arc<[usize]> = (0..n).collect();
            let first: Arc<[usize]> = vec![0; n].into();
            let fs = tape.shape(s)[1];
            let s_flat = tape.reshape(s, 1, c * fs)?;
            let gram_flat = tape.reshape(gram, 1, c * c)?;
            let gram_rows = tape.gather_rows(gram_flat, first.clone())?;
            let d2_rows = tape.reshape(d2, n, c)?;
            let per_node = factored_mlp(
                tape,
                store,
                mlp,
                &[(h, &own), (s_flat, &first)],
                &[d2_rows, gram_rows],
                n,
            )?;
            tape.gather_rows(per_node, pairs.node.clone())?
        }
    };
    Ok(PairMessages { message, offset })
}

/// MLPs consumed by the real-node update.
pub struct RealUpdate<'a> {
    pub edge_coord: Option<&'a Mlp>,
    pub virtual_coord: Option<&'a Mlp>,
    pub velocity: &'a Mlp,
    /// Absent for backbones without node features.
    pub node_update: Option<&'a Mlp>,
}

/// `x' = x + a_i sum_j (x_i - x_j) w(m_ij) + (1/C) sum_c (x_i - z_c) w_v(m_ic)
///      + w_h(h_i) v0_i` and
/// `h' = h + node_update(h, a_i sum_j m_ij, (1/C) sum_c m_ic)`.
///
/// A missing edge set contributes nothing (and a zero aggregated message);
/// a missing virtual set drops the virtual terms entirely.
#[allow(clippy::too_many_arguments)]
pub fn real_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    mlps: &RealUpdate<'_>,
    x: Var,
    h: Var,
    v0: Var,
    edges: Option<(&EdgeMessages, &EdgeTape)>,
    pairs: Option<(&PairMessages, &PairIndex)>,
) -> Result<(Var, Var)> {
    let n = tape.shape(x)[0];
    let mut acc = x;
    let mut edge_mean = None;
    if let Some((msg, idx)) = edges {
        let coord = mlps
            .edge_coord
            .ok_or_else(|| Error::invalid("edge coordinate MLP missing"))?;
        let w = coord.forward(tape, store, msg.message)?;
        let shift = tape.mul_col(msg.offset, w)?;
        let summed = tape.scatter_add_rows(shift, idx.src.clone(), n)?;
        let neighbour = tape.mul_col(summed, idx.inv_degree)?;
        acc = tape.add(acc, neighbour)?;
        if mlps.node_update.is_some() {
            let ms = tape.scatter_add_rows(msg.message, idx.src.clone(), n)?;
            edge_mean = Some(tape.mul_col(ms, idx.inv_degree)?);
        }
    }
    let mut virtual_mean = None;
    if let Some((pm, pidx)) = pairs {
        let coord = mlps
            .virtual_coord
            .ok_or_else(|| Error::invalid("virtual coordinate MLP missing"))?;
        let beta = 1.0 / pidx.channels as f64;
        let w = coord.forward(tape, store, pm.message)?;
        let shift = tape.mul_col(pm.offset, w)?;
        let summed = tape.scatter_add_rows(shift, pidx.node.clone(), n)?;
        let term = tape.scale(summed, beta)?;
        acc = tape.add(acc, term)?;
        if mlps.node_update.is_some() {
            let ms = tape.scatter_add_rows(pm.message, pidx.node.clone(), n)?;
            virtual_mean = Some(tape.scale(ms, beta)?);
        }
    }
    let speed = mlps.velocity.forward(tape, store, h)?;
    let drift = tape.mul_col(v0, speed)?;
    let x_next = tape.add(acc, drift)?;

    let h_next = match mlps.node_update {
        Some(update) => node_update(tape, store, update, h, edge_mean, virtual_mean)?,
        None => h,
    };
    Ok((x_next, h_next))
}

fn node_update(
    tape: &mut Tape,
    store: &ParamStore,
    update: &Mlp,
    h: Var,
    edge_agg: Option<Var>,
    virtual_mean: Option<Var>,
) -> Result<Var> {
    let n = tape.shape(h)[0];
    let edge_agg = match edge_agg {
        Some(v) => v,
        None => {
            let f = tape.shape(h)[1];
            tape.constant(Tensor::zeros(n, f))?
        }
    };
    let mut parts = vec![h, edge_agg];
    parts.extend(virtual_mean);
    let input = tape.concat_cols(&parts)?;
    let delta = update.forward(tape, store, input)?;
    tape.add(h, delta)
}

/// Distance-only variant: node and virtual features have zero width and
/// there is no feature update.
#[allow(clippy::too_many_arguments)]
pub fn rf_real_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    edge_coord: &Mlp,
    virtual_coord: Option<&Mlp>,
    velocity: &Mlp,
    x: Var,
    v0: Var,
    edges: Option<(&EdgeMessages, &EdgeTape)>,
    pairs: Option<(&PairMessages, &PairIndex)>,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let empty = tape.constant(Tensor::zeros(n, 0))?;
    let mlps = RealUpdate {
        edge_coord: Some(edge_coord),
        virtual_coord,
        velocity,
        node_update: None,
    };
    let (x_next, _) = real_aggregate(tape, store, &mlps, x, empty, v0, edges, pairs)?;
    Ok(x_next)
}

/// SchNet-style real messages: an unnormalised coordinate weight from
/// `(h_i, h_j, e_ij)` and a continuous filter from `(|x_i - x_j|^2, e_ij)`.
pub struct FilterMessages {
    pub coord_weight: Var,
    pub filtered: Var,
    pub offset: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn schnet_messages(
    tape: &mut Tape,
    store: &ParamStore,
    filter: &Mlp,
    coord: &Mlp,
    h: Var,
    x: Var,
    edge_attr: Var,
    edges: &EdgeTape,
) -> Result<FilterMessages> {
    let xi = tape.gather_rows(x, edges.src.clone())?;
    let xj = tape.gather_rows(x, edges.dst.clone())?;
    let offset = tape.sub(xi, xj)?;
    let d2 = tape.row_sqnorm(offset)?;
    let coord_weight = factored_mlp(
        tape,
        store,
        coord,
        &[(h, &edges.src), (h, &edges.dst)],
        &[edge_attr],
        edges.len(),
    )?;
    let weights = factored_mlp(tape, store, filter, &[], &[d2, edge_attr], edges.len())?;
    let hj = tape.gather_rows(h, edges.dst.clone())?;
    let filtered = tape.mul(hj, weights)?;
    Ok(FilterMessages {
        coord_weight,
        filtered,
        offset,
    })
}

/// `x' = x + sum_j (x_i - x_j) w(h_i, h_j, e_ij) + virtual term + velocity
/// term` and `h' = h + node_update(h, sum_j h_j * filter_ij, (1/C) sum_c m_ic)`.
#[allow(clippy::too_many_arguments)]
pub fn schnet_real_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    virtual_coord: Option<&Mlp>,
    velocity: &Mlp,
    update: &Mlp,
    x: Var,
    h: Var,
    v0: Var,
    edges: Option<(&FilterMessages, &EdgeTape)>,
    pairs: Option<(&PairMessages, &PairIndex)>,
) -> Result<(Var, Var)> {
    let n = tape.shape(x)[0];
    let mut acc = x;
    let mut edge_agg = None;
    if let Some((msg, idx)) = edges {
        let shift = tape.mul_col(msg.offset, msg.coord_weight)?;
        let summed = tape.scatter_add_rows(shift, idx.src.clone(), n)?;
        acc = tape.add(acc, summed)?;
        edge_agg = Some(tape.scatter_add_rows(msg.filtered, idx.src.clone(), n)?);
    }
    let mut virtual_mean = None;
    if let Some((pm, pidx)) = pairs {
        let coord = virtual_coord.ok_or_else(|| Error::invalid("virtual coordinate MLP missing"))?;
        let beta = 1.0 / pidx.channels as f64;
        let w = coord.forward(tape, store, pm.message)?;
        let shift = tape.mul_col(pm.offset, w)?;
        let summed = tape.scatter_add_rows(shift, pidx.node.clone(), n)?;
        let term = tape.scale(summed, beta)?;
        acc = tape.add(acc, term)?;
        let ms = tape.scatter_add_rows(pm.message, pidx.node.clone(), n)?;
        virtual_mean = Some(tape.scale(ms, beta)?);
    }
    let speed = velocity.forward(tape, store, h)?;
    let drift = tape.mul_col(v0, speed)?;
    let x_next = tape.add(acc, drift)?;
    let h_next = node_update(tape, store, update, h, edge_agg, virtual_mean)?;
    Ok((x_next, h_next))
}

/// `z_c' = z_c + (1/N) sum_i (z_c - x_i) w(m_ic)` and
/// `s_c' = s_c + update(s_c, (1/N) sum_i m_ic)`.
///
/// Both sums over real nodes pass through `reducer` in one round, so a
/// worker holding part of the nodes contributes its partial sums.
#[allow(clippy::too_many_arguments)]
pub fn virtual_aggregate<R: Reducer + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    position: &Mlp,
    feature: Option<&Mlp>,
    z: Var,
    s: Var,
    pm: &PairMessages,
    pairs: &PairIndex,
    total_nodes: f64,
    reducer: &R,
) -> Result<(Var, Var)> {
    let c = pairs.channels;
    let w = position.forward(tape, store, pm.message)?;
    let towards = tape.scale(pm.offset, -1.0)?;
    let shift = tape.mul_col(towards, w)?;
    let shift_sum = tape.scatter_add_rows(shift, pairs.channel.clone(), c)?;
    let msg_sum = tape.scatter_add_rows(pm.message, pairs.channel.clone(), c)?;
    let payload = tape.concat_cols(&[shift_sum, msg_sum])?;
    let total = reducer.sum(tape, payload)?;
    let width = tape.shape(total)[1];
    let inv_n = 1.0 / total_nodes;

    let shift_total = tape.slice_cols(total, 0, 3)?;
    let dz = tape.scale(shift_total, inv_n)?;
    let z_next = tape.add(z, dz)?;

    let s_next = match feature {
        Some(update) => {
            let msg_total = tape.slice_cols(total, 3, width)?;
            let msg_mean = tape.scale(msg_total, inv_n)?;
            let input = tape.concat_cols(&[s, msg_mean])?;
            let delta = update.forward(tape, store, input)?;
            tape.add(s, delta)?
        }
        None => s,
    };
    Ok((z_next, s_next))
}
