#![allow(dead_code)]

//! Shared fixtures and a dense-loop reference implementation of the model,
//! written with explicit per-edge / per-pair loops and input concatenation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use vegn::autodiff::ParamStore;
use vegn::geometry::GeometricGraph;
use vegn::model::{Backbone, ModelConfig, VIRTUAL_FEATURES};
use vegn::nbody::charged_graph;
use vegn::rng;
use vegn::Tensor;

pub fn normal_tensor(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let data = (0..rows * cols)
        .map(|_| { let v: f64 = StandardNormal.sample(&mut r); scale * v })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Fully connected charged graph with Gaussian positions and velocities.
pub fn random_graph(n: usize, seed: u64) -> GeometricGraph {
    let mut r = rng::rng(seed ^ 0xabcdef);
    let charges: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    charged_graph(
        normal_tensor(n, 3, 1.0, seed),
        normal_tensor(n, 3, 0.5, seed.wrapping_add(1)),
        &charges,
    )
    .unwrap()
}

pub fn small_config(backbone: Backbone, layers: usize, hidden: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        backbone,
        layers,
        hidden,
        virtual_channels: channels,
        ..ModelConfig::default()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Evaluates the MLP stored under `prefix` on one input row.
pub fn mlp_row(store: &ParamStore, prefix: &str, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    let mut k = 0;
    while store.contains(&format!("{prefix}.w{k}")) {
        let w = store.value(&format!("{prefix}.w{k}")).unwrap();
        let b = store.value(&format!("{prefix}.b{k}")).unwrap();
        assert_eq!(w.rows(), h.len(), "{prefix}.w{k}");
        let mut out = b.data().to_vec();
        for (o, slot) in out.iter_mut().enumerate() {
            for (i, hi) in h.iter().enumerate() {
                *slot += hi * w.get(i, o);
            }
        }
        k += 1;
        if store.contains(&format!("{prefix}.w{k}")) {
            out = out.into_iter().map(silu).collect();
        }
        h = out;
    }
    assert!(k > 0, "no MLP named {prefix}");
    h
}

fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Reference output: positions, features, virtual coordinates and features.
pub struct Reference {
    pub x: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

/// Dense-loop forward for the fast backbones (per-pair messages).
pub fn reference_forward(cfg: &ModelConfig, store: &ParamStore, g: &GeometricGraph) -> Reference {
    let n = g.num_nodes();
    let c = cfg.virtual_channels;
    let feat = cfg.backbone != Backbone::FastRf;
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
    let mut x = rows(&g.positions);
    let v0 = rows(&g.velocities);
    let mut h: Vec<Vec<f64>> = if feat {
        (0..n).map(|i| mlp_row(store, "embed", g.features.row(i))).collect()
    } else {
        vec![vec![]; n]
    };
    let mut z: Vec<Vec<f64>> = Vec::new();
    let mut s: Vec<Vec<f64>> = Vec::new();
    let mut degree = vec![0usize; n];
    for &(i, _) in &g.edges {
        degree[i] += 1;
    }

    for l in 0..cfg.layers {
        let p = |role: &str| format!("layer{l}.{role}");
        let mut com = vec![0.0; 3];
        for xi in &x {
            for k in 0..3 {
                com[k] += xi[k];
            }
        }
        com.iter_mut().for_each(|v| *v /= n as f64);
        if c > 0 && l == 0 {
            z = vec![com.clone(); c];
            s = if feat {
                let learned = store.value(VIRTUAL_FEATURES).unwrap();
                (0..c).map(|ch| (0..cfg.hidden).map(|f| learned.get(f, ch)).collect()).collect()
            } else {
                vec![vec![]; c]
            };
        }
        let mut gram = vec![vec![0.0; c]; c];
        for a in 0..c {
            for b in 0..c {
                let ya = sub3(&z[a], &com);
                let yb = sub3(&z[b], &com);
                gram[a][b] = (0..3).map(|k| ya[k] * yb[k]).sum();
            }
        }

        let f = cfg.hidden;
        let mut x_new = x.clone();
        let mut edge_sum = vec![vec![0.0; f]; n];
        for (k, &(i, j)) in g.edges.iter().enumerate() {
            let d = sub3(&x[i], &x[j]);
            let e = g.edge_attr.row(k);
            let (w, msg) = match cfg.backbone {
                Backbone::FastSchnet => {
                    let w = mlp_row(store, &p("edge_coord"), &cat(&[&h[i], &h[j], e]))[0];
                    let filter = mlp_row(store, &p("edge_filter"), &cat(&[&[sq(&d)], e]));
                    let msg: Vec<f64> = (0..f).map(|q| h[j][q] * filter[q]).collect();
                    (w, msg)
                }
                Backbone::FastRf => {
                    let m = mlp_row(store, &p("edge_message"), &[sq(&d)]);
                    (mlp_row(store, &p("edge_coord"), &m)[0], m)
                }
                _ => {
                    let m = mlp_row(store, &p("edge_message"), &cat(&[&h[i], &h[j], &[sq(&d)], e]));
                    (mlp_row(store, &p("edge_coord"), &m)[0], m)
                }
            };
            let alpha = if cfg.backbone == Backbone::FastSchnet {
                1.0
            } else {
                1.0 / degree[i] as f64
            };
            for q in 0..3 {
                x_new[i][q] += alpha * d[q] * w;
            }
            for q in 0..f {
                edge_sum[i][q] += alpha * msg[q];
            }
        }

        let mut virt_mean = vec![vec![0.0; f]; n];
        let mut z_shift = vec![vec![0.0; 3]; c];
        let mut s_msg = vec![vec![0.0; f]; c];
        for i in 0..n {
            for ch in 0..c {
                let d = sub3(&x[i], &z[ch]);
                let m = mlp_row(
                    store,
                    &p("virtual_message"),
                    &cat(&[&h[i], &s[ch], &[sq(&d)], &gram[ch]]),
                );
                let coord_mlp = if cfg.share_coord_mlp { p("edge_coord") } else { p("virtual_coord") };
                let wv = mlp_row(store, &coord_mlp, &m)[0];
                let wz = mlp_row(store, &p("virtual_position"), &m)[0];
                for q in 0..3 {
                    x_new[i][q] += d[q] * wv / c as f64;
                    z_shift[ch][q] += -d[q] * wz;
                }
                for q in 0..f {
                    virt_mean[i][q] += m[q] / c as f64;
                    s_msg[ch][q] += m[q];
                }
            }
        }
        let mut h_new = h.clone();
        for i in 0..n {
            let speed = mlp_row(store, &p("velocity"), &h[i])[0];
            for q in 0..3 {
                x_new[i][q] += speed * v0[i][q];
            }
            if feat {
                let input = if c > 0 {
                    cat(&[&h[i], &edge_sum[i], &virt_mean[i]])
                } else {
                    cat(&[&h[i], &edge_sum[i]])
                };
                let dh = mlp_row(store, &p("node_update"), &input);
                for q in 0..f {
                    h_new[i][q] += dh[q];
                }
            }
        }
        let mut z_new = z.clone();
        let mut s_new = s.clone();
        for ch in 0..c {
            for q in 0..3 {
                z_new[ch][q] += z_shift[ch][q] / n as f64;
            }
            if feat {
                let mean: Vec<f64> = s_msg[ch].iter().map(|v| v / n as f64).collect();
                let ds = mlp_row(store, &p("virtual_feature"), &cat(&[&s[ch], &mean]));
                for q in 0..f {
                    s_new[ch][q] += ds[q];
                }
            }
        }
        x = x_new;
        h = h_new;
        z = z_new;
        s = s_new;
    }
    Reference { x, h, z, s }
}

pub fn max_diff_rows(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    assert_eq!(t.rows(), rows.len());
    for (i, r) in rows.iter().enumerate() {
        for (a, b) in t.row(i).iter().zip(r) {
            m = m.max((a - b).abs());
        }
    }
    m
}

/// Random orthogonal transform with translation, reflections allowed.
pub fn random_e3(seed: u64) -> vegn::geometry::E3Transform {
    vegn::geometry::random_rotation(seed, true, 10.0)
}
