//! Seeded synthetic graphs, DAGs, and layer parameters for tests and
//! benchmarks. Everything here is a pure function of its seed.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::ir::{attrs, AttrValue, GraphBuilder, OpGraph, OpKind};
use crate::reference::{
    init_matrix, init_vector, Aggregator, GatLayerParams, GcnLayerParams, SageLayerParams,
    DEFAULT_LEAKY_SLOPE, DEFAULT_SAMPLE_SIZE,
};

/// Citation-network-shaped node count / edge count / feature width.
pub const CORA_NODES: usize = 2708;
pub const CORA_EDGES: usize = 5429;
pub const CORA_FEATURES: usize = 1433;
pub const CORA_CLASSES: usize = 7;

/// Random graph with `num_edges` unique directed non-self edges and features
/// in [-1, 1).
pub fn synthetic_graph(
    num_nodes: usize,
    feature_dim: usize,
    num_edges: usize,
    num_classes: usize,
    seed: u64,
) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = num_nodes.saturating_mul(num_nodes.saturating_sub(1));
    let wanted = num_edges.min(cap);
    let mut seen = std::collections::HashSet::with_capacity(wanted);
    let mut edges = Vec::with_capacity(wanted);
    while edges.len() < wanted {
        let s = rng.gen_range(0..num_nodes);
        let d = rng.gen_range(0..num_nodes);
        if s != d && seen.insert((s, d)) {
            edges.push((s, d));
        }
    }
    let features = Array2::from_shape_fn((num_nodes, feature_dim), |_| rng.gen_range(-1.0..1.0));
    let labels = (0..num_nodes)
        .map(|_| rng.gen_range(0..num_classes))
        .collect();
    Graph {
        num_nodes,
        feature_dim,
        edges,
        features,
        labels: Some(labels),
        num_classes: Some(num_classes),
    }
}

/// Full citation-network scale (2708 nodes).
pub fn cora_scale_graph(seed: u64) -> Graph {
    synthetic_graph(CORA_NODES, CORA_FEATURES, CORA_EDGES, CORA_CLASSES, seed)
}

/// Half-scale variant (1354 nodes) used for cost-share probes, where dense
/// n^2 preprocessing still dominates but runs stay fast.
pub fn half_scale_graph(seed: u64) -> Graph {
    synthetic_graph(CORA_NODES / 2, CORA_FEATURES, CORA_EDGES, CORA_CLASSES, seed)
}

// ── Seeded layer parameters ────────────────────────────────────────────────

pub fn gcn_params(f_in: usize, f_out: usize, bias: bool, seed: u64) -> GcnLayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GcnLayerParams {
        weight: init_matrix(f_in, f_out, &mut rng),
        bias: bias.then(|| init_vector(f_in, f_out, &mut rng)),
    }
}

pub fn gat_params(f_in: usize, f_out: usize, heads: usize, seed: u64) -> GatLayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GatLayerParams {
        weight: init_matrix(f_in, f_out, &mut rng),
        attn_src: init_vector(f_in, f_out, &mut rng),
        attn_dst: init_vector(f_in, f_out, &mut rng),
        leaky_slope: DEFAULT_LEAKY_SLOPE,
        heads,
    }
}

pub fn sage_params(
    f_in: usize,
    f_out: usize,
    aggregator: Aggregator,
    seed: u64,
) -> SageLayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SageLayerParams {
        weight_self: init_matrix(f_in, f_out, &mut rng),
        weight_neigh: init_matrix(f_in, f_out, &mut rng),
        aggregator,
        sample_size: DEFAULT_SAMPLE_SIZE,
        sample_seed: seed ^ 0xA5A5_A5A5,
    }
}

// ── Random DAGs for partition search ───────────────────────────────────────

/// Random operator DAG with `num_ops` placeable nodes over square (d x d)
/// tensors. Ops draw uniformly from unary Sqrt-family, binary elementwise
/// over two random predecessors, and matmul against a random constant, so
/// cut costs vary node to node.
pub fn random_dag(num_ops: usize, d: usize, seed: u64) -> OpGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![d, d]);
    let mut reachable = vec![h];
    let mut i = 0usize;
    while i < num_ops {
        let pick = |rng: &mut ChaCha8Rng, from: &[usize]| *from.choose(rng).unwrap();
        let choice = rng.gen_range(0..6);
        let id = match choice {
            // abs-then-sqrt stays NaN-free for any upstream values; costs two
            // placeable nodes, so skip when only one slot is left.
            0 if num_ops - i >= 2 => {
                let x = pick(&mut rng, &reachable);
                let sq = b
                    .op(OpKind::EltwiseMul, &format!("sq{i}"), &[x, x], attrs(&[]))
                    .unwrap();
                i += 1;
                b.op(OpKind::Sqrt, &format!("op{i}"), &[sq], attrs(&[])).unwrap()
            }
            0 | 1 => {
                let x = pick(&mut rng, &reachable);
                b.op(OpKind::ReLU, &format!("op{i}"), &[x], attrs(&[])).unwrap()
            }
            2 => {
                let x = pick(&mut rng, &reachable);
                let y = pick(&mut rng, &reachable);
                b.op(OpKind::EltwiseAdd, &format!("op{i}"), &[x, y], attrs(&[]))
                    .unwrap()
            }
            3 => {
                let x = pick(&mut rng, &reachable);
                let y = pick(&mut rng, &reachable);
                b.op(OpKind::EltwiseMul, &format!("op{i}"), &[x, y], attrs(&[]))
                    .unwrap()
            }
            4 => {
                let x = pick(&mut rng, &reachable);
                let w = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5));
                let wc = b.constant(&format!("w{i}"), w.into_dyn());
                b.op(OpKind::MatMul, &format!("op{i}"), &[x, wc], attrs(&[]))
                    .unwrap()
            }
            _ => {
                let x = pick(&mut rng, &reachable);
                b.op(
                    OpKind::Softmax,
                    &format!("op{i}"),
                    &[x],
                    attrs(&[("axis", AttrValue::Int(1))]),
                )
                .unwrap()
            }
        };
        reachable.push(id);
        i += 1;
    }
    let last = *reachable.last().unwrap();
    b.output("out", last);
    b.finish()
}
