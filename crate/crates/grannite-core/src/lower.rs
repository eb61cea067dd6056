//! Lowering of reference layers to operator graphs.
//!
//! The naive mode mirrors the out-of-box mapping: graph preprocessing
//! (degree, rsqrt, normalization spread) is materialized as runtime ops and
//! connectivity arrives as a runtime input, so per-run cost includes the full
//! control-heavy pipeline. Optimized modes delegate to [`crate::transforms`].

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, Graph};
use crate::ir::{attrs, AttrValue, GraphBuilder, NodeId, OpGraph, OpKind};
use crate::reference::{
    sample_neighbors, Aggregator, GatLayerParams, GcnLayerParams, SageLayerParams,
};
use crate::transforms;
use crate::LARGE_NEG;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LayerKind {
    Gcn,
    Gat,
    SageMean,
    SageMax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Gat => "gat",
            LayerKind::SageMean => "sage-mean",
            LayerKind::SageMax => "sage-max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "gat" => Ok(LayerKind::Gat),
            "sage-mean" => Ok(LayerKind::SageMean),
            "sage-max" => Ok(LayerKind::SageMax),
            other => Err(Error::Config(format!(
                "unknown layer {other}; expected gcn, gat, sage-mean, or sage-max"
            ))),
        }
    }
}

/// Canonical lowering modes. Optimized modes are shorthand for the pass
/// compositions that produce them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerMode {
    Naive,
    Stagr,
    Grad,
    Effop,
    Grax1,
    Grax2,
    Grax3,
}

fn arr2(m: &Array2<f32>) -> ArrayD<f32> {
    m.clone().into_dyn()
}

// ── Convolution ────────────────────────────────────────────────────────────

/// Out-of-box convolution graph. Inputs: `h` (n x f_in) and `adj` (n x n,
/// binary, symmetric, self-loops included). The normalization matrix is
/// rebuilt from `adj` on every run; those nodes carry `stage = preprocess`.
pub fn lower_gcn_naive(
    params: &GcnLayerParams,
    n: usize,
    relu_epilogue: bool,
) -> Result<OpGraph> {
    let f_in = params.weight.nrows();
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![n, f_in]);
    let adj = b.input("adj", vec![n, n]);
    let w = b.constant("weight", arr2(&params.weight));
    let ones = b.constant("ones", ArrayD::from_elem(IxDyn(&[n, 1]), 1.0));
    let idx0 = b.constant("gather_idx", ArrayD::zeros(IxDyn(&[n])));

    let pre = |b: &mut GraphBuilder, id: NodeId| {
        b.set_attr(id, "stage", AttrValue::Str("preprocess".into()));
    };
    let deg = b.op(
        OpKind::ReduceSum,
        "deg",
        &[adj],
        attrs(&[("axis", AttrValue::Int(1)), ("keepdims", AttrValue::Int(1))]),
    )?;
    pre(&mut b, deg);
    let sdeg = b.op(OpKind::Sqrt, "sqrt_deg", &[deg], attrs(&[]))?;
    pre(&mut b, sdeg);
    let dinv = b.op(OpKind::Div, "inv_sqrt_deg", &[ones, sdeg], attrs(&[]))?;
    pre(&mut b, dinv);
    // Spread 1/sqrt(deg) down columns and across rows, then apply to adj.
    let dcol = b.op(
        OpKind::Gather,
        "dcol",
        &[dinv, idx0],
        attrs(&[("axis", AttrValue::Int(1))]),
    )?;
    pre(&mut b, dcol);
    let drow = b.op(OpKind::Transpose, "drow", &[dcol], attrs(&[]))?;
    pre(&mut b, drow);
    let dd = b.op(OpKind::EltwiseMul, "dd", &[dcol, drow], attrs(&[]))?;
    pre(&mut b, dd);
    let norm = b.op(OpKind::EltwiseMul, "norm", &[dd, adj], attrs(&[]))?;
    pre(&mut b, norm);

    let hw = b.op(OpKind::MatMul, "hw", &[h, w], attrs(&[]))?;
    let agg = b.op(OpKind::MatMul, "agg", &[norm, hw], attrs(&[]))?;
    let mut last = agg;
    if let Some(bias) = &params.bias {
        let bc = b.constant(
            "bias",
            ArrayD::from_shape_vec(IxDyn(&[bias.len()]), bias.to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
        last = b.op(OpKind::EltwiseAdd, "biased", &[agg, bc], attrs(&[]))?;
    }
    if relu_epilogue {
        last = b.op(OpKind::ReLU, "act", &[last], attrs(&[]))?;
    }
    b.output("out", last);
    Ok(b.finish())
}

// ── Attention ──────────────────────────────────────────────────────────────

pub struct GatLowering {
    /// When `Some`, connectivity is frozen: the keep mask (A+I, binary)
    /// becomes a constant and the runtime `adj` input plus its Greater node
    /// disappear.
    pub keep_const: Option<Array2<f32>>,
    pub apply_elu: bool,
}

/// Attention graph with the conventional broadcast/transpose score spread,
/// Select-based edge masking, row softmax, and dense mixing matmul per head.
pub fn lower_gat_with(params: &GatLayerParams, n: usize, opts: &GatLowering) -> Result<OpGraph> {
    let f_in = params.weight.nrows();
    let f_out = params.weight.ncols();
    let d = params.head_dim()?;
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![n, f_in]);
    let keep = match &opts.keep_const {
        Some(mask) => {
            if mask.nrows() != n || mask.ncols() != n {
                return Err(Error::Shape(format!(
                    "keep mask shape {:?} != ({n}, {n})",
                    mask.shape()
                )));
            }
            b.constant("keep", arr2(mask))
        }
        None => {
            let adj = b.input("adj", vec![n, n]);
            let zero = b.scalar("zero", 0.0);
            b.op(OpKind::Greater, "keep", &[adj, zero], attrs(&[]))?
        }
    };
    let w = b.constant("weight", arr2(&params.weight));
    let negbig = b.scalar("neg_fill", -LARGE_NEG);
    let z = b.op(OpKind::MatMul, "z", &[h, w], attrs(&[]))?;

    let mut head_outs = Vec::with_capacity(params.heads);
    for head in 0..params.heads {
        let sfx = if params.heads == 1 {
            String::new()
        } else {
            format!("_h{head}")
        };
        // Head-sliced attention vectors, zero outside the head's columns.
        let mut asrc = vec![0.0f32; f_out];
        let mut adst = vec![0.0f32; f_out];
        for k in head * d..(head + 1) * d {
            asrc[k] = params.attn_src[k];
            adst[k] = params.attn_dst[k];
        }
        let ca = b.constant(
            &format!("attn_src{sfx}"),
            ArrayD::from_shape_vec(IxDyn(&[f_out, 1]), asrc).expect("attn"),
        );
        let cd = b.constant(
            &format!("attn_dst{sfx}"),
            ArrayD::from_shape_vec(IxDyn(&[f_out, 1]), adst).expect("attn"),
        );
        let s = b.op(OpKind::MatMul, &format!("src_score{sfx}"), &[z, ca], attrs(&[]))?;
        let t = b.op(OpKind::MatMul, &format!("dst_score{sfx}"), &[z, cd], attrs(&[]))?;
        let sb = b.op(
            OpKind::Broadcast,
            &format!("src_spread{sfx}"),
            &[s],
            attrs(&[("axis", AttrValue::Int(1)), ("size", AttrValue::Int(n as i64))]),
        )?;
        let tt = b.op(OpKind::Transpose, &format!("dst_t{sfx}"), &[t], attrs(&[]))?;
        let tb = b.op(
            OpKind::Broadcast,
            &format!("dst_spread{sfx}"),
            &[tt],
            attrs(&[("axis", AttrValue::Int(0)), ("size", AttrValue::Int(n as i64))]),
        )?;
        let e = b.op(OpKind::EltwiseAdd, &format!("logits{sfx}"), &[sb, tb], attrs(&[]))?;
        let lr = b.op(
            OpKind::LeakyReLU,
            &format!("lrelu{sfx}"),
            &[e],
            attrs(&[("slope", AttrValue::Float(params.leaky_slope as f64))]),
        )?;
        let masked = b.op(
            OpKind::Select,
            &format!("masked{sfx}"),
            &[keep, lr, negbig],
            attrs(&[]),
        )?;
        let alpha = b.op(
            OpKind::Softmax,
            &format!("alpha{sfx}"),
            &[masked],
            attrs(&[("axis", AttrValue::Int(1))]),
        )?;
        let zh = if params.heads == 1 {
            z
        } else {
            let mut colmask = vec![0.0f32; f_out];
            for k in head * d..(head + 1) * d {
                colmask[k] = 1.0;
            }
            let cm = b.constant(
                &format!("head_cols{sfx}"),
                ArrayD::from_shape_vec(IxDyn(&[1, f_out]), colmask).expect("mask"),
            );
            b.op(OpKind::EltwiseMul, &format!("z{sfx}"), &[z, cm], attrs(&[]))?
        };
        let oh = b.op(OpKind::MatMul, &format!("mix{sfx}"), &[alpha, zh], attrs(&[]))?;
        head_outs.push(oh);
    }
    let mut acc = head_outs[0];
    for (i, &oh) in head_outs.iter().enumerate().skip(1) {
        acc = b.op(
            OpKind::EltwiseAdd,
            &format!("head_sum_{i}"),
            &[acc, oh],
            attrs(&[]),
        )?;
    }
    if opts.apply_elu {
        acc = b.op(OpKind::ELU, "act", &[acc], attrs(&[]))?;
    }
    b.output("out", acc);
    Ok(b.finish())
}

pub fn lower_gat_naive(params: &GatLayerParams, n: usize, apply_elu: bool) -> Result<OpGraph> {
    lower_gat_with(
        params,
        n,
        &GatLowering {
            keep_const: None,
            apply_elu,
        },
    )
}

// ── Sampled aggregation ────────────────────────────────────────────────────

/// Per-node sample index/validity planes: `idx[i][k]` is the k-th sampled
/// out-neighbor of i (0 with `mask[i][k] = 0` for unfilled slots).
pub fn sample_planes(g: &Graph, sample_size: usize, seed: u64) -> (Array2<f32>, Array2<f32>) {
    let samples = sample_neighbors(g, sample_size, seed);
    let n = g.num_nodes;
    let mut idx = Array2::<f32>::zeros((n, sample_size));
    let mut mask = Array2::<f32>::zeros((n, sample_size));
    for (i, s) in samples.iter().enumerate() {
        for (k, &j) in s.iter().enumerate() {
            idx[[i, k]] = j as f32;
            mask[[i, k]] = 1.0;
        }
    }
    (idx, mask)
}

/// Dense n x n binary sampled-adjacency plane.
pub fn sampled_adjacency(g: &Graph, sample_size: usize, seed: u64) -> Array2<f32> {
    let samples = sample_neighbors(g, sample_size, seed);
    let n = g.num_nodes;
    let mut a = Array2::<f32>::zeros((n, n));
    for (i, s) in samples.iter().enumerate() {
        for &j in s {
            a[[i, j]] = 1.0;
        }
    }
    a
}

pub struct SageLowering {
    /// Freeze sampling: index/validity planes become constants.
    pub frozen_planes: Option<(Array2<f32>, Array2<f32>)>,
}

/// Sampled-neighborhood graph: per-node feature gather by sample index,
/// validity masking with Select, and mean (sum/safe-count divide) or max
/// (masked running max with empty-sample guard) aggregation.
pub fn lower_sage_with(params: &SageLayerParams, n: usize, opts: &SageLowering) -> Result<OpGraph> {
    if params.sample_size == 0 {
        return Err(Error::Config("sample_size must be at least 1".into()));
    }
    let f_in = params.weight_self.nrows();
    let s = params.sample_size;
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![n, f_in]);
    let (idx, mask) = match &opts.frozen_planes {
        Some((i_m, m_m)) => {
            if i_m.dim() != (n, s) || m_m.dim() != (n, s) {
                return Err(Error::Shape(format!(
                    "sample planes {:?} != ({n}, {s})",
                    i_m.shape()
                )));
            }
            (
                b.constant("sample_idx", arr2(i_m)),
                b.constant("sample_mask", arr2(m_m)),
            )
        }
        None => (
            b.input("sample_idx", vec![n, s]),
            b.input("sample_mask", vec![n, s]),
        ),
    };
    let wself = b.constant("weight_self", arr2(&params.weight_self));
    let wneigh = b.constant("weight_neigh", arr2(&params.weight_neigh));
    let zero = b.scalar("zero", 0.0);

    let selfp = b.op(OpKind::MatMul, "self_proj", &[h, wself], attrs(&[]))?;
    let gath = b.op(
        OpKind::Gather,
        "gathered",
        &[h, idx],
        attrs(&[("axis", AttrValue::Int(0))]),
    )?;
    let mask3 = b.op(
        OpKind::Broadcast,
        "mask3",
        &[mask],
        attrs(&[
            ("axis", AttrValue::Int(2)),
            ("size", AttrValue::Int(f_in as i64)),
            ("mode", AttrValue::Str("insert".into())),
        ]),
    )?;
    let cnt = b.op(
        OpKind::ReduceSum,
        "count",
        &[mask],
        attrs(&[("axis", AttrValue::Int(1)), ("keepdims", AttrValue::Int(1))]),
    )?;
    let has = b.op(OpKind::Greater, "has_neighbors", &[cnt, zero], attrs(&[]))?;

    let agg = match params.aggregator {
        Aggregator::Mean => {
            let gm = b.op(OpKind::EltwiseMul, "masked_feats", &[gath, mask3], attrs(&[]))?;
            let ssum = b.op(
                OpKind::ReduceSum,
                "sample_sum",
                &[gm],
                attrs(&[("axis", AttrValue::Int(1))]),
            )?;
            let one = b.scalar("one", 1.0);
            let safe = b.op(OpKind::Select, "safe_count", &[has, cnt, one], attrs(&[]))?;
            b.op(OpKind::Div, "agg", &[ssum, safe], attrs(&[]))?
        }
        Aggregator::Max => {
            let negbig = b.scalar("neg_fill", -LARGE_NEG);
            let gsel = b.op(
                OpKind::Select,
                "masked_feats",
                &[mask3, gath, negbig],
                attrs(&[]),
            )?;
            let mx = b.op(
                OpKind::ReduceMax,
                "sample_max",
                &[gsel],
                attrs(&[("axis", AttrValue::Int(1))]),
            )?;
            b.op(OpKind::Select, "agg", &[has, mx, zero], attrs(&[]))?
        }
    };
    let np = b.op(OpKind::MatMul, "neigh_proj", &[agg, wneigh], attrs(&[]))?;
    let out = b.op(OpKind::EltwiseAdd, "out", &[selfp, np], attrs(&[]))?;
    b.output("out", out);
    Ok(b.finish())
}

pub fn lower_sage_naive(params: &SageLayerParams, n: usize) -> Result<OpGraph> {
    lower_sage_with(params, n, &SageLowering { frozen_planes: None })
}

// ── Mode dispatch ──────────────────────────────────────────────────────────

pub fn lower_gcn(params: &GcnLayerParams, g: &Graph, mode: LowerMode) -> Result<OpGraph> {
    match mode {
        LowerMode::Naive => lower_gcn_naive(params, g.num_nodes, false),
        LowerMode::Stagr => {
            let adj = build_adjacency(g, true, true);
            let norm = transforms::preg_norm_matrix(&adj)?;
            transforms::stagr_lower(params, &norm)
        }
        LowerMode::Grad => transforms::grad_lower(params, g.num_nodes),
        other => Err(Error::Config(format!(
            "mode {other:?} does not apply to convolution layers"
        ))),
    }
}

pub fn lower_gat(
    params: &GatLayerParams,
    g: &Graph,
    mode: LowerMode,
    apply_elu: bool,
) -> Result<OpGraph> {
    let keep = || build_adjacency(g, true, true);
    match mode {
        LowerMode::Naive => lower_gat_naive(params, g.num_nodes, apply_elu),
        LowerMode::Stagr => Ok(transforms::stagr_lower_gat(params, &keep(), apply_elu)?),
        LowerMode::Effop => {
            let base = transforms::stagr_lower_gat(params, &keep(), apply_elu)?;
            Ok(transforms::effop_rewrite(&base)?.0)
        }
        LowerMode::Grax1 => {
            let base = transforms::stagr_lower_gat(params, &keep(), apply_elu)?;
            let (eff, _) = transforms::effop_rewrite(&base)?;
            Ok(transforms::grax1_apply(&eff)?.0)
        }
        LowerMode::Grax2 => {
            let base = transforms::stagr_lower_gat(params, &keep(), apply_elu)?;
            let (eff, _) = transforms::effop_rewrite(&base)?;
            Ok(transforms::grax2_apply(&eff)?.0)
        }
        other => Err(Error::Config(format!(
            "mode {other:?} does not apply to attention layers"
        ))),
    }
}

pub fn lower_sage(params: &SageLayerParams, g: &Graph, mode: LowerMode) -> Result<OpGraph> {
    match mode {
        LowerMode::Naive => lower_sage_naive(params, g.num_nodes),
        LowerMode::Stagr => transforms::stagr_lower_sage(params, g),
        LowerMode::Effop => {
            let base = transforms::stagr_lower_sage(params, g)?;
            Ok(transforms::effop_rewrite(&base)?.0)
        }
        LowerMode::Grax3 => {
            if params.aggregator != Aggregator::Max {
                return Err(Error::Config(
                    "grax3 applies only to the max aggregator".into(),
                ));
            }
            let sadj = sampled_adjacency(g, params.sample_size, params.sample_seed);
            transforms::grax3_lower(params, &sadj)
        }
        other => Err(Error::Config(format!(
            "mode {other:?} does not apply to sampled-aggregation layers"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;
    use ndarray::array;

    fn gcn_params() -> GcnLayerParams {
        GcnLayerParams {
            weight: array![[0.5, -1.0], [1.5, 0.25], [0.1, 0.9]],
            bias: Some(array![0.1, -0.2]),
        }
    }

    #[test]
    fn naive_gcn_census_has_gather_and_div() {
        let g = lower_gcn_naive(&gcn_params(), 4, false).unwrap();
        assert!(validate(&g).is_ok());
        assert!(g.count_kind(OpKind::Gather) >= 1);
        assert!(g.count_kind(OpKind::Div) >= 1);
        assert!(g.count_kind(OpKind::Sqrt) >= 1);
        assert_eq!(g.count_kind(OpKind::MatMul), 2);
    }

    #[test]
    fn naive_gcn_marks_preprocess_stage() {
        let g = lower_gcn_naive(&gcn_params(), 4, false).unwrap();
        let pre: Vec<&str> = g
            .nodes
            .iter()
            .filter(|n| n.attr_str("stage") == Some("preprocess"))
            .map(|n| n.name.as_str())
            .collect();
        assert!(pre.contains(&"norm"));
        assert!(pre.contains(&"deg"));
        assert!(!pre.contains(&"hw"));
    }

    #[test]
    fn naive_gat_census_has_control_ops() {
        let params = GatLayerParams {
            weight: array![[0.2, -0.3], [0.7, 0.4]],
            attn_src: array![0.1, -0.2],
            attn_dst: array![-0.15, 0.25],
            leaky_slope: 0.2,
            heads: 1,
        };
        let g = lower_gat_naive(&params, 4, true).unwrap();
        assert!(validate(&g).is_ok());
        assert_eq!(g.count_kind(OpKind::Select), 1);
        assert_eq!(g.count_kind(OpKind::Softmax), 1);
        assert_eq!(g.count_kind(OpKind::Greater), 1);
        assert_eq!(g.count_kind(OpKind::Transpose), 1);
        assert_eq!(g.count_kind(OpKind::Broadcast), 2);
        assert_eq!(g.count_kind(OpKind::ELU), 1);
    }

    #[test]
    fn naive_sage_census_by_aggregator() {
        let mk = |aggregator| SageLayerParams {
            weight_self: array![[1.0, 0.0], [0.0, 1.0]],
            weight_neigh: array![[1.0, 0.0], [0.0, 1.0]],
            aggregator,
            sample_size: 3,
            sample_seed: 5,
        };
        let mean = lower_sage_naive(&mk(Aggregator::Mean), 4).unwrap();
        assert!(validate(&mean).is_ok());
        assert_eq!(mean.count_kind(OpKind::Gather), 1);
        assert_eq!(mean.count_kind(OpKind::Div), 1);
        let max = lower_sage_naive(&mk(Aggregator::Max), 4).unwrap();
        assert!(validate(&max).is_ok());
        assert_eq!(max.count_kind(OpKind::Select), 2);
        assert_eq!(max.count_kind(OpKind::ReduceMax), 1);
    }

    #[test]
    fn sample_planes_are_consistent_with_sampling() {
        let features = ndarray::Array2::zeros((5, 2));
        let edges: Vec<(usize, usize)> = (1..5).map(|j| (0, j)).collect();
        let g = Graph::new(5, edges, features, None).unwrap();
        let (idx, mask) = sample_planes(&g, 2, 9);
        let samples = sample_neighbors(&g, 2, 9);
        for k in 0..2 {
            assert_eq!(idx[[0, k]] as usize, samples[0][k]);
            assert_eq!(mask[[0, k]], 1.0);
        }
        // Node 4 has no out-neighbors.
        assert_eq!(mask.row(4).sum(), 0.0);
        let sadj = sampled_adjacency(&g, 2, 9);
        assert_eq!(sadj.row(0).sum(), 2.0);
        assert_eq!(sadj.row(4).sum(), 0.0);
    }
}
