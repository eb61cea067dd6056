//! Graph transformation passes.
//!
//! Every pass is a pure function from operator graph to operator graph plus a
//! [`PassReport`] describing what it matched. Exact passes (preg, stagr, grad,
//! effop, symg, cacheg, grasp) preserve outputs bit-for-bit; approximating
//! passes (grax1, grax2, grax3) trade bounded output changes for cheaper ops
//! and are gated behind an explicit opt-in at the pipeline level.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ir::{attrs, AttrValue, GraphBuilder, NodeId, OpGraph, OpKind};
use crate::lower::{lower_gat_with, lower_sage_with, sample_planes, GatLowering, SageLowering};
use crate::reference::{
    sample_neighbors, GatLayerParams, GcnLayerParams, NormMatrix, SageLayerParams,
};

/// What a pass did to a graph. `matched == 0` means the pass was a no-op for
/// this graph; `note` explains why when that is expected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: String,
    pub matched: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PassReport {
    pub(crate) fn new(pass: &str, matched: usize, before: &OpGraph, after: &OpGraph) -> Self {
        PassReport {
            pass: pass.to_string(),
            matched,
            nodes_before: before.nodes.len(),
            nodes_after: after.nodes.len(),
            note: None,
        }
    }

    fn with_note(mut self, note: String) -> Self {
        self.note = Some(note);
        self
    }
}

// ── Rebuild machinery ──────────────────────────────────────────────────────

/// Rewrites work by rebuilding: walk source nodes in id order, either copying
/// a node (inputs remapped) or substituting a replacement subgraph. Constants
/// keep their payload `Arc`s, so sharing survives rewrites.
pub(crate) struct Rebuilder<'a> {
    pub(crate) src: &'a OpGraph,
    pub(crate) b: GraphBuilder,
    pub(crate) map: Vec<Option<NodeId>>,
}

impl<'a> Rebuilder<'a> {
    pub(crate) fn new(src: &'a OpGraph) -> Self {
        Rebuilder {
            src,
            b: GraphBuilder::new(),
            map: vec![None; src.nodes.len()],
        }
    }

    pub(crate) fn mapped(&self, old: NodeId) -> NodeId {
        self.map[old].expect("node used before being rebuilt")
    }

    pub(crate) fn substitute(&mut self, old: NodeId, new: NodeId) {
        self.map[old] = Some(new);
    }

    pub(crate) fn copy(&mut self, old: NodeId) -> Result<NodeId> {
        let n = &self.src.nodes[old];
        let new = match n.kind {
            OpKind::Input => self.b.input(&n.name, n.out_shape.clone()),
            OpKind::Constant => {
                let entry = self
                    .src
                    .const_of(n)
                    .ok_or_else(|| Error::Graph {
                        node: old,
                        message: "constant without payload".into(),
                    })?;
                let id = self.b.constant_shared(&n.name, Arc::clone(&entry.data));
                for (k, v) in &n.attrs {
                    if k != "const_index" {
                        self.b.set_attr(id, k, v.clone());
                    }
                }
                self.b.set_dtype(id, n.dtype);
                id
            }
            OpKind::Output => {
                let of = self.mapped(n.inputs[0]);
                self.b.output(&n.name, of)
            }
            kind => {
                let ins: Vec<NodeId> = n.inputs.iter().map(|&i| self.mapped(i)).collect();
                let id = self.b.op(kind, &n.name, &ins, n.attrs.clone())?;
                self.b.set_dtype(id, n.dtype);
                id
            }
        };
        self.map[old] = Some(new);
        Ok(new)
    }

    pub(crate) fn finish(self) -> OpGraph {
        self.b.finish()
    }
}

/// Drop nodes with no path to an output. Inputs are always kept (they are the
/// graph's interface); constants and ops are dropped when orphaned.
pub fn prune_dead(g: &OpGraph) -> Result<OpGraph> {
    let mut live = vec![false; g.nodes.len()];
    let mut stack: Vec<NodeId> = g.outputs.clone();
    while let Some(id) = stack.pop() {
        if live[id] {
            continue;
        }
        live[id] = true;
        stack.extend(&g.nodes[id].inputs);
    }
    for &i in &g.inputs {
        live[i] = true;
    }
    let mut rb = Rebuilder::new(g);
    for id in 0..g.nodes.len() {
        if live[id] {
            rb.copy(id)?;
        }
    }
    Ok(rb.finish())
}

// ── preg: frozen symmetric normalization ───────────────────────────────────

/// N = D^-1/2 (A+I) D^-1/2 computed once on the host in f64 and rounded to
/// f32 at the end. `adj` must already carry self-loops on every non-isolated
/// row; all-zero rows (padding slots) normalize to all-zero rows by the
/// 0/0 -> 0 convention, so inactive capacity never leaks into active nodes.
pub fn preg_norm_matrix(adj: &Array2<f32>) -> Result<NormMatrix> {
    let n = adj.nrows();
    if adj.ncols() != n {
        return Err(Error::Shape(format!(
            "normalization needs a square adjacency, got {:?}",
            adj.shape()
        )));
    }
    let mut scale = vec![0f64; n];
    for i in 0..n {
        let d: f64 = adj.row(i).iter().map(|&v| v as f64).sum();
        if d < 0.0 {
            return Err(Error::Pass(format!("row {i} has negative degree {d}")));
        }
        if d > 0.0 && adj[[i, i]] == 0.0 {
            return Err(Error::Pass(format!(
                "row {i} lacks a self-loop; pass the self-looped adjacency"
            )));
        }
        scale[i] = if d == 0.0 { 0.0 } else { 1.0 / d.sqrt() };
    }
    let mut values = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let a = adj[[i, j]] as f64;
            if a != 0.0 {
                values[[i, j]] = (scale[i] * a * scale[j]) as f32;
            }
        }
    }
    Ok(NormMatrix { values })
}

// ── stagr / grad: static and dynamic aggregation-as-matmul ─────────────────

/// Convolution with the normalization frozen as a constant: two matmuls and
/// an optional bias, nothing else. Shares `norm` across layers when callers
/// pass the same `Arc`.
pub fn stagr_lower_shared(
    params: &GcnLayerParams,
    norm: Arc<ArrayD<f32>>,
    relu_epilogue: bool,
) -> Result<OpGraph> {
    if norm.ndim() != 2 || norm.shape()[0] != norm.shape()[1] {
        return Err(Error::Shape(format!(
            "norm constant must be square rank 2, got {:?}",
            norm.shape()
        )));
    }
    let n = norm.shape()[0];
    let f_in = params.weight.nrows();
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![n, f_in]);
    let nc = b.constant_shared("norm", norm);
    let w = b.constant("weight", params.weight.clone().into_dyn());
    let hw = b.op(OpKind::MatMul, "hw", &[h, w], attrs(&[]))?;
    let agg = b.op(OpKind::MatMul, "agg", &[nc, hw], attrs(&[]))?;
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

pub fn stagr_lower(params: &GcnLayerParams, norm: &NormMatrix) -> Result<OpGraph> {
    stagr_lower_shared(params, Arc::new(norm.values.clone().into_dyn()), false)
}

/// Same two-matmul shape as stagr, but the normalization arrives as a runtime
/// input sized to the padded capacity, so connectivity can change between
/// runs without recompiling.
pub fn grad_lower_with(
    params: &GcnLayerParams,
    capacity: usize,
    relu_epilogue: bool,
) -> Result<OpGraph> {
    let f_in = params.weight.nrows();
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![capacity, f_in]);
    let nc = b.input("norm", vec![capacity, capacity]);
    let w = b.constant("weight", params.weight.clone().into_dyn());
    let hw = b.op(OpKind::MatMul, "hw", &[h, w], attrs(&[]))?;
    let agg = b.op(OpKind::MatMul, "agg", &[nc, hw], attrs(&[]))?;
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

pub fn grad_lower(params: &GcnLayerParams, capacity: usize) -> Result<OpGraph> {
    grad_lower_with(params, capacity, false)
}

/// Attention with the edge-keep mask (self-looped adjacency, binary) frozen
/// as a constant: the runtime adjacency input and its Greater node disappear,
/// leaving Select as the only masking op for effop to recast.
pub fn stagr_lower_gat(
    params: &GatLayerParams,
    keep: &Array2<f32>,
    apply_elu: bool,
) -> Result<OpGraph> {
    lower_gat_with(
        params,
        keep.nrows(),
        &GatLowering {
            keep_const: Some(keep.clone()),
            apply_elu,
        },
    )
}

/// Sampled aggregation with sampling frozen at compile time. Mean collapses
/// the gather/mask/divide chain into one matmul against a row-normalized
/// sampled adjacency; max keeps the gather form (a dense masked form would
/// cube memory) with the index/validity planes as constants.
pub fn stagr_lower_sage(params: &SageLayerParams, g: &Graph) -> Result<OpGraph> {
    match params.aggregator {
        crate::reference::Aggregator::Mean => {
            let samples = sample_neighbors(g, params.sample_size, params.sample_seed);
            let n = g.num_nodes;
            let mut nadj = Array2::<f32>::zeros((n, n));
            for (i, s) in samples.iter().enumerate() {
                if s.is_empty() {
                    continue;
                }
                let w = 1.0 / s.len() as f32;
                for &j in s {
                    nadj[[i, j]] = w;
                }
            }
            let f_in = params.weight_self.nrows();
            let mut b = GraphBuilder::new();
            let h = b.input("h", vec![n, f_in]);
            let na = b.constant("sampled_norm", nadj.into_dyn());
            let ws = b.constant("weight_self", params.weight_self.clone().into_dyn());
            let wn = b.constant("weight_neigh", params.weight_neigh.clone().into_dyn());
            let selfp = b.op(OpKind::MatMul, "self_proj", &[h, ws], attrs(&[]))?;
            let agg = b.op(OpKind::MatMul, "agg", &[na, h], attrs(&[]))?;
            let np = b.op(OpKind::MatMul, "neigh_proj", &[agg, wn], attrs(&[]))?;
            let out = b.op(OpKind::EltwiseAdd, "out", &[selfp, np], attrs(&[]))?;
            b.output("out", out);
            Ok(b.finish())
        }
        crate::reference::Aggregator::Max => {
            let planes = sample_planes(g, params.sample_size, params.sample_seed);
            lower_sage_with(
                params,
                g.num_nodes,
                &SageLowering {
                    frozen_planes: Some(planes),
                },
            )
        }
    }
}

// ── effop: Select -> multiply/add recast ───────────────────────────────────

/// Rewrites `Select(cond, x, fill)` with a scalar constant fill into
/// `x*cond + (cond - 1)*(-fill)` (just `x*cond` when fill is zero). For a
/// 0/1 cond this is bit-exact and every surviving op runs on the matrix
/// engine. The penalty term is derived from cond itself rather than a new
/// dense constant, so no extra weight traffic appears.
pub fn effop_rewrite(g: &OpGraph) -> Result<(OpGraph, PassReport)> {
    let mut rb = Rebuilder::new(g);
    let mut matched = 0usize;
    for old in 0..g.nodes.len() {
        let n = &g.nodes[old];
        if n.kind == OpKind::Select {
            let fill_node = &g.nodes[n.inputs[2]];
            let fill = g
                .const_of(fill_node)
                .filter(|e| e.data.len() == 1)
                .map(|e| e.data.iter().next().copied().unwrap_or(0.0));
            if let Some(fill) = fill {
                let cond = rb.mapped(n.inputs[0]);
                let x = rb.mapped(n.inputs[1]);
                let gate = rb.b.op(
                    OpKind::EltwiseMul,
                    &format!("{}_gate", n.name),
                    &[x, cond],
                    attrs(&[]),
                )?;
                let new = if fill == 0.0 {
                    gate
                } else {
                    let one = rb.b.scalar(&format!("{}_one", n.name), 1.0);
                    let neg_fill = rb.b.scalar(&format!("{}_negfill", n.name), -fill);
                    let lowered = rb.b.op(
                        OpKind::EltwiseSub,
                        &format!("{}_lowered", n.name),
                        &[cond, one],
                        attrs(&[]),
                    )?;
                    let pen = rb.b.op(
                        OpKind::EltwiseMul,
                        &format!("{}_penalty", n.name),
                        &[lowered, neg_fill],
                        attrs(&[]),
                    )?;
                    rb.b.set_attr(pen, "effop_penalty", AttrValue::Int(1));
                    rb.b.op(
                        OpKind::EltwiseAdd,
                        &format!("{}_recast", n.name),
                        &[gate, pen],
                        attrs(&[]),
                    )?
                };
                rb.substitute(old, new);
                matched += 1;
                continue;
            }
        }
        rb.copy(old)?;
    }
    let out = prune_dead(&rb.finish())?;
    let mut report = PassReport::new("effop", matched, g, &out);
    if matched == 0 {
        report = report.with_note(
            "no Select with a scalar constant fill; graph already runs without lane ops".into(),
        );
    }
    Ok((out, report))
}

// ── grax1: drop the gating multiply ────────────────────────────────────────

/// In the effop form `x*cond + penalty`, on-edge entries already equal `x`
/// and off-edge entries sit a full fill below anything that survives the
/// softmax, so the gating multiply changes nothing that the row-max cares
/// about. Rewrites `EltwiseAdd(EltwiseMul(x, cond), penalty)` into
/// `EltwiseAdd(x, penalty)`. Off-edge logits shift from `-fill` to
/// `x - fill`; with |x| bounded well below the fill the softmax mass there
/// still underflows to zero.
pub fn grax1_apply(g: &OpGraph) -> Result<(OpGraph, PassReport)> {
    let mut rb = Rebuilder::new(g);
    let mut matched = 0usize;
    for old in 0..g.nodes.len() {
        let n = &g.nodes[old];
        if n.kind == OpKind::EltwiseAdd && n.inputs.len() == 2 {
            let (a, b_id) = (n.inputs[0], n.inputs[1]);
            let pick = |mul: NodeId, pen: NodeId| -> Option<(NodeId, NodeId)> {
                let m = &g.nodes[mul];
                let p = &g.nodes[pen];
                if m.kind == OpKind::EltwiseMul && p.attr_int("effop_penalty") == Some(1) {
                    // The gate input that is not the select condition is x;
                    // the condition is whatever feeds the penalty's subtract.
                    let cond = g.nodes[p.inputs[0]].inputs.first().copied();
                    let x = match cond {
                        Some(c) if m.inputs[1] == c => m.inputs[0],
                        Some(c) if m.inputs[0] == c => m.inputs[1],
                        _ => m.inputs[0],
                    };
                    Some((x, pen))
                } else {
                    None
                }
            };
            if let Some((x, pen)) = pick(a, b_id).or_else(|| pick(b_id, a)) {
                let new = rb.b.op(
                    OpKind::EltwiseAdd,
                    &format!("{}_nogate", n.name),
                    &[rb.mapped(x), rb.mapped(pen)],
                    attrs(&[]),
                )?;
                rb.substitute(old, new);
                matched += 1;
                continue;
            }
        }
        rb.copy(old)?;
    }
    let out = prune_dead(&rb.finish())?;
    let mut report = PassReport::new("grax1", matched, g, &out);
    if matched == 0 {
        report = report.with_note("no effop-recast select found; run effop first".into());
    }
    Ok((out, report))
}

// ── grax2: collapse the score spread ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grax2Target {
    /// e'[i][j] = s[i] + d[i]: one add on the (n,1) scores, one broadcast.
    RowConstant,
    /// e'[i][j] = s[j] + d[j]: keeps a (cheap) transpose of the summed score.
    ColumnConstant,
}

/// Rewrites the attention-score spread
/// `Broadcast(s, cols) + Broadcast(Transpose(d), rows)` into an add on the
/// raw (n,1) scores followed by a single broadcast. The pairwise structure of
/// the logits collapses to a per-row (or per-column) constant, so attention
/// inside each neighborhood flattens; ranking across rows is preserved.
pub fn grax2_apply_with(g: &OpGraph, target: Grax2Target) -> Result<(OpGraph, PassReport)> {
    // Matches Add(bcast_axis1(s), bcast_axis0(transpose(d))) in either order.
    let spread_src = |id: NodeId| -> Option<(NodeId, usize)> {
        let n = &g.nodes[id];
        if n.kind != OpKind::Broadcast {
            return None;
        }
        let mode = n.attr_str("mode").unwrap_or("expand");
        if mode != "expand" {
            return None;
        }
        let axis = n.attr_int("axis")? as usize;
        Some((n.inputs[0], axis))
    };
    let mut rb = Rebuilder::new(g);
    let mut matched = 0usize;
    for old in 0..g.nodes.len() {
        let n = &g.nodes[old];
        if n.kind == OpKind::EltwiseAdd && n.inputs.len() == 2 {
            let pair = spread_src(n.inputs[0]).zip(spread_src(n.inputs[1]));
            let hit = pair.and_then(|((src_a, ax_a), (src_b, ax_b))| {
                let (row_src, col_src) = match (ax_a, ax_b) {
                    (1, 0) => (src_a, src_b),
                    (0, 1) => (src_b, src_a),
                    _ => return None,
                };
                let t = &g.nodes[col_src];
                if t.kind != OpKind::Transpose {
                    return None;
                }
                Some((row_src, t.inputs[0]))
            });
            if let Some((s_id, d_id)) = hit {
                let rows = n.out_shape[0];
                let cols = n.out_shape[1];
                let s = rb.mapped(s_id);
                let d = rb.mapped(d_id);
                let summed = rb.b.op(
                    OpKind::EltwiseAdd,
                    &format!("{}_summed", n.name),
                    &[s, d],
                    attrs(&[]),
                )?;
                let new = match target {
                    Grax2Target::RowConstant => rb.b.op(
                        OpKind::Broadcast,
                        &format!("{}_spread", n.name),
                        &[summed],
                        attrs(&[
                            ("axis", AttrValue::Int(1)),
                            ("size", AttrValue::Int(cols as i64)),
                        ]),
                    )?,
                    Grax2Target::ColumnConstant => {
                        let t = rb.b.op(
                            OpKind::Transpose,
                            &format!("{}_t", n.name),
                            &[summed],
                            attrs(&[]),
                        )?;
                        rb.b.op(
                            OpKind::Broadcast,
                            &format!("{}_spread", n.name),
                            &[t],
                            attrs(&[
                                ("axis", AttrValue::Int(0)),
                                ("size", AttrValue::Int(rows as i64)),
                            ]),
                        )?
                    }
                };
                rb.substitute(old, new);
                matched += 1;
                continue;
            }
        }
        rb.copy(old)?;
    }
    let out = prune_dead(&rb.finish())?;
    let mut report = PassReport::new("grax2", matched, g, &out);
    if matched == 0 {
        report = report.with_note("no broadcast/transpose score spread found".into());
    }
    Ok((out, report))
}

pub fn grax2_apply(g: &OpGraph) -> Result<(OpGraph, PassReport)> {
    grax2_apply_with(g, Grax2Target::RowConstant)
}

// ── grax3: max aggregation as mul + pool ───────────────────────────────────

/// Max-aggregation without gather/select: broadcast features and the binary
/// sampled adjacency to rank 3, multiply, and max-pool over the neighbor
/// axis — all matrix-engine ops. Exact for the max aggregator when features
/// are non-negative (unsampled slots contribute zeros, which a non-negative
/// max absorbs); negative features would be clipped toward zero, which is why
/// this stays an approximating pass. Memory is n^2 * f, so this form is for
/// small-capacity deployments; cost estimation works at any size.
pub fn grax3_lower(params: &SageLayerParams, sampled_adj: &Array2<f32>) -> Result<OpGraph> {
    let n = sampled_adj.nrows();
    if sampled_adj.ncols() != n {
        return Err(Error::Shape(format!(
            "sampled adjacency must be square, got {:?}",
            sampled_adj.shape()
        )));
    }
    let f_in = params.weight_self.nrows();
    let mut b = GraphBuilder::new();
    let h = b.input("h", vec![n, f_in]);
    let sa = b.constant("sampled_adj", sampled_adj.clone().into_dyn());
    let ws = b.constant("weight_self", params.weight_self.clone().into_dyn());
    let wn = b.constant("weight_neigh", params.weight_neigh.clone().into_dyn());
    let h3 = b.op(
        OpKind::Broadcast,
        "feat_planes",
        &[h],
        attrs(&[
            ("axis", AttrValue::Int(0)),
            ("size", AttrValue::Int(n as i64)),
            ("mode", AttrValue::Str("insert".into())),
        ]),
    )?;
    let a3 = b.op(
        OpKind::Broadcast,
        "adj_planes",
        &[sa],
        attrs(&[
            ("axis", AttrValue::Int(2)),
            ("size", AttrValue::Int(f_in as i64)),
            ("mode", AttrValue::Str("insert".into())),
        ]),
    )?;
    let prod = b.op(OpKind::EltwiseMul, "gated_feats", &[h3, a3], attrs(&[]))?;
    let agg = b.op(
        OpKind::MaxPool,
        "agg",
        &[prod],
        attrs(&[("axis", AttrValue::Int(1))]),
    )?;
    let selfp = b.op(OpKind::MatMul, "self_proj", &[h, ws], attrs(&[]))?;
    let np = b.op(OpKind::MatMul, "neigh_proj", &[agg, wn], attrs(&[]))?;
    let out = b.op(OpKind::EltwiseAdd, "out", &[selfp, np], attrs(&[]))?;
    b.output("out", out);
    Ok(b.finish())
}

// ── symg: symmetric constant packing ───────────────────────────────────────

/// Lower triangle (diagonal included) of a symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedSymMatrix {
    pub n: usize,
    pub data: Vec<f32>,
}

pub const SYMG_TOL: f32 = 1e-7;

pub fn symg_pack(m: &Array2<f32>, tol: f32) -> Result<PackedSymMatrix> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape(format!(
            "cannot pack non-square {:?}",
            m.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            let asym = (m[[i, j]] - m[[j, i]]).abs();
            if asym > tol {
                return Err(Error::Pass(format!(
                    "matrix is asymmetric at ({i}, {j}): |delta| = {asym:e} > {tol:e}"
                )));
            }
            data.push(m[[i, j]]);
        }
    }
    Ok(PackedSymMatrix { n, data })
}

pub fn symg_unpack(p: &PackedSymMatrix) -> Array2<f32> {
    let mut m = Array2::<f32>::zeros((p.n, p.n));
    let mut k = 0;
    for i in 0..p.n {
        for j in 0..=i {
            m[[i, j]] = p.data[k];
            m[[j, i]] = p.data[k];
            k += 1;
        }
    }
    m
}

/// Transfer-size ratio of the packed triangle vs the full matrix:
/// (n(n+1)/2) / n^2 = (n+1)/(2n). Approaches 1/2 from above as n grows.
pub fn symg_byte_ratio(n: usize) -> f64 {
    (n as f64 + 1.0) / (2.0 * n as f64)
}

/// Tags square symmetric constants with `packed = 1`; the transfer model then
/// charges triangle bytes for their DMA. Topology is untouched (unpack happens
/// during the DMA itself), so outputs are bit-identical.
pub fn symg_annotate(g: &OpGraph) -> Result<(OpGraph, PassReport)> {
    let mut out = g.clone();
    let mut matched = 0usize;
    let mut tagged: Vec<NodeId> = Vec::new();
    for n in &out.nodes {
        if n.kind != OpKind::Constant || n.out_shape.len() != 2 {
            continue;
        }
        let (r, c) = (n.out_shape[0], n.out_shape[1]);
        if r != c || r < 2 {
            continue;
        }
        let entry = out.const_of(n).expect("validated constant");
        let m = entry
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let symmetric = (0..r).all(|i| (i + 1..r).all(|j| (m[[i, j]] - m[[j, i]]).abs() <= SYMG_TOL));
        if symmetric {
            tagged.push(n.id);
        }
    }
    for id in tagged {
        out.nodes[id]
            .attrs
            .insert("packed".into(), AttrValue::Int(1));
        matched += 1;
    }
    let mut report = PassReport::new("symg", matched, g, &out);
    if matched == 0 {
        report = report.with_note("no square symmetric constants to pack".into());
    }
    Ok((out, report))
}

// ── cacheg: dedup constant traffic across layers ───────────────────────────

/// Marks repeat appearances of the same constant payload (same `Arc`
/// allocation) with `cached = 1` across a model's layer graphs, in layer then
/// node order. The transfer model charges DMA for the first appearance only,
/// mirroring a weight pool that persists on-device between layers.
pub fn cacheg_annotate(graphs: &mut [OpGraph]) -> PassReport {
    let before: usize = graphs.iter().map(|g| g.nodes.len()).sum();
    let mut seen: HashSet<*const ArrayD<f32>> = HashSet::new();
    let mut matched = 0usize;
    for g in graphs.iter_mut() {
        let repeats: Vec<NodeId> = g
            .nodes
            .iter()
            .filter(|n| n.kind == OpKind::Constant)
            .filter_map(|n| {
                let ptr = Arc::as_ptr(&g.const_of(n)?.data);
                if seen.insert(ptr) {
                    None
                } else {
                    Some(n.id)
                }
            })
            .collect();
        for id in repeats {
            g.nodes[id].attrs.insert("cached".into(), AttrValue::Int(1));
            matched += 1;
        }
    }
    let mut report = PassReport {
        pass: "cacheg".into(),
        matched,
        nodes_before: before,
        nodes_after: before,
        note: None,
    };
    if matched == 0 {
        report.note = Some("no constant payload appears more than once".into());
    }
    report
}

// ── grasp: sparse constants and zero-skip ──────────────────────────────────

/// Minimum element count before a constant is worth compressing.
pub const GRASP_MIN_NUMEL: usize = 64;

/// Tags constants whose zero fraction meets the threshold with `zvc = 1`
/// (+ `nnz`), and matmuls whose left operand is such a constant with
/// `zvc = 1` so the matrix engine skips zero rows of work. Values are
/// untouched; only stored bytes and executed MAC counts change.
pub fn grasp_annotate(g: &OpGraph, min_zero_fraction: f32) -> (OpGraph, PassReport) {
    let mut out = g.clone();
    let mut sparse: Vec<(NodeId, usize)> = Vec::new();
    for n in &out.nodes {
        if n.kind != OpKind::Constant || n.numel() < GRASP_MIN_NUMEL {
            continue;
        }
        let entry = out.const_of(n).expect("validated constant");
        let nnz = entry.data.iter().filter(|&&v| v != 0.0).count();
        let zero_frac = 1.0 - nnz as f32 / n.numel() as f32;
        if zero_frac >= min_zero_fraction {
            sparse.push((n.id, nnz));
        }
    }
    let mut matched = 0usize;
    for &(id, nnz) in &sparse {
        out.nodes[id].attrs.insert("zvc".into(), AttrValue::Int(1));
        out.nodes[id]
            .attrs
            .insert("nnz".into(), AttrValue::Int(nnz as i64));
        matched += 1;
    }
    let sparse_ids: HashSet<NodeId> = sparse.iter().map(|&(id, _)| id).collect();
    let mut skip_matmuls = 0usize;
    let gated: Vec<NodeId> = out
        .nodes
        .iter()
        .filter(|n| n.kind == OpKind::MatMul && sparse_ids.contains(&n.inputs[0]))
        .map(|n| n.id)
        .collect();
    for id in gated {
        out.nodes[id].attrs.insert("zvc".into(), AttrValue::Int(1));
        skip_matmuls += 1;
    }
    let mut report = PassReport::new("grasp", matched, g, &out);
    report.note = Some(if matched == 0 {
        "no constant met the zero-fraction threshold".into()
    } else {
        format!("{skip_matmuls} matmul(s) zero-skip enabled")
    });
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_adjacency;
    use crate::ir::validate;
    use crate::reference::Aggregator;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn chain_graph() -> Graph {
        // 0-1-2-3 path.
        let features = Array2::zeros((4, 3));
        Graph::new(4, vec![(0, 1), (1, 2), (2, 3)], features, None).unwrap()
    }

    fn gcn_params() -> GcnLayerParams {
        GcnLayerParams {
            weight: array![[0.5, -1.0], [1.5, 0.25], [0.1, 0.9]],
            bias: None,
        }
    }

    fn gat_params() -> GatLayerParams {
        GatLayerParams {
            weight: array![[0.2, -0.3], [0.7, 0.4], [-0.6, 0.1]],
            attn_src: array![0.1, -0.2],
            attn_dst: array![-0.15, 0.25],
            leaky_slope: 0.2,
            heads: 1,
        }
    }

    #[test]
    fn preg_matches_dense_oracle() {
        let g = chain_graph();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        // Brute-force oracle in f64.
        let n = 4;
        for i in 0..n {
            let di: f64 = adj.row(i).iter().map(|&v| v as f64).sum();
            for j in 0..n {
                let dj: f64 = adj.row(j).iter().map(|&v| v as f64).sum();
                let want = if adj[[i, j]] == 0.0 {
                    0.0
                } else {
                    1.0 / (di * dj).sqrt()
                };
                assert_abs_diff_eq!(norm.values[[i, j]] as f64, want, epsilon = 1e-7);
            }
        }
        assert!(norm.max_asymmetry() <= 1e-7);
    }

    #[test]
    fn preg_zero_row_stays_zero() {
        let mut adj = Array2::<f32>::zeros((3, 3));
        adj[[0, 0]] = 1.0;
        adj[[0, 1]] = 1.0;
        adj[[1, 0]] = 1.0;
        adj[[1, 1]] = 1.0;
        // Row 2 is padding: all zero.
        let norm = preg_norm_matrix(&adj).unwrap();
        assert_eq!(norm.values.row(2).sum(), 0.0);
        assert_eq!(norm.values.column(2).sum(), 0.0);
        assert!(norm.values[[0, 0]] > 0.0);
    }

    #[test]
    fn preg_rejects_missing_self_loop() {
        let mut adj = Array2::<f32>::zeros((2, 2));
        adj[[0, 1]] = 1.0;
        adj[[1, 0]] = 1.0;
        assert!(preg_norm_matrix(&adj).is_err());
        let bad = Array2::<f32>::zeros((2, 3));
        assert!(preg_norm_matrix(&bad).is_err());
    }

    #[test]
    fn stagr_gcn_is_two_matmuls() {
        let g = chain_graph();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        let og = stagr_lower(&gcn_params(), &norm).unwrap();
        assert!(validate(&og).is_ok());
        assert_eq!(og.count_kind(OpKind::MatMul), 2);
        assert_eq!(og.count_kind(OpKind::Gather), 0);
        assert_eq!(og.count_kind(OpKind::Div), 0);
        assert_eq!(og.count_kind(OpKind::Sqrt), 0);
    }

    #[test]
    fn grad_takes_norm_as_runtime_input() {
        let og = grad_lower(&gcn_params(), 500).unwrap();
        assert!(validate(&og).is_ok());
        assert_eq!(og.inputs.len(), 2);
        let norm_in = og.inputs.iter().map(|&i| &og.nodes[i]).find(|n| n.name == "norm");
        assert_eq!(norm_in.unwrap().out_shape, vec![500, 500]);
    }

    #[test]
    fn effop_removes_selects_from_attention() {
        let g = chain_graph();
        let keep = build_adjacency(&g, true, true);
        let base = stagr_lower_gat(&gat_params(), &keep, false).unwrap();
        assert_eq!(base.count_kind(OpKind::Select), 1);
        let (eff, report) = effop_rewrite(&base).unwrap();
        assert!(validate(&eff).is_ok());
        assert_eq!(report.matched, 1);
        assert_eq!(eff.count_kind(OpKind::Select), 0);
        assert!(eff
            .nodes
            .iter()
            .any(|n| n.attr_int("effop_penalty") == Some(1)));
    }

    #[test]
    fn effop_no_op_on_selectless_graph() {
        let g = chain_graph();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        let og = stagr_lower(&gcn_params(), &norm).unwrap();
        let (same, report) = effop_rewrite(&og).unwrap();
        assert_eq!(report.matched, 0);
        assert!(report.note.is_some());
        assert_eq!(same.nodes.len(), og.nodes.len());
    }

    #[test]
    fn grax1_drops_gating_multiply() {
        let g = chain_graph();
        let keep = build_adjacency(&g, true, true);
        let base = stagr_lower_gat(&gat_params(), &keep, false).unwrap();
        let (eff, _) = effop_rewrite(&base).unwrap();
        let muls_before = eff.count_kind(OpKind::EltwiseMul);
        let (gx, report) = grax1_apply(&eff).unwrap();
        assert!(validate(&gx).is_ok());
        assert_eq!(report.matched, 1);
        assert_eq!(gx.count_kind(OpKind::EltwiseMul), muls_before - 1);
        assert!(gx
            .nodes
            .iter()
            .any(|n| n.attr_int("effop_penalty") == Some(1)));
    }

    #[test]
    fn grax2_removes_one_transpose_and_one_broadcast() {
        let g = chain_graph();
        let keep = build_adjacency(&g, true, true);
        let base = stagr_lower_gat(&gat_params(), &keep, false).unwrap();
        let t0 = base.count_kind(OpKind::Transpose);
        let b0 = base.count_kind(OpKind::Broadcast);
        let (gx, report) = grax2_apply(&base).unwrap();
        assert!(validate(&gx).is_ok());
        assert_eq!(report.matched, 1);
        assert_eq!(gx.count_kind(OpKind::Transpose), t0 - 1);
        assert_eq!(gx.count_kind(OpKind::Broadcast), b0 - 1);
        // Column-constant variant keeps a transpose of the summed score.
        let (gc, _) = grax2_apply_with(&base, Grax2Target::ColumnConstant).unwrap();
        assert!(validate(&gc).is_ok());
        assert_eq!(gc.count_kind(OpKind::Transpose), t0);
    }

    #[test]
    fn grax3_builds_pool_form() {
        let params = SageLayerParams {
            weight_self: array![[1.0, 0.0], [0.0, 1.0]],
            weight_neigh: array![[1.0, 0.0], [0.0, 1.0]],
            aggregator: Aggregator::Max,
            sample_size: 2,
            sample_seed: 3,
        };
        let sadj = array![[0.0, 1.0], [1.0, 0.0]];
        let og = grax3_lower(&params, &sadj).unwrap();
        assert!(validate(&og).is_ok());
        assert_eq!(og.count_kind(OpKind::MaxPool), 1);
        assert_eq!(og.count_kind(OpKind::Gather), 0);
        assert_eq!(og.count_kind(OpKind::Select), 0);
    }

    #[test]
    fn symg_pack_roundtrip_and_ratio() {
        let m = array![[2.0, -1.0, 0.0], [-1.0, 3.0, 0.5], [0.0, 0.5, 1.0]];
        let p = symg_pack(&m, SYMG_TOL).unwrap();
        assert_eq!(p.data.len(), 6);
        assert_eq!(symg_unpack(&p), m);
        let mut asym = m.clone();
        asym[[0, 2]] = 0.25;
        assert!(symg_pack(&asym, SYMG_TOL).is_err());
        assert_abs_diff_eq!(symg_byte_ratio(1000), 0.5005, epsilon = 1e-12);
        assert!((symg_byte_ratio(3000) - 0.5).abs() < 2e-4);
    }

    #[test]
    fn symg_annotate_tags_symmetric_constants() {
        let g = chain_graph();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        let og = stagr_lower(&gcn_params(), &norm).unwrap();
        let (tagged, report) = symg_annotate(&og).unwrap();
        assert_eq!(report.matched, 1);
        let norm_node = tagged.nodes.iter().find(|n| n.name == "norm").unwrap();
        assert_eq!(norm_node.attr_int("packed"), Some(1));
        let w = tagged.nodes.iter().find(|n| n.name == "weight").unwrap();
        assert_eq!(w.attr_int("packed"), None);
    }

    #[test]
    fn cacheg_tags_shared_payload_repeats() {
        let g = chain_graph();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        let shared = Arc::new(norm.values.clone().into_dyn());
        let l1 = stagr_lower_shared(&gcn_params(), Arc::clone(&shared), true).unwrap();
        let p2 = GcnLayerParams {
            weight: array![[1.0, 0.0], [0.0, 1.0]],
            bias: None,
        };
        let l2 = stagr_lower_shared(&p2, Arc::clone(&shared), false).unwrap();
        let mut layers = [l1, l2];
        let report = cacheg_annotate(&mut layers);
        assert_eq!(report.matched, 1);
        let first = layers[0].nodes.iter().find(|n| n.name == "norm").unwrap();
        assert_eq!(first.attr_int("cached"), None);
        let second = layers[1].nodes.iter().find(|n| n.name == "norm").unwrap();
        assert_eq!(second.attr_int("cached"), Some(1));
    }

    #[test]
    fn grasp_tags_sparse_constant_and_matmul() {
        // 16x16 norm with a sparse chain structure: mostly zeros.
        let features = Array2::zeros((16, 2));
        let edges: Vec<(usize, usize)> = (0..15).map(|i| (i, i + 1)).collect();
        let g = Graph::new(16, edges, features, None).unwrap();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        let p = GcnLayerParams {
            weight: Array2::ones((2, 2)),
            bias: None,
        };
        let og = stagr_lower(&p, &norm).unwrap();
        let (tagged, report) = grasp_annotate(&og, 0.5);
        assert_eq!(report.matched, 1);
        let norm_node = tagged.nodes.iter().find(|n| n.name == "norm").unwrap();
        assert_eq!(norm_node.attr_int("zvc"), Some(1));
        assert_eq!(norm_node.attr_int("nnz"), Some(16 + 30));
        let agg = tagged.nodes.iter().find(|n| n.name == "agg").unwrap();
        assert_eq!(agg.attr_int("zvc"), Some(1));
    }

    #[test]
    fn prune_keeps_inputs_drops_orphans() {
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![2, 2]);
        let unused = b.input("unused", vec![2, 2]);
        let dead = b.op(OpKind::Transpose, "dead", &[unused], attrs(&[])).unwrap();
        let _ = dead;
        let r = b.op(OpKind::ReLU, "r", &[h], attrs(&[])).unwrap();
        b.output("out", r);
        let g = b.finish();
        let pruned = prune_dead(&g).unwrap();
        assert_eq!(pruned.inputs.len(), 2);
        assert_eq!(pruned.count_kind(OpKind::Transpose), 0);
        assert!(validate(&pruned).is_ok());
    }

    #[test]
    fn stagr_sage_mean_is_matmul_only() {
        let features = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let g = Graph::new(3, vec![(0, 1), (1, 2), (2, 0)], features, None).unwrap();
        let params = SageLayerParams {
            weight_self: Array2::eye(2),
            weight_neigh: Array2::eye(2),
            aggregator: Aggregator::Mean,
            sample_size: 2,
            sample_seed: 1,
        };
        let og = stagr_lower_sage(&params, &g).unwrap();
        assert!(validate(&og).is_ok());
        assert_eq!(og.count_kind(OpKind::Gather), 0);
        assert_eq!(og.count_kind(OpKind::Select), 0);
        assert_eq!(og.count_kind(OpKind::MatMul), 3);
        // Max keeps the gather form with frozen planes.
        let maxp = SageLayerParams {
            aggregator: Aggregator::Max,
            ..params
        };
        let om = stagr_lower_sage(&maxp, &g).unwrap();
        assert!(validate(&om).is_ok());
        assert_eq!(om.inputs.len(), 1);
        assert!(om.count_kind(OpKind::Gather) == 1);
    }
}
