//! Bit-deterministic operator-graph executor.
//!
//! All tensors are f32 (INT8 nodes carry integer quantization levels in f32
//! storage; the matmul kernel accumulates them in i32). Nodes run
//! sequentially in topological order and every reduction accumulates in
//! ascending index order, so a given graph and inputs always produce the
//! same bits — placement, by design, never changes the math, only the cost
//! report.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{broadcast_shapes, validate, OpGraph, OpKind, OpNode};
use crate::quant::{dequantize_value, int8_matmul, quantize_value, CalibrationTable};
use crate::reference::{elu, leaky_relu, relu, DEFAULT_LEAKY_SLOPE};
use crate::sparsity::{matmul_zero_skip, MacStats};

// ── Options and results ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    /// Record every node's output absmax into a calibration table keyed by
    /// node name (feeds INT8 scale selection).
    pub record_absmax: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outputs: BTreeMap<String, ArrayD<f32>>,
    pub mac_stats: MacStats,
    pub calibration: Option<CalibrationTable>,
}

/// Agreement metrics between two runs of graphs with the same output names.
#[derive(Debug, Clone, Serialize)]
pub struct DiffReport {
    pub max_abs: f32,
    /// Fraction of rows whose last-axis argmax matches.
    pub argmax_agreement: f64,
}

// ── Helpers ────────────────────────────────────────────────────────────────

fn exec_err(node: &OpNode, message: impl Into<String>) -> Error {
    Error::Exec {
        node: node.id,
        message: format!("'{}': {}", node.name, message.into()),
    }
}

fn binary<F: Fn(f32, f32) -> f32>(
    node: &OpNode,
    a: &ArrayD<f32>,
    b: &ArrayD<f32>,
    f: F,
) -> Result<ArrayD<f32>> {
    let shape = broadcast_shapes(a.shape(), b.shape())?;
    let av = a
        .broadcast(IxDyn(&shape))
        .ok_or_else(|| exec_err(node, format!("cannot broadcast {:?}", a.shape())))?;
    let bv = b
        .broadcast(IxDyn(&shape))
        .ok_or_else(|| exec_err(node, format!("cannot broadcast {:?}", b.shape())))?;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

fn as_2d<'a>(node: &OpNode, x: &'a ArrayD<f32>) -> Result<ndarray::ArrayView2<'a, f32>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| exec_err(node, format!("expected rank-2 tensor, got {:?}", x.shape())))
}

fn reduce<F: Fn(f32, f32) -> f32 + Copy>(
    x: &ArrayD<f32>,
    axis: usize,
    keepdims: bool,
    init: f32,
    f: F,
) -> ArrayD<f32> {
    // fold_axis walks the reduced axis in ascending index order.
    let mut out = x.fold_axis(Axis(axis), init, |&acc, &v| f(acc, v));
    if keepdims {
        out = out.insert_axis(Axis(axis));
    }
    out
}

fn axis_of(node: &OpNode) -> Result<usize> {
    node.attr_int("axis")
        .map(|a| a as usize)
        .ok_or_else(|| exec_err(node, "missing axis attribute"))
}

fn gather(node: &OpNode, data: &ArrayD<f32>, idx: &ArrayD<f32>, axis: usize) -> Result<ArrayD<f32>> {
    let dshape = data.shape();
    let dim = dshape[axis];
    let outer: usize = dshape[..axis].iter().product();
    let inner: usize = dshape[axis + 1..].iter().product();
    let data_flat = data
        .as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| data.iter().copied().collect());
    let mut taken = Vec::with_capacity(idx.len());
    for &v in idx.iter() {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(exec_err(node, format!("index {v} is not a non-negative integer")));
        }
        let j = v as usize;
        if j >= dim {
            return Err(exec_err(node, format!("index {j} out of range for axis extent {dim}")));
        }
        taken.push(j);
    }
    let mut flat = Vec::with_capacity(outer * taken.len() * inner);
    for o in 0..outer {
        for &j in &taken {
            let start = o * dim * inner + j * inner;
            flat.extend_from_slice(&data_flat[start..start + inner]);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&node.out_shape), flat).map_err(|e| exec_err(node, e.to_string()))
}

fn softmax(x: &ArrayD<f32>, axis: usize) -> ArrayD<f32> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn broadcast_to(node: &OpNode, x: ArrayViewD<f32>) -> Result<ArrayD<f32>> {
    Ok(x.broadcast(IxDyn(&node.out_shape))
        .ok_or_else(|| exec_err(node, format!("cannot broadcast {:?} to {:?}", x.shape(), node.out_shape)))?
        .to_owned())
}

// ── Executor ───────────────────────────────────────────────────────────────

/// Runs a validated graph on the given input bindings.
pub fn execute(
    g: &OpGraph,
    inputs: &BTreeMap<String, ArrayD<f32>>,
    options: &ExecOptions,
) -> Result<RunResult> {
    if let Err(d) = validate(g) {
        return Err(Error::Graph {
            node: d.node,
            message: d.message,
        });
    }
    let mut values: Vec<Option<ArrayD<f32>>> = vec![None; g.nodes.len()];
    let mut outputs = BTreeMap::new();
    let mut mac_stats = MacStats::default();
    let mut calibration = options.record_absmax.then(CalibrationTable::default);

    for node in &g.nodes {
        let arg = |i: usize| -> &ArrayD<f32> {
            values[node.inputs[i]]
                .as_ref()
                .expect("topological order guarantees producers ran")
        };
        let out: ArrayD<f32> = match node.kind {
            OpKind::Input => {
                let bound = inputs
                    .get(&node.name)
                    .ok_or_else(|| Error::Missing(format!("input binding '{}'", node.name)))?;
                if bound.shape() != node.out_shape.as_slice() {
                    return Err(exec_err(
                        node,
                        format!("binding shape {:?} != declared {:?}", bound.shape(), node.out_shape),
                    ));
                }
                bound.clone()
            }
            OpKind::Constant => {
                let entry = g
                    .const_of(node)
                    .ok_or_else(|| exec_err(node, "constant without pool entry"))?;
                entry.data.as_ref().clone()
            }
            OpKind::MatMul => {
                let a = arg(0);
                let b = arg(1);
                let zvc = node.attr_int("zvc") == Some(1);
                if node.dtype == crate::ir::Dtype::INT8 {
                    let (out, stats) = int8_matmul(&as_2d(node, a)?, &as_2d(node, b)?, zvc)
                        .map_err(|e| exec_err(node, e.to_string()))?;
                    mac_stats.merge(stats);
                    out.into_dyn()
                } else if zvc {
                    let (out, stats) =
                        matmul_zero_skip(&as_2d(node, a)?.to_owned(), &as_2d(node, b)?.to_owned())
                            .map_err(|e| exec_err(node, e.to_string()))?;
                    mac_stats.merge(stats);
                    out.into_dyn()
                } else {
                    let a2 = as_2d(node, a)?;
                    let b2 = as_2d(node, b)?;
                    let (n, k) = a2.dim();
                    let m = b2.ncols();
                    mac_stats.merge(MacStats {
                        total: (n * k * m) as u64,
                        skipped: 0,
                        executed: (n * k * m) as u64,
                    });
                    a2.dot(&b2).into_dyn()
                }
            }
            OpKind::EltwiseAdd => binary(node, arg(0), arg(1), |a, b| a + b)?,
            OpKind::EltwiseSub => binary(node, arg(0), arg(1), |a, b| a - b)?,
            OpKind::EltwiseMul => binary(node, arg(0), arg(1), |a, b| a * b)?,
            OpKind::Div => binary(node, arg(0), arg(1), |a, b| a / b)?,
            OpKind::Greater => binary(node, arg(0), arg(1), |a, b| if a > b { 1.0 } else { 0.0 })?,
            OpKind::Select => {
                let shape = node.out_shape.clone();
                let c = arg(0).broadcast(IxDyn(&shape));
                let x = arg(1).broadcast(IxDyn(&shape));
                let y = arg(2).broadcast(IxDyn(&shape));
                match (c, x, y) {
                    (Some(c), Some(x), Some(y)) => {
                        let mut out = ArrayD::zeros(IxDyn(&shape));
                        Zip::from(&mut out)
                            .and(&c)
                            .and(&x)
                            .and(&y)
                            .for_each(|o, &c, &x, &y| *o = if c > 0.5 { x } else { y });
                        out
                    }
                    _ => return Err(exec_err(node, "select operands do not broadcast")),
                }
            }
            OpKind::Transpose => arg(0).view().reversed_axes().to_owned(),
            OpKind::Broadcast => {
                let x = arg(0);
                match node.attr_str("mode") {
                    Some("insert") => {
                        let axis = axis_of(node)?;
                        broadcast_to(node, x.view().insert_axis(Axis(axis)))?
                    }
                    _ => broadcast_to(node, x.view())?,
                }
            }
            OpKind::Gather => gather(node, arg(0), arg(1), axis_of(node)?)?,
            OpKind::Softmax => softmax(arg(0), axis_of(node)?),
            OpKind::ReLU => arg(0).mapv(relu),
            OpKind::LeakyReLU => {
                let slope = node
                    .attr_float("slope")
                    .map(|s| s as f32)
                    .unwrap_or(DEFAULT_LEAKY_SLOPE);
                arg(0).mapv(|v| leaky_relu(v, slope))
            }
            OpKind::ELU => arg(0).mapv(elu),
            OpKind::Sqrt => arg(0).mapv(f32::sqrt),
            OpKind::ReduceSum | OpKind::ReduceMax | OpKind::MaxPool => {
                let axis = axis_of(node)?;
                let keepdims = node.attr_int("keepdims") == Some(1);
                if node.kind == OpKind::ReduceSum {
                    reduce(arg(0), axis, keepdims, 0.0, |a, b| a + b)
                } else {
                    reduce(arg(0), axis, keepdims, f32::NEG_INFINITY, f32::max)
                }
            }
            OpKind::QuantizeLinear => {
                let scale = node
                    .attr_float("scale")
                    .ok_or_else(|| exec_err(node, "missing scale attribute"))? as f32;
                arg(0).mapv(|v| quantize_value(v, scale))
            }
            OpKind::DequantizeLinear => {
                let scale = node
                    .attr_float("scale")
                    .ok_or_else(|| exec_err(node, "missing scale attribute"))? as f32;
                arg(0).mapv(|v| dequantize_value(v, scale))
            }
            OpKind::Output => {
                let v = arg(0).clone();
                outputs.insert(node.name.clone(), v.clone());
                v
            }
        };
        if out.iter().any(|v| v.is_nan()) {
            return Err(exec_err(node, "produced NaN"));
        }
        if let Some(table) = calibration.as_mut() {
            if node.kind != OpKind::Output {
                let absmax = out.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                table.record(&node.name, absmax);
            }
        }
        values[node.id] = Some(out);
    }

    Ok(RunResult {
        outputs,
        mac_stats,
        calibration,
    })
}

// ── Run comparison ─────────────────────────────────────────────────────────

/// Per-row argmax over the last axis (first index wins ties).
pub fn row_argmax(x: &ArrayD<f32>) -> Vec<usize> {
    let classes = *x.shape().last().unwrap_or(&1);
    let flat: Vec<f32> = x.iter().copied().collect();
    flat.chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

pub fn compare_runs(a: &RunResult, b: &RunResult) -> Result<DiffReport> {
    let mut max_abs = 0.0f32;
    let mut rows = 0usize;
    let mut agree = 0usize;
    for (name, av) in &a.outputs {
        let bv = b
            .outputs
            .get(name)
            .ok_or_else(|| Error::Missing(format!("output '{name}' in comparison run")))?;
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "output '{name}': {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        for (&x, &y) in av.iter().zip(bv.iter()) {
            max_abs = max_abs.max((x - y).abs());
        }
        let (aa, ba) = (row_argmax(av), row_argmax(bv));
        rows += aa.len();
        agree += aa.iter().zip(&ba).filter(|(x, y)| x == y).count();
    }
    Ok(DiffReport {
        max_abs,
        argmax_agreement: if rows == 0 { 1.0 } else { agree as f64 / rows as f64 },
    })
}
