//! Operator-graph intermediate representation.
//!
//! Graphs are vectors of nodes in topological order (every input id is
//! smaller than the consumer id). Constant payloads live in a pool and are
//! held by reference counting so multiple layer graphs can share one tensor
//! without duplicating bytes.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    MatMul,
    EltwiseMul,
    EltwiseAdd,
    EltwiseSub,
    Broadcast,
    Transpose,
    Softmax,
    LeakyReLU,
    ELU,
    ReLU,
    Select,
    Gather,
    Greater,
    ReduceMax,
    MaxPool,
    ReduceSum,
    Div,
    Sqrt,
    Constant,
    Input,
    Output,
    QuantizeLinear,
    DequantizeLinear,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "MatMul",
            OpKind::EltwiseMul => "EltwiseMul",
            OpKind::EltwiseAdd => "EltwiseAdd",
            OpKind::EltwiseSub => "EltwiseSub",
            OpKind::Broadcast => "Broadcast",
            OpKind::Transpose => "Transpose",
            OpKind::Softmax => "Softmax",
            OpKind::LeakyReLU => "LeakyReLU",
            OpKind::ELU => "ELU",
            OpKind::ReLU => "ReLU",
            OpKind::Select => "Select",
            OpKind::Gather => "Gather",
            OpKind::Greater => "Greater",
            OpKind::ReduceMax => "ReduceMax",
            OpKind::MaxPool => "MaxPool",
            OpKind::ReduceSum => "ReduceSum",
            OpKind::Div => "Div",
            OpKind::Sqrt => "Sqrt",
            OpKind::Constant => "Constant",
            OpKind::Input => "Input",
            OpKind::Output => "Output",
            OpKind::QuantizeLinear => "QuantizeLinear",
            OpKind::DequantizeLinear => "DequantizeLinear",
        }
    }

    /// Structural nodes carry no compute cost and no device assignment.
    pub fn is_neutral(&self) -> bool {
        matches!(self, OpKind::Constant | OpKind::Input | OpKind::Output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dtype {
    FP32,
    FP16,
    INT8,
}

impl Dtype {
    pub fn byte_size(&self) -> usize {
        match self {
            Dtype::FP32 => 4,
            Dtype::FP16 => 2,
            Dtype::INT8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Device {
    CPU,
    DPU,
    DSP,
}

impl Device {
    pub fn name(&self) -> &'static str {
        match self {
            Device::CPU => "CPU",
            Device::DPU => "DPU",
            Device::DSP => "DSP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpNode {
    pub id: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub out_shape: Vec<usize>,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attrs,
}

impl OpNode {
    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).and_then(AttrValue::as_int)
    }

    pub fn attr_float(&self, key: &str) -> Option<f64> {
        self.attrs.get(key).and_then(AttrValue::as_float)
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(AttrValue::as_str)
    }
}

/// Named constant payload. `Arc` sharing lets a norm matrix appear in every
/// layer of a model while being stored (and, with reuse annotation, DMA
/// charged) once.
#[derive(Debug, Clone)]
pub struct ConstEntry {
    pub name: String,
    pub data: Arc<ArrayD<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct OpGraph {
    pub nodes: Vec<OpNode>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    pub constants: Vec<ConstEntry>,
}

impl OpGraph {
    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }

    pub fn const_of(&self, node: &OpNode) -> Option<&ConstEntry> {
        if node.kind != OpKind::Constant {
            return None;
        }
        let idx = node.attr_int("const_index")? as usize;
        self.constants.get(idx)
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Census of op kinds, useful in tests and reports.
    pub fn census(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            *out.entry(n.kind.name()).or_insert(0) += 1;
        }
        out
    }

    /// Ids of consumers per node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                out[i].push(n.id);
            }
        }
        out
    }
}

// ── Placement ──────────────────────────────────────────────────────────────

/// Default device routing: throughput-friendly tensor ops go to the matrix
/// engine, control- and memory-irregular ops to the vector DSP. Structural
/// nodes stay neutral (`None`).
pub fn default_placement(kind: OpKind) -> Option<Device> {
    use OpKind::*;
    match kind {
        MatMul | EltwiseMul | EltwiseAdd | EltwiseSub | MaxPool | ReduceSum
        | QuantizeLinear | DequantizeLinear => Some(Device::DPU),
        Select | Gather | Greater | Softmax | ELU | LeakyReLU | ReLU | Div | Sqrt
        | Transpose | Broadcast | ReduceMax => Some(Device::DSP),
        Constant | Input | Output => None,
    }
}

/// Whether `device` can execute `kind` at all. The matrix engine has a fixed
/// op menu; the DSP runs everything except matrix multiply; the CPU runs
/// everything.
pub fn device_supports(device: Device, kind: OpKind) -> bool {
    use OpKind::*;
    match device {
        Device::CPU => true,
        Device::DPU => matches!(
            kind,
            MatMul | EltwiseMul | EltwiseAdd | EltwiseSub | MaxPool | ReduceSum
                | QuantizeLinear | DequantizeLinear
        ),
        Device::DSP => !matches!(kind, MatMul),
    }
}

/// Per-node device assignment for a graph. Neutral nodes are omitted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Placement {
    pub devices: BTreeMap<NodeId, Device>,
    /// For prefix partitions: number of placeable nodes assigned to the CPU.
    pub cut_index: Option<usize>,
}

impl Placement {
    /// All placeable nodes routed by `default_placement` (all-NPU).
    pub fn default_for(g: &OpGraph) -> Placement {
        let mut devices = BTreeMap::new();
        for n in &g.nodes {
            if let Some(d) = default_placement(n.kind) {
                devices.insert(n.id, d);
            }
        }
        Placement {
            devices,
            cut_index: Some(0),
        }
    }

    pub fn device_of(&self, id: NodeId) -> Option<Device> {
        self.devices.get(&id).copied()
    }
}

// ── Shape rules ────────────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

fn reduce_shape(shape: &[usize], axis: usize, keepdims: bool) -> Result<Vec<usize>> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "reduce axis {axis} out of range for {shape:?}"
        )));
    }
    let mut out = shape.to_vec();
    if keepdims {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    Ok(out)
}

/// Output shape of a node given its input shapes and attrs. Single source of
/// truth shared by the builder and the validator.
pub fn infer_shape(
    kind: OpKind,
    in_shapes: &[&[usize]],
    attrs: &Attrs,
) -> Result<Vec<usize>> {
    let need = |n: usize| -> Result<()> {
        if in_shapes.len() != n {
            Err(Error::Shape(format!(
                "{} expects {n} inputs, got {}",
                kind.name(),
                in_shapes.len()
            )))
        } else {
            Ok(())
        }
    };
    let attr_int = |key: &str| -> Result<i64> {
        attrs
            .get(key)
            .and_then(AttrValue::as_int)
            .ok_or_else(|| Error::Shape(format!("{} missing attr {key}", kind.name())))
    };
    match kind {
        OpKind::MatMul => {
            need(2)?;
            let (a, b) = (in_shapes[0], in_shapes[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(Error::Shape(format!("matmul shapes {a:?} x {b:?}")));
            }
            Ok(vec![a[0], b[1]])
        }
        OpKind::EltwiseMul | OpKind::EltwiseAdd | OpKind::EltwiseSub | OpKind::Div
        | OpKind::Greater => {
            need(2)?;
            broadcast_shapes(in_shapes[0], in_shapes[1])
        }
        OpKind::Select => {
            need(3)?;
            let xy = broadcast_shapes(in_shapes[1], in_shapes[2])?;
            broadcast_shapes(in_shapes[0], &xy)
        }
        OpKind::Broadcast => {
            need(1)?;
            let axis = attr_int("axis")? as usize;
            let size = attr_int("size")? as usize;
            let mode = attrs.get("mode").and_then(AttrValue::as_str).unwrap_or("expand");
            let mut out = in_shapes[0].to_vec();
            match mode {
                "expand" => {
                    if axis >= out.len() || out[axis] != 1 {
                        return Err(Error::Shape(format!(
                            "broadcast expand needs extent 1 at axis {axis} of {out:?}"
                        )));
                    }
                    out[axis] = size;
                }
                "insert" => {
                    if axis > out.len() {
                        return Err(Error::Shape(format!(
                            "broadcast insert axis {axis} out of range for {out:?}"
                        )));
                    }
                    out.insert(axis, size);
                }
                other => {
                    return Err(Error::Shape(format!("unknown broadcast mode {other}")));
                }
            }
            Ok(out)
        }
        OpKind::Transpose => {
            need(1)?;
            let s = in_shapes[0];
            if s.len() != 2 {
                return Err(Error::Shape(format!("transpose expects rank 2, got {s:?}")));
            }
            Ok(vec![s[1], s[0]])
        }
        OpKind::Softmax => {
            need(1)?;
            let axis = attr_int("axis")? as usize;
            if axis >= in_shapes[0].len() {
                return Err(Error::Shape(format!(
                    "softmax axis {axis} out of range for {:?}",
                    in_shapes[0]
                )));
            }
            Ok(in_shapes[0].to_vec())
        }
        OpKind::LeakyReLU | OpKind::ELU | OpKind::ReLU | OpKind::Sqrt
        | OpKind::QuantizeLinear | OpKind::DequantizeLinear => {
            need(1)?;
            Ok(in_shapes[0].to_vec())
        }
        OpKind::Gather => {
            need(2)?;
            let axis = attr_int("axis")? as usize;
            let data = in_shapes[0];
            let idx = in_shapes[1];
            if axis >= data.len() {
                return Err(Error::Shape(format!(
                    "gather axis {axis} out of range for {data:?}"
                )));
            }
            let mut out = Vec::with_capacity(data.len() - 1 + idx.len());
            out.extend_from_slice(&data[..axis]);
            out.extend_from_slice(idx);
            out.extend_from_slice(&data[axis + 1..]);
            Ok(out)
        }
        OpKind::ReduceMax | OpKind::ReduceSum | OpKind::MaxPool => {
            need(1)?;
            let axis = attr_int("axis")? as usize;
            let keepdims = attrs
                .get("keepdims")
                .and_then(AttrValue::as_int)
                .unwrap_or(0)
                != 0;
            reduce_shape(in_shapes[0], axis, keepdims)
        }
        OpKind::Constant | OpKind::Input => {
            need(0)?;
            Err(Error::Shape(format!(
                "{} has no inferable shape",
                kind.name()
            )))
        }
        OpKind::Output => {
            need(1)?;
            Ok(in_shapes[0].to_vec())
        }
    }
}

// ── Validation ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub node: NodeId,
    pub rule: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node {} [{}]: {}", self.node, self.rule, self.message)
    }
}

/// Structural validation: single-assignment ids, acyclicity (every input id
/// precedes its consumer), per-kind shape compatibility, and dtype
/// consistency. Returns the first violated rule.
pub fn validate(g: &OpGraph) -> std::result::Result<(), Diagnostic> {
    for (pos, n) in g.nodes.iter().enumerate() {
        if n.id != pos {
            return Err(Diagnostic {
                node: n.id,
                rule: "single-assignment".into(),
                message: format!("node at position {pos} has id {}", n.id),
            });
        }
        for &i in &n.inputs {
            if i >= n.id {
                return Err(Diagnostic {
                    node: n.id,
                    rule: "acyclicity".into(),
                    message: format!("back edge: input {i} does not precede node {}", n.id),
                });
            }
        }
        match n.kind {
            OpKind::Constant => {
                if !n.inputs.is_empty() {
                    return Err(Diagnostic {
                        node: n.id,
                        rule: "arity".into(),
                        message: "constant takes no inputs".into(),
                    });
                }
                match g.const_of(n) {
                    Some(entry) => {
                        if entry.data.shape() != n.out_shape.as_slice() {
                            return Err(Diagnostic {
                                node: n.id,
                                rule: "shape".into(),
                                message: format!(
                                    "constant payload shape {:?} != declared {:?}",
                                    entry.data.shape(),
                                    n.out_shape
                                ),
                            });
                        }
                    }
                    None => {
                        return Err(Diagnostic {
                            node: n.id,
                            rule: "constant-pool".into(),
                            message: "missing or invalid const_index".into(),
                        });
                    }
                }
            }
            OpKind::Input => {
                if !n.inputs.is_empty() {
                    return Err(Diagnostic {
                        node: n.id,
                        rule: "arity".into(),
                        message: "input takes no inputs".into(),
                    });
                }
            }
            kind => {
                let shapes: Vec<&[usize]> = n
                    .inputs
                    .iter()
                    .map(|&i| g.nodes[i].out_shape.as_slice())
                    .collect();
                match infer_shape(kind, &shapes, &n.attrs) {
                    Ok(expect) => {
                        if expect != n.out_shape {
                            return Err(Diagnostic {
                                node: n.id,
                                rule: "shape".into(),
                                message: format!(
                                    "{} inferred {:?} but node declares {:?}",
                                    kind.name(),
                                    expect,
                                    n.out_shape
                                ),
                            });
                        }
                    }
                    Err(e) => {
                        return Err(Diagnostic {
                            node: n.id,
                            rule: "shape".into(),
                            message: e.to_string(),
                        });
                    }
                }
            }
        }
        // Dtype rules.
        match n.kind {
            OpKind::QuantizeLinear => {
                if n.dtype != Dtype::INT8 {
                    return Err(Diagnostic {
                        node: n.id,
                        rule: "dtype".into(),
                        message: "quantize output must be INT8".into(),
                    });
                }
            }
            OpKind::DequantizeLinear => {
                if n.dtype == Dtype::INT8 {
                    return Err(Diagnostic {
                        node: n.id,
                        rule: "dtype".into(),
                        message: "dequantize output must be float".into(),
                    });
                }
            }
            OpKind::MatMul if n.dtype == Dtype::INT8 => {
                for &i in &n.inputs {
                    if g.nodes[i].dtype != Dtype::INT8 {
                        return Err(Diagnostic {
                            node: n.id,
                            rule: "dtype".into(),
                            message: format!("INT8 matmul input {i} is not INT8"),
                        });
                    }
                }
            }
            _ => {}
        }
    }
    for &o in &g.outputs {
        if o >= g.nodes.len() || g.nodes[o].kind != OpKind::Output {
            return Err(Diagnostic {
                node: o.min(g.nodes.len().saturating_sub(1)),
                rule: "outputs".into(),
                message: format!("output id {o} is not an Output node"),
            });
        }
    }
    Ok(())
}

// ── Builder ────────────────────────────────────────────────────────────────

/// Append-only graph constructor that assigns ids and infers shapes.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: OpGraph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let id = self.graph.nodes.len();
        self.graph.nodes.push(OpNode {
            id,
            name: name.to_string(),
            kind: OpKind::Input,
            inputs: vec![],
            out_shape: shape,
            dtype: Dtype::FP32,
            attrs: Attrs::new(),
        });
        self.graph.inputs.push(id);
        id
    }

    pub fn constant(&mut self, name: &str, data: ArrayD<f32>) -> NodeId {
        self.constant_shared(name, Arc::new(data))
    }

    /// Add a constant sharing an existing payload allocation.
    pub fn constant_shared(&mut self, name: &str, data: Arc<ArrayD<f32>>) -> NodeId {
        let id = self.graph.nodes.len();
        let cidx = self.graph.constants.len();
        let shape = data.shape().to_vec();
        self.graph.constants.push(ConstEntry {
            name: name.to_string(),
            data,
        });
        let mut attrs = Attrs::new();
        attrs.insert("const_index".into(), AttrValue::Int(cidx as i64));
        self.graph.nodes.push(OpNode {
            id,
            name: name.to_string(),
            kind: OpKind::Constant,
            inputs: vec![],
            out_shape: shape,
            dtype: Dtype::FP32,
            attrs,
        });
        id
    }

    pub fn scalar(&mut self, name: &str, v: f32) -> NodeId {
        self.constant(
            name,
            ArrayD::from_shape_vec(IxDyn(&[1, 1]), vec![v]).expect("scalar"),
        )
    }

    pub fn op(
        &mut self,
        kind: OpKind,
        name: &str,
        inputs: &[NodeId],
        attrs: Attrs,
    ) -> Result<NodeId> {
        let shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&i| self.graph.nodes[i].out_shape.as_slice())
            .collect();
        let out_shape = infer_shape(kind, &shapes, &attrs)?;
        let id = self.graph.nodes.len();
        self.graph.nodes.push(OpNode {
            id,
            name: name.to_string(),
            kind,
            inputs: inputs.to_vec(),
            out_shape,
            dtype: Dtype::FP32,
            attrs,
        });
        Ok(id)
    }

    pub fn output(&mut self, name: &str, of: NodeId) -> NodeId {
        let shape = self.graph.nodes[of].out_shape.clone();
        let id = self.graph.nodes.len();
        self.graph.nodes.push(OpNode {
            id,
            name: name.to_string(),
            kind: OpKind::Output,
            inputs: vec![of],
            out_shape: shape,
            dtype: Dtype::FP32,
            attrs: Attrs::new(),
        });
        self.graph.outputs.push(id);
        id
    }

    pub fn set_attr(&mut self, id: NodeId, key: &str, value: AttrValue) {
        self.graph.nodes[id].attrs.insert(key.to_string(), value);
    }

    pub fn set_dtype(&mut self, id: NodeId, dtype: Dtype) {
        self.graph.nodes[id].dtype = dtype;
    }

    pub fn finish(self) -> OpGraph {
        self.graph
    }
}

/// Attr map literal helper.
pub fn attrs(pairs: &[(&str, AttrValue)]) -> Attrs {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

// ── JSON interchange ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ConstJson {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<OpNode>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    constants: Vec<ConstJson>,
}

/// Serialize a graph. `include_payloads` embeds constant data; otherwise
/// only names and shapes are written (structure golden files).
pub fn graph_to_json(g: &OpGraph, include_payloads: bool) -> Result<String> {
    let constants = g
        .constants
        .iter()
        .map(|c| ConstJson {
            name: c.name.clone(),
            shape: c.data.shape().to_vec(),
            data: include_payloads.then(|| c.data.iter().copied().collect()),
        })
        .collect();
    let j = GraphJson {
        nodes: g.nodes.clone(),
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        constants,
    };
    Ok(serde_json::to_string_pretty(&j)?)
}

/// Deserialize a graph. Constants without payloads load as zeros of the
/// declared shape.
pub fn graph_from_json(text: &str) -> Result<OpGraph> {
    let j: GraphJson = serde_json::from_str(text)?;
    let mut constants = Vec::with_capacity(j.constants.len());
    for c in j.constants {
        let data = match c.data {
            Some(flat) => ArrayD::from_shape_vec(IxDyn(&c.shape), flat)
                .map_err(|e| Error::Shape(e.to_string()))?,
            None => ArrayD::zeros(IxDyn(&c.shape)),
        };
        constants.push(ConstEntry {
            name: c.name,
            data: Arc::new(data),
        });
    }
    let g = OpGraph {
        nodes: j.nodes,
        inputs: j.inputs,
        outputs: j.outputs,
        constants,
    };
    if let Err(d) = validate(&g) {
        return Err(Error::Graph {
            node: d.node,
            message: d.to_string(),
        });
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn small_graph() -> OpGraph {
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![4, 3]);
        let w = b.constant(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![1., 0., 0., 1., 1., 1.]).unwrap(),
        );
        let mm = b.op(OpKind::MatMul, "hw", &[h, w], Attrs::new()).unwrap();
        b.output("out", mm);
        b.finish()
    }

    #[test]
    fn builder_assigns_topological_ids() {
        let g = small_graph();
        assert!(validate(&g).is_ok());
        assert_eq!(g.nodes[2].out_shape, vec![4, 2]);
        assert_eq!(g.inputs, vec![0]);
        assert_eq!(g.outputs, vec![3]);
    }

    #[test]
    fn validate_reports_back_edge() {
        let mut g = small_graph();
        g.nodes[2].inputs = vec![0, 3]; // forward reference = cycle
        let d = validate(&g).unwrap_err();
        assert_eq!(d.rule, "acyclicity");
        assert_eq!(d.node, 2);
    }

    #[test]
    fn validate_reports_shape_mismatch() {
        let mut g = small_graph();
        g.nodes[2].out_shape = vec![4, 5];
        let d = validate(&g).unwrap_err();
        assert_eq!(d.rule, "shape");
        assert!(d.message.contains("[4, 2]"));
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[4, 1], &[4, 4]).unwrap(), vec![4, 4]);
        assert_eq!(broadcast_shapes(&[4, 4], &[1, 1]).unwrap(), vec![4, 4]);
        assert_eq!(
            broadcast_shapes(&[5, 3, 1], &[3, 7]).unwrap(),
            vec![5, 3, 7]
        );
        assert!(broadcast_shapes(&[4, 2], &[4, 3]).is_err());
    }

    #[test]
    fn gather_shape_is_onnx_style() {
        let mut a = Attrs::new();
        a.insert("axis".into(), AttrValue::Int(0));
        // data (5, 7), indices (5, 3), axis 0 -> (5, 3, 7)
        assert_eq!(
            infer_shape(OpKind::Gather, &[&[5, 7], &[5, 3]], &a).unwrap(),
            vec![5, 3, 7]
        );
        let mut a1 = Attrs::new();
        a1.insert("axis".into(), AttrValue::Int(1));
        // data (5, 1), indices (5,), axis 1 -> (5, 5)
        assert_eq!(
            infer_shape(OpKind::Gather, &[&[5, 1], &[5]], &a1).unwrap(),
            vec![5, 5]
        );
    }

    #[test]
    fn broadcast_modes() {
        let mut exp = Attrs::new();
        exp.insert("axis".into(), AttrValue::Int(1));
        exp.insert("size".into(), AttrValue::Int(6));
        assert_eq!(
            infer_shape(OpKind::Broadcast, &[&[6, 1]], &exp).unwrap(),
            vec![6, 6]
        );
        let mut ins = Attrs::new();
        ins.insert("axis".into(), AttrValue::Int(2));
        ins.insert("size".into(), AttrValue::Int(4));
        ins.insert("mode".into(), AttrValue::Str("insert".into()));
        assert_eq!(
            infer_shape(OpKind::Broadcast, &[&[6, 3]], &ins).unwrap(),
            vec![6, 3, 4]
        );
    }

    #[test]
    fn placement_table_routes_by_kind() {
        assert_eq!(default_placement(OpKind::MatMul), Some(Device::DPU));
        assert_eq!(default_placement(OpKind::Softmax), Some(Device::DSP));
        assert_eq!(default_placement(OpKind::Gather), Some(Device::DSP));
        assert_eq!(default_placement(OpKind::MaxPool), Some(Device::DPU));
        assert_eq!(default_placement(OpKind::Constant), None);
        assert!(!device_supports(Device::DPU, OpKind::Softmax));
        assert!(!device_supports(Device::DSP, OpKind::MatMul));
        assert!(device_supports(Device::CPU, OpKind::Softmax));
    }

    #[test]
    fn json_roundtrip_with_payloads() {
        let g = small_graph();
        let text = graph_to_json(&g, true).unwrap();
        let back = graph_from_json(&text).unwrap();
        assert_eq!(back.nodes.len(), g.nodes.len());
        assert_eq!(back.constants[0].data.as_ref(), g.constants[0].data.as_ref());
        // Structure-only dump loads with zeroed constants.
        let bare = graph_from_json(&graph_to_json(&g, false).unwrap()).unwrap();
        assert!(bare.constants[0].data.iter().all(|&v| v == 0.0));
    }
}
