//! Latency/energy model and the prefix-cut partitioner.
//!
//! Costs are estimated per node from device profiles, then rolled up into an
//! end-to-end report with four buckets:
//!
//! * compute seconds per device,
//! * cut-crossing transfers (fixed latency + bytes/bandwidth, once per
//!   producer whose value crosses the host/accelerator boundary),
//! * constant DMA (bytes/bandwidth only — weights stream in a pipelined
//!   burst, so no per-tensor fixed cost), honoring the packed / compressed /
//!   cached / INT8 byte adjustments left by passes,
//! * input feeds (bytes/bandwidth only) for runtime inputs consumed on the
//!   accelerator side.
//!
//! Host-side consumption of inputs and constants is free (they are already
//! in host memory), and producing an Output incurs no return charge. The
//! matrix engine and the vector lanes share local memory, so traffic between
//! them is never charged; only the host boundary costs anything.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{default_placement, device_supports, Device, OpGraph, OpKind, OpNode, Placement};
use crate::sparsity::{modeled_bytes, MacStats};

// ── Profiles ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub macs_per_cycle: f64,
    pub scalar_ops_per_cycle: f64,
    pub freq_hz: f64,
    /// MatMul cycle reduction when operands are INT8. The default is exactly
    /// 2.0: the engine packs two INT8 MACs where one FP32 MAC fits.
    pub int8_speedup: f64,
    pub energy_per_mac: f64,
    pub energy_per_scalar_op: f64,
    /// Vector lanes pay per-kind overhead factors (`op_weights`); wide cores
    /// with gather/scatter hardware do not.
    pub apply_op_weights: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferProfile {
    pub bandwidth_bytes_per_s: f64,
    pub fixed_latency_s: f64,
    pub energy_per_byte: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSet {
    pub devices: Vec<DeviceProfile>,
    pub transfer: TransferProfile,
    /// Per-op-kind work multipliers for devices with `apply_op_weights`.
    /// Unlisted kinds default to 1.
    pub op_weights: BTreeMap<String, f64>,
}

impl ProfileSet {
    pub fn device(&self, d: Device) -> &DeviceProfile {
        self.devices
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(d.name()))
            .expect("profile set validated on construction")
    }

    pub fn op_weight(&self, kind: OpKind) -> f64 {
        self.op_weights.get(kind.name()).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for want in ["cpu", "dpu", "dsp"] {
            if !self.devices.iter().any(|p| p.name.eq_ignore_ascii_case(want)) {
                return Err(Error::Config(format!("profile set lacks device '{want}'")));
            }
        }
        for p in &self.devices {
            if p.freq_hz <= 0.0 || p.scalar_ops_per_cycle <= 0.0 || p.macs_per_cycle <= 0.0 {
                return Err(Error::Config(format!(
                    "device '{}' has non-positive rates",
                    p.name
                )));
            }
            if p.int8_speedup <= 0.0 {
                return Err(Error::Config(format!(
                    "device '{}' has non-positive int8_speedup",
                    p.name
                )));
            }
        }
        if self.transfer.bandwidth_bytes_per_s <= 0.0 || self.transfer.fixed_latency_s < 0.0 {
            return Err(Error::Config("bad transfer profile".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: ProfileSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    /// Calibrated defaults for the simulated platform: a 4x16 systolic matrix
    /// engine at 1.4 GHz (4096 MACs/cycle), narrow vector lanes at 0.8 GHz
    /// that pay per-kind overheads (gathers especially), a host core at
    /// 3 GHz, and a 16 GB/s host link with 10 us of setup per crossing.
    pub fn default_calibrated() -> ProfileSet {
        let op_weights: BTreeMap<String, f64> = [
            ("Gather", 16.0),
            ("Transpose", 4.0),
            ("Broadcast", 4.0),
            ("Softmax", 2.0),
            ("ELU", 2.0),
            ("Sqrt", 2.0),
            ("Div", 2.0),
            ("Select", 1.0),
            ("Greater", 1.0),
            ("LeakyReLU", 1.0),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        ProfileSet {
            devices: vec![
                DeviceProfile {
                    name: "cpu".into(),
                    macs_per_cycle: 64.0,
                    scalar_ops_per_cycle: 16.0,
                    freq_hz: 3.0e9,
                    int8_speedup: 2.0,
                    energy_per_mac: 50.0e-12,
                    energy_per_scalar_op: 20.0e-12,
                    apply_op_weights: false,
                },
                DeviceProfile {
                    name: "dpu".into(),
                    macs_per_cycle: 4096.0,
                    scalar_ops_per_cycle: 1024.0,
                    freq_hz: 1.4e9,
                    int8_speedup: 2.0,
                    energy_per_mac: 1.0e-12,
                    energy_per_scalar_op: 2.0e-12,
                    apply_op_weights: false,
                },
                DeviceProfile {
                    name: "dsp".into(),
                    macs_per_cycle: 32.0,
                    scalar_ops_per_cycle: 32.0,
                    freq_hz: 0.8e9,
                    int8_speedup: 2.0,
                    energy_per_mac: 4.0e-12,
                    energy_per_scalar_op: 4.0e-12,
                    apply_op_weights: true,
                },
            ],
            transfer: TransferProfile {
                bandwidth_bytes_per_s: 16.0e9,
                fixed_latency_s: 10.0e-6,
                energy_per_byte: 10.0e-12,
            },
            op_weights,
        }
    }
}

// ── Per-node estimation ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum SkipSide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy)]
pub struct CostOptions {
    /// Which matmul operand the zero-skip hardware watches. Left matches the
    /// executor's instrumentation; Right is a what-if knob for the estimator.
    pub skip_side: SkipSide,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            skip_side: SkipSide::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OpCost {
    pub seconds: f64,
    pub energy: f64,
    pub macs: MacStats,
}

fn const_nnz(g: &OpGraph, node: &OpNode) -> Option<u64> {
    if let Some(nnz) = node.attr_int("nnz") {
        return Some(nnz as u64);
    }
    let entry = g.const_of(node)?;
    Some(entry.data.iter().filter(|&&v| v != 0.0).count() as u64)
}

/// Reductions and softmax read their whole input; everything else is charged
/// by output size.
fn work_elements(g: &OpGraph, node: &OpNode) -> f64 {
    match node.kind {
        OpKind::ReduceSum | OpKind::ReduceMax | OpKind::MaxPool | OpKind::Softmax => node
            .inputs
            .iter()
            .map(|&i| g.nodes[i].numel() as f64)
            .sum(),
        _ => node.numel() as f64,
    }
}

fn matmul_macs(g: &OpGraph, node: &OpNode, opts: &CostOptions) -> MacStats {
    let a = &g.nodes[node.inputs[0]];
    let b = &g.nodes[node.inputs[1]];
    let (n, k) = (a.out_shape[0] as u64, a.out_shape[1] as u64);
    let m = b.out_shape[1] as u64;
    let total = n * k * m;
    let mut executed = total;
    if node.attr_int("zvc") == Some(1) {
        let skipped_side = match opts.skip_side {
            SkipSide::Left => const_nnz(g, a).map(|nnz| nnz * m),
            SkipSide::Right => const_nnz(g, b).map(|nnz| n * nnz),
        };
        if let Some(e) = skipped_side {
            executed = e.min(total);
        }
    }
    MacStats {
        total,
        skipped: total - executed,
        executed,
    }
}

/// Cost of one node on one device. Unsupported kinds cost infinite seconds,
/// which is how infeasible assignments lose the argmin.
pub fn estimate_node(
    g: &OpGraph,
    node: &OpNode,
    device: Device,
    set: &ProfileSet,
    opts: &CostOptions,
) -> OpCost {
    if node.kind.is_neutral() {
        return OpCost::default();
    }
    let p = set.device(device);
    if !device_supports(device, node.kind) {
        return OpCost {
            seconds: f64::INFINITY,
            energy: f64::INFINITY,
            macs: MacStats::default(),
        };
    }
    if node.kind == OpKind::MatMul {
        let macs = matmul_macs(g, node, opts);
        let mut seconds = macs.executed as f64 / (p.macs_per_cycle * p.freq_hz);
        let mut energy = macs.executed as f64 * p.energy_per_mac;
        if node.dtype == crate::ir::Dtype::INT8 {
            seconds /= p.int8_speedup;
            energy /= 4.0;
        }
        return OpCost {
            seconds,
            energy,
            macs,
        };
    }
    let weight = if p.apply_op_weights {
        set.op_weight(node.kind)
    } else {
        1.0
    };
    let work = work_elements(g, node) * weight;
    OpCost {
        seconds: work / (p.scalar_ops_per_cycle * p.freq_hz),
        energy: work * p.energy_per_scalar_op,
        macs: MacStats::default(),
    }
}

// ── Roll-up ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct NodeCost {
    pub id: usize,
    pub name: String,
    pub kind: String,
    pub device: Option<String>,
    pub seconds: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub per_node: Vec<NodeCost>,
    pub by_device: BTreeMap<String, f64>,
    pub compute_seconds: f64,
    pub crossing_count: usize,
    pub crossing_bytes: u64,
    pub transfer_seconds: f64,
    pub const_dma_bytes: u64,
    pub const_dma_seconds: f64,
    pub input_feed_bytes: u64,
    pub input_feed_seconds: f64,
    pub total_seconds: f64,
    pub total_energy: f64,
    pub mac_stats: MacStats,
}

fn host_side(d: Device) -> bool {
    d == Device::CPU
}

fn tensor_bytes(node: &OpNode) -> u64 {
    (node.numel() * node.dtype.byte_size()) as u64
}

/// DMA bytes for a constant under its pass annotations: `cached` costs
/// nothing (already resident), otherwise the cheapest of the dense, packed
/// triangle, and compressed encodings that passes enabled for it.
pub fn const_transfer_bytes(g: &OpGraph, node: &OpNode) -> u64 {
    if node.attr_int("cached") == Some(1) {
        return 0;
    }
    let elem = node.dtype.byte_size();
    let numel = node.numel();
    let mut best = (numel * elem) as u64;
    if node.attr_int("packed") == Some(1) && node.out_shape.len() == 2 {
        let n = node.out_shape[0];
        best = best.min((n * (n + 1) / 2 * elem) as u64);
    }
    if node.attr_int("zvc") == Some(1) {
        if let Some(nnz) = const_nnz(g, node) {
            best = best.min(modeled_bytes(nnz as usize, numel, elem) as u64);
        }
    }
    best
}

/// Roll one graph + placement into a latency/energy report.
pub fn report_for(
    g: &OpGraph,
    placement: &Placement,
    set: &ProfileSet,
    opts: &CostOptions,
) -> Result<LatencyReport> {
    set.validate()?;
    let consumers = g.consumers();
    let mut per_node = Vec::with_capacity(g.nodes.len());
    let mut by_device: BTreeMap<String, f64> = BTreeMap::new();
    let mut compute_seconds = 0.0;
    let mut compute_energy = 0.0;
    let mut mac_stats = MacStats::default();
    for n in &g.nodes {
        let device = placement.device_of(n.id);
        let cost = match device {
            Some(d) => estimate_node(g, n, d, set, opts),
            None => OpCost::default(),
        };
        if let Some(d) = device {
            if !n.kind.is_neutral() {
                *by_device.entry(d.name().to_string()).or_insert(0.0) += cost.seconds;
            }
        }
        compute_seconds += cost.seconds;
        compute_energy += cost.energy;
        mac_stats.merge(cost.macs);
        per_node.push(NodeCost {
            id: n.id,
            name: n.name.clone(),
            kind: n.kind.name().to_string(),
            device: device.map(|d| d.name().to_string()),
            seconds: cost.seconds,
            energy: cost.energy,
        });
    }

    let bw = set.transfer.bandwidth_bytes_per_s;
    let npu_consumer = |id: usize| -> bool {
        consumers[id].iter().any(|&c| {
            placement
                .device_of(c)
                .map(|d| !host_side(d))
                .unwrap_or(false)
        })
    };

    let mut crossing_count = 0usize;
    let mut crossing_bytes = 0u64;
    let mut const_dma_bytes = 0u64;
    let mut input_feed_bytes = 0u64;
    for n in &g.nodes {
        match n.kind {
            OpKind::Input => {
                if npu_consumer(n.id) {
                    input_feed_bytes += tensor_bytes(n);
                }
            }
            OpKind::Constant => {
                if npu_consumer(n.id) {
                    const_dma_bytes += const_transfer_bytes(g, n);
                }
            }
            OpKind::Output => {}
            _ => {
                let side = match placement.device_of(n.id) {
                    Some(d) => host_side(d),
                    None => continue,
                };
                let crosses = consumers[n.id].iter().any(|&c| {
                    placement
                        .device_of(c)
                        .map(|d| host_side(d) != side)
                        .unwrap_or(false)
                });
                if crosses {
                    crossing_count += 1;
                    crossing_bytes += tensor_bytes(n);
                }
            }
        }
    }
    let transfer_seconds =
        crossing_count as f64 * set.transfer.fixed_latency_s + crossing_bytes as f64 / bw;
    let const_dma_seconds = const_dma_bytes as f64 / bw;
    let input_feed_seconds = input_feed_bytes as f64 / bw;
    let moved_bytes = crossing_bytes + const_dma_bytes + input_feed_bytes;
    let total_seconds = compute_seconds + transfer_seconds + const_dma_seconds + input_feed_seconds;
    let total_energy = compute_energy + moved_bytes as f64 * set.transfer.energy_per_byte;
    Ok(LatencyReport {
        per_node,
        by_device,
        compute_seconds,
        crossing_count,
        crossing_bytes,
        transfer_seconds,
        const_dma_bytes,
        const_dma_seconds,
        input_feed_bytes,
        input_feed_seconds,
        total_seconds,
        total_energy,
        mac_stats,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    pub layers: Vec<LatencyReport>,
    pub total_seconds: f64,
    pub total_energy: f64,
}

/// A model is a sequence of layer graphs evaluated back to back; constant
/// dedup tags (`cached`) keep repeated weights from being charged twice.
pub fn model_report(
    layers: &[(&OpGraph, &Placement)],
    set: &ProfileSet,
    opts: &CostOptions,
) -> Result<ModelReport> {
    let mut reports = Vec::with_capacity(layers.len());
    for (g, p) in layers {
        reports.push(report_for(g, p, set, opts)?);
    }
    let total_seconds = reports.iter().map(|r| r.total_seconds).sum();
    let total_energy = reports.iter().map(|r| r.total_energy).sum();
    Ok(ModelReport {
        layers: reports,
        total_seconds,
        total_energy,
    })
}

// ── Share metrics ──────────────────────────────────────────────────────────

/// Fraction of on-device compute spent in nodes tagged `stage = preprocess`.
pub fn preprocess_share(g: &OpGraph, report: &LatencyReport) -> f64 {
    let pre: f64 = report
        .per_node
        .iter()
        .filter(|c| g.nodes[c.id].attr_str("stage") == Some("preprocess"))
        .map(|c| c.seconds)
        .sum();
    if report.compute_seconds == 0.0 {
        0.0
    } else {
        pre / report.compute_seconds
    }
}

/// Fraction of on-device compute spent in the given op kinds.
pub fn kind_share(report: &LatencyReport, kinds: &[OpKind]) -> f64 {
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    let part: f64 = report
        .per_node
        .iter()
        .filter(|c| names.contains(&c.kind.as_str()))
        .map(|c| c.seconds)
        .sum();
    if report.compute_seconds == 0.0 {
        0.0
    } else {
        part / report.compute_seconds
    }
}

// ── Partitioning ───────────────────────────────────────────────────────────

pub const EXHAUSTIVE_MAX_PLACEABLE: usize = 15;

#[derive(Debug, Clone, Serialize)]
pub struct CutEval {
    pub index: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    pub placeable: usize,
    pub cuts: Vec<CutEval>,
    pub best_index: usize,
    pub best_seconds: f64,
}

fn placeable_ids(g: &OpGraph) -> Vec<usize> {
    g.nodes
        .iter()
        .filter(|n| !n.kind.is_neutral())
        .map(|n| n.id)
        .collect()
}

/// Placement for prefix cut `c`: the first `c` placeable nodes (topological
/// order) run on the host, the rest on their default accelerator unit.
pub fn cut_placement(g: &OpGraph, c: usize) -> Placement {
    let mut devices = BTreeMap::new();
    let mut seen = 0usize;
    for n in &g.nodes {
        if n.kind.is_neutral() {
            continue;
        }
        let d = if seen < c {
            Some(Device::CPU)
        } else {
            default_placement(n.kind)
        };
        if let Some(d) = d {
            devices.insert(n.id, d);
        }
        seen += 1;
    }
    Placement {
        devices,
        cut_index: Some(c),
    }
}

/// Evaluates every prefix cut and keeps the earliest argmin. The prefix
/// family tracks staged offload: preprocessing stays on the host up to the
/// cut, everything after streams through the accelerator.
pub fn graphsplit_partition(
    g: &OpGraph,
    set: &ProfileSet,
    opts: &CostOptions,
) -> Result<SplitReport> {
    let placeable = placeable_ids(g).len();
    let mut cuts = Vec::with_capacity(placeable + 1);
    let mut best_index = 0usize;
    let mut best_seconds = f64::INFINITY;
    for c in 0..=placeable {
        let placement = cut_placement(g, c);
        let report = report_for(g, &placement, set, opts)?;
        if report.total_seconds < best_seconds {
            best_seconds = report.total_seconds;
            best_index = c;
        }
        cuts.push(CutEval {
            index: c,
            seconds: report.total_seconds,
        });
    }
    Ok(SplitReport {
        placeable,
        cuts,
        best_index,
        best_seconds,
    })
}

/// Brute-force over all host/accelerator subsets of the placeable nodes.
/// Exponential: refuses graphs with more than [`EXHAUSTIVE_MAX_PLACEABLE`]
/// placeable nodes. Returns the winning host-set mask (by placeable order)
/// and its seconds.
pub fn exhaustive_partition(
    g: &OpGraph,
    set: &ProfileSet,
    opts: &CostOptions,
) -> Result<(Vec<bool>, f64)> {
    let ids = placeable_ids(g);
    if ids.len() > EXHAUSTIVE_MAX_PLACEABLE {
        return Err(Error::Config(format!(
            "exhaustive partition limited to {EXHAUSTIVE_MAX_PLACEABLE} placeable nodes, graph has {}",
            ids.len()
        )));
    }
    let mut best_mask = vec![false; ids.len()];
    let mut best_seconds = f64::INFINITY;
    for mask in 0u32..(1u32 << ids.len()) {
        let mut devices = BTreeMap::new();
        for (bit, &id) in ids.iter().enumerate() {
            let d = if mask >> bit & 1 == 1 {
                Some(Device::CPU)
            } else {
                default_placement(g.nodes[id].kind)
            };
            if let Some(d) = d {
                devices.insert(id, d);
            }
        }
        let placement = Placement {
            devices,
            cut_index: None,
        };
        let report = report_for(g, &placement, set, opts)?;
        if report.total_seconds < best_seconds {
            best_seconds = report.total_seconds;
            best_mask = (0..ids.len()).map(|b| mask >> b & 1 == 1).collect();
        }
    }
    Ok((best_mask, best_seconds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{attrs, AttrValue, Dtype, GraphBuilder};
    use approx::assert_relative_eq;
    use ndarray::{Array2, ArrayD, IxDyn};

    /// Microbenchmark profile: 1 MHz clocks so cycle counts read as us.
    fn toy_profiles() -> ProfileSet {
        let mut set = ProfileSet::default_calibrated();
        for d in &mut set.devices {
            d.freq_hz = 1.0e6;
            d.apply_op_weights = false;
            d.int8_speedup = 2.0;
            match d.name.as_str() {
                "cpu" => {
                    d.scalar_ops_per_cycle = 1.0;
                    d.macs_per_cycle = 5.0;
                }
                "dpu" => {
                    d.scalar_ops_per_cycle = 1.0;
                    d.macs_per_cycle = 100.0;
                }
                "dsp" => {
                    d.scalar_ops_per_cycle = 0.25;
                    d.macs_per_cycle = 1.0;
                }
                _ => unreachable!(),
            }
        }
        set.transfer = TransferProfile {
            bandwidth_bytes_per_s: 1.0e18,
            fixed_latency_s: 2.0e-6,
            energy_per_byte: 0.0,
        };
        set
    }

    /// input(1x10) -> Sqrt -> MatMul(10x50 weight) -> output
    fn toy_chain() -> OpGraph {
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![1, 10]);
        let w = b.constant("w", ArrayD::zeros(IxDyn(&[10, 50])));
        let s = b.op(OpKind::Sqrt, "s", &[h], attrs(&[])).unwrap();
        let m = b.op(OpKind::MatMul, "m", &[s, w], attrs(&[])).unwrap();
        b.output("out", m);
        b.finish()
    }

    #[test]
    fn prefix_cut_costs_match_hand_arithmetic() {
        let g = toy_chain();
        let set = toy_profiles();
        let split = graphsplit_partition(&g, &set, &CostOptions::default()).unwrap();
        assert_eq!(split.placeable, 2);
        // cut 0: sqrt on dsp 10/0.25 = 40us, matmul on dpu 500/100 = 5us.
        // cut 1: sqrt on cpu 10us + crossing 2us + matmul 5us = 17us.
        // cut 2: sqrt 10us + matmul 500/5 = 100us, all host, no transfers.
        let want = [45.0e-6, 17.0e-6, 110.0e-6];
        for (cut, want) in split.cuts.iter().zip(want) {
            assert_relative_eq!(cut.seconds, want, max_relative = 1e-9);
        }
        assert_eq!(split.best_index, 1);
        assert_relative_eq!(split.best_seconds, 17.0e-6, max_relative = 1e-9);
    }

    #[test]
    fn equal_cost_cuts_pick_the_lowest_index() {
        // Two Sqrt nodes, same per-op cost everywhere, free transfers: every
        // cut costs the same, so the earliest wins.
        let mut set = toy_profiles();
        for d in &mut set.devices {
            d.scalar_ops_per_cycle = 1.0;
        }
        set.transfer.fixed_latency_s = 0.0;
        set.transfer.bandwidth_bytes_per_s = f64::INFINITY;
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![1, 10]);
        let s1 = b.op(OpKind::Sqrt, "s1", &[h], attrs(&[])).unwrap();
        let s2 = b.op(OpKind::Sqrt, "s2", &[s1], attrs(&[])).unwrap();
        b.output("out", s2);
        let g = b.finish();
        let split = graphsplit_partition(&g, &set, &CostOptions::default()).unwrap();
        let first = split.cuts[0].seconds;
        assert!(split.cuts.iter().all(|c| (c.seconds - first).abs() < 1e-15));
        assert_eq!(split.best_index, 0);
    }

    #[test]
    fn doubling_dpu_macs_per_cycle_halves_matmul_seconds() {
        let g = toy_chain();
        let base = toy_profiles();
        let mut fast = toy_profiles();
        for d in &mut fast.devices {
            if d.name == "dpu" {
                d.macs_per_cycle *= 2.0;
            }
        }
        let placement = cut_placement(&g, 0); // matmul lands on the dpu
        let opts = CostOptions::default();
        let matmul_seconds = |set: &ProfileSet| {
            report_for(&g, &placement, set, &opts)
                .unwrap()
                .per_node
                .iter()
                .find(|n| n.kind == "MatMul")
                .unwrap()
                .seconds
        };
        // The cycle model is linear in 1/macs_per_cycle, so the factor is exact.
        assert_eq!(matmul_seconds(&base), 2.0 * matmul_seconds(&fast));
    }

    #[test]
    fn zero_transfer_and_faster_npu_puts_everything_on_the_accelerator() {
        let g = toy_chain();
        let mut set = toy_profiles();
        for d in &mut set.devices {
            // Make Sqrt cheaper on the dsp than the cpu (2.5us vs 10us).
            if d.name == "dsp" {
                d.scalar_ops_per_cycle = 4.0;
            }
        }
        set.transfer.fixed_latency_s = 0.0;
        set.transfer.bandwidth_bytes_per_s = f64::INFINITY;
        let split = graphsplit_partition(&g, &set, &CostOptions::default()).unwrap();
        assert_eq!(split.best_index, 0);
        assert!(split.cuts[0].seconds < split.cuts[split.placeable].seconds);
    }

    #[test]
    fn argmin_is_invariant_under_uniform_cost_scaling() {
        // Power-of-two scaling keeps every f64 comparison exact, so the chosen
        // cut must not move when all device and transfer costs scale together.
        let opts = CostOptions::default();
        for seed in 0..20 {
            let g = crate::fixtures::random_dag(1 + (seed as usize % 10), 6, seed);
            let base = toy_profiles();
            let mut scaled = toy_profiles();
            for d in &mut scaled.devices {
                d.freq_hz /= 8.0;
            }
            scaled.transfer.bandwidth_bytes_per_s /= 8.0;
            scaled.transfer.fixed_latency_s *= 8.0;
            let a = graphsplit_partition(&g, &base, &opts).unwrap();
            let b = graphsplit_partition(&g, &scaled, &opts).unwrap();
            assert_eq!(a.best_index, b.best_index, "seed {seed}");
            assert_relative_eq!(b.best_seconds, 8.0 * a.best_seconds, max_relative = 1e-12);
        }
    }

    #[test]
    fn host_only_run_charges_no_movement() {
        let g = toy_chain();
        let set = toy_profiles();
        let placement = cut_placement(&g, 2);
        let r = report_for(&g, &placement, &set, &CostOptions::default()).unwrap();
        assert_eq!(r.crossing_count, 0);
        assert_eq!(r.const_dma_bytes, 0);
        assert_eq!(r.input_feed_bytes, 0);
        assert_relative_eq!(r.total_seconds, 110.0e-6, max_relative = 1e-12);
    }

    #[test]
    fn accelerator_run_charges_feeds_and_dma_bytes_only() {
        let g = toy_chain();
        let set = toy_profiles();
        let placement = cut_placement(&g, 0);
        let r = report_for(&g, &placement, &set, &CostOptions::default()).unwrap();
        assert_eq!(r.crossing_count, 0);
        assert_eq!(r.input_feed_bytes, 40); // 10 f32
        assert_eq!(r.const_dma_bytes, 2000); // 500 f32
        // Bytes-only: removing the fixed latency must not change these buckets.
        assert_relative_eq!(
            r.const_dma_seconds,
            2000.0 / set.transfer.bandwidth_bytes_per_s,
            max_relative = 1e-12
        );
    }

    #[test]
    fn report_buckets_are_conserved() {
        let g = toy_chain();
        let set = toy_profiles();
        let r = report_for(&g, &cut_placement(&g, 1), &set, &CostOptions::default()).unwrap();
        let sum = r.compute_seconds + r.transfer_seconds + r.const_dma_seconds + r.input_feed_seconds;
        assert_eq!(r.total_seconds, sum);
        let device_sum: f64 = r.by_device.values().sum();
        assert_eq!(r.compute_seconds, device_sum);
    }

    #[test]
    fn unsupported_kind_costs_infinity() {
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![2, 2]);
        let s = b
            .op(OpKind::Softmax, "sm", &[h], attrs(&[("axis", AttrValue::Int(1))]))
            .unwrap();
        b.output("out", s);
        let g = b.finish();
        let mut devices = BTreeMap::new();
        devices.insert(s, Device::DPU);
        let placement = Placement {
            devices,
            cut_index: None,
        };
        let r = report_for(
            &g,
            &placement,
            &ProfileSet::default_calibrated(),
            &CostOptions::default(),
        )
        .unwrap();
        assert!(r.total_seconds.is_infinite());
    }

    #[test]
    fn int8_matmul_is_exactly_twice_as_fast() {
        let build = |dtype: Dtype| {
            let mut b = GraphBuilder::new();
            let h = b.input("h", vec![8, 16]);
            let w = b.constant("w", ArrayD::zeros(IxDyn(&[16, 4])));
            if dtype == Dtype::INT8 {
                b.set_dtype(h, Dtype::INT8);
                b.set_dtype(w, Dtype::INT8);
            }
            let m = b.op(OpKind::MatMul, "m", &[h, w], attrs(&[])).unwrap();
            b.set_dtype(m, dtype);
            b.output("out", m);
            b.finish()
        };
        let set = ProfileSet::default_calibrated();
        let opts = CostOptions::default();
        let gf = build(Dtype::FP32);
        let gq = build(Dtype::INT8);
        let mm_cost = |g: &OpGraph| {
            let r = report_for(g, &Placement::default_for(g), &set, &opts).unwrap();
            r.per_node
                .iter()
                .find(|c| c.kind == "MatMul")
                .unwrap()
                .seconds
        };
        let ratio = mm_cost(&gf) / mm_cost(&gq);
        assert_eq!(ratio, 2.0);
    }

    #[test]
    fn const_byte_adjustments() {
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![4, 4]);
        let mut dense = Array2::<f32>::zeros((4, 4));
        for i in 0..4 {
            dense[[i, i]] = 1.0;
        }
        let c = b.constant("c", dense.into_dyn());
        let m = b.op(OpKind::MatMul, "m", &[c, h], attrs(&[])).unwrap();
        b.output("out", m);
        let mut g = b.finish();
        let node = |g: &OpGraph| g.nodes[c].clone();
        assert_eq!(const_transfer_bytes(&g, &node(&g)), 64);
        g.nodes[c].attrs.insert("packed".into(), AttrValue::Int(1));
        assert_eq!(const_transfer_bytes(&g, &node(&g)), 40); // 10 * 4
        g.nodes[c].attrs.insert("zvc".into(), AttrValue::Int(1));
        // 4 nnz * 4B + 2 bitmap bytes = 18 < packed 40.
        assert_eq!(const_transfer_bytes(&g, &node(&g)), 18);
        g.nodes[c].attrs.insert("cached".into(), AttrValue::Int(1));
        assert_eq!(const_transfer_bytes(&g, &node(&g)), 0);
    }

    #[test]
    fn zero_skip_macs_feed_the_estimate() {
        let mut b = GraphBuilder::new();
        let h = b.input("h", vec![4, 8]);
        let mut sp = Array2::<f32>::zeros((4, 4));
        sp[[0, 0]] = 1.0;
        sp[[2, 3]] = -1.0;
        let c = b.constant("c", sp.into_dyn());
        let m = b.op(OpKind::MatMul, "m", &[c, h], attrs(&[])).unwrap();
        b.output("out", m);
        let mut g = b.finish();
        g.nodes[m].attrs.insert("zvc".into(), AttrValue::Int(1));
        let set = ProfileSet::default_calibrated();
        let r = report_for(
            &g,
            &Placement::default_for(&g),
            &set,
            &CostOptions::default(),
        )
        .unwrap();
        assert_eq!(r.mac_stats.total, 4 * 4 * 8);
        assert_eq!(r.mac_stats.executed, 2 * 8);
        let rr = report_for(
            &g,
            &Placement::default_for(&g),
            &set,
            &CostOptions {
                skip_side: SkipSide::Right,
            },
        )
        .unwrap();
        // Right operand is a runtime input: no skip information.
        assert_eq!(rr.mac_stats.executed, 4 * 4 * 8);
    }

    #[test]
    fn exhaustive_never_loses_to_prefix() {
        let g = toy_chain();
        let set = toy_profiles();
        let opts = CostOptions::default();
        let split = graphsplit_partition(&g, &set, &opts).unwrap();
        let (_, best) = exhaustive_partition(&g, &set, &opts).unwrap();
        assert!(best <= split.best_seconds + 1e-15);
        assert_relative_eq!(best, split.best_seconds, max_relative = 1e-12);
    }

    #[test]
    fn exhaustive_refuses_oversized_graphs() {
        let mut b = GraphBuilder::new();
        let mut last = b.input("h", vec![1, 4]);
        for i in 0..(EXHAUSTIVE_MAX_PLACEABLE + 1) {
            last = b.op(OpKind::ReLU, &format!("r{i}"), &[last], attrs(&[])).unwrap();
        }
        b.output("out", last);
        let g = b.finish();
        assert!(exhaustive_partition(&g, &toy_profiles(), &CostOptions::default()).is_err());
    }

    #[test]
    fn profile_json_roundtrip_and_validation() {
        let set = ProfileSet::default_calibrated();
        let json = set.to_json().unwrap();
        let back = ProfileSet::from_json(&json).unwrap();
        assert_eq!(back.devices.len(), 3);
        assert_eq!(back.device(Device::DPU).macs_per_cycle, 4096.0);
        assert_eq!(back.op_weight(OpKind::Gather), 16.0);
        assert_eq!(back.op_weight(OpKind::MatMul), 1.0);
        let bad = json.replace("\"cpu\"", "\"gpu\"");
        assert!(ProfileSet::from_json(&bad).is_err());
    }
}
