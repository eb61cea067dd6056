//! Pass pipelines: parsing, per-layer validation, compilation to operator
//! graphs with input bindings, model execution, and the benchmark ladders.
//!
//! A pipeline is an ordered comma list of pass names. Lowering-time passes
//! (preg, stagr, grad, nodepad) select how each layer is built; the rest are
//! graph rewrites or annotations applied in list order. Approximating passes
//! (grax1/2/3) are refused unless explicitly allowed.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayD, Ix2};
use serde::Serialize;

use crate::cost::{model_report, CostOptions, ModelReport, ProfileSet};
use crate::error::{Error, Result};
use crate::exec::{execute, row_argmax, ExecOptions};
use crate::graph::{build_adjacency, default_capacity, nodepad_pad, Graph};
use crate::ir::{OpGraph, Placement};
use crate::lower::{
    lower_gat_naive, lower_gcn_naive, lower_sage_naive, sample_planes, sampled_adjacency,
    LayerKind,
};
use crate::quant::{quantgr_lower, CalibrationTable, QuantMemo};
use crate::reference::{Aggregator, GatLayerParams, GcnLayerParams, SageLayerParams};
use crate::sparsity::MacStats;
use crate::transforms::{
    cacheg_annotate, effop_rewrite, grad_lower_with, grasp_annotate, grax1_apply,
    grax2_apply_with, grax3_lower, preg_norm_matrix, stagr_lower_gat, stagr_lower_sage,
    stagr_lower_shared, Grax2Target, PassReport,
};

/// Largest |reference - transformed| tolerated for exact pipelines.
pub const EXACT_TOLERANCE: f32 = 1e-5;
/// Minimum per-row argmax agreement for approximating pipelines.
pub const APPROX_AGREEMENT_FLOOR: f64 = 0.95;

// ── Pass identifiers ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PassId {
    Preg,
    Stagr,
    Grad,
    Nodepad,
    Effop,
    Symg,
    Cacheg,
    Grasp,
    Quantgr,
    Grax1,
    Grax2,
    Grax3,
}

pub const ALL_PASSES: [PassId; 12] = [
    PassId::Preg,
    PassId::Stagr,
    PassId::Grad,
    PassId::Nodepad,
    PassId::Effop,
    PassId::Symg,
    PassId::Cacheg,
    PassId::Grasp,
    PassId::Quantgr,
    PassId::Grax1,
    PassId::Grax2,
    PassId::Grax3,
];

impl PassId {
    pub fn name(&self) -> &'static str {
        match self {
            PassId::Preg => "preg",
            PassId::Stagr => "stagr",
            PassId::Grad => "grad",
            PassId::Nodepad => "nodepad",
            PassId::Effop => "effop",
            PassId::Symg => "symg",
            PassId::Cacheg => "cacheg",
            PassId::Grasp => "grasp",
            PassId::Quantgr => "quantgr",
            PassId::Grax1 => "grax1",
            PassId::Grax2 => "grax2",
            PassId::Grax3 => "grax3",
        }
    }

    pub fn parse(s: &str) -> Result<PassId> {
        ALL_PASSES
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ALL_PASSES.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown pass '{s}'; valid passes: {}", names.join(", ")))
            })
    }

    /// Whether the pass trades accuracy for speed (needs explicit opt-in).
    pub fn is_approx(&self) -> bool {
        matches!(self, PassId::Grax1 | PassId::Grax2 | PassId::Grax3)
    }
}

/// Parse a comma-separated pass list. Empty string means the naive lowering.
pub fn parse_pipeline(s: &str) -> Result<Vec<PassId>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let p = PassId::parse(part)?;
        if out.contains(&p) {
            return Err(Error::Config(format!("pass '{part}' listed twice")));
        }
        out.push(p);
    }
    Ok(out)
}

/// Per-layer-kind legality and ordering rules.
pub fn validate_pipeline(
    pipeline: &[PassId],
    kind: LayerKind,
    allow_approx: bool,
) -> Result<()> {
    let pos = |p: PassId| pipeline.iter().position(|&q| q == p);
    let before = |a: PassId, b: PassId| match (pos(a), pos(b)) {
        (Some(ia), Some(ib)) => ia < ib,
        _ => false,
    };
    for &p in pipeline {
        if p.is_approx() && !allow_approx {
            return Err(Error::Config(format!(
                "pass '{}' approximates; opt in with allow-approx",
                p.name()
            )));
        }
        match p {
            PassId::Preg | PassId::Grad | PassId::Nodepad | PassId::Symg | PassId::Cacheg => {
                if kind != LayerKind::Gcn {
                    return Err(Error::Config(format!(
                        "pass '{}' applies to gcn layers, model is {}",
                        p.name(),
                        kind.name()
                    )));
                }
            }
            PassId::Grax1 | PassId::Grax2 => {
                if kind != LayerKind::Gat {
                    return Err(Error::Config(format!(
                        "pass '{}' applies to gat layers, model is {}",
                        p.name(),
                        kind.name()
                    )));
                }
                if !before(PassId::Effop, p) {
                    return Err(Error::Config(format!(
                        "pass '{}' rewrites the effop-recast mask; list effop before it",
                        p.name()
                    )));
                }
            }
            PassId::Grax3 => {
                if kind != LayerKind::SageMax {
                    return Err(Error::Config(format!(
                        "pass 'grax3' applies to sage-max layers, model is {}",
                        kind.name()
                    )));
                }
            }
            _ => {}
        }
    }
    if kind == LayerKind::Gcn {
        if pos(PassId::Stagr).is_some() && pos(PassId::Grad).is_some() {
            return Err(Error::Config(
                "stagr and grad are alternative lowerings; pick one".into(),
            ));
        }
        if pos(PassId::Stagr).is_some() && !before(PassId::Preg, PassId::Stagr) {
            return Err(Error::Config(
                "stagr freezes the preg normalization; list preg before stagr".into(),
            ));
        }
        if pos(PassId::Grad).is_some() && !before(PassId::Preg, PassId::Grad) {
            return Err(Error::Config(
                "grad feeds the preg normalization at runtime; list preg before grad".into(),
            ));
        }
        if pos(PassId::Nodepad).is_some() && !before(PassId::Grad, PassId::Nodepad) {
            return Err(Error::Config(
                "nodepad requires the runtime normalization input; list grad before nodepad".into(),
            ));
        }
        for p in [PassId::Symg, PassId::Cacheg] {
            if pos(p).is_some() && pos(PassId::Stagr).is_none() {
                return Err(Error::Config(format!(
                    "pass '{}' acts on the frozen normalization constant; list preg,stagr first",
                    p.name()
                )));
            }
        }
    }
    if kind == LayerKind::SageMax && pos(PassId::Grax3).is_some() && pipeline.len() > 1 {
        return Err(Error::Config(
            "grax3 is a standalone lowering; combine it with nothing else".into(),
        ));
    }
    Ok(())
}

// ── Model specification ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum LayerSpec {
    Gcn { params: GcnLayerParams, relu: bool },
    Gat { params: GatLayerParams, elu: bool },
    Sage { params: SageLayerParams },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Gcn { .. } => LayerKind::Gcn,
            LayerSpec::Gat { .. } => LayerKind::Gat,
            LayerSpec::Sage { params } => match params.aggregator {
                Aggregator::Mean => LayerKind::SageMean,
                Aggregator::Max => LayerKind::SageMax,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub allow_approx: bool,
    /// Padded capacity for nodepad; defaults to the next 500-multiple.
    pub capacity: Option<usize>,
    pub grasp_min_zero_fraction: f32,
    /// Column-constant variant of the grax2 rewrite.
    pub grax2_column: bool,
    /// Per-layer calibration tables for quantgr; recorded automatically from
    /// one forward run when absent.
    pub calibrations: Option<Vec<CalibrationTable>>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            allow_approx: false,
            capacity: None,
            grasp_min_zero_fraction: 0.5,
            grax2_column: false,
            calibrations: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledLayer {
    pub graph: OpGraph,
    /// Static bindings for this layer (adjacency, normalization, sample
    /// planes). The `h` input is bound at run time from the previous layer.
    pub bindings: BTreeMap<String, ArrayD<f32>>,
    pub reports: Vec<PassReport>,
}

#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub kind: LayerKind,
    pub pipeline: Vec<PassId>,
    pub layers: Vec<CompiledLayer>,
    /// Cross-layer reports (constant dedup).
    pub global_reports: Vec<PassReport>,
    /// Rows carrying real nodes; equals `capacity` unless padded.
    pub active_nodes: usize,
    pub capacity: usize,
}

fn as_dyn2(a: Array2<f32>) -> ArrayD<f32> {
    a.into_dyn()
}

/// Lower every layer per the pipeline's lowering selection, then apply the
/// rewrite/annotation passes in list order.
pub fn compile(
    specs: &[LayerSpec],
    g: &Graph,
    pipeline: &[PassId],
    opts: &PipelineOptions,
) -> Result<CompiledModel> {
    if specs.is_empty() {
        return Err(Error::Config("model needs at least one layer".into()));
    }
    let kind = specs[0].kind();
    if specs.iter().any(|s| s.kind() != kind) {
        return Err(Error::Config("all layers in a model must share one kind".into()));
    }
    validate_pipeline(pipeline, kind, opts.allow_approx)?;
    let has = |p: PassId| pipeline.contains(&p);
    let n = g.num_nodes;

    // Lowering-time selection.
    let mut active_nodes = n;
    let mut capacity = n;
    let mut layers: Vec<CompiledLayer> = Vec::with_capacity(specs.len());
    match kind {
        LayerKind::Gcn => {
            let padded = has(PassId::Nodepad).then(|| {
                let cap = opts.capacity.unwrap_or_else(|| default_capacity(n));
                nodepad_pad(g, cap, true, true)
            });
            let padded = match padded {
                Some(p) => Some(p?),
                None => None,
            };
            let (norm_src, rows) = match &padded {
                Some(p) => (p.adjacency_mask.clone(), p.capacity),
                None => (build_adjacency(g, true, true), n),
            };
            if let Some(p) = &padded {
                capacity = p.capacity;
                active_nodes = p.active_nodes;
            }
            let shared_norm = if has(PassId::Stagr) || has(PassId::Grad) {
                Some(Arc::new(preg_norm_matrix(&norm_src)?.values.into_dyn()))
            } else {
                None
            };
            for spec in specs {
                let (params, relu) = match spec {
                    LayerSpec::Gcn { params, relu } => (params, *relu),
                    _ => unreachable!(),
                };
                let mut bindings = BTreeMap::new();
                let graph = if has(PassId::Grad) {
                    let norm = shared_norm.as_ref().unwrap();
                    bindings.insert("norm".to_string(), norm.as_ref().clone());
                    grad_lower_with(params, rows, relu)?
                } else if has(PassId::Stagr) {
                    stagr_lower_shared(params, shared_norm.as_ref().unwrap().clone(), relu)?
                } else {
                    bindings.insert("adj".to_string(), as_dyn2(norm_src.clone()));
                    lower_gcn_naive(params, rows, relu)?
                };
                layers.push(CompiledLayer {
                    graph,
                    bindings,
                    reports: Vec::new(),
                });
            }
        }
        LayerKind::Gat => {
            let adj = build_adjacency(g, true, true);
            for spec in specs {
                let (params, elu) = match spec {
                    LayerSpec::Gat { params, elu } => (params, *elu),
                    _ => unreachable!(),
                };
                let mut bindings = BTreeMap::new();
                let graph = if has(PassId::Stagr) {
                    stagr_lower_gat(params, &adj, elu)?
                } else {
                    bindings.insert("adj".to_string(), as_dyn2(adj.clone()));
                    lower_gat_naive(params, n, elu)?
                };
                layers.push(CompiledLayer {
                    graph,
                    bindings,
                    reports: Vec::new(),
                });
            }
        }
        LayerKind::SageMean | LayerKind::SageMax => {
            for spec in specs {
                let params = match spec {
                    LayerSpec::Sage { params } => params,
                    _ => unreachable!(),
                };
                let mut bindings = BTreeMap::new();
                let graph = if has(PassId::Grax3) {
                    let sadj = sampled_adjacency(g, params.sample_size, params.sample_seed);
                    grax3_lower(params, &sadj)?
                } else if has(PassId::Stagr) {
                    stagr_lower_sage(params, g)?
                } else {
                    let (idx, mask) = sample_planes(g, params.sample_size, params.sample_seed);
                    bindings.insert("sample_idx".to_string(), idx.into_dyn());
                    bindings.insert("sample_mask".to_string(), mask.into_dyn());
                    lower_sage_naive(params, n)?
                };
                layers.push(CompiledLayer {
                    graph,
                    bindings,
                    reports: Vec::new(),
                });
            }
        }
    }

    let mut model = CompiledModel {
        kind,
        pipeline: pipeline.to_vec(),
        layers,
        global_reports: Vec::new(),
        active_nodes,
        capacity,
    };

    // Rewrites and annotations in pipeline order.
    for &pass in pipeline {
        match pass {
            PassId::Preg | PassId::Stagr | PassId::Grad | PassId::Nodepad | PassId::Grax3 => {}
            PassId::Effop => {
                for layer in &mut model.layers {
                    let (g2, report) = effop_rewrite(&layer.graph)?;
                    layer.graph = g2;
                    layer.reports.push(report);
                }
            }
            PassId::Grax1 => {
                for layer in &mut model.layers {
                    let (g2, report) = grax1_apply(&layer.graph)?;
                    layer.graph = g2;
                    layer.reports.push(report);
                }
            }
            PassId::Grax2 => {
                let target = if opts.grax2_column {
                    Grax2Target::ColumnConstant
                } else {
                    Grax2Target::RowConstant
                };
                for layer in &mut model.layers {
                    let (g2, report) = grax2_apply_with(&layer.graph, target)?;
                    layer.graph = g2;
                    layer.reports.push(report);
                }
            }
            PassId::Symg => {
                for layer in &mut model.layers {
                    let (g2, report) = symg_annotate_layer(&layer.graph)?;
                    layer.graph = g2;
                    layer.reports.push(report);
                }
            }
            PassId::Grasp => {
                for layer in &mut model.layers {
                    let (g2, report) =
                        grasp_annotate(&layer.graph, opts.grasp_min_zero_fraction);
                    layer.graph = g2;
                    layer.reports.push(report);
                }
            }
            PassId::Cacheg => {
                let mut graphs: Vec<OpGraph> =
                    model.layers.iter().map(|l| l.graph.clone()).collect();
                let report = cacheg_annotate(&mut graphs);
                for (layer, g2) in model.layers.iter_mut().zip(graphs) {
                    layer.graph = g2;
                }
                model.global_reports.push(report);
            }
            PassId::Quantgr => {
                let tables = match &opts.calibrations {
                    Some(t) => {
                        if t.len() != model.layers.len() {
                            return Err(Error::Config(format!(
                                "{} calibration tables for {} layers",
                                t.len(),
                                model.layers.len()
                            )));
                        }
                        t.clone()
                    }
                    None => calibrate(&model, g)?,
                };
                let mut memo = QuantMemo::default();
                for (layer, table) in model.layers.iter_mut().zip(&tables) {
                    let (g2, report) = quantgr_lower(&layer.graph, table, &mut memo)?;
                    layer.graph = g2;
                    layer.reports.push(report);
                }
            }
        }
    }
    Ok(model)
}

fn symg_annotate_layer(g: &OpGraph) -> Result<(OpGraph, PassReport)> {
    crate::transforms::symg_annotate(g)
}

// ── Execution ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelRun {
    /// Final layer's `out` tensor.
    pub output: ArrayD<f32>,
    pub mac_stats: MacStats,
    pub calibrations: Option<Vec<CalibrationTable>>,
}

fn feature_binding(model: &CompiledModel, features: &Array2<f32>) -> Result<ArrayD<f32>> {
    if features.nrows() == model.capacity {
        return Ok(features.to_owned().into_dyn());
    }
    if features.nrows() != model.active_nodes {
        return Err(Error::Shape(format!(
            "feature rows {} match neither active nodes {} nor capacity {}",
            features.nrows(),
            model.active_nodes,
            model.capacity
        )));
    }
    let mut padded = Array2::<f32>::zeros((model.capacity, features.ncols()));
    padded.slice_mut(s![..features.nrows(), ..]).assign(features);
    Ok(padded.into_dyn())
}

/// Run all layers back to back, feeding each layer's `out` into the next
/// layer's `h`.
pub fn run_model(
    model: &CompiledModel,
    features: &Array2<f32>,
    record_absmax: bool,
) -> Result<ModelRun> {
    let mut h = feature_binding(model, features)?;
    let mut mac_stats = MacStats::default();
    let mut calibrations = record_absmax.then(Vec::new);
    for layer in &model.layers {
        let mut inputs = layer.bindings.clone();
        inputs.insert("h".to_string(), h);
        let run = execute(
            &layer.graph,
            &inputs,
            &ExecOptions {
                record_absmax,
            },
        )?;
        mac_stats.merge(run.mac_stats);
        if let (Some(tables), Some(t)) = (calibrations.as_mut(), run.calibration) {
            tables.push(t);
        }
        h = run
            .outputs
            .get("out")
            .cloned()
            .ok_or_else(|| Error::Missing("layer output 'out'".into()))?;
    }
    Ok(ModelRun {
        output: h,
        mac_stats,
        calibrations,
    })
}

/// One recording forward pass over the model as currently compiled.
fn calibrate(model: &CompiledModel, g: &Graph) -> Result<Vec<CalibrationTable>> {
    let run = run_model(model, &g.features, true)?;
    run.calibrations
        .ok_or_else(|| Error::Missing("calibration recording".into()))
}

/// Record per-layer calibration tables for the pipeline's pre-quantization
/// graphs: compile with every pass before `quantgr`, run once, record.
pub fn capture_calibrations(
    specs: &[LayerSpec],
    g: &Graph,
    pipeline: &[PassId],
    opts: &PipelineOptions,
) -> Result<Vec<CalibrationTable>> {
    let truncated: Vec<PassId> = pipeline
        .iter()
        .copied()
        .take_while(|&p| p != PassId::Quantgr)
        .collect();
    let model = compile(specs, g, &truncated, opts)?;
    calibrate(&model, g)
}

/// Active (unpadded) rows of a model output.
pub fn active_rows(model: &CompiledModel, out: &ArrayD<f32>) -> Result<Array2<f32>> {
    let m = out
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("expected rank-2 output, got {:?}", out.shape())))?;
    Ok(m.slice(s![..model.active_nodes, ..]).to_owned())
}

// ── Verification ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutcome {
    pub pipeline: String,
    pub approx: bool,
    pub max_abs: f32,
    pub argmax_agreement: f64,
    pub tolerance: f32,
    pub agreement_floor: f64,
    /// The divergence is the pass's declared out-of-regime behavior (grax3 on
    /// negative features or isolated nodes): reported, but not a failure.
    pub documented_divergence: bool,
    /// Human-readable statement of the gate that decided `passed`.
    pub contract: String,
    pub passed: bool,
}

fn agreement(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let aa = row_argmax(&a.to_owned().into_dyn());
    let bb = row_argmax(&b.to_owned().into_dyn());
    if aa.is_empty() {
        return 1.0;
    }
    aa.iter().zip(&bb).filter(|(x, y)| x == y).count() as f64 / aa.len() as f64
}

/// True when the grax3 rewrite is exact on this graph: every feature value
/// is non-negative and every node has at least one out-neighbor to sample.
fn grax3_exact_regime(g: &Graph) -> bool {
    if g.features.iter().any(|&v| v < 0.0) {
        return false;
    }
    let mut outdeg = vec![0usize; g.num_nodes];
    for &(s, _) in &g.edges {
        outdeg[s] += 1;
    }
    outdeg.iter().all(|&d| d >= 1)
}

/// Compile + run both the naive and the transformed model, compare active
/// rows, and check the pipeline's accuracy contract: exact pipelines must
/// match within [`EXACT_TOLERANCE`]; approximating ones must keep per-row
/// argmax agreement at or above [`APPROX_AGREEMENT_FLOOR`]. grax3 is
/// conditionally exact: inside its declared regime it is held to the exact
/// tolerance, outside it the divergence is documented behavior — reported
/// and flagged, but not a failure.
pub fn verify_model(
    specs: &[LayerSpec],
    g: &Graph,
    pipeline: &[PassId],
    opts: &PipelineOptions,
) -> Result<VerifyOutcome> {
    let naive = compile(specs, g, &[], opts)?;
    let transformed = compile(specs, g, pipeline, opts)?;
    let base_run = run_model(&naive, &g.features, false)?;
    let new_run = run_model(&transformed, &g.features, false)?;
    let base = active_rows(&naive, &base_run.output)?;
    let new = active_rows(&transformed, &new_run.output)?;
    if base.dim() != new.dim() {
        return Err(Error::Shape(format!(
            "active output {:?} vs {:?}",
            base.dim(),
            new.dim()
        )));
    }
    let max_abs = base
        .iter()
        .zip(new.iter())
        .fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs()));
    let approx =
        pipeline.iter().any(|p| p.is_approx()) || pipeline.contains(&PassId::Quantgr);
    let agree = agreement(&base, &new);
    // grax3 alone is gated by its conditional-exactness declaration; any
    // statistically-gated pass (grax1/grax2/quantgr) escalates to the
    // agreement floor.
    let statistical = pipeline.contains(&PassId::Quantgr)
        || pipeline.iter().any(|p| p.is_approx() && *p != PassId::Grax3);
    let documented_divergence =
        pipeline.contains(&PassId::Grax3) && !statistical && !grax3_exact_regime(g);
    let (passed, contract) = if documented_divergence {
        (
            true,
            "documented divergence (negative features or isolated nodes \
             under max-aggregation); reported only"
                .to_string(),
        )
    } else if statistical {
        (
            agree >= APPROX_AGREEMENT_FLOOR,
            format!("argmax agreement >= {APPROX_AGREEMENT_FLOOR}"),
        )
    } else {
        (
            max_abs <= EXACT_TOLERANCE,
            format!("max |diff| <= {EXACT_TOLERANCE}"),
        )
    };
    Ok(VerifyOutcome {
        pipeline: pipeline.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
        approx,
        max_abs,
        argmax_agreement: agree,
        tolerance: EXACT_TOLERANCE,
        agreement_floor: APPROX_AGREEMENT_FLOOR,
        documented_divergence,
        contract,
        passed,
    })
}

// ── Benchmark ladders ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LadderRung {
    pub label: &'static str,
    pub pipeline: &'static str,
    /// Whether this rung participates in the cumulative non-increasing
    /// latency chain (reported-only rungs change shapes or quality targets).
    pub monotone: bool,
}

pub fn ladder_for(kind: LayerKind) -> Vec<LadderRung> {
    let r = |label, pipeline, monotone| LadderRung {
        label,
        pipeline,
        monotone,
    };
    match kind {
        LayerKind::Gcn => vec![
            r("naive", "", true),
            r("stagr", "preg,stagr", true),
            r("grad-nodepad", "preg,grad,nodepad", false),
            r("symg", "preg,stagr,symg", true),
            r("cacheg", "preg,stagr,symg,cacheg", true),
            r("grasp", "preg,stagr,symg,cacheg,grasp", true),
            r("quantgr", "preg,stagr,symg,cacheg,grasp,quantgr", true),
        ],
        LayerKind::Gat => vec![
            r("naive", "", true),
            r("stagr", "stagr", true),
            r("effop", "stagr,effop", true),
            r("grax1", "stagr,effop,grax1", true),
            r("grax2", "stagr,effop,grax1,grax2", true),
            r("grasp", "stagr,effop,grax1,grax2,grasp", true),
            r("quantgr", "stagr,effop,grax1,grax2,grasp,quantgr", true),
        ],
        LayerKind::SageMean => vec![
            r("naive", "", true),
            r("stagr", "stagr", true),
            r("grasp", "stagr,grasp", true),
            r("quantgr", "stagr,grasp,quantgr", true),
        ],
        LayerKind::SageMax => vec![
            r("naive", "", true),
            r("stagr", "stagr", true),
            r("effop", "stagr,effop", true),
            r("grasp", "stagr,effop,grasp", true),
            r("quantgr", "stagr,effop,grasp,quantgr", true),
            r("grax3", "grax3", false),
        ],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub label: String,
    pub pipeline: String,
    pub monotone: bool,
    pub total_seconds: f64,
    pub compute_seconds: f64,
    pub moved_bytes: u64,
    pub total_energy: f64,
    pub mac_total: u64,
    pub mac_executed: u64,
    pub max_abs_vs_naive: f32,
    pub argmax_agreement_vs_naive: f64,
    /// naive total_seconds / this rung's total_seconds (1.0 on the naive row).
    pub speedup_vs_naive: f64,
}

/// Compile, cost, and execute every rung of the ladder for this model kind,
/// comparing each rung's output against the naive rung.
pub fn run_ladder(
    specs: &[LayerSpec],
    g: &Graph,
    set: &ProfileSet,
    opts: &PipelineOptions,
) -> Result<Vec<BenchRow>> {
    let kind = specs[0].kind();
    let mut rows = Vec::new();
    let mut naive_active: Option<Array2<f32>> = None;
    let mut naive_seconds: Option<f64> = None;
    for rung in ladder_for(kind) {
        let pipeline = parse_pipeline(rung.pipeline)?;
        let model = compile(specs, g, &pipeline, opts)?;
        let report = cost_of(&model, set)?;
        let run = run_model(&model, &g.features, false)?;
        let active = active_rows(&model, &run.output)?;
        let (max_abs, agree) = match &naive_active {
            None => (0.0, 1.0),
            Some(base) => {
                let rows_common = base.nrows().min(active.nrows());
                let b = base.slice(s![..rows_common, ..]);
                let a = active.slice(s![..rows_common, ..]);
                let max_abs = b
                    .iter()
                    .zip(a.iter())
                    .fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs()));
                (max_abs, agreement(&b.to_owned(), &a.to_owned()))
            }
        };
        if naive_active.is_none() {
            naive_active = Some(active);
        }
        let baseline = *naive_seconds.get_or_insert(report.total_seconds);
        let moved = report
            .layers
            .iter()
            .map(|l| l.crossing_bytes + l.const_dma_bytes + l.input_feed_bytes)
            .sum();
        rows.push(BenchRow {
            label: rung.label.to_string(),
            pipeline: rung.pipeline.to_string(),
            monotone: rung.monotone,
            total_seconds: report.total_seconds,
            compute_seconds: report.layers.iter().map(|l| l.compute_seconds).sum(),
            moved_bytes: moved,
            total_energy: report.total_energy,
            mac_total: report.layers.iter().map(|l| l.mac_stats.total).sum(),
            mac_executed: report.layers.iter().map(|l| l.mac_stats.executed).sum(),
            max_abs_vs_naive: max_abs,
            argmax_agreement_vs_naive: agree,
            speedup_vs_naive: baseline / report.total_seconds,
        });
    }
    Ok(rows)
}

/// Model cost under the default all-accelerator placement.
pub fn cost_of(model: &CompiledModel, set: &ProfileSet) -> Result<ModelReport> {
    let placements: Vec<Placement> = model
        .layers
        .iter()
        .map(|l| Placement::default_for(&l.graph))
        .collect();
    let pairs: Vec<(&OpGraph, &Placement)> = model
        .layers
        .iter()
        .zip(&placements)
        .map(|(l, p)| (&l.graph, p))
        .collect();
    model_report(&pairs, set, &CostOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{gat_params, gcn_params, sage_params, synthetic_graph};
    use crate::ir::OpKind;

    fn small() -> Graph {
        synthetic_graph(24, 6, 50, 3, 5)
    }

    fn gcn_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Gcn {
                params: gcn_params(6, 8, true, 1),
                relu: true,
            },
            LayerSpec::Gcn {
                params: gcn_params(8, 3, true, 2),
                relu: false,
            },
        ]
    }

    #[test]
    fn pipeline_parsing_and_rules() {
        assert_eq!(parse_pipeline("").unwrap(), vec![]);
        assert_eq!(
            parse_pipeline("preg, stagr").unwrap(),
            vec![PassId::Preg, PassId::Stagr]
        );
        assert!(parse_pipeline("bogus").is_err());
        assert!(parse_pipeline("preg,preg").is_err());

        let v = |s: &str, k, approx| validate_pipeline(&parse_pipeline(s).unwrap(), k, approx);
        assert!(v("preg,stagr", LayerKind::Gcn, false).is_ok());
        assert!(v("stagr", LayerKind::Gcn, false).is_err()); // needs preg
        assert!(v("preg,stagr,grad", LayerKind::Gcn, false).is_err()); // alternatives
        assert!(v("preg,grad,nodepad", LayerKind::Gcn, false).is_ok());
        assert!(v("preg,nodepad", LayerKind::Gcn, false).is_err()); // needs grad
        assert!(v("preg,stagr", LayerKind::Gat, false).is_err()); // gcn-only
        assert!(v("stagr,effop,grax1", LayerKind::Gat, true).is_ok());
        assert!(v("stagr,effop,grax1", LayerKind::Gat, false).is_err()); // approx gate
        assert!(v("stagr,grax1", LayerKind::Gat, true).is_err()); // effop first
        assert!(v("grax3", LayerKind::SageMax, true).is_ok());
        assert!(v("grax3", LayerKind::SageMean, true).is_err());
        assert!(v("stagr,grax3", LayerKind::SageMax, true).is_err()); // standalone
        assert!(v("preg,stagr,symg", LayerKind::Gcn, false).is_ok());
        assert!(v("preg,symg", LayerKind::Gcn, false).is_err()); // symg needs stagr
    }

    #[test]
    fn gcn_stagr_pipeline_is_exact() {
        let g = small();
        let specs = gcn_specs();
        let out = verify_model(
            &specs,
            &g,
            &parse_pipeline("preg,stagr").unwrap(),
            &PipelineOptions::default(),
        )
        .unwrap();
        assert!(out.passed, "max_abs {}", out.max_abs);
        assert!(!out.approx);
        assert!(out.max_abs <= EXACT_TOLERANCE);
    }

    #[test]
    fn gcn_grad_nodepad_pads_and_zeroes_inactive_rows() {
        let g = small();
        // Bias-free so padded rows have no injected offset.
        let specs = vec![
            LayerSpec::Gcn {
                params: gcn_params(6, 8, false, 1),
                relu: true,
            },
            LayerSpec::Gcn {
                params: gcn_params(8, 3, false, 2),
                relu: false,
            },
        ];
        let opts = PipelineOptions {
            capacity: Some(40),
            ..Default::default()
        };
        let pipeline = parse_pipeline("preg,grad,nodepad").unwrap();
        let model = compile(&specs, &g, &pipeline, &opts).unwrap();
        assert_eq!(model.capacity, 40);
        assert_eq!(model.active_nodes, 24);
        let run = run_model(&model, &g.features, false).unwrap();
        assert_eq!(run.output.shape(), &[40, 3]);
        for i in 24..40 {
            for j in 0..3 {
                assert_eq!(run.output[[i, j]], 0.0, "padded row {i} leaked");
            }
        }
        // Active rows match the naive model.
        let naive = compile(&specs, &g, &[], &PipelineOptions::default()).unwrap();
        let base = run_model(&naive, &g.features, false).unwrap();
        let active = active_rows(&model, &run.output).unwrap();
        for (x, y) in base.output.iter().zip(active.iter()) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn cacheg_tags_second_layer_norm() {
        let g = small();
        let model = compile(
            &gcn_specs(),
            &g,
            &parse_pipeline("preg,stagr,cacheg").unwrap(),
            &PipelineOptions::default(),
        )
        .unwrap();
        let tagged = |l: &CompiledLayer| {
            l.graph
                .nodes
                .iter()
                .filter(|n| n.attr_int("cached") == Some(1))
                .count()
        };
        assert_eq!(tagged(&model.layers[0]), 0);
        assert_eq!(tagged(&model.layers[1]), 1);
        assert_eq!(model.global_reports.len(), 1);
    }

    #[test]
    fn quantgr_auto_calibrates_and_stays_accurate() {
        let g = small();
        let specs = gcn_specs();
        let pipeline = parse_pipeline("preg,stagr,quantgr").unwrap();
        let model = compile(&specs, &g, &pipeline, &PipelineOptions::default()).unwrap();
        for layer in &model.layers {
            assert!(layer.graph.count_kind(OpKind::QuantizeLinear) >= 1);
            assert!(layer.graph.count_kind(OpKind::DequantizeLinear) >= 2);
        }
        let out = verify_model(&specs, &g, &pipeline, &PipelineOptions::default()).unwrap();
        assert!(out.approx); // quantized contract is argmax agreement
        assert!(out.passed, "agreement {}", out.argmax_agreement);
    }

    #[test]
    fn gat_rewrite_chain_is_exact_until_grax() {
        let g = small();
        let specs = vec![LayerSpec::Gat {
            params: gat_params(6, 8, 2, 3),
            elu: true,
        }];
        let opts = PipelineOptions {
            allow_approx: true,
            ..Default::default()
        };
        for p in ["stagr", "stagr,effop"] {
            let out = verify_model(&specs, &g, &parse_pipeline(p).unwrap(), &opts).unwrap();
            assert!(out.max_abs <= EXACT_TOLERANCE, "{p}: {}", out.max_abs);
        }
        for p in ["stagr,effop,grax1", "stagr,effop,grax1,grax2"] {
            let out = verify_model(&specs, &g, &parse_pipeline(p).unwrap(), &opts).unwrap();
            assert!(out.passed, "{p}: agreement {}", out.argmax_agreement);
        }
    }

    #[test]
    fn sage_pipelines_compile_and_verify() {
        let g = small();
        for aggregator in [Aggregator::Mean, Aggregator::Max] {
            let specs = vec![LayerSpec::Sage {
                params: sage_params(6, 8, aggregator, 4),
            }];
            let out = verify_model(
                &specs,
                &g,
                &parse_pipeline("stagr").unwrap(),
                &PipelineOptions::default(),
            )
            .unwrap();
            assert!(out.passed, "{aggregator:?}: max_abs {}", out.max_abs);
        }
        // grax3 on max aggregation is exact when features are non-negative.
        let mut g2 = small();
        g2.features.mapv_inplace(f32::abs);
        let specs = vec![LayerSpec::Sage {
            params: sage_params(6, 8, Aggregator::Max, 4),
        }];
        let opts = PipelineOptions {
            allow_approx: true,
            ..Default::default()
        };
        let out = verify_model(&specs, &g2, &parse_pipeline("grax3").unwrap(), &opts).unwrap();
        assert!(out.argmax_agreement >= APPROX_AGREEMENT_FLOOR);
    }

    #[test]
    fn grax3_contract_follows_the_declared_regime() {
        let ring = |negate: bool| {
            let n = 12;
            let mut features =
                Array2::from_shape_fn((n, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f32 * 0.25);
            if negate {
                features[[0, 0]] = -0.5;
            }
            Graph {
                num_nodes: n,
                feature_dim: 6,
                edges: (0..n).map(|i| (i, (i + 1) % n)).collect(),
                features,
                labels: None,
                num_classes: None,
            }
        };
        let specs = vec![LayerSpec::Sage {
            params: sage_params(6, 8, Aggregator::Max, 4),
        }];
        let opts = PipelineOptions {
            allow_approx: true,
            ..Default::default()
        };
        let pipeline = parse_pipeline("grax3").unwrap();
        // Non-negative features and every node has an out-neighbor: the
        // rewrite is inside its declared regime and held to exactness.
        let out = verify_model(&specs, &ring(false), &pipeline, &opts).unwrap();
        assert!(!out.documented_divergence);
        assert!(out.passed, "max_abs {}", out.max_abs);
        assert!(out.max_abs <= EXACT_TOLERANCE);
        assert!(out.contract.contains("max |diff|"));
        // One negative feature: divergence is declared behavior — flagged in
        // the report, not failed.
        let out = verify_model(&specs, &ring(true), &pipeline, &opts).unwrap();
        assert!(out.documented_divergence);
        assert!(out.passed);
        assert!(out.contract.contains("documented divergence"));
    }

    #[test]
    fn ladders_run_end_to_end_at_small_scale() {
        let g = small();
        let set = ProfileSet::default_calibrated();
        let opts = PipelineOptions {
            allow_approx: true,
            ..Default::default()
        };
        for specs in [
            gcn_specs(),
            vec![LayerSpec::Gat {
                params: gat_params(6, 8, 1, 3),
                elu: false,
            }],
            vec![LayerSpec::Sage {
                params: sage_params(6, 8, Aggregator::Mean, 4),
            }],
            vec![LayerSpec::Sage {
                params: sage_params(6, 8, Aggregator::Max, 4),
            }],
        ] {
            let rows = run_ladder(&specs, &g, &set, &opts).unwrap();
            assert_eq!(rows.len(), ladder_for(specs[0].kind()).len());
            assert!(rows.iter().all(|r| r.total_seconds.is_finite()));
            assert_eq!(rows[0].max_abs_vs_naive, 0.0);
        }
    }
}
