//! Command-line front end: `verify`, `bench`, and `partition` over a Cora
//! format dataset or a seeded synthetic graph.
//!
//! Exit codes: 0 success (and, for `verify`, contract held); 1 a check ran
//! and failed; 2 usage, configuration, or runtime error. All file outputs
//! are byte-deterministic for a given invocation (ordered maps, no
//! timestamps), so repeated runs can be compared directly.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cost::{
    cut_placement, exhaustive_partition, graphsplit_partition, report_for, CostOptions,
    ProfileSet, SplitReport,
};
use crate::error::{Error, Result};
use crate::fixtures::synthetic_graph;
use crate::graph::{load_cora_format, Graph};
use crate::ir::Device;
use crate::lower::LayerKind;
use crate::pipeline::{
    capture_calibrations, compile, parse_pipeline, run_ladder, verify_model, BenchRow, LayerSpec,
    PassId, PipelineOptions,
};
use crate::quant::{tables_from_json, tables_to_json};
use crate::reference::{Aggregator, DEFAULT_SAMPLE_SIZE};

pub const DEFAULT_SEED: u64 = 42;
/// Environment override for the default seed (the `--seed` flag wins).
pub const SEED_ENV: &str = "GRANNITE_SEED";

// ── Argument groups ────────────────────────────────────────────────────────

#[derive(Args, Debug)]
struct GraphArgs {
    /// Node-feature file (Cora .content format).
    #[arg(long, requires = "dataset_cites")]
    dataset_content: Option<PathBuf>,
    /// Edge list file (Cora .cites format).
    #[arg(long, requires = "dataset_content")]
    dataset_cites: Option<PathBuf>,
    /// Generate a seeded synthetic graph instead: `n` or packed `n,e,f,seed`
    /// (trailing fields optional).
    #[arg(long, value_name = "N[,E[,F[,SEED]]]", conflicts_with = "dataset_content")]
    synthetic: Option<String>,
    /// Feature width for --synthetic (tuple form wins).
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Directed edge count for --synthetic (default: 4x nodes; tuple form wins).
    #[arg(long)]
    edges: Option<usize>,
    /// Label count for --synthetic.
    #[arg(long, default_value_t = 7)]
    classes: usize,
    /// RNG seed for synthetic data and parameter init (wins over the tuple
    /// seed and the environment).
    #[arg(long)]
    seed: Option<u64>,
}

/// Parsed form of `--synthetic n[,e[,f[,seed]]]`.
struct SyntheticSpec {
    nodes: usize,
    edges: Option<usize>,
    features: Option<usize>,
    seed: Option<u64>,
}

fn parse_synthetic(text: &str) -> Result<SyntheticSpec> {
    let bad = || Error::Config(format!("--synthetic expects n[,e[,f[,seed]]], got '{text}'"));
    let parts: Vec<&str> = text.split(',').collect();
    if parts.is_empty() || parts.len() > 4 {
        return Err(bad());
    }
    let field = |i: usize| -> Result<Option<usize>> {
        match parts.get(i) {
            None => Ok(None),
            Some(s) => s.trim().parse().map(Some).map_err(|_| bad()),
        }
    };
    let nodes = field(0)?.filter(|&n| n > 0).ok_or_else(bad)?;
    Ok(SyntheticSpec {
        nodes,
        edges: field(1)?,
        features: field(2)?,
        seed: field(3)?.map(|s| s as u64),
    })
}

impl GraphArgs {
    fn tuple_seed(&self) -> Option<u64> {
        self.synthetic
            .as_deref()
            .and_then(|t| parse_synthetic(t).ok())
            .and_then(|s| s.seed)
    }

    fn seed(&self) -> u64 {
        self.seed
            .or_else(|| self.tuple_seed())
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()))
            .unwrap_or(DEFAULT_SEED)
    }

    fn load(&self) -> Result<Graph> {
        match (&self.dataset_content, &self.dataset_cites, &self.synthetic) {
            (Some(content), Some(cites), None) => load_cora_format(
                content.to_str().ok_or_else(|| Error::Config("non-utf8 path".into()))?,
                cites.to_str().ok_or_else(|| Error::Config("non-utf8 path".into()))?,
            ),
            (None, None, Some(text)) => {
                let spec = parse_synthetic(text)?;
                Ok(synthetic_graph(
                    spec.nodes,
                    spec.features.unwrap_or(self.feature_dim),
                    spec.edges.or(self.edges).unwrap_or(4 * spec.nodes),
                    self.classes.max(1),
                    self.seed(),
                ))
            }
            _ => Err(Error::Config(
                "choose an input: --dataset-content/--dataset-cites or --synthetic N".into(),
            )),
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Layer kind: gcn | gat | sage-mean | sage-max.
    #[arg(long, default_value = "gcn")]
    layer: String,
    /// Hidden width.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Attention heads (gat).
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Neighbor sample size (sage).
    #[arg(long, default_value_t = DEFAULT_SAMPLE_SIZE)]
    sample_size: usize,
}

impl ModelArgs {
    fn kind(&self) -> Result<LayerKind> {
        LayerKind::parse(&self.layer)
    }

    /// gcn builds the two-layer feature -> hidden -> classes model; gat and
    /// sage build one layer at the hidden width.
    fn specs(&self, g: &Graph, seed: u64) -> Result<Vec<LayerSpec>> {
        let f_in = g.feature_dim;
        let classes = g.num_classes.unwrap_or(self.hidden.min(7).max(2));
        Ok(match self.kind()? {
            LayerKind::Gcn => vec![
                LayerSpec::Gcn {
                    params: crate::fixtures::gcn_params(f_in, self.hidden, true, seed),
                    relu: true,
                },
                LayerSpec::Gcn {
                    params: crate::fixtures::gcn_params(self.hidden, classes, true, seed ^ 1),
                    relu: false,
                },
            ],
            LayerKind::Gat => vec![LayerSpec::Gat {
                params: crate::fixtures::gat_params(f_in, self.hidden, self.heads, seed),
                elu: false,
            }],
            LayerKind::SageMean | LayerKind::SageMax => {
                let aggregator = if self.kind()? == LayerKind::SageMax {
                    Aggregator::Max
                } else {
                    Aggregator::Mean
                };
                let mut params =
                    crate::fixtures::sage_params(f_in, self.hidden, aggregator, seed);
                params.sample_size = self.sample_size.max(1);
                vec![LayerSpec::Sage { params }]
            }
        })
    }
}

#[derive(Args, Debug)]
struct PassArgs {
    /// Comma-separated pass list (empty = naive lowering).
    #[arg(long, default_value = "")]
    pipeline: String,
    /// Permit approximating passes (grax1/grax2/grax3).
    #[arg(long)]
    allow_approx: bool,
    /// Padded node capacity for nodepad.
    #[arg(long)]
    capacity: Option<usize>,
    /// Append the sparse-constant compression pass.
    #[arg(long)]
    grasp: bool,
    /// Append the constant-dedup pass.
    #[arg(long)]
    cacheg: bool,
    /// Calibration file for quantgr: loaded when present, captured from a
    /// recording run and written when absent.
    #[arg(long)]
    quant_calib: Option<PathBuf>,
    /// Use the column-constant variant of the grax2 rewrite.
    #[arg(long)]
    grax2_column: bool,
}

impl PassArgs {
    fn pipeline(&self) -> Result<Vec<PassId>> {
        let mut passes = parse_pipeline(&self.pipeline)?;
        for (flag, pass) in [(self.grasp, PassId::Grasp), (self.cacheg, PassId::Cacheg)] {
            if flag && !passes.contains(&pass) {
                passes.push(pass);
            }
        }
        Ok(passes)
    }

    fn options(
        &self,
        specs: &[LayerSpec],
        g: &Graph,
        pipeline: &[PassId],
    ) -> Result<PipelineOptions> {
        let mut opts = PipelineOptions {
            allow_approx: self.allow_approx,
            capacity: self.capacity,
            grax2_column: self.grax2_column,
            ..Default::default()
        };
        if let Some(path) = &self.quant_calib {
            if !pipeline.contains(&PassId::Quantgr) {
                return Err(Error::Config(
                    "--quant-calib given but the pipeline has no quantgr pass".into(),
                ));
            }
            if path.exists() {
                let text = std::fs::read_to_string(path)?;
                opts.calibrations = Some(tables_from_json(&text)?);
            } else {
                let tables = capture_calibrations(specs, g, pipeline, &opts)?;
                std::fs::write(path, tables_to_json(&tables)?)?;
                opts.calibrations = Some(tables);
            }
        }
        Ok(opts)
    }
}

fn load_profiles(path: &Option<PathBuf>) -> Result<ProfileSet> {
    match path {
        Some(p) => ProfileSet::from_json(&std::fs::read_to_string(p)?),
        None => Ok(ProfileSet::default_calibrated()),
    }
}

fn write_out(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

// ── Subcommands ────────────────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "grannite",
    version,
    about = "GNN inference optimization toolkit: verified graph passes on a simulated CPU + matrix-engine + DSP platform"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a pipeline's accuracy contract against the naive lowering.
    Verify(VerifyCmd),
    /// Cost and execute the standard optimization ladder for a layer kind.
    Bench(BenchCmd),
    /// Evaluate host/accelerator prefix cuts for every compiled layer.
    Partition(PartitionCmd),
}

#[derive(Args, Debug)]
struct VerifyCmd {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    passes: PassArgs,
    /// Write the outcome as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchCmd {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Device/transfer profile JSON (default: built-in calibrated set).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Write rows as .csv or .json by extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PartitionCmd {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    passes: PassArgs,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Also run the free-placement search as an optimality check
    /// (errors above 15 placeable nodes).
    #[arg(long)]
    exhaustive: bool,
    /// Write per-layer cut evaluations as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_verify(cmd: &VerifyCmd) -> Result<i32> {
    let g = cmd.graph.load()?;
    let seed = cmd.graph.seed();
    let specs = cmd.model.specs(&g, seed)?;
    let pipeline = cmd.passes.pipeline()?;
    let opts = cmd.passes.options(&specs, &g, &pipeline)?;
    let outcome = verify_model(&specs, &g, &pipeline, &opts)?;
    let label = if outcome.pipeline.is_empty() {
        "naive".to_string()
    } else {
        outcome.pipeline.clone()
    };
    println!(
        "verify {} [{}]: {} (max_abs={:.3e}, argmax_agreement={:.4}, contract: {})",
        cmd.model.layer,
        label,
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.max_abs,
        outcome.argmax_agreement,
        outcome.contract
    );
    if let Some(path) = &cmd.out {
        let mut text = serde_json::to_string_pretty(&outcome)?;
        text.push('\n');
        write_out(path, &text)?;
    }
    Ok(if outcome.passed { 0 } else { 1 })
}

fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "label,pipeline,total_seconds,compute_seconds,moved_bytes,total_energy,mac_total,mac_executed,max_abs_vs_naive,argmax_agreement_vs_naive,speedup_vs_naive\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},\"{}\",{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.pipeline,
            r.total_seconds,
            r.compute_seconds,
            r.moved_bytes,
            r.total_energy,
            r.mac_total,
            r.mac_executed,
            r.max_abs_vs_naive,
            r.argmax_agreement_vs_naive,
            r.speedup_vs_naive
        ));
    }
    out
}

fn cmd_bench(cmd: &BenchCmd) -> Result<i32> {
    let g = cmd.graph.load()?;
    let seed = cmd.graph.seed();
    let specs = cmd.model.specs(&g, seed)?;
    let set = load_profiles(&cmd.profile)?;
    // The ladder includes approximating rungs by design; each row reports
    // its accuracy alongside its cost.
    let opts = PipelineOptions {
        allow_approx: true,
        ..Default::default()
    };
    let rows = run_ladder(&specs, &g, &set, &opts)?;
    print!("{}", bench_csv(&rows));
    if let Some(path) = &cmd.out {
        if path.extension().map(|e| e == "csv").unwrap_or(false) {
            write_out(path, &bench_csv(&rows))?;
        } else {
            let mut text = serde_json::to_string_pretty(&rows)?;
            text.push('\n');
            write_out(path, &text)?;
        }
    }
    Ok(0)
}

#[derive(serde::Serialize)]
struct PartitionOutput {
    layer: usize,
    split: SplitReport,
    /// Ops ahead of the cut (host side), as `Kind#node_id` in topological order.
    host_ops: Vec<String>,
    /// Ops behind the cut (accelerator side).
    npu_ops: Vec<String>,
    /// Bytes crossing the chosen cut and the modeled totals at that cut.
    crossing_bytes: u64,
    transfer_seconds: f64,
    total_seconds: f64,
    total_energy: f64,
    /// Best seconds over free per-op placement, when --exhaustive is given.
    exhaustive_seconds: Option<f64>,
}

/// One `Kind xCount` census line, in graph order of first appearance.
fn census_line(ops: &[String]) -> String {
    if ops.is_empty() {
        return "-".into();
    }
    let mut order: Vec<&str> = Vec::new();
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for op in ops {
        let kind = op.split('#').next().unwrap_or(op);
        if !counts.contains_key(kind) {
            order.push(kind);
        }
        *counts.entry(kind).or_insert(0) += 1;
    }
    order
        .iter()
        .map(|k| format!("{k} x{}", counts[*k]))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_partition(cmd: &PartitionCmd) -> Result<i32> {
    let g = cmd.graph.load()?;
    let seed = cmd.graph.seed();
    let specs = cmd.model.specs(&g, seed)?;
    let pipeline = cmd.passes.pipeline()?;
    let opts = cmd.passes.options(&specs, &g, &pipeline)?;
    let set = load_profiles(&cmd.profile)?;
    let model = compile(&specs, &g, &pipeline, &opts)?;
    let cost_opts = CostOptions::default();
    let mut results = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let split = graphsplit_partition(&layer.graph, &set, &cost_opts)?;
        let placement = cut_placement(&layer.graph, split.best_index);
        let report = report_for(&layer.graph, &placement, &set, &cost_opts)?;
        let (mut host_ops, mut npu_ops) = (Vec::new(), Vec::new());
        for n in &layer.graph.nodes {
            if n.kind.is_neutral() {
                continue;
            }
            let tag = format!("{}#{}", n.kind.name(), n.id);
            match placement.device_of(n.id) {
                Some(Device::CPU) => host_ops.push(tag),
                _ => npu_ops.push(tag),
            }
        }
        let exhaustive_seconds = if cmd.exhaustive {
            Some(exhaustive_partition(&layer.graph, &set, &cost_opts)?.1)
        } else {
            None
        };
        println!(
            "layer {i}: best cut {} of {} placeable nodes, {:.6e} s",
            split.best_index, split.placeable, split.best_seconds
        );
        println!("  host:  {}", census_line(&host_ops));
        println!("  accel: {}", census_line(&npu_ops));
        println!(
            "  cut transfer: {} bytes, {:.6e} s; total energy {:.6e}",
            report.crossing_bytes, report.transfer_seconds, report.total_energy
        );
        if let Some(secs) = exhaustive_seconds {
            println!(
                "  exhaustive best: {:.6e} s ({})",
                secs,
                if (secs - split.best_seconds).abs() <= 1e-15 * split.best_seconds.abs() {
                    "prefix cut is optimal"
                } else {
                    "free placement is faster"
                }
            );
        }
        results.push(PartitionOutput {
            layer: i,
            split,
            host_ops,
            npu_ops,
            crossing_bytes: report.crossing_bytes,
            transfer_seconds: report.transfer_seconds,
            total_seconds: report.total_seconds,
            total_energy: report.total_energy,
            exhaustive_seconds,
        });
    }
    if let Some(path) = &cmd.out {
        let mut text = serde_json::to_string_pretty(&results)?;
        text.push('\n');
        write_out(path, &text)?;
    }
    Ok(0)
}

/// Parse argv and dispatch. Returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_default_env().try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Verify(cmd) => cmd_verify(cmd),
        Command::Bench(cmd) => cmd_bench(cmd),
        Command::Partition(cmd) => cmd_partition(cmd),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn seed_precedence_flag_over_default() {
        let cli = parse(&["grannite", "verify", "--synthetic", "8", "--seed", "7"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        assert_eq!(cmd.graph.seed(), 7);
        let cli = parse(&["grannite", "verify", "--synthetic", "8"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        // No flag and (normally) no env: the default.
        if std::env::var(SEED_ENV).is_err() {
            assert_eq!(cmd.graph.seed(), DEFAULT_SEED);
        }
    }

    #[test]
    fn graph_source_is_required_and_exclusive() {
        let cli = parse(&["grannite", "verify", "--synthetic", "8"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        assert!(cmd.graph.load().is_ok());
        let cli = parse(&["grannite", "verify"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        assert!(cmd.graph.load().is_err());
        assert!(Cli::try_parse_from([
            "grannite",
            "verify",
            "--synthetic",
            "8",
            "--dataset-content",
            "x",
            "--dataset-cites",
            "y",
        ])
        .is_err());
    }

    #[test]
    fn gcn_specs_are_two_layers_to_class_count() {
        let g = synthetic_graph(10, 5, 20, 3, 1);
        let cli = parse(&["grannite", "verify", "--synthetic", "10", "--hidden", "4"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        let specs = cmd.model.specs(&g, 1).unwrap();
        assert_eq!(specs.len(), 2);
        let LayerSpec::Gcn { params, .. } = &specs[1] else { panic!() };
        assert_eq!(params.weight.dim(), (4, 3));
    }

    #[test]
    fn convenience_flags_append_passes() {
        let cli = parse(&[
            "grannite",
            "verify",
            "--synthetic",
            "8",
            "--pipeline",
            "preg,stagr",
            "--grasp",
            "--cacheg",
        ]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        let p = cmd.passes.pipeline().unwrap();
        assert_eq!(
            p,
            vec![PassId::Preg, PassId::Stagr, PassId::Grasp, PassId::Cacheg]
        );
    }

    #[test]
    fn bench_csv_shape() {
        let rows = vec![BenchRow {
            label: "naive".into(),
            pipeline: "".into(),
            monotone: true,
            total_seconds: 1.5e-3,
            compute_seconds: 1.0e-3,
            moved_bytes: 42,
            total_energy: 1e-6,
            mac_total: 100,
            mac_executed: 90,
            max_abs_vs_naive: 0.0,
            argmax_agreement_vs_naive: 1.0,
            speedup_vs_naive: 1.0,
        }];
        let csv = bench_csv(&rows);
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("label,pipeline,total_seconds"));
        assert_eq!(
            lines.next().unwrap(),
            "naive,\"\",0.0015,0.001,42,0.000001,100,90,0,1,1"
        );
    }

    #[test]
    fn synthetic_tuple_parses_all_fields() {
        let spec = parse_synthetic("200,800,32,9").unwrap();
        assert_eq!(
            (spec.nodes, spec.edges, spec.features, spec.seed),
            (200, Some(800), Some(32), Some(9))
        );
        let spec = parse_synthetic("200").unwrap();
        assert_eq!((spec.nodes, spec.edges, spec.features, spec.seed), (200, None, None, None));
        for bad in ["", "0", "a", "8,", "1,2,3,4,5"] {
            assert!(parse_synthetic(bad).is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn synthetic_tuple_shapes_graph_and_seed() {
        let cli = parse(&["grannite", "verify", "--synthetic", "10,30,5,7"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        let g = cmd.graph.load().unwrap();
        assert_eq!((g.num_nodes, g.feature_dim, g.num_edges()), (10, 5, 30));
        assert_eq!(cmd.graph.seed(), 7);
        // An explicit --seed flag wins over the tuple seed.
        let cli = parse(&["grannite", "verify", "--synthetic", "10,30,5,7", "--seed", "3"]);
        let Command::Verify(cmd) = &cli.command else { panic!() };
        assert_eq!(cmd.graph.seed(), 3);
    }

    #[test]
    fn census_line_groups_by_kind_in_order() {
        let ops = vec!["MatMul#2".to_string(), "Softmax#3".into(), "MatMul#5".into()];
        assert_eq!(census_line(&ops), "MatMul x2, Softmax x1");
        assert_eq!(census_line(&[]), "-");
    }
}
