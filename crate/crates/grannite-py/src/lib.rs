//! Python bindings: graphs, layer stacks, pass pipelines, verification,
//! ladder benchmarking, and device partitioning from Python.
//!
//! ```python
//! import grannite_py as gp
//! g = gp.Graph.synthetic(64, 16, 256, 4, seed=7)
//! m = gp.Model.gcn(16, 8, 4, seed=7)
//! print(gp.verify(m, g, "preg,stagr"))
//! ```

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use grannite_core::cost::{graphsplit_partition, CostOptions, ProfileSet};
use grannite_core::fixtures::{gat_params, gcn_params, sage_params, synthetic_graph};
use grannite_core::graph::load_cora_format;
use grannite_core::pipeline::{
    compile as compile_model, parse_pipeline, run_ladder, run_model, verify_model, CompiledModel,
    LayerSpec, PipelineOptions,
};
use grannite_core::reference::Aggregator;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_py(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py(py)
            }
        }
        serde_json::Value::String(s) => s.into_py(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty_bound(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new_bound(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_py(py)
        }
    })
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let v = serde_json::to_value(value).map_err(err)?;
    json_to_py(py, &v)
}

// ── Graph ──────────────────────────────────────────────────────────────────

/// A node-feature graph: directed edges plus a dense feature matrix.
#[pyclass(frozen)]
pub struct Graph {
    inner: grannite_core::graph::Graph,
}

#[pymethods]
impl Graph {
    /// Seeded random graph with deduplicated directed edges.
    #[staticmethod]
    #[pyo3(signature = (num_nodes, feature_dim, num_edges, num_classes, seed=42))]
    fn synthetic(
        num_nodes: usize,
        feature_dim: usize,
        num_edges: usize,
        num_classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        if num_nodes == 0 {
            return Err(PyValueError::new_err("graph needs at least one node"));
        }
        Ok(Graph {
            inner: synthetic_graph(num_nodes, feature_dim, num_edges, num_classes, seed),
        })
    }

    /// Load the citation-network text format (a `.content` feature file and
    /// a `.cites` edge file).
    #[staticmethod]
    fn load(content_path: &str, cites_path: &str) -> PyResult<Self> {
        Ok(Graph {
            inner: load_cora_format(content_path, cites_path).map_err(err)?,
        })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.edges.len()
    }

    #[getter]
    fn num_classes(&self) -> Option<usize> {
        self.inner.num_classes
    }

    /// Feature matrix as a list of per-node rows.
    fn features(&self) -> Vec<Vec<f32>> {
        self.inner
            .features
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(num_nodes={}, feature_dim={}, num_edges={})",
            self.inner.num_nodes,
            self.inner.feature_dim,
            self.inner.edges.len()
        )
    }
}

// ── Model ──────────────────────────────────────────────────────────────────

/// A stack of layers of one kind, with seeded parameter initialization.
#[pyclass(frozen)]
pub struct Model {
    specs: Vec<LayerSpec>,
    kind: String,
}

#[pymethods]
impl Model {
    /// Two-layer convolution: features -> hidden (relu) -> classes.
    #[staticmethod]
    #[pyo3(signature = (f_in, hidden, classes, seed=42))]
    fn gcn(f_in: usize, hidden: usize, classes: usize, seed: u64) -> Model {
        Model {
            specs: vec![
                LayerSpec::Gcn {
                    params: gcn_params(f_in, hidden, true, seed),
                    relu: true,
                },
                LayerSpec::Gcn {
                    params: gcn_params(hidden, classes, true, seed ^ 1),
                    relu: false,
                },
            ],
            kind: "gcn".into(),
        }
    }

    /// Single attention layer; `hidden` must divide evenly across heads.
    #[staticmethod]
    #[pyo3(signature = (f_in, hidden, heads=1, seed=42, elu=false))]
    fn gat(f_in: usize, hidden: usize, heads: usize, seed: u64, elu: bool) -> PyResult<Model> {
        if heads == 0 || hidden % heads != 0 {
            return Err(PyValueError::new_err(format!(
                "hidden {hidden} not divisible by heads {heads}"
            )));
        }
        Ok(Model {
            specs: vec![LayerSpec::Gat {
                params: gat_params(f_in, hidden, heads, seed),
                elu,
            }],
            kind: "gat".into(),
        })
    }

    /// Single sampled-aggregation layer; `aggregator` is "mean" or "max".
    #[staticmethod]
    #[pyo3(signature = (f_in, hidden, aggregator="mean", seed=42, sample_size=10))]
    fn sage(
        f_in: usize,
        hidden: usize,
        aggregator: &str,
        seed: u64,
        sample_size: usize,
    ) -> PyResult<Model> {
        let agg = match aggregator {
            "mean" => Aggregator::Mean,
            "max" => Aggregator::Max,
            other => {
                return Err(PyValueError::new_err(format!(
                    "aggregator must be 'mean' or 'max', got '{other}'"
                )))
            }
        };
        let mut params = sage_params(f_in, hidden, agg, seed);
        params.sample_size = sample_size.max(1);
        Ok(Model {
            specs: vec![LayerSpec::Sage { params }],
            kind: format!("sage-{aggregator}"),
        })
    }

    #[getter]
    fn kind(&self) -> &str {
        &self.kind
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.specs.len()
    }

    fn __repr__(&self) -> String {
        format!("Model(kind='{}', num_layers={})", self.kind, self.specs.len())
    }
}

// ── Compiled pipelines ─────────────────────────────────────────────────────

fn options_for(allow_approx: bool, capacity: Option<usize>) -> PipelineOptions {
    PipelineOptions {
        allow_approx,
        capacity,
        ..Default::default()
    }
}

/// A lowered and transformed model, ready to execute.
#[pyclass(frozen)]
pub struct Compiled {
    model: CompiledModel,
}

#[pymethods]
impl Compiled {
    /// Execute on the graph's features; returns the active-node output rows.
    fn run(&self, graph: &Graph) -> PyResult<Vec<Vec<f32>>> {
        let run = run_model(&self.model, &graph.inner.features, false).map_err(err)?;
        let active =
            grannite_core::pipeline::active_rows(&self.model, &run.output).map_err(err)?;
        Ok(active.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.model.capacity
    }

    #[getter]
    fn active_nodes(&self) -> usize {
        self.model.active_nodes
    }

    #[getter]
    fn passes(&self) -> Vec<&'static str> {
        self.model.pipeline.iter().map(|p| p.name()).collect()
    }

    /// Per-layer operation counts after all rewrites.
    fn op_census(&self, py: Python<'_>) -> PyResult<PyObject> {
        let layers: Vec<_> = self.model.layers.iter().map(|l| l.graph.census()).collect();
        serialize_to_py(py, &layers)
    }

    fn __repr__(&self) -> String {
        format!(
            "Compiled(kind='{}', layers={}, capacity={})",
            self.model.kind.name(),
            self.model.layers.len(),
            self.model.capacity
        )
    }
}

/// Lower `model` for `graph` and apply the comma-separated pass pipeline.
#[pyfunction]
#[pyo3(signature = (model, graph, pipeline="", allow_approx=false, capacity=None))]
fn compile(
    model: &Model,
    graph: &Graph,
    pipeline: &str,
    allow_approx: bool,
    capacity: Option<usize>,
) -> PyResult<Compiled> {
    let passes = parse_pipeline(pipeline).map_err(err)?;
    let compiled = compile_model(
        &model.specs,
        &graph.inner,
        &passes,
        &options_for(allow_approx, capacity),
    )
    .map_err(err)?;
    Ok(Compiled { model: compiled })
}

/// Check the pipeline's accuracy contract against the naive lowering;
/// returns the outcome as a dict (keys: pipeline, approx, max_abs,
/// argmax_agreement, tolerance, agreement_floor, passed).
#[pyfunction]
#[pyo3(signature = (model, graph, pipeline="", allow_approx=false, capacity=None))]
fn verify(
    py: Python<'_>,
    model: &Model,
    graph: &Graph,
    pipeline: &str,
    allow_approx: bool,
    capacity: Option<usize>,
) -> PyResult<PyObject> {
    let passes = parse_pipeline(pipeline).map_err(err)?;
    let outcome = verify_model(
        &model.specs,
        &graph.inner,
        &passes,
        &options_for(allow_approx, capacity),
    )
    .map_err(err)?;
    serialize_to_py(py, &outcome)
}

/// Cost and execute the standard optimization ladder for the model's kind;
/// returns one dict per rung.
#[pyfunction]
fn ladder(py: Python<'_>, model: &Model, graph: &Graph) -> PyResult<PyObject> {
    let rows = run_ladder(
        &model.specs,
        &graph.inner,
        &ProfileSet::default_calibrated(),
        &options_for(true, None),
    )
    .map_err(err)?;
    serialize_to_py(py, &rows)
}

/// Evaluate host/accelerator prefix cuts for every compiled layer; returns
/// one dict per layer with all cut costs and the chosen index.
#[pyfunction]
#[pyo3(signature = (model, graph, pipeline="", allow_approx=false))]
fn partition(
    py: Python<'_>,
    model: &Model,
    graph: &Graph,
    pipeline: &str,
    allow_approx: bool,
) -> PyResult<PyObject> {
    let passes = parse_pipeline(pipeline).map_err(err)?;
    let compiled = compile_model(
        &model.specs,
        &graph.inner,
        &passes,
        &options_for(allow_approx, None),
    )
    .map_err(err)?;
    let set = ProfileSet::default_calibrated();
    let mut reports = Vec::with_capacity(compiled.layers.len());
    for layer in &compiled.layers {
        reports.push(
            graphsplit_partition(&layer.graph, &set, &CostOptions::default()).map_err(err)?,
        );
    }
    serialize_to_py(py, &reports)
}

/// The built-in calibrated device/transfer profile set as a JSON string.
#[pyfunction]
fn default_profiles_json() -> PyResult<String> {
    ProfileSet::default_calibrated().to_json().map_err(err)
}

#[pymodule]
fn grannite_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Model>()?;
    m.add_class::<Compiled>()?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(ladder, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(default_profiles_json, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
