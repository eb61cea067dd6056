//! Graph container, citation-dataset ingestion, dense adjacency
//! construction, and capacity padding for static-shape accelerators.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Core container ─────────────────────────────────────────────────────────

/// A node-attributed directed graph with dense float features.
///
/// Edges are stored in first-appearance order with duplicates removed.
/// Every endpoint is `< num_nodes` and `features` has `num_nodes` rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Graph {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(
        serialize_with = "serialize_features",
        deserialize_with = "deserialize_features"
    )]
    pub features: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

fn serialize_features<S: serde::Serializer>(m: &Array2<f32>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f32>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.serialize(s)
}

fn deserialize_features<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Array2<f32>, D::Error> {
    let rows = Vec::<Vec<f32>>::deserialize(d)?;
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(nrows * ncols);
    for r in &rows {
        if r.len() != ncols {
            return Err(serde::de::Error::custom("ragged feature rows"));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((nrows, ncols), flat).map_err(serde::de::Error::custom)
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Array2<f32>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::Shape(format!(
                "feature rows {} != num_nodes {}",
                features.nrows(),
                num_nodes
            )));
        }
        if let Some(ls) = &labels {
            if ls.len() != num_nodes {
                return Err(Error::Shape(format!(
                    "label count {} != num_nodes {}",
                    ls.len(),
                    num_nodes
                )));
            }
        }
        let mut seen = HashSet::new();
        let mut dedup = Vec::with_capacity(edges.len());
        for (s, d) in edges {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::Shape(format!(
                    "edge ({s},{d}) out of range for {num_nodes} nodes"
                )));
            }
            if seen.insert((s, d)) {
                dedup.push((s, d));
            }
        }
        let num_classes = labels
            .as_ref()
            .map(|ls| ls.iter().copied().max().map_or(0, |m| m + 1));
        Ok(Graph {
            num_nodes,
            feature_dim: features.ncols(),
            edges: dedup,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Out-neighbor lists in ascending node order, self excluded unless a
    /// self-edge is present.
    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(s, d) in &self.edges {
            adj[s].push(d);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Undirected neighbor lists (union of in and out edges), ascending.
    pub fn sym_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(s, d) in &self.edges {
            adj[s].push(d);
            if s != d {
                adj[d].push(s);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Graph = serde_json::from_str(text)?;
        Graph::new(g.num_nodes, g.edges, g.features, g.labels)
    }
}

// ── Citation-format ingestion ──────────────────────────────────────────────

/// Parse `<id> <feat...> <label>` content rows and `<target> <source>` cite
/// rows. Node ids are remapped densely in first-appearance order; labels map
/// to class indices in lexicographic label order. Returns the graph plus the
/// count of cite rows dropped for referencing unknown ids.
pub fn parse_cora(content: &str, cites: &str) -> Result<(Graph, usize)> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut feature_rows: Vec<Vec<f32>> = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;

    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let w = *width.get_or_insert(cols.len());
        if cols.len() != w || w < 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected {} columns, found {}", w.max(3), cols.len()),
            });
        }
        let id = cols[0].to_string();
        if ids.contains_key(&id) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("duplicate node id {id}"),
            });
        }
        let mut feats = Vec::with_capacity(w - 2);
        for (ci, tok) in cols[1..w - 1].iter().enumerate() {
            let v: f32 = tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("bad feature value in column {}", ci + 2),
            })?;
            feats.push(v);
        }
        ids.insert(id, feature_rows.len());
        feature_rows.push(feats);
        label_names.push(cols[w - 1].to_string());
    }
    if feature_rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "empty content file".into(),
        });
    }

    let mut classes: Vec<String> = label_names.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
    classes.sort();
    let class_of: HashMap<&String, usize> =
        classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let labels: Vec<usize> = label_names.iter().map(|l| class_of[l]).collect();

    let mut edges = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in cites.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 2 columns in cites row, found {}", cols.len()),
            });
        }
        match (ids.get(cols[0]), ids.get(cols[1])) {
            // Row is `<target> <source>`: the edge runs source -> target.
            (Some(&target), Some(&source)) => edges.push((source, target)),
            _ => dropped += 1,
        }
    }

    let n = feature_rows.len();
    let f = feature_rows[0].len();
    let flat: Vec<f32> = feature_rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((n, f), flat).map_err(|e| Error::Shape(e.to_string()))?;
    let g = Graph::new(n, edges, features, Some(labels))?;
    Ok((g, dropped))
}

/// Load a citation dataset from its content and cites files.
pub fn load_cora_format(content_path: &str, cites_path: &str) -> Result<Graph> {
    let content = std::fs::read_to_string(content_path)?;
    let cites = std::fs::read_to_string(cites_path)?;
    let (g, dropped) = parse_cora(&content, &cites)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} cite rows referencing unknown node ids");
    }
    Ok(g)
}

// ── Dense adjacency ────────────────────────────────────────────────────────

/// Dense 0/1 adjacency. `self_loops` sets the diagonal; `symmetrize` mirrors
/// every edge. Pre-existing self-edges never double the diagonal.
pub fn build_adjacency(g: &Graph, self_loops: bool, symmetrize: bool) -> Array2<f32> {
    let n = g.num_nodes;
    let mut a = Array2::<f32>::zeros((n, n));
    for &(s, d) in &g.edges {
        a[[s, d]] = 1.0;
        if symmetrize {
            a[[d, s]] = 1.0;
        }
    }
    if self_loops {
        for i in 0..n {
            a[[i, i]] = 1.0;
        }
    }
    a
}

// ── Capacity padding ───────────────────────────────────────────────────────

/// Default padded capacity: next multiple of 500 at or above `n`.
pub fn default_capacity(n: usize) -> usize {
    if n == 0 {
        return 500;
    }
    n.div_ceil(500) * 500
}

/// A graph embedded in fixed-capacity storage. Feature rows and mask
/// rows/columns at or beyond `active_nodes` are all zero, so padded nodes
/// contribute nothing to any aggregation.
#[derive(Debug, Clone)]
pub struct PaddedGraph {
    pub capacity: usize,
    pub active_nodes: usize,
    /// The original graph re-hosted with `num_nodes == capacity`.
    pub graph: Graph,
    /// Dense capacity x capacity connectivity mask for the active block.
    pub adjacency_mask: Array2<f32>,
    pub self_loops: bool,
    pub symmetrize: bool,
}

impl PaddedGraph {
    /// View of the active feature rows.
    pub fn active_features(&self) -> ArrayView2<'_, f32> {
        self.graph.features.slice(ndarray::s![..self.active_nodes, ..])
    }
}

/// Embed `g` into `capacity`-sized storage. The mask holds
/// `build_adjacency(g, self_loops, symmetrize)` in its top-left block;
/// padded rows and columns stay zero (no self-loops on inactive nodes).
pub fn nodepad_pad(g: &Graph, capacity: usize, self_loops: bool, symmetrize: bool) -> Result<PaddedGraph> {
    if capacity < g.num_nodes {
        return Err(Error::Capacity {
            needed: g.num_nodes,
            capacity,
        });
    }
    let n = g.num_nodes;
    let mut features = Array2::<f32>::zeros((capacity, g.feature_dim));
    features.slice_mut(ndarray::s![..n, ..]).assign(&g.features);

    let mut mask = Array2::<f32>::zeros((capacity, capacity));
    mask.slice_mut(ndarray::s![..n, ..n])
        .assign(&build_adjacency(g, self_loops, symmetrize));

    let labels = g.labels.as_ref().map(|ls| {
        let mut padded = ls.clone();
        padded.resize(capacity, 0);
        padded
    });
    let embedded = Graph::new(capacity, g.edges.clone(), features, labels)?;
    Ok(PaddedGraph {
        capacity,
        active_nodes: n,
        graph: embedded,
        adjacency_mask: mask,
        self_loops,
        symmetrize,
    })
}

/// Apply incremental edits to a padded graph without re-padding. Returns a
/// new value; the original is untouched. Added edges are mirrored when the
/// pad was built symmetrized. Self-loops for newly activated nodes are the
/// consumer's responsibility (normalization passes add their own diagonal).
pub fn update_mask(
    pg: &PaddedGraph,
    add_edges: &[(usize, usize)],
    remove_edges: &[(usize, usize)],
    add_nodes: usize,
) -> Result<PaddedGraph> {
    let active = pg.active_nodes + add_nodes;
    if active > pg.capacity {
        return Err(Error::Capacity {
            needed: active,
            capacity: pg.capacity,
        });
    }
    let mut out = pg.clone();
    out.active_nodes = active;
    out.graph.num_nodes = pg.capacity; // unchanged; embedded storage stays capacity-sized

    for &(s, d) in add_edges {
        if s >= active || d >= active {
            return Err(Error::Shape(format!(
                "edge ({s},{d}) references an inactive node (active = {active})"
            )));
        }
        out.adjacency_mask[[s, d]] = 1.0;
        if pg.symmetrize {
            out.adjacency_mask[[d, s]] = 1.0;
        }
        if !out.graph.edges.contains(&(s, d)) {
            out.graph.edges.push((s, d));
        }
    }
    for &(s, d) in remove_edges {
        out.adjacency_mask[[s, d]] = 0.0;
        if pg.symmetrize {
            out.adjacency_mask[[d, s]] = 0.0;
        }
        out.graph.edges.retain(|&e| {
            e != (s, d) && (!pg.symmetrize || e != (d, s))
        });
    }
    if pg.self_loops {
        for i in pg.active_nodes..active {
            out.adjacency_mask[[i, i]] = 1.0;
        }
    }
    Ok(out)
}
