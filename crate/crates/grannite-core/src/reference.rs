//! Plain-math reference implementations of the supported GNN layers.
//!
//! These forwards are the ground truth every lowered operator graph is
//! verified against. Aggregations walk edges explicitly; no dense norm
//! matrix is involved.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::LARGE_NEG;

// ── Activations ────────────────────────────────────────────────────────────

pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn elu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Numerically stabilized softmax over a row (subtracts the row max).
pub fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

// ── Layer parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    /// f_in x f_out combination weight.
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
}

#[derive(Debug, Clone)]
pub struct GatLayerParams {
    /// f_in x f_out shared combination weight; heads split its columns.
    pub weight: Array2<f32>,
    /// Source/destination attention vectors of length f_out.
    pub attn_src: Array1<f32>,
    pub attn_dst: Array1<f32>,
    pub leaky_slope: f32,
    pub heads: usize,
}

impl GatLayerParams {
    pub fn head_dim(&self) -> Result<usize> {
        let f_out = self.weight.ncols();
        if self.heads == 0 || f_out % self.heads != 0 {
            return Err(Error::Shape(format!(
                "f_out {} not divisible by heads {}",
                f_out, self.heads
            )));
        }
        Ok(f_out / self.heads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub struct SageLayerParams {
    pub weight_self: Array2<f32>,
    pub weight_neigh: Array2<f32>,
    pub aggregator: Aggregator,
    /// Max sampled neighbors per node.
    pub sample_size: usize,
    pub sample_seed: u64,
}

pub const DEFAULT_SAMPLE_SIZE: usize = 10;
pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;

/// Symmetric-normalized connectivity matrix N = D^-1/2 (A+I) D^-1/2 used by
/// convolution lowering. Values are zero exactly where the (self-looped)
/// adjacency is zero, so all-zero rows stay all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormMatrix {
    pub values: Array2<f32>,
}

impl NormMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn max_asymmetry(&self) -> f32 {
        let n = self.n();
        let mut worst = 0.0f32;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.values[[i, j]] - self.values[[j, i]]).abs());
            }
        }
        worst
    }
}

// ── Neighbor sampling ──────────────────────────────────────────────────────

/// Deterministic per-node neighbor sampling: the sorted out-neighbor list is
/// shuffled with a stream seeded by (seed, node) and truncated to
/// `sample_size`. A pure function of graph structure and seed.
pub fn sample_neighbors(g: &Graph, sample_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let adj = g.out_neighbors();
    adj.into_iter()
        .enumerate()
        .map(|(i, mut list)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            // Fisher-Yates.
            for k in (1..list.len()).rev() {
                let j = rng.gen_range(0..=k);
                list.swap(k, j);
            }
            list.truncate(sample_size);
            list
        })
        .collect()
}

// ── Reference forwards ─────────────────────────────────────────────────────

fn check_feature_dim(params_rows: usize, h: &Array2<f32>) -> Result<()> {
    if h.ncols() != params_rows {
        return Err(Error::Shape(format!(
            "feature dim {} does not match weight rows {}",
            h.ncols(),
            params_rows
        )));
    }
    Ok(())
}

/// Graph convolution with symmetric normalization:
/// `out[i] = sum over j in N(i) and i itself of (h[j] W) / sqrt(d_i d_j)`,
/// where degrees count the implicit self-loop and N(i) is the undirected
/// neighborhood. Computed by explicit per-edge gather/accumulate.
pub fn gcn_forward_reference(g: &Graph, params: &GcnLayerParams, h: &Array2<f32>) -> Result<Array2<f32>> {
    check_feature_dim(params.weight.nrows(), h)?;
    if h.nrows() != g.num_nodes {
        return Err(Error::Shape(format!(
            "h rows {} != num_nodes {}",
            h.nrows(),
            g.num_nodes
        )));
    }
    let hw = h.dot(&params.weight);
    let f_out = hw.ncols();
    let adj = g.sym_neighbors();
    let deg: Vec<f32> = (0..g.num_nodes)
        .map(|i| {
            let self_included = adj[i].binary_search(&i).is_ok();
            (adj[i].len() + usize::from(!self_included)) as f32
        })
        .collect();

    let mut out = Array2::<f32>::zeros((g.num_nodes, f_out));
    for i in 0..g.num_nodes {
        let mut walk = |j: usize| {
            let norm = 1.0 / (deg[i] * deg[j]).sqrt();
            for k in 0..f_out {
                out[[i, k]] += norm * hw[[j, k]];
            }
        };
        let mut self_seen = false;
        for &j in &adj[i] {
            if j == i {
                self_seen = true;
            }
            walk(j);
        }
        if !self_seen {
            walk(i);
        }
    }
    if let Some(b) = &params.bias {
        if b.len() != f_out {
            return Err(Error::Shape(format!(
                "bias len {} != f_out {}",
                b.len(),
                f_out
            )));
        }
        for mut row in out.rows_mut() {
            row += b;
        }
    }
    Ok(out)
}

/// Graph attention. Per head: z = h W (head slice), logits
/// `e[i][j] = leaky_relu(z[i] a_src + z[j] a_dst)` on edges of A+I and
/// -LARGE_NEG elsewhere, row softmax, output `sum alpha z`. Head outputs are
/// concatenated; ELU applies when the layer is not final.
pub fn gat_forward_reference(
    g: &Graph,
    params: &GatLayerParams,
    h: &Array2<f32>,
    apply_elu: bool,
) -> Result<Array2<f32>> {
    check_feature_dim(params.weight.nrows(), h)?;
    let n = g.num_nodes;
    if h.nrows() != n {
        return Err(Error::Shape(format!("h rows {} != num_nodes {n}", h.nrows())));
    }
    let d = params.head_dim()?;
    if params.attn_src.len() != params.weight.ncols() || params.attn_dst.len() != params.weight.ncols() {
        return Err(Error::Shape(
            "attention vector length must equal f_out".into(),
        ));
    }
    let z = h.dot(&params.weight);
    let f_out = z.ncols();

    // Edge set of A+I.
    let mut on_edge = vec![vec![false; n]; n];
    for &(s, dd) in &g.edges {
        on_edge[s][dd] = true;
        on_edge[dd][s] = true;
    }
    for (i, row) in on_edge.iter_mut().enumerate() {
        row[i] = true;
    }

    let mut out = Array2::<f32>::zeros((n, f_out));
    for head in 0..params.heads {
        let lo = head * d;
        let hi = lo + d;
        let s: Vec<f32> = (0..n)
            .map(|i| (lo..hi).map(|k| z[[i, k]] * params.attn_src[k]).sum())
            .collect();
        let t: Vec<f32> = (0..n)
            .map(|j| (lo..hi).map(|k| z[[j, k]] * params.attn_dst[k]).sum())
            .collect();
        for i in 0..n {
            let logits: Vec<f32> = (0..n)
                .map(|j| {
                    if on_edge[i][j] {
                        leaky_relu(s[i] + t[j], params.leaky_slope)
                    } else {
                        -LARGE_NEG
                    }
                })
                .collect();
            let alpha = softmax_row(&logits);
            for j in 0..n {
                if alpha[j] != 0.0 {
                    for k in lo..hi {
                        out[[i, k]] += alpha[j] * z[[j, k]];
                    }
                }
            }
        }
    }
    if apply_elu {
        out.mapv_inplace(elu);
    }
    Ok(out)
}

/// Sampled-neighborhood aggregation:
/// `out[i] = h[i] W_self + agg(sampled out-neighbors) W_neigh`. An empty
/// sample aggregates to the zero vector for both mean and max.
pub fn sage_forward_reference(g: &Graph, params: &SageLayerParams, h: &Array2<f32>) -> Result<Array2<f32>> {
    check_feature_dim(params.weight_self.nrows(), h)?;
    check_feature_dim(params.weight_neigh.nrows(), h)?;
    if params.weight_self.ncols() != params.weight_neigh.ncols() {
        return Err(Error::Shape("weight_self/weight_neigh f_out mismatch".into()));
    }
    let n = g.num_nodes;
    if h.nrows() != n {
        return Err(Error::Shape(format!("h rows {} != num_nodes {n}", h.nrows())));
    }
    let f_in = h.ncols();
    let samples = sample_neighbors(g, params.sample_size, params.sample_seed);

    let mut agg = Array2::<f32>::zeros((n, f_in));
    for i in 0..n {
        let s = &samples[i];
        if s.is_empty() {
            continue;
        }
        match params.aggregator {
            Aggregator::Mean => {
                for &j in s {
                    for k in 0..f_in {
                        agg[[i, k]] += h[[j, k]];
                    }
                }
                let inv = 1.0 / s.len() as f32;
                for k in 0..f_in {
                    agg[[i, k]] *= inv;
                }
            }
            Aggregator::Max => {
                for k in 0..f_in {
                    agg[[i, k]] = s.iter().map(|&j| h[[j, k]]).fold(f32::NEG_INFINITY, f32::max);
                }
            }
        }
    }
    Ok(h.dot(&params.weight_self) + agg.dot(&params.weight_neigh))
}

// ── Weight files and seeded initialization ─────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub tensors: Vec<NamedTensor>,
}

impl WeightFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f32>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Missing(format!("weight tensor {name}")))?;
        if t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.data.len() {
            return Err(Error::Shape(format!("tensor {name} is not a valid matrix")));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn get1(&self, name: &str) -> Result<Array1<f32>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Missing(format!("weight tensor {name}")))?;
        if t.shape.len() != 1 || t.shape[0] != t.data.len() {
            return Err(Error::Shape(format!("tensor {name} is not a valid vector")));
        }
        Ok(Array1::from_vec(t.data.clone()))
    }
}

/// Uniform(-1/sqrt(f_in), 1/sqrt(f_in)) matrix from a seeded stream.
pub fn init_matrix(f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let bound = 1.0 / (f_in.max(1) as f32).sqrt();
    Array2::from_shape_fn((f_in, f_out), |_| rng.gen_range(-bound..bound))
}

pub fn init_vector(f_in: usize, len: usize, rng: &mut ChaCha8Rng) -> Array1<f32> {
    let bound = 1.0 / (f_in.max(1) as f32).sqrt();
    Array1::from_shape_fn(len, |_| rng.gen_range(-bound..bound))
}
