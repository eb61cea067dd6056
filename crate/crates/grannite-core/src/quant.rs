//! Symmetric static INT8 quantization.
//!
//! One scale per tensor, zero-point fixed at 0: q = clamp(round(x/s), ±127)
//! with round-half-to-even, dequant x' = q*s. Scales come from recorded
//! per-tensor absolute maxima (s = absmax/127), so quantization is static:
//! no runtime range scans. Matmuls accumulate in i32, which is guaranteed
//! overflow-free for inner dimensions up to [`INT8_MATMUL_MAX_K`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{AttrValue, Dtype, NodeId, OpGraph, OpKind};
use crate::sparsity::MacStats;
use crate::transforms::{prune_dead, PassReport, Rebuilder};

/// Largest inner dimension an INT8 matmul accepts: 2^15 terms of at most
/// 127*127 each stay comfortably inside i32.
pub const INT8_MATMUL_MAX_K: usize = 1 << 15;

pub const QMAX: f32 = 127.0;

/// s = absmax/127; an all-zero (or degenerate) tensor gets scale 1 so that
/// quantization remains a total function.
pub fn scale_from_absmax(absmax: f32) -> f32 {
    if absmax > 0.0 && absmax.is_finite() {
        absmax / QMAX
    } else {
        1.0
    }
}

pub fn quantize_value(x: f32, scale: f32) -> f32 {
    (x / scale).round_ties_even().clamp(-QMAX, QMAX)
}

pub fn dequantize_value(q: f32, scale: f32) -> f32 {
    q * scale
}

pub fn quantize_tensor(t: &ArrayD<f32>, scale: f32) -> ArrayD<f32> {
    t.mapv(|x| quantize_value(x, scale))
}

// ── Calibration ────────────────────────────────────────────────────────────

/// Per-tensor absolute maxima recorded on a representative run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    absmax: BTreeMap<String, f32>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationRecord {
    name: String,
    absmax: f32,
    scale: f32,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    tensors: Vec<CalibrationRecord>,
}

impl CalibrationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps the largest absmax seen for a name, so repeated runs widen
    /// ranges monotonically.
    pub fn record(&mut self, name: &str, absmax: f32) {
        let e = self.absmax.entry(name.to_string()).or_insert(0.0);
        if absmax > *e {
            *e = absmax;
        }
    }

    pub fn absmax(&self, name: &str) -> Option<f32> {
        self.absmax.get(name).copied()
    }

    pub fn scale(&self, name: &str) -> Option<f32> {
        self.absmax(name).map(scale_from_absmax)
    }

    pub fn len(&self) -> usize {
        self.absmax.len()
    }

    pub fn is_empty(&self) -> bool {
        self.absmax.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    /// The stored scale is redundant with absmax; absmax wins on load.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(text)?;
        Ok(Self::from_file(file))
    }

    fn to_file(&self) -> CalibrationFile {
        CalibrationFile {
            tensors: self
                .absmax
                .iter()
                .map(|(name, &absmax)| CalibrationRecord {
                    name: name.clone(),
                    absmax,
                    scale: scale_from_absmax(absmax),
                })
                .collect(),
        }
    }

    fn from_file(file: CalibrationFile) -> Self {
        let mut t = CalibrationTable::new();
        for r in file.tensors {
            t.record(&r.name, r.absmax);
        }
        t
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationSetFile {
    layers: Vec<CalibrationFile>,
}

/// One calibration table per model layer, as a single JSON document.
pub fn tables_to_json(tables: &[CalibrationTable]) -> Result<String> {
    let file = CalibrationSetFile {
        layers: tables.iter().map(CalibrationTable::to_file).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn tables_from_json(text: &str) -> Result<Vec<CalibrationTable>> {
    let file: CalibrationSetFile = serde_json::from_str(text)?;
    Ok(file.layers.into_iter().map(CalibrationTable::from_file).collect())
}

// ── INT8 matmul ────────────────────────────────────────────────────────────

/// `a @ b` over integer-valued f32 tensors, returning the raw i32
/// accumulators. With `zero_skip`, MACs whose `a` element is zero are not
/// executed (integer accumulation makes this trivially exact). The inner
/// dimension guard keeps |accum| ≤ 2^15 · 127² < 2^31, so i32 never wraps.
pub fn int8_matmul_accum(
    a: &ArrayView2<f32>,
    b: &ArrayView2<f32>,
    zero_skip: bool,
) -> Result<(Array2<i32>, MacStats)> {
    let (n, k) = a.dim();
    let (kb, m) = b.dim();
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if k > INT8_MATMUL_MAX_K {
        return Err(Error::Pass(format!(
            "INT8 matmul inner dimension {k} exceeds the i32 accumulation guard {INT8_MATMUL_MAX_K}"
        )));
    }
    let to_i32 = |v: f32, side: &str| -> Result<i32> {
        if v.fract() != 0.0 || !(-QMAX..=QMAX).contains(&v) {
            return Err(Error::Pass(format!(
                "{side} operand value {v} is not a quantized INT8 level"
            )));
        }
        Ok(v as i32)
    };
    let mut ai = Vec::with_capacity(n * k);
    for &v in a.iter() {
        ai.push(to_i32(v, "left")?);
    }
    let mut bi = Vec::with_capacity(kb * m);
    for &v in b.iter() {
        bi.push(to_i32(v, "right")?);
    }
    let mut out = Array2::<i32>::zeros((n, m));
    let mut skipped = 0u64;
    for i in 0..n {
        let mut row = out.row_mut(i);
        for kk in 0..k {
            let av = ai[i * k + kk];
            if zero_skip && av == 0 {
                skipped += m as u64;
                continue;
            }
            for j in 0..m {
                row[j] += av * bi[kk * m + j];
            }
        }
    }
    let total = (n * k * m) as u64;
    Ok((
        out,
        MacStats {
            total,
            skipped,
            executed: total - skipped,
        },
    ))
}

/// [`int8_matmul_accum`] with the accumulators widened back to f32 for the
/// dequantize stage.
pub fn int8_matmul(
    a: &ArrayView2<f32>,
    b: &ArrayView2<f32>,
    zero_skip: bool,
) -> Result<(Array2<f32>, MacStats)> {
    let (acc, stats) = int8_matmul_accum(a, b, zero_skip)?;
    Ok((acc.mapv(|v| v as f32), stats))
}

// ── quantgr: wrap matmuls in quantize/dequantize ───────────────────────────

/// Shared memo so the same constant payload quantized at the same scale
/// yields the same `Arc` across a model's layer graphs (keeps constant-dedup
/// passes effective after quantization).
#[derive(Default)]
pub struct QuantMemo {
    payloads: HashMap<(usize, u32), Arc<ArrayD<f32>>>,
}

/// Rewrites every FP32 matmul into quantize -> INT8 matmul -> dequantize.
/// Constant operands are folded to INT8 payloads at compile time (shipping
/// 1 byte/element); other operands need a calibration entry under their node
/// name or the pass refuses with a `Missing` error. The dequantize scale is
/// the product of the operand scales, the exact inverse of the symmetric
/// quantization, so the only information lost is the rounding to 255 levels.
pub fn quantgr_lower(
    g: &OpGraph,
    table: &CalibrationTable,
    memo: &mut QuantMemo,
) -> Result<(OpGraph, PassReport)> {
    let mut rb = Rebuilder::new(g);
    let mut matched = 0usize;
    let mut folded = 0usize;
    // One quantize node per (operand, graph), even if it feeds several
    // matmuls.
    let mut quantized: HashMap<NodeId, (NodeId, f32)> = HashMap::new();
    for old in 0..g.nodes.len() {
        let n = &g.nodes[old];
        if n.kind == OpKind::MatMul && n.dtype != Dtype::INT8 {
            let mut sides = Vec::with_capacity(2);
            for &operand in &n.inputs {
                if let Some(&(q, s)) = quantized.get(&operand) {
                    sides.push((q, s));
                    continue;
                }
                let on = &g.nodes[operand];
                let made = if let Some(entry) = g.const_of(on) {
                    let absmax = table.absmax(&on.name).unwrap_or_else(|| {
                        entry.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
                    });
                    let scale = scale_from_absmax(absmax);
                    let key = (Arc::as_ptr(&entry.data) as usize, scale.to_bits());
                    let payload = memo
                        .payloads
                        .entry(key)
                        .or_insert_with(|| Arc::new(quantize_tensor(&entry.data, scale)))
                        .clone();
                    let id = rb
                        .b
                        .constant_shared(&format!("{}_q8", on.name), Arc::clone(&payload));
                    for (k, v) in &on.attrs {
                        if k != "const_index" {
                            rb.b.set_attr(id, k, v.clone());
                        }
                    }
                    if on.attr_int("nnz").is_some() {
                        let nnz = payload.iter().filter(|&&v| v != 0.0).count();
                        rb.b.set_attr(id, "nnz", AttrValue::Int(nnz as i64));
                    }
                    rb.b.set_dtype(id, Dtype::INT8);
                    rb.b.set_attr(id, "scale", AttrValue::Float(scale as f64));
                    folded += 1;
                    (id, scale)
                } else {
                    let scale = table.scale(&on.name).ok_or_else(|| {
                        Error::Missing(format!(
                            "calibration for tensor '{}' (run a calibration pass first)",
                            on.name
                        ))
                    })?;
                    let id = rb.b.op(
                        OpKind::QuantizeLinear,
                        &format!("{}_q8", on.name),
                        &[rb.mapped(operand)],
                        crate::ir::attrs(&[("scale", AttrValue::Float(scale as f64))]),
                    )?;
                    rb.b.set_dtype(id, Dtype::INT8);
                    (id, scale)
                };
                quantized.insert(operand, made);
                sides.push(made);
            }
            let (qa, sa) = sides[0];
            let (qb, sb) = sides[1];
            let mm = rb.b.op(OpKind::MatMul, &n.name, &[qa, qb], n.attrs.clone())?;
            rb.b.set_dtype(mm, Dtype::INT8);
            let dq = rb.b.op(
                OpKind::DequantizeLinear,
                &format!("{}_f32", n.name),
                &[mm],
                crate::ir::attrs(&[("scale", AttrValue::Float((sa * sb) as f64))]),
            )?;
            rb.substitute(old, dq);
            matched += 1;
            continue;
        }
        rb.copy(old)?;
    }
    let out = prune_dead(&rb.finish())?;
    let mut report = PassReport::new("quantgr", matched, g, &out);
    report.note = Some(if matched == 0 {
        "no FP32 matmuls to quantize".into()
    } else {
        format!("{folded} constant operand(s) folded to INT8 payloads")
    });
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, Graph};
    use crate::ir::validate;
    use crate::reference::GcnLayerParams;
    use crate::transforms::{cacheg_annotate, preg_norm_matrix, stagr_lower_shared};
    use ndarray::array;
    use num_bigint::BigInt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_formula_and_degenerate_absmax() {
        assert_eq!(scale_from_absmax(12.7), 0.1);
        assert_eq!(scale_from_absmax(0.0), 1.0);
        assert_eq!(scale_from_absmax(f32::NAN), 1.0);
    }

    #[test]
    fn round_half_to_even() {
        assert_eq!(quantize_value(2.5, 1.0), 2.0);
        assert_eq!(quantize_value(3.5, 1.0), 4.0);
        assert_eq!(quantize_value(-2.5, 1.0), -2.0);
        assert_eq!(quantize_value(0.5, 1.0), 0.0);
    }

    #[test]
    fn clamp_at_127_levels() {
        let absmax = 3.7f32;
        let s = scale_from_absmax(absmax);
        assert_eq!(quantize_value(2.0 * absmax, s), 127.0);
        assert_eq!(quantize_value(-2.0 * absmax, s), -127.0);
    }

    #[test]
    fn roundtrip_error_within_half_scale_exhaustive() {
        let absmax = 3.7f32;
        let s = scale_from_absmax(absmax);
        let half = s / 2.0;
        // Dense grid over the representable range plus random draws.
        let mut worst = 0.0f32;
        for i in 0..=20_000 {
            let x = -absmax + (2.0 * absmax) * (i as f32 / 20_000.0);
            let err = (dequantize_value(quantize_value(x, s), s) - x).abs();
            worst = worst.max(err);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let x: f32 = rng.gen_range(-absmax..absmax);
            let err = (dequantize_value(quantize_value(x, s), s) - x).abs();
            worst = worst.max(err);
        }
        assert!(worst <= half, "worst {worst} > scale/2 {half}");
    }

    #[test]
    fn int8_matmul_matches_bigint_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, k, m) = (6, 50, 5);
        let a = Array2::from_shape_fn((n, k), |_| rng.gen_range(-127..=127) as f32);
        let b = Array2::from_shape_fn((k, m), |_| rng.gen_range(-127..=127) as f32);
        let (out, stats) = int8_matmul(&a.view(), &b.view(), false).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = BigInt::from(0);
                for kk in 0..k {
                    acc += BigInt::from(a[[i, kk]] as i64) * BigInt::from(b[[kk, j]] as i64);
                }
                assert_eq!(BigInt::from(out[[i, j]] as i64), acc);
            }
        }
        assert_eq!(stats.executed, (n * k * m) as u64);
    }

    #[test]
    fn int8_matmul_guard_and_level_checks() {
        let a = Array2::<f32>::zeros((1, INT8_MATMUL_MAX_K + 1));
        let b = Array2::<f32>::zeros((INT8_MATMUL_MAX_K + 1, 1));
        assert!(int8_matmul(&a.view(), &b.view(), false).is_err());
        let a = array![[0.5f32]];
        let b = array![[1.0f32]];
        assert!(int8_matmul(&a.view(), &b.view(), false).is_err());
        let a = array![[130.0f32]];
        assert!(int8_matmul(&a.view(), &b.view(), false).is_err());
    }

    #[test]
    fn int8_zero_skip_is_exact() {
        let a = array![[0.0f32, 3.0], [0.0, 0.0]];
        let b = array![[1.0f32, 2.0], [4.0, -5.0]];
        let (dense, _) = int8_matmul(&a.view(), &b.view(), false).unwrap();
        let (skip, stats) = int8_matmul(&a.view(), &b.view(), true).unwrap();
        assert_eq!(dense, skip);
        assert_eq!(stats.skipped, 6);
        assert_eq!(stats.executed, 2);
    }

    #[test]
    fn calibration_json_roundtrip() {
        let mut t = CalibrationTable::new();
        t.record("h", 2.0);
        t.record("hw", 8.0);
        t.record("h", 1.0); // smaller later record must not shrink the range
        let json = t.to_json().unwrap();
        assert!(json.contains("\"absmax\": 2.0"));
        let back = CalibrationTable::from_json(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.scale("hw"), Some(8.0 / 127.0));
    }

    fn stagr_fixture() -> (OpGraph, OpGraph) {
        let features = Array2::zeros((4, 3));
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3)], features, None).unwrap();
        let adj = build_adjacency(&g, true, true);
        let norm = preg_norm_matrix(&adj).unwrap();
        let shared = Arc::new(norm.values.clone().into_dyn());
        let p1 = GcnLayerParams {
            weight: array![[0.5, -1.0], [1.5, 0.25], [0.1, 0.9]],
            bias: None,
        };
        let p2 = GcnLayerParams {
            weight: array![[1.0, 0.0], [0.0, 1.0]],
            bias: None,
        };
        let l1 = stagr_lower_shared(&p1, Arc::clone(&shared), true).unwrap();
        let l2 = stagr_lower_shared(&p2, shared, false).unwrap();
        (l1, l2)
    }

    #[test]
    fn quantgr_wraps_matmuls_and_folds_constants() {
        let (l1, _) = stagr_fixture();
        let mut table = CalibrationTable::new();
        table.record("h", 2.0);
        table.record("hw", 6.0);
        let mut memo = QuantMemo::default();
        let (q, report) = quantgr_lower(&l1, &table, &mut memo).unwrap();
        if let Err(d) = validate(&q) {
            panic!("diagnostic: {d}");
        }
        assert_eq!(report.matched, 2);
        assert_eq!(q.count_kind(OpKind::QuantizeLinear), 2);
        assert_eq!(q.count_kind(OpKind::DequantizeLinear), 2);
        assert_eq!(q.count_kind(OpKind::MatMul), 2);
        assert!(q
            .nodes
            .iter()
            .filter(|n| n.kind == OpKind::MatMul)
            .all(|n| n.dtype == Dtype::INT8));
        // The FP32 weight/norm constants are gone; INT8 payloads remain.
        assert!(q.nodes.iter().any(|n| n.name == "norm_q8"));
        assert!(!q.nodes.iter().any(|n| n.name == "norm" && n.kind == OpKind::Constant));
    }

    #[test]
    fn quantgr_requires_calibration_for_runtime_tensors() {
        let (l1, _) = stagr_fixture();
        let table = CalibrationTable::new();
        let mut memo = QuantMemo::default();
        let e = quantgr_lower(&l1, &table, &mut memo).unwrap_err();
        assert!(e.to_string().contains("calibration for tensor 'h'"));
    }

    #[test]
    fn quantgr_preserves_payload_sharing_for_cacheg() {
        let (l1, l2) = stagr_fixture();
        let mut table = CalibrationTable::new();
        for name in ["h", "hw"] {
            table.record(name, 4.0);
        }
        let mut memo = QuantMemo::default();
        let (q1, _) = quantgr_lower(&l1, &table, &mut memo).unwrap();
        let (q2, _) = quantgr_lower(&l2, &table, &mut memo).unwrap();
        let find_arc = |g: &OpGraph, name: &str| {
            let n = g.nodes.iter().find(|n| n.name == name).unwrap();
            Arc::clone(&g.const_of(n).unwrap().data)
        };
        assert!(Arc::ptr_eq(&find_arc(&q1, "norm_q8"), &find_arc(&q2, "norm_q8")));
        let mut layers = [q1, q2];
        let report = cacheg_annotate(&mut layers);
        assert_eq!(report.matched, 1);
        let tagged = layers[1].nodes.iter().find(|n| n.name == "norm_q8").unwrap();
        assert_eq!(tagged.attr_int("cached"), Some(1));
    }
}
