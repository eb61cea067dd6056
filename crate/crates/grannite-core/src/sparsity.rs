//! Zero-value compression and zero-skip arithmetic.
//!
//! Sparse tensors ship as a validity bitmap plus the packed nonzeros, in
//! row-major (flat index) order. Compression is lossless for every f32
//! payload: decompress(compress(t)) == t element for element. The matching
//! MAC-level optimization skips multiply-accumulates whose left operand is
//! zero; dropping exactly-zero terms from a sum leaves every partial result
//! unchanged, so the skip path is bit-identical to the same-order dense loop.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ZVC_MAGIC: [u8; 4] = *b"ZVC1";

/// Compressed tensor: packed nonzeros plus a one-bit-per-element validity
/// bitmap, little-endian within each 32-bit word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZvcTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub bitmap: Vec<u32>,
}

impl ZvcTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn popcount(&self) -> usize {
        self.bitmap.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Stored payload size under the transfer model: packed values plus the
    /// bitmap, excluding the (constant-size) header.
    pub fn modeled_bytes(&self) -> usize {
        modeled_bytes(self.nnz(), self.numel(), 4)
    }
}

/// Payload bytes for a compressed tensor with `nnz` nonzeros out of `numel`
/// elements of `elem_bytes` each: packed values + one bitmap bit per element.
pub fn modeled_bytes(nnz: usize, numel: usize, elem_bytes: usize) -> usize {
    nnz * elem_bytes + numel.div_ceil(8)
}

pub fn zvc_compress(t: &ArrayD<f32>) -> ZvcTensor {
    let numel = t.len();
    let mut values = Vec::new();
    let mut bitmap = vec![0u32; numel.div_ceil(32)];
    // Row-major flat order; ArrayD iterates in logical order.
    for (k, &v) in t.iter().enumerate() {
        if v != 0.0 {
            values.push(v);
            bitmap[k / 32] |= 1 << (k % 32);
        }
    }
    ZvcTensor {
        shape: t.shape().to_vec(),
        values,
        bitmap,
    }
}

pub fn zvc_decompress(z: &ZvcTensor) -> Result<ArrayD<f32>> {
    let numel = z.numel();
    if z.bitmap.len() != numel.div_ceil(32) {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "bitmap has {} words, shape {:?} needs {}",
                z.bitmap.len(),
                z.shape,
                numel.div_ceil(32)
            ),
        });
    }
    if z.popcount() != z.nnz() {
        return Err(Error::Parse {
            line: 0,
            message: format!("bitmap popcount {} != stored values {}", z.popcount(), z.nnz()),
        });
    }
    // Bits beyond numel must be clear, or the popcount check above was lying
    // about in-range elements.
    for k in numel..z.bitmap.len() * 32 {
        if z.bitmap[k / 32] >> (k % 32) & 1 == 1 {
            return Err(Error::Parse {
                line: 0,
                message: format!("bitmap bit {k} set beyond element count {numel}"),
            });
        }
    }
    let mut flat = vec![0f32; numel];
    let mut next = 0usize;
    for (k, slot) in flat.iter_mut().enumerate() {
        if z.bitmap[k / 32] >> (k % 32) & 1 == 1 {
            *slot = z.values[next];
            next += 1;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&z.shape), flat).map_err(|e| Error::Shape(e.to_string()))
}

// ── Byte stream ────────────────────────────────────────────────────────────
//
// magic "ZVC1" | rank u32 | dims rank x u64 | nnz u64 | bitmap words u32...
// | values f32...   (all little-endian)

pub fn zvc_serialize(z: &ZvcTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * z.shape.len() + 4 * z.bitmap.len() + 4 * z.nnz());
    out.extend_from_slice(&ZVC_MAGIC);
    out.extend_from_slice(&(z.shape.len() as u32).to_le_bytes());
    for &d in &z.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(z.nnz() as u64).to_le_bytes());
    for &w in &z.bitmap {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for &v in &z.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "truncated stream: wanted {n} bytes at offset {}, have {}",
                    self.at,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

pub fn zvc_deserialize(bytes: &[u8]) -> Result<ZvcTensor> {
    let err = |message: String| Error::Parse { line: 0, message };
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != ZVC_MAGIC {
        return Err(err(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
    }
    let nnz = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let numel: usize = shape.iter().product();
    if nnz > numel {
        return Err(err(format!("nnz {nnz} exceeds element count {numel}")));
    }
    let words = numel.div_ceil(32);
    let mut bitmap = Vec::with_capacity(words);
    for _ in 0..words {
        bitmap.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
    }
    let mut values = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        values.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
    }
    if cur.at != bytes.len() {
        return Err(err(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.at
        )));
    }
    let z = ZvcTensor { shape, values, bitmap };
    if z.popcount() != z.nnz() {
        return Err(err(format!(
            "bitmap popcount {} != nnz {}",
            z.popcount(),
            z.nnz()
        )));
    }
    Ok(z)
}

// ── Zero-skip MACs ─────────────────────────────────────────────────────────

/// Multiply-accumulate census for one matmul.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacStats {
    pub total: u64,
    pub skipped: u64,
    pub executed: u64,
}

impl MacStats {
    pub fn merge(&mut self, other: MacStats) {
        self.total += other.total;
        self.skipped += other.skipped;
        self.executed += other.executed;
    }

    pub fn skip_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total as f64
        }
    }
}

/// `a @ b` skipping every MAC whose `a` element is zero. Ascending-k
/// accumulation, so the result is bit-identical to the dense loop in the same
/// order (dropped terms are exact zeros).
pub fn matmul_zero_skip(a: &Array2<f32>, b: &Array2<f32>) -> Result<(Array2<f32>, MacStats)> {
    let (n, k) = a.dim();
    let (kb, m) = b.dim();
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Array2::<f32>::zeros((n, m));
    let mut skipped = 0u64;
    for i in 0..n {
        for kk in 0..k {
            let av = a[[i, kk]];
            if av == 0.0 {
                skipped += m as u64;
                continue;
            }
            for j in 0..m {
                out[[i, j]] += av * b[[kk, j]];
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
