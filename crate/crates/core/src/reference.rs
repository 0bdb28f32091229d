//! Independent oracles and the dequantize-first baseline.
//!
//! Everything here uses its own `f64` loops rather than [`Matrix::matmul`]
//! or the homomorphic kernel, so agreement with them means something.

use std::collections::HashMap;

use crate::attention::{AttentionConfig, FullKv, ModelWeights};
use crate::error::{shape_err, Error, Result};
use crate::homomm::CostCounters;
use crate::kvcache::CacheConfig;
use crate::matrix::Matrix;
use crate::quant::{
    dequantize, quantize, PartitionAxis, PartitionLayout, QuantizedTensor, RoundingMode,
    QUANTIZE_OPS_PER_ELEMENT,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub max_abs_error: f64,
    /// Largest absolute error divided by the largest magnitude in the
    /// reference operand.
    pub max_rel_error: f64,
    pub cosine: f64,
    pub rms_error: f64,
}

/// Compares `actual` against `expected` elementwise.
pub fn compare(actual: &Matrix, expected: &Matrix) -> Result<OracleReport> {
    if actual.rows() != expected.rows() || actual.cols() != expected.cols() {
        return Err(shape_err(format!(
            "comparing {}x{} with {}x{}",
            actual.rows(),
            actual.cols(),
            expected.rows(),
            expected.cols()
        )));
    }
    let (mut max_abs, mut ref_max, mut sq) = (0.0f64, 0.0f64, 0.0f64);
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in actual.as_slice().iter().zip(expected.as_slice()) {
        let (a, b) = (f64::from(a), f64::from(b));
        let e = (a - b).abs();
        max_abs = max_abs.max(e);
        ref_max = ref_max.max(b.abs());
        sq += e * e;
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    let n = actual.as_slice().len().max(1) as f64;
    let cosine = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    };
    let max_rel = if ref_max > 0.0 {
        max_abs / ref_max
    } else if max_abs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(OracleReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        cosine,
        rms_error: (sq / n).sqrt(),
    })
}

fn to_f64(m: &Matrix) -> Vec<f64> {
    m.as_slice().iter().map(|&x| f64::from(x)).collect()
}

/// Triple-loop product accumulated in `f64`.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape_err(format!(
            "{}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, z, n) = (a.rows(), a.cols(), b.cols());
    let (av, bv) = (to_f64(a), to_f64(b));
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for k in 0..z {
                acc += av[i * z + k] * bv[k * n + j];
            }
            out[i * n + j] = acc as f32;
        }
    }
    Matrix::from_vec(m, n, out)
}

/// Dequantizes every element, charging two operations each.
pub fn dequantize_counted(qt: &QuantizedTensor, counters: &CostCounters) -> Matrix {
    counters.add_dequantization(2 * (qt.rows() * qt.cols()) as u64);
    dequantize(qt)
}

pub fn dequantize_then_multiply(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    counters: &CostCounters,
) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape_err("inner dimensions differ"));
    }
    let (da, db) = (
        dequantize_counted(a, counters),
        dequantize_counted(b, counters),
    );
    naive_matmul(&da, &db)
}

/// Causal softmax attention of one query row over `keys[..len]`, in `f64`.
fn attend_row(q: &[f64], keys: &[f64], values: &[f64], len: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..len)
        .map(|j| {
            q.iter()
                .zip(&keys[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0f64; d];
    for (j, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += w / total * v;
        }
    }
    out
}

fn project(e: &[f64], len: usize, embed: usize, w: &Matrix) -> Vec<f64> {
    let d = w.cols();
    let wv = to_f64(w);
    let mut out = vec![0.0f64; len * d];
    for i in 0..len {
        for j in 0..d {
            out[i * d + j] = (0..embed).map(|z| e[i * embed + z] * wv[z * d + j]).sum();
        }
    }
    out
}

/// Causal multi-head attention over the whole prompt in `f64`.
pub fn exact_attention(
    embeddings: &Matrix,
    weights: &ModelWeights,
    config: &AttentionConfig,
) -> Result<Matrix> {
    let c = &config.cache;
    if embeddings.cols() != weights.embed_dim || weights.head_dim != c.head_dim {
        return Err(shape_err("embeddings or weights do not match the config"));
    }
    if weights.num_layers != c.num_layers || weights.num_heads != c.num_heads {
        return Err(shape_err("weights do not match the config"));
    }
    let (len, embed, d) = (embeddings.rows(), embeddings.cols(), c.head_dim);
    let e = to_f64(embeddings);
    let width = c.heads_total() * d;
    let mut out = vec![0.0f32; len * width];
    for layer in 0..c.num_layers {
        for head in 0..c.num_heads {
            let idx = layer * c.num_heads + head;
            let q = project(&e, len, embed, weights.w_q(layer, head));
            let k = project(&e, len, embed, weights.w_k(layer, head));
            let v = project(&e, len, embed, weights.w_v(layer, head));
            for i in 0..len {
                let row = attend_row(&q[i * d..(i + 1) * d], &k, &v, i + 1, d);
                for (j, x) in row.into_iter().enumerate() {
                    out[i * width + idx * d + j] = x as f32;
                }
            }
        }
    }
    Matrix::from_vec(len, width, out)
}

/// Decode-side store of the dequantize-first baseline: K and V quantized
/// token by token along `d_h`, fully dequantized before every step.
#[derive(Debug)]
pub struct BaselineCache {
    config: CacheConfig,
    seqs: HashMap<u64, Vec<(QuantizedTensor, QuantizedTensor)>>,
}

impl BaselineCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            seqs: HashMap::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn layout(&self) -> Result<PartitionLayout> {
        PartitionLayout::new(
            PartitionAxis::AlongRows,
            self.config.partition_size,
            self.config.head_dim,
        )
    }

    fn quantize_rows(
        &self,
        k: &Matrix,
        v: &Matrix,
        mode: RoundingMode,
        counters: &CostCounters,
    ) -> Result<(QuantizedTensor, QuantizedTensor)> {
        let layout = self.layout()?;
        counters.add_quantization(
            ((k.rows() + v.rows()) * self.config.head_dim) as u64 * QUANTIZE_OPS_PER_ELEMENT,
        );
        Ok((
            quantize(k, layout, self.config.key_bits, mode.fork(1))?,
            quantize(v, layout, self.config.value_bits, mode.fork(2))?,
        ))
    }

    pub fn ingest(
        &mut self,
        seq_id: u64,
        kv: &FullKv,
        mode: RoundingMode,
        counters: &CostCounters,
    ) -> Result<()> {
        if self.seqs.contains_key(&seq_id) {
            return Err(Error::DuplicateSequence(seq_id));
        }
        if kv.k.len() != self.config.heads_total() || kv.v.len() != kv.k.len() {
            return Err(shape_err("handoff head count does not match the config"));
        }
        let mut heads = Vec::with_capacity(kv.k.len());
        for (i, (k, v)) in kv.k.iter().zip(&kv.v).enumerate() {
            if k.cols() != self.config.head_dim || v.cols() != self.config.head_dim {
                return Err(shape_err("handoff rows do not match the head dimension"));
            }
            heads.push(self.quantize_rows(k, v, mode.fork(i as u64), counters)?);
        }
        self.seqs.insert(seq_id, heads);
        Ok(())
    }

    pub fn append(
        &mut self,
        seq_id: u64,
        head: usize,
        k_row: &[f32],
        v_row: &[f32],
        mode: RoundingMode,
        counters: &CostCounters,
    ) -> Result<()> {
        let d = self.config.head_dim;
        let position = self.head(seq_id, head)?.0.rows() as u64;
        let k = Matrix::from_vec(1, d, k_row.to_vec())?;
        let v = Matrix::from_vec(1, d, v_row.to_vec())?;
        let salt = seq_id.wrapping_mul(0x9e37_79b9) ^ ((head as u64) << 40) ^ position;
        let (qk, qv) = self.quantize_rows(&k, &v, mode.fork(salt), counters)?;
        let store = self
            .seqs
            .get_mut(&seq_id)
            .and_then(|h| h.get_mut(head))
            .ok_or(Error::UnknownSequence(seq_id))?;
        store.0.append_rows(&qk)?;
        store.1.append_rows(&qv)
    }

    pub fn head(&self, seq_id: u64, head: usize) -> Result<&(QuantizedTensor, QuantizedTensor)> {
        self.seqs
            .get(&seq_id)
            .ok_or(Error::UnknownSequence(seq_id))?
            .get(head)
            .ok_or_else(|| shape_err("head index out of range"))
    }

    /// One decode step: dequantizes the head's full K and V (`4 * d_h *
    /// L_KV` operations) and attends the query over them.
    pub fn attend(
        &self,
        seq_id: u64,
        head: usize,
        q: &[f32],
        counters: &CostCounters,
    ) -> Result<Vec<f32>> {
        let (k, v) = self.head(seq_id, head)?;
        baseline_decode_step(q, k, v, counters)
    }

    pub fn remove(&mut self, seq_id: u64) {
        self.seqs.remove(&seq_id);
    }

    pub fn sequence_bytes(&self, seq_id: u64) -> Result<usize> {
        let heads = self
            .seqs
            .get(&seq_id)
            .ok_or(Error::UnknownSequence(seq_id))?;
        Ok(heads
            .iter()
            .flat_map(|(k, v)| [k, v])
            .map(|t| t.packed_bytes() + 4 * t.mins().len())
            .sum())
    }
}

/// Single-query attention over quantized K/V by dequantizing them first.
pub fn baseline_decode_step(
    q: &[f32],
    k: &QuantizedTensor,
    v: &QuantizedTensor,
    counters: &CostCounters,
) -> Result<Vec<f32>> {
    let d = q.len();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() || k.rows() == 0 {
        return Err(shape_err("baseline K/V do not match the query"));
    }
    let len = k.rows();
    let keys = to_f64(&dequantize_counted(k, counters));
    let values = to_f64(&dequantize_counted(v, counters));
    counters.add_full_precision(4 * (len * d) as u64);
    let q: Vec<f64> = q.iter().map(|&x| f64::from(x)).collect();
    Ok(attend_row(&q, &keys, &values, len, d)
        .into_iter()
        .map(|x| x as f32)
        .collect())
}
