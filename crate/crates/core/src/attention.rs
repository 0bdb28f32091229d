//! Toy multi-head attention for prefill and decode.
//!
//! Three execution modes share the projection and softmax code:
//!
//! * [`ExecutionMode::Hack`]: `Q K^T` and `P V` run on quantized operands
//!   through [`crate::homomm`]; K/V live in a [`KVCache`].
//! * [`ExecutionMode::Baseline`]: prefill in full precision; the decode side
//!   stores quantized K/V and dequantizes them before every step.
//! * [`ExecutionMode::Bypass`]: no quantization anywhere.
//!
//! Layers all read the same token embeddings (no MLP or residual stream is
//! modeled) and their head outputs are concatenated, `layer`-major.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::homomm::{
    blocked_matmul, Block, CostCounters, CounterSnapshot, RightOperand, SumsSource,
};
use crate::kvcache::{quantize_head_kv, CacheConfig, KVCache, SequenceKv, VTailPolicy};
use crate::matrix::Matrix;
use crate::quant::{
    mix64, quantize, PartitionAxis, PartitionLayout, QuantizedTensor, RoundingMode,
    QUANTIZE_OPS_PER_ELEMENT,
};
use crate::reference::BaselineCache;

pub const DEFAULT_VOCAB: u32 = 32_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecutionMode {
    Hack,
    Baseline,
    Bypass,
}

impl std::fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hack => "hack",
            Self::Baseline => "baseline",
            Self::Bypass => "bypass",
        })
    }
}

impl std::str::FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hack" => Ok(Self::Hack),
            "baseline" => Ok(Self::Baseline),
            "bypass" => Ok(Self::Bypass),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub cache: CacheConfig,
    pub embed_dim: usize,
    pub rounding: RoundingMode,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        self.cache.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.cache.heads_total() * self.cache.head_dim
    }
}

/// Projection matrices for every `(layer, head)`, each `embed_dim x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    w_q: Vec<Matrix>,
    w_k: Vec<Matrix>,
    w_v: Vec<Matrix>,
}

impl ModelWeights {
    /// Gaussian weights with variance `1 / embed_dim`.
    pub fn seeded(config: &AttentionConfig, seed: u64) -> Self {
        let c = &config.cache;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (config.embed_dim as f32).sqrt()).unwrap();
        let mut draw = || {
            let data = (0..config.embed_dim * c.head_dim)
                .map(|_| normal.sample(&mut rng))
                .collect();
            Matrix::from_vec(config.embed_dim, c.head_dim, data).unwrap()
        };
        let n = c.heads_total();
        let mut w_q = Vec::with_capacity(n);
        let mut w_k = Vec::with_capacity(n);
        let mut w_v = Vec::with_capacity(n);
        for _ in 0..n {
            w_q.push(draw());
            w_k.push(draw());
            w_v.push(draw());
        }
        Self {
            embed_dim: config.embed_dim,
            head_dim: c.head_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            w_q,
            w_k,
            w_v,
        }
    }

    /// Identity projections; needs `embed_dim == head_dim`.
    pub fn identity(config: &AttentionConfig) -> Result<Self> {
        let c = &config.cache;
        if config.embed_dim != c.head_dim {
            return Err(Error::Config(
                "identity weights need embed_dim == head_dim".into(),
            ));
        }
        let n = c.heads_total();
        let id = Matrix::identity(c.head_dim);
        Ok(Self {
            embed_dim: config.embed_dim,
            head_dim: c.head_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            w_q: vec![id.clone(); n],
            w_k: vec![id.clone(); n],
            w_v: vec![id; n],
        })
    }

    fn index(&self, layer: usize, head: usize) -> usize {
        layer * self.num_heads + head
    }

    pub fn w_q(&self, layer: usize, head: usize) -> &Matrix {
        &self.w_q[self.index(layer, head)]
    }

    pub fn w_k(&self, layer: usize, head: usize) -> &Matrix {
        &self.w_k[self.index(layer, head)]
    }

    pub fn w_v(&self, layer: usize, head: usize) -> &Matrix {
        &self.w_v[self.index(layer, head)]
    }

    fn check(&self, config: &AttentionConfig) -> Result<()> {
        let c = &config.cache;
        if self.embed_dim != config.embed_dim
            || self.head_dim != c.head_dim
            || self.num_layers != c.num_layers
            || self.num_heads != c.num_heads
        {
            return Err(shape_err("weights do not match the attention config"));
        }
        Ok(())
    }
}

/// Deterministic embedding of a token id.
pub fn token_embedding(seed: u64, token: u32, embed_dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(u64::from(token))));
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..embed_dim).map(|_| normal.sample(&mut rng)).collect()
}

/// `len` seeded Gaussian embedding rows.
pub fn random_embeddings(len: usize, embed_dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let data = (0..len * embed_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    Matrix::from_vec(len, embed_dim, data).expect("sized")
}

/// Stand-in for the layers after attention: hashes an output row into the
/// next token id.
pub fn sample_next_token(output_row: &[f32], seed: u64, vocab: u32) -> u32 {
    let h = output_row
        .iter()
        .fold(mix64(seed), |acc, v| mix64(acc ^ u64::from(v.to_bits())));
    (h % u64::from(vocab.max(1))) as u32
}

pub fn project_qkv(
    embeddings: &Matrix,
    weights: &ModelWeights,
    layer: usize,
    head: usize,
) -> Result<(Matrix, Matrix, Matrix)> {
    if embeddings.cols() != weights.embed_dim {
        return Err(shape_err(format!(
            "embeddings have {} columns, weights expect {}",
            embeddings.cols(),
            weights.embed_dim
        )));
    }
    if layer >= weights.num_layers || head >= weights.num_heads {
        return Err(shape_err(format!("no head ({layer}, {head})")));
    }
    Ok((
        embeddings.matmul(weights.w_q(layer, head))?,
        embeddings.matmul(weights.w_k(layer, head))?,
        embeddings.matmul(weights.w_v(layer, head))?,
    ))
}

/// Row-wise softmax over the first `valid_len[i]` entries of row `i`;
/// the rest of the row is zero.
pub fn softmax_rows(scores: &Matrix, valid_len: &[usize]) -> Result<Matrix> {
    if valid_len.len() != scores.rows() {
        return Err(shape_err("one valid length per row"));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for (i, &t) in valid_len.iter().enumerate() {
        if t == 0 || t > scores.cols() {
            return Err(shape_err(format!(
                "valid length {t} for a row of {}",
                scores.cols()
            )));
        }
        let row = &scores.row(i)[..t];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out_row = &mut out.row_mut(i)[..t];
        let mut total = 0.0f32;
        for (o, &x) in out_row.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        out_row.iter_mut().for_each(|o| *o /= total);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// One row per query token, `layers * heads * d_h` wide.
    pub rows: Matrix,
    pub counters: CounterSnapshot,
}

/// Full-precision prompt K/V per head (baseline and bypass handoff).
#[derive(Debug, Clone, PartialEq)]
pub struct FullKv {
    pub prompt_len: usize,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrefillKv {
    Quantized(SequenceKv),
    Full(FullKv),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    pub output: AttentionOutput,
    pub kv: PrefillKv,
    /// Work spent quantizing K/V for the cache and computing their sums.
    pub kv_quantization: CounterSnapshot,
    pub first_token: u32,
}

fn quantize_counted(
    m: &Matrix,
    layout: PartitionLayout,
    bits: crate::quant::BitWidth,
    mode: RoundingMode,
    counters: &CostCounters,
) -> Result<QuantizedTensor> {
    counters.add_quantization((m.rows() * m.cols()) as u64 * QUANTIZE_OPS_PER_ELEMENT);
    quantize(m, layout, bits, mode)
}

fn row_layout(partition_size: usize, len: usize) -> Result<PartitionLayout> {
    PartitionLayout::new(PartitionAxis::AlongRows, partition_size, len)
}

fn count_projection(counters: &CostCounters, tokens: usize, config: &AttentionConfig) {
    counters.add_full_precision(3 * 2 * (tokens * config.embed_dim * config.cache.head_dim) as u64);
}

/// Full-precision attention for one head (bypass and baseline prefill).
fn plain_head(q: &Matrix, k: &Matrix, v: &Matrix, counters: &CostCounters) -> Result<Matrix> {
    let (l, d) = (q.rows(), q.cols());
    let mut s = q.matmul_transposed(k)?;
    s.scale_in_place(1.0 / (d as f32).sqrt());
    let valid: Vec<usize> = (1..=l).collect();
    let p = softmax_rows(&s, &valid)?;
    counters.add_full_precision(2 * 2 * (l * l * d) as u64);
    p.matmul(v)
}

pub fn prefill_attention(
    embeddings: &Matrix,
    weights: &ModelWeights,
    config: &AttentionConfig,
    mode: ExecutionMode,
) -> Result<PrefillOutput> {
    config.validate()?;
    weights.check(config)?;
    let len = embeddings.rows();
    if len == 0 {
        return Err(Error::EmptyPrompt);
    }
    let c = &config.cache;
    let d = c.head_dim;
    let counters = CostCounters::new();
    let kv_counters = CostCounters::new();
    let mut out = Matrix::zeros(len, config.output_width());
    let mut quantized_heads = Vec::new();
    let (mut full_k, mut full_v) = (Vec::new(), Vec::new());
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let causal: Vec<usize> = (1..=len).collect();

    for layer in 0..c.num_layers {
        for head in 0..c.num_heads {
            let idx = layer * c.num_heads + head;
            let (q, k, v) = project_qkv(embeddings, weights, layer, head)?;
            count_projection(&counters, len, config);
            let head_out = match mode {
                ExecutionMode::Bypass | ExecutionMode::Baseline => {
                    let o = plain_head(&q, &k, &v, &counters)?;
                    full_k.push(k);
                    full_v.push(v);
                    o
                }
                ExecutionMode::Hack => {
                    let rounding = config.rounding.fork(idx as u64);
                    let head_kv = quantize_head_kv(c, &k, &v, rounding, &kv_counters)?;
                    let qq = quantize_counted(
                        &q,
                        row_layout(c.partition_size, d)?,
                        c.query_bits,
                        rounding.fork(3),
                        &counters,
                    )?;
                    let mut s = blocked_matmul(
                        &[Block {
                            left: &qq,
                            right: RightOperand::QuantizedTransposed {
                                tensor: &head_kv.k,
                                sums: SumsSource::Stored,
                            },
                        }],
                        &counters,
                    )?;
                    s.scale_in_place(inv_sqrt_d);
                    let p = softmax_rows(&s, &causal)?;
                    let committed = head_kv.v.rows();
                    let p_main = if committed > 0 {
                        Some(quantize_counted(
                            &p.slice_cols(0..committed),
                            row_layout(c.partition_size, committed)?,
                            c.prob_bits,
                            rounding.fork(4),
                            &counters,
                        )?)
                    } else {
                        None
                    };
                    let tail_rows = head_kv.v_tail.to_matrix();
                    let p_tail = if committed < len {
                        Some(quantize_counted(
                            &p.slice_cols(committed..len),
                            row_layout(c.partition_size, len - committed)?,
                            c.prob_bits,
                            rounding.fork(5),
                            &counters,
                        )?)
                    } else {
                        None
                    };
                    let mut blocks = Vec::with_capacity(2);
                    if let Some(pm) = &p_main {
                        blocks.push(Block {
                            left: pm,
                            right: RightOperand::Quantized {
                                tensor: &head_kv.v,
                                sums: SumsSource::Stored,
                            },
                        });
                    }
                    if let Some(pt) = &p_tail {
                        blocks.push(Block {
                            left: pt,
                            right: RightOperand::FullPrecision(&tail_rows),
                        });
                    }
                    let o = blocked_matmul(&blocks, &counters)?;
                    quantized_heads.push(head_kv);
                    o
                }
            };
            for r in 0..len {
                out.row_mut(r)[idx * d..(idx + 1) * d].copy_from_slice(head_out.row(r));
            }
        }
    }

    let kv = match mode {
        ExecutionMode::Hack => PrefillKv::Quantized(SequenceKv {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            head_dim: d,
            partition_size: c.partition_size,
            prompt_len: len,
            heads: quantized_heads,
        }),
        _ => PrefillKv::Full(FullKv {
            prompt_len: len,
            k: full_k,
            v: full_v,
        }),
    };
    let first_token = sample_next_token(out.row(len - 1), 0, DEFAULT_VOCAB);
    Ok(PrefillOutput {
        output: AttentionOutput {
            rows: out,
            counters: counters.snapshot(),
        },
        kv,
        kv_quantization: kv_counters.snapshot(),
        first_token,
    })
}

/// Full-precision K/V history per head, for bypass decoding.
#[derive(Debug, Default)]
pub struct ExactCache {
    seqs: std::collections::HashMap<u64, Vec<(Matrix, Matrix)>>,
}

impl ExactCache {
    pub fn ingest(&mut self, seq_id: u64, kv: FullKv) -> Result<()> {
        if self.seqs.contains_key(&seq_id) {
            return Err(Error::DuplicateSequence(seq_id));
        }
        self.seqs
            .insert(seq_id, kv.k.into_iter().zip(kv.v).collect());
        Ok(())
    }

    fn head_mut(&mut self, seq_id: u64, idx: usize) -> Result<&mut (Matrix, Matrix)> {
        self.seqs
            .get_mut(&seq_id)
            .ok_or(Error::UnknownSequence(seq_id))?
            .get_mut(idx)
            .ok_or_else(|| shape_err("head index out of range"))
    }

    pub fn remove(&mut self, seq_id: u64) {
        self.seqs.remove(&seq_id);
    }

    pub fn bytes(&self, seq_id: u64) -> Result<usize> {
        let heads = self
            .seqs
            .get(&seq_id)
            .ok_or(Error::UnknownSequence(seq_id))?;
        Ok(heads
            .iter()
            .map(|(k, v)| (k.rows() * k.cols() + v.rows() * v.cols()) * 4)
            .sum())
    }
}

/// Decode-side KV storage for one execution mode.
#[derive(Debug)]
pub enum KvStore {
    Hack(KVCache),
    Baseline(BaselineCache),
    Exact(ExactCache),
}

impl KvStore {
    pub fn new(mode: ExecutionMode, config: &CacheConfig) -> Result<Self> {
        Ok(match mode {
            ExecutionMode::Hack => Self::Hack(KVCache::new(*config)?),
            ExecutionMode::Baseline => Self::Baseline(BaselineCache::new(*config)?),
            ExecutionMode::Bypass => Self::Exact(ExactCache::default()),
        })
    }

    pub fn mode(&self) -> ExecutionMode {
        match self {
            Self::Hack(_) => ExecutionMode::Hack,
            Self::Baseline(_) => ExecutionMode::Baseline,
            Self::Exact(_) => ExecutionMode::Bypass,
        }
    }

    /// Takes over a prefill handoff. The baseline quantizes here, so its
    /// quantization work lands in `counters`.
    pub fn ingest(
        &mut self,
        seq_id: u64,
        kv: PrefillKv,
        rounding: RoundingMode,
        counters: &CostCounters,
    ) -> Result<()> {
        match (self, kv) {
            (Self::Hack(cache), PrefillKv::Quantized(kv)) => cache.ingest_prefill(seq_id, kv),
            (Self::Baseline(cache), PrefillKv::Full(kv)) => {
                cache.ingest(seq_id, &kv, rounding, counters)
            }
            (Self::Exact(cache), PrefillKv::Full(kv)) => cache.ingest(seq_id, kv),
            _ => Err(Error::Config(
                "prefill handoff does not match the decode mode".into(),
            )),
        }
    }

    pub fn remove(&mut self, seq_id: u64) {
        match self {
            Self::Hack(c) => {
                c.remove(seq_id);
            }
            Self::Baseline(c) => c.remove(seq_id),
            Self::Exact(c) => c.remove(seq_id),
        }
    }

    /// Bytes held for one sequence.
    pub fn sequence_bytes(&self, seq_id: u64) -> Result<usize> {
        match self {
            Self::Hack(c) => Ok(c.sequence_footprint(seq_id)?.total()),
            Self::Baseline(c) => c.sequence_bytes(seq_id),
            Self::Exact(c) => c.bytes(seq_id),
        }
    }
}

/// One decode step for `seq_id`: appends the token's K/V and returns its
/// attention output row (`layers * heads * d_h` wide).
pub fn decode_attention(
    token_embedding: &[f32],
    store: &mut KvStore,
    seq_id: u64,
    weights: &ModelWeights,
    config: &AttentionConfig,
    counters: &CostCounters,
) -> Result<Vec<f32>> {
    weights.check(config)?;
    let c = &config.cache;
    let d = c.head_dim;
    let e = Matrix::from_vec(1, token_embedding.len(), token_embedding.to_vec())?;
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; config.output_width()];

    for layer in 0..c.num_layers {
        for head in 0..c.num_heads {
            let idx = layer * c.num_heads + head;
            let (q, k, v) = project_qkv(&e, weights, layer, head)?;
            count_projection(counters, 1, config);
            let row = match store {
                KvStore::Hack(cache) => {
                    cache.append_decode_token(
                        seq_id,
                        layer,
                        head,
                        k.row(0),
                        v.row(0),
                        config.rounding,
                    )?;
                    let hs = cache.head(seq_id, layer, head)?;
                    let len = hs.len();
                    let rounding = config
                        .rounding
                        .fork(mix64(seq_id) ^ ((idx as u64) << 32) ^ len as u64);
                    let qq = quantize_counted(
                        &q,
                        row_layout(c.partition_size, d)?,
                        c.query_bits,
                        rounding.fork(3),
                        counters,
                    )?;
                    let mut s = blocked_matmul(
                        &[Block {
                            left: &qq,
                            right: RightOperand::QuantizedTransposed {
                                tensor: hs.k(),
                                sums: SumsSource::Stored,
                            },
                        }],
                        counters,
                    )?;
                    s.scale_in_place(inv_sqrt_d);
                    let p = softmax_rows(&s, &[len])?;

                    let mut p_parts = Vec::with_capacity(hs.v_chunks().len() + 1);
                    let mut start = 0;
                    for (ci, chunk) in hs.v_chunks().iter().enumerate() {
                        let end = start + chunk.rows();
                        p_parts.push(quantize_counted(
                            &p.slice_cols(start..end),
                            row_layout(c.partition_size, end - start)?,
                            c.prob_bits,
                            rounding.fork(16 + ci as u64),
                            counters,
                        )?);
                        start = end;
                    }
                    let buffer = hs.buffer().to_matrix();
                    if start < len {
                        p_parts.push(quantize_counted(
                            &p.slice_cols(start..len),
                            row_layout(c.partition_size, len - start)?,
                            c.prob_bits,
                            rounding.fork(4),
                            counters,
                        )?);
                    }
                    let mut blocks: Vec<Block> = hs
                        .v_chunks()
                        .iter()
                        .zip(&p_parts)
                        .map(|(chunk, pq)| Block {
                            left: pq,
                            right: RightOperand::Quantized {
                                tensor: chunk,
                                sums: SumsSource::Stored,
                            },
                        })
                        .collect();
                    if start < len {
                        blocks.push(Block {
                            left: p_parts.last().unwrap(),
                            right: RightOperand::FullPrecision(&buffer),
                        });
                    }
                    blocked_matmul(&blocks, counters)?.into_vec()
                }
                KvStore::Baseline(cache) => {
                    cache.append(seq_id, idx, k.row(0), v.row(0), config.rounding, counters)?;
                    cache.attend(seq_id, idx, q.row(0), counters)?
                }
                KvStore::Exact(cache) => {
                    let (ks, vs) = cache.head_mut(seq_id, idx)?;
                    ks.push_row(k.row(0))?;
                    vs.push_row(v.row(0))?;
                    let o = plain_decode(q.row(0), ks, vs)?;
                    counters.add_full_precision(2 * 2 * (ks.rows() * d) as u64);
                    o
                }
            };
            out[idx * d..(idx + 1) * d].copy_from_slice(&row);
        }
    }
    Ok(out)
}

/// Single-query attention over full-precision K/V.
pub(crate) fn plain_decode(q: &[f32], k: &Matrix, v: &Matrix) -> Result<Vec<f32>> {
    let d = q.len();
    let qm = Matrix::from_vec(1, d, q.to_vec())?;
    let mut s = qm.matmul_transposed(k)?;
    s.scale_in_place(1.0 / (d as f32).sqrt());
    let p = softmax_rows(&s, &[k.rows()])?;
    Ok(p.matmul(v)?.into_vec())
}

/// Convenience: whether a config keeps the prompt's ragged V rows in the
/// decode buffer.
pub fn tail_in_buffer(config: &AttentionConfig) -> bool {
    config.cache.v_tail == VTailPolicy::FullPrecision
}
