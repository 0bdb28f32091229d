//! Quantized KV store with cached partition sums and a full-precision
//! trailing-V buffer.
//!
//! Per `(layer, head)` a sequence keeps:
//!
//! * K as one row-partitioned tensor (`L x d_h`): each token's row is split
//!   along `d_h`, so a new token only adds partitions of its own.
//! * V as a list of column-partitioned chunks whose partitions run along the
//!   sequence axis. Chunks are never modified after they are committed.
//! * A buffer of fewer than `Π` trailing V rows held in 16-bit floats. When
//!   it fills up it is quantized into one new chunk and emptied.
//!
//! Code sums for every committed partition are computed once, at commit
//! time, and reused by every later attention step.

use std::collections::HashMap;

use half::f16;

use crate::error::{shape_err, Error, Result};
use crate::homomm::{column_sums, CostCounters, PartitionSums, SumWidth};
use crate::matrix::Matrix;
use crate::quant::{
    dequantize, quantize, BitWidth, PartitionAxis, PartitionLayout, QuantizedTensor, RoundingMode,
    QUANTIZE_OPS_PER_ELEMENT,
};

/// How the prefill stage hands over the last `prompt_len mod Π` V rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VTailPolicy {
    /// Quantize them as a short ragged partition; decode-time tokens start
    /// a fresh partition after it.
    #[default]
    Quantized,
    /// Ship them in 16-bit floats; they seed the decode-side buffer.
    FullPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub partition_size: usize,
    pub key_bits: BitWidth,
    pub value_bits: BitWidth,
    pub query_bits: BitWidth,
    pub prob_bits: BitWidth,
    pub v_tail: VTailPolicy,
    /// Enforce `Π mod 16 == 0`.
    pub require_aligned_partitions: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            num_heads: 1,
            head_dim: 128,
            partition_size: 64,
            key_bits: BitWidth::Two,
            value_bits: BitWidth::Two,
            query_bits: BitWidth::Eight,
            prob_bits: BitWidth::Eight,
            v_tail: VTailPolicy::default(),
            require_aligned_partitions: true,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "layers, heads and head dimension must be positive".into(),
            ));
        }
        if self.num_layers > u16::MAX as usize
            || self.num_heads > u16::MAX as usize
            || self.head_dim > u16::MAX as usize
            || self.partition_size > u16::MAX as usize
        {
            return Err(Error::Config("dimensions must fit in 16 bits".into()));
        }
        let layout =
            PartitionLayout::new(PartitionAxis::AlongRows, self.partition_size, self.head_dim)
                .map_err(|e| Error::Config(e.to_string()))?;
        if self.require_aligned_partitions {
            layout
                .validate_alignment()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn key_sum_width(&self) -> SumWidth {
        SumWidth::for_partition(self.key_bits, self.partition_size)
    }

    pub fn value_sum_width(&self) -> SumWidth {
        SumWidth::for_partition(self.value_bits, self.partition_size)
    }

    pub fn heads_total(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub(crate) fn key_layout(&self) -> Result<PartitionLayout> {
        PartitionLayout::new(PartitionAxis::AlongRows, self.partition_size, self.head_dim)
    }
}

/// Up to `Π - 1` V rows kept in 16-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct LastVBlockBuffer {
    head_dim: usize,
    values: Vec<f16>,
}

impl LastVBlockBuffer {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            values: Vec::new(),
        }
    }

    pub fn from_values(head_dim: usize, values: Vec<f16>) -> Result<Self> {
        if head_dim == 0 || !values.len().is_multiple_of(head_dim) {
            return Err(shape_err("buffer values are not whole rows"));
        }
        Ok(Self { head_dim, values })
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.values.iter().map(|v| v.to_f32()).collect();
        Matrix::from_vec(self.count(), self.head_dim, data).expect("whole rows")
    }

    pub fn bytes(&self) -> usize {
        self.values.len() * 2
    }

    fn push(&mut self, row: &[f32]) {
        self.values.extend(row.iter().map(|&v| f16::from_f32(v)));
    }
}

/// Prefill-produced KV of one head: `k` is `L x d_h` row-partitioned, `v`
/// covers the first `L - t` rows column-partitioned, `v_tail` holds the last
/// `t` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadKv {
    pub k: QuantizedTensor,
    pub v: QuantizedTensor,
    pub v_tail: LastVBlockBuffer,
}

/// Everything the decode side needs to continue one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceKv {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub partition_size: usize,
    pub prompt_len: usize,
    /// Indexed by `layer * num_heads + head`.
    pub heads: Vec<HeadKv>,
}

impl SequenceKv {
    pub fn head(&self, layer: usize, head: usize) -> &HeadKv {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn v_tail_len(&self) -> usize {
        self.heads.first().map_or(0, |h| h.v_tail.count())
    }

    /// Checks shapes, widths, sums and the tail rule against `config`.
    pub fn validate(&self, config: &CacheConfig) -> Result<()> {
        if self.num_layers != config.num_layers
            || self.num_heads != config.num_heads
            || self.head_dim != config.head_dim
            || self.partition_size != config.partition_size
        {
            return Err(shape_err("sequence dimensions differ from cache config"));
        }
        if self.prompt_len == 0 {
            return Err(Error::EmptyPrompt);
        }
        if self.heads.len() != config.heads_total() {
            return Err(shape_err("wrong number of heads"));
        }
        let tail = self.v_tail_len();
        let p = config.partition_size;
        for h in &self.heads {
            let (k, v) = (&h.k, &h.v);
            if k.rows() != self.prompt_len
                || k.cols() != self.head_dim
                || *k.layout() != config.key_layout()?
                || k.bits() != config.key_bits
            {
                return Err(shape_err("K does not match the prompt"));
            }
            if v.cols() != self.head_dim
                || v.layout().axis() != PartitionAxis::AlongCols
                || v.layout().partition_size() != p
                || v.bits() != config.value_bits
            {
                return Err(shape_err("V does not match the cache layout"));
            }
            if h.v_tail.count() != tail || v.rows() + tail != self.prompt_len {
                return Err(shape_err("V rows plus tail do not cover the prompt"));
            }
            if tail > 0 && (v.rows() % p != 0 || tail >= p) {
                return Err(shape_err(
                    "a full-precision V tail must follow whole partitions and be shorter than one",
                ));
            }
            check_sums(k, config.key_sum_width())?;
            check_sums(v, config.value_sum_width())?;
        }
        Ok(())
    }
}

fn check_sums(qt: &QuantizedTensor, width: SumWidth) -> Result<()> {
    let sums = qt.sums().ok_or(Error::MissingSums)?;
    if sums.width() != width {
        return Err(shape_err("sum width does not follow the alignment rule"));
    }
    if sums.values() != PartitionSums::of(qt).values() {
        return Err(shape_err("stored sums disagree with codes"));
    }
    Ok(())
}

/// Cached KV of one `(layer, head)`.
#[derive(Debug, Clone)]
pub struct HeadStore {
    k: QuantizedTensor,
    v_chunks: Vec<QuantizedTensor>,
    buffer: LastVBlockBuffer,
}

impl HeadStore {
    pub fn k(&self) -> &QuantizedTensor {
        &self.k
    }

    pub fn v_chunks(&self) -> &[QuantizedTensor] {
        &self.v_chunks
    }

    pub fn buffer(&self) -> &LastVBlockBuffer {
        &self.buffer
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }

    pub fn committed_v_rows(&self) -> usize {
        self.v_chunks.iter().map(QuantizedTensor::rows).sum()
    }

    /// Dequantized committed V followed by the buffer rows.
    pub fn reconstruct_v(&self) -> Matrix {
        let mut out = Matrix::zeros(0, self.k.cols());
        for chunk in &self.v_chunks {
            let dq = dequantize(chunk);
            for r in 0..dq.rows() {
                out.push_row(dq.row(r)).expect("same width");
            }
        }
        let buf = self.buffer.to_matrix();
        for r in 0..buf.rows() {
            out.push_row(buf.row(r)).expect("same width");
        }
        out
    }

    fn footprint(&self) -> MemoryFootprint {
        let tensors = std::iter::once(&self.k).chain(&self.v_chunks);
        let mut f = MemoryFootprint::default();
        for t in tensors {
            f.codes_bytes += t.packed_bytes();
            f.metadata_bytes += t.num_partitions() * 4;
            f.sums_bytes += t.sums().map_or(0, PartitionSums::storage_bytes);
        }
        f.buffer_bytes = self.buffer.bytes();
        f
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEntry {
    prompt_len: usize,
    heads: Vec<HeadStore>,
}

impl SequenceEntry {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, HeadStore::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub codes_bytes: usize,
    pub metadata_bytes: usize,
    pub sums_bytes: usize,
    pub buffer_bytes: usize,
}

impl MemoryFootprint {
    pub fn total(&self) -> usize {
        self.codes_bytes + self.metadata_bytes + self.sums_bytes + self.buffer_bytes
    }
}

impl std::ops::AddAssign for MemoryFootprint {
    fn add_assign(&mut self, o: Self) {
        self.codes_bytes += o.codes_bytes;
        self.metadata_bytes += o.metadata_bytes;
        self.sums_bytes += o.sums_bytes;
        self.buffer_bytes += o.buffer_bytes;
    }
}

/// Whether an append committed a new V chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendOutcome {
    pub flushed: bool,
}

#[derive(Debug)]
pub struct KVCache {
    config: CacheConfig,
    entries: HashMap<u64, SequenceEntry>,
    counters: CostCounters,
}

impl KVCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            entries: HashMap::new(),
            counters: CostCounters::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Bookkeeping work done by the cache itself (quantizing appended rows
    /// and computing their sums).
    pub fn counters(&self) -> &CostCounters {
        &self.counters
    }

    pub fn num_sequences(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, seq_id: u64) -> bool {
        self.entries.contains_key(&seq_id)
    }

    pub fn entry(&self, seq_id: u64) -> Result<&SequenceEntry> {
        self.entries
            .get(&seq_id)
            .ok_or(Error::UnknownSequence(seq_id))
    }

    pub fn head(&self, seq_id: u64, layer: usize, head: usize) -> Result<&HeadStore> {
        let entry = self.entry(seq_id)?;
        if layer >= self.config.num_layers || head >= self.config.num_heads {
            return Err(shape_err(format!("no head ({layer}, {head})")));
        }
        Ok(&entry.heads[layer * self.config.num_heads + head])
    }

    pub fn remove(&mut self, seq_id: u64) -> Option<SequenceEntry> {
        self.entries.remove(&seq_id)
    }

    pub fn ingest_prefill(&mut self, seq_id: u64, kv: SequenceKv) -> Result<()> {
        if self.entries.contains_key(&seq_id) {
            return Err(Error::DuplicateSequence(seq_id));
        }
        kv.validate(&self.config)?;
        let heads = kv
            .heads
            .into_iter()
            .map(|h| HeadStore {
                k: h.k,
                v_chunks: if h.v.rows() > 0 {
                    vec![h.v]
                } else {
                    Vec::new()
                },
                buffer: h.v_tail,
            })
            .collect();
        self.entries.insert(
            seq_id,
            SequenceEntry {
                prompt_len: kv.prompt_len,
                heads,
            },
        );
        Ok(())
    }

    pub fn append_decode_token(
        &mut self,
        seq_id: u64,
        layer: usize,
        head: usize,
        k_row: &[f32],
        v_row: &[f32],
        mode: RoundingMode,
    ) -> Result<AppendOutcome> {
        let config = self.config;
        if k_row.len() != config.head_dim || v_row.len() != config.head_dim {
            return Err(shape_err("appended rows must have head_dim values"));
        }
        if layer >= config.num_layers || head >= config.num_heads {
            return Err(shape_err(format!("no head ({layer}, {head})")));
        }
        let entry = self
            .entries
            .get_mut(&seq_id)
            .ok_or(Error::UnknownSequence(seq_id))?;
        let store = &mut entry.heads[layer * config.num_heads + head];
        let position = store.len() as u64;
        let salt = seq_id
            .wrapping_mul(0x9e37_79b9)
            .wrapping_add(((layer * config.num_heads + head) as u64) << 40)
            .wrapping_add(position);
        let mode = mode.fork(salt);
        let d = config.head_dim as u64;

        let k_mat = Matrix::from_vec(1, config.head_dim, k_row.to_vec())?;
        let mut k = quantize(&k_mat, config.key_layout()?, config.key_bits, mode.fork(1))?;
        self.counters.add_quantization(d * QUANTIZE_OPS_PER_ELEMENT);
        let sums = column_sums(&k, &self.counters);
        k.set_sums(PartitionSums::new(
            sums.values().to_vec(),
            config.key_sum_width(),
        ))?;
        store.k.append_rows(&k)?;

        store.buffer.push(v_row);
        let flushed = store.buffer.count() == config.partition_size;
        if flushed {
            let block = store.buffer.to_matrix();
            let layout = PartitionLayout::new(
                PartitionAxis::AlongCols,
                config.partition_size,
                config.partition_size,
            )?;
            let mut v = quantize(&block, layout, config.value_bits, mode.fork(2))?;
            self.counters
                .add_quantization(d * config.partition_size as u64 * QUANTIZE_OPS_PER_ELEMENT);
            let sums = column_sums(&v, &self.counters);
            v.set_sums(PartitionSums::new(
                sums.values().to_vec(),
                config.value_sum_width(),
            ))?;
            store.v_chunks.push(v);
            store.buffer = LastVBlockBuffer::new(config.head_dim);
        }
        Ok(AppendOutcome { flushed })
    }

    pub fn memory_footprint(&self) -> MemoryFootprint {
        let mut total = MemoryFootprint::default();
        for entry in self.entries.values() {
            for h in &entry.heads {
                total += h.footprint();
            }
        }
        total
    }

    pub fn sequence_footprint(&self, seq_id: u64) -> Result<MemoryFootprint> {
        let mut total = MemoryFootprint::default();
        for h in &self.entry(seq_id)?.heads {
            total += h.footprint();
        }
        Ok(total)
    }

    /// Repackages a sequence for transfer. Fails once decode has committed
    /// chunks behind a ragged prompt partition, since the frame layout has
    /// no room for interior partition boundaries.
    pub fn export(&self, seq_id: u64) -> Result<SequenceKv> {
        let entry = self.entry(seq_id)?;
        let mut heads = Vec::with_capacity(entry.heads.len());
        for h in &entry.heads {
            let mut v = match h.v_chunks.first() {
                Some(first) => first.clone(),
                None => empty_v(&self.config)?,
            };
            for chunk in h.v_chunks.iter().skip(1) {
                v.append_rows(chunk)?;
            }
            heads.push(HeadKv {
                k: h.k.clone(),
                v,
                v_tail: h.buffer.clone(),
            });
        }
        Ok(SequenceKv {
            num_layers: self.config.num_layers,
            num_heads: self.config.num_heads,
            head_dim: self.config.head_dim,
            partition_size: self.config.partition_size,
            prompt_len: entry.len(),
            heads,
        })
    }
}

/// A zero-row V tensor carrying an empty sum vector.
pub(crate) fn empty_v(config: &CacheConfig) -> Result<QuantizedTensor> {
    let layout = PartitionLayout::new(PartitionAxis::AlongCols, config.partition_size, 0)?;
    let mut v = quantize(
        &Matrix::zeros(0, config.head_dim),
        layout,
        config.value_bits,
        RoundingMode::Nearest,
    )?;
    v.set_sums(PartitionSums::new(Vec::new(), config.value_sum_width()))?;
    Ok(v)
}

/// Quantizes one head's prompt K and V (`L x d_h` each) for the cache.
/// Returns the bundle plus the quantization work performed.
pub fn quantize_head_kv(
    config: &CacheConfig,
    k: &Matrix,
    v: &Matrix,
    mode: RoundingMode,
    counters: &CostCounters,
) -> Result<HeadKv> {
    let len = k.rows();
    if v.rows() != len || k.cols() != config.head_dim || v.cols() != config.head_dim {
        return Err(shape_err("prompt K/V do not match the head dimension"));
    }
    let p = config.partition_size;
    let d = config.head_dim as u64;
    let mut qk = quantize(k, config.key_layout()?, config.key_bits, mode.fork(1))?;
    counters.add_quantization(len as u64 * d * QUANTIZE_OPS_PER_ELEMENT);
    let sums = column_sums(&qk, counters);
    qk.set_sums(PartitionSums::new(
        sums.values().to_vec(),
        config.key_sum_width(),
    ))?;

    let committed = match config.v_tail {
        VTailPolicy::Quantized => len,
        VTailPolicy::FullPrecision => len - len % p,
    };
    let layout = PartitionLayout::new(PartitionAxis::AlongCols, p, committed)?;
    let mut qv = quantize(
        &v.slice_rows(0..committed),
        layout,
        config.value_bits,
        mode.fork(2),
    )?;
    counters.add_quantization(committed as u64 * d * QUANTIZE_OPS_PER_ELEMENT);
    let sums = column_sums(&qv, counters);
    qv.set_sums(PartitionSums::new(
        sums.values().to_vec(),
        config.value_sum_width(),
    ))?;

    let mut tail = LastVBlockBuffer::new(config.head_dim);
    for r in committed..len {
        tail.push(v.row(r));
    }
    Ok(HeadKv {
        k: qk,
        v: qv,
        v_tail: tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(p: usize, d: usize, policy: VTailPolicy) -> CacheConfig {
        CacheConfig {
            num_layers: 1,
            num_heads: 2,
            head_dim: d,
            partition_size: p,
            v_tail: policy,
            require_aligned_partitions: false,
            ..CacheConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn prompt_kv(config: &CacheConfig, len: usize, seed: u64) -> SequenceKv {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CostCounters::new();
        let heads = (0..config.heads_total())
            .map(|_| {
                let k = random(len, config.head_dim, &mut rng);
                let v = random(len, config.head_dim, &mut rng);
                quantize_head_kv(config, &k, &v, RoundingMode::Stochastic(seed), &c).unwrap()
            })
            .collect();
        SequenceKv {
            num_layers: config.num_layers,
            num_heads: config.num_heads,
            head_dim: config.head_dim,
            partition_size: config.partition_size,
            prompt_len: len,
            heads,
        }
    }

    #[test]
    fn init_examples() {
        let cache = KVCache::new(CacheConfig::default()).unwrap();
        assert_eq!(cache.num_sequences(), 0);
        assert_eq!(cache.memory_footprint(), MemoryFootprint::default());
        assert_eq!(cache.config().value_sum_width(), SumWidth::U8);
        let wide = CacheConfig {
            partition_size: 128,
            ..CacheConfig::default()
        };
        assert_eq!(
            KVCache::new(wide).unwrap().config().value_sum_width(),
            SumWidth::U16
        );
        let bad = CacheConfig {
            partition_size: 40,
            ..CacheConfig::default()
        };
        assert!(matches!(KVCache::new(bad), Err(Error::Config(_))));
        let zero = CacheConfig {
            partition_size: 0,
            ..CacheConfig::default()
        };
        assert!(KVCache::new(zero).is_err());
    }

    #[test]
    fn ingest_full_precision_tail() {
        let config = CacheConfig {
            v_tail: VTailPolicy::FullPrecision,
            head_dim: 64,
            ..CacheConfig::default()
        };
        let mut cache = KVCache::new(config).unwrap();
        cache.ingest_prefill(1, prompt_kv(&config, 130, 1)).unwrap();
        let h = cache.head(1, 0, 0).unwrap();
        assert_eq!(h.v_chunks()[0].layout().num_full_partitions(), 2);
        assert_eq!(h.v_chunks()[0].layout().tail_len(), 0);
        assert_eq!(h.buffer().count(), 2);

        cache.ingest_prefill(2, prompt_kv(&config, 64, 2)).unwrap();
        let h = cache.head(2, 0, 0).unwrap();
        assert_eq!(h.v_chunks()[0].layout().num_full_partitions(), 1);
        assert!(h.buffer().is_empty());

        assert!(matches!(
            cache.ingest_prefill(1, prompt_kv(&config, 64, 3)),
            Err(Error::DuplicateSequence(1))
        ));
        let other = CacheConfig {
            head_dim: 32,
            ..config
        };
        assert!(cache.ingest_prefill(9, prompt_kv(&other, 64, 3)).is_err());
    }

    #[test]
    fn ingest_quantized_tail() {
        let config = CacheConfig {
            head_dim: 64,
            ..CacheConfig::default()
        };
        let mut cache = KVCache::new(config).unwrap();
        cache.ingest_prefill(1, prompt_kv(&config, 130, 1)).unwrap();
        let h = cache.head(1, 0, 0).unwrap();
        assert_eq!(h.v_chunks()[0].layout().num_full_partitions(), 2);
        assert_eq!(h.v_chunks()[0].layout().tail_len(), 2);
        assert!(h.buffer().is_empty());
    }

    #[test]
    fn flush_rule() {
        let config = small_config(4, 8, VTailPolicy::FullPrecision);
        let mut cache = KVCache::new(config).unwrap();
        cache.ingest_prefill(7, prompt_kv(&config, 6, 4)).unwrap();
        assert_eq!(cache.head(7, 0, 0).unwrap().buffer().count(), 2);
        let row = [0.5f32; 8];
        let out = cache
            .append_decode_token(7, 0, 0, &row, &row, RoundingMode::Nearest)
            .unwrap();
        assert!(!out.flushed);
        assert_eq!(cache.head(7, 0, 0).unwrap().buffer().count(), 3);
        assert_eq!(cache.head(7, 0, 0).unwrap().v_chunks().len(), 1);
        let out = cache
            .append_decode_token(7, 0, 0, &row, &row, RoundingMode::Nearest)
            .unwrap();
        assert!(out.flushed);
        let h = cache.head(7, 0, 0).unwrap();
        assert_eq!(h.buffer().count(), 0);
        assert_eq!(h.v_chunks().len(), 2);
        assert_eq!(h.v_chunks()[1].num_partitions(), 8);
        assert_eq!(h.len(), 8);
        // the other head was not touched
        assert_eq!(cache.head(7, 0, 1).unwrap().len(), 6);
        assert!(matches!(
            cache.append_decode_token(8, 0, 0, &row, &row, RoundingMode::Nearest),
            Err(Error::UnknownSequence(8))
        ));
    }

    #[test]
    fn appends_keep_committed_data_and_sums_consistent() {
        let config = small_config(4, 6, VTailPolicy::Quantized);
        let mut cache = KVCache::new(config).unwrap();
        cache.ingest_prefill(1, prompt_kv(&config, 5, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let before = cache.head(1, 0, 1).unwrap().v_chunks()[0].clone();
        let k_before = cache.head(1, 0, 1).unwrap().k().clone();
        for _ in 0..13 {
            let k = random(1, 6, &mut rng).into_vec();
            let v = random(1, 6, &mut rng).into_vec();
            cache
                .append_decode_token(1, 0, 1, &k, &v, RoundingMode::Stochastic(3))
                .unwrap();
            let h = cache.head(1, 0, 1).unwrap();
            assert!(h.buffer().count() < 4);
            assert_eq!(h.v_chunks()[0], before);
            let kb = k_before.codes().as_bytes();
            // whole bytes of the original K stay identical; a shared last
            // byte only gains higher bits
            let full = k_before.codes().len() / 4;
            assert_eq!(&h.k().codes().as_bytes()[..full], &kb[..full]);
            for i in 0..k_before.codes().len() {
                assert_eq!(h.k().codes().get(i), k_before.codes().get(i));
            }
            for chunk in std::iter::once(h.k()).chain(h.v_chunks()) {
                assert_eq!(
                    chunk.sums().unwrap().values(),
                    PartitionSums::of(chunk).values()
                );
            }
        }
        let h = cache.head(1, 0, 1).unwrap();
        assert_eq!(h.len(), 18);
        assert_eq!(h.committed_v_rows() + h.buffer().count(), 18);
        assert_eq!(h.reconstruct_v().rows(), 18);
        // ragged prompt chunk blocks a flat export once more chunks follow
        assert!(cache.export(1).is_err());
    }

    #[test]
    fn export_roundtrips_when_chunks_are_whole() {
        let config = small_config(4, 8, VTailPolicy::FullPrecision);
        let mut cache = KVCache::new(config).unwrap();
        let kv = prompt_kv(&config, 9, 8);
        cache.ingest_prefill(3, kv.clone()).unwrap();
        assert_eq!(cache.export(3).unwrap(), kv);
        let row = [0.25f32; 8];
        for _ in 0..5 {
            for h in 0..2 {
                cache
                    .append_decode_token(3, 0, h, &row, &row, RoundingMode::Nearest)
                    .unwrap();
            }
        }
        let exported = cache.export(3).unwrap();
        exported.validate(&config).unwrap();
        assert_eq!(exported.prompt_len, 14);
        assert_eq!(exported.v_tail_len(), 2);
    }

    #[test]
    fn footprint_ratios() {
        let config = CacheConfig::default();
        let mut cache = KVCache::new(config).unwrap();
        cache
            .ingest_prefill(1, prompt_kv(&config, 4096, 9))
            .unwrap();
        let f = cache.memory_footprint();
        // 8-bit sums over 64 two-bit codes: 8 / (64 * 2)
        assert_eq!(f.sums_bytes * 16, f.codes_bytes);
        assert_eq!(f.codes_bytes, 2 * 4096 * 128 / 4);
        assert_eq!(f.metadata_bytes, 2 * (4096 * 2) * 4);
        assert_eq!(f.buffer_bytes, 0);

        let fp = CacheConfig {
            v_tail: VTailPolicy::FullPrecision,
            ..config
        };
        let mut cache = KVCache::new(fp).unwrap();
        cache
            .ingest_prefill(1, prompt_kv(&fp, 4096 + 63, 9))
            .unwrap();
        let f = cache.sequence_footprint(1).unwrap();
        assert_eq!(f.buffer_bytes, 63 * 128 * 2);
        assert!(f.buffer_bytes <= (64 - 1) * 128 * 2);
    }
}
