//! Fixtures shared by the kernel benchmarks.

use homokv::attention::{
    prefill_attention, random_embeddings, AttentionConfig, ExecutionMode, KvStore, ModelWeights,
    PrefillOutput,
};
use homokv::quant::quantize;
use homokv::{
    BitWidth, CacheConfig, CostCounters, PartitionAxis, PartitionLayout, QuantizedTensor, Result,
    RoundingMode,
};

/// Quantized `m x z` left and `z x n` right operands with Gaussian entries.
pub fn matmul_operands(
    m: usize,
    z: usize,
    n: usize,
    pi: usize,
    bits: BitWidth,
    seed: u64,
) -> Result<(QuantizedTensor, QuantizedTensor)> {
    let a = random_embeddings(m, z, seed);
    let b = random_embeddings(z, n, seed ^ 0x5eed);
    let mode = RoundingMode::Stochastic(seed);
    let qa = quantize(
        &a,
        PartitionLayout::new(PartitionAxis::AlongRows, pi, z)?,
        bits,
        mode.fork(1),
    )?;
    let qb = quantize(
        &b,
        PartitionLayout::new(PartitionAxis::AlongCols, pi, z)?,
        bits,
        mode.fork(2),
    )?;
    Ok((qa, qb))
}

/// A one-layer, one-head model with `d_h = 128`.
pub fn single_head(pi: usize, bits: BitWidth) -> AttentionConfig {
    AttentionConfig {
        cache: CacheConfig {
            partition_size: pi,
            key_bits: bits,
            value_bits: bits,
            ..CacheConfig::default()
        },
        embed_dim: 128,
        rounding: RoundingMode::Stochastic(7),
    }
}

/// A prefilled prompt ready to be handed to a decode-side store.
pub struct DecodeFixture {
    pub config: AttentionConfig,
    pub weights: ModelWeights,
    pub mode: ExecutionMode,
    pub prefill: PrefillOutput,
    pub next_token: Vec<f32>,
}

impl DecodeFixture {
    pub fn new(mode: ExecutionMode, prompt_len: usize, pi: usize, bits: BitWidth) -> Result<Self> {
        let config = single_head(pi, bits);
        let weights = ModelWeights::seeded(&config, 11);
        let e = random_embeddings(prompt_len + 1, config.embed_dim, 13);
        let prefill = prefill_attention(&e.slice_rows(0..prompt_len), &weights, &config, mode)?;
        Ok(Self {
            next_token: e.row(prompt_len).to_vec(),
            config,
            weights,
            mode,
            prefill,
        })
    }

    /// A fresh store holding the prompt as sequence 0.
    pub fn store(&self) -> Result<KvStore> {
        let mut store = KvStore::new(self.mode, &self.config.cache)?;
        store.ingest(
            0,
            self.prefill.kv.clone(),
            self.config.rounding,
            &CostCounters::new(),
        )?;
        Ok(store)
    }
}
