//! Homomorphic quantized attention over a 2-bit KV cache.
//!
//! The crate multiplies asymmetrically quantized matrices without
//! dequantizing them, recovering the real-valued product through a
//! per-partition correction built from code sums and `(min, scale)`
//! metadata. Around that kernel sit a quantized KV cache with cached sums
//! and a full-precision trailing-V buffer, a toy multi-head attention for
//! prefill and decode, a binary transfer frame, and a discrete-event
//! simulator of disaggregated prefill/decode serving.
//!
//! - [`quant`]: partitioned b-bit quantization, rounding, bit packing
//! - [`homomm`]: quantized matrix multiplication and the operation-cost model
//! - [`kvcache`]: per-sequence quantized KV store
//! - [`attention`]: prefill and decode attention on top of [`homomm`]
//! - [`wire`]: the KV transfer frame
//! - [`disagg`]: workload generation, scheduling and simulation
//! - [`reference`]: independent full-precision oracles and the
//!   dequantize-first baseline

pub mod attention;
pub mod disagg;
pub mod error;
pub mod homomm;
pub mod kvcache;
pub mod matrix;
pub mod quant;
pub mod reference;
pub mod wire;

pub use error::{Error, Result};
pub use homomm::{CostCounters, CounterSnapshot, PartitionSums, SumWidth};
pub use kvcache::{CacheConfig, KVCache, SequenceKv, VTailPolicy};
pub use matrix::Matrix;
pub use quant::{BitWidth, PartitionAxis, PartitionLayout, QuantizedTensor, RoundingMode};
