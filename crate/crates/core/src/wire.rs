//! Binary transfer frame for one sequence's prefill KV.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HACK" | version u16 | seq_id u64 | layers u16 | heads u16 | head_dim u16
//! | partition u16 | key_bits u8 | value_bits u8 | prompt_len u32
//! | v_tail_len u16 | first_token u32
//! per (layer, head):
//!   K codes | K mins | K scales | K sums
//!   V codes | V mins | V scales | V sums | V tail (f16 rows)
//! CRC32 of every preceding byte
//! ```
//!
//! Sums use the narrowest width that holds `bits + ceil(log2 Π)` bits. A
//! frame whose bit fields are both 16 carries raw half-precision K/V
//! instead (the baseline handoff).

use half::f16;

use crate::attention::FullKv;
use crate::homomm::{PartitionSums, SumWidth};
use crate::kvcache::{CacheConfig, HeadKv, LastVBlockBuffer, SequenceKv, VTailPolicy};
use crate::matrix::Matrix;
use crate::quant::{BitWidth, PackedCodes, PartitionAxis, PartitionLayout, QuantizedTensor};

pub const MAGIC: [u8; 4] = *b"HACK";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 34;
pub const CRC_BYTES: usize = 4;
const RAW_BITS: u8 = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("not a KV frame (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u16),
    #[error("frame length {actual} bytes, header implies {expected}")]
    Length { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("sequence has no heads or no tokens")]
    EmptySequence,
    #[error("unsupported bit widths {key}/{value} for this decoder")]
    UnsupportedBits { key: u8, value: u8 },
    #[error("frame contents are inconsistent: {0}")]
    Inconsistent(String),
}

/// Fixed header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u16,
    pub seq_id: u64,
    pub num_layers: u16,
    pub num_heads: u16,
    pub head_dim: u16,
    pub partition_size: u16,
    pub key_bits: u8,
    pub value_bits: u8,
    pub prompt_len: u32,
    pub v_tail_len: u16,
    pub first_token: u32,
}

impl FrameHeader {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seq_id.to_le_bytes());
        out.extend_from_slice(&self.num_layers.to_le_bytes());
        out.extend_from_slice(&self.num_heads.to_le_bytes());
        out.extend_from_slice(&self.head_dim.to_le_bytes());
        out.extend_from_slice(&self.partition_size.to_le_bytes());
        out.push(self.key_bits);
        out.push(self.value_bits);
        out.extend_from_slice(&self.prompt_len.to_le_bytes());
        out.extend_from_slice(&self.v_tail_len.to_le_bytes());
        out.extend_from_slice(&self.first_token.to_le_bytes());
    }

    /// Parses magic, version and fields; does not look at the payload.
    pub fn parse(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < HEADER_BYTES + CRC_BYTES {
            return Err(FrameError::Length {
                expected: HEADER_BYTES + CRC_BYTES,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u16();
        if version != VERSION {
            return Err(FrameError::UnsupportedVersion(version));
        }
        Ok(Self {
            version,
            seq_id: r.u64(),
            num_layers: r.u16(),
            num_heads: r.u16(),
            head_dim: r.u16(),
            partition_size: r.u16(),
            key_bits: r.u8(),
            value_bits: r.u8(),
            prompt_len: r.u32(),
            v_tail_len: r.u16(),
            first_token: r.u32(),
        })
    }

    pub fn is_raw(&self) -> bool {
        self.key_bits == RAW_BITS && self.value_bits == RAW_BITS
    }

    pub fn dims(&self) -> Result<FrameDims, FrameError> {
        let bit = |b: u8| {
            BitWidth::new(u32::from(b)).map_err(|_| FrameError::UnsupportedBits {
                key: self.key_bits,
                value: self.value_bits,
            })
        };
        Ok(FrameDims {
            num_layers: self.num_layers as usize,
            num_heads: self.num_heads as usize,
            head_dim: self.head_dim as usize,
            partition_size: self.partition_size as usize,
            key_bits: bit(self.key_bits)?,
            value_bits: bit(self.value_bits)?,
            prompt_len: self.prompt_len as usize,
            v_tail_len: self.v_tail_len as usize,
        })
    }
}

/// Everything that determines a quantized frame's size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDims {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub partition_size: usize,
    pub key_bits: BitWidth,
    pub value_bits: BitWidth,
    pub prompt_len: usize,
    pub v_tail_len: usize,
}

/// Byte sizes of one head's sections, in frame order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSections {
    pub k_codes: usize,
    pub k_metadata: usize,
    pub k_sums: usize,
    pub v_codes: usize,
    pub v_metadata: usize,
    pub v_sums: usize,
    pub v_tail: usize,
}

impl HeadSections {
    pub fn total(&self) -> usize {
        self.k_codes
            + self.k_metadata
            + self.k_sums
            + self.v_codes
            + self.v_metadata
            + self.v_sums
            + self.v_tail
    }
}

impl FrameDims {
    pub fn head_sections(&self) -> HeadSections {
        let (d, p, l, t) = (
            self.head_dim,
            self.partition_size,
            self.prompt_len,
            self.v_tail_len,
        );
        let k_parts = l * d.div_ceil(p);
        let committed = l - t;
        let v_parts = committed.div_ceil(p) * d;
        HeadSections {
            k_codes: self.key_bits.packed_len(l * d),
            k_metadata: 4 * k_parts,
            k_sums: k_parts * SumWidth::for_partition(self.key_bits, p).bytes(),
            v_codes: self.value_bits.packed_len(committed * d),
            v_metadata: 4 * v_parts,
            v_sums: v_parts * SumWidth::for_partition(self.value_bits, p).bytes(),
            v_tail: 2 * t * d,
        }
    }

    /// Exact encoded size.
    pub fn frame_size(&self) -> usize {
        HEADER_BYTES + self.num_layers * self.num_heads * self.head_sections().total() + CRC_BYTES
    }
}

/// Bytes of the prompt's K and V in 16-bit floats, across all heads.
pub fn raw_kv_bytes(
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    prompt_len: usize,
) -> usize {
    2 * 2 * prompt_len * head_dim * num_layers * num_heads
}

/// Encoded size of a raw half-precision frame.
pub fn raw_frame_size(
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    prompt_len: usize,
) -> usize {
    HEADER_BYTES + raw_kv_bytes(num_layers, num_heads, head_dim, prompt_len) + CRC_BYTES
}

fn dims_of(kv: &SequenceKv) -> Result<FrameDims, FrameError> {
    let first = kv.heads.first().ok_or(FrameError::EmptySequence)?;
    if kv.prompt_len == 0 {
        return Err(FrameError::EmptySequence);
    }
    Ok(FrameDims {
        num_layers: kv.num_layers,
        num_heads: kv.num_heads,
        head_dim: kv.head_dim,
        partition_size: kv.partition_size,
        key_bits: first.k.bits(),
        value_bits: first.v.bits(),
        prompt_len: kv.prompt_len,
        v_tail_len: kv.v_tail_len(),
    })
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T, FrameError> {
    T::try_from(v)
        .map_err(|_| FrameError::Inconsistent(format!("{what} {v} does not fit the header")))
}

#[allow(clippy::too_many_arguments)]
fn header_for(
    seq_id: u64,
    first_token: u32,
    layers: usize,
    heads: usize,
    head_dim: usize,
    partition_size: usize,
    bits: (u8, u8),
    prompt_len: usize,
    v_tail_len: usize,
) -> Result<FrameHeader, FrameError> {
    Ok(FrameHeader {
        version: VERSION,
        seq_id,
        num_layers: narrow(layers, "layer count")?,
        num_heads: narrow(heads, "head count")?,
        head_dim: narrow(head_dim, "head dimension")?,
        partition_size: narrow(partition_size, "partition size")?,
        key_bits: bits.0,
        value_bits: bits.1,
        prompt_len: narrow(prompt_len, "prompt length")?,
        v_tail_len: narrow(v_tail_len, "tail length")?,
        first_token,
    })
}

fn write_meta(out: &mut Vec<u8>, qt: &QuantizedTensor) {
    for v in qt.mins().iter().chain(qt.scales()) {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn write_sums(out: &mut Vec<u8>, qt: &QuantizedTensor, width: SumWidth) {
    let recomputed;
    let sums = match qt.sums() {
        Some(s) => s,
        None => {
            recomputed = PartitionSums::of(qt);
            &recomputed
        }
    };
    for &v in sums.values() {
        out.extend_from_slice(&v.to_le_bytes()[..width.bytes()]);
    }
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serializes a prefill bundle.
pub fn encode_kv_frame(
    kv: &SequenceKv,
    seq_id: u64,
    first_token: u32,
) -> Result<Vec<u8>, FrameError> {
    let dims = dims_of(kv)?;
    if kv.heads.len() != kv.num_layers * kv.num_heads {
        return Err(FrameError::Inconsistent(
            "head count does not match dimensions".into(),
        ));
    }
    let header = header_for(
        seq_id,
        first_token,
        dims.num_layers,
        dims.num_heads,
        dims.head_dim,
        dims.partition_size,
        (dims.key_bits.bits() as u8, dims.value_bits.bits() as u8),
        dims.prompt_len,
        dims.v_tail_len,
    )?;
    let kw = SumWidth::for_partition(dims.key_bits, dims.partition_size);
    let vw = SumWidth::for_partition(dims.value_bits, dims.partition_size);
    let mut out = Vec::with_capacity(dims.frame_size());
    header.write(&mut out);
    for h in &kv.heads {
        out.extend_from_slice(h.k.codes().as_bytes());
        write_meta(&mut out, &h.k);
        write_sums(&mut out, &h.k, kw);
        out.extend_from_slice(h.v.codes().as_bytes());
        write_meta(&mut out, &h.v);
        write_sums(&mut out, &h.v, vw);
        for v in h.v_tail.values() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    if out.len() != dims.frame_size() - CRC_BYTES {
        return Err(FrameError::Inconsistent(
            "sections do not match the declared shape".into(),
        ));
    }
    Ok(finish(out))
}

/// Serializes full-precision K/V as raw half-precision rows.
pub fn encode_raw_frame(
    kv: &FullKv,
    num_layers: usize,
    num_heads: usize,
    seq_id: u64,
    first_token: u32,
) -> Result<Vec<u8>, FrameError> {
    let first = kv.k.first().ok_or(FrameError::EmptySequence)?;
    if kv.prompt_len == 0 {
        return Err(FrameError::EmptySequence);
    }
    let d = first.cols();
    if kv.k.len() != num_layers * num_heads || kv.v.len() != kv.k.len() {
        return Err(FrameError::Inconsistent(
            "head count does not match dimensions".into(),
        ));
    }
    let header = header_for(
        seq_id,
        first_token,
        num_layers,
        num_heads,
        d,
        0,
        (RAW_BITS, RAW_BITS),
        kv.prompt_len,
        0,
    )?;
    let mut out = Vec::with_capacity(raw_frame_size(num_layers, num_heads, d, kv.prompt_len));
    header.write(&mut out);
    for (k, v) in kv.k.iter().zip(&kv.v) {
        for m in [k, v] {
            if m.rows() != kv.prompt_len || m.cols() != d {
                return Err(FrameError::Inconsistent(
                    "K/V shape differs across heads".into(),
                ));
            }
            for &x in m.as_slice() {
                out.extend_from_slice(&f16::from_f32(x).to_bits().to_le_bytes());
            }
        }
    }
    Ok(finish(out))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn f16s(&mut self, n: usize) -> Vec<f16> {
        self.take(2 * n)
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect()
    }

    fn sums(&mut self, n: usize, width: SumWidth) -> PartitionSums {
        let w = width.bytes();
        let values = self
            .take(n * w)
            .chunks_exact(w)
            .map(|c| {
                let mut b = [0u8; 4];
                b[..w].copy_from_slice(c);
                u32::from_le_bytes(b)
            })
            .collect();
        PartitionSums::new(values, width)
    }
}

/// Checks length and CRC against the header; returns the header.
fn check_frame(
    bytes: &[u8],
    expected: impl FnOnce(&FrameHeader) -> Result<usize, FrameError>,
) -> Result<FrameHeader, FrameError> {
    let header = FrameHeader::parse(bytes)?;
    let expected = expected(&header)?;
    if bytes.len() != expected {
        return Err(FrameError::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let body = bytes.len() - CRC_BYTES;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(FrameError::Crc { stored, computed });
    }
    Ok(header)
}

fn inconsistent(e: crate::Error) -> FrameError {
    FrameError::Inconsistent(e.to_string())
}

/// Parses and validates a quantized frame; returns the bundle, the
/// sequence id and the first generated token.
pub fn decode_kv_frame(bytes: &[u8]) -> Result<(SequenceKv, u64, u32), FrameError> {
    let header = check_frame(bytes, |h| {
        if h.is_raw() {
            return Err(FrameError::UnsupportedBits {
                key: h.key_bits,
                value: h.value_bits,
            });
        }
        let dims = h.dims()?;
        if dims.partition_size == 0 || dims.v_tail_len > dims.prompt_len {
            return Err(FrameError::Inconsistent(
                "impossible header dimensions".into(),
            ));
        }
        Ok(dims.frame_size())
    })?;
    let dims = header.dims()?;
    if dims.prompt_len == 0 || dims.num_layers * dims.num_heads == 0 {
        return Err(FrameError::EmptySequence);
    }
    let (d, p, l, t) = (
        dims.head_dim,
        dims.partition_size,
        dims.prompt_len,
        dims.v_tail_len,
    );
    let config = CacheConfig {
        num_layers: dims.num_layers,
        num_heads: dims.num_heads,
        head_dim: d,
        partition_size: p,
        key_bits: dims.key_bits,
        value_bits: dims.value_bits,
        v_tail: if t > 0 {
            VTailPolicy::FullPrecision
        } else {
            VTailPolicy::Quantized
        },
        require_aligned_partitions: false,
        ..CacheConfig::default()
    };
    let key_layout = PartitionLayout::new(PartitionAxis::AlongRows, p, d).map_err(inconsistent)?;
    let committed = l - t;
    let v_layout =
        PartitionLayout::new(PartitionAxis::AlongCols, p, committed).map_err(inconsistent)?;
    let sections = dims.head_sections();
    let mut r = Reader {
        bytes,
        pos: HEADER_BYTES,
    };
    let mut heads = Vec::with_capacity(dims.num_layers * dims.num_heads);
    for _ in 0..dims.num_layers * dims.num_heads {
        let k_codes =
            PackedCodes::from_bytes(r.take(sections.k_codes).to_vec(), l * d, dims.key_bits)
                .map_err(inconsistent)?;
        let n = sections.k_metadata / 4;
        let (mins, scales) = (r.f16s(n), r.f16s(n));
        let sums = r.sums(n, config.key_sum_width());
        let k = QuantizedTensor::from_parts(l, d, key_layout, k_codes, mins, scales, Some(sums))
            .map_err(inconsistent)?;

        let v_codes = PackedCodes::from_bytes(
            r.take(sections.v_codes).to_vec(),
            committed * d,
            dims.value_bits,
        )
        .map_err(inconsistent)?;
        let n = sections.v_metadata / 4;
        let (mins, scales) = (r.f16s(n), r.f16s(n));
        let sums = r.sums(n, config.value_sum_width());
        let v =
            QuantizedTensor::from_parts(committed, d, v_layout, v_codes, mins, scales, Some(sums))
                .map_err(inconsistent)?;
        let v_tail = LastVBlockBuffer::from_values(d, r.f16s(t * d)).map_err(inconsistent)?;
        heads.push(HeadKv { k, v, v_tail });
    }
    let kv = SequenceKv {
        num_layers: dims.num_layers,
        num_heads: dims.num_heads,
        head_dim: d,
        partition_size: p,
        prompt_len: l,
        heads,
    };
    kv.validate(&config).map_err(inconsistent)?;
    Ok((kv, header.seq_id, header.first_token))
}

/// Parses a raw half-precision frame.
pub fn decode_raw_frame(bytes: &[u8]) -> Result<(FullKv, FrameHeader), FrameError> {
    let header = check_frame(bytes, |h| {
        if !h.is_raw() {
            return Err(FrameError::UnsupportedBits {
                key: h.key_bits,
                value: h.value_bits,
            });
        }
        Ok(raw_frame_size(
            h.num_layers as usize,
            h.num_heads as usize,
            h.head_dim as usize,
            h.prompt_len as usize,
        ))
    })?;
    let (l, d) = (header.prompt_len as usize, header.head_dim as usize);
    let n = header.num_layers as usize * header.num_heads as usize;
    if l == 0 || n == 0 {
        return Err(FrameError::EmptySequence);
    }
    let mut r = Reader {
        bytes,
        pos: HEADER_BYTES,
    };
    let mut read = || {
        let data = r.f16s(l * d).into_iter().map(f16::to_f32).collect();
        Matrix::from_vec(l, d, data).map_err(inconsistent)
    };
    let (mut k, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        k.push(read()?);
        v.push(read()?);
    }
    Ok((
        FullKv {
            prompt_len: l,
            k,
            v,
        },
        header,
    ))
}
