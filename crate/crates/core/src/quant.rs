//! Partitioned asymmetric b-bit quantization.
//!
//! A matrix is cut into *lines* (rows or columns, depending on the
//! [`PartitionAxis`]) and every line into partitions of `partition_size`
//! consecutive elements along the inner axis. Each partition carries its own
//! minimum `m` and scale `s`, stored as 16-bit floats, and every element is
//! encoded as `x' = round((x - m) / s)` clamped to `[0, 2^b - 1]`.
//!
//! Codes are bit-packed in logical row-major order, least-significant bits
//! first within each byte.

use half::f16;

use crate::error::{shape_err, Error, Result};
use crate::homomm::PartitionSums;
use crate::matrix::Matrix;

/// Scalar ops charged per quantized element: two range comparisons, then
/// subtract, divide and round.
pub const QUANTIZE_OPS_PER_ELEMENT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitWidth {
    Two,
    Eight,
}

impl BitWidth {
    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(Self::Two),
            8 => Ok(Self::Eight),
            other => Err(Error::UnsupportedBits(other)),
        }
    }

    #[inline]
    pub fn bits(self) -> u32 {
        match self {
            Self::Two => 2,
            Self::Eight => 8,
        }
    }

    #[inline]
    pub fn max_code(self) -> u8 {
        match self {
            Self::Two => 3,
            Self::Eight => 255,
        }
    }

    /// Bytes needed to hold `count` packed codes.
    #[inline]
    pub fn packed_len(self, count: usize) -> usize {
        (count * self.bits() as usize).div_ceil(8)
    }
}

/// Which direction the inner (reduction) axis runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionAxis {
    /// Each row is split into partitions: the left operand of `A * B`.
    AlongRows,
    /// Each column is split into partitions: the right operand of `A * B`.
    AlongCols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionLayout {
    axis: PartitionAxis,
    partition_size: usize,
    total_len: usize,
    num_full_partitions: usize,
    tail_len: usize,
}

impl PartitionLayout {
    pub fn new(axis: PartitionAxis, partition_size: usize, total_len: usize) -> Result<Self> {
        if partition_size == 0 {
            return Err(Error::Layout("partition size must be at least 1".into()));
        }
        Ok(Self {
            axis,
            partition_size,
            total_len,
            num_full_partitions: total_len / partition_size,
            tail_len: total_len % partition_size,
        })
    }

    /// Rejects partition sizes that are not a multiple of 16, the tile
    /// granularity of integer matrix units.
    pub fn validate_alignment(&self) -> Result<()> {
        if !self.partition_size.is_multiple_of(16) {
            return Err(Error::Layout(format!(
                "partition size {} is not a multiple of 16",
                self.partition_size
            )));
        }
        Ok(())
    }

    pub fn axis(&self) -> PartitionAxis {
        self.axis
    }

    pub fn partition_size(&self) -> usize {
        self.partition_size
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn num_full_partitions(&self) -> usize {
        self.num_full_partitions
    }

    pub fn tail_len(&self) -> usize {
        self.tail_len
    }

    /// Partitions per line, counting a ragged tail.
    pub fn partitions_per_line(&self) -> usize {
        self.num_full_partitions + usize::from(self.tail_len > 0)
    }

    pub fn partition_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = k * self.partition_size;
        start..(start + self.partition_size).min(self.total_len)
    }

    pub fn partition_len(&self, k: usize) -> usize {
        self.partition_range(k).len()
    }

    pub(crate) fn with_axis(self, axis: PartitionAxis) -> Self {
        Self { axis, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundingMode {
    /// Unbiased stochastic rounding keyed by `(seed, flat element index)`.
    Stochastic(u64),
    Nearest,
}

impl RoundingMode {
    /// Derives an independent stream for a sub-computation. Nearest stays
    /// nearest.
    pub fn fork(self, salt: u64) -> Self {
        match self {
            Self::Stochastic(seed) => Self::Stochastic(mix64(seed ^ mix64(salt))),
            Self::Nearest => Self::Nearest,
        }
    }
}

/// splitmix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` addressed by `(seed, index)`.
#[inline]
pub fn counter_uniform(seed: u64, index: u64) -> f64 {
    let bits = mix64(seed ^ mix64(index.wrapping_add(0x632b_e59b_d9b4_e019)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Rounds down with probability `ceil(x) - x`, up otherwise, given a
/// uniform draw `u` in `[0, 1)`.
#[inline]
pub fn stochastic_round(x: f64, u: f64) -> i64 {
    let floor = x.floor();
    let frac = x - floor;
    floor as i64 + i64::from(u < frac)
}

/// Exact (unrounded) minimum and scale of one partition.
pub fn partition_stats(values: &[f32], bits: BitWidth) -> Result<(f32, f32)> {
    let (min, max) = min_max(values)?;
    let scale = ((max as f64 - min as f64) / f64::from(bits.max_code())) as f32;
    Ok((min, scale))
}

fn min_max(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite(v));
        }
        min = min.min(v);
        max = max.max(v);
    }
    Ok((min, max))
}

fn f16_next_down(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x7fff == 0 {
        f16::from_bits(0x8001)
    } else if bits & 0x8000 == 0 {
        f16::from_bits(bits - 1)
    } else {
        f16::from_bits(bits + 1)
    }
}

fn f16_next_up(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x7fff == 0 {
        f16::from_bits(0x0001)
    } else if bits & 0x8000 == 0 {
        f16::from_bits(bits + 1)
    } else {
        f16::from_bits(bits - 1)
    }
}

/// Stored `(min, scale)` for a partition. The minimum rounds toward -inf and
/// the scale toward +inf so that `[m, m + (2^b - 1) s]` still covers the
/// partition after narrowing to 16 bits. A constant partition gets a zero
/// scale only when its value survives the narrowing; otherwise a small
/// scale bridges the gap left by the rounded-down minimum.
fn storage_metadata(min: f32, max: f32, bits: BitWidth) -> Result<(f16, f16)> {
    if min == max && f16::from_f32(min).to_f32() == min {
        return Ok((f16::from_f32(min), f16::ZERO));
    }
    let mut m = f16::from_f32(min);
    if m.to_f32() > min {
        m = f16_next_down(m);
    }
    let raw_scale = (max as f64 - m.to_f64()) / f64::from(bits.max_code());
    let mut s = f16::from_f64(raw_scale);
    if s.to_f64() < raw_scale {
        s = f16_next_up(s);
    }
    if !m.is_finite() || !s.is_finite() {
        return Err(Error::MetadataOverflow {
            min,
            scale: raw_scale as f32,
        });
    }
    Ok((m, s))
}

/// Bit-packed code storage, logical element order, LSB-first within bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: BitWidth,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn new(bits: BitWidth) -> Self {
        Self {
            bits,
            len: 0,
            bytes: Vec::new(),
        }
    }

    pub fn from_codes(codes: &[u8], bits: BitWidth) -> Result<Self> {
        Ok(Self {
            bits,
            len: codes.len(),
            bytes: pack_codes(codes, bits)?,
        })
    }

    pub fn from_bytes(bytes: Vec<u8>, len: usize, bits: BitWidth) -> Result<Self> {
        if bytes.len() != bits.packed_len(len) {
            return Err(shape_err(format!(
                "{} packed bytes for {len} codes of {} bits",
                bytes.len(),
                bits.bits()
            )));
        }
        Ok(Self { bits, len, bytes })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        debug_assert!(i < self.len);
        match self.bits {
            BitWidth::Eight => self.bytes[i],
            BitWidth::Two => (self.bytes[i >> 2] >> ((i & 3) * 2)) & 3,
        }
    }

    pub fn push(&mut self, code: u8) {
        debug_assert!(code <= self.bits.max_code());
        match self.bits {
            BitWidth::Eight => self.bytes.push(code),
            BitWidth::Two => {
                let shift = (self.len & 3) * 2;
                if shift == 0 {
                    self.bytes.push(code);
                } else {
                    *self.bytes.last_mut().unwrap() |= code << shift;
                }
            }
        }
        self.len += 1;
    }

    pub fn extend(&mut self, other: &PackedCodes) {
        debug_assert_eq!(self.bits, other.bits);
        if self.bits == BitWidth::Eight || self.len.is_multiple_of(4) {
            self.bytes.extend_from_slice(&other.bytes);
            self.len += other.len;
        } else {
            for i in 0..other.len {
                self.push(other.get(i));
            }
        }
    }

    /// Codes widened to one byte each.
    pub fn unpack(&self) -> Vec<u8> {
        match self.bits {
            BitWidth::Eight => self.bytes.clone(),
            BitWidth::Two => (0..self.len).map(|i| self.get(i)).collect(),
        }
    }
}

pub fn pack_codes(codes: &[u8], bits: BitWidth) -> Result<Vec<u8>> {
    let max = bits.max_code();
    if let Some(&code) = codes.iter().find(|&&c| c > max) {
        return Err(Error::CodeOutOfRange {
            code,
            bits: bits.bits(),
        });
    }
    Ok(match bits {
        BitWidth::Eight => codes.to_vec(),
        BitWidth::Two => codes
            .chunks(4)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |byte, (i, &c)| byte | (c << (2 * i)))
            })
            .collect(),
    })
}

pub fn unpack_codes(bytes: &[u8], bits: BitWidth, count: usize) -> Result<Vec<u8>> {
    if bytes.len() < bits.packed_len(count) {
        return Err(shape_err(format!(
            "{} bytes cannot hold {count} codes of {} bits",
            bytes.len(),
            bits.bits()
        )));
    }
    Ok(match bits {
        BitWidth::Eight => bytes[..count].to_vec(),
        BitWidth::Two => (0..count)
            .map(|i| (bytes[i >> 2] >> ((i & 3) * 2)) & 3)
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bits: BitWidth,
    layout: PartitionLayout,
    codes: PackedCodes,
    mins: Vec<f16>,
    scales: Vec<f16>,
    sums: Option<PartitionSums>,
}

impl QuantizedTensor {
    /// Assembles a tensor from raw parts, checking every structural
    /// invariant. Used by decoders.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        layout: PartitionLayout,
        codes: PackedCodes,
        mins: Vec<f16>,
        scales: Vec<f16>,
        sums: Option<PartitionSums>,
    ) -> Result<Self> {
        let qt = Self {
            rows,
            cols,
            bits: codes.bits(),
            layout,
            codes,
            mins,
            scales,
            sums,
        };
        qt.check()?;
        Ok(qt)
    }

    fn check(&self) -> Result<()> {
        let inner = match self.layout.axis {
            PartitionAxis::AlongRows => self.cols,
            PartitionAxis::AlongCols => self.rows,
        };
        if inner != self.layout.total_len {
            return Err(shape_err("layout length does not match inner axis"));
        }
        if self.codes.len() != self.rows * self.cols {
            return Err(shape_err("code count does not match shape"));
        }
        let n = self.num_partitions();
        if self.mins.len() != n || self.scales.len() != n {
            return Err(shape_err("metadata count does not match partitions"));
        }
        if let Some(sums) = &self.sums {
            if sums.len() != n {
                return Err(shape_err("sum count does not match partitions"));
            }
        }
        if self.scales.iter().chain(&self.mins).any(|v| !v.is_finite())
            || self.scales.iter().any(|s| s.to_f32() < 0.0)
        {
            return Err(Error::Layout("invalid partition metadata".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn mins(&self) -> &[f16] {
        &self.mins
    }

    pub fn scales(&self) -> &[f16] {
        &self.scales
    }

    pub fn sums(&self) -> Option<&PartitionSums> {
        self.sums.as_ref()
    }

    pub fn set_sums(&mut self, sums: PartitionSums) -> Result<()> {
        if sums.len() != self.num_partitions() {
            return Err(shape_err("sum count does not match partitions"));
        }
        self.sums = Some(sums);
        Ok(())
    }

    pub fn clear_sums(&mut self) {
        self.sums = None;
    }

    /// Rows for `AlongRows`, columns for `AlongCols`.
    pub fn lines(&self) -> usize {
        match self.layout.axis {
            PartitionAxis::AlongRows => self.rows,
            PartitionAxis::AlongCols => self.cols,
        }
    }

    pub fn num_partitions(&self) -> usize {
        self.lines() * self.layout.partitions_per_line()
    }

    /// Metadata slot of partition `k` on `line`. Row-partitioned tensors are
    /// line-major, column-partitioned tensors partition-major, so appending
    /// rows to either only appends metadata.
    #[inline]
    pub fn meta_index(&self, line: usize, k: usize) -> usize {
        match self.layout.axis {
            PartitionAxis::AlongRows => line * self.layout.partitions_per_line() + k,
            PartitionAxis::AlongCols => k * self.cols + line,
        }
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> u8 {
        self.codes.get(r * self.cols + c)
    }

    /// Logical row-major codes, one byte each.
    pub fn widen_codes(&self) -> Vec<u8> {
        self.codes.unpack()
    }

    pub fn min_scale(&self, line: usize, k: usize) -> (f32, f32) {
        let idx = self.meta_index(line, k);
        (self.mins[idx].to_f32(), self.scales[idx].to_f32())
    }

    /// Logical transpose; the partition axis flips with it so partitions
    /// keep their elements.
    pub fn transpose(&self) -> QuantizedTensor {
        let mut codes = PackedCodes::new(self.bits);
        for c in 0..self.cols {
            for r in 0..self.rows {
                codes.push(self.code(r, c));
            }
        }
        let axis = match self.layout.axis {
            PartitionAxis::AlongRows => PartitionAxis::AlongCols,
            PartitionAxis::AlongCols => PartitionAxis::AlongRows,
        };
        let mut out = QuantizedTensor {
            rows: self.cols,
            cols: self.rows,
            bits: self.bits,
            layout: self.layout.with_axis(axis),
            codes,
            mins: self.mins.clone(),
            scales: self.scales.clone(),
            sums: None,
        };
        let ppl = self.layout.partitions_per_line();
        let mut sums = self.sums.as_ref().map(|s| s.values().to_vec());
        for line in 0..self.lines() {
            for k in 0..ppl {
                let (src, dst) = (self.meta_index(line, k), out.meta_index(line, k));
                out.mins[dst] = self.mins[src];
                out.scales[dst] = self.scales[src];
                if let (Some(dst_sums), Some(src_sums)) = (sums.as_mut(), self.sums.as_ref()) {
                    dst_sums[dst] = src_sums.values()[src];
                }
            }
        }
        out.sums = sums.map(|v| PartitionSums::new(v, self.sums.as_ref().unwrap().width()));
        out
    }

    /// Appends the rows of `other` below `self`. Row-partitioned tensors
    /// need identical column layouts; column-partitioned tensors need the
    /// same partition size and no ragged tail on `self`, so `other`'s
    /// partitions start on a boundary.
    pub fn append_rows(&mut self, other: &QuantizedTensor) -> Result<()> {
        if self.layout.axis != other.layout.axis {
            return Err(Error::Layout(
                "appended rows use a different partition axis".into(),
            ));
        }
        if self.cols != other.cols || self.bits != other.bits {
            return Err(shape_err("appended rows do not share the column layout"));
        }
        let layout = match self.layout.axis {
            PartitionAxis::AlongRows => {
                if self.layout != other.layout {
                    return Err(shape_err("appended rows do not share the column layout"));
                }
                self.layout
            }
            PartitionAxis::AlongCols => {
                if self.layout.partition_size != other.layout.partition_size {
                    return Err(Error::Misaligned("partition sizes differ".into()));
                }
                if self.layout.tail_len != 0 {
                    return Err(Error::Misaligned(
                        "cannot append after a ragged partition".into(),
                    ));
                }
                PartitionLayout::new(
                    PartitionAxis::AlongCols,
                    self.layout.partition_size,
                    self.layout.total_len + other.layout.total_len,
                )?
            }
        };
        match (&mut self.sums, &other.sums) {
            (Some(a), Some(b)) => a.extend(b)?,
            (None, None) => {}
            _ => return Err(Error::MissingSums),
        }
        self.codes.extend(&other.codes);
        self.mins.extend_from_slice(&other.mins);
        self.scales.extend_from_slice(&other.scales);
        self.rows += other.rows;
        self.layout = layout;
        Ok(())
    }

    /// An empty row-partitioned tensor with the given column count.
    pub fn empty_rows(cols: usize, partition_size: usize, bits: BitWidth) -> Result<Self> {
        Ok(Self {
            rows: 0,
            cols,
            bits,
            layout: PartitionLayout::new(PartitionAxis::AlongRows, partition_size, cols)?,
            codes: PackedCodes::new(bits),
            mins: Vec::new(),
            scales: Vec::new(),
            sums: None,
        })
    }

    pub fn packed_bytes(&self) -> usize {
        self.codes.as_bytes().len()
    }
}

/// Quantizes `matrix` partition by partition.
pub fn quantize(
    matrix: &Matrix,
    layout: PartitionLayout,
    bits: BitWidth,
    mode: RoundingMode,
) -> Result<QuantizedTensor> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let (lines, inner) = match layout.axis {
        PartitionAxis::AlongRows => (rows, cols),
        PartitionAxis::AlongCols => (cols, rows),
    };
    if inner != layout.total_len {
        return Err(shape_err(format!(
            "layout spans {} elements but the inner axis has {inner}",
            layout.total_len
        )));
    }
    let ppl = layout.partitions_per_line();
    let mut codes = vec![0u8; rows * cols];
    let mut mins = vec![f16::ZERO; lines * ppl];
    let mut scales = vec![f16::ZERO; lines * ppl];
    let max_code = bits.max_code();
    let mut buf = Vec::with_capacity(layout.partition_size.min(inner));

    for line in 0..lines {
        for k in 0..ppl {
            let range = layout.partition_range(k);
            buf.clear();
            let flat = |pos: usize| match layout.axis {
                PartitionAxis::AlongRows => line * cols + pos,
                PartitionAxis::AlongCols => pos * cols + line,
            };
            buf.extend(range.clone().map(|pos| matrix.as_slice()[flat(pos)]));
            let (min, max) = min_max(&buf)?;
            let (m, s) = storage_metadata(min, max, bits)?;
            let meta = match layout.axis {
                PartitionAxis::AlongRows => line * ppl + k,
                PartitionAxis::AlongCols => k * cols + line,
            };
            mins[meta] = m;
            scales[meta] = s;
            if s.to_f32() == 0.0 {
                continue;
            }
            let (m, s) = (m.to_f64(), s.to_f64());
            for (pos, &x) in range.zip(&buf) {
                let idx = flat(pos);
                // nearest rounding already lands the maximum on the top code
                // unless the scale is too coarse to reach it within s/2
                let pinned = x == max && matches!(mode, RoundingMode::Stochastic(_));
                let code = if pinned {
                    max_code
                } else {
                    let t = (f64::from(x) - m) / s;
                    let r = match mode {
                        RoundingMode::Nearest => t.round() as i64,
                        RoundingMode::Stochastic(seed) => {
                            stochastic_round(t, counter_uniform(seed, idx as u64))
                        }
                    };
                    r.clamp(0, i64::from(max_code)) as u8
                };
                codes[idx] = code;
            }
        }
    }

    Ok(QuantizedTensor {
        rows,
        cols,
        bits,
        layout,
        codes: PackedCodes::from_codes(&codes, bits)?,
        mins,
        scales,
        sums: None,
    })
}

/// `s * x' + m` for every element.
pub fn dequantize(qt: &QuantizedTensor) -> Matrix {
    let mut out = Matrix::zeros(qt.rows, qt.cols);
    let p = qt.layout.partition_size;
    for r in 0..qt.rows {
        for c in 0..qt.cols {
            let (line, pos) = match qt.layout.axis {
                PartitionAxis::AlongRows => (r, c),
                PartitionAxis::AlongCols => (c, r),
            };
            let (m, s) = qt.min_scale(line, pos / p);
            out.set(r, c, s * f32::from(qt.code(r, c)) + m);
        }
    }
    out
}
