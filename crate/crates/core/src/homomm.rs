//! Matrix multiplication directly on quantized operands.
//!
//! For `C = A B` with `A` partitioned along its rows and `B` along its
//! columns, every aligned block of the inner axis contributes
//!
//! ```text
//! s_a s_b Σ a'b' + m_b s_a Σ a' + m_a s_b Σ b' + Z m_a m_b
//! ```
//!
//! so only the integer product `Σ a'b'` touches every element; the
//! correction needs per-partition code sums and the `(m, s)` metadata.
//! `Σ b'` can be cached alongside a stored operand (the KV cache does this)
//! so repeated products skip its recomputation.
//!
//! [`CostCounters`] tallies scalar operations with the closed-form model:
//! `2MZN` for the integer product and `9MN + MZ + NZ` for the correction,
//! dropping `NZ` when `Σ b'` comes from a cache. The model is charged once
//! per logical product regardless of how many partitions the inner axis has.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::quant::{BitWidth, PartitionAxis, QuantizedTensor};

/// Storage width of one cached partition sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SumWidth {
    U8,
    U16,
    U32,
}

impl SumWidth {
    /// A sum of `partition_size` codes of `bits` bits needs at most
    /// `bits + ceil(log2(partition_size))` bits; round that up to the next
    /// naturally aligned integer type.
    pub fn for_partition(bits: BitWidth, partition_size: usize) -> Self {
        let needed = bits.bits() + ceil_log2(partition_size);
        match needed {
            0..=8 => Self::U8,
            9..=16 => Self::U16,
            _ => Self::U32,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::U16 => 2,
            Self::U32 => 4,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }
}

pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Per-partition code sums, in the owning tensor's metadata order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSums {
    values: Vec<u32>,
    width: SumWidth,
}

impl PartitionSums {
    pub fn new(values: Vec<u32>, width: SumWidth) -> Self {
        Self { values, width }
    }

    /// Exact sums of `qt`'s codes, without touching any counter.
    pub fn of(qt: &QuantizedTensor) -> Self {
        let layout = qt.layout();
        let ppl = layout.partitions_per_line();
        let mut values = vec![0u32; qt.num_partitions()];
        for r in 0..qt.rows() {
            for c in 0..qt.cols() {
                let (line, pos) = match layout.axis() {
                    PartitionAxis::AlongRows => (r, c),
                    PartitionAxis::AlongCols => (c, r),
                };
                let k = pos / layout.partition_size();
                debug_assert!(k < ppl);
                values[qt.meta_index(line, k)] += u32::from(qt.code(r, c));
            }
        }
        Self {
            values,
            width: SumWidth::for_partition(qt.bits(), layout.partition_size()),
        }
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn width(&self) -> SumWidth {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn storage_bytes(&self) -> usize {
        self.values.len() * self.width.bytes()
    }

    pub(crate) fn extend(&mut self, other: &PartitionSums) -> Result<()> {
        if self.width != other.width {
            return Err(shape_err("partition sums of different widths"));
        }
        self.values.extend_from_slice(&other.values);
        Ok(())
    }
}

/// Monotone scalar-operation counters, safe to bump from several threads.
#[derive(Debug, Default)]
pub struct CostCounters {
    quantized_mac_ops: AtomicU64,
    approximation_ops: AtomicU64,
    dequantization_ops: AtomicU64,
    full_precision_mac_ops: AtomicU64,
    quantization_ops: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CounterSnapshot {
    pub quantized_mac_ops: u64,
    pub approximation_ops: u64,
    pub dequantization_ops: u64,
    pub full_precision_mac_ops: u64,
    /// Scalar work spent producing codes and metadata.
    pub quantization_ops: u64,
}

impl std::ops::Add for CounterSnapshot {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            quantized_mac_ops: self.quantized_mac_ops + o.quantized_mac_ops,
            approximation_ops: self.approximation_ops + o.approximation_ops,
            dequantization_ops: self.dequantization_ops + o.dequantization_ops,
            full_precision_mac_ops: self.full_precision_mac_ops + o.full_precision_mac_ops,
            quantization_ops: self.quantization_ops + o.quantization_ops,
        }
    }
}

impl std::ops::Sub for CounterSnapshot {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Self {
            quantized_mac_ops: self.quantized_mac_ops - o.quantized_mac_ops,
            approximation_ops: self.approximation_ops - o.approximation_ops,
            dequantization_ops: self.dequantization_ops - o.dequantization_ops,
            full_precision_mac_ops: self.full_precision_mac_ops - o.full_precision_mac_ops,
            quantization_ops: self.quantization_ops - o.quantization_ops,
        }
    }
}

impl CostCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_quantized_mac(&self, n: u64) {
        self.quantized_mac_ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_approximation(&self, n: u64) {
        self.approximation_ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_dequantization(&self, n: u64) {
        self.dequantization_ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_full_precision(&self, n: u64) {
        self.full_precision_mac_ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_quantization(&self, n: u64) {
        self.quantization_ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn merge(&self, s: CounterSnapshot) {
        self.add_quantized_mac(s.quantized_mac_ops);
        self.add_approximation(s.approximation_ops);
        self.add_dequantization(s.dequantization_ops);
        self.add_full_precision(s.full_precision_mac_ops);
        self.add_quantization(s.quantization_ops);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            quantized_mac_ops: self.quantized_mac_ops.load(Ordering::Relaxed),
            approximation_ops: self.approximation_ops.load(Ordering::Relaxed),
            dequantization_ops: self.dequantization_ops.load(Ordering::Relaxed),
            full_precision_mac_ops: self.full_precision_mac_ops.load(Ordering::Relaxed),
            quantization_ops: self.quantization_ops.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [
            &self.quantized_mac_ops,
            &self.approximation_ops,
            &self.dequantization_ops,
            &self.full_precision_mac_ops,
            &self.quantization_ops,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Sums of `qt`'s codes, charging one add per element to
/// `approximation_ops`.
pub fn column_sums(qt: &QuantizedTensor, counters: &CostCounters) -> PartitionSums {
    counters.add_approximation((qt.rows() * qt.cols()) as u64);
    PartitionSums::of(qt)
}

/// Closed-form correction cost of one `M x Z` by `Z x N` product.
pub fn approximation_cost(m: u64, n: u64, z: u64, sums_cached: bool) -> u64 {
    let base = 9 * m * n + m * z;
    if sums_cached {
        base
    } else {
        base + n * z
    }
}

/// Where the right operand's `Σ b'` comes from.
#[derive(Debug, Clone, Copy)]
pub enum SumsSource<'a> {
    /// Recompute from the codes (charged as `NZ`).
    Fresh,
    Cached(&'a PartitionSums),
    /// Use the sums attached to the operand; error if it has none.
    Stored,
}

#[derive(Debug, Clone, Copy)]
pub enum RightOperand<'a> {
    /// `Z x N`, partitioned along columns.
    Quantized {
        tensor: &'a QuantizedTensor,
        sums: SumsSource<'a>,
    },
    /// `N x Z`, partitioned along rows, used as its transpose.
    QuantizedTransposed {
        tensor: &'a QuantizedTensor,
        sums: SumsSource<'a>,
    },
    /// `Z x N` values kept in full precision. The left codes of this block
    /// are folded in through `s Σ a'b + m Σ b` per left partition.
    FullPrecision(&'a Matrix),
}

/// One aligned slice `A_k B_k` of the inner axis.
#[derive(Debug, Clone, Copy)]
pub struct Block<'a> {
    pub left: &'a QuantizedTensor,
    pub right: RightOperand<'a>,
}

impl RightOperand<'_> {
    fn shape(&self) -> (usize, usize) {
        match *self {
            Self::Quantized { tensor, .. } => (tensor.rows(), tensor.cols()),
            Self::QuantizedTransposed { tensor, .. } => (tensor.cols(), tensor.rows()),
            Self::FullPrecision(m) => (m.rows(), m.cols()),
        }
    }
}

/// `A B` for quantized `A` (`M x Z`, row-partitioned) and `B` (`Z x N`,
/// column-partitioned).
pub fn homomorphic_matmul(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    sums: SumsSource<'_>,
    counters: &CostCounters,
) -> Result<Matrix> {
    blocked_matmul(
        &[Block {
            left: a,
            right: RightOperand::Quantized { tensor: b, sums },
        }],
        counters,
    )
}

/// `A B^T` for quantized `A` (`M x Z`) and `B` (`N x Z`), both partitioned
/// along their rows.
pub fn homomorphic_matmul_transposed(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    sums: SumsSource<'_>,
    counters: &CostCounters,
) -> Result<Matrix> {
    blocked_matmul(
        &[Block {
            left: a,
            right: RightOperand::QuantizedTransposed { tensor: b, sums },
        }],
        counters,
    )
}

/// `Σ_k A_k B_k` over consecutive slices of the inner axis.
pub fn blocked_matmul(blocks: &[Block<'_>], counters: &CostCounters) -> Result<Matrix> {
    let first = blocks
        .first()
        .ok_or_else(|| shape_err("blocked product needs at least one block"))?;
    let m = first.left.rows();
    let n = first.right.shape().1;
    let mut out = Matrix::zeros(m, n);

    let mut z_total = 0u64;
    let mut fresh_nz = 0u64;
    let mut int_macs = 0u64;
    let mut fp_ops = 0u64;

    for block in blocks {
        let a = block.left;
        let (z, bn) = block.right.shape();
        if a.rows() != m || bn != n {
            return Err(shape_err(format!(
                "block {}x{} * {}x{} in a {m}x{n} product",
                a.rows(),
                a.cols(),
                z,
                bn
            )));
        }
        if a.cols() != z {
            return Err(shape_err(format!(
                "inner dimensions {} and {z} differ",
                a.cols()
            )));
        }
        if a.layout().axis() != PartitionAxis::AlongRows {
            return Err(Error::Misaligned(
                "left operand must be partitioned along its rows".into(),
            ));
        }
        z_total += z as u64;
        let (mu, nu, zu) = (m as u64, n as u64, z as u64);
        match block.right {
            RightOperand::Quantized { tensor, sums } => {
                if tensor.layout().axis() != PartitionAxis::AlongCols {
                    return Err(Error::Misaligned(
                        "right operand must be partitioned along its columns".into(),
                    ));
                }
                if matches!(sums, SumsSource::Fresh) {
                    fresh_nz += nu * zu;
                }
                int_macs += 2 * mu * zu * nu;
                quantized_block(a, tensor, false, sums, &mut out)?;
            }
            RightOperand::QuantizedTransposed { tensor, sums } => {
                if tensor.layout().axis() != PartitionAxis::AlongRows {
                    return Err(Error::Misaligned(
                        "transposed right operand must be partitioned along its rows".into(),
                    ));
                }
                if matches!(sums, SumsSource::Fresh) {
                    fresh_nz += nu * zu;
                }
                int_macs += 2 * mu * zu * nu;
                quantized_block(a, tensor, true, sums, &mut out)?;
            }
            RightOperand::FullPrecision(b) => {
                fp_ops += 2 * mu * zu * nu + nu * zu;
                full_precision_block(a, b, &mut out);
            }
        }
    }

    counters.add_quantized_mac(int_macs);
    counters.add_full_precision(fp_ops);
    counters.add_approximation(9 * (m * n) as u64 + m as u64 * z_total + fresh_nz);
    Ok(out)
}

fn quantized_block(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    transposed: bool,
    sums: SumsSource<'_>,
    out: &mut Matrix,
) -> Result<()> {
    let (la, lb) = (a.layout(), b.layout());
    if la.partition_size() != lb.partition_size() || la.total_len() != lb.total_len() {
        return Err(Error::Misaligned(format!(
            "partition size {} over {} vs {} over {}",
            la.partition_size(),
            la.total_len(),
            lb.partition_size(),
            lb.total_len()
        )));
    }
    let (m, z) = (a.rows(), a.cols());
    let n = out.cols();
    let ppl = la.partitions_per_line();

    let b_sums: Vec<u32> = match sums {
        SumsSource::Fresh => PartitionSums::of(b).values,
        SumsSource::Cached(s) => {
            if s.len() != b.num_partitions() {
                return Err(shape_err("cached sums do not match operand partitions"));
            }
            s.values.clone()
        }
        SumsSource::Stored => b.sums().ok_or(Error::MissingSums)?.values.clone(),
    };

    let a_codes = a.widen_codes();
    // Right-operand codes, one contiguous run of Z per output column.
    let b_codes: Vec<u8> = if transposed {
        b.widen_codes()
    } else {
        let raw = b.widen_codes();
        let mut t = vec![0u8; z * n];
        for zi in 0..z {
            for j in 0..n {
                t[j * z + zi] = raw[zi * n + j];
            }
        }
        t
    };

    let meta = |qt: &QuantizedTensor, line: usize, k: usize| {
        let (mn, s) = qt.min_scale(line, k);
        (mn, s)
    };
    let a_meta: Vec<(f32, f32)> = (0..m)
        .flat_map(|i| (0..ppl).map(move |k| (i, k)))
        .map(|(i, k)| meta(a, i, k))
        .collect();
    let a_sums: Vec<u32> = (0..m)
        .flat_map(|i| (0..ppl).map(move |k| (i, k)))
        .map(|(i, k)| {
            a_codes[i * z + la.partition_range(k).start..i * z + la.partition_range(k).end]
                .iter()
                .map(|&c| u32::from(c))
                .sum()
        })
        .collect();
    let b_meta: Vec<(f32, f32, u32)> = (0..n)
        .flat_map(|j| (0..ppl).map(move |k| (j, k)))
        .map(|(j, k)| {
            let (mn, s) = meta(b, j, k);
            (mn, s, b_sums[b.meta_index(j, k)])
        })
        .collect();

    for i in 0..m {
        let a_row = &a_codes[i * z..(i + 1) * z];
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_col = &b_codes[j * z..(j + 1) * z];
            let mut acc = 0.0f32;
            for k in 0..ppl {
                let range = la.partition_range(k);
                let dot: u32 = a_row[range.clone()]
                    .iter()
                    .zip(&b_col[range.clone()])
                    .map(|(&x, &y)| u32::from(x) * u32::from(y))
                    .sum();
                let (ma, sa) = a_meta[i * ppl + k];
                let sum_a = a_sums[i * ppl + k];
                let (mb, sb, sum_b) = b_meta[j * ppl + k];
                acc += sa * sb * dot as f32
                    + mb * sa * sum_a as f32
                    + ma * sb * sum_b as f32
                    + range.len() as f32 * ma * mb;
            }
            *o += acc;
        }
    }
    Ok(())
}

fn full_precision_block(a: &QuantizedTensor, b: &Matrix, out: &mut Matrix) {
    let la = a.layout();
    let ppl = la.partitions_per_line();
    let n = b.cols();
    let mut code_dot = vec![0.0f32; n];
    let mut b_sum = vec![0.0f32; n];
    for i in 0..a.rows() {
        let mut row_acc = vec![0.0f32; n];
        for k in 0..ppl {
            code_dot.iter_mut().for_each(|v| *v = 0.0);
            b_sum.iter_mut().for_each(|v| *v = 0.0);
            for zi in la.partition_range(k) {
                let code = f32::from(a.code(i, zi));
                for ((d, s), &bv) in code_dot.iter_mut().zip(b_sum.iter_mut()).zip(b.row(zi)) {
                    *d += code * bv;
                    *s += bv;
                }
            }
            let (ma, sa) = a.min_scale(i, k);
            for ((r, &d), &s) in row_acc.iter_mut().zip(&code_dot).zip(&b_sum) {
                *r += sa * d + ma * s;
            }
        }
        for (o, r) in out.row_mut(i).iter_mut().zip(row_acc) {
            *o += r;
        }
    }
}
