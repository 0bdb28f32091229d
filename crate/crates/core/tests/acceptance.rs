//! Acceptance gate. Prints one line per criterion and exits nonzero if any
//! of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use homokv::attention::{
    decode_attention, prefill_attention, random_embeddings, AttentionConfig, ExecutionMode,
    KvStore, ModelWeights,
};
use homokv::disagg::{
    generate_workload, run_simulation, write_request_csv, write_summary_csv, ClusterConfig,
    LengthDistribution, RequestStatus, SimReport, Workload,
};
use homokv::homomm::{approximation_cost, homomorphic_matmul, PartitionSums, SumsSource};
use homokv::kvcache::quantize_head_kv;
use homokv::quant::{dequantize, quantize};
use homokv::reference::{compare, dequantize_then_multiply, exact_attention};
use homokv::wire::{decode_kv_frame, encode_kv_frame, raw_kv_bytes, FrameDims};
use homokv::{
    BitWidth, CacheConfig, CostCounters, KVCache, Matrix, PartitionAxis, PartitionLayout,
    QuantizedTensor, RoundingMode, SequenceKv, VTailPolicy,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

const PIS: [usize; 4] = [16, 32, 64, 128];
const BITS: [BitWidth; 2] = [BitWidth::Two, BitWidth::Eight];

fn operands(
    m: usize,
    z: usize,
    n: usize,
    pi: usize,
    bits: BitWidth,
    rng: &mut ChaCha8Rng,
) -> (QuantizedTensor, QuantizedTensor) {
    let a = uniform(m, z, -4.0, 4.0, rng);
    let b = uniform(z, n, -4.0, 4.0, rng);
    let mode = RoundingMode::Stochastic(rng.random());
    let qa = quantize(
        &a,
        PartitionLayout::new(PartitionAxis::AlongRows, pi, z).unwrap(),
        bits,
        mode.fork(1),
    )
    .unwrap();
    let qb = quantize(
        &b,
        PartitionLayout::new(PartitionAxis::AlongCols, pi, z).unwrap(),
        bits,
        mode.fork(2),
    )
    .unwrap();
    (qa, qb)
}

fn matmul_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let cases = 1024;
    for case in 0..cases {
        let pi = PIS[case % 4];
        let bits = BITS[(case / 4) % 2];
        // every eighth case takes the largest shape
        let (m, z, n) = if case % 64 < 8 {
            (512, 128, 512)
        } else {
            (
                rng.random_range(1..=512),
                rng.random_range(1..=128),
                rng.random_range(1..=512),
            )
        };
        let (qa, qb) = operands(m, z, n, pi, bits, &mut rng);
        let counters = CostCounters::new();
        let got = homomorphic_matmul(&qa, &qb, SumsSource::Fresh, &counters).map_err(fail)?;
        let want = dequantize_then_multiply(&qa, &qb, &counters).map_err(fail)?;
        let r = compare(&got, &want).map_err(fail)?;
        ensure(r.max_rel_error <= 1e-3, || {
            format!(
                "{m}x{z}x{n} pi={pi} bits={}: rel error {:e}",
                bits.bits(),
                r.max_rel_error
            )
        })?;
        worst = worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{cases} cases, worst relative error {worst:.2e}, {secs:.1}s"
    ))
}

fn attention_config(
    layers: usize,
    heads: usize,
    d: usize,
    embed: usize,
    pi: usize,
    bits: BitWidth,
    seed: u64,
) -> AttentionConfig {
    AttentionConfig {
        cache: CacheConfig {
            num_layers: layers,
            num_heads: heads,
            head_dim: d,
            partition_size: pi,
            key_bits: bits,
            value_bits: bits,
            ..CacheConfig::default()
        },
        embed_dim: embed,
        rounding: RoundingMode::Stochastic(seed),
    }
}

/// Approximation and dequantization work of one decode step at cache
/// length `l_kv` (after the new token is appended).
fn one_decode_step(mode: ExecutionMode, l_kv: usize) -> Result<CostCounters, String> {
    let config = attention_config(1, 1, 128, 128, 64, BitWidth::Two, 5);
    let weights = ModelWeights::seeded(&config, 5);
    let e = random_embeddings(l_kv, 128, 6);
    let pre =
        prefill_attention(&e.slice_rows(0..l_kv - 1), &weights, &config, mode).map_err(fail)?;
    let mut store = KvStore::new(mode, &config.cache).map_err(fail)?;
    store
        .ingest(0, pre.kv, config.rounding, &CostCounters::new())
        .map_err(fail)?;
    let counters = CostCounters::new();
    decode_attention(e.row(l_kv - 1), &mut store, 0, &weights, &config, &counters).map_err(fail)?;
    Ok(counters)
}

fn cost_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = 200;
    for case in 0..shapes {
        let (m, z, n) = (
            rng.random_range(1..=64),
            rng.random_range(1..=256),
            rng.random_range(1..=64),
        );
        let (qa, qb) = operands(m, z, n, PIS[case % 4], BITS[case % 2], &mut rng);
        let (m64, n64, z64) = (m as u64, n as u64, z as u64);
        let fresh = CostCounters::new();
        homomorphic_matmul(&qa, &qb, SumsSource::Fresh, &fresh).map_err(fail)?;
        let got = fresh.snapshot().approximation_ops;
        let want = 9 * m64 * n64 + m64 * z64 + n64 * z64;
        ensure(
            got == want && want == approximation_cost(m64, n64, z64, false),
            || format!("fresh {m}x{z}x{n}: {got} != {want}"),
        )?;
        let sums = PartitionSums::of(&qb);
        let cached = CostCounters::new();
        homomorphic_matmul(&qa, &qb, SumsSource::Cached(&sums), &cached).map_err(fail)?;
        let got = cached.snapshot().approximation_ops;
        let want = 9 * m64 * n64 + m64 * z64;
        ensure(got == want, || {
            format!("cached {m}x{z}x{n}: {got} != {want}")
        })?;
    }
    let l_kv = 1000u64;
    let hack = one_decode_step(ExecutionMode::Hack, l_kv as usize)?.snapshot();
    ensure(
        hack.approximation_ops == 11280 && hack.approximation_ops == 10 * (128 + l_kv),
        || format!("decode step approximation ops {}", hack.approximation_ops),
    )?;
    ensure(hack.dequantization_ops == 0, || {
        format!("hack decode dequantized {}", hack.dequantization_ops)
    })?;
    let base = one_decode_step(ExecutionMode::Baseline, l_kv as usize)?.snapshot();
    ensure(
        base.dequantization_ops == 512_000 && base.dequantization_ops == 4 * 128 * l_kv,
        || format!("baseline dequantization ops {}", base.dequantization_ops),
    )?;
    Ok(format!(
        "{shapes} shapes exact; decode step {} approximation ops, baseline {} dequantization ops",
        hack.approximation_ops, base.dequantization_ops
    ))
}

fn head_config(d: usize, pi: usize) -> CacheConfig {
    CacheConfig {
        head_dim: d,
        partition_size: pi,
        ..CacheConfig::default()
    }
}

fn random_sequence(config: &CacheConfig, len: usize, rng: &mut ChaCha8Rng) -> SequenceKv {
    let counters = CostCounters::new();
    let heads = (0..config.heads_total())
        .map(|_| {
            let k = uniform(len, config.head_dim, -3.0, 3.0, rng);
            let v = uniform(len, config.head_dim, -3.0, 3.0, rng);
            quantize_head_kv(
                config,
                &k,
                &v,
                RoundingMode::Stochastic(rng.random()),
                &counters,
            )
            .unwrap()
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

fn compression() -> Outcome {
    let mut worst = 0.0f64;
    for d in [64, 128] {
        for l in 1024..=8192 {
            let dims = FrameDims {
                num_layers: 1,
                num_heads: 1,
                head_dim: d,
                partition_size: 64,
                key_bits: BitWidth::Two,
                value_bits: BitWidth::Two,
                prompt_len: l,
                v_tail_len: 0,
            };
            let ratio = dims.frame_size() as f64 / raw_kv_bytes(1, 1, d, l) as f64;
            ensure(ratio <= 0.17, || format!("formula d={d} L={l}: {ratio:.4}"))?;
            worst = worst.max(ratio);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = head_config(128, 64);
    let mut measured = Vec::new();
    for l in [1024, 1025, 1087, 1500, 2048, 3001, 4096] {
        let kv = random_sequence(&config, l, &mut rng);
        let bytes = encode_kv_frame(&kv, 1, 0).map_err(fail)?;
        let ratio = bytes.len() as f64 / raw_kv_bytes(1, 1, 128, l) as f64;
        ensure(ratio <= 0.17, || format!("encoded L={l}: {ratio:.4}"))?;
        worst = worst.max(ratio);
        measured.push(format!("{l}:{ratio:.4}"));
    }
    Ok(format!(
        "worst ratio {worst:.4}; encoded {}",
        measured.join(" ")
    ))
}

/// Everything of a head that must not change once committed.
fn committed_state(
    cache: &KVCache,
    seq: u64,
) -> (Vec<u8>, Vec<u16>, Vec<u32>, Vec<QuantizedTensor>) {
    let h = cache.head(seq, 0, 0).unwrap();
    let k = h.k();
    let mut meta: Vec<u16> = k.mins().iter().map(|m| m.to_bits()).collect();
    meta.extend(k.scales().iter().map(|s| s.to_bits()));
    let sums = k.sums().map(|s| s.values().to_vec()).unwrap_or_default();
    (k.codes().unpack(), meta, sums, h.v_chunks().to_vec())
}

fn append_stability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sequences = 10_000;
    let mut appends = 0usize;
    let mut flushes = 0usize;
    for seq in 0..sequences {
        let pi = rng.random_range(2..=16);
        let d = [4, 8, 12, 16][rng.random_range(0..4)];
        let config = CacheConfig {
            head_dim: d,
            partition_size: pi,
            key_bits: BITS[rng.random_range(0..2)],
            value_bits: BITS[rng.random_range(0..2)],
            v_tail: if rng.random() {
                VTailPolicy::Quantized
            } else {
                VTailPolicy::FullPrecision
            },
            require_aligned_partitions: false,
            ..CacheConfig::default()
        };
        let mut cache = KVCache::new(config).map_err(fail)?;
        let prompt = rng.random_range(1..=3 * pi);
        let kv = random_sequence(&config, prompt, &mut rng);
        cache.ingest_prefill(seq, kv).map_err(fail)?;
        let mode = RoundingMode::Stochastic(rng.random());
        for step in 0..rng.random_range(1..=3 * pi) {
            let (k_old, meta_old, sums_old, v_old) = committed_state(&cache, seq);
            let k_row: Vec<f32> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v_row: Vec<f32> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let out = cache
                .append_decode_token(seq, 0, 0, &k_row, &v_row, mode)
                .map_err(fail)?;
            appends += 1;
            flushes += out.flushed as usize;
            let (k_new, meta_new, sums_new, v_new) = committed_state(&cache, seq);
            let meta_half = meta_old.len() / 2;
            let stable = k_new.starts_with(&k_old)
                && meta_new[..meta_half] == meta_old[..meta_half]
                && meta_new[meta_new.len() / 2..][..meta_half] == meta_old[meta_half..]
                && sums_new.starts_with(&sums_old)
                && v_new.len() >= v_old.len()
                && v_new[..v_old.len()] == v_old[..];
            ensure(stable, || {
                format!("sequence {seq} step {step}: committed state changed")
            })?;
            let buffered = cache.head(seq, 0, 0).unwrap().buffer().count();
            ensure(buffered < pi, || {
                format!("sequence {seq} step {step}: buffer holds {buffered} >= {pi}")
            })?;
        }
        cache.remove(seq);
    }
    Ok(format!(
        "{sequences} sequences, {appends} appends, {flushes} flushes"
    ))
}

fn rounding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut worst_sigmas = 0.0f64;
    for t in 0..100 {
        let bits = BITS[t % 2];
        let top = bits.max_code() as f32;
        // min 0 and max `top` pin the scale to exactly 1
        let target: f32 = rng.random_range(0.01..top - 0.01);
        let mut row = vec![target; draws + 2];
        row[0] = 0.0;
        row[1] = top;
        let m = Matrix::from_vec(1, draws + 2, row).unwrap();
        let layout = PartitionLayout::new(PartitionAxis::AlongRows, draws + 2, draws + 2).unwrap();
        let qt =
            quantize(&m, layout, bits, RoundingMode::Stochastic(rng.random())).map_err(fail)?;
        ensure(qt.min_scale(0, 0) == (0.0, 1.0), || {
            format!("unexpected metadata {:?}", qt.min_scale(0, 0))
        })?;
        let sum: u64 = (2..draws + 2).map(|c| qt.code(0, c) as u64).sum();
        let mean = sum as f64 / draws as f64;
        let x = target as f64;
        let p = x - x.floor();
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let off = (mean - x).abs() / sigma;
        ensure(off <= 4.0, || {
            format!("target {x}: mean {mean} is {off:.2} sigma away")
        })?;
        worst_sigmas = worst_sigmas.max(off);
    }

    let mut elements = 0usize;
    for case in 0..200 {
        let rows = rng.random_range(1..=40);
        let cols = rng.random_range(1..=150);
        let axis = if case % 2 == 0 {
            PartitionAxis::AlongRows
        } else {
            PartitionAxis::AlongCols
        };
        let inner = if axis == PartitionAxis::AlongRows {
            cols
        } else {
            rows
        };
        let m = uniform(rows, cols, -50.0, 50.0, &mut rng);
        let layout = PartitionLayout::new(axis, PIS[case % 4], inner).unwrap();
        let qt = quantize(&m, layout, BITS[case % 2], RoundingMode::Nearest).map_err(fail)?;
        let back = dequantize(&qt);
        for r in 0..rows {
            for c in 0..cols {
                let (line, pos) = match axis {
                    PartitionAxis::AlongRows => (r, c),
                    PartitionAxis::AlongCols => (c, r),
                };
                let (_, scale) = qt.min_scale(line, pos / layout.partition_size());
                let err = (back.get(r, c) - m.get(r, c)).abs();
                // allowance for the f32 reconstruction itself
                let slack = 4.0 * f32::EPSILON * m.get(r, c).abs().max(scale);
                ensure(err <= scale / 2.0 + slack, || {
                    format!("({r},{c}) error {err} > scale/2 {}", scale / 2.0)
                })?;
                elements += 1;
            }
        }
    }
    Ok(format!(
        "100 targets within {worst_sigmas:.2} sigma; {elements} nearest elements within scale/2"
    ))
}

/// Prefill over the first `prompt_len` rows, then teacher-forced decode of
/// the rest.
fn run_attention(
    e: &Matrix,
    prompt_len: usize,
    weights: &ModelWeights,
    config: &AttentionConfig,
    mode: ExecutionMode,
) -> Result<(Matrix, Matrix), String> {
    let pre =
        prefill_attention(&e.slice_rows(0..prompt_len), weights, config, mode).map_err(fail)?;
    let prefill_rows = pre.output.rows.clone();
    let mut all = pre.output.rows;
    let mut store = KvStore::new(mode, &config.cache).map_err(fail)?;
    let counters = CostCounters::new();
    store
        .ingest(0, pre.kv, config.rounding, &counters)
        .map_err(fail)?;
    for r in prompt_len..e.rows() {
        let row =
            decode_attention(e.row(r), &mut store, 0, weights, config, &counters).map_err(fail)?;
        all.push_row(&row).map_err(fail)?;
    }
    Ok((prefill_rows, all))
}

fn attention_oracle() -> Outcome {
    let config = attention_config(2, 2, 64, 48, 64, BitWidth::Two, 6);
    let weights = ModelWeights::seeded(&config, 6);
    let (prompt, steps) = (64, 256);
    let e = random_embeddings(prompt + steps, 48, 7);
    let exact = exact_attention(&e, &weights, &config).map_err(fail)?;
    let (pre, all) = run_attention(&e, prompt, &weights, &config, ExecutionMode::Bypass)?;
    let pre_err = compare(&pre, &exact.slice_rows(0..prompt))
        .map_err(fail)?
        .max_abs_error;
    ensure(pre_err <= 1e-5, || {
        format!("bypass prefill error {pre_err:e}")
    })?;
    let all_err = compare(&all, &exact).map_err(fail)?.max_abs_error;
    ensure(all_err <= 1e-4, || {
        format!("bypass error after {steps} steps {all_err:e}")
    })?;

    let seeds = 20u64;
    let pis = [128, 64, 32];
    let mut mean = [[0.0f64; 3]; 2];
    for seed in 0..seeds {
        let base = attention_config(1, 2, 128, 128, 64, BitWidth::Two, seed);
        let weights = ModelWeights::seeded(&base, 100 + seed);
        let e = random_embeddings(256 + 16, 128, 200 + seed);
        let exact = exact_attention(&e, &weights, &base).map_err(fail)?;
        for (bi, bits) in BITS.into_iter().enumerate() {
            for (pj, &pi) in pis.iter().enumerate() {
                let config = attention_config(1, 2, 128, 128, pi, bits, seed);
                let (_, all) = run_attention(&e, 256, &weights, &config, ExecutionMode::Hack)?;
                mean[bi][pj] += compare(&all, &exact).map_err(fail)?.rms_error / seeds as f64;
            }
        }
    }
    for pj in 0..3 {
        ensure(mean[0][pj] > mean[1][pj], || {
            format!(
                "pi={}: 2-bit {:.4} not above 8-bit {:.4}",
                pis[pj], mean[0][pj], mean[1][pj]
            )
        })?;
    }
    ensure(mean[0][1] <= mean[0][0] && mean[0][2] <= mean[0][1], || {
        format!("2-bit error by pi 128/64/32: {:.4?}", mean[0])
    })?;
    Ok(format!(
        "bypass {pre_err:.1e} prefill, {all_err:.1e} after {steps} steps; rms by pi 128/64/32: 2-bit {:.4?}, 8-bit {:.4?}",
        mean[0], mean[1]
    ))
}

fn sim_config() -> AttentionConfig {
    attention_config(1, 1, 64, 64, 64, BitWidth::Two, 8)
}

fn hundred_requests() -> Workload {
    let lengths = LengthDistribution::Uniform {
        prompt: 1024..=1280,
        output: 2..=6,
    };
    let mut w = generate_workload(10.0, 20.0, &lengths, 8).unwrap();
    w.requests.truncate(100);
    w
}

fn end_to_end() -> Outcome {
    let w = hundred_requests();
    ensure(w.len() == 100, || format!("only {} requests", w.len()))?;
    let config = sim_config();
    let cluster = ClusterConfig::default();
    let hack = run_simulation(&w, &cluster, &config, ExecutionMode::Hack, 8).map_err(fail)?;
    let base = run_simulation(&w, &cluster, &config, ExecutionMode::Baseline, 8).map_err(fail)?;
    ensure(hack.summary.dequantization_ops == 0, || {
        format!("hack dequantized {}", hack.summary.dequantization_ops)
    })?;
    ensure(
        hack.summary.completed == 100 && base.summary.completed == 100,
        || "not every request completed".into(),
    )?;
    let d = config.cache.head_dim as u64;
    let heads = config.cache.heads_total() as u64;
    let mut total = 0u64;
    for (r, c) in w.requests.iter().zip(&base.counters) {
        let want: u64 = (1..=r.output_len as u64)
            .map(|s| 4 * d * (r.prompt_len as u64 + s) * heads)
            .sum();
        ensure(c.total().dequantization_ops == want, || {
            format!(
                "request {}: {} != {want}",
                r.request_id,
                c.total().dequantization_ops
            )
        })?;
        total += want;
    }
    ensure(base.summary.dequantization_ops == total, || {
        format!(
            "baseline total {} != {total}",
            base.summary.dequantization_ops
        )
    })?;
    let ratio = hack.summary.bytes_sent as f64 / base.summary.bytes_sent as f64;
    ensure(ratio <= 0.17, || format!("bytes ratio {ratio:.4}"))?;
    Ok(format!(
        "100 requests, hack dequantization 0, baseline {total} exact, bytes ratio {ratio:.4}"
    ))
}

fn wire_round_trip() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        (1usize..3, 1usize..3, 1usize..40, 1usize..70, 1usize..200),
        (any::<bool>(), any::<bool>(), any::<bool>()),
        any::<u64>(),
        any::<prop::sample::Index>(),
    );
    let flips = std::cell::Cell::new(0usize);
    let result = runner.run(
        &strategy,
        |((layers, heads, d, pi, len), (eight_k, eight_v, full_tail), seed, flip)| {
            let config = CacheConfig {
                num_layers: layers,
                num_heads: heads,
                head_dim: d,
                partition_size: pi,
                key_bits: if eight_k {
                    BitWidth::Eight
                } else {
                    BitWidth::Two
                },
                value_bits: if eight_v {
                    BitWidth::Eight
                } else {
                    BitWidth::Two
                },
                v_tail: if full_tail {
                    VTailPolicy::FullPrecision
                } else {
                    VTailPolicy::Quantized
                },
                require_aligned_partitions: false,
                ..CacheConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kv = random_sequence(&config, len, &mut rng);
            let bytes = encode_kv_frame(&kv, seed, seed as u32)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let (back, id, token) =
                decode_kv_frame(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!((id, token), (seed, seed as u32));
            prop_assert_eq!(&back, &kv);
            let again = encode_kv_frame(&back, id, token)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&again, &bytes);
            let bit = flip.index(bytes.len() * 8);
            let mut corrupt = bytes.clone();
            corrupt[bit / 8] ^= 1 << (bit % 8);
            prop_assert!(
                decode_kv_frame(&corrupt).is_err(),
                "flip of bit {} accepted",
                bit
            );
            flips.set(flips.get() + 1);
            Ok(())
        },
    );
    result.map_err(fail)?;
    Ok(format!(
        "1000 round trips, {} single-bit flips rejected",
        flips.get()
    ))
}

fn csv_bytes(report: &SimReport) -> (Vec<u8>, Vec<u8>) {
    let mut requests = Vec::new();
    write_request_csv(&mut requests, &report.requests).unwrap();
    let mut summary = Vec::new();
    write_summary_csv(&mut summary, std::slice::from_ref(&report.summary)).unwrap();
    (requests, summary)
}

fn determinism() -> Outcome {
    let lengths = LengthDistribution::Uniform {
        prompt: 64..=300,
        output: 1..=12,
    };
    let w = generate_workload(6.0, 5.0, &lengths, 9).map_err(fail)?;
    let config = attention_config(2, 2, 32, 32, 16, BitWidth::Two, 9);
    let cluster = ClusterConfig {
        prefill_instances: 2,
        decode_instances: 3,
        ..ClusterConfig::default()
    };
    for mode in [ExecutionMode::Hack, ExecutionMode::Baseline] {
        let a = run_simulation(&w, &cluster, &config, mode, 9).map_err(fail)?;
        let b = run_simulation(&w, &cluster, &config, mode, 9).map_err(fail)?;
        ensure(csv_bytes(&a) == csv_bytes(&b), || {
            format!("{mode}: CSV output differs between identical runs")
        })?;
        let mut ids: Vec<u64> = a.requests.iter().map(|m| m.request_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let want: Vec<u64> = w.requests.iter().map(|r| r.request_id).collect();
        ensure(ids == want && a.requests.len() == w.len(), || {
            format!("{mode}: requests not reported exactly once")
        })?;
        let mut bytes = 0u64;
        for m in &a.requests {
            let phases = [
                m.prefill_time,
                m.quantize_time,
                m.comm_time,
                m.approx_or_dequant_time,
                m.decode_time,
            ];
            let parts: f64 = phases.iter().sum();
            ensure(
                m.status == RequestStatus::Completed
                    && phases.iter().all(|t| t.is_finite() && *t >= 0.0)
                    && m.prefill_time > 0.0
                    && m.comm_time > 0.0
                    && m.decode_time > 0.0
                    && m.jct >= parts - 1e-12
                    && m.bytes_sent > 0,
                || {
                    format!(
                        "{mode}: request {} phases not accounted: {m:?}",
                        m.request_id
                    )
                },
            )?;
            bytes += m.bytes_sent;
        }
        let s = &a.summary;
        ensure(
            s.requests == w.len() && s.completed == w.len() && s.bytes_sent == bytes,
            || format!("{mode}: summary does not add up"),
        )?;
    }
    Ok(format!(
        "{} requests, identical CSVs, every request accounted once",
        w.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            "homomorphic product matches dequantize-first",
            matmul_identity,
        ),
        ("cost counters follow the closed form", cost_model),
        ("frame size at most 17% of raw KV", compression),
        ("appends never requantize committed data", append_stability),
        (
            "stochastic rounding unbiased, nearest within scale/2",
            rounding,
        ),
        ("attention against the exact oracle", attention_oracle),
        ("dequantization-free end to end", end_to_end),
        ("wire frame round trip and corruption", wire_round_trip),
        ("simulator determinism and conservation", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
