use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use homokv::attention::{decode_attention, ExecutionMode, PrefillKv};
use homokv::homomm::{homomorphic_matmul, SumsSource};
use homokv::reference::dequantize_then_multiply;
use homokv::wire::{decode_kv_frame, encode_kv_frame};
use homokv::{BitWidth, CostCounters};
use homokv_bench::{matmul_operands, DecodeFixture};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_128x512x128");
    for pi in [32, 64, 128] {
        let (a, b) = matmul_operands(128, 512, 128, pi, BitWidth::Two, 3).unwrap();
        let counters = CostCounters::new();
        g.bench_with_input(BenchmarkId::new("homomorphic", pi), &pi, |bn, _| {
            bn.iter(|| homomorphic_matmul(black_box(&a), &b, SumsSource::Fresh, &counters).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dequantize_first", pi), &pi, |bn, _| {
            bn.iter(|| dequantize_then_multiply(black_box(&a), &b, &counters).unwrap())
        });
    }
    g.finish();
}

fn decode_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_step_1024");
    for mode in [
        ExecutionMode::Hack,
        ExecutionMode::Baseline,
        ExecutionMode::Bypass,
    ] {
        let f = DecodeFixture::new(mode, 1024, 64, BitWidth::Two).unwrap();
        g.bench_function(mode.to_string(), |bn| {
            bn.iter_batched(
                || f.store().unwrap(),
                |mut store| {
                    let counters = CostCounters::new();
                    decode_attention(
                        &f.next_token,
                        &mut store,
                        0,
                        &f.weights,
                        &f.config,
                        &counters,
                    )
                    .unwrap()
                },
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn frame(c: &mut Criterion) {
    let f = DecodeFixture::new(ExecutionMode::Hack, 4096, 64, BitWidth::Two).unwrap();
    let PrefillKv::Quantized(kv) = &f.prefill.kv else {
        unreachable!("hack prefill hands off quantized K/V")
    };
    let bytes = encode_kv_frame(kv, 0, f.prefill.first_token).unwrap();
    c.bench_function("frame_encode_4096", |bn| {
        bn.iter(|| encode_kv_frame(black_box(kv), 0, 0).unwrap())
    });
    c.bench_function("frame_decode_4096", |bn| {
        bn.iter(|| decode_kv_frame(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, matmul, decode_step, frame);
criterion_main!(benches);
