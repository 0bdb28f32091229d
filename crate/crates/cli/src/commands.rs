use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use homokv::attention::{
    decode_attention, prefill_attention, random_embeddings, AttentionConfig, ExecutionMode,
    KvStore, ModelWeights, PrefillKv,
};
use homokv::disagg::{
    generate_workload, load_trace, run_simulation, write_request_csv, write_summary_csv,
    ClusterConfig, ComputeRates, LengthDistribution,
};
use homokv::homomm::{approximation_cost, homomorphic_matmul, SumsSource};
use homokv::quant::quantize;
use homokv::reference::{compare, dequantize_then_multiply, exact_attention};
use homokv::wire::{
    decode_kv_frame, decode_raw_frame, encode_kv_frame, raw_kv_bytes, FrameHeader, HEADER_BYTES,
};
use homokv::{
    BitWidth, CacheConfig, CostCounters, Matrix, PartitionAxis, PartitionLayout, RoundingMode,
};

use crate::{
    ensure_positive, BenchArgs, DemoArgs, InspectArgs, ModelArgs, SimArgs, WriteFrameArgs,
};

const BENCH_SHAPES: [(usize, usize, usize); 3] = [(32, 128, 32), (64, 256, 96), (128, 512, 128)];

fn cache_config(model: &ModelArgs, pi: usize, bits: BitWidth) -> Result<AttentionConfig> {
    for (name, v) in [
        ("layers", model.layers),
        ("heads", model.heads),
        ("head-dim", model.head_dim),
        ("embed-dim", model.embed_dim),
        ("pi", pi),
    ] {
        ensure_positive(name, v)?;
    }
    let config = AttentionConfig {
        cache: CacheConfig {
            num_layers: model.layers,
            num_heads: model.heads,
            head_dim: model.head_dim,
            partition_size: pi,
            key_bits: bits,
            value_bits: bits,
            ..CacheConfig::default()
        },
        embed_dim: model.embed_dim,
        rounding: RoundingMode::Stochastic(0),
    };
    config.validate().context("invalid model configuration")?;
    Ok(config)
}

/// CSV columns: `m,z,n,pi,bits,max_rel_error,approximation_ops,
/// cost_model_ops,quantized_mac_ops,oracle_dequantization_ops,wall_time_us`.
pub fn bench_matmul(args: &BenchArgs, out: Box<dyn Write>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "m",
        "z",
        "n",
        "pi",
        "bits",
        "max_rel_error",
        "approximation_ops",
        "cost_model_ops",
        "quantized_mac_ops",
        "oracle_dequantization_ops",
        "wall_time_us",
    ])?;
    for &pi in &args.pis {
        ensure_positive("pi", pi)?;
    }
    let mut case = 0u64;
    for &(m, z, n) in &BENCH_SHAPES {
        for &pi in &args.pis {
            for &bits in &args.bits {
                case += 1;
                let a = random_embeddings(m, z, args.seed.wrapping_add(2 * case));
                let b = random_embeddings(z, n, args.seed.wrapping_add(2 * case + 1));
                let mode = RoundingMode::Stochastic(args.seed ^ case);
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
                let counters = CostCounters::new();
                let start = Instant::now();
                let got = homomorphic_matmul(&qa, &qb, SumsSource::Fresh, &counters)?;
                let wall = start.elapsed().as_micros();
                let oracle_counters = CostCounters::new();
                let want = dequantize_then_multiply(&qa, &qb, &oracle_counters)?;
                let report = compare(&got, &want)?;
                let s = counters.snapshot();
                w.write_record([
                    m.to_string(),
                    z.to_string(),
                    n.to_string(),
                    pi.to_string(),
                    bits.bits().to_string(),
                    format!("{:e}", report.max_rel_error),
                    s.approximation_ops.to_string(),
                    approximation_cost(m as u64, n as u64, z as u64, false).to_string(),
                    s.quantized_mac_ops.to_string(),
                    oracle_counters.snapshot().dequantization_ops.to_string(),
                    wall.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs prefill on the prompt rows and teacher-forced decode on the rest.
fn attention_rows(
    embeddings: &Matrix,
    prompt_len: usize,
    weights: &ModelWeights,
    config: &AttentionConfig,
    mode: ExecutionMode,
) -> Result<Matrix> {
    let prompt = embeddings.slice_rows(0..prompt_len);
    let pre = prefill_attention(&prompt, weights, config, mode)?;
    let mut rows = pre.output.rows;
    let mut store = KvStore::new(mode, &config.cache)?;
    let counters = CostCounters::new();
    store.ingest(0, pre.kv, config.rounding, &counters)?;
    for r in prompt_len..embeddings.rows() {
        let row = decode_attention(embeddings.row(r), &mut store, 0, weights, config, &counters)?;
        rows.push_row(&row)?;
    }
    if mode == ExecutionMode::Hack {
        debug_assert_eq!(counters.snapshot().dequantization_ops, 0);
    }
    Ok(rows)
}

/// CSV columns: `mode,pi,bits,prompt_len,decode_steps,cosine,
/// max_abs_error,max_rel_error,rms_error`.
pub fn demo_attention(args: &DemoArgs, out: Box<dyn Write>) -> Result<()> {
    ensure_positive("prompt-len", args.prompt_len)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mode",
        "pi",
        "bits",
        "prompt_len",
        "decode_steps",
        "cosine",
        "max_abs_error",
        "max_rel_error",
        "rms_error",
    ])?;
    let total = args.prompt_len + args.decode_steps;
    let embeddings = random_embeddings(total, args.model.embed_dim, args.seed.wrapping_add(1));
    let mut exact: Option<Matrix> = None;
    for &pi in &args.pis {
        for &bits in &args.bits {
            let mut config = cache_config(&args.model, pi, bits)?;
            config.rounding = RoundingMode::Stochastic(args.seed);
            let weights = ModelWeights::seeded(&config, args.seed);
            let reference = match &exact {
                Some(e) => e.clone(),
                None => {
                    let e = exact_attention(&embeddings, &weights, &config)?;
                    exact = Some(e.clone());
                    e
                }
            };
            for &mode in &args.modes {
                let rows = attention_rows(&embeddings, args.prompt_len, &weights, &config, mode)?;
                let r = compare(&rows, &reference)?;
                w.write_record([
                    mode.to_string(),
                    pi.to_string(),
                    bits.bits().to_string(),
                    args.prompt_len.to_string(),
                    args.decode_steps.to_string(),
                    r.cosine.to_string(),
                    r.max_abs_error.to_string(),
                    r.max_rel_error.to_string(),
                    r.rms_error.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn simulate(args: &SimArgs) -> Result<()> {
    if args.prompt_min > args.prompt_max || args.output_min > args.output_max {
        bail!("length ranges must have min <= max");
    }
    if args.bandwidth_gbps.is_nan() || args.bandwidth_gbps <= 0.0 {
        bail!("--bandwidth-gbps must be positive");
    }
    let mut config = cache_config(&args.model, args.pi, args.bits)?;
    config.rounding = RoundingMode::Stochastic(args.seed);
    let workload = match &args.trace {
        Some(path) => load_trace(path).with_context(|| format!("reading {}", path.display()))?,
        None => generate_workload(
            args.rps,
            args.duration,
            &LengthDistribution::Uniform {
                prompt: args.prompt_min..=args.prompt_max,
                output: args.output_min..=args.output_max,
            },
            args.seed,
        )?,
    };
    let cluster = ClusterConfig {
        prefill_instances: args.prefill_instances,
        decode_instances: args.decode_instances,
        bandwidth_bps: args.bandwidth_gbps * 1e9,
        transport: args.transport,
        decode_memory_budget: args.decode_memory,
        rates: ComputeRates::default(),
    };
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut summaries = Vec::new();
    for &mode in &args.modes {
        let report = run_simulation(&workload, &cluster, &config, mode, args.seed)?;
        if let Some(dir) = &args.out {
            let path = dir.join(format!("requests_{mode}.csv"));
            let file = std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            write_request_csv(file, &report.requests)?;
        }
        summaries.push(report.summary);
    }
    if let Some(dir) = &args.out {
        write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?, &summaries)?;
    }
    write_summary_csv(std::io::stdout().lock(), &summaries)?;
    Ok(())
}

pub fn write_frame(args: &WriteFrameArgs) -> Result<()> {
    ensure_positive("prompt-len", args.prompt_len)?;
    let mut config = cache_config(&args.model, args.pi, args.bits)?;
    config.rounding = RoundingMode::Stochastic(args.seed);
    let weights = ModelWeights::seeded(&config, args.seed);
    let prompt = random_embeddings(args.prompt_len, config.embed_dim, args.seed.wrapping_add(1));
    let pre = prefill_attention(&prompt, &weights, &config, ExecutionMode::Hack)?;
    let PrefillKv::Quantized(kv) = &pre.kv else {
        bail!("prefill did not produce a quantized bundle");
    };
    let bytes = encode_kv_frame(kv, args.seq_id, pre.first_token)?;
    std::fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let c = &config.cache;
    let raw = raw_kv_bytes(c.num_layers, c.num_heads, c.head_dim, args.prompt_len);
    println!(
        "wrote {} bytes ({:.4} of {} raw 16-bit KV bytes) to {}",
        bytes.len(),
        bytes.len() as f64 / raw as f64,
        raw,
        args.out.display()
    );
    Ok(())
}

pub fn inspect_frame(args: &InspectArgs) -> Result<()> {
    let bytes =
        std::fs::read(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    let header = FrameHeader::parse(&bytes)?;
    println!("magic        HACK");
    println!("version      {}", header.version);
    println!("seq_id       {}", header.seq_id);
    println!("layers       {}", header.num_layers);
    println!("heads        {}", header.num_heads);
    println!("head_dim     {}", header.head_dim);
    println!("partition    {}", header.partition_size);
    println!("key_bits     {}", header.key_bits);
    println!("value_bits   {}", header.value_bits);
    println!("prompt_len   {}", header.prompt_len);
    println!("v_tail_len   {}", header.v_tail_len);
    println!("first_token  {}", header.first_token);
    let raw = raw_kv_bytes(
        header.num_layers as usize,
        header.num_heads as usize,
        header.head_dim as usize,
        header.prompt_len as usize,
    );
    if header.is_raw() {
        println!("payload      raw 16-bit K/V, {raw} bytes");
        if args.verify {
            decode_raw_frame(&bytes)?;
            println!("OK");
        } else {
            check_len(bytes.len(), HEADER_BYTES + raw + 4)?;
        }
        return Ok(());
    }
    let dims = header.dims()?;
    if dims.partition_size == 0 || dims.v_tail_len > dims.prompt_len {
        bail!("header dimensions are impossible");
    }
    let s = dims.head_sections();
    println!("per head     k_codes={} k_metadata={} k_sums={} v_codes={} v_metadata={} v_sums={} v_tail={}",
        s.k_codes, s.k_metadata, s.k_sums, s.v_codes, s.v_metadata, s.v_sums, s.v_tail);
    println!("frame_bytes  {}", bytes.len());
    println!("raw_kv_bytes {raw}");
    println!("ratio        {:.4}", bytes.len() as f64 / raw as f64);
    check_len(bytes.len(), dims.frame_size())?;
    if args.verify {
        decode_kv_frame(&bytes)?;
        println!("OK");
    }
    Ok(())
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        bail!("frame length {actual} bytes, header implies {expected}");
    }
    Ok(())
}
