use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use homokv::attention::ExecutionMode;
use homokv::disagg::TransportKind;
use homokv::BitWidth;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "homokv",
    version,
    about = "Quantized KV cache attention toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare quantized matmul against the dequantize-first oracle.
    BenchMatmul(BenchArgs),
    /// Attention error of each mode against exact attention.
    DemoAttention(DemoArgs),
    /// Run the disaggregated serving simulator.
    Simulate(SimArgs),
    /// Prefill a random prompt and write its KV frame.
    WriteFrame(WriteFrameArgs),
    /// Print a KV frame's header and section sizes.
    InspectFrame(InspectArgs),
}

fn parse_bits(s: &str) -> Result<BitWidth, String> {
    let n: u32 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    BitWidth::new(n).map_err(|_| format!("{n} bits is not supported; use 2 or 8"))
}

fn parse_mode(s: &str) -> Result<ExecutionMode, String> {
    s.parse()
        .map_err(|_| format!("{s:?} is not one of hack, baseline, bypass"))
}

fn parse_transport(s: &str) -> Result<TransportKind, String> {
    s.parse()
        .map_err(|_| format!("{s:?} is not one of model, sockets"))
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Partition sizes to sweep (repeatable).
    #[arg(long = "pi", default_values_t = [16usize, 32, 64, 128])]
    pis: Vec<usize>,
    /// Bit widths to sweep (repeatable).
    #[arg(long = "bits", value_parser = parse_bits, default_values = ["2", "8"])]
    bits: Vec<BitWidth>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "pi", default_values_t = [32usize, 64, 128])]
    pis: Vec<usize>,
    #[arg(long = "bits", value_parser = parse_bits, default_values = ["2", "8"])]
    bits: Vec<BitWidth>,
    #[arg(long = "mode", value_parser = parse_mode, default_values = ["hack", "baseline", "bypass"])]
    modes: Vec<ExecutionMode>,
    #[arg(long, default_value_t = 256)]
    prompt_len: usize,
    #[arg(long, default_value_t = 16)]
    decode_steps: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "mode", value_parser = parse_mode, default_values = ["hack", "baseline"])]
    modes: Vec<ExecutionMode>,
    #[arg(long, value_parser = parse_transport, default_value = "model")]
    transport: TransportKind,
    /// Mean arrival rate, requests per second.
    #[arg(long, default_value_t = 2.0)]
    rps: f64,
    /// Arrival window in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Read requests from a CSV trace instead of generating them.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    prompt_min: usize,
    #[arg(long, default_value_t = 2048)]
    prompt_max: usize,
    #[arg(long, default_value_t = 16)]
    output_min: usize,
    #[arg(long, default_value_t = 64)]
    output_max: usize,
    #[arg(long, default_value_t = 64)]
    pi: usize,
    #[arg(long, value_parser = parse_bits, default_value = "2")]
    bits: BitWidth,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    prefill_instances: usize,
    #[arg(long, default_value_t = 1)]
    decode_instances: usize,
    #[arg(long, default_value_t = 40.0)]
    bandwidth_gbps: f64,
    /// Decode memory per instance in bytes; unbounded when absent.
    #[arg(long)]
    decode_memory: Option<u64>,
    /// Output directory for `requests_<mode>.csv` and `summary.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WriteFrameArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    prompt_len: usize,
    #[arg(long, default_value_t = 64)]
    pi: usize,
    #[arg(long, value_parser = parse_bits, default_value = "2")]
    bits: BitWidth,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seq_id: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
    /// Fully decode the frame, recomputing checksums and code sums.
    #[arg(long)]
    verify: bool,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BenchMatmul(a) => commands::bench_matmul(&a, output(&a.out)?),
        Command::DemoAttention(a) => commands::demo_attention(&a, output(&a.out)?),
        Command::Simulate(a) => commands::simulate(&a),
        Command::WriteFrame(a) => commands::write_frame(&a),
        Command::InspectFrame(a) => commands::inspect_frame(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn ensure_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("--{name} must be at least 1");
    }
    Ok(())
}
