use std::io::Write;

use serde::Serialize;

use crate::attention::ExecutionMode;
use crate::error::Result;
use crate::homomm::CounterSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    /// Its final KV footprint exceeds the decode memory budget on its own.
    Oversize,
}

/// Per-request phase decomposition, all times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub request_id: u64,
    pub prefill_time: f64,
    pub quantize_time: f64,
    pub comm_time: f64,
    pub approx_or_dequant_time: f64,
    pub decode_time: f64,
    pub jct: f64,
    pub bytes_sent: u64,
    pub status: RequestStatus,
}

pub const REQUEST_COLUMNS: [&str; 9] = [
    "request_id",
    "prefill_time",
    "quantize_time",
    "comm_time",
    "approx_or_dequant_time",
    "decode_time",
    "jct",
    "bytes_sent",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: &'static str,
    pub requests: usize,
    pub completed: usize,
    pub mean_jct: f64,
    pub max_jct: f64,
    pub makespan: f64,
    pub bytes_sent: u64,
    pub peak_decode_memory_bytes: u64,
    pub quantized_mac_ops: u64,
    pub approximation_ops: u64,
    pub dequantization_ops: u64,
    pub full_precision_mac_ops: u64,
    pub quantization_ops: u64,
}

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "mode",
    "requests",
    "completed",
    "mean_jct",
    "max_jct",
    "makespan",
    "bytes_sent",
    "peak_decode_memory_bytes",
    "quantized_mac_ops",
    "approximation_ops",
    "dequantization_ops",
    "full_precision_mac_ops",
    "quantization_ops",
    "bytes_ratio_vs_baseline",
];

impl RunSummary {
    pub fn from_requests(
        mode: ExecutionMode,
        metrics: &[RequestMetrics],
        arrivals: &[f64],
        peak_decode_memory_bytes: u64,
        counters: CounterSnapshot,
    ) -> Self {
        let done: Vec<_> = metrics
            .iter()
            .zip(arrivals)
            .filter(|(m, _)| m.status == RequestStatus::Completed)
            .collect();
        let completed = done.len();
        let mean_jct = if completed > 0 {
            done.iter().map(|(m, _)| m.jct).sum::<f64>() / completed as f64
        } else {
            0.0
        };
        Self {
            mode: match mode {
                ExecutionMode::Hack => "hack",
                ExecutionMode::Baseline => "baseline",
                ExecutionMode::Bypass => "bypass",
            },
            requests: metrics.len(),
            completed,
            mean_jct,
            max_jct: done.iter().map(|(m, _)| m.jct).fold(0.0, f64::max),
            makespan: done.iter().map(|(m, &a)| a + m.jct).fold(0.0, f64::max),
            bytes_sent: metrics.iter().map(|m| m.bytes_sent).sum(),
            peak_decode_memory_bytes,
            quantized_mac_ops: counters.quantized_mac_ops,
            approximation_ops: counters.approximation_ops,
            dequantization_ops: counters.dequantization_ops,
            full_precision_mac_ops: counters.full_precision_mac_ops,
            quantization_ops: counters.quantization_ops,
        }
    }
}

/// Writes the per-request CSV; the header is present even with no rows.
pub fn write_request_csv<W: Write>(out: W, metrics: &[RequestMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(REQUEST_COLUMNS)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one summary row per run. `bytes_ratio_vs_baseline` is filled in
/// when a baseline run is among them.
pub fn write_summary_csv<W: Write>(out: W, runs: &[RunSummary]) -> Result<()> {
    let baseline = runs
        .iter()
        .find(|r| r.mode == "baseline")
        .map(|r| r.bytes_sent);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in runs {
        let ratio = match baseline {
            Some(b) if b > 0 => format!("{}", r.bytes_sent as f64 / b as f64),
            _ => String::new(),
        };
        w.serialize((r, ratio))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_request_csv_has_header() {
        let mut buf = Vec::new();
        write_request_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            REQUEST_COLUMNS.join(",") + "\n"
        );
    }

    #[test]
    fn summary_ratio_column() {
        let base = RunSummary::from_requests(
            ExecutionMode::Baseline,
            &[RequestMetrics {
                request_id: 0,
                prefill_time: 1.0,
                quantize_time: 0.0,
                comm_time: 0.5,
                approx_or_dequant_time: 0.25,
                decode_time: 1.0,
                jct: 3.0,
                bytes_sent: 1000,
                status: RequestStatus::Completed,
            }],
            &[0.5],
            10,
            CounterSnapshot::default(),
        );
        assert_eq!(base.makespan, 3.5);
        let hack = RunSummary {
            mode: "hack",
            bytes_sent: 160,
            ..base
        };
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &[hack, base]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_COLUMNS.join(","));
        assert!(lines[1].starts_with("hack,") && lines[1].ends_with(",0.16"));
        assert!(lines[2].ends_with(",1"));
    }
}
