use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rayon::prelude::*;

use super::metrics::{RequestMetrics, RequestStatus, RunSummary};
use super::transport::{ModeledLink, SocketLink, Transport, TransportKind, DEFAULT_BANDWIDTH_BPS};
use super::workload::{Request, Workload};
use crate::attention::{
    decode_attention, prefill_attention, random_embeddings, sample_next_token, token_embedding,
    AttentionConfig, ExecutionMode, KvStore, ModelWeights, PrefillKv, DEFAULT_VOCAB,
};
use crate::error::{Error, Result};
use crate::homomm::{CostCounters, CounterSnapshot};
use crate::quant::mix64;
use crate::wire::{decode_kv_frame, decode_raw_frame, encode_kv_frame, encode_raw_frame};

/// Throughput assumed when turning operation counts into time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeRates {
    pub fp_ops_per_sec: f64,
    /// Rate for quantized multiply-accumulates.
    pub int_ops_per_sec: f64,
}

impl Default for ComputeRates {
    fn default() -> Self {
        Self {
            fp_ops_per_sec: 1e11,
            int_ops_per_sec: 4e11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub prefill_instances: usize,
    pub decode_instances: usize,
    pub bandwidth_bps: f64,
    pub transport: TransportKind,
    /// Per decode instance; `None` means unbounded.
    pub decode_memory_budget: Option<u64>,
    pub rates: ComputeRates,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            prefill_instances: 1,
            decode_instances: 1,
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            transport: TransportKind::Modeled,
            decode_memory_budget: None,
            rates: ComputeRates::default(),
        }
    }
}

impl ClusterConfig {
    fn validate(&self) -> Result<()> {
        if self.prefill_instances == 0 || self.decode_instances == 0 {
            return Err(Error::Config(
                "need at least one prefill and one decode instance".into(),
            ));
        }
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::Config("link bandwidth must be positive".into()));
        }
        let r = self.rates;
        if !(r.fp_ops_per_sec > 0.0 && r.int_ops_per_sec > 0.0) {
            return Err(Error::Config("compute rates must be positive".into()));
        }
        Ok(())
    }
}

/// Index of the instance with the fewest queued tokens; ties go to the
/// lowest index.
pub fn schedule(queued_tokens: &[u64]) -> Option<usize> {
    queued_tokens
        .iter()
        .enumerate()
        .min_by_key(|&(i, &q)| (q, i))
        .map(|(i, _)| i)
}

/// Work one request performed, split by where it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseCounters {
    /// Prefill attention, including Q/P quantization.
    pub prefill: CounterSnapshot,
    /// Quantizing the prompt K/V before sending it.
    pub kv_quantization: CounterSnapshot,
    /// Decode-side work to take over the prompt K/V.
    pub ingest: CounterSnapshot,
    /// All decode steps.
    pub decode: CounterSnapshot,
    /// Decode-side cache upkeep: quantizing appended K and flushed V blocks.
    pub cache_upkeep: CounterSnapshot,
}

impl PhaseCounters {
    pub fn total(&self) -> CounterSnapshot {
        self.prefill + self.kv_quantization + self.ingest + self.decode + self.cache_upkeep
    }
}

fn all_ops(s: &CounterSnapshot) -> u64 {
    s.quantized_mac_ops
        + s.approximation_ops
        + s.dequantization_ops
        + s.full_precision_mac_ops
        + s.quantization_ops
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PhaseTimes {
    prefill: f64,
    quantize: f64,
    approx_or_dequant: f64,
    decode: f64,
    /// Occupancy of a prefill instance.
    prefill_stage: f64,
    /// Occupancy of a decode slot after the frame arrives.
    decode_stage: f64,
}

impl PhaseTimes {
    fn new(c: &PhaseCounters, rates: &ComputeRates) -> Self {
        let fp = |n: u64| n as f64 / rates.fp_ops_per_sec;
        let int = |n: u64| n as f64 / rates.int_ops_per_sec;
        let prefill = fp(c.prefill.full_precision_mac_ops) + int(c.prefill.quantized_mac_ops);
        let decode = fp(c.decode.full_precision_mac_ops) + int(c.decode.quantized_mac_ops);
        let pre_quant = fp(c.prefill.quantization_ops);
        let pre_approx = fp(c.prefill.approximation_ops + c.prefill.dequantization_ops);
        let kv_quant = fp(all_ops(&c.kv_quantization));
        let dec_quant =
            fp(c.decode.quantization_ops + all_ops(&c.ingest) + all_ops(&c.cache_upkeep));
        let dec_approx = fp(c.decode.approximation_ops + c.decode.dequantization_ops);
        Self {
            prefill,
            quantize: pre_quant + kv_quant + dec_quant,
            approx_or_dequant: pre_approx + dec_approx,
            decode,
            prefill_stage: prefill + pre_quant + pre_approx + kv_quant,
            decode_stage: decode + dec_quant + dec_approx,
        }
    }
}

/// What running one request's pipeline produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub counters: PhaseCounters,
    pub bytes_sent: u64,
    /// Wall time of the transfer when it really happened.
    pub measured_comm: Option<f64>,
    /// Decode-side KV bytes after the last step.
    pub footprint: u64,
    pub tokens: Vec<u32>,
}

struct Prefilled {
    frame: Vec<u8>,
    counters: PhaseCounters,
}

struct Pipeline<'a> {
    weights: &'a ModelWeights,
    config: &'a AttentionConfig,
    mode: ExecutionMode,
    seed: u64,
}

impl Pipeline<'_> {
    fn prefill(&self, r: &Request) -> Result<Prefilled> {
        let c = &self.config.cache;
        let embeddings = random_embeddings(
            r.prompt_len,
            self.config.embed_dim,
            mix64(self.seed ^ mix64(r.request_id)),
        );
        let config = AttentionConfig {
            rounding: self.config.rounding.fork(r.request_id),
            ..*self.config
        };
        let out = prefill_attention(&embeddings, self.weights, &config, self.mode)?;
        let frame = match &out.kv {
            PrefillKv::Quantized(kv) => encode_kv_frame(kv, r.request_id, out.first_token)?,
            PrefillKv::Full(kv) => {
                encode_raw_frame(kv, c.num_layers, c.num_heads, r.request_id, out.first_token)?
            }
        };
        Ok(Prefilled {
            frame,
            counters: PhaseCounters {
                prefill: out.output.counters,
                kv_quantization: out.kv_quantization,
                ..PhaseCounters::default()
            },
        })
    }

    fn decode(
        &self,
        r: &Request,
        received: &[u8],
        mut counters: PhaseCounters,
    ) -> Result<Execution> {
        let config = AttentionConfig {
            rounding: self.config.rounding.fork(r.request_id),
            ..*self.config
        };
        let (kv, seq, mut token) = match self.mode {
            ExecutionMode::Hack => {
                let (kv, seq, tok) = decode_kv_frame(received)?;
                (PrefillKv::Quantized(kv), seq, tok)
            }
            _ => {
                let (kv, header) = decode_raw_frame(received)?;
                (PrefillKv::Full(kv), header.seq_id, header.first_token)
            }
        };
        let mut store = KvStore::new(self.mode, &config.cache)?;
        let ingest = CostCounters::new();
        store.ingest(seq, kv, config.rounding, &ingest)?;
        let step = CostCounters::new();
        let mut tokens = Vec::with_capacity(r.output_len + 1);
        tokens.push(token);
        for _ in 0..r.output_len {
            let e = token_embedding(self.seed, token, config.embed_dim);
            let row = decode_attention(&e, &mut store, seq, self.weights, &config, &step)?;
            token = sample_next_token(&row, self.seed, DEFAULT_VOCAB);
            tokens.push(token);
        }
        counters.ingest = ingest.snapshot();
        counters.decode = step.snapshot();
        if let KvStore::Hack(cache) = &store {
            counters.cache_upkeep = cache.counters().snapshot();
        }
        Ok(Execution {
            counters,
            bytes_sent: received.len() as u64,
            measured_comm: None,
            footprint: store.sequence_bytes(seq)? as u64,
            tokens,
        })
    }
}

/// Runs every request's real pipeline: prefill, framing, transfer, frame
/// decoding, and all decode steps.
pub fn execute_workload(
    workload: &Workload,
    weights: &ModelWeights,
    config: &AttentionConfig,
    mode: ExecutionMode,
    transport: TransportKind,
    seed: u64,
) -> Result<Vec<Execution>> {
    config.validate()?;
    let pipeline = Pipeline {
        weights,
        config,
        mode,
        seed,
    };
    let prefilled: Vec<Prefilled> = workload
        .requests
        .par_iter()
        .map(|r| pipeline.prefill(r))
        .collect::<Result<_>>()?;
    let mut socket = match transport {
        TransportKind::Sockets if !prefilled.is_empty() => Some(SocketLink::connect()?),
        _ => None,
    };
    let mut transferred = Vec::with_capacity(prefilled.len());
    for p in prefilled {
        let (bytes, measured) = match &mut socket {
            Some(link) => {
                let (b, t) = link.send(p.frame)?;
                (b, Some(t))
            }
            None => (p.frame, None),
        };
        transferred.push((bytes, measured, p.counters));
    }
    workload
        .requests
        .par_iter()
        .zip(transferred)
        .map(|(r, (bytes, measured, counters))| {
            let mut e = pipeline.decode(r, &bytes, counters)?;
            e.measured_comm = measured;
            Ok(e)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Finish {
    time: f64,
    bytes: u64,
}

impl Eq for Finish {}

impl Ord for Finish {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on time
        other.time.total_cmp(&self.time)
    }
}

impl PartialOrd for Finish {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Timeline {
    ready: f64,
    admitted: f64,
    finish: f64,
    comm: f64,
    status: RequestStatus,
}

/// Places executed requests on the cluster and returns each one's
/// timeline plus the peak of concurrently reserved decode memory.
fn place(
    requests: &[Request],
    executions: &[Execution],
    cluster: &ClusterConfig,
) -> Result<(Vec<Timeline>, u64)> {
    let link = ModeledLink::new(cluster.bandwidth_bps)?;
    let times: Vec<PhaseTimes> = executions
        .iter()
        .map(|e| PhaseTimes::new(&e.counters, &cluster.rates))
        .collect();

    // prefill: FIFO instances, shortest queue by waiting prompt tokens
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by(|&a, &b| {
        requests[a]
            .arrival_time
            .total_cmp(&requests[b].arrival_time)
            .then(requests[a].request_id.cmp(&requests[b].request_id))
    });
    let mut pending: Vec<VecDeque<(f64, u64)>> = vec![VecDeque::new(); cluster.prefill_instances];
    let mut free_at = vec![0.0f64; cluster.prefill_instances];
    let mut ready = vec![0.0f64; requests.len()];
    for &i in &order {
        let r = &requests[i];
        let queued: Vec<u64> = pending
            .iter_mut()
            .map(|q| {
                while q.front().is_some_and(|&(f, _)| f <= r.arrival_time) {
                    q.pop_front();
                }
                q.iter().map(|&(_, t)| t).sum()
            })
            .collect();
        let inst = schedule(&queued).expect("at least one instance");
        let start = free_at[inst].max(r.arrival_time);
        let finish = start + times[i].prefill_stage;
        free_at[inst] = finish;
        pending[inst].push_back((finish, r.prompt_len as u64));
        ready[i] = finish;
    }

    // decode: static balanced assignment in frame-ready order, then strict
    // FIFO admission against the memory budget
    order.sort_by(|&a, &b| {
        ready[a]
            .total_cmp(&ready[b])
            .then(requests[a].request_id.cmp(&requests[b].request_id))
    });
    let mut assigned = vec![0u64; cluster.decode_instances];
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); cluster.decode_instances];
    for &i in &order {
        let inst = schedule(&assigned).expect("at least one instance");
        assigned[inst] += (requests[i].prompt_len + requests[i].output_len) as u64;
        queues[inst].push(i);
    }

    let budget = cluster.decode_memory_budget.unwrap_or(u64::MAX);
    let mut timeline = vec![None; requests.len()];
    let mut events: Vec<(f64, i64)> = Vec::new();
    for queue in &queues {
        let mut active = BinaryHeap::<Finish>::new();
        let (mut used, mut last_admit, mut link_free) = (0u64, 0.0f64, 0.0f64);
        for &i in queue {
            let e = &executions[i];
            let reserve = e.footprint;
            if reserve > budget {
                timeline[i] = Some(Timeline {
                    ready: ready[i],
                    admitted: ready[i],
                    finish: ready[i],
                    comm: 0.0,
                    status: RequestStatus::Oversize,
                });
                continue;
            }
            let mut t = ready[i].max(last_admit);
            while let Some(f) = active.peek().copied() {
                if f.time <= t || used.saturating_add(reserve) > budget {
                    active.pop();
                    used -= f.bytes;
                    t = t.max(f.time);
                } else {
                    break;
                }
            }
            let comm = e
                .measured_comm
                .unwrap_or_else(|| link.transfer_time(e.bytes_sent as usize));
            let comm_start = t.max(link_free);
            link_free = comm_start + comm;
            let finish = link_free + times[i].decode_stage;
            active.push(Finish {
                time: finish,
                bytes: reserve,
            });
            used += reserve;
            last_admit = t;
            events.push((t, reserve as i64));
            events.push((finish, -(reserve as i64)));
            timeline[i] = Some(Timeline {
                ready: ready[i],
                admitted: t,
                finish,
                comm,
                status: RequestStatus::Completed,
            });
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut level, mut peak) = (0i64, 0i64);
    for (_, delta) in events {
        level += delta;
        peak = peak.max(level);
    }
    Ok((
        timeline
            .into_iter()
            .map(|t| t.expect("every request placed"))
            .collect(),
        peak as u64,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub mode: ExecutionMode,
    /// Ordered by request id.
    pub requests: Vec<RequestMetrics>,
    pub counters: Vec<PhaseCounters>,
    pub summary: RunSummary,
}

/// Turns executed requests into metrics under a cluster configuration.
/// Placement is cheap, so the same executions can be re-placed under
/// different budgets or link speeds.
pub fn simulate_executions(
    workload: &Workload,
    executions: &[Execution],
    cluster: &ClusterConfig,
    mode: ExecutionMode,
) -> Result<SimReport> {
    cluster.validate()?;
    if executions.len() != workload.requests.len() {
        return Err(Error::Config("one execution per request".into()));
    }
    let (timeline, peak) = place(&workload.requests, executions, cluster)?;
    let mut rows: Vec<(RequestMetrics, PhaseCounters, f64)> = workload
        .requests
        .iter()
        .zip(executions)
        .zip(&timeline)
        .map(|((r, e), t)| {
            let times = PhaseTimes::new(&e.counters, &cluster.rates);
            let done = t.status == RequestStatus::Completed;
            let m = RequestMetrics {
                request_id: r.request_id,
                prefill_time: times.prefill,
                quantize_time: times.quantize,
                comm_time: t.comm,
                approx_or_dequant_time: times.approx_or_dequant,
                decode_time: if done { times.decode } else { 0.0 },
                jct: if done {
                    t.finish - r.arrival_time
                } else {
                    t.ready - r.arrival_time
                },
                bytes_sent: if done { e.bytes_sent } else { 0 },
                status: t.status,
            };
            debug_assert!(t.admitted >= t.ready);
            (m, e.counters, r.arrival_time)
        })
        .collect();
    rows.sort_by_key(|(m, _, _)| m.request_id);
    let requests: Vec<RequestMetrics> = rows.iter().map(|r| r.0).collect();
    let counters: Vec<PhaseCounters> = rows.iter().map(|r| r.1).collect();
    let arrivals: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let total = counters
        .iter()
        .fold(CounterSnapshot::default(), |acc, c| acc + c.total());
    let summary = RunSummary::from_requests(mode, &requests, &arrivals, peak, total);
    Ok(SimReport {
        mode,
        requests,
        counters,
        summary,
    })
}

/// Executes and places a workload end to end.
pub fn run_simulation(
    workload: &Workload,
    cluster: &ClusterConfig,
    config: &AttentionConfig,
    mode: ExecutionMode,
    seed: u64,
) -> Result<SimReport> {
    cluster.validate()?;
    let weights = ModelWeights::seeded(config, seed);
    let executions = execute_workload(workload, &weights, config, mode, cluster.transport, seed)?;
    simulate_executions(workload, &executions, cluster, mode)
}
