use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    /// Seconds from the start of the run.
    pub arrival_time: f64,
    pub prompt_len: usize,
    pub output_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub requests: Vec<Request>,
    pub seed: u64,
    pub rps: f64,
}

impl Workload {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    fn validate(&self) -> Result<()> {
        for w in self.requests.windows(2) {
            if w[1].arrival_time < w[0].arrival_time {
                return Err(Error::Trace(format!(
                    "request {} arrives before request {}",
                    w[1].request_id, w[0].request_id
                )));
            }
        }
        for r in &self.requests {
            if r.prompt_len == 0 || r.output_len == 0 {
                return Err(Error::Trace(format!(
                    "request {} has a zero length",
                    r.request_id
                )));
            }
            if !r.arrival_time.is_finite() || r.arrival_time < 0.0 {
                return Err(Error::Trace(format!(
                    "request {} has a bad arrival time",
                    r.request_id
                )));
            }
        }
        Ok(())
    }
}

/// How request lengths are drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LengthDistribution {
    Uniform {
        prompt: RangeInclusive<usize>,
        output: RangeInclusive<usize>,
    },
    /// Cycles through fixed `(prompt_len, output_len)` pairs.
    Fixed(Vec<(usize, usize)>),
}

impl Default for LengthDistribution {
    fn default() -> Self {
        Self::Uniform {
            prompt: 1024..=2048,
            output: 16..=64,
        }
    }
}

/// Poisson arrivals at `rps` over `[0, duration)` seconds.
pub fn generate_workload(
    rps: f64,
    duration: f64,
    lengths: &LengthDistribution,
    seed: u64,
) -> Result<Workload> {
    if !(rps > 0.0 && rps.is_finite()) {
        return Err(Error::Config(format!(
            "request rate must be positive, got {rps}"
        )));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::Config(format!(
            "duration must be non-negative, got {duration}"
        )));
    }
    match lengths {
        LengthDistribution::Uniform { prompt, output } => {
            if prompt.is_empty()
                || output.is_empty()
                || *prompt.start() == 0
                || *output.start() == 0
            {
                return Err(Error::Config(
                    "length ranges must be non-empty and start at 1 or more".into(),
                ));
            }
        }
        LengthDistribution::Fixed(pairs) => {
            if pairs.is_empty() || pairs.iter().any(|&(p, o)| p == 0 || o == 0) {
                return Err(Error::Config(
                    "fixed lengths must be non-empty and positive".into(),
                ));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rps).map_err(|e| Error::Config(e.to_string()))?;
    let mut requests = Vec::new();
    let mut t = gap.sample(&mut rng);
    while t < duration {
        let id = requests.len() as u64;
        let (prompt_len, output_len) = match lengths {
            LengthDistribution::Uniform { prompt, output } => (
                rng.random_range(prompt.clone()),
                rng.random_range(output.clone()),
            ),
            LengthDistribution::Fixed(pairs) => pairs[id as usize % pairs.len()],
        };
        requests.push(Request {
            request_id: id,
            arrival_time: t,
            prompt_len,
            output_len,
        });
        t += gap.sample(&mut rng);
    }
    Ok(Workload {
        requests,
        seed,
        rps,
    })
}

/// Reads a `request_id,arrival_time,prompt_len,output_len` CSV.
pub fn load_trace(path: &Path) -> Result<Workload> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["request_id", "arrival_time", "prompt_len", "output_len"];
    if headers.iter().ne(expected) {
        return Err(Error::Trace(format!(
            "expected header {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let requests = reader
        .deserialize()
        .collect::<std::result::Result<Vec<Request>, _>>()?;
    let span = requests.last().map_or(0.0, |r| r.arrival_time);
    let workload = Workload {
        rps: if span > 0.0 {
            requests.len() as f64 / span
        } else {
            0.0
        },
        requests,
        seed: 0,
    };
    workload.validate()?;
    Ok(workload)
}

pub fn write_trace(path: &Path, workload: &Workload) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in &workload.requests {
        writer.serialize(r)?;
    }
    if workload.requests.is_empty() {
        writer.write_record(["request_id", "arrival_time", "prompt_len", "output_len"])?;
    }
    writer.flush()?;
    Ok(())
}
