//! Request-to-response statistics and the report CSV.

use std::io::Write;
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use cda_core::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sample<T> {
    Success { latency_s: T, token_count: usize },
    /// Timed out or failed; counted but kept out of the statistics.
    Failure { latency_s: T },
}

impl<T: Copy> Sample<T> {
    pub fn latency_s(&self) -> T {
        match *self {
            Sample::Success { latency_s, .. } | Sample::Failure { latency_s } => latency_s,
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Sample::Success { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no successful samples ({failed} failed)")]
    NoSuccessfulSamples { failed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport<T> {
    pub model: String,
    pub runner: String,
    pub mean_s: T,
    pub median_s: T,
    pub avg_tokens: u64,
    pub n_samples: usize,
    pub n_failed: usize,
}

/// Mean and median latency over the successful samples, and the mean token
/// count rounded half up.
pub fn aggregate_stats<T: Real>(
    model: &str,
    runner: &str,
    samples: &[Sample<T>],
) -> Result<LatencyReport<T>, StatsError> {
    let mut latencies = Vec::with_capacity(samples.len());
    let mut tokens: u64 = 0;
    for s in samples {
        if let Sample::Success { latency_s, token_count } = *s {
            latencies.push(latency_s);
            tokens += token_count as u64;
        }
    }
    let n = latencies.len();
    let failed = samples.len() - n;
    if n == 0 {
        return Err(StatsError::NoSuccessfulSamples { failed });
    }

    let sum = latencies.iter().fold(T::zero(), |acc, &x| acc + x);
    let mean_s = sum / T::lit(n as f64);

    let mid = n / 2;
    let (left, upper, _) = latencies.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite latency"));
    let upper = *upper;
    let median_s = if n % 2 == 1 {
        upper
    } else {
        let lower = left
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        (lower + upper) / T::lit(2.0)
    };

    let n64 = n as u64;
    let avg_tokens = (2 * tokens + n64) / (2 * n64);

    Ok(LatencyReport {
        model: model.to_owned(),
        runner: runner.to_owned(),
        mean_s,
        median_s,
        avg_tokens,
        n_samples: n,
        n_failed: failed,
    })
}

pub const CSV_HEADER: [&str; 5] = ["model", "runner", "mean_s", "median_s", "avg_tokens"];

impl<T: Real> LatencyReport<T> {
    pub fn csv_fields(&self) -> [String; 5] {
        [
            self.model.clone(),
            self.runner.clone(),
            format!("{:.2}", self.mean_s.as_f64()),
            format!("{:.2}", self.median_s.as_f64()),
            self.avg_tokens.to_string(),
        ]
    }
}

pub fn write_csv<T: Real, W: Write>(reports: &[LatencyReport<T>], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string<T: Real>(reports: &[LatencyReport<T>]) -> String {
    let mut buf = Vec::new();
    write_csv(reports, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Collects samples from concurrent requests.
#[derive(Debug, Default)]
pub struct StatsAccumulator<T> {
    samples: Mutex<Vec<Sample<T>>>,
}

impl<T: Real> StatsAccumulator<T> {
    pub fn new() -> Self {
        Self {
            samples: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, sample: Sample<T>) {
        self.samples.lock().expect("samples").push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.lock().expect("samples").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<Sample<T>> {
        self.samples.lock().expect("samples").clone()
    }

    pub fn report(&self, model: &str, runner: &str) -> Result<LatencyReport<T>, StatsError> {
        aggregate_stats(model, runner, &self.samples.lock().expect("samples"))
    }
}
