//! Wall-clock latency harness. One iteration is a full pass over the bench
//! corpus in fixed batches; each mode is warmed up and then timed
//! per-iteration on the monotonic clock. Batches of one truncate computation
//! at the exit layer; larger batches run the lockstep engine, which stops at
//! the last lane's exit and therefore pays for stragglers.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{LeapError, Result};
use crate::exit::{self, ExitPolicy};
use crate::metrics::ExitDistribution;
use crate::scalar::Scalar;

/// A timed mean is flagged as unreliable when it is smaller than this many
/// clock ticks.
const TIMER_SAFETY_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Full,
    EarlyExit,
    MonitoredNoExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub measure_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup_iters: 50, measure_iters: 200 }
    }
}

/// One timed configuration. `std_ms` is the sample standard deviation over
/// the measured iterations only; warmup never counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub batch_size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    /// Expected exit layer of the policy on this corpus; only early-exit
    /// runs carry one.
    pub e_exit_layer: Option<f64>,
    /// Set when the mean is within an order of magnitude of the clock
    /// granularity.
    pub timer_warning: bool,
}

/// One comparison row: full against early exit at a fixed batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub full_ms: f64,
    pub full_std_ms: f64,
    pub ee_ms: f64,
    pub ee_std_ms: f64,
    pub speedup: f64,
    pub expected_exit_layer: f64,
    /// Layer-count bound on the speedup.
    pub theoretical_reduction: f64,
    /// Fraction of the theoretical reduction the measured speedup realizes.
    pub realized_fraction: f64,
    pub timer_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub rows: Vec<BenchRow>,
    /// Estimated monotonic-clock granularity, for judging the warnings.
    pub clock_granularity_ms: f64,
}

impl BenchReport {
    pub fn result(&self, mode: BenchMode, batch_size: usize) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.mode == mode && r.batch_size == batch_size)
    }

    /// `batch_size,full_ms,ee_ms,speedup,expected_layer` plus spread and
    /// reliability columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "batch_size,full_ms,ee_ms,speedup,expected_layer,full_std_ms,ee_std_ms,theoretical_reduction,realized_fraction,timer_warning\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.4},{:.4},{:.6},{:.6},{:.4},{:.4},{}\n",
                r.batch_size,
                r.full_ms,
                r.ee_ms,
                r.speedup,
                r.expected_exit_layer,
                r.full_std_ms,
                r.ee_std_ms,
                r.theoretical_reduction,
                r.realized_fraction,
                r.timer_warning
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Smallest nonzero interval the monotonic clock resolves, in milliseconds.
pub fn clock_granularity_ms() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..32 {
        let t0 = Instant::now();
        let mut elapsed = t0.elapsed();
        while elapsed.is_zero() {
            elapsed = t0.elapsed();
        }
        best = best.min(elapsed.as_secs_f64() * 1e3);
    }
    best
}

/// Warm up, then time `pass` per iteration. The pass returns a sink value
/// that is accumulated and checked so the work cannot be optimized away.
fn measure<P: FnMut() -> Result<f64>>(
    mut pass: P,
    cfg: &BenchConfig,
) -> Result<(f64, f64, f64)> {
    let mut sink = 0.0;
    for _ in 0..cfg.warmup_iters {
        sink += pass()?;
    }
    let mut times_ms = Vec::with_capacity(cfg.measure_iters);
    for _ in 0..cfg.measure_iters {
        let t0 = Instant::now();
        sink += pass()?;
        times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    if !sink.is_finite() {
        return Err(LeapError::NonFinite("benchmark passes produced non-finite embeddings"));
    }
    let n = times_ms.len() as f64;
    let mean = times_ms.iter().sum::<f64>() / n;
    let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
    if mean <= 0.0 {
        return Err(LeapError::contract(
            "measured mean is not positive; clock failure".to_string(),
        ));
    }
    Ok((mean, var.sqrt(), sink))
}

/// Benchmark full-depth against early-exit inference at each batch size,
/// plus one monitored-no-exit run at batch one. Strictly single threaded.
pub fn bench<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    policy: &ExitPolicy,
    batch_sizes: &[usize],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if samples.is_empty() {
        return Err(LeapError::contract("bench corpus is empty".to_string()));
    }
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(LeapError::contract("batch sizes must be positive".to_string()));
    }
    if cfg.measure_iters < 2 {
        return Err(LeapError::contract(
            "need at least 2 measurement iterations for a standard deviation".to_string(),
        ));
    }
    policy.validate()?;
    let depth = model.config().num_layers;
    let granularity = clock_granularity_ms();

    let exits: Vec<usize> = samples
        .iter()
        .map(|t| exit::infer_single(model, t, None, policy).map(|r| r.exit_layer))
        .collect::<Result<_>>()?;
    let dist = ExitDistribution::from_layers(&exits, depth)?;
    let e_exit = dist.expected_layers;
    let theoretical = depth as f64 / e_exit;

    let full_pass = |batch: usize| {
        move |m: &EncoderModel<F>, s: &[Vec<u32>]| -> Result<f64> {
            let mut acc = 0.0;
            for chunk in s.chunks(batch) {
                for tokens in chunk {
                    let e = m.encode_final(tokens, None)?;
                    acc += e.data()[0].to_f64().unwrap_or(0.0);
                }
            }
            Ok(acc)
        }
    };

    let mut results = Vec::new();
    let mut rows = Vec::new();

    let (mon_mean, mon_std, _) = measure(
        || {
            let mut acc = 0.0;
            for tokens in samples {
                let r = exit::infer_monitored_no_exit(model, tokens, None, policy)?;
                acc += r.embedding.data()[0].to_f64().unwrap_or(0.0);
            }
            Ok(acc)
        },
        cfg,
    )?;
    results.push(BenchResult {
        mode: BenchMode::MonitoredNoExit,
        batch_size: 1,
        mean_ms: mon_mean,
        std_ms: mon_std,
        warmup_iters: cfg.warmup_iters,
        measure_iters: cfg.measure_iters,
        e_exit_layer: None,
        timer_warning: mon_mean < TIMER_SAFETY_FACTOR * granularity,
    });

    for &batch in batch_sizes {
        let fp = full_pass(batch);
        let (full_mean, full_std, _) = measure(|| fp(model, samples), cfg)?;
        let full_warn = full_mean < TIMER_SAFETY_FACTOR * granularity;
        results.push(BenchResult {
            mode: BenchMode::Full,
            batch_size: batch,
            mean_ms: full_mean,
            std_ms: full_std,
            warmup_iters: cfg.warmup_iters,
            measure_iters: cfg.measure_iters,
            e_exit_layer: None,
            timer_warning: full_warn,
        });

        let (ee_mean, ee_std, _) = measure(
            || {
                let mut acc = 0.0;
                if batch == 1 {
                    for tokens in samples {
                        let r = exit::infer_single(model, tokens, None, policy)?;
                        acc += r.embedding.data()[0].to_f64().unwrap_or(0.0);
                    }
                } else {
                    for chunk in samples.chunks(batch) {
                        let (rs, _) = exit::infer_batch(model, chunk, policy)?;
                        for r in rs {
                            acc += r.embedding.data()[0].to_f64().unwrap_or(0.0);
                        }
                    }
                }
                Ok(acc)
            },
            cfg,
        )?;
        let ee_warn = ee_mean < TIMER_SAFETY_FACTOR * granularity;
        results.push(BenchResult {
            mode: BenchMode::EarlyExit,
            batch_size: batch,
            mean_ms: ee_mean,
            std_ms: ee_std,
            warmup_iters: cfg.warmup_iters,
            measure_iters: cfg.measure_iters,
            e_exit_layer: Some(e_exit),
            timer_warning: ee_warn,
        });

        let speedup = full_mean / ee_mean;
        rows.push(BenchRow {
            batch_size: batch,
            full_ms: full_mean,
            full_std_ms: full_std,
            ee_ms: ee_mean,
            ee_std_ms: ee_std,
            speedup,
            expected_exit_layer: e_exit,
            theoretical_reduction: theoretical,
            realized_fraction: speedup / theoretical,
            timer_warning: full_warn || ee_warn,
        });
    }

    Ok(BenchReport { results, rows, clock_granularity_ms: granularity })
}
