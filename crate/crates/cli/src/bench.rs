//! Single-threaded inference timing.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use fedlitecan::data::FEATURES;
use fedlitecan::model::{checkpoint_to_bytes, logits, ModelConfig, ModelParams};
use fedlitecan::tensor::Tensor;
use fedlitecan::training::stream_rng;
use rand::Rng;

use crate::error::CliError;

pub const MIN_ITERS: usize = 100;

/// Per-sample latency summary for one batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub batch: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub samples_per_sec: f64,
}

impl LatencyStats {
    /// `batch_seconds` holds one wall time per forward of `batch` windows.
    pub fn from_batch_times(batch_seconds: &[f64], batch: usize) -> Self {
        assert!(!batch_seconds.is_empty() && batch > 0);
        let mut per_sample_ms: Vec<f64> = batch_seconds.iter().map(|s| s * 1e3 / batch as f64).collect();
        per_sample_ms.sort_by(f64::total_cmp);
        let mean_ms = per_sample_ms.iter().sum::<f64>() / per_sample_ms.len() as f64;
        Self {
            batch,
            mean_ms,
            p50_ms: percentile(&per_sample_ms, 0.50),
            p99_ms: percentile(&per_sample_ms, 0.99),
            samples_per_sec: 1e3 / mean_ms,
        }
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub iters: usize,
    /// One window per forward.
    pub single: LatencyStats,
    /// `batched.batch` windows per forward.
    pub batched: LatencyStats,
    pub param_count: usize,
    pub param_bytes: usize,
    pub checkpoint_bytes: usize,
}

impl BenchReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iters={}", self.iters);
        for (prefix, st) in [("batch1", &self.single), ("batched", &self.batched)] {
            let _ = writeln!(s, "{prefix}.batch_size={}", st.batch);
            let _ = writeln!(s, "{prefix}.latency_mean_ms={:.6}", st.mean_ms);
            let _ = writeln!(s, "{prefix}.latency_p50_ms={:.6}", st.p50_ms);
            let _ = writeln!(s, "{prefix}.latency_p99_ms={:.6}", st.p99_ms);
            let _ = writeln!(s, "{prefix}.samples_per_sec={:.1}", st.samples_per_sec);
        }
        let _ = writeln!(s, "param_count={}", self.param_count);
        let _ = writeln!(s, "param_bytes={}", self.param_bytes);
        let _ = writeln!(s, "checkpoint_bytes={}", self.checkpoint_bytes);
        s
    }
}

fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream_rng(seed, batch as u64);
    let n = batch * cfg.window * FEATURES;
    let data = (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    Tensor::new(vec![batch, cfg.window, FEATURES], data).expect("shape matches data")
}

/// Wall time in seconds of each of `iters` eval-mode forwards over
/// `batch` windows, after `warmup` untimed forwards.
pub fn time_forwards(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    batch: usize,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<f64>, CliError> {
    let input = random_input(cfg, batch, seed);
    for _ in 0..warmup {
        black_box(logits(params, cfg, input.clone())?);
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let x = input.clone();
        let start = Instant::now();
        let out = logits(params, cfg, x)?;
        times.push(start.elapsed().as_secs_f64());
        black_box(out);
    }
    Ok(times)
}

pub fn run_bench(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    warmup: usize,
    iters: usize,
    batch: usize,
    seed: u64,
) -> Result<BenchReport, CliError> {
    if warmup < 1 {
        return Err(CliError::Config("bench needs at least one warmup iteration".into()));
    }
    if iters < MIN_ITERS {
        return Err(CliError::Config(format!(
            "bench needs at least {MIN_ITERS} timed iterations, got {iters}"
        )));
    }
    if batch == 0 {
        return Err(CliError::Config("bench batch size must be positive".into()));
    }
    let single = LatencyStats::from_batch_times(&time_forwards(params, cfg, 1, warmup, iters, seed)?, 1);
    let batched = LatencyStats::from_batch_times(&time_forwards(params, cfg, batch, warmup, iters, seed)?, batch);
    Ok(BenchReport {
        iters,
        single,
        batched,
        param_count: params.total_len(),
        param_bytes: cfg.size_bytes(),
        checkpoint_bytes: checkpoint_to_bytes(params, cfg).len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedlitecan::training::init_params;

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&[3.0], 0.99), 3.0);
    }

    #[test]
    fn stats_are_per_sample_and_consistent() {
        let st = LatencyStats::from_batch_times(&[0.004, 0.002, 0.006, 0.004], 4);
        assert!((st.mean_ms - 1.0).abs() < 1e-12);
        assert!((st.samples_per_sec - 1000.0).abs() < 1e-9);
        assert!(st.p50_ms <= st.p99_ms);
        assert!((st.p99_ms - 1.5).abs() < 1e-12);
    }

    #[test]
    fn report_matches_model_size_and_rejects_short_runs() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 1).unwrap();
        let r = run_bench(&p, &cfg, 2, MIN_ITERS, 16, 0).unwrap();
        assert_eq!(r.param_count, cfg.param_count());
        assert_eq!(r.param_bytes, cfg.size_bytes());
        assert!(r.checkpoint_bytes > r.param_bytes);
        assert!(r.single.p50_ms <= r.single.p99_ms && r.batched.p50_ms <= r.batched.p99_ms);
        assert!(r.to_key_values().contains("param_count=100932"));
        assert!(run_bench(&p, &cfg, 0, MIN_ITERS, 1, 0).is_err());
        assert!(run_bench(&p, &cfg, 1, MIN_ITERS - 1, 1, 0).is_err());
    }
}
