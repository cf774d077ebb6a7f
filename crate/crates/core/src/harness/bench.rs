use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-run wall-clock statistics in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the sorted samples.
    pub fn from_seconds(mut secs: Vec<f64>) -> Result<Self> {
        if secs.is_empty() {
            return Err(Error::Config("no timings recorded".into()));
        }
        secs.sort_by(f64::total_cmp);
        let n = secs.len();
        let rank = |p: f64| secs[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            runs: n,
            mean: secs.iter().sum::<f64>() / n as f64,
            p50: rank(0.50),
            p95: rank(0.95),
            min: secs[0],
            max: secs[n - 1],
        })
    }
}

/// Time `n_runs` inferences on `input` after `warmup` untimed ones.
pub fn bench(
    model: &dyn Model,
    input: &Tensor,
    n_runs: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if n_runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    for _ in 0..warmup {
        model.run(input)?;
    }
    let mut secs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t0 = Instant::now();
        std::hint::black_box(model.run(input)?);
        secs.push(t0.elapsed().as_secs_f64());
    }
    LatencyStats::from_seconds(secs)
}

/// Latencies of one model configuration before and after quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub fp32: LatencyStats,
    pub int8: Option<LatencyStats>,
}

impl BenchRow {
    /// Mean f32 time over mean int8 time.
    pub fn speedup(&self) -> Option<f64> {
        self.int8.as_ref().map(|q| self.fp32.mean / q.mean)
    }
}

/// Inference-time table: every f32 row at speedup 1.00, then every
/// quantized row with its speedup over the matching f32 row.
pub fn speedup_table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    s.push_str("| Model Type | Inference Time (s) | Speedup Factor |\n");
    s.push_str("|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {:.4} | 1.00 |", r.label, r.fp32.mean);
    }
    for r in rows {
        if let (Some(q), Some(x)) = (&r.int8, r.speedup()) {
            let _ = writeln!(s, "| {} (Quantized) | {:.4} | {x:.2} |", r.label, q.mean);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_median_is_mean() {
        let s = LatencyStats::from_seconds(vec![0.25]).unwrap();
        assert_eq!((s.runs, s.p50, s.p95), (1, 0.25, 0.25));
        assert_eq!(s.p50, s.mean);
        let s = LatencyStats::from_seconds((1..=20).map(|i| i as f64).collect()).unwrap();
        assert_eq!((s.p50, s.p95), (10.0, 19.0));
    }

    #[test]
    fn table_layout() {
        let st = |m: f64| LatencyStats::from_seconds(vec![m]).unwrap();
        let t = speedup_table(&[
            BenchRow {
                label: "Tiny".into(),
                fp32: st(0.61),
                int8: Some(st(0.47)),
            },
            BenchRow {
                label: "Base".into(),
                fp32: st(7.41),
                int8: Some(st(1.94)),
            },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(
            lines[0],
            "| Model Type | Inference Time (s) | Speedup Factor |"
        );
        assert_eq!(lines[2], "| Tiny | 0.6100 | 1.00 |");
        assert_eq!(lines[4], "| Tiny (Quantized) | 0.4700 | 1.30 |");
        assert_eq!(lines[5], "| Base (Quantized) | 1.9400 | 3.82 |");
    }
}
