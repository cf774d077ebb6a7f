use serde::{Deserialize, Serialize};

use super::calib::EdgeStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest magnitude of the symmetric int8 range; −128 is never produced.
pub const QMAX: i32 = 127;

/// Round half away from zero and saturate to `[-127, 127]`.
#[inline]
pub fn round_clamp_i8(v: f64) -> i8 {
    v.round().clamp(-(QMAX as f64), QMAX as f64) as i8
}

/// Round half away from zero and saturate to the i32 range.
#[inline]
pub fn round_saturate_i32(v: f64) -> i32 {
    v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

pub fn quantize_value(x: f32, scale: f32) -> i8 {
    round_clamp_i8(x as f64 / scale as f64)
}

/// `q = clamp(round(x / scale), −127, 127)`.
pub fn quantize_tensor(x: &Tensor, scale: f32) -> Result<Tensor> {
    check_scale(scale)?;
    let q = x
        .as_f32()?
        .iter()
        .map(|&v| quantize_value(v, scale))
        .collect();
    Tensor::from_i8(x.shape().to_vec(), q)
}

/// `x = q · scale`.
pub fn dequantize(q: &Tensor, scale: f32) -> Result<Tensor> {
    check_scale(scale)?;
    let x = q.as_i8()?.iter().map(|&v| v as f32 * scale).collect();
    Tensor::from_f32(q.shape().to_vec(), x)
}

fn check_scale(scale: f32) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "quantization scale must be positive, got {scale}"
        )))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    MinMax,
    Kl,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" | "min-max" => Ok(Method::MinMax),
            "kl" => Ok(Method::Kl),
            other => Err(Error::Config(format!(
                "unknown calibration method `{other}`"
            ))),
        }
    }
}

/// A chosen activation scale. `degenerate` marks an all-zero edge whose scale
/// was set to 1.0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleChoice {
    pub scale: f32,
    pub degenerate: bool,
}

impl ScaleChoice {
    fn degenerate() -> Self {
        ScaleChoice {
            scale: 1.0,
            degenerate: true,
        }
    }
}

/// Symmetric scale `max(|min|, |max|) / 127`.
pub fn compute_scale_minmax(stats: &EdgeStats) -> Result<ScaleChoice> {
    if stats.count == 0 {
        return Err(Error::Calibration("edge was never observed".into()));
    }
    let r = stats.min.abs().max(stats.max.abs());
    if r == 0.0 {
        return Ok(ScaleChoice::degenerate());
    }
    Ok(ScaleChoice {
        scale: r / QMAX as f32,
        degenerate: false,
    })
}

/// Scale from the clip threshold that minimises KL(P ‖ Q).
///
/// For every candidate `i` from `target_bins` to the full histogram, `P` is
/// the first `i` bins with all mass beyond folded into bin `i − 1`, and `Q`
/// is the first `i` bins merged into `target_bins` chunks and spread back
/// uniformly over the nonzero bins of each chunk. The threshold is the
/// upper edge of bin `i − 1`; ties keep the larger threshold.
pub fn compute_scale_kl(stats: &EdgeStats, target_bins: usize) -> Result<ScaleChoice> {
    let hist = &stats.hist;
    let total: u64 = hist.iter().sum();
    if total == 0 || stats.count == 0 {
        return Err(Error::Calibration("histogram is empty".into()));
    }
    if stats.absmax == 0.0 {
        return Ok(ScaleChoice::degenerate());
    }
    let bins = hist.len();
    if target_bins == 0 || target_bins > bins {
        return Err(Error::Calibration(format!(
            "cannot merge {bins} bins into {target_bins}"
        )));
    }
    let mut best = (f64::INFINITY, bins);
    for i in (target_bins..=bins).rev() {
        let kl = clipped_kl(hist, i, target_bins);
        if kl < best.0 {
            best = (kl, i);
        }
    }
    let threshold = best.1 as f64 * stats.absmax as f64 / bins as f64;
    Ok(ScaleChoice {
        scale: (threshold / QMAX as f64) as f32,
        degenerate: false,
    })
}

pub(crate) fn clipped_kl(hist: &[u64], i: usize, target_bins: usize) -> f64 {
    let sliced: Vec<f64> = hist[..i].iter().map(|&c| c as f64).collect();
    let mut p = sliced.clone();
    p[i - 1] += hist[i..].iter().map(|&c| c as f64).sum::<f64>();

    // Q sees only the in-range mass; clipped outliers are what it lacks.
    let mut q = vec![0.0f64; i];
    for j in 0..target_bins {
        let lo = j * i / target_bins;
        let hi = (j + 1) * i / target_bins;
        let chunk = &sliced[lo..hi];
        let nonzero = chunk.iter().filter(|&&v| v > 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let share = chunk.iter().sum::<f64>() / nonzero as f64;
        for (k, &v) in chunk.iter().enumerate() {
            if v > 0.0 {
                q[lo + k] = share;
            }
        }
    }

    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if sq == 0.0 {
        return f64::INFINITY;
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        if a > 0.0 {
            if b == 0.0 {
                return f64::INFINITY;
            }
            let (a, b) = (a / sp, b / sq);
            kl += a * (a / b).ln();
        }
    }
    kl
}
