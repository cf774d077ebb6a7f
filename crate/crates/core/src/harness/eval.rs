use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{rows, top_k, Dataset, LatencyStats, Model};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: String,
    pub label: usize,
    pub predicted: usize,
    pub top5: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub samples: usize,
    /// Percentages in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
    /// Accuracy for every requested `k`.
    pub topk: BTreeMap<usize, f64>,
    pub records: Vec<Prediction>,
    /// Wall-clock time per sample; not part of the deterministic output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

/// Top-k accuracy over a labelled dataset. A sample is correct for `k` when
/// its label is among the `k` largest logits, ties resolved toward lower
/// class indices. Top-1 and top-5 are always reported.
pub fn eval_topk(model: &dyn Model, dataset: &Dataset, ks: &[usize]) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut ks: Vec<usize> = ks
        .iter()
        .copied()
        .chain([1, 5])
        .filter(|&k| k > 0)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    let kmax = *ks.last().unwrap_or(&5);

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut records = Vec::with_capacity(dataset.len());
    let mut times = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let t0 = Instant::now();
        let logits = model.run(&s.input)?;
        times.push(t0.elapsed().as_secs_f64());
        let row = rows(&logits)?[0];
        let ranked = top_k(row, kmax);
        for (&k, h) in hits.iter_mut() {
            *h += ranked.iter().take(k).any(|&c| c == s.label) as usize;
        }
        records.push(Prediction {
            sample: s.id.clone(),
            label: s.label,
            predicted: ranked[0],
            top5: ranked.iter().take(5).copied().collect(),
        });
    }
    let n = dataset.len() as f64;
    let topk: BTreeMap<usize, f64> = hits
        .into_iter()
        .map(|(k, h)| (k, 100.0 * h as f64 / n))
        .collect();
    Ok(EvalResult {
        model: model.name().to_string(),
        samples: dataset.len(),
        top1: topk[&1],
        top5: topk[&5],
        topk,
        records,
        latency: Some(LatencyStats::from_seconds(times)?),
    })
}

/// One line of the before/after quantization accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub original: (f64, f64),
    pub quantized: (f64, f64),
}

/// Top-1/Top-5 before and after quantization, drops in parentheses.
pub fn accuracy_table(rows: &[AccuracyRow]) -> String {
    let mut s = String::new();
    s.push_str("| Model | Original Top-1 (%) | Original Top-5 (%) | Quantized Top-1 (%) | Quantized Top-5 (%) |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        let (o1, o5) = r.original;
        let (q1, q5) = r.quantized;
        let _ = writeln!(
            s,
            "| {} | {o1:.1} | {o5:.1} | {q1:.1} ({:+.1}) | {q5:.1} ({:+.1}) |",
            r.model,
            q1 - o1,
            q5 - o5
        );
    }
    s
}
