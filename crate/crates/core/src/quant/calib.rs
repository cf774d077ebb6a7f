use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{quantized_edges, QuantOptions};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{execute_observed, Graph};
use crate::tensor::Tensor;

pub const HIST_BINS: usize = 2048;

/// Running statistics for one activation edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub min: f32,
    pub max: f32,
    /// `max(|min|, |max|)`, the upper edge of the histogram.
    pub absmax: f32,
    /// Counts of `|x|` over `[0, absmax]`.
    pub hist: Vec<u64>,
    /// Number of observed elements.
    pub count: u64,
}

impl Default for EdgeStats {
    fn default() -> Self {
        EdgeStats {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            absmax: 0.0,
            hist: vec![0; HIST_BINS],
            count: 0,
        }
    }
}

impl EdgeStats {
    pub fn observe_range(&mut self, values: &[f32]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.absmax = self.min.abs().max(self.max.abs());
    }

    /// Bin `|x|` against the current `absmax`; call after all ranges are
    /// known.
    pub fn observe_hist(&mut self, values: &[f32]) {
        let bins = self.hist.len();
        let width = self.absmax as f64 / bins as f64;
        for &v in values {
            let b = if width > 0.0 {
                ((v.abs() as f64 / width) as usize).min(bins - 1)
            } else {
                0
            };
            self.hist[b] += 1;
        }
        self.count += values.len() as u64;
    }

    /// Combine the ranges of two partial results. Histograms are only
    /// mergeable when both were binned against the same `absmax`.
    pub fn merge(&mut self, other: &EdgeStats) -> Result<()> {
        if self.count > 0 && other.count > 0 && self.absmax != other.absmax {
            return Err(Error::Calibration(
                "cannot merge histograms binned over different ranges".into(),
            ));
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.absmax = self.min.abs().max(self.max.abs());
        for (a, b) in self.hist.iter_mut().zip(&other.hist) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }
}

/// Statistics for every edge feeding or leaving an int8 node, keyed by edge
/// name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub samples: usize,
    pub edges: BTreeMap<String, EdgeStats>,
}

impl CalibStats {
    pub fn get(&self, edge: &str) -> Result<&EdgeStats> {
        self.edges
            .get(edge)
            .ok_or_else(|| Error::Coverage(edge.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Calibrate with default options; see [`calibrate_with`].
pub fn calibrate(graph: &Graph, params: &Checkpoint, calib: &[Tensor]) -> Result<CalibStats> {
    calibrate_with(graph, params, calib, &QuantOptions::default())
}

/// Run the lowered graph in f32 over the calibration set and record ranges
/// and histograms at every edge the quantized graph will quantize.
///
/// The set is traversed twice: ranges first, then histograms over the final
/// range, so the result does not depend on sample order.
pub fn calibrate_with(
    graph: &Graph,
    params: &Checkpoint,
    calib: &[Tensor],
    opts: &QuantOptions,
) -> Result<CalibStats> {
    if calib.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    for (i, x) in calib.iter().enumerate() {
        if x.shape() != graph.input_shape() {
            return Err(Error::dim(format!(
                "calibration sample {i} is {:?}, graph input is {:?}",
                x.shape(),
                graph.input_shape()
            )));
        }
    }
    let edges = quantized_edges(graph, opts);
    let slot: HashMap<usize, usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let mut stats = vec![EdgeStats::default(); edges.len()];

    let mut non_finite = None;
    for x in calib {
        execute_observed(graph, params, x, |e, t| {
            if let (Some(&i), Ok(v)) = (slot.get(&e), t.as_f32()) {
                if non_finite.is_none() && v.iter().any(|x| !x.is_finite()) {
                    non_finite = Some(e);
                }
                stats[i].observe_range(v);
            }
        })?;
    }
    if let Some(e) = non_finite {
        return Err(Error::Calibration(format!(
            "edge `{}` produced non-finite values",
            graph.edge_name(e)
        )));
    }
    for x in calib {
        execute_observed(graph, params, x, |e, t| {
            if let (Some(&i), Ok(v)) = (slot.get(&e), t.as_f32()) {
                stats[i].observe_hist(v);
            }
        })?;
    }

    Ok(CalibStats {
        samples: calib.len(),
        edges: edges
            .iter()
            .zip(stats)
            .map(|(&e, s)| (graph.edge_name(e), s))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_extrema() {
        let mut s = EdgeStats::default();
        s.observe_range(&[-2.5, 0.3, 1.0]);
        assert_eq!((s.min, s.max), (-2.5, 1.0));
        s.observe_range(&[-1.0, 1.0]);
        assert_eq!((s.min, s.max), (-2.5, 1.0));

        let mut a = EdgeStats::default();
        a.observe_range(&[-1.0, 1.0]);
        a.observe_range(&[-3.0, 2.0]);
        assert_eq!((a.min, a.max, a.absmax), (-3.0, 2.0, 3.0));
    }

    #[test]
    fn histogram_counts_every_element() {
        let v = [-3.0f32, -1.5, 0.0, 0.7, 3.0];
        let mut s = EdgeStats::default();
        s.observe_range(&v);
        s.observe_hist(&v);
        assert_eq!(s.hist.iter().sum::<u64>(), 5);
        assert_eq!(s.count, 5);
        assert_eq!(s.hist[HIST_BINS - 1], 2);
        assert_eq!(s.hist[0], 1);
        assert_eq!(s.hist[1024], 1);
    }
}
