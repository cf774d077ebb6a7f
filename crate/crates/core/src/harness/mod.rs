//! Equivalence checks, accuracy evaluation, benchmarking and mismatch
//! reports over interchangeable [`Model`]s, plus the command-line driver.

mod bench;
pub mod cli;
mod dataset;
mod eval;
mod mismatch;
pub(crate) mod verify;

pub use bench::{bench, speedup_table, BenchRow, LatencyStats};
pub use dataset::{Dataset, Sample, SYNTHETIC_CLASSES};
pub use eval::{accuracy_table, eval_topk, AccuracyRow, EvalResult, Prediction};
pub use mismatch::{report_mismatches, MismatchReport, MismatchRow};
pub use verify::{random_inputs, sqnr_db, verify_equivalence, verify_on, EquivalenceReport};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{execute, Graph};
use crate::quant::{execute_quantized, QuantizedGraph};
use crate::tensor::Tensor;

/// Anything that maps an input tensor to logits.
pub trait Model {
    fn name(&self) -> &str;
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    fn run(&self, input: &Tensor) -> Result<Tensor>;
}

/// An f32 graph with its parameters.
pub struct FloatModel {
    pub name: String,
    pub graph: Graph,
    pub params: Checkpoint,
}

impl Model for FloatModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }
    fn output_shape(&self) -> &[usize] {
        self.graph.output_shape()
    }
    fn run(&self, input: &Tensor) -> Result<Tensor> {
        execute(&self.graph, &self.params, input)
    }
}

pub struct QuantModel {
    pub name: String,
    pub qg: QuantizedGraph,
}

impl Model for QuantModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn input_shape(&self) -> &[usize] {
        self.qg.graph.input_shape()
    }
    fn output_shape(&self) -> &[usize] {
        self.qg.graph.output_shape()
    }
    fn run(&self, input: &Tensor) -> Result<Tensor> {
        execute_quantized(&self.qg, input)
    }
}

/// Returns the same logits for every input.
pub struct ConstantModel {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub output: Tensor,
}

impl ConstantModel {
    pub fn zeros(input_shape: &[usize], output_shape: &[usize]) -> Result<Self> {
        Ok(ConstantModel {
            name: "zero".into(),
            input_shape: input_shape.to_vec(),
            output: Tensor::zeros(output_shape.to_vec())?,
        })
    }
}

impl Model for ConstantModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
    fn output_shape(&self) -> &[usize] {
        self.output.shape()
    }
    fn run(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "model input is {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(self.output.clone())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, largest first; ties by lower index.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Split `(B, …, K)` logits into `B` rows.
pub(crate) fn rows(logits: &Tensor) -> Result<Vec<&[f32]>> {
    let k = *logits.shape().last().unwrap_or(&1);
    Ok(logits.as_f32()?.chunks(k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
        assert_eq!(top_k(&[0.5, 2.0, 0.5, 2.0, 1.0], 3), vec![1, 3, 4]);
        assert_eq!(top_k(&[0.0; 4], 2), vec![0, 1]);
    }
}
