use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{argmax, rows, Dataset, Model};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub sample: String,
    pub annotation: String,
    pub prediction_a: String,
    pub prediction_b: String,
}

impl MismatchRow {
    pub fn models_disagree(&self) -> bool {
        self.prediction_a != self.prediction_b
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub model_a: String,
    pub model_b: String,
    pub samples: usize,
    pub rows: Vec<MismatchRow>,
}

impl MismatchReport {
    /// Rows where the two models predict different classes.
    pub fn disagreements(&self) -> impl Iterator<Item = &MismatchRow> {
        self.rows.iter().filter(|r| r.models_disagree())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| Sample | Annotation | {} Prediction | {} Prediction |",
            self.model_a, self.model_b
        );
        s.push_str("|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r.sample, r.annotation, r.prediction_a, r.prediction_b
            );
        }
        s
    }
}

/// Every sample where either model disagrees with the annotation or the two
/// models disagree with each other, in dataset order.
pub fn report_mismatches(
    a: &dyn Model,
    b: &dyn Model,
    dataset: &Dataset,
) -> Result<MismatchReport> {
    if a.output_shape() != b.output_shape() {
        return Err(Error::dim(format!(
            "models emit {:?} and {:?}",
            a.output_shape(),
            b.output_shape()
        )));
    }
    let mut out = Vec::new();
    for s in &dataset.samples {
        let pa = argmax(rows(&a.run(&s.input)?)?[0]);
        let pb = argmax(rows(&b.run(&s.input)?)?[0]);
        if pa != s.label || pb != s.label || pa != pb {
            out.push(MismatchRow {
                sample: s.id.clone(),
                annotation: dataset.class_name(s.label),
                prediction_a: dataset.class_name(pa),
                prediction_b: dataset.class_name(pb),
            });
        }
    }
    Ok(MismatchReport {
        model_a: a.name().to_string(),
        model_b: b.name().to_string(),
        samples: dataset.len(),
        rows: out,
    })
}
