use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{argmax, rows, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Regulariser of the relative-error denominator.
const REL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub model_a: String,
    pub model_b: String,
    pub samples: usize,
    /// Mean over all output elements of `|a − b| / (|a| + 1e-8)`.
    pub mean_rel_error: f64,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    /// Fraction of output rows with the same argmax.
    pub argmax_agreement: f64,
    /// Signal-to-noise ratio of `b` against `a` in dB; `None` when the
    /// outputs are identical.
    pub sqnr_db: Option<f64>,
    pub rtol: f64,
    pub atol: f64,
    pub pass: bool,
}

/// `10·log₁₀(‖a‖² / ‖a − b‖²)`; infinite when the outputs agree exactly.
pub fn sqnr_db(signal: &[f32], other: &[f32]) -> f64 {
    let (mut s, mut n) = (0.0f64, 0.0f64);
    for (&a, &b) in signal.iter().zip(other) {
        s += (a as f64).powi(2);
        n += (a as f64 - b as f64).powi(2);
    }
    if n == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (s / n).log10()
    }
}

/// Seeded N(0, 1) inputs of the given shape.
pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let v = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::from_f32(shape.to_vec(), v)
        })
        .collect()
}

/// Compare two models on `n_inputs` seeded N(0, 1) inputs. Passes iff the
/// mean relative error is at most `rtol` and the mean absolute error at
/// most `atol`.
pub fn verify_equivalence(
    a: &dyn Model,
    b: &dyn Model,
    n_inputs: usize,
    rtol: f64,
    atol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    check_shapes(a, b)?;
    let inputs = random_inputs(a.input_shape(), n_inputs, seed)?;
    verify_on(a, b, &inputs, rtol, atol)
}

/// [`verify_equivalence`] over caller-supplied inputs.
pub fn verify_on(
    a: &dyn Model,
    b: &dyn Model,
    inputs: &[Tensor],
    rtol: f64,
    atol: f64,
) -> Result<EquivalenceReport> {
    check_shapes(a, b)?;
    if inputs.is_empty() {
        return Err(Error::Config(
            "equivalence check needs at least one input".into(),
        ));
    }
    let (mut rel, mut abs, mut max_abs) = (0.0f64, 0.0f64, 0.0f64);
    let (mut count, mut agree, mut nrows) = (0usize, 0usize, 0usize);
    let (mut sig, mut noise) = (0.0f64, 0.0f64);
    for x in inputs {
        let ya = a.run(x)?;
        let yb = b.run(x)?;
        for (&p, &q) in ya.as_f32()?.iter().zip(yb.as_f32()?) {
            let d = (p as f64 - q as f64).abs();
            rel += d / ((p as f64).abs() + REL_EPS);
            abs += d;
            max_abs = max_abs.max(d);
            sig += (p as f64).powi(2);
            noise += d * d;
            count += 1;
        }
        for (ra, rb) in rows(&ya)?.into_iter().zip(rows(&yb)?) {
            agree += (argmax(ra) == argmax(rb)) as usize;
            nrows += 1;
        }
    }
    let mean_rel_error = rel / count as f64;
    let mean_abs_error = abs / count as f64;
    Ok(EquivalenceReport {
        model_a: a.name().to_string(),
        model_b: b.name().to_string(),
        samples: inputs.len(),
        mean_rel_error,
        mean_abs_error,
        max_abs_error: max_abs,
        argmax_agreement: agree as f64 / nrows as f64,
        sqnr_db: (noise > 0.0).then(|| 10.0 * (sig / noise).log10()),
        rtol,
        atol,
        pass: mean_rel_error <= rtol && mean_abs_error <= atol,
    })
}

fn check_shapes(a: &dyn Model, b: &dyn Model) -> Result<()> {
    if a.input_shape() != b.input_shape() || a.output_shape() != b.output_shape() {
        return Err(Error::dim(format!(
            "`{}` maps {:?} to {:?} but `{}` maps {:?} to {:?}",
            a.name(),
            a.input_shape(),
            a.output_shape(),
            b.name(),
            b.input_shape(),
            b.output_shape()
        )));
    }
    Ok(())
}
