use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rewrite::RewritePlan;
use crate::tensor::Tensor;

/// How one parameter of a lowered graph is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDirective {
    pub name: String,
    pub source: ParamSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSource {
    /// Same values and shape.
    Copy { from: String },
    /// Same values in the same order under a new shape.
    Reshape { from: String, shape: Vec<usize> },
    /// Filled with one value; not present in the source checkpoint.
    Constant { value: f32, shape: Vec<usize> },
}

/// Build the checkpoint for `lowered` from the original one.
///
/// Parameters named by a plan directive are derived from it; all others are
/// copied verbatim and must match the shape the lowered graph expects.
pub fn inherit_weights(
    ckpt: &Checkpoint,
    lowered: &Graph,
    plan: &RewritePlan,
) -> Result<Checkpoint> {
    let mut out = Checkpoint::new(ckpt.meta.clone());
    for (name, shape) in lowered.param_specs() {
        let directive = plan.params.iter().rev().find(|d| d.name == name);
        let t = match directive.map(|d| &d.source) {
            Some(ParamSource::Constant { value, shape: s }) => {
                if *s != shape {
                    return Err(Error::dim(format!(
                        "constant for `{name}` has shape {s:?}, graph expects {shape:?}"
                    )));
                }
                Tensor::full(shape, *value)?
            }
            Some(ParamSource::Reshape { from, shape: s }) => {
                let src = ckpt.get(from)?;
                if *s != shape {
                    return Err(Error::dim(format!(
                        "`{from}` is reshaped to {s:?} but `{name}` expects {shape:?}"
                    )));
                }
                src.reshape(s).map_err(|e| {
                    Error::dim(format!(
                        "cannot reshape `{from}` {:?} into `{name}` {s:?}: {e}",
                        src.shape()
                    ))
                })?
            }
            Some(ParamSource::Copy { from }) => copy_checked(ckpt, from, &name, &shape)?,
            None => copy_checked(ckpt, &name, &name, &shape)?,
        };
        out.insert(name, t)?;
    }
    Ok(out)
}

fn copy_checked(ckpt: &Checkpoint, from: &str, name: &str, shape: &[usize]) -> Result<Tensor> {
    let src = ckpt.get(from)?;
    if src.shape() != shape {
        return Err(Error::dim(format!(
            "`{from}` has shape {:?}, `{name}` expects {shape:?}",
            src.shape()
        )));
    }
    Ok(src.clone())
}
