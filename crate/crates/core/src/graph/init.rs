use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ir::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::Result;
use crate::tensor::Tensor;

/// Seeded random parameters for every name the graph consumes.
///
/// Weights, biases, tokens and `beta` are drawn from N(0, std²); `gamma`
/// from N(1, std²). Draw order follows [`Graph::param_specs`], so a seed
/// fixes the checkpoint bit for bit.
pub fn random_checkpoint(
    graph: &Graph,
    meta: CheckpointMeta,
    seed: u64,
    std: f32,
) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    let mut ckpt = Checkpoint::new(meta);
    for (name, shape) in graph.param_specs() {
        let n: usize = shape.iter().product();
        let offset = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        let data = (0..n).map(|_| offset + noise.sample(&mut rng)).collect();
        ckpt.insert(name, Tensor::from_f32(shape, data)?)?;
    }
    Ok(ckpt)
}
