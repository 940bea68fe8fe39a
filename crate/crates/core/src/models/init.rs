//! Parameter initialization. Every parameter draws from its own RNG stream
//! keyed by (seed, name), so adding or reordering parameters never shifts
//! the values of the others.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::io::fnv1a;
use crate::tensor::{ParameterSet, Tensor};

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Glorot-uniform weight matrix.
pub fn insert_xavier(
    params: &mut ParameterSet,
    seed: u64,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<()> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = param_rng(seed, name);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    params.insert(name, Tensor::new(vec![rows, cols], data)?.with_grad())
}

/// Zero-initialized bias vector.
pub fn insert_bias(params: &mut ParameterSet, name: &str, dim: usize) -> Result<()> {
    params.insert(name, Tensor::zeros(vec![dim]).with_grad())
}

/// Small-normal embedding vector (special tokens, utterance embeddings).
pub fn insert_embedding(
    params: &mut ParameterSet,
    seed: u64,
    name: &str,
    dim: usize,
) -> Result<()> {
    let mut rng = param_rng(seed, name);
    let data: Vec<f64> = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.02 * z
        })
        .collect();
    params.insert(name, Tensor::new(vec![dim], data)?.with_grad())
}

/// Batch-norm block: learned scale/shift plus running statistics and a step
/// counter (zero steps means "not fitted yet").
pub fn insert_batch_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(
        format!("{prefix}.gamma"),
        Tensor::filled(vec![dim], 1.0).with_grad(),
    )?;
    params.insert(
        format!("{prefix}.beta"),
        Tensor::zeros(vec![dim]).with_grad(),
    )?;
    params.insert(format!("{prefix}.mean"), Tensor::zeros(vec![dim]))?;
    params.insert(format!("{prefix}.var"), Tensor::filled(vec![dim], 1.0))?;
    params.insert(format!("{prefix}.steps"), Tensor::zeros(vec![1]))?;
    Ok(())
}

/// Encoder layer parameters under `{prefix}`: per-head projections, output
/// projection, positionwise feed-forward pair, two batch-norm stages.
pub fn insert_encoder_layer(
    params: &mut ParameterSet,
    seed: u64,
    prefix: &str,
    adim: usize,
    n_heads: usize,
    units: usize,
) -> Result<()> {
    let dk = adim / n_heads;
    for h in 0..n_heads {
        insert_xavier(params, seed, &format!("{prefix}.attn.wq.{h}"), adim, dk)?;
        insert_xavier(params, seed, &format!("{prefix}.attn.wk.{h}"), adim, dk)?;
        insert_xavier(params, seed, &format!("{prefix}.attn.wv.{h}"), adim, dk)?;
    }
    insert_xavier(params, seed, &format!("{prefix}.attn.wo"), adim, adim)?;
    insert_xavier(params, seed, &format!("{prefix}.ffn.w1"), adim, units)?;
    insert_bias(params, &format!("{prefix}.ffn.b1"), units)?;
    insert_xavier(params, seed, &format!("{prefix}.ffn.w2"), units, adim)?;
    insert_bias(params, &format!("{prefix}.ffn.b2"), adim)?;
    insert_batch_norm(params, &format!("{prefix}.bn1"), adim)?;
    insert_batch_norm(params, &format!("{prefix}.bn2"), adim)?;
    Ok(())
}
