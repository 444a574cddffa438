//! A small decoder-only transformer trained from scratch on id streams.
//!
//! Three ways of handling word order are supported:
//!
//! * [`PositionalMode::Absolute`]: a learned position embedding is added to
//!   the token embedding (GPT-2 default).
//! * [`PositionalMode::None`]: no position signal at all; with one layer the
//!   model sees its causal prefix as a bag of words.
//! * [`PositionalMode::RelativeBias`]: no position embedding; instead each
//!   attention layer adds `W[h,i,j] = q_i · u(n−1+j−i)` to the raw scores,
//!   where `u` is a learned lookup table over the `2n−1` signed distances.
//!   Hidden states never receive position vectors, only attention weights
//!   depend on distance.
//!
//! Blocks are pre-norm (LayerNorm → attention → residual, LayerNorm → GELU
//! MLP → residual), followed by a final LayerNorm and an untied output
//! projection. All arithmetic is `f64`.

mod checkpoint;
mod model;
mod params;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, write_loss_csv};
pub use model::{forward, lm_loss, lm_loss_grad, loss_and_grad, ForwardOutput};
pub use params::{LayerParams, ModelMeta, Parameters, Tensor};
pub use train::{
    context_sequence, gradient_check, make_context_batches, train, train_sequences, GradCheckReport, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionalMode {
    Absolute,
    None,
    RelativeBias,
}

impl fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionalMode::Absolute => "absolute",
            PositionalMode::None => "none",
            PositionalMode::RelativeBias => "relative",
        })
    }
}

impl FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" => Ok(PositionalMode::Absolute),
            "none" => Ok(PositionalMode::None),
            "relative" | "relativebias" | "relative_bias" => Ok(PositionalMode::RelativeBias),
            _ => Err(Error::invalid(format!("unknown positional mode {s:?}"))),
        }
    }
}

/// Which per-head vector is dotted with the distance embedding in
/// [`PositionalMode::RelativeBias`] mode. Both use the vector at the
/// attending (row) position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BiasSource {
    #[default]
    Query,
    Key,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub positional_mode: PositionalMode,
    #[serde(default)]
    pub bias_source: BiasSource,
    /// Hidden width of the feed-forward block as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, positional_mode: PositionalMode) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_head: 8,
            vocab_size,
            max_seq: 64,
            positional_mode,
            bias_source: BiasSource::Query,
            ffn_mult: 4,
            init_std: 0.02,
            seed: 0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_mult * self.d_model()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.vocab_size == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid("model dimensions must all be >= 1"));
        }
        if self.max_seq < 2 {
            return Err(Error::invalid("max_seq must be >= 2"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::invalid("init_std must be positive"));
        }
        Ok(())
    }

    /// Hidden-state layer used for extraction: `ceil(3/4 · n_layers)`.
    pub fn extraction_layer(&self) -> usize {
        (3 * self.n_layers).div_ceil(4)
    }
}

/// `D[i][j] = n − 1 + j − i` for an `m`-token sequence and maximal length `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeDistanceMatrix {
    pub m: usize,
    pub n: usize,
    data: Vec<usize>,
}

impl RelativeDistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.data[i * self.m + j]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.data.chunks(self.m).map(<[usize]>::to_vec).collect()
    }
}

pub fn relative_distance(m: usize, n: usize) -> Result<RelativeDistanceMatrix> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("sequence length {m} must lie in [1, {n}]")));
    }
    let data = (0..m).flat_map(|i| (0..m).map(move |j| n - 1 + j - i)).collect();
    Ok(RelativeDistanceMatrix { m, n, data })
}

/// Distance-dependent attention bias.
///
/// `queries` is `n_heads × m × d_head`, `distance_embedded` is `m × m × d_head`
/// (the distance table looked up through a [`RelativeDistanceMatrix`]).
/// Returns `W` (`n_heads × m × m`) with `W[h][j][k] = Σ_d Q[h][j][d] U[j][k][d]`.
pub fn relative_bias(
    queries: &[f64],
    distance_embedded: &[f64],
    n_heads: usize,
    m: usize,
    d_head: usize,
) -> Result<Vec<f64>> {
    if queries.len() != n_heads * m * d_head || distance_embedded.len() != m * m * d_head {
        return Err(Error::shape(format!(
            "relative_bias expects {}x{}x{} queries and {}x{}x{} distance embeddings",
            n_heads, m, d_head, m, m, d_head
        )));
    }
    let mut w = vec![0.0; n_heads * m * m];
    for h in 0..n_heads {
        for j in 0..m {
            let q = &queries[(h * m + j) * d_head..(h * m + j + 1) * d_head];
            for k in 0..m {
                let u = &distance_embedded[(j * m + k) * d_head..(j * m + k + 1) * d_head];
                w[(h * m + j) * m + k] = q.iter().zip(u).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(w)
}

/// Looks up an `m × m × d_head` tensor from a `(2n−1) × d_head` table.
pub fn embed_distances(dist: &RelativeDistanceMatrix, table: &[f64], d_head: usize) -> Result<Vec<f64>> {
    if table.len() != (2 * dist.n - 1) * d_head {
        return Err(Error::shape("distance table must have 2n-1 rows"));
    }
    let m = dist.m;
    let mut out = Vec::with_capacity(m * m * d_head);
    for i in 0..m {
        for j in 0..m {
            let r = dist.get(i, j);
            out.extend_from_slice(&table[r * d_head..(r + 1) * d_head]);
        }
    }
    Ok(out)
}
