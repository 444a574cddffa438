//! Per-token embedding matrices for a stimulus stream.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_ids, FeatureStream, StreamMode, Vocabulary};
use crate::error::{Error, Result};
use crate::glove::EmbeddingTable;
use crate::io;
use crate::minigpt::{context_sequence, forward, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Static,
    Sliding,
    ContextLimited,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub layer: Option<usize>,
    pub protocol: Protocol,
    /// Window size `N` for sliding extraction, context size `k` for
    /// context-limited extraction.
    pub k_or_n: Option<usize>,
    pub stream: Option<StreamMode>,
    /// Number of tokens in the annotated corpus the rows come from.
    pub source_tokens: usize,
    /// Source token index of every row.
    pub alignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `w × d`, one row per stream item.
    pub data: DMatrix<f64>,
    pub provenance: Provenance,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    fn from_rows(rows: Vec<Vec<f64>>, d: usize, provenance: Provenance) -> Result<Self> {
        let w = rows.len();
        let data = DMatrix::from_fn(w, d, |i, j| rows[i][j]);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding matrix has non-finite entries"));
        }
        Ok(EmbeddingMatrix { data, provenance })
    }

    /// Places row `r` at source token `alignment[r]` of a full-length
    /// matrix; tokens absent from the stream get zero rows.
    pub fn scatter_to_tokens(&self) -> Result<EmbeddingMatrix> {
        let n = self.provenance.source_tokens;
        let mut data = DMatrix::zeros(n, self.cols());
        for (r, &tok) in self.provenance.alignment.iter().enumerate() {
            if tok >= n {
                return Err(Error::shape(format!("row {r} aligned to token {tok} of {n}")));
            }
            data.set_row(tok, &self.data.row(r));
        }
        let mut provenance = self.provenance.clone();
        provenance.alignment = (0..n).collect();
        Ok(EmbeddingMatrix { data, provenance })
    }

    pub fn is_token_aligned(&self) -> bool {
        let a = &self.provenance.alignment;
        a.len() == self.provenance.source_tokens && a.iter().enumerate().all(|(i, &t)| i == t)
    }

    /// Binary matrix plus a JSON provenance sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, d) = self.data.shape();
        let row_major: Vec<f64> = (0..w)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| self.data[(i, j)])
            .collect();
        io::write_matrix(path, w, d, &row_major)?;
        io::write_json(io::sidecar_path(path), &self.provenance)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (w, d, values) = io::read_matrix(path)?;
        let provenance: Provenance = io::read_json(io::sidecar_path(path))?;
        if provenance.alignment.len() != w {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} rows but {} aligned tokens", w, provenance.alignment.len()),
            });
        }
        Ok(EmbeddingMatrix {
            data: DMatrix::from_row_slice(w, d, &values),
            provenance,
        })
    }
}

fn stream_provenance(stream: &FeatureStream, source_tokens: usize) -> Result<(Option<StreamMode>, Vec<usize>)> {
    if stream.alignment.iter().any(|&a| a >= source_tokens) {
        return Err(Error::shape("stream alignment points past the source corpus"));
    }
    Ok((Some(stream.mode), stream.alignment.clone()))
}

/// Row `t` is the table vector of item `t`; unknown items use the
/// unknown-token row.
pub fn extract_static(
    stream: &FeatureStream,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    model: &str,
    source_tokens: usize,
) -> Result<EmbeddingMatrix> {
    if table.rows != vocab.len() {
        return Err(Error::shape(format!(
            "table has {} rows, vocabulary {} entries",
            table.rows,
            vocab.len()
        )));
    }
    if stream.mode != vocab.mode {
        return Err(Error::invalid(format!(
            "{} stream with a {} vocabulary",
            stream.mode, vocab.mode
        )));
    }
    let ids = encode_ids(stream, vocab);
    let rows = ids.iter().map(|&id| table.row(id).to_vec()).collect();
    let (mode, alignment) = stream_provenance(stream, source_tokens)?;
    EmbeddingMatrix::from_rows(
        rows,
        table.dim,
        Provenance {
            model: model.to_string(),
            layer: None,
            protocol: Protocol::Static,
            k_or_n: None,
            stream: mode,
            source_tokens,
            alignment,
        },
    )
}

fn check_layer(params: &Parameters, layer: usize) -> Result<()> {
    if layer == 0 || layer > params.config.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} outside 1..={}",
            params.config.n_layers
        )));
    }
    Ok(())
}

/// Start of the sliding window that holds token `t` as its next-to-last
/// element, with the window grown from the stream start when needed.
pub fn sliding_window(t: usize, len: usize, window: usize) -> std::ops::Range<usize> {
    let start = (t + 2).saturating_sub(window);
    start..(t + 2).min(len)
}

/// Layer-`layer` hidden state of every token, read from a forward pass over
/// the window that ends one token after it.
pub fn extract_sliding(
    ids: &[u32],
    params: &Parameters,
    window: usize,
    layer: usize,
    provenance: Provenance,
) -> Result<EmbeddingMatrix> {
    check_layer(params, layer)?;
    if window > params.config.max_seq {
        return Err(Error::invalid(format!(
            "window {window} exceeds max_seq {}",
            params.config.max_seq
        )));
    }
    if window < 2 {
        return Err(Error::invalid("sliding window must hold at least 2 tokens"));
    }
    let rows: Vec<Result<Vec<f64>>> = (0..ids.len())
        .into_par_iter()
        .map(|t| {
            let range = sliding_window(t, ids.len(), window);
            let start = range.start;
            let out = forward(params, &ids[range])?;
            Ok(out.hidden_row(layer, t - start).to_vec())
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows(
        rows,
        params.config.d_model(),
        Provenance {
            layer: Some(layer),
            protocol: Protocol::Sliding,
            k_or_n: Some(window),
            ..provenance
        },
    )
}

/// Hidden state of the current-token slot of each token's `k + 5` formatted
/// sequence. The model must carry `context_k = k` in its metadata.
pub fn extract_context_limited(
    ids: &[u32],
    params: &Parameters,
    k: usize,
    layer: usize,
    provenance: Provenance,
) -> Result<EmbeddingMatrix> {
    check_layer(params, layer)?;
    match params.meta.context_k {
        Some(trained) if trained == k => {}
        other => {
            return Err(Error::invalid(format!(
                "model was trained with context size {other:?}, extraction asked for {k}"
            )))
        }
    }
    if k + 5 > params.config.max_seq {
        return Err(Error::invalid(format!("context {k} needs max_seq >= {}", k + 5)));
    }
    let rows: Vec<Result<Vec<f64>>> = (0..ids.len())
        .into_par_iter()
        .map(|t| {
            let seq = context_sequence(ids, t, k);
            let out = forward(params, &seq)?;
            Ok(out.hidden_row(layer, k + 1).to_vec())
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows(
        rows,
        params.config.d_model(),
        Provenance {
            layer: Some(layer),
            protocol: Protocol::ContextLimited,
            k_or_n: Some(k),
            ..provenance
        },
    )
}

/// Provenance skeleton for contextual extraction from `stream`.
pub fn contextual_provenance(model: &str, stream: &FeatureStream, source_tokens: usize) -> Result<Provenance> {
    let (mode, alignment) = stream_provenance(stream, source_tokens)?;
    Ok(Provenance {
        model: model.to_string(),
        layer: None,
        protocol: Protocol::Sliding,
        k_or_n: None,
        stream: mode,
        source_tokens,
        alignment,
    })
}

/// Column-wise concatenation after scattering both inputs to the full
/// token list.
pub fn concat_features(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.provenance.source_tokens != b.provenance.source_tokens {
        return Err(Error::shape(format!(
            "cannot concatenate matrices over {} and {} source tokens",
            a.provenance.source_tokens, b.provenance.source_tokens
        )));
    }
    let (a, b) = (a.scatter_to_tokens()?, b.scatter_to_tokens()?);
    let (n, d1, d2) = (a.rows(), a.cols(), b.cols());
    let mut data = DMatrix::zeros(n, d1 + d2);
    data.view_mut((0, 0), (n, d1)).copy_from(&a.data);
    data.view_mut((0, d1), (n, d2)).copy_from(&b.data);
    Ok(EmbeddingMatrix {
        data,
        provenance: Provenance {
            model: format!("{}+{}", a.provenance.model, b.provenance.model),
            layer: None,
            protocol: Protocol::Concat,
            k_or_n: None,
            stream: None,
            source_tokens: n,
            alignment: (0..n).collect(),
        },
    })
}
