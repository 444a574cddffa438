//! Glue between token-level artifacts and per-run design matrices.

use std::collections::HashMap;

use irnlm::corpus::{AnnotatedCorpus, AnnotatedToken};
use irnlm::embed::EmbeddingMatrix;
use irnlm::encoding::{
    append_baseline, baseline_regressors, build_design, log_frequencies, nested_cv_encode, preprocess_bold, BoldRun,
    HrfKernel,
};
use irnlm::maps::{MapKind, VoxelMap};
use irnlm::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Which edge of a word its event sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventTime {
    #[default]
    Offset,
    Onset,
}

impl EventTime {
    pub fn of(self, t: &AnnotatedToken) -> f64 {
        match self {
            EventTime::Offset => t.offset_s,
            EventTime::Onset => t.onset_s,
        }
    }
}

/// How a restricted stream (e.g. content words only) enters the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamRows {
    /// One event per token; tokens outside the stream get zero rows.
    #[default]
    ZeroFill,
    /// Events only at the stream's own tokens.
    StreamEvents,
}

/// Word-offset times of every token, one list per run.
pub fn run_offsets(corpus: &AnnotatedCorpus) -> Vec<Vec<f64>> {
    corpus
        .run_ranges()
        .into_iter()
        .map(|(_, r)| corpus.tokens[r].iter().map(|t| t.offset_s).collect())
        .collect()
}

/// Per run, the feature rows and event times of `m` under `rows`.
pub fn run_events(
    m: &EmbeddingMatrix,
    corpus: &AnnotatedCorpus,
    rows: StreamRows,
    at: EventTime,
) -> Result<Vec<(DMatrix<f64>, Vec<f64>)>> {
    if rows == StreamRows::ZeroFill || m.is_token_aligned() {
        let x = split_runs(m, corpus)?;
        let times = corpus
            .run_ranges()
            .into_iter()
            .map(|(_, r)| corpus.tokens[r].iter().map(|t| at.of(t)).collect());
        return Ok(x.into_iter().zip(times).collect());
    }
    if m.provenance.source_tokens != corpus.len() {
        return Err(Error::shape(format!(
            "embeddings cover {} tokens, corpus has {}",
            m.provenance.source_tokens,
            corpus.len()
        )));
    }
    let align = &m.provenance.alignment;
    Ok(corpus
        .run_ranges()
        .into_iter()
        .map(|(_, r)| {
            let idx: Vec<usize> = (0..align.len()).filter(|&i| r.contains(&align[i])).collect();
            let x = m.data.select_rows(&idx);
            let times = idx.iter().map(|&i| at.of(&corpus.tokens[align[i]])).collect();
            (x, times)
        })
        .collect())
}

/// Splits a token-aligned matrix (or a stream matrix, after scattering)
/// into per-run row blocks.
pub fn split_runs(m: &EmbeddingMatrix, corpus: &AnnotatedCorpus) -> Result<Vec<DMatrix<f64>>> {
    if m.provenance.source_tokens != corpus.len() {
        return Err(Error::shape(format!(
            "embeddings cover {} tokens, corpus has {}",
            m.provenance.source_tokens,
            corpus.len()
        )));
    }
    let full = if m.is_token_aligned() {
        m.clone()
    } else {
        m.scatter_to_tokens()?
    };
    Ok(corpus
        .run_ranges()
        .into_iter()
        .map(|(_, r)| full.data.rows(r.start, r.len()).into_owned())
        .collect())
}

/// Standardized design per run from per-run feature rows and event times.
pub fn model_designs(
    x: &[DMatrix<f64>],
    times: &[Vec<f64>],
    kernel: &HrfKernel,
    tr_s: f64,
    n_scans: usize,
) -> Result<Vec<DMatrix<f64>>> {
    x.iter()
        .zip(times)
        .map(|(xr, t)| build_design(xr, t, kernel, tr_s, n_scans, true))
        .collect()
}

/// Acoustic energy, word rate and log frequency per run. Word events are
/// the non-punctuation tokens; frequencies are counted over the corpus
/// itself.
pub fn baseline_designs(
    corpus: &AnnotatedCorpus,
    audio: &[Vec<(f64, f64)>],
    at: EventTime,
    kernel: &HrfKernel,
    tr_s: f64,
    n_scans: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let ranges = corpus.run_ranges();
    if audio.len() != ranges.len() {
        return Err(Error::shape(format!(
            "{} audio tracks for {} runs",
            audio.len(),
            ranges.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in corpus.tokens.iter().filter(|t| t.pos != "PUNCT") {
        *counts.entry(t.surface.to_lowercase()).or_default() += 1;
    }
    ranges
        .into_iter()
        .zip(audio)
        .map(|((_, r), track)| {
            let words: Vec<_> = corpus.tokens[r].iter().filter(|t| t.pos != "PUNCT").collect();
            let times: Vec<f64> = words.iter().map(|t| at.of(t)).collect();
            let surfaces: Vec<String> = words.iter().map(|t| t.surface.to_lowercase()).collect();
            let freqs = log_frequencies(&surfaces, &counts);
            baseline_regressors(track, &times, &freqs, kernel, tr_s, n_scans)
        })
        .collect()
}

/// Detrended, z-scored data of each run.
pub fn clean_runs(runs: &[BoldRun]) -> Result<Vec<DMatrix<f64>>> {
    runs.iter().map(|r| preprocess_bold(r).map(|(c, _)| c.data)).collect()
}

/// Cross-validated R map of one subject.
pub fn encode_map(
    designs: &[DMatrix<f64>],
    bold: &[DMatrix<f64>],
    geometry: &irnlm::maps::Geometry,
    lambdas: &[f64],
    label: &str,
) -> Result<VoxelMap> {
    let res = nested_cv_encode(designs, bold, lambdas, None)?;
    Ok(VoxelMap::new(res.r, geometry.clone(), MapKind::R)?.with_provenance(vec![label.to_string()]))
}

/// `designs` with the baseline columns appended, or the baseline alone.
pub fn with_baseline(model: Option<&[DMatrix<f64>]>, baseline: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    match model {
        Some(m) => append_baseline(m, baseline),
        None => Ok(baseline.to_vec()),
    }
}
