//! Static word vectors from global co-occurrence counts.
//!
//! Co-occurrences are distance-weighted (`1/d` within a symmetric window) and
//! never cross document boundaries. Training minimises
//!
//! ```text
//! J = Σ_ij f(X_ij) (w_i·w̃_j + b_i + b̃_j − ln X_ij)²,   f(x) = min(1, (x/x_max)^α)
//! ```
//!
//! with per-coordinate AdaGrad steps over shuffled non-zero entries. The
//! exported vector of a word is `w + w̃`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoocMatrix {
    pub vocab_size: usize,
    entries: BTreeMap<(u32, u32), f64>,
}

impl CoocMatrix {
    pub fn new(vocab_size: usize) -> Self {
        CoocMatrix {
            vocab_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, a: u32, b: u32) -> f64 {
        self.entries.get(&(a, b)).copied().unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.entries.iter().map(|(&(a, b), &x)| (a, b, x))
    }

    /// Adds another shard, e.g. the counts of a separate document.
    pub fn merge(&mut self, other: &CoocMatrix) -> Result<()> {
        if other.vocab_size != self.vocab_size {
            return Err(Error::shape("co-occurrence shards disagree on vocabulary size"));
        }
        for (&k, &x) in &other.entries {
            *self.entries.entry(k).or_default() += x;
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries.iter().all(|(&(a, b), &x)| self.get(b, a) == x)
    }
}

/// Accumulates distance-weighted counts within each document.
pub fn build_cooccurrence(docs: &[Vec<u32>], window: usize, vocab_size: usize) -> Result<CoocMatrix> {
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let mut m = CoocMatrix::new(vocab_size);
    for doc in docs {
        if let Some(&id) = doc.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::IdOutOfRange { id, size: vocab_size });
        }
        for (i, &a) in doc.iter().enumerate() {
            let hi = (i + window).min(doc.len() - 1);
            for (j, &b) in doc.iter().enumerate().take(hi + 1).skip(i + 1) {
                let w = 1.0 / (j - i) as f64;
                *m.entries.entry((a, b)).or_default() += w;
                *m.entries.entry((b, a)).or_default() += w;
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GloveConfig {
    pub window: usize,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub x_max: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GloveConfig {
    fn default() -> Self {
        GloveConfig {
            window: 15,
            dim: 32,
            epochs: 23,
            learning_rate: 0.05,
            x_max: 100.0,
            alpha: 0.75,
            seed: 1,
        }
    }
}

impl GloveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.dim < 1 {
            return Err(Error::invalid("glove window and dim must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.x_max > 0.0) {
            return Err(Error::invalid("glove learning rate and x_max must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("glove alpha must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn weight(&self, x: f64) -> f64 {
        if x >= self.x_max {
            1.0
        } else {
            (x / self.x_max).powf(self.alpha)
        }
    }
}

/// Word and context parameters during training, with AdaGrad accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct GloveState {
    pub dim: usize,
    pub word: Vec<f64>,
    pub context: Vec<f64>,
    pub word_bias: Vec<f64>,
    pub context_bias: Vec<f64>,
    grad_sq_word: Vec<f64>,
    grad_sq_context: Vec<f64>,
    grad_sq_word_bias: Vec<f64>,
    grad_sq_context_bias: Vec<f64>,
}

impl GloveState {
    pub fn init(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| (rng.random::<f64>() - 0.5) / dim as f64).collect() };
        let word = draw(vocab_size * dim);
        let context = draw(vocab_size * dim);
        let word_bias = draw(vocab_size);
        let context_bias = draw(vocab_size);
        GloveState {
            dim,
            word,
            context,
            word_bias,
            context_bias,
            grad_sq_word: vec![1.0; vocab_size * dim],
            grad_sq_context: vec![1.0; vocab_size * dim],
            grad_sq_word_bias: vec![1.0; vocab_size],
            grad_sq_context_bias: vec![1.0; vocab_size],
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        GloveState {
            dim,
            word: vec![0.0; vocab_size * dim],
            context: vec![0.0; vocab_size * dim],
            word_bias: vec![0.0; vocab_size],
            context_bias: vec![0.0; vocab_size],
            grad_sq_word: vec![1.0; vocab_size * dim],
            grad_sq_context: vec![1.0; vocab_size * dim],
            grad_sq_word_bias: vec![1.0; vocab_size],
            grad_sq_context_bias: vec![1.0; vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.word_bias.len()
    }

    /// `w_a·w̃_b + b_a + b̃_b`.
    pub fn score(&self, a: u32, b: u32) -> f64 {
        let (a, b) = (a as usize, b as usize);
        let d = self.dim;
        let dot: f64 = self.word[a * d..(a + 1) * d]
            .iter()
            .zip(&self.context[b * d..(b + 1) * d])
            .map(|(x, y)| x * y)
            .sum();
        dot + self.word_bias[a] + self.context_bias[b]
    }

    fn update(&mut self, a: usize, b: usize, step: f64) {
        let d = self.dim;
        for k in 0..d {
            let ia = a * d + k;
            let ib = b * d + k;
            let g_word = step * self.context[ib];
            let g_ctx = step * self.word[ia];
            let upd_word = g_word / self.grad_sq_word[ia].sqrt();
            let upd_ctx = g_ctx / self.grad_sq_context[ib].sqrt();
            self.grad_sq_word[ia] += g_word * g_word;
            self.grad_sq_context[ib] += g_ctx * g_ctx;
            self.word[ia] -= upd_word;
            self.context[ib] -= upd_ctx;
        }
        self.word_bias[a] -= step / self.grad_sq_word_bias[a].sqrt();
        self.context_bias[b] -= step / self.grad_sq_context_bias[b].sqrt();
        self.grad_sq_word_bias[a] += step * step;
        self.grad_sq_context_bias[b] += step * step;
    }

    /// Final vectors `w + w̃` and biases `b + b̃`.
    pub fn to_table(&self) -> EmbeddingTable {
        let vectors = self.word.iter().zip(&self.context).map(|(w, c)| w + c).collect();
        let bias = self
            .word_bias
            .iter()
            .zip(&self.context_bias)
            .map(|(w, c)| w + c)
            .collect();
        EmbeddingTable {
            rows: self.vocab_size(),
            dim: self.dim,
            vectors,
            bias: Some(bias),
        }
    }
}

/// The objective `J` over all stored entries.
pub fn glove_loss(cooc: &CoocMatrix, state: &GloveState, cfg: &GloveConfig) -> f64 {
    cooc.iter()
        .map(|(a, b, x)| {
            let diff = state.score(a, b) - x.ln();
            cfg.weight(x) * diff * diff
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct GloveFit {
    pub table: EmbeddingTable,
    pub state: GloveState,
    /// `J / nnz` after each epoch.
    pub epoch_loss: Vec<f64>,
}

pub fn train_glove(cooc: &CoocMatrix, cfg: &GloveConfig) -> Result<GloveFit> {
    cfg.validate()?;
    if cooc.is_empty() {
        return Err(Error::invalid("empty co-occurrence matrix"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = GloveState::init(cooc.vocab_size, cfg.dim, &mut rng);
    let mut entries: Vec<(u32, u32, f64)> = cooc.iter().collect();
    let nnz = entries.len() as f64;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        entries.shuffle(&mut rng);
        for (n, &(a, b, x)) in entries.iter().enumerate() {
            let diff = state.score(a, b) - x.ln();
            let fdiff = cfg.weight(x) * diff;
            if !fdiff.is_finite() {
                return Err(Error::NonFiniteGlove { epoch, entry: n });
            }
            state.update(a as usize, b as usize, cfg.learning_rate * fdiff);
        }
        let j = glove_loss(cooc, &state, cfg);
        if !j.is_finite() {
            return Err(Error::NonFiniteGlove {
                epoch,
                entry: entries.len(),
            });
        }
        log::debug!("glove epoch {}: J/nnz = {:.6}", epoch + 1, j / nnz);
        epoch_loss.push(j / nnz);
    }
    Ok(GloveFit {
        table: state.to_table(),
        state,
        epoch_loss,
    })
}

/// One row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    /// Row-major `rows × dim`.
    pub vectors: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != rows * dim {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{dim} table",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding table has non-finite entries"));
        }
        Ok(EmbeddingTable {
            rows,
            dim,
            vectors,
            bias: None,
        })
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_matrix(path, self.rows, self.dim, &self.vectors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (rows, dim, vectors) = io::read_matrix(path)?;
        EmbeddingTable::from_rows(rows, dim, vectors)
    }

    /// `feature,v0,v1,...` rows; `labels[i]` names row `i`.
    pub fn export_csv(&self, path: impl AsRef<Path>, labels: &[String]) -> Result<()> {
        let path = path.as_ref();
        if labels.len() != self.rows {
            return Err(Error::shape("one label per table row is required"));
        }
        let mut out = String::new();
        for (i, label) in labels.iter().enumerate() {
            out.push_str(&csv_field(label));
            for v in self.row(i as u32) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn aba_window_one() {
        let (a, b) = (0, 1);
        let m = build_cooccurrence(&[vec![a, b, a]], 1, 2).unwrap();
        assert_eq!(m.get(a, b), 2.0);
        assert_eq!(m.get(b, a), 2.0);
        assert_eq!(m.get(a, a), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn distance_weighting() {
        let m = build_cooccurrence(&[vec![0, 1, 2]], 15, 3).unwrap();
        assert_eq!(m.get(0, 2), 0.5);
        assert_eq!(m.get(0, 1), 1.0);
        let m = build_cooccurrence(&[vec![0, 1, 0]], 2, 2).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
    }

    #[test]
    fn single_token_document_is_empty() {
        let m = build_cooccurrence(&[vec![3]], 15, 4).unwrap();
        assert!(m.is_empty());
        assert!(build_cooccurrence(&[vec![5]], 15, 4).is_err());
        assert!(build_cooccurrence(&[vec![1, 2]], 0, 4).is_err());
    }

    #[test]
    fn loss_special_cases() {
        let cfg = GloveConfig::default();
        let mut m = CoocMatrix::new(2);
        m.entries.insert((0, 1), 1.0);
        let zero = GloveState::zeros(2, 4);
        assert_eq!(glove_loss(&m, &zero, &cfg), 0.0);
        m.entries.insert((0, 1), E);
        let expected = cfg.weight(E) * 1.0;
        assert!((glove_loss(&m, &zero, &cfg) - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_brute_force() {
        let cfg = GloveConfig::default();
        let docs = vec![vec![0, 1, 2, 3, 1, 0, 4, 2], vec![4, 4, 3, 0]];
        let m = build_cooccurrence(&docs, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = GloveState::init(5, 3, &mut rng);
        let mut brute = 0.0;
        for a in 0..5u32 {
            for b in 0..5u32 {
                let x = m.get(a, b);
                if x > 0.0 {
                    let mut dot = 0.0;
                    for k in 0..3 {
                        dot += s.word[a as usize * 3 + k] * s.context[b as usize * 3 + k];
                    }
                    let r = dot + s.word_bias[a as usize] + s.context_bias[b as usize] - x.ln();
                    let f = if x < 100.0 { (x / 100.0).powf(0.75) } else { 1.0 };
                    brute += f * r * r;
                }
            }
        }
        assert!((glove_loss(&m, &s, &cfg) - brute).abs() < 1e-10);
    }

    #[test]
    fn zero_epochs_returns_seeded_init() {
        let m = build_cooccurrence(&[vec![0, 1, 2]], 2, 3).unwrap();
        let cfg = GloveConfig {
            epochs: 0,
            dim: 4,
            seed: 3,
            ..Default::default()
        };
        let fit = train_glove(&m, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = GloveState::init(3, 4, &mut rng);
        assert_eq!(fit.table, init.to_table());
        assert!(fit.epoch_loss.is_empty());
    }

    #[test]
    fn single_pair_fit() {
        let mut m = CoocMatrix::new(2);
        m.entries.insert((0, 1), E);
        let cfg = GloveConfig {
            dim: 2,
            epochs: 3000,
            ..Default::default()
        };
        let fit = train_glove(&m, &cfg).unwrap();
        assert!((fit.state.score(0, 1) - 1.0).abs() < 0.05, "{}", fit.state.score(0, 1));
    }

    #[test]
    fn training_is_deterministic() {
        let docs = vec![(0..200).map(|i| (i * 7 % 11) as u32).collect::<Vec<_>>()];
        let m = build_cooccurrence(&docs, 5, 11).unwrap();
        let cfg = GloveConfig {
            epochs: 3,
            dim: 8,
            ..Default::default()
        };
        assert_eq!(
            train_glove(&m, &cfg).unwrap().table,
            train_glove(&m, &cfg).unwrap().table
        );
        assert!(train_glove(&CoocMatrix::new(3), &cfg).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::from_rows(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let p = dir.path().join("t.bin");
        t.save(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
        t.export_csv(dir.path().join("t.csv"), &["a".into(), "b,c".into()])
            .unwrap();
        let csv = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(csv, "a,0.5,-1\n\"b,c\",2,0.25\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetric_and_additive_over_documents(
                d1 in proptest::collection::vec(0u32..6, 0..30),
                d2 in proptest::collection::vec(0u32..6, 0..30),
                window in 1usize..6,
            ) {
                let both = build_cooccurrence(&[d1.clone(), d2.clone()], window, 6).unwrap();
                prop_assert!(both.is_symmetric());
                let mut sum = build_cooccurrence(&[d1], window, 6).unwrap();
                sum.merge(&build_cooccurrence(&[d2], window, 6).unwrap()).unwrap();
                for a in 0..6 {
                    for b in 0..6 {
                        prop_assert!((both.get(a, b) - sum.get(a, b)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
