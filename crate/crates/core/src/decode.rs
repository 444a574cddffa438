//! Linear probes: multinomial logistic regression with leave-one-run-out
//! cross-validation, plus chance-level dummy classifiers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedCorpus;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    SyntacticTriplet,
    SemanticCategory,
}

/// Rows of an embedding matrix that carry a label.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddings {
    pub x: DMatrix<f64>,
    /// Dense label ids, indexing `label_names`.
    pub labels: Vec<usize>,
    pub run_ids: Vec<u32>,
    pub label_names: Vec<String>,
    pub kind: LabelKind,
}

impl LabeledEmbeddings {
    /// Keeps the matrix rows whose source token has a label. Label ids are
    /// assigned in sorted label order.
    pub fn from_matrix(
        m: &EmbeddingMatrix,
        token_labels: &[Option<String>],
        corpus: &AnnotatedCorpus,
        kind: LabelKind,
    ) -> Result<Self> {
        if token_labels.len() != corpus.len() || m.provenance.source_tokens != corpus.len() {
            return Err(Error::shape(
                "labels, corpus and embedding rows refer to different token lists",
            ));
        }
        let rows: Vec<(usize, &str)> = m
            .provenance
            .alignment
            .iter()
            .enumerate()
            .filter_map(|(r, &t)| token_labels[t].as_deref().map(|l| (r, l)))
            .collect();
        let names: Vec<String> = rows
            .iter()
            .map(|(_, l)| l.to_string())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let x = DMatrix::from_fn(rows.len(), m.cols(), |i, j| m.data[(rows[i].0, j)]);
        Ok(LabeledEmbeddings {
            x,
            labels: rows.iter().map(|(_, l)| index[l]).collect(),
            run_ids: rows
                .iter()
                .map(|&(r, _)| corpus.tokens[m.provenance.alignment[r]].run_id)
                .collect(),
            label_names: names,
            kind,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }
}

/// `POS|Morph|NCN` triplet of every token.
pub fn triplet_labels(corpus: &AnnotatedCorpus) -> Vec<Option<String>> {
    corpus.tokens.iter().map(|t| Some(t.syntactic_feature())).collect()
}

/// Category of every token whose (lower-cased) surface form appears in
/// `word_categories`.
pub fn category_labels(corpus: &AnnotatedCorpus, word_categories: &HashMap<String, String>) -> Vec<Option<String>> {
    corpus
        .tokens
        .iter()
        .map(|t| word_categories.get(&t.surface.to_lowercase()).cloned())
        .collect()
}

/// Reads a `word<TAB>category` file.
pub fn read_word_categories(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (w, c) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected word<TAB>category".into(),
        })?;
        out.insert(w.to_lowercase(), c.trim().to_string());
    }
    Ok(out)
}

pub fn write_labels_tsv(path: impl AsRef<Path>, labels: &[Option<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("token_index\tlabel\n");
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            out.push_str(&format!("{i}\t{l}\n"));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels_tsv(path: impl AsRef<Path>, n_tokens: usize) -> Result<Vec<Option<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![None; n_tokens];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("token_index")) {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected token_index<TAB>label"))?;
        let idx: usize = idx.trim().parse().map_err(|_| bad("token index is not an integer"))?;
        if idx >= n_tokens {
            return Err(bad(&format!("token index {idx} beyond {n_tokens} tokens")));
        }
        out[idx] = Some(label.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Solver {
    Lbfgs,
    /// Fixed-step gradient descent.
    GradientDescent {
        step: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Penalty `l2 / (2n) · ‖W‖²` on the weights (not the intercepts).
    pub l2: f64,
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the gradient.
    pub tol: f64,
    pub solver: Solver,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1.0,
            max_iter: 300,
            tol: 1e-5,
            solver: Solver::Lbfgs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `(d + 1) × C`; the last row holds the intercepts.
    pub weights: DMatrix<f64>,
    /// Original label id of every class column.
    pub classes: Vec<usize>,
}

impl Classifier {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let logits = augment(x) * &self.weights;
        logits
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut a = DMatrix::from_element(n, d + 1, 1.0);
    a.view_mut((0, 0), (n, d)).copy_from(x);
    a
}

/// Penalised mean cross-entropy and its gradient.
fn objective(xa: &DMatrix<f64>, y: &[usize], w: &DMatrix<f64>, l2: f64) -> (f64, DMatrix<f64>) {
    let n = xa.nrows() as f64;
    let d = w.nrows() - 1;
    let mut p = xa * w;
    let mut loss = 0.0;
    for (i, mut row) in p.row_iter_mut().enumerate() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let z = row.sum();
        loss += z.ln() + max - (row[y[i]].ln() + max);
        row /= z;
        row[y[i]] -= 1.0;
    }
    let mut grad = xa.tr_mul(&p) / n;
    let mut penalty = 0.0;
    for r in 0..d {
        for c in 0..w.ncols() {
            penalty += w[(r, c)] * w[(r, c)];
            grad[(r, c)] += l2 / n * w[(r, c)];
        }
    }
    (loss / n + l2 / (2.0 * n) * penalty, grad)
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Multinomial logistic regression over the label ids present in `labels`.
pub fn fit_logistic(x: &DMatrix<f64>, labels: &[usize], cfg: &LogisticConfig) -> Result<(Classifier, FitReport)> {
    if x.nrows() != labels.len() {
        return Err(Error::shape(format!("{} rows, {} labels", x.nrows(), labels.len())));
    }
    let classes: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::invalid("logistic regression needs at least 2 classes"));
    }
    let col: HashMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = labels.iter().map(|l| col[l]).collect();
    let xa = augment(x);
    let mut w = DMatrix::zeros(xa.ncols(), classes.len());
    let (mut loss, mut grad) = objective(&xa, &y, &w, cfg.l2);
    let mut history = vec![loss];
    let mut s_hist: Vec<DMatrix<f64>> = Vec::new();
    let mut y_hist: Vec<DMatrix<f64>> = Vec::new();
    let mut iterations = 0;
    let mut converged = grad.amax() <= cfg.tol;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let (w_new, loss_new, grad_new) = match cfg.solver {
            Solver::GradientDescent { step } => {
                let w_new = &w - &grad * step;
                let (l, g) = objective(&xa, &y, &w_new, cfg.l2);
                (w_new, l, g)
            }
            Solver::Lbfgs => {
                // two-loop recursion
                let mut q = grad.clone();
                let mut alphas = Vec::with_capacity(s_hist.len());
                for (s, yv) in s_hist.iter().zip(&y_hist).rev() {
                    let rho = 1.0 / dot(yv, s);
                    let a = rho * dot(s, &q);
                    q -= yv * a;
                    alphas.push((rho, a));
                }
                let gamma = match (s_hist.last(), y_hist.last()) {
                    (Some(s), Some(yv)) => dot(s, yv) / dot(yv, yv),
                    _ => 1.0 / grad.norm().max(1e-12),
                };
                let mut r = q * gamma;
                for ((s, yv), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
                    let b = rho * dot(yv, &r);
                    r += s * (a - b);
                }
                let mut dir = -r;
                let mut slope = dot(&grad, &dir);
                if slope >= 0.0 {
                    dir = -grad.clone();
                    slope = -grad.norm_squared();
                    s_hist.clear();
                    y_hist.clear();
                }
                let mut step = 1.0;
                let mut accepted = None;
                for _ in 0..40 {
                    let cand = &w + &dir * step;
                    let (l, g) = objective(&xa, &y, &cand, cfg.l2);
                    if l <= loss + 1e-4 * step * slope {
                        accepted = Some((cand, l, g));
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some(a) => a,
                    None => break,
                }
            }
        };
        if !loss_new.is_finite() {
            return Err(Error::Diverged {
                step: iterations,
                loss: loss_new,
            });
        }
        let s = &w_new - &w;
        let yv = &grad_new - &grad;
        if dot(&s, &yv) > 1e-12 {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > 10 {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let rel_change = (loss - loss_new).abs() / loss.abs().max(1e-12);
        w = w_new;
        loss = loss_new;
        grad = grad_new;
        history.push(loss);
        converged = grad.amax() <= cfg.tol || (matches!(cfg.solver, Solver::Lbfgs) && rel_change < 1e-12);
    }
    let report = FitReport {
        converged,
        iterations,
        grad_norm: grad.norm(),
        loss_history: history,
    };
    if !converged {
        log::warn!(
            "logistic fit stopped after {iterations} iterations, gradient norm {:.3e}",
            report.grad_norm
        );
    }
    Ok((Classifier { weights: w, classes }, report))
}

/// Training-set column means and standard deviations (1 for constant columns).
fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

fn apply_stats(x: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - mean[j]) / sd[j])
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

fn split(runs: &[u32], test: u32) -> (Vec<usize>, Vec<usize>) {
    (0..runs.len()).partition(|&i| runs[i] != test)
}

/// Fits the classifier for the fold that holds out `test_run`, z-scoring
/// features with training-run statistics. Reads no test-run row.
pub fn fit_fold(
    data: &LabeledEmbeddings,
    test_run: u32,
    cfg: &LogisticConfig,
) -> Result<(Classifier, FitReport, Vec<f64>, Vec<f64>)> {
    let (train, _) = split(&data.run_ids, test_run);
    let xt = select_rows(&data.x, &train);
    let (mean, sd) = column_stats(&xt);
    let labels: Vec<usize> = train.iter().map(|&i| data.labels[i]).collect();
    let (clf, report) = fit_logistic(&apply_stats(&xt, &mean, &sd), &labels, cfg)?;
    Ok((clf, report, mean, sd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub runs: Vec<u32>,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub reports: Vec<FitReport>,
}

fn distinct_runs(runs: &[u32]) -> Vec<u32> {
    runs.iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Leave-one-run-out decoding accuracy. Test labels never seen in training
/// count as errors.
pub fn cv_decode(data: &LabeledEmbeddings, cfg: &LogisticConfig) -> Result<DecodeResult> {
    let runs = distinct_runs(&data.run_ids);
    if runs.len() < 2 {
        return Err(Error::invalid("run-wise cross-validation needs at least 2 runs"));
    }
    let mut fold_accuracy = Vec::new();
    let mut reports = Vec::new();
    for &r in &runs {
        let (clf, report, mean, sd) = fit_fold(data, r, cfg)?;
        let (_, test) = split(&data.run_ids, r);
        let pred = clf.predict(&apply_stats(&select_rows(&data.x, &test), &mean, &sd));
        let correct = test.iter().zip(&pred).filter(|(&i, &p)| data.labels[i] == p).count();
        fold_accuracy.push(correct as f64 / test.len().max(1) as f64);
        reports.push(report);
    }
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / fold_accuracy.len() as f64;
    Ok(DecodeResult {
        runs,
        fold_accuracy,
        mean_accuracy,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DummyStrategy {
    #[default]
    MostFrequent,
    PriorSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DummyResult {
    pub strategy: DummyStrategy,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Expected accuracy per fold, `Σ_c p_train(c) · p_test(c)` for prior
    /// sampling, equal to `fold_accuracy` for most-frequent.
    pub expected_fold_accuracy: Vec<f64>,
}

/// Chance-level accuracy, cross-validated by run like [`cv_decode`]. With a
/// single run the dummy is trained and tested on that run.
pub fn dummy_baseline(labels: &[usize], run_ids: &[u32], strategy: DummyStrategy, seed: u64) -> Result<DummyResult> {
    if labels.len() != run_ids.len() || labels.is_empty() {
        return Err(Error::shape("one run id per label is required"));
    }
    let runs = distinct_runs(run_ids);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_accuracy = Vec::new();
    let mut expected = Vec::new();
    for &r in &runs {
        let (mut train, test) = split(run_ids, r);
        if runs.len() == 1 {
            train = test.clone();
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &train {
            *counts.entry(labels[i]).or_default() += 1;
        }
        let n_train = train.len() as f64;
        let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let nt = test_labels.len().max(1) as f64;
        match strategy {
            DummyStrategy::MostFrequent => {
                let (&majority, _) = counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .expect("training runs have labels");
                let acc = test_labels.iter().filter(|&&l| l == majority).count() as f64 / nt;
                fold_accuracy.push(acc);
                expected.push(acc);
            }
            DummyStrategy::PriorSampling => {
                let classes: Vec<(usize, f64)> = counts.iter().map(|(&c, &k)| (c, k as f64 / n_train)).collect();
                let mut correct = 0usize;
                for &l in &test_labels {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = classes.last().expect("non-empty").0;
                    for &(c, p) in &classes {
                        acc += p;
                        if u < acc {
                            pick = c;
                            break;
                        }
                    }
                    correct += usize::from(pick == l);
                }
                fold_accuracy.push(correct as f64 / nt);
                let exp: f64 = classes
                    .iter()
                    .map(|&(c, p)| p * test_labels.iter().filter(|&&l| l == c).count() as f64 / nt)
                    .sum();
                expected.push(exp);
            }
        }
    }
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / fold_accuracy.len() as f64;
    Ok(DummyResult {
        strategy,
        fold_accuracy,
        mean_accuracy,
        expected_fold_accuracy: expected,
    })
}
