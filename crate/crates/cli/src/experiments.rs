//! End-to-end synthetic experiments: decoding dissociation, encoding
//! ground-truth recovery and context-size contrasts.

use std::collections::{BTreeMap, HashMap};

use irnlm::corpus::{build_vocabulary, encode_ids, restrict, AnnotatedCorpus, StreamMode, Vocabulary};
use irnlm::decode::{
    category_labels, cv_decode, dummy_baseline, triplet_labels, DummyStrategy, LabelKind, LabeledEmbeddings,
    LogisticConfig,
};
use irnlm::embed::{contextual_provenance, extract_context_limited, extract_sliding, extract_static, EmbeddingMatrix};
use irnlm::encoding::{default_lambda_grid, delta_r, hrf_kernel, standardize_columns, BoldRun, HrfParams};
use irnlm::glove::{build_cooccurrence, train_glove, EmbeddingTable, GloveConfig};
use irnlm::maps::VoxelMap;
use irnlm::minigpt::{
    make_context_batches, train, train_sequences, ModelConfig, Parameters, PositionalMode, TrainConfig,
};
use irnlm::stats::{group_specificity, group_test_fdr, specificity, GroupTest};
use irnlm::synth::{
    evaluate_recovery, gen_bold, gen_corpus, subject_runs, trailing_mean, voxel_signal, BoldConfig, CorpusConfig,
    RecoverySummary, SynthCorpus, Verdict, VoxelLayout,
};
use irnlm::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{
    baseline_designs, clean_runs, encode_map, model_designs, run_offsets, split_runs, with_baseline, EventTime,
};

/// A lexical and a contextual model trained on one stream of a corpus.
pub struct StreamModels {
    pub mode: StreamMode,
    pub vocab: Vocabulary,
    pub glove: EmbeddingTable,
    pub gpt: Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTraining {
    pub glove: GloveConfig,
    pub gpt: GptShape,
    pub gpt_train: TrainConfig,
    /// Sliding-window length used to extract contextual embeddings.
    pub window: usize,
}

/// Architecture of the toy contextual model; the vocabulary size comes
/// from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub max_seq: usize,
    pub positional_mode: PositionalMode,
    pub seed: u64,
}

impl Default for GptShape {
    fn default() -> Self {
        GptShape {
            n_layers: 2,
            n_heads: 4,
            d_head: 8,
            max_seq: 32,
            positional_mode: PositionalMode::Absolute,
            seed: 0,
        }
    }
}

impl GptShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head,
            max_seq: self.max_seq,
            seed: self.seed,
            ..ModelConfig::toy(vocab_size, self.positional_mode)
        }
    }
}

impl Default for ModelTraining {
    fn default() -> Self {
        ModelTraining {
            glove: GloveConfig::default(),
            gpt: GptShape::default(),
            gpt_train: TrainConfig {
                epochs: 3,
                ..Default::default()
            },
            window: 16,
        }
    }
}

pub fn train_stream_models(corpus: &AnnotatedCorpus, mode: StreamMode, cfg: &ModelTraining) -> Result<StreamModels> {
    let stream = restrict(corpus, mode)?;
    let vocab = build_vocabulary(&[&stream])?;
    let ids = encode_ids(&stream, &vocab);
    let cooc = build_cooccurrence(std::slice::from_ref(&ids), cfg.glove.window, vocab.len())?;
    let glove = train_glove(&cooc, &cfg.glove)?.table;
    let mut gpt = train(&ids, &cfg.gpt.config(vocab.len()), &cfg.gpt_train)?.params;
    gpt.meta.stream = Some(mode.name().to_string());
    Ok(StreamModels {
        mode,
        vocab,
        glove,
        gpt,
    })
}

/// Static and sliding-window embeddings of a stimulus, one row per item of
/// the model's stream.
pub fn stimulus_embeddings(
    models: &StreamModels,
    stimulus: &AnnotatedCorpus,
    window: usize,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let stream = restrict(stimulus, models.mode)?;
    let name = models.mode.name();
    let stat = extract_static(
        &stream,
        &models.vocab,
        &models.glove,
        &format!("glove-{name}"),
        stimulus.len(),
    )?;
    let ids = encode_ids(&stream, &models.vocab);
    let prov = contextual_provenance(&format!("gpt-{name}"), &stream, stimulus.len())?;
    let layer = models.gpt.config.extraction_layer();
    let ctx = extract_sliding(&ids, &models.gpt, window, layer, prov)?;
    Ok((stat, ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DissociationConfig {
    pub train_corpus: CorpusConfig,
    pub stimulus: CorpusConfig,
    pub models: ModelTraining,
    pub logistic: LogisticConfig,
    pub dummy: DummyStrategy,
}

impl Default for DissociationConfig {
    fn default() -> Self {
        DissociationConfig {
            train_corpus: CorpusConfig {
                n_tokens: 100_000,
                n_runs: 1,
                seed: 101,
                ..Default::default()
            },
            stimulus: CorpusConfig {
                seed: 102,
                ..Default::default()
            },
            models: ModelTraining::default(),
            logistic: LogisticConfig::default(),
            dummy: DummyStrategy::MostFrequent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingRow {
    pub model: String,
    pub stream: StreamMode,
    pub labels: LabelKind,
    pub n_rows: usize,
    pub n_classes: usize,
    pub accuracy: f64,
    pub chance: f64,
}

impl DecodingRow {
    pub fn ratio(&self) -> f64 {
        self.accuracy / self.chance
    }
}

pub fn decode_row(
    m: &EmbeddingMatrix,
    labels: &[Option<String>],
    corpus: &AnnotatedCorpus,
    kind: LabelKind,
    cfg: &LogisticConfig,
    dummy: DummyStrategy,
) -> Result<DecodingRow> {
    let data = LabeledEmbeddings::from_matrix(m, labels, corpus, kind)?;
    let acc = cv_decode(&data, cfg)?;
    let chance = dummy_baseline(&data.labels, &data.run_ids, dummy, 0)?;
    Ok(DecodingRow {
        model: m.provenance.model.clone(),
        stream: m.provenance.stream.unwrap_or(StreamMode::Integral),
        labels: kind,
        n_rows: data.labels.len(),
        n_classes: data.n_classes(),
        accuracy: acc.mean_accuracy,
        chance: chance.mean_accuracy,
    })
}

/// Trains lexical and contextual models on the syntactic and semantic
/// streams of a synthetic corpus and decodes both label sets from each.
pub fn decoding_dissociation(cfg: &DissociationConfig) -> Result<Vec<DecodingRow>> {
    let train_corpus = gen_corpus(&cfg.train_corpus)?;
    let stim: SynthCorpus = gen_corpus(&cfg.stimulus)?;
    let cats: HashMap<String, String> = stim.word_categories.clone().into_iter().collect();
    let triplets = triplet_labels(&stim.corpus);
    let categories = category_labels(&stim.corpus, &cats);
    let mut rows = Vec::new();
    for mode in [StreamMode::Syntactic, StreamMode::Semantic] {
        let models = train_stream_models(&train_corpus.corpus, mode, &cfg.models)?;
        let (stat, ctx) = stimulus_embeddings(&models, &stim.corpus, cfg.models.window)?;
        for m in [&stat, &ctx] {
            for (labels, kind) in [
                (&triplets, LabelKind::SyntacticTriplet),
                (&categories, LabelKind::SemanticCategory),
            ] {
                let row = decode_row(m, labels, &stim.corpus, kind, &cfg.logistic, cfg.dummy)?;
                log::info!("{row:?} ratio {:.2}", row.ratio());
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Vocabulary and GloVe table of one stream.
pub fn train_glove_stream(
    corpus: &AnnotatedCorpus,
    mode: StreamMode,
    cfg: &GloveConfig,
) -> Result<(Vocabulary, EmbeddingTable)> {
    let stream = restrict(corpus, mode)?;
    let vocab = build_vocabulary(&[&stream])?;
    let ids = encode_ids(&stream, &vocab);
    let cooc = build_cooccurrence(std::slice::from_ref(&ids), cfg.window, vocab.len())?;
    Ok((vocab, train_glove(&cooc, cfg)?.table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub train_corpus: CorpusConfig,
    pub stimulus: CorpusConfig,
    pub glove: GloveConfig,
    pub bold: BoldConfig,
    pub hrf: HrfParams,
    pub lambdas: Vec<f64>,
    pub q: f64,
    pub fwhm_mm: f64,
    pub layout_seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        let d = DissociationConfig::default();
        RecoveryConfig {
            train_corpus: d.train_corpus,
            stimulus: d.stimulus,
            glove: GloveConfig::default(),
            bold: BoldConfig::default(),
            hrf: HrfParams::default(),
            lambdas: default_lambda_grid(),
            q: 0.005,
            fwhm_mm: 6.0,
            layout_seed: 7,
        }
    }
}

pub struct RecoveryOutcome {
    pub layout: VoxelLayout,
    pub syn_group: GroupTest,
    pub sem_group: GroupTest,
    pub specificity: VoxelMap,
    pub summary: RecoverySummary,
}

/// Per-subject ΔR maps of two designs over a shared baseline.
pub struct SubjectDeltas {
    pub a: VoxelMap,
    pub b: VoxelMap,
}

/// For every subject, `R(a + baseline) − R(baseline)` and the same for `b`.
pub fn subject_deltas(
    subjects: &[Vec<BoldRun>],
    design_a: &[DMatrix<f64>],
    design_b: &[DMatrix<f64>],
    baseline: &[DMatrix<f64>],
    lambdas: &[f64],
    labels: (&str, &str),
) -> Result<Vec<SubjectDeltas>> {
    let full_a = with_baseline(Some(design_a), baseline)?;
    let full_b = with_baseline(Some(design_b), baseline)?;
    subjects
        .par_iter()
        .map(|runs| {
            let g = &runs[0].geometry;
            let y = clean_runs(runs)?;
            let base = encode_map(baseline, &y, g, lambdas, "baseline")?;
            let ra = encode_map(&full_a, &y, g, lambdas, labels.0)?;
            let rb = encode_map(&full_b, &y, g, lambdas, labels.1)?;
            Ok(SubjectDeltas {
                a: delta_r(&ra, &base)?,
                b: delta_r(&rb, &base)?,
            })
        })
        .collect()
}

/// Synthetic BOLD driven by GloVe embeddings of the two streams, encoded
/// back with the same designs and scored against the known layout.
pub fn recovery_experiment(cfg: &RecoveryConfig) -> Result<RecoveryOutcome> {
    let train_corpus = gen_corpus(&cfg.train_corpus)?;
    let stim = gen_corpus(&cfg.stimulus)?;
    let n = stim.corpus.len();
    let mut x = Vec::new();
    for mode in [StreamMode::Semantic, StreamMode::Syntactic] {
        let (vocab, table) = train_glove_stream(&train_corpus.corpus, mode, &cfg.glove)?;
        let stream = restrict(&stim.corpus, mode)?;
        let m = extract_static(&stream, &vocab, &table, &format!("glove-{}", mode.name()), n)?;
        x.push(split_runs(&m, &stim.corpus)?);
    }
    let (x_sem, x_syn) = (&x[0], &x[1]);
    let times = run_offsets(&stim.corpus);
    let kernel = hrf_kernel(&cfg.hrf)?;
    let layout = VoxelLayout::slabs(
        cfg.bold.geometry(),
        x_sem[0].ncols(),
        x_syn[0].ncols(),
        cfg.bold.snr,
        cfg.layout_seed,
    )?;
    let bold = gen_bold(x_sem, x_syn, &times, &layout, &kernel, &cfg.bold)?;
    let (tr, ns) = (cfg.bold.tr_s, cfg.bold.n_scans);
    let baseline = baseline_designs(&stim.corpus, &stim.audio, EventTime::Offset, &kernel, tr, ns)?;
    let d_syn = model_designs(x_syn, &times, &kernel, tr, ns)?;
    let d_sem = model_designs(x_sem, &times, &kernel, tr, ns)?;
    let deltas = subject_deltas(
        &bold.subjects,
        &d_syn,
        &d_sem,
        &baseline,
        &cfg.lambdas,
        ("syntactic", "semantic"),
    )?;
    let syn_maps: Vec<VoxelMap> = deltas.iter().map(|d| d.a.clone()).collect();
    let sem_maps: Vec<VoxelMap> = deltas.iter().map(|d| d.b.clone()).collect();
    let spec = deltas
        .iter()
        .map(|d| specificity(&d.b, &d.a))
        .collect::<Result<Vec<_>>>()?;
    let specificity = group_specificity(&spec)?;
    let syn_group = group_test_fdr(&syn_maps, cfg.q, cfg.fwhm_mm)?;
    let sem_group = group_test_fdr(&sem_maps, cfg.q, cfg.fwhm_mm)?;
    let summary = evaluate_recovery(&syn_group.mask, &sem_group.mask, &specificity, &layout)?;
    Ok(RecoveryOutcome {
        layout,
        syn_group,
        sem_group,
        specificity,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub train_corpus: CorpusConfig,
    pub stimulus: CorpusConfig,
    pub gpt: GptShape,
    pub gpt_train: TrainConfig,
    pub k_short: usize,
    pub k_long: usize,
    /// Scale each model's sequences per epoch so both see the same number
    /// of tokens as the `k_long` model.
    pub match_token_budget: bool,
    /// Token span integrated by the long-span voxels.
    pub long_span: usize,
    /// Token span integrated by the short-span voxels.
    pub short_span: usize,
    pub short_features: ShortFeatures,
    /// Columns of the per-word random values, for `ShortFeatures::Words`.
    pub word_dim: usize,
    pub bold: BoldConfig,
    pub hrf: HrfParams,
    pub lambdas: Vec<f64>,
    pub q: f64,
    pub fwhm_mm: f64,
    pub layout_seed: u64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            train_corpus: CorpusConfig {
                n_tokens: 100_000,
                n_runs: 1,
                topic_persistence: 0.2,
                seed: 201,
                ..Default::default()
            },
            stimulus: CorpusConfig {
                words_per_second: 0.5,
                n_tokens: 1400,
                topic_persistence: 0.2,
                seed: 202,
                ..Default::default()
            },
            gpt: GptShape {
                max_seq: 20,
                ..Default::default()
            },
            gpt_train: TrainConfig {
                epochs: 2,
                sequences_per_epoch: Some(25_000),
                ..Default::default()
            },
            k_short: 5,
            k_long: 15,
            match_token_budget: true,
            long_span: 10,
            short_span: 3,
            short_features: ShortFeatures::Class,
            word_dim: 8,
            bold: BoldConfig {
                n_scans: 400,
                ..Default::default()
            },
            hrf: HrfParams::default(),
            lambdas: default_lambda_grid(),
            q: 0.005,
            fwhm_mm: 6.0,
            layout_seed: 11,
        }
    }
}

/// What the short-span voxels integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortFeatures {
    /// Part-of-speech indicators.
    Pos,
    /// Function-word identity indicators (zero rows for content words).
    Function,
    /// Content-word and function-word indicators.
    Class,
    /// Random per-word values centred within each category.
    Words,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanClass {
    Long,
    Short,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecovery {
    pub class: SpanClass,
    pub n_voxels: usize,
    /// Group means of `R(k_long)` and `R(k_short)`.
    pub mean_r_long: f64,
    pub mean_r_short: f64,
    /// Group mean of `R(k_long) − R(k_short)`.
    pub mean_delta: f64,
    /// Fraction flagged by the one-sided group test on that difference.
    pub detection: f64,
}

pub struct ContextOutcome {
    pub classes: Vec<SpanClass>,
    pub group: GroupTest,
    pub recovery: Vec<SpanRecovery>,
    pub verdicts: Vec<Verdict>,
}

impl ContextOutcome {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

/// Trains a model on `k`-limited sequences of the integral stream.
pub fn train_context_model(ids: &[u32], k: usize, model: &ModelConfig, cfg: &TrainConfig) -> Result<Parameters> {
    let seqs = make_context_batches(ids, k)?;
    let mut params = train_sequences(&seqs, model, cfg)?.params;
    params.meta.stream = Some(StreamMode::Integral.name().to_string());
    params.meta.context_k = Some(k);
    Ok(params)
}

/// Per-token category indicators (zero rows for function words and
/// punctuation).
fn category_features(stim: &SynthCorpus) -> DMatrix<f64> {
    let n_cat = stim.config.n_categories;
    DMatrix::from_fn(stim.categories.len(), n_cat, |t, c| {
        f64::from(stim.categories[t] == Some(c))
    })
}

/// Per-token random word values, centred within each category (function
/// words form one more group) so they carry no topic information.
fn word_features(stim: &SynthCorpus, dim: usize, seed: u64) -> DMatrix<f64> {
    let toks = &stim.corpus.tokens;
    let mut groups: BTreeMap<Option<usize>, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (t, tok) in toks.iter().enumerate() {
        if tok.pos != "PUNCT" {
            groups
                .entry(stim.categories[t])
                .or_default()
                .insert(tok.surface.to_lowercase(), Vec::new());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for words in groups.values_mut() {
        for v in words.values_mut() {
            *v = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        }
        let n = words.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| words.values().map(|v| v[j]).sum::<f64>() / n)
            .collect();
        for v in words.values_mut() {
            v.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
        }
    }
    DMatrix::from_fn(toks.len(), dim, |t, j| {
        if toks[t].pos == "PUNCT" {
            0.0
        } else {
            groups[&stim.categories[t]][&toks[t].surface.to_lowercase()][j]
        }
    })
}

/// Per-token part-of-speech indicators (zero rows for punctuation).
fn pos_features(stim: &SynthCorpus) -> DMatrix<f64> {
    let toks = &stim.corpus.tokens;
    let tags: Vec<&str> = toks
        .iter()
        .map(|t| t.pos.as_str())
        .filter(|&p| p != "PUNCT")
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    DMatrix::from_fn(toks.len(), tags.len(), |t, j| f64::from(toks[t].pos == tags[j]))
}

/// Per-token indicators of each function-word type.
fn function_features(stim: &SynthCorpus) -> DMatrix<f64> {
    let toks = &stim.corpus.tokens;
    let key = |t: usize| -> Option<String> {
        (stim.categories[t].is_none() && toks[t].pos != "PUNCT").then(|| toks[t].surface.to_lowercase())
    };
    let types: Vec<String> = (0..toks.len())
        .filter_map(key)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    DMatrix::from_fn(toks.len(), types.len(), |t, j| {
        f64::from(key(t).as_deref() == Some(types[j].as_str()))
    })
}

/// Two y-slabs of span-driven voxels separated by null rows: the first
/// fifth integrates a long span, the third fifth a short one.
fn span_classes(geometry: &irnlm::maps::Geometry) -> Vec<SpanClass> {
    let ny = geometry.grid_shape[1];
    geometry
        .voxel_coords
        .iter()
        .map(|c| match 5 * c[1] / ny {
            0 => SpanClass::Long,
            2 => SpanClass::Short,
            _ => SpanClass::Null,
        })
        .collect()
}

fn span_weights(classes: &[SpanClass], want: SpanClass, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let s = 1.0 / (d as f64).sqrt();
    classes
        .iter()
        .map(|&c| {
            (0..d)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    if c == want {
                        s * z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Stimulus and the standardized designs of the `k_short` and `k_long`
/// models (in that order).
pub struct ContextDesigns {
    pub stimulus: SynthCorpus,
    pub designs: [Vec<DMatrix<f64>>; 2],
}

pub fn context_designs(cfg: &ContextConfig) -> Result<ContextDesigns> {
    let train_corpus = gen_corpus(&cfg.train_corpus)?;
    let stim = gen_corpus(&cfg.stimulus)?;
    let train_stream = restrict(&train_corpus.corpus, StreamMode::Integral)?;
    let vocab = build_vocabulary(&[&train_stream])?;
    let ids = encode_ids(&train_stream, &vocab);
    let model = cfg.gpt.config(vocab.len());
    let stim_stream = restrict(&stim.corpus, StreamMode::Integral)?;
    let stim_ids = encode_ids(&stim_stream, &vocab);
    let times = run_offsets(&stim.corpus);
    let kernel = hrf_kernel(&cfg.hrf)?;
    let mut designs = Vec::new();
    for k in [cfg.k_short, cfg.k_long] {
        let mut train_cfg = cfg.gpt_train.clone();
        if cfg.match_token_budget {
            train_cfg.sequences_per_epoch = train_cfg.sequences_per_epoch.map(|n| n * (cfg.k_long + 5) / (k + 5));
        }
        let params = train_context_model(&ids, k, &model, &train_cfg)?;
        let prov = contextual_provenance(&format!("gpt-k{k}"), &stim_stream, stim.corpus.len())?;
        let m = extract_context_limited(&stim_ids, &params, k, params.config.extraction_layer(), prov)?;
        let x = split_runs(&m, &stim.corpus)?;
        designs.push(model_designs(&x, &times, &kernel, cfg.bold.tr_s, cfg.bold.n_scans)?);
    }
    let long = designs.pop().expect("two designs");
    let short = designs.pop().expect("two designs");
    Ok(ContextDesigns {
        stimulus: stim,
        designs: [short, long],
    })
}

/// Voxels driven by a long-span topic signal or a short-span signal,
/// encoded with designs from `k_long`- and `k_short`-limited models; the
/// group test runs on `R(k_long) − R(k_short)`.
pub fn context_experiment(cfg: &ContextConfig) -> Result<ContextOutcome> {
    context_test(cfg, &context_designs(cfg)?)
}

/// The simulation and group test of [`context_experiment`] on prepared
/// designs.
pub fn context_test(cfg: &ContextConfig, prepared: &ContextDesigns) -> Result<ContextOutcome> {
    let stim = &prepared.stimulus;
    let times = run_offsets(&stim.corpus);
    let kernel = hrf_kernel(&cfg.hrf)?;
    let (tr, ns) = (cfg.bold.tr_s, cfg.bold.n_scans);
    let geometry = cfg.bold.geometry();
    let classes = span_classes(&geometry);
    let cats = category_features(stim);
    let words = match cfg.short_features {
        ShortFeatures::Pos => pos_features(stim),
        ShortFeatures::Function => function_features(stim),
        ShortFeatures::Class => DMatrix::from_fn(stim.categories.len(), 2, |t, j| {
            let word = stim.corpus.tokens[t].pos != "PUNCT";
            f64::from(word && (stim.categories[t].is_some() == (j == 0)))
        }),
        ShortFeatures::Words => word_features(stim, cfg.word_dim, cfg.layout_seed),
    };
    let per_run = |x: &DMatrix<f64>, span: usize| -> Vec<DMatrix<f64>> {
        stim.corpus
            .run_ranges()
            .into_iter()
            .map(|(_, r)| trailing_mean(&x.rows(r.start, r.len()).into_owned(), span))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.layout_seed);
    let w_long = span_weights(&classes, SpanClass::Long, cats.ncols(), &mut rng);
    let w_short = span_weights(&classes, SpanClass::Short, words.ncols(), &mut rng);
    let long = voxel_signal(&per_run(&cats, cfg.long_span), &times, &w_long, &kernel, tr, ns)?;
    let short = voxel_signal(&per_run(&words, cfg.short_span), &times, &w_short, &kernel, tr, ns)?;
    let signal: Vec<DMatrix<f64>> = long
        .into_iter()
        .zip(short)
        .map(|(a, b)| {
            let mut s = a + b;
            standardize_columns(&mut s);
            s
        })
        .collect();
    let subjects = subject_runs(&signal, &geometry, cfg.bold.snr, &cfg.bold)?;

    let baseline = baseline_designs(&stim.corpus, &stim.audio, EventTime::Offset, &kernel, tr, ns)?;
    let labels = (format!("k{}", cfg.k_long), format!("k{}", cfg.k_short));
    let full_long = with_baseline(Some(&prepared.designs[1]), &baseline)?;
    let full_short = with_baseline(Some(&prepared.designs[0]), &baseline)?;
    let deltas = subjects
        .par_iter()
        .map(|runs| {
            let y = clean_runs(runs)?;
            let a = encode_map(&full_long, &y, &geometry, &cfg.lambdas, &labels.0)?;
            let b = encode_map(&full_short, &y, &geometry, &cfg.lambdas, &labels.1)?;
            Ok((delta_r(&a, &b)?, a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let (deltas, (r_long, r_short)): (Vec<VoxelMap>, (Vec<VoxelMap>, Vec<VoxelMap>)) =
        deltas.into_iter().map(|(d, a, b)| (d, (a, b))).unzip();
    let group = group_test_fdr(&deltas, cfg.q, cfg.fwhm_mm)?;
    let mask = group.mask.as_mask();
    let recovery: Vec<SpanRecovery> = [SpanClass::Long, SpanClass::Short, SpanClass::Null]
        .into_iter()
        .map(|class| {
            let idx: Vec<usize> = (0..classes.len()).filter(|&v| classes[v] == class).collect();
            let n = idx.len().max(1) as f64;
            let mean_of = |maps: &[VoxelMap]| {
                idx.iter()
                    .map(|&v| maps.iter().map(|m| m.values[v]).sum::<f64>() / maps.len() as f64)
                    .sum::<f64>()
                    / n
            };
            let detection = idx.iter().filter(|&&v| mask[v]).count() as f64 / n;
            SpanRecovery {
                class,
                n_voxels: idx.len(),
                mean_r_long: mean_of(&r_long),
                mean_r_short: mean_of(&r_short),
                mean_delta: mean_of(&deltas),
                detection,
            }
        })
        .collect();
    let verdicts = vec![
        Verdict {
            name: "long_span_delta_positive".into(),
            value: recovery[0].mean_delta,
            condition: "> 0".into(),
            passed: recovery[0].mean_delta > 0.0,
        },
        Verdict {
            name: "long_span_voxels_detected".into(),
            value: recovery[0].detection,
            condition: ">= 0.5".into(),
            passed: recovery[0].detection >= 0.5,
        },
        Verdict {
            name: "short_span_voxels_detected".into(),
            value: recovery[1].detection,
            condition: "== 0".into(),
            passed: recovery[1].detection == 0.0,
        },
    ];
    Ok(ContextOutcome {
        classes,
        group,
        recovery,
        verdicts,
    })
}
