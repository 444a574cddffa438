//! Artifact-level pipeline. Every stage has a key, a hash over its
//! configuration and upstream hashes, and a fixed list of outputs under
//! the work directory; asking for an artifact runs whatever is missing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use irnlm::corpus::{
    build_vocabulary, encode_ids, ingest_annotated, restrict, AnnotatedCorpus, ColumnSchema, StreamMode, Vocabulary,
};
use irnlm::decode::{
    category_labels, cv_decode, dummy_baseline, fit_logistic, read_word_categories, triplet_labels, LabelKind,
    LabeledEmbeddings,
};
use irnlm::embed::{contextual_provenance, extract_context_limited, extract_sliding, extract_static, EmbeddingMatrix};
use irnlm::encoding::{build_design, delta_r, hrf_kernel, BoldRun, HrfKernel};
use irnlm::glove::{build_cooccurrence, train_glove, EmbeddingTable};
use irnlm::io::{read_events_csv, write_matrix};
use irnlm::maps::{Hemisphere, MapKind, VoxelMap};
use irnlm::minigpt::{
    load_checkpoint, make_context_batches, save_checkpoint, train, train_sequences, write_loss_csv, ModelConfig,
    Parameters,
};
use irnlm::stats::{
    group_specificity, group_test_fdr, jaccard, jaccard_hemisphere, peak_regions, specificity, unique_contribution,
};
use irnlm::synth::{evaluate_recovery, gen_bold, gen_corpus, BoldConfig, CorpusConfig, RecoverySummary, VoxelLayout};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{config_hash, PipelineConfig};
use crate::design::{baseline_designs, clean_runs, encode_map, run_events, run_offsets, split_runs, with_baseline};
use crate::error::{CliError, CliResult};
use crate::feature::{Feature, ModelKind, Single};
use crate::stage::{ensure_dir, run_stage, write_json, StageSpec};

/// Label set for decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Labels {
    /// `POS|Morph|NCN` of every token.
    Triplet,
    /// Semantic category of content words.
    Category,
}

impl Labels {
    pub fn name(self) -> &'static str {
        match self {
            Labels::Triplet => "triplet",
            Labels::Category => "category",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DecodeMode {
    /// Fit on every labeled row and report training accuracy.
    Fit,
    /// Leave-one-run-out accuracy against the dummy baseline.
    Cv,
}

/// Known layout of synthetic BOLD data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub layout: VoxelLayout,
    pub bold: BoldConfig,
    pub drive_semantic: Feature,
    pub drive_syntactic: Feature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub feature: String,
    pub n_subjects: usize,
    pub n_voxels: usize,
    pub n_significant: usize,
    pub z_fdr: Option<f64>,
    pub mean_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub feature: String,
    pub labels: Labels,
    pub mode: String,
    pub n_rows: usize,
    pub n_classes: usize,
    pub accuracy: f64,
    /// Per held-out run, for cross-validation.
    pub fold_accuracy: Vec<f64>,
    /// Dummy-classifier accuracy, for cross-validation.
    pub chance: Option<f64>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JaccardSummary {
    pub a: String,
    pub b: String,
    pub significant: f64,
    pub significant_left: f64,
    pub significant_right: f64,
    pub peaks: f64,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub work: PathBuf,
    file_hashes: Mutex<HashMap<PathBuf, String>>,
}

fn sub_dir(s: usize) -> String {
    format!("sub-{:02}", s + 1)
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let work = cfg.workdir.clone();
        Pipeline {
            cfg,
            work,
            file_hashes: Mutex::new(HashMap::new()),
        }
    }

    pub fn stamps(&self) -> PathBuf {
        self.work.join(".stamps")
    }

    pub fn at(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.work.join(rel)
    }

    fn file_hash(&self, p: &Path) -> CliResult<String> {
        if let Some(h) = self.file_hashes.lock().expect("hash memo").get(p) {
            return Ok(h.clone());
        }
        let bytes = fs::read(p).map_err(|e| data_err(p, e))?;
        let h = format!("file:{:x}", Sha256::digest(&bytes));
        self.file_hashes
            .lock()
            .expect("hash memo")
            .insert(p.to_path_buf(), h.clone());
        Ok(h)
    }

    fn dir_hash(&self, dir: &Path) -> CliResult<String> {
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for f in files {
            h.update(f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().as_bytes());
            h.update(self.file_hash(&f)?.as_bytes());
        }
        Ok(format!("dir:{:x}", h.finalize()))
    }

    pub fn run(&self, spec: &StageSpec, force: bool, body: impl FnOnce() -> CliResult<()>) -> CliResult<bool> {
        let ran = run_stage(&self.stamps(), spec, force, body)?;
        if ran {
            println!("{:<40} done", spec.key);
        }
        Ok(ran)
    }

    // ---- synthetic corpora -------------------------------------------------

    fn synth_corpus_configs(&self) -> (CorpusConfig, CorpusConfig) {
        let s = &self.cfg.synth;
        let train = CorpusConfig {
            seed: self.cfg.stage_seed("synth.train_corpus", s.train_corpus.seed),
            ..s.train_corpus.clone()
        };
        let stim = CorpusConfig {
            seed: self.cfg.stage_seed("synth.stimulus", s.stimulus.seed),
            ..s.stimulus.clone()
        };
        (train, stim)
    }

    pub fn synth_corpus_spec(&self) -> StageSpec {
        let (train, stim) = self.synth_corpus_configs();
        let mut outputs = Vec::new();
        for (name, c) in [("train", &train), ("stimulus", &stim)] {
            let d = self.at(Path::new("synth").join(name));
            for f in ["corpus.tsv", "trees.txt", "categories.tsv", "corpus_meta.json"] {
                outputs.push(d.join(f));
            }
            for r in 1..=c.n_runs {
                outputs.push(d.join(format!("audio_run{r}.csv")));
            }
        }
        StageSpec {
            key: "synth-corpus".into(),
            hash: config_hash(&json!({"stage": "synth-corpus", "train": train, "stimulus": stim})),
            seed: Some(stim.seed),
            inputs: vec![],
            outputs,
        }
    }

    pub fn synth_corpus(&self, force: bool) -> CliResult<()> {
        let spec = self.synth_corpus_spec();
        self.run(&spec, force, || {
            let (train, stim) = self.synth_corpus_configs();
            gen_corpus(&train)?.save(self.at("synth/train"))?;
            gen_corpus(&stim)?.save(self.at("synth/stimulus"))?;
            Ok(())
        })?;
        Ok(())
    }

    fn corpus_source(&self, user: &Option<PathBuf>, name: &str) -> CliResult<(PathBuf, String)> {
        match user {
            Some(p) => Ok((p.clone(), self.file_hash(p)?)),
            None => Ok((
                self.at(format!("synth/{name}/corpus.tsv")),
                self.synth_corpus_spec().hash,
            )),
        }
    }

    fn train_corpus_hash(&self) -> CliResult<String> {
        Ok(self.corpus_source(&self.cfg.paths.train_corpus, "train")?.1)
    }

    fn stimulus_hash(&self) -> CliResult<String> {
        Ok(self.corpus_source(&self.cfg.paths.stimulus, "stimulus")?.1)
    }

    fn load_corpus(&self, user: &Option<PathBuf>, name: &str) -> CliResult<AnnotatedCorpus> {
        if user.is_none() {
            self.synth_corpus(false)?;
        }
        let (path, _) = self.corpus_source(user, name)?;
        Ok(ingest_annotated(&path, &ColumnSchema::default())?)
    }

    pub fn train_corpus(&self) -> CliResult<AnnotatedCorpus> {
        self.load_corpus(&self.cfg.paths.train_corpus, "train")
    }

    pub fn stimulus(&self) -> CliResult<AnnotatedCorpus> {
        self.load_corpus(&self.cfg.paths.stimulus, "stimulus")
    }

    /// Directory of the stimulus audio envelopes and category table.
    fn stimulus_dir(&self) -> PathBuf {
        match (&self.cfg.paths.audio_dir, &self.cfg.paths.stimulus) {
            (Some(d), _) => d.clone(),
            (None, Some(s)) => s.parent().map(Path::to_path_buf).unwrap_or_default(),
            (None, None) => self.at("synth/stimulus"),
        }
    }

    fn audio(&self, corpus: &AnnotatedCorpus) -> CliResult<Vec<Vec<(f64, f64)>>> {
        let dir = self.stimulus_dir();
        corpus
            .run_ids()
            .into_iter()
            .map(|r| {
                let p = dir.join(format!("audio_run{r}.csv"));
                if !p.exists() {
                    return Err(CliError::Config(format!(
                        "paths.audio_dir: {} does not exist",
                        p.display()
                    )));
                }
                Ok(read_events_csv(&p)?)
            })
            .collect()
    }

    fn categories_path(&self) -> PathBuf {
        self.cfg
            .paths
            .word_categories
            .clone()
            .unwrap_or_else(|| self.stimulus_dir().join("categories.tsv"))
    }

    fn categories_hash(&self) -> CliResult<String> {
        match &self.cfg.paths.word_categories {
            Some(p) => self.file_hash(p),
            None if self.cfg.paths.stimulus.is_none() => Ok(self.synth_corpus_spec().hash),
            None => {
                let p = self.categories_path();
                if p.exists() {
                    self.file_hash(&p)
                } else {
                    Ok("none".into())
                }
            }
        }
    }

    // ---- streams and vocabularies -----------------------------------------

    pub fn stream_spec(&self, set: &str, mode: StreamMode) -> CliResult<StageSpec> {
        let key = format!("restrict-{set}-{}", mode.name());
        let upstream = if set == "train" {
            self.train_corpus_hash()?
        } else {
            self.stimulus_hash()?
        };
        Ok(StageSpec {
            hash: config_hash(&json!({"stage": key, "corpus": upstream})),
            outputs: vec![self.at(format!("streams/{set}-{}.tsv", mode.name()))],
            inputs: vec![upstream],
            seed: None,
            key,
        })
    }

    /// Writes `source_token<TAB>feature` for one stream of the training
    /// (`set = "train"`) or stimulus corpus.
    pub fn restrict_stream(&self, set: &str, mode: StreamMode, force: bool) -> CliResult<()> {
        let spec = self.stream_spec(set, mode)?;
        self.run(&spec, force, || {
            let corpus = if set == "train" {
                self.train_corpus()?
            } else {
                self.stimulus()?
            };
            let stream = restrict(&corpus, mode)?;
            let mut out = String::new();
            for (item, src) in stream.items.iter().zip(&stream.alignment) {
                let _ = writeln!(out, "{src}\t{item}");
            }
            fs::write(&spec.outputs[0], out).map_err(|e| data_err(&spec.outputs[0], e))
        })?;
        Ok(())
    }

    pub fn vocab_spec(&self, mode: StreamMode) -> CliResult<StageSpec> {
        let key = format!("vocab-{}", mode.name());
        let upstream = self.train_corpus_hash()?;
        Ok(StageSpec {
            hash: config_hash(&json!({"stage": key, "corpus": upstream})),
            outputs: vec![self.at(format!("models/{key}.tsv"))],
            inputs: vec![upstream],
            seed: None,
            key,
        })
    }

    pub fn vocab(&self, mode: StreamMode, force: bool) -> CliResult<Vocabulary> {
        let spec = self.vocab_spec(mode)?;
        self.run(&spec, force, || {
            let stream = restrict(&self.train_corpus()?, mode)?;
            Ok(build_vocabulary(&[&stream])?.save_tsv(&spec.outputs[0])?)
        })?;
        Ok(Vocabulary::load_tsv(&spec.outputs[0])?)
    }

    fn train_ids(&self, mode: StreamMode, vocab: &Vocabulary) -> CliResult<Vec<u32>> {
        let stream = restrict(&self.train_corpus()?, mode)?;
        Ok(encode_ids(&stream, vocab))
    }

    // ---- models ------------------------------------------------------------

    fn glove_config(&self) -> irnlm::glove::GloveConfig {
        irnlm::glove::GloveConfig {
            seed: self.cfg.stage_seed("glove", self.cfg.glove.seed),
            ..self.cfg.glove.clone()
        }
    }

    pub fn glove_spec(&self, mode: StreamMode) -> CliResult<StageSpec> {
        let key = format!("glove-{}", mode.name());
        let vocab = self.vocab_spec(mode)?;
        let g = self.glove_config();
        Ok(StageSpec {
            hash: config_hash(&json!({"stage": key, "vocab": vocab.hash, "glove": g})),
            outputs: vec![
                self.at(format!("models/{key}.emb")),
                self.at(format!("models/{key}-loss.csv")),
            ],
            inputs: vec![vocab.key],
            seed: Some(g.seed),
            key,
        })
    }

    pub fn glove(&self, mode: StreamMode, force: bool) -> CliResult<EmbeddingTable> {
        let spec = self.glove_spec(mode)?;
        self.run(&spec, force, || {
            let vocab = self.vocab(mode, false)?;
            let ids = self.train_ids(mode, &vocab)?;
            let g = self.glove_config();
            let cooc = build_cooccurrence(std::slice::from_ref(&ids), g.window, vocab.len())?;
            let fit = train_glove(&cooc, &g)?;
            fit.table.save(&spec.outputs[0])?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in fit.epoch_loss.iter().enumerate() {
                let _ = writeln!(csv, "{},{l}", e + 1);
            }
            fs::write(&spec.outputs[1], csv).map_err(|e| data_err(&spec.outputs[1], e))
        })?;
        Ok(EmbeddingTable::load(&spec.outputs[0])?)
    }

    fn gpt_configs(&self, vocab_len: usize, k: Option<usize>) -> (ModelConfig, irnlm::minigpt::TrainConfig) {
        let g = &self.cfg.gpt;
        let mut shape = g.shape.clone();
        shape.seed = self.cfg.stage_seed("gpt.init", shape.seed);
        if let Some(k) = k {
            shape.max_seq = shape.max_seq.max(k + 5);
        }
        let train = irnlm::minigpt::TrainConfig {
            seed: self.cfg.stage_seed("gpt.train", g.train.seed),
            ..g.train.clone()
        };
        (shape.config(vocab_len), train)
    }

    fn gpt_key(mode: StreamMode, k: Option<usize>) -> String {
        match k {
            Some(k) => format!("gpt-k{k}-{}", mode.name()),
            None => format!("gpt-{}", mode.name()),
        }
    }

    pub fn gpt_spec(&self, mode: StreamMode, k: Option<usize>) -> CliResult<StageSpec> {
        let key = Self::gpt_key(mode, k);
        let vocab = self.vocab_spec(mode)?;
        let (_, train) = self.gpt_configs(0, k);
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "vocab": vocab.hash, "shape": self.cfg.gpt.shape, "train": train,
                "seed": self.cfg.stage_seed("gpt.init", self.cfg.gpt.shape.seed), "k": k
            })),
            outputs: vec![
                self.at(format!("models/{key}.ckpt")),
                self.at(format!("models/{key}-loss.csv")),
            ],
            inputs: vec![vocab.key],
            seed: Some(train.seed),
            key,
        })
    }

    pub fn gpt(&self, mode: StreamMode, k: Option<usize>, force: bool) -> CliResult<Parameters> {
        let spec = self.gpt_spec(mode, k)?;
        self.run(&spec, force, || {
            let vocab = self.vocab(mode, false)?;
            let ids = self.train_ids(mode, &vocab)?;
            let (model, train_cfg) = self.gpt_configs(vocab.len(), k);
            let outcome = match k {
                Some(k) => train_sequences(&make_context_batches(&ids, k)?, &model, &train_cfg)?,
                None => train(&ids, &model, &train_cfg)?,
            };
            let mut params = outcome.params;
            params.meta.stream = Some(mode.name().to_string());
            params.meta.context_k = k;
            save_checkpoint(&spec.outputs[0], &params)?;
            Ok(write_loss_csv(&spec.outputs[1], &outcome.step_loss)?)
        })?;
        Ok(load_checkpoint(&spec.outputs[0])?)
    }

    // ---- embeddings --------------------------------------------------------

    fn model_hash(&self, s: Single) -> CliResult<String> {
        Ok(match s.model {
            ModelKind::Glove => self.glove_spec(s.mode)?.hash,
            ModelKind::Gpt => self.gpt_spec(s.mode, None)?.hash,
            ModelKind::GptLimited(k) => self.gpt_spec(s.mode, Some(k))?.hash,
        })
    }

    pub fn embed_spec(&self, s: Single) -> CliResult<StageSpec> {
        let key = format!("embed-{s}");
        let e = &self.cfg.embed;
        let window = matches!(s.model, ModelKind::Gpt).then_some(e.window);
        let layer = (!matches!(s.model, ModelKind::Glove)).then_some(e.layer).flatten();
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "model": self.model_hash(s)?, "stimulus": self.stimulus_hash()?,
                "window": window, "layer": layer
            })),
            outputs: vec![
                self.at(format!("embeddings/{s}.emb")),
                self.at(format!("embeddings/{s}.json")),
            ],
            inputs: vec![format!("{s}"), "stimulus".into()],
            seed: None,
            key,
        })
    }

    pub fn embedding(&self, s: Single, force: bool) -> CliResult<EmbeddingMatrix> {
        let spec = self.embed_spec(s)?;
        self.run(&spec, force, || {
            let stim = self.stimulus()?;
            let vocab = self.vocab(s.mode, false)?;
            let stream = restrict(&stim, s.mode)?;
            let name = s.to_string();
            let m = match s.model {
                ModelKind::Glove => {
                    let table = self.glove(s.mode, false)?;
                    extract_static(&stream, &vocab, &table, &name, stim.len())?
                }
                ModelKind::Gpt | ModelKind::GptLimited(_) => {
                    let k = match s.model {
                        ModelKind::GptLimited(k) => Some(k),
                        _ => None,
                    };
                    let params = self.gpt(s.mode, k, false)?;
                    let ids = encode_ids(&stream, &vocab);
                    let prov = contextual_provenance(&name, &stream, stim.len())?;
                    let layer = self.cfg.embed.layer.unwrap_or_else(|| params.config.extraction_layer());
                    match k {
                        Some(k) => extract_context_limited(&ids, &params, k, layer, prov)?,
                        None => extract_sliding(&ids, &params, self.cfg.embed.window, layer, prov)?,
                    }
                }
            };
            Ok(m.save(&spec.outputs[0])?)
        })?;
        Ok(EmbeddingMatrix::load(&spec.outputs[0])?)
    }

    // ---- BOLD --------------------------------------------------------------

    fn synth_bold_config(&self) -> BoldConfig {
        BoldConfig {
            seed: self.cfg.stage_seed("synth.bold", self.cfg.synth.bold.seed),
            ..self.cfg.synth.bold.clone()
        }
    }

    fn n_stimulus_runs(&self) -> CliResult<usize> {
        match &self.cfg.paths.stimulus {
            None => Ok(self.cfg.synth.stimulus.n_runs),
            Some(_) => Ok(self.stimulus()?.run_ids().len()),
        }
    }

    pub fn synth_bold_spec(&self) -> CliResult<StageSpec> {
        let s = &self.cfg.synth;
        let single = |f: &Feature, field: &str| {
            f.single()
                .ok_or_else(|| CliError::Config(format!("synth.{field}: `{f}` must name a single feature")))
        };
        let (sem, syn) = (
            single(&s.drive_semantic, "drive_semantic")?,
            single(&s.drive_syntactic, "drive_syntactic")?,
        );
        let bold = self.synth_bold_config();
        let n_runs = self.n_stimulus_runs()?;
        let dir = self.at("bold");
        let mut outputs = Vec::new();
        for subj in 0..bold.n_subjects {
            for r in 1..=n_runs {
                outputs.push(dir.join(sub_dir(subj)).join(format!("run-{r}.bold")));
                outputs.push(dir.join(sub_dir(subj)).join(format!("run-{r}.json")));
            }
        }
        outputs.push(dir.join("ground_truth.json"));
        Ok(StageSpec {
            key: "synth-bold".into(),
            hash: config_hash(&json!({
                "stage": "synth-bold", "sem": self.embed_spec(sem)?.hash, "syn": self.embed_spec(syn)?.hash,
                "stimulus": self.stimulus_hash()?, "bold": bold, "hrf": self.cfg.encode.hrf,
                "layout_seed": self.cfg.stage_seed("synth.layout", s.layout_seed)
            })),
            seed: Some(bold.seed),
            inputs: vec![format!("embed-{sem}"), format!("embed-{syn}")],
            outputs,
        })
    }

    pub fn synth_bold(&self, force: bool) -> CliResult<()> {
        let spec = self.synth_bold_spec()?;
        self.run(&spec, force, || {
            let s = &self.cfg.synth;
            let stim = self.stimulus()?;
            let sem = self.embedding(s.drive_semantic.single().expect("checked"), false)?;
            let syn = self.embedding(s.drive_syntactic.single().expect("checked"), false)?;
            let (x_sem, x_syn) = (split_runs(&sem, &stim)?, split_runs(&syn, &stim)?);
            let bold = self.synth_bold_config();
            let layout = VoxelLayout::slabs(
                bold.geometry(),
                x_sem[0].ncols(),
                x_syn[0].ncols(),
                bold.snr,
                self.cfg.stage_seed("synth.layout", s.layout_seed),
            )?;
            let kernel = hrf_kernel(&self.cfg.encode.hrf)?;
            let data = gen_bold(&x_sem, &x_syn, &run_offsets(&stim), &layout, &kernel, &bold)?;
            for (subj, runs) in data.subjects.iter().enumerate() {
                for run in runs {
                    run.save(
                        self.at("bold")
                            .join(sub_dir(subj))
                            .join(format!("run-{}.bold", run.run_id)),
                    )?;
                }
            }
            write_json(
                &self.at("bold/ground_truth.json"),
                &GroundTruth {
                    layout,
                    bold,
                    drive_semantic: s.drive_semantic.clone(),
                    drive_syntactic: s.drive_syntactic.clone(),
                },
            )
        })?;
        Ok(())
    }

    fn bold_dir(&self) -> PathBuf {
        self.cfg.paths.bold_dir.clone().unwrap_or_else(|| self.at("bold"))
    }

    fn bold_hash(&self) -> CliResult<String> {
        match &self.cfg.paths.bold_dir {
            Some(d) => self.dir_hash(d),
            None => Ok(self.synth_bold_spec()?.hash),
        }
    }

    fn n_subjects(&self) -> CliResult<usize> {
        match &self.cfg.paths.bold_dir {
            None => Ok(self.cfg.synth.bold.n_subjects),
            Some(d) => Ok(subject_dirs(d)?.len()),
        }
    }

    /// Runs of every subject, in subject order.
    pub fn bold(&self) -> CliResult<Vec<Vec<BoldRun>>> {
        if self.cfg.paths.bold_dir.is_none() {
            self.synth_bold(false)?;
        }
        let dirs = subject_dirs(&self.bold_dir())?;
        if dirs.len() < 2 {
            return Err(CliError::Data(format!(
                "{}: group analyses need at least 2 subject directories",
                self.bold_dir().display()
            )));
        }
        dirs.iter()
            .map(|d| {
                let mut files: Vec<(u32, PathBuf)> = fs::read_dir(d)
                    .map_err(|e| data_err(d, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter_map(|p| {
                        let stem = p.file_stem()?.to_str()?.strip_prefix("run-")?.parse().ok()?;
                        (p.extension()? == "bold").then_some((stem, p))
                    })
                    .collect();
                files.sort();
                files.iter().map(|(_, p)| Ok(BoldRun::load(p)?)).collect()
            })
            .collect()
    }

    pub fn ground_truth(&self) -> CliResult<Option<GroundTruth>> {
        if self.cfg.paths.bold_dir.is_some() {
            return Ok(None);
        }
        self.synth_bold(false)?;
        let p = self.at("bold/ground_truth.json");
        let text = fs::read_to_string(&p).map_err(|e| data_err(&p, e))?;
        Ok(Some(serde_json::from_str(&text).map_err(|e| data_err(&p, e))?))
    }

    // ---- encoding ----------------------------------------------------------

    fn kernel(&self) -> CliResult<HrfKernel> {
        Ok(hrf_kernel(&self.cfg.encode.hrf)?)
    }

    /// Standardized per-run design of a feature set, singles side by side.
    fn designs(&self, f: &Feature, stim: &AnnotatedCorpus, runs: &[BoldRun]) -> CliResult<Vec<DMatrix<f64>>> {
        let kernel = self.kernel()?;
        let n_runs = stim.run_ranges().len();
        if n_runs != runs.len() {
            return Err(CliError::Data(format!(
                "stimulus has {n_runs} runs, BOLD data {}",
                runs.len()
            )));
        }
        let enc = &self.cfg.encode;
        let mut blocks: Vec<Vec<DMatrix<f64>>> = Vec::new();
        for s in &f.0 {
            let events = run_events(&self.embedding(*s, false)?, stim, enc.stream_rows, enc.event_time)?;
            let d = events
                .iter()
                .zip(runs)
                .map(|((xr, t), run)| build_design(xr, t, &kernel, run.tr_s, run.n_scans(), true))
                .collect::<irnlm::Result<Vec<_>>>()?;
            blocks.push(d);
        }
        Ok((0..runs.len())
            .map(|r| {
                let cols: Vec<&DMatrix<f64>> = blocks.iter().map(|b| &b[r]).collect();
                hstack(&cols)
            })
            .collect())
    }

    fn baseline(&self, stim: &AnnotatedCorpus, runs: &[BoldRun]) -> CliResult<Vec<DMatrix<f64>>> {
        let kernel = self.kernel()?;
        let audio = self.audio(stim)?;
        let n_scans = runs[0].n_scans();
        if runs.iter().any(|r| r.n_scans() != n_scans || r.tr_s != runs[0].tr_s) {
            return Err(CliError::Data("BOLD runs differ in length or TR".into()));
        }
        Ok(baseline_designs(
            stim,
            &audio,
            self.cfg.encode.event_time,
            &kernel,
            runs[0].tr_s,
            n_scans,
        )?)
    }

    fn map_outputs(&self, name: &str) -> CliResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        for s in 0..self.n_subjects()? {
            let d = self.at("encode").join(sub_dir(s));
            out.push(d.join(format!("{name}.map")));
            out.push(d.join(format!("{name}.json")));
        }
        Ok(out)
    }

    pub fn encode_spec(&self, f: Option<&Feature>) -> CliResult<StageSpec> {
        let (key, name, embeds) = match f {
            Some(f) => {
                let hashes =
                    f.0.iter()
                        .map(|s| self.embed_spec(*s).map(|e| e.hash))
                        .collect::<CliResult<Vec<_>>>()?;
                (format!("encode-{f}"), format!("r-{f}"), hashes)
            }
            None => ("encode-baseline".to_string(), "r-baseline".to_string(), vec![]),
        };
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "embeddings": embeds, "bold": self.bold_hash()?, "stimulus": self.stimulus_hash()?,
                "hrf": self.cfg.encode.hrf, "lambdas": self.cfg.encode.lambdas,
                "event_time": self.cfg.encode.event_time, "stream_rows": self.cfg.encode.stream_rows
            })),
            outputs: self.map_outputs(&name)?,
            inputs: f
                .map(|f| f.0.iter().map(|s| format!("embed-{s}")).collect())
                .unwrap_or_default(),
            seed: None,
            key,
        })
    }

    /// Cross-validated R maps of `feature + baseline` (or of the baseline
    /// alone), one per subject.
    pub fn encode_fit(&self, f: Option<&Feature>, force: bool) -> CliResult<Vec<VoxelMap>> {
        let spec = self.encode_spec(f)?;
        self.run(&spec, force, || {
            let stim = self.stimulus()?;
            let subjects = self.bold()?;
            let base = self.baseline(&stim, &subjects[0])?;
            let design = match f {
                Some(f) => with_baseline(Some(&self.designs(f, &stim, &subjects[0])?), &base)?,
                None => base,
            };
            let label = f.map_or("baseline".to_string(), |f| f.to_string());
            let maps = subjects
                .par_iter()
                .map(|runs| {
                    let y = clean_runs(runs)?;
                    encode_map(&design, &y, &runs[0].geometry, &self.cfg.encode.lambdas, &label)
                })
                .collect::<irnlm::Result<Vec<_>>>()?;
            for (m, p) in maps.iter().zip(spec.outputs.iter().step_by(2)) {
                m.save(p)?;
            }
            Ok(())
        })?;
        load_maps(spec.outputs.iter().step_by(2))
    }

    pub fn delta_spec(&self, f: &Feature) -> CliResult<StageSpec> {
        let key = format!("delta-{f}");
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "fit": self.encode_spec(Some(f))?.hash, "baseline": self.encode_spec(None)?.hash
            })),
            outputs: self.map_outputs(&format!("dr-{f}"))?,
            inputs: vec![format!("encode-{f}"), "encode-baseline".into()],
            seed: None,
            key,
        })
    }

    /// Per-subject `R(feature + baseline) − R(baseline)`.
    pub fn encode_delta(&self, f: &Feature, force: bool) -> CliResult<Vec<VoxelMap>> {
        let spec = self.delta_spec(f)?;
        self.run(&spec, force, || {
            let full = self.encode_fit(Some(f), false)?;
            let base = self.encode_fit(None, false)?;
            for ((a, b), p) in full.iter().zip(&base).zip(spec.outputs.iter().step_by(2)) {
                delta_r(a, b)?.save(p)?;
            }
            Ok(())
        })?;
        load_maps(spec.outputs.iter().step_by(2))
    }

    // ---- group statistics --------------------------------------------------

    pub fn stats_path(&self, name: &str) -> PathBuf {
        self.at("stats").join(name)
    }

    fn group_outputs(&self, stem: &str) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for part in ["t", "p", "z", "mask"] {
            out.push(self.stats_path(&format!("{stem}-{part}.map")));
            out.push(self.stats_path(&format!("{stem}-{part}.json")));
        }
        out.push(self.stats_path(&format!("{stem}.json")));
        out
    }

    pub fn group_spec(&self, f: &Feature) -> CliResult<StageSpec> {
        let key = format!("group-{f}");
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "delta": self.delta_spec(f)?.hash, "q": self.cfg.stats.q, "fwhm": self.cfg.stats.fwhm_mm
            })),
            outputs: self.group_outputs(&key),
            inputs: vec![format!("delta-{f}")],
            seed: None,
            key,
        })
    }

    fn save_group(&self, stem: &str, label: &str, maps: &[VoxelMap]) -> CliResult<GroupSummary> {
        let g = group_test_fdr(maps, self.cfg.stats.q, self.cfg.stats.fwhm_mm)?;
        for (part, m) in [("t", &g.t), ("p", &g.p), ("z", &g.z), ("mask", &g.mask)] {
            m.save(self.stats_path(&format!("{stem}-{part}.map")))?;
        }
        let n = maps[0].len();
        let summary = GroupSummary {
            feature: label.to_string(),
            n_subjects: maps.len(),
            n_voxels: n,
            n_significant: g.mask.as_mask().iter().filter(|&&b| b).count(),
            z_fdr: g.z_fdr,
            mean_value: maps.iter().flat_map(|m| m.values.iter()).sum::<f64>() / (n * maps.len()) as f64,
        };
        write_json(&self.stats_path(&format!("{stem}.json")), &summary)?;
        Ok(summary)
    }

    /// One-sided group test with FDR on the ΔR maps of `f`.
    pub fn group(&self, f: &Feature, force: bool) -> CliResult<GroupSummary> {
        let spec = self.group_spec(f)?;
        self.run(&spec, force, || {
            let maps = self.encode_delta(f, false)?;
            self.save_group(&spec.key, &f.to_string(), &maps).map(|_| ())
        })?;
        read_json_file(spec.outputs.last().expect("summary"))
    }

    pub fn group_mask(&self, f: &Feature) -> CliResult<VoxelMap> {
        self.group(f, false)?;
        Ok(VoxelMap::load(self.stats_path(&format!("group-{f}-mask.map")))?)
    }

    pub fn specificity_spec(&self) -> CliResult<StageSpec> {
        let s = &self.cfg.stats;
        Ok(StageSpec {
            key: "specificity".into(),
            hash: config_hash(&json!({
                "stage": "specificity", "sem": self.delta_spec(&s.semantic)?.hash, "syn": self.delta_spec(&s.syntactic)?.hash
            })),
            outputs: vec![self.stats_path("specificity.map"), self.stats_path("specificity.json")],
            inputs: vec![format!("delta-{}", s.semantic), format!("delta-{}", s.syntactic)],
            seed: None,
        })
    }

    /// Mean over subjects of `log10(ΔR_sem / ΔR_syn)` where both are positive.
    pub fn specificity(&self, force: bool) -> CliResult<VoxelMap> {
        let spec = self.specificity_spec()?;
        self.run(&spec, force, || {
            let sem = self.encode_delta(&self.cfg.stats.semantic, false)?;
            let syn = self.encode_delta(&self.cfg.stats.syntactic, false)?;
            let per = sem
                .iter()
                .zip(&syn)
                .map(|(a, b)| specificity(a, b))
                .collect::<irnlm::Result<Vec<_>>>()?;
            Ok(group_specificity(&per)?.save(&spec.outputs[0])?)
        })?;
        Ok(VoxelMap::load(&spec.outputs[0])?)
    }

    pub fn verdicts_spec(&self) -> CliResult<StageSpec> {
        let s = &self.cfg.stats;
        Ok(StageSpec {
            key: "verdicts".into(),
            hash: config_hash(&json!({
                "stage": "verdicts", "truth": self.synth_bold_spec()?.hash,
                "sem": self.group_spec(&s.semantic)?.hash, "syn": self.group_spec(&s.syntactic)?.hash,
                "specificity": self.specificity_spec()?.hash
            })),
            outputs: vec![self.stats_path("verdicts.json")],
            inputs: vec![
                format!("group-{}", s.semantic),
                format!("group-{}", s.syntactic),
                "specificity".into(),
            ],
            seed: None,
        })
    }

    /// Recovery verdicts against the synthetic ground truth; `None` for
    /// external BOLD data.
    pub fn verdicts(&self, force: bool) -> CliResult<Option<RecoverySummary>> {
        if self.cfg.paths.bold_dir.is_some() {
            return Ok(None);
        }
        let spec = self.verdicts_spec()?;
        self.run(&spec, force, || {
            let truth = self.ground_truth()?.expect("synthetic BOLD");
            let syn = self.group_mask(&self.cfg.stats.syntactic)?;
            let sem = self.group_mask(&self.cfg.stats.semantic)?;
            let spec_map = self.specificity(false)?;
            let summary = evaluate_recovery(&syn, &sem, &spec_map, &truth.layout)?;
            write_json(&spec.outputs[0], &summary)
        })?;
        Ok(Some(read_json_file(&spec.outputs[0])?))
    }

    pub fn peaks_spec(&self, f: &Feature) -> CliResult<StageSpec> {
        let key = format!("peaks-{f}");
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "delta": self.delta_spec(f)?.hash, "percentile": self.cfg.stats.percentile
            })),
            outputs: vec![
                self.stats_path(&format!("mean-dr-{f}.map")),
                self.stats_path(&format!("mean-dr-{f}.json")),
                self.stats_path(&format!("{key}.map")),
                self.stats_path(&format!("{key}.json")),
            ],
            inputs: vec![format!("delta-{f}")],
            seed: None,
            key,
        })
    }

    /// Voxels above the configured percentile of the group-mean ΔR map.
    pub fn peaks(&self, f: &Feature, force: bool) -> CliResult<VoxelMap> {
        let spec = self.peaks_spec(f)?;
        self.run(&spec, force, || {
            let maps = self.encode_delta(f, false)?;
            let n = maps.len() as f64;
            let values = (0..maps[0].len())
                .map(|v| maps.iter().map(|m| m.values[v]).sum::<f64>() / n)
                .collect();
            let mean =
                VoxelMap::new(values, maps[0].geometry.clone(), MapKind::DeltaR)?.with_provenance(vec![f.to_string()]);
            mean.save(&spec.outputs[0])?;
            Ok(peak_regions(&mean, self.cfg.stats.percentile)?.save(&spec.outputs[2])?)
        })?;
        Ok(VoxelMap::load(&spec.outputs[2])?)
    }

    pub fn jaccard_spec(&self, a: &Feature, b: &Feature) -> CliResult<StageSpec> {
        let key = format!("jaccard-{a}-{b}");
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key,
                "a": [self.group_spec(a)?.hash, self.peaks_spec(a)?.hash],
                "b": [self.group_spec(b)?.hash, self.peaks_spec(b)?.hash]
            })),
            outputs: vec![self.stats_path(&format!("{key}.json"))],
            inputs: vec![format!("group-{a}"), format!("group-{b}")],
            seed: None,
            key,
        })
    }

    /// Overlap of the significant sets (whole grid and per hemisphere) and
    /// of the peak regions of two feature sets.
    pub fn jaccard(&self, a: &Feature, b: &Feature, force: bool) -> CliResult<JaccardSummary> {
        let spec = self.jaccard_spec(a, b)?;
        self.run(&spec, force, || {
            let (ma, mb) = (self.group_mask(a)?, self.group_mask(b)?);
            let (pa, pb) = (self.peaks(a, false)?, self.peaks(b, false)?);
            let summary = JaccardSummary {
                a: a.to_string(),
                b: b.to_string(),
                significant: jaccard(&ma.as_mask(), &mb.as_mask())?,
                significant_left: jaccard_hemisphere(&ma, &mb, Hemisphere::Left)?,
                significant_right: jaccard_hemisphere(&ma, &mb, Hemisphere::Right)?,
                peaks: jaccard(&pa.as_mask(), &pb.as_mask())?,
            };
            write_json(&spec.outputs[0], &summary)
        })?;
        read_json_file(&spec.outputs[0])
    }

    pub fn unique_spec(&self, joint: &Feature, single: &Feature) -> CliResult<StageSpec> {
        let key = format!("unique-{joint}-vs-{single}");
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "joint": self.encode_spec(Some(joint))?.hash, "single": self.encode_spec(Some(single))?.hash,
                "q": self.cfg.stats.q, "fwhm": self.cfg.stats.fwhm_mm
            })),
            outputs: self.group_outputs(&key),
            inputs: vec![format!("encode-{joint}"), format!("encode-{single}")],
            seed: None,
            key,
        })
    }

    /// Group test on `R(joint) − R(single)`: what the rest of `joint` adds.
    pub fn unique(&self, joint: &Feature, single: &Feature, force: bool) -> CliResult<GroupSummary> {
        let spec = self.unique_spec(joint, single)?;
        self.run(&spec, force, || {
            let rj = self.encode_fit(Some(joint), false)?;
            let rs = self.encode_fit(Some(single), false)?;
            let maps = rj
                .iter()
                .zip(&rs)
                .map(|(a, b)| unique_contribution(a, b))
                .collect::<irnlm::Result<Vec<_>>>()?;
            self.save_group(&spec.key, &format!("{joint} vs {single}"), &maps)
                .map(|_| ())
        })?;
        read_json_file(spec.outputs.last().expect("summary"))
    }

    // ---- decoding ----------------------------------------------------------

    pub fn decode_spec(&self, mode: DecodeMode, s: Single, labels: Labels) -> CliResult<StageSpec> {
        let m = match mode {
            DecodeMode::Fit => "fit",
            DecodeMode::Cv => "cv",
        };
        let key = format!("decode-{m}-{s}-{}", labels.name());
        let mut outputs = vec![self.at(format!("decode/{m}-{s}-{}.json", labels.name()))];
        if mode == DecodeMode::Fit {
            outputs.push(self.at(format!("decode/{m}-{s}-{}.weights", labels.name())));
        }
        let d = &self.cfg.decode;
        Ok(StageSpec {
            hash: config_hash(&json!({
                "stage": key, "embedding": self.embed_spec(s)?.hash, "stimulus": self.stimulus_hash()?,
                "categories": self.categories_hash()?, "logistic": d.logistic, "dummy": d.dummy
            })),
            outputs,
            inputs: vec![format!("embed-{s}")],
            seed: Some(0),
            key,
        })
    }

    pub fn decode(&self, mode: DecodeMode, s: Single, labels: Labels, force: bool) -> CliResult<DecodeSummary> {
        let spec = self.decode_spec(mode, s, labels)?;
        self.run(&spec, force, || {
            let stim = self.stimulus()?;
            let m = self.embedding(s, false)?;
            let (token_labels, kind) = match labels {
                Labels::Triplet => (triplet_labels(&stim), LabelKind::SyntacticTriplet),
                Labels::Category => {
                    let p = self.categories_path();
                    if !p.exists() {
                        return Err(CliError::Config(format!(
                            "paths.word_categories: {} does not exist",
                            p.display()
                        )));
                    }
                    (
                        category_labels(&stim, &read_word_categories(&p)?),
                        LabelKind::SemanticCategory,
                    )
                }
            };
            let data = LabeledEmbeddings::from_matrix(&m, &token_labels, &stim, kind)?;
            let d = &self.cfg.decode;
            let summary = match mode {
                DecodeMode::Cv => {
                    let res = cv_decode(&data, &d.logistic)?;
                    let chance = dummy_baseline(&data.labels, &data.run_ids, d.dummy, 0)?;
                    DecodeSummary {
                        feature: s.to_string(),
                        labels,
                        mode: "cv".into(),
                        n_rows: data.labels.len(),
                        n_classes: data.n_classes(),
                        accuracy: res.mean_accuracy,
                        fold_accuracy: res.fold_accuracy,
                        chance: Some(chance.mean_accuracy),
                        converged: Some(res.reports.iter().all(|r| r.converged)),
                    }
                }
                DecodeMode::Fit => {
                    let (clf, report) = fit_logistic(&data.x, &data.labels, &d.logistic)?;
                    let pred = clf.predict(&data.x);
                    let hits = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
                    let w = &clf.weights;
                    let row_major: Vec<f64> = (0..w.nrows())
                        .flat_map(|i| w.row(i).iter().copied().collect::<Vec<_>>())
                        .collect();
                    write_matrix(&spec.outputs[1], w.nrows(), w.ncols(), &row_major)?;
                    DecodeSummary {
                        feature: s.to_string(),
                        labels,
                        mode: "fit".into(),
                        n_rows: data.labels.len(),
                        n_classes: data.n_classes(),
                        accuracy: hits as f64 / data.labels.len().max(1) as f64,
                        fold_accuracy: vec![],
                        chance: None,
                        converged: Some(report.converged),
                    }
                }
            };
            write_json(&spec.outputs[0], &summary)
        })?;
        read_json_file(&spec.outputs[0])
    }

    pub fn output_dir(&self, name: &str) -> CliResult<PathBuf> {
        let d = self.at(name);
        ensure_dir(&d)?;
        Ok(d)
    }
}

fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let d: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (n, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

fn load_maps<'a>(paths: impl Iterator<Item = &'a PathBuf>) -> CliResult<Vec<VoxelMap>> {
    paths.map(|p| Ok(VoxelMap::load(p)?)).collect()
}

pub fn read_json_file<T: serde::de::DeserializeOwned>(p: &Path) -> CliResult<T> {
    let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(p, e))
}

fn subject_dirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sub-")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for e in fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        let p = e.map_err(|e| data_err(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
