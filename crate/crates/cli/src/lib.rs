//! Command-line pipeline: corpora, models, embeddings, encoding maps,
//! group statistics and decoding, run stage by stage from one JSON
//! configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod design;
pub mod error;
pub mod experiments;
pub mod feature;
pub mod pipeline;
pub mod report;
pub mod stage;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use irnlm::corpus::StreamMode;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::feature::{parse_mode, Feature, ModelKind, Single};
use crate::pipeline::{DecodeMode, Labels, Pipeline};

#[derive(Debug, Parser)]
#[command(
    name = "irnlm",
    version,
    about = "Restricted language models and fMRI encoding pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `workdir`.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Overrides the root `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads; falls back to IRNLM_THREADS.
    #[arg(long, global = true, env = "IRNLM_THREADS")]
    pub threads: Option<usize>,
    /// Rerun the requested stage even when it is up to date.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Feature streams and vocabularies.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Model training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Embeddings of the stimulus corpus.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Cross-validated encoding maps per subject.
    #[command(subcommand)]
    Encode(EncodeCmd),
    /// Group-level statistics.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Decoding of syntactic and semantic labels.
    Decode {
        #[arg(value_enum)]
        mode: DecodeMode,
        #[arg(long, value_enum)]
        labels: Option<Labels>,
        #[arg(long)]
        feature: Option<Feature>,
    },
    /// Synthetic corpora and BOLD data.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// CSV tables and PGM slices of the default analyses.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CorpusSet {
    Train,
    Stimulus,
}

#[derive(Debug, Args)]
pub struct ModeArg {
    /// Stream (integral, semantic, syntactic); all configured streams if unset.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<StreamMode>,
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Write the restricted feature stream(s).
    Restrict {
        /// Which corpus to restrict.
        #[arg(long, value_enum, default_value = "train")]
        corpus: CorpusSet,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Build the training vocabulary of each stream.
    Vocab(ModeArg),
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    Glove(ModeArg),
    Gpt {
        #[command(flatten)]
        mode: ModeArg,
        /// Train on sequences of `k` context tokens.
        #[arg(long)]
        context_k: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EmbedCmd {
    /// Static word vectors.
    Static(ModeArg),
    /// Contextual model read with sliding windows.
    Sliding(ModeArg),
    /// Context-limited model read with exactly `k` tokens of context.
    Limited {
        #[command(flatten)]
        mode: ModeArg,
        #[arg(long)]
        k: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum EncodeCmd {
    /// R maps of feature + baseline.
    Fit(FeatureArg),
    /// R maps of the baseline alone.
    Baseline,
    /// ΔR maps against the baseline.
    Delta(FeatureArg),
}

#[derive(Debug, Args)]
pub struct FeatureArg {
    /// Feature set such as `glove-semantic` or `gpt-semantic+gpt-syntactic`;
    /// the configured list if unset.
    #[arg(long)]
    pub feature: Option<Feature>,
}

#[derive(Debug, Subcommand)]
pub enum StatsCmd {
    Group(FeatureArg),
    Specificity,
    Jaccard {
        #[arg(long)]
        a: Option<Feature>,
        #[arg(long)]
        b: Option<Feature>,
    },
    Peaks(FeatureArg),
    /// Group test on R(joint) − R(single).
    Unique {
        #[arg(long)]
        joint: Feature,
        #[arg(long)]
        single: Feature,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    Corpus,
    Bold,
}

impl Pipeline {
    fn modes(&self, m: &ModeArg) -> Vec<StreamMode> {
        m.mode.map_or_else(|| self.cfg.corpus.modes.clone(), |m| vec![m])
    }

    fn features(&self, f: &FeatureArg) -> Vec<Feature> {
        f.feature
            .clone()
            .map_or_else(|| self.cfg.encode.features.clone(), |f| vec![f])
    }
}

fn embed_all(p: &Pipeline, modes: Vec<StreamMode>, model: ModelKind, force: bool) -> CliResult<()> {
    for mode in modes {
        p.embedding(Single { model, mode }, force)?;
    }
    Ok(())
}

fn dispatch(p: &Pipeline, cmd: &Command, force: bool) -> CliResult<()> {
    match cmd {
        Command::Corpus(CorpusCmd::Restrict { corpus, mode }) => {
            let set = match corpus {
                CorpusSet::Train => "train",
                CorpusSet::Stimulus => "stimulus",
            };
            for m in p.modes(mode) {
                p.restrict_stream(set, m, force)?;
            }
        }
        Command::Corpus(CorpusCmd::Vocab(mode)) => {
            for m in p.modes(mode) {
                p.vocab(m, force)?;
            }
        }
        Command::Train(TrainCmd::Glove(mode)) => {
            for m in p.modes(mode) {
                p.glove(m, force)?;
            }
        }
        Command::Train(TrainCmd::Gpt { mode, context_k }) => {
            for m in p.modes(mode) {
                p.gpt(m, *context_k, force)?;
            }
        }
        Command::Embed(EmbedCmd::Static(mode)) => embed_all(p, p.modes(mode), ModelKind::Glove, force)?,
        Command::Embed(EmbedCmd::Sliding(mode)) => embed_all(p, p.modes(mode), ModelKind::Gpt, force)?,
        Command::Embed(EmbedCmd::Limited { mode, k }) => embed_all(p, p.modes(mode), ModelKind::GptLimited(*k), force)?,
        Command::Encode(EncodeCmd::Fit(f)) => {
            for f in p.features(f) {
                p.encode_fit(Some(&f), force)?;
            }
        }
        Command::Encode(EncodeCmd::Baseline) => {
            p.encode_fit(None, force)?;
        }
        Command::Encode(EncodeCmd::Delta(f)) => {
            for f in p.features(f) {
                p.encode_delta(&f, force)?;
            }
        }
        Command::Stats(StatsCmd::Group(f)) => {
            for f in p.features(f) {
                let g = p.group(&f, force)?;
                println!("{f}: {} of {} voxels significant", g.n_significant, g.n_voxels);
            }
            p.verdicts(false)?;
        }
        Command::Stats(StatsCmd::Specificity) => {
            p.specificity(force)?;
            if let Some(v) = p.verdicts(false)? {
                for v in &v.verdicts {
                    println!(
                        "{:<40} {:>8.4} {} {}",
                        v.name,
                        v.value,
                        v.condition,
                        if v.passed { "pass" } else { "FAIL" }
                    );
                }
            }
        }
        Command::Stats(StatsCmd::Jaccard { a, b }) => {
            let a = a.clone().unwrap_or_else(|| p.cfg.stats.syntactic.clone());
            let b = b.clone().unwrap_or_else(|| p.cfg.stats.semantic.clone());
            let j = p.jaccard(&a, &b, force)?;
            println!(
                "jaccard {a} {b}: significant {:.3} (left {:.3}, right {:.3}), peaks {:.3}",
                j.significant, j.significant_left, j.significant_right, j.peaks
            );
        }
        Command::Stats(StatsCmd::Peaks(f)) => {
            for f in p.features(f) {
                p.peaks(&f, force)?;
            }
        }
        Command::Stats(StatsCmd::Unique { joint, single }) => {
            let g = p.unique(joint, single, force)?;
            println!(
                "{}: {} of {} voxels significant",
                g.feature, g.n_significant, g.n_voxels
            );
        }
        Command::Decode { mode, labels, feature } => {
            let features = feature
                .clone()
                .map_or_else(|| p.cfg.decode.features.clone(), |f| vec![f]);
            let labels = labels.map_or_else(|| vec![Labels::Triplet, Labels::Category], |l| vec![l]);
            for f in features {
                let s = f
                    .single()
                    .ok_or_else(|| CliError::Config(format!("decode feature `{f}` must name a single model")))?;
                for &l in &labels {
                    let d = p.decode(*mode, s, l, force)?;
                    match d.chance {
                        Some(c) => println!("{s} {}: accuracy {:.3} (chance {:.3})", l.name(), d.accuracy, c),
                        None => println!("{s} {}: training accuracy {:.3}", l.name(), d.accuracy),
                    }
                }
            }
        }
        Command::Synth(SynthCmd::Corpus) => p.synth_corpus(force)?,
        Command::Synth(SynthCmd::Bold) => p.synth_bold(force)?,
        Command::Report => p.report(force)?,
    }
    Ok(())
}

fn load_config(g: &Global) -> CliResult<PipelineConfig> {
    let mut overrides = Vec::new();
    if let Some(w) = &g.workdir {
        overrides.push(format!(
            "workdir={}",
            serde_json::Value::String(w.display().to_string())
        ));
    }
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(g.set.iter().cloned());
    PipelineConfig::load(g.config.as_deref(), &overrides)
}

/// Runs one command line and returns its exit code: 0 on success, 2 for
/// configuration errors, 3 for data errors and 4 for numerical failures.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    if let Some(n) = cli.global.threads {
        // Fails only when the pool already exists, e.g. on a second call
        // within one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = load_config(&cli.global).and_then(|cfg| {
        let p = Pipeline::new(cfg);
        dispatch(&p, &cli.command, cli.global.force)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
