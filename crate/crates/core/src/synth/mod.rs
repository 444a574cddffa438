//! Synthetic corpora and BOLD data with known ground truth.

mod bold;
mod grammar;

pub use bold::{
    evaluate_recovery, gen_bold, noise, subject_runs, trailing_mean, voxel_signal, BoldConfig, ClassRecovery,
    RecoverySummary, SyntheticBold, Verdict, VoxelClass, VoxelLayout,
};
pub use grammar::{category_name, expected_content_ratio, gen_corpus, lexicon, CorpusConfig, SynthCorpus};
