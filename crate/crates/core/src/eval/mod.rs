//! Objective evaluation: character error rate, equal error rate, speaker
//! embeddings, manifest-driven reports, and loss ablations.

mod ablation;
mod adapter;
mod eer;
mod embed;
mod manifest;
mod report;
mod text;

pub use ablation::{
    ablation_run, evaluate_reconstructions, formant_track_error, standard_variants, AblationRow, AblationSetup,
    AblationTable, AblationVariant, VariantEval,
};
pub use adapter::{AudioItems, MfccEmbedder, SpeakerEmbedder, SubprocessAdapter, Transcriber, VowelTranscriber};
pub use eer::{eer, mean_ci, EerResult, MeanCi, ScoreSet};
pub use embed::{cosine, reference_speaker_embedding, EMBEDDING_DIM, MFCC_BANDS, MFCC_COEFFS, MIN_EMBED_SECONDS};
pub use manifest::{
    read_conversion_manifest, read_manifest, write_conversion_manifest, write_manifest, ConversionRow, UtteranceRow,
    CONVERSION_COLUMNS, UTTERANCE_COLUMNS,
};
pub use report::{evaluate_manifest, CategoryReport, EvalReport};
pub use text::{cer, levenshtein, normalize_text};

use crate::error::{Error, Result};

/// Runs [`evaluate_manifest`] on a pool of `jobs` worker threads.
pub fn evaluate_manifest_with_jobs(
    rows: &[ConversionRow],
    enrollment: Option<&[UtteranceRow]>,
    transcriber: &dyn Transcriber,
    embedder: &dyn SpeakerEmbedder,
    jobs: usize,
) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| evaluate_manifest(rows, enrollment, transcriber, embedder))
}

#[cfg(test)]
mod tests;
