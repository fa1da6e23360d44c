//! Synthetic corpora for every training stage, their on-disk form, and
//! real-audio ingestion.

mod corpora;
mod paired;
pub mod speech;
mod store;

use serde::{Deserialize, Serialize};

pub use corpora::{
    gen_toy_asr, gen_toy_classification, gen_toy_translation, split_of, ClassExample, ClassTask, CorpusConfig, PairTag,
    SpeechExample, ToyAsrCorpus, ToyClassCorpus, ToyParallelCorpus, TranslationExample,
};
pub use paired::{
    gen_paired_av, gen_paired_with, similarity_gap, AvTemplates, PairedAvConfig, PairedAvDataset, Profile,
};
pub use speech::{SpeechConfig, ToyLanguage, Utterance};
pub use store::{load_dataset, save_dataset, Dataset, Manifest, MANIFEST_FILE, RECORDS_FILE};

use crate::error::Result;
use crate::signal::{LogMelFrames, Waveform};
use crate::vision::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One paired audio-video training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvExample {
    pub id: usize,
    pub split: Split,
    pub audio: LogMelFrames,
    pub video: VoxelGrid,
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by 1/32768.
pub fn ingest_wav(path: impl AsRef<std::path::Path>) -> Result<Waveform> {
    crate::signal::wav::read(path)
}
