use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PairedAvDataset, ToyAsrCorpus, ToyClassCorpus, ToyParallelCorpus};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";
const STORE_VERSION: u32 = 1;

/// Any generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dataset {
    PairedAv(PairedAvDataset),
    Asr(ToyAsrCorpus),
    Translation(ToyParallelCorpus),
    Classification(ToyClassCorpus),
}

impl Dataset {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::PairedAv(_) => "paired_av",
            Self::Asr(_) => "asr",
            Self::Translation(_) => "translation",
            Self::Classification(c) => match c.task {
                super::ClassTask::Keyword => "keyword",
                super::ClassTask::Intent => "intent",
            },
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::PairedAv(d) => d.seed,
            Self::Asr(d) => d.seed,
            Self::Translation(d) => d.seed,
            Self::Classification(d) => d.seed,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::PairedAv(d) => d.examples.len(),
            Self::Asr(d) => d.examples.len(),
            Self::Translation(d) => d.examples.len(),
            Self::Classification(d) => d.examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summary written next to the records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub profile: Option<String>,
    pub pair: Option<String>,
    /// Hex SHA-256 of the records file.
    pub checksum: String,
}

/// Writes `dir/records.bin` and `dir/manifest.json`, creating `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let bytes = bincode::serialize(ds).map_err(|e| Error::Malformed(e.to_string()))?;
    let manifest = Manifest {
        version: STORE_VERSION,
        kind: ds.kind().into(),
        seed: ds.seed(),
        n: ds.len(),
        profile: match ds {
            Dataset::PairedAv(d) => Some(d.cfg.profile.name().into()),
            _ => None,
        },
        pair: match ds {
            Dataset::Translation(d) => Some(d.pair.name().into()),
            _ => None,
        },
        checksum: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(dir.join(RECORDS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a dataset directory, verifying the records checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.version,
            supported: STORE_VERSION,
        });
    }
    let bytes = fs::read(dir.join(RECORDS_FILE))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.checksum {
        return Err(Error::Checksum(RECORDS_FILE.into()));
    }
    let ds: Dataset = bincode::deserialize(&bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    if ds.kind() != manifest.kind || ds.len() != manifest.n {
        return Err(Error::Malformed("records do not match the manifest".into()));
    }
    Ok(ds)
}
