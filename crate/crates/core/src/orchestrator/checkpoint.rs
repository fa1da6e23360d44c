//! Binary checkpoints with stage lineage.
//!
//! Layout (little-endian): magic `AVSG`, `u32` version, `u32` metadata
//! length, metadata JSON, `u32` tensor count, then per tensor: `u32` path
//! length, path bytes, `u8` trainable flag, `u32` rank, `u32` dims, `f32`
//! payload and the 32-byte SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PairTag, Profile};
use crate::error::{Error, Result};
use crate::nn::{ParamTree, Tensor};
use crate::pretrain::{ModelConfig, Objective, PretrainModel};

pub const MAGIC: &[u8; 4] = b"AVSG";
pub const FORMAT_VERSION: u32 = 1;
/// File extension used by [`CheckpointStore`].
pub const EXTENSION: &str = "avsg";

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Random initialization.
    None,
    Pretrain,
    Midtrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Pretrain => "pretrain",
            Self::Midtrain => "midtrain",
            Self::Finetune => "finetune",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One ancestor in a lineage chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: Stage,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Digest of the checkpoint this one was trained from.
    pub upstream: Option<String>,
    /// Every ancestor, root first; the last entry is `upstream`.
    pub lineage: Vec<LineageEntry>,
    pub objective: Option<Objective>,
    pub profile: Option<Profile>,
    pub pair: Option<PairTag>,
    pub task: Option<String>,
    pub model: ModelConfig,
    pub seed: u64,
    /// Stage-specific settings (loss modes, step counts, learning rate, ...).
    pub settings: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamTree<f32>,
}

impl Checkpoint {
    /// Stage-`none` root holding a freshly initialized pre-training model.
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        let (_, params) = PretrainModel::new(model, seed)?;
        Ok(Self {
            meta: CheckpointMeta {
                stage: Stage::None,
                upstream: None,
                lineage: Vec::new(),
                objective: None,
                profile: None,
                pair: None,
                task: None,
                model: model.clone(),
                seed,
                settings: BTreeMap::new(),
            },
            params,
        })
    }

    /// Metadata for a checkpoint trained from `self`: same model, metadata
    /// inherited, lineage extended by `self`.
    pub fn child_meta(&self, stage: Stage) -> Result<CheckpointMeta> {
        if stage <= self.meta.stage {
            return Err(Error::Stage(format!(
                "a {} checkpoint cannot be derived from a {} checkpoint",
                stage, self.meta.stage
            )));
        }
        let digest = self.digest()?;
        let mut lineage = self.meta.lineage.clone();
        lineage.push(LineageEntry {
            stage: self.meta.stage,
            digest: digest.clone(),
        });
        Ok(CheckpointMeta {
            stage,
            upstream: Some(digest),
            lineage,
            settings: BTreeMap::new(),
            ..self.meta.clone()
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + self.params.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, p) in self.params.iter() {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let start = out.len();
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let sum = Sha256::digest(&out[start..]);
            out.extend_from_slice(&sum);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into(),
                found: String::from_utf8_lossy(magic).into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("tensor count")?;
        let mut params = ParamTree::new();
        for _ in 0..count {
            let len = r.u32("path length")? as usize;
            let path = String::from_utf8(r.take(len, "path")?.to_vec())
                .map_err(|_| Error::Malformed("tensor path is not UTF-8".into()))?;
            let trainable = match r.take(1, &path)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Malformed(format!("trainable flag {b} for `{path}`"))),
            };
            let rank = r.u32(&path)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&path).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4, &path)?;
            let sum = r.take(32, &path)?;
            if Sha256::digest(payload).as_slice() != sum {
                return Err(Error::Checksum(path));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            params.insert(path, Tensor::from_vec(&shape, data), trainable)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, params })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn short_digest(&self) -> Result<String> {
        Ok(self.digest()?[..12].to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Directory of checkpoints addressed by digest.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    pub dir: std::path::PathBuf,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<std::path::PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_of(&self, digest: &str) -> std::path::PathBuf {
        self.dir.join(format!("{digest}.{EXTENSION}"))
    }

    /// Saves under the checkpoint's digest and returns it.
    pub fn put(&self, c: &Checkpoint) -> Result<String> {
        let bytes = c.to_bytes()?;
        let digest = hex::encode(Sha256::digest(&bytes));
        fs::create_dir_all(&self.dir)?;
        let path = self.path_of(&digest);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{digest}.tmp"));
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &str) -> Result<Checkpoint> {
        let c = load_checkpoint(self.path_of(digest))?;
        if c.digest()? != digest {
            return Err(Error::Checksum(format!("checkpoint {digest}")));
        }
        Ok(c)
    }

    /// Walks `upstream` links back to the root, checking that each ancestor
    /// exists, hashes to its recorded digest, has an earlier stage, and that
    /// the recorded lineage matches the walk. Returns the chain root first.
    pub fn verify_lineage(&self, c: &Checkpoint) -> Result<Vec<LineageEntry>> {
        let mut chain = Vec::new();
        let mut current = c.clone();
        while let Some(up) = current.meta.upstream.clone() {
            let parent = self.get(&up)?;
            if parent.meta.stage >= current.meta.stage {
                return Err(Error::Stage(format!(
                    "{} checkpoint has a {} parent",
                    current.meta.stage, parent.meta.stage
                )));
            }
            if current.meta.lineage.last().map(|e| e.digest.as_str()) != Some(up.as_str()) {
                return Err(Error::Malformed("lineage does not end with the upstream digest".into()));
            }
            chain.push(LineageEntry {
                stage: parent.meta.stage,
                digest: up,
            });
            current = parent;
        }
        if current.meta.stage != Stage::None {
            return Err(Error::Stage(format!(
                "lineage root is {}, not none",
                current.meta.stage
            )));
        }
        chain.reverse();
        if chain != c.meta.lineage {
            return Err(Error::Malformed(
                "recorded lineage differs from the upstream chain".into(),
            ));
        }
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut params = ParamTree::new();
        params
            .insert(
                "a.w",
                Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]),
                true,
            )
            .unwrap();
        params
            .insert("b", Tensor::from_vec(&[3], vec![0.0, -0.0, 7.0]), false)
            .unwrap();
        let mut c = Checkpoint::init(&tiny_model(), 1).unwrap();
        c.params = params;
        c
    }

    fn tiny_model() -> ModelConfig {
        let mut m = ModelConfig::desk();
        m.audio.encoder.layers = 1;
        m.video.layers = 1;
        m.decoder.layers = 1;
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = tiny();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.params.tensor("b").unwrap().data()[1].to_bits(),
            (-0.0f32).to_bits()
        );
    }

    #[test]
    fn corrupted_payload_names_the_tensor() {
        let c = tiny();
        let mut bytes = c.to_bytes().unwrap();
        let n = bytes.len();
        // last tensor is `b`; flip a byte inside its payload
        bytes[n - 32 - 2] ^= 0x40;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checksum(path)) => assert_eq!(path, "b"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let ok = tiny().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&ok[..ok.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn stages_only_move_forward() {
        let root = tiny();
        let m = root.child_meta(Stage::Midtrain).unwrap();
        assert_eq!(m.lineage.len(), 1);
        assert_eq!(m.upstream.as_deref(), Some(root.digest().unwrap().as_str()));
        let mid = Checkpoint {
            meta: m,
            params: root.params.clone(),
        };
        assert!(mid.child_meta(Stage::Pretrain).is_err());
    }
}
