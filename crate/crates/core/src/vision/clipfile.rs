//! Uncompressed clip files: `AVCL`, u32 version, u32 `T H W C`, then
//! `T·H·W·C` little-endian f32 values in `[T, H, W, C]` order.

use std::fs;
use std::path::Path;

use super::VideoClip;
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"AVCL";
pub const CLIP_VERSION: u32 = 1;

pub fn write_clip(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let mut out = Vec::with_capacity(24 + clip.pixels.len() * 4);
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in [clip.frames, clip.height, clip.width, clip.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in &clip.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    let b = fs::read(path)?;
    if b.len() < 24 {
        return Err(Error::Truncated("clip header".into()));
    }
    if &b[0..4] != CLIP_MAGIC {
        return Err(Error::BadMagic {
            expected: "AVCL".into(),
            found: String::from_utf8_lossy(&b[0..4]).into_owned(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CLIP_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CLIP_VERSION,
        });
    }
    let (t, h, w, c) = (
        word(8) as usize,
        word(12) as usize,
        word(16) as usize,
        word(20) as usize,
    );
    let n = t * h * w * c;
    if b.len() != 24 + 4 * n {
        return Err(Error::Truncated(format!(
            "clip payload has {} bytes, expected {}",
            b.len() - 24,
            4 * n
        )));
    }
    let pixels = b[24..]
        .chunks_exact(4)
        .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
        .collect();
    VideoClip::new(t, h, w, c, pixels)
}
