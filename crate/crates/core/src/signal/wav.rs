//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const PCM: u16 = 1;

fn format_name(tag: u16) -> &'static str {
    match tag {
        0x0002 => "Microsoft ADPCM",
        0x0003 => "IEEE float",
        0x0006 => "A-law",
        0x0007 => "mu-law",
        0x0011 => "IMA ADPCM",
        0x0050 | 0x0055 => "MPEG",
        0xFFFE => "WAVE_FORMAT_EXTENSIBLE",
        _ => "unknown",
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a WAV image into its sample rate and raw sample values.
pub fn decode_pcm16(bytes: &[u8]) -> Result<(u32, Vec<i16>)> {
    if bytes.len() < 12 {
        return Err(Error::Truncated("WAV header shorter than 12 bytes".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::BadMagic {
            expected: "RIFF....WAVE".into(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let mut at = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32_at(bytes, at + 4) as usize;
        let body = at + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(Error::Truncated("fmt chunk".into()));
            }
            fmt = Some((
                u16_at(bytes, body),
                u16_at(bytes, body + 2),
                u32_at(bytes, body + 4),
                u16_at(bytes, body + 14),
            ));
        } else if id == b"data" {
            let (tag, channels, rate, bits) =
                fmt.ok_or_else(|| Error::Malformed("data chunk before fmt chunk".into()))?;
            if tag != PCM {
                return Err(Error::UnsupportedWavFormat {
                    tag,
                    name: format_name(tag),
                });
            }
            if channels != 1 || bits != 16 {
                return Err(Error::UnsupportedAudio(format!(
                    "{channels} channel(s) at {bits} bits; need mono 16-bit"
                )));
            }
            if body + size > bytes.len() {
                return Err(Error::Truncated(format!(
                    "data chunk declares {size} bytes, {} present",
                    bytes.len() - body
                )));
            }
            if !size.is_multiple_of(2) {
                return Err(Error::Truncated("odd byte count in 16-bit data".into()));
            }
            let samples = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect();
            return Ok((rate, samples));
        }
        at = body + size + (size & 1);
    }
    Err(Error::Truncated("no data chunk".into()))
}

pub fn encode_pcm16(rate: u32, samples: &[i16]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Reads a PCM-16 mono file, scaling samples by 1/32768.
pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    let (rate, ints) = decode_pcm16(&fs::read(path)?)?;
    Waveform::new(ints.iter().map(|&s| s as f64 / 32768.0).collect(), rate)
}

/// Writes raw sample values as PCM-16 mono.
pub fn write_pcm16(path: impl AsRef<Path>, rate: u32, samples: &[i16]) -> Result<()> {
    fs::write(path, encode_pcm16(rate, samples))?;
    Ok(())
}

/// Quantizes to PCM-16, clamping to the representable range.
pub fn quantize(w: &Waveform) -> Vec<i16> {
    w.samples
        .iter()
        .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}
