//! RIFF/WAVE reading and writing for 16-bit integer and 32-bit float PCM.

use std::path::Path;

use log::warn;

use super::AudioClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_IEEE_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleFormat {
    Int16,
    Float32,
}

#[derive(Debug, Clone, Copy)]
struct FmtChunk {
    format: SampleFormat,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
}

fn decode_err(chunk: &str, reason: impl Into<String>) -> Error {
    Error::Decode { chunk: chunk.to_string(), reason: reason.into() }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(decode_err("fmt ", format!("body is {} bytes, need 16", body.len())));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12);
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(decode_err("fmt ", "extensible format without sub-format GUID"));
        }
        // First two bytes of the sub-format GUID carry the actual format tag.
        tag = u16_at(body, 24);
    }
    if channels == 0 {
        return Err(decode_err("fmt ", "zero channels"));
    }
    if sample_rate == 0 {
        return Err(decode_err("fmt ", "zero sample rate"));
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Int16,
        (FORMAT_IEEE_FLOAT, 32) => SampleFormat::Float32,
        (FORMAT_PCM, b) => return Err(Error::UnsupportedFormat(format!("{b}-bit integer PCM"))),
        (FORMAT_IEEE_FLOAT, b) => return Err(Error::UnsupportedFormat(format!("{b}-bit float PCM"))),
        (t, _) => return Err(Error::UnsupportedFormat(format!("format tag 0x{t:04x}"))),
    };
    let expected_align = channels as u32 * (bits as u32 / 8);
    if block_align as u32 != expected_align {
        return Err(decode_err(
            "fmt ",
            format!("block align {block_align} does not match {channels} channels of {bits} bits"),
        ));
    }
    Ok(FmtChunk { format, channels, sample_rate, block_align })
}

/// Decodes a WAV byte stream. Float samples outside [-1, 1] are clamped.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    decode_wav_with_report(bytes).map(|(clip, _)| clip)
}

/// Like [`decode_wav`], also returning how many float samples were clamped.
pub fn decode_wav_with_report(bytes: &[u8]) -> Result<(AudioClip, usize)> {
    if bytes.len() < 12 {
        return Err(decode_err("RIFF", "file shorter than the 12-byte RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(decode_err("RIFF", "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(decode_err("RIFF", "form type is not WAVE"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let name = String::from_utf8_lossy(id).into_owned();
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                decode_err(&name, format!("declares {size} bytes but only {} remain", bytes.len() - body_start))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if fmt.is_some() {
                    return Err(decode_err("fmt ", "duplicate chunk"));
                }
                fmt = Some(parse_fmt(body)?);
            }
            b"data" => {
                if data.is_some() {
                    return Err(decode_err("data", "duplicate chunk"));
                }
                data = Some(body);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| decode_err("fmt ", "chunk missing"))?;
    let data = data.ok_or_else(|| decode_err("data", "chunk missing"))?;
    if data.len() % fmt.block_align as usize != 0 {
        return Err(decode_err(
            "data",
            format!("{} bytes is not a whole number of {}-byte frames", data.len(), fmt.block_align),
        ));
    }

    let mut clamped = 0usize;
    let samples: Vec<f32> = match fmt.format {
        SampleFormat::Int16 => data
            .chunks_exact(2)
            .map(|w| i16::from_le_bytes([w[0], w[1]]) as f32 / 32768.0)
            .collect(),
        SampleFormat::Float32 => data
            .chunks_exact(4)
            .map(|w| {
                let v = f32::from_le_bytes([w[0], w[1], w[2], w[3]]);
                if !v.is_finite() {
                    return Err(decode_err("data", "non-finite float sample"));
                }
                if v.abs() > 1.0 {
                    clamped += 1;
                    Ok(v.clamp(-1.0, 1.0))
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<_>>()?,
    };
    if clamped > 0 {
        warn!("clamped {clamped} float samples into [-1, 1]");
    }
    let clip = AudioClip::new(samples, fmt.sample_rate, fmt.channels)?;
    Ok((clip, clamped))
}

fn write_header(out: &mut Vec<u8>, tag: u16, bits: u16, clip: &AudioClip, data_len: usize) {
    let channels = clip.channels();
    let block_align = channels * (bits / 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
}

/// Encodes as 16-bit PCM, rounding `x * 32768` and saturating at the i16 range.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples().len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    write_header(&mut out, FORMAT_PCM, 16, clip, data_len);
    for &s in clip.samples() {
        let word = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&word.to_le_bytes());
    }
    out
}

pub fn encode_wav_f32(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples().len() * 4;
    let mut out = Vec::with_capacity(44 + data_len);
    write_header(&mut out, FORMAT_IEEE_FLOAT, 32, clip, data_len);
    for &s in clip.samples() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav_pcm16(clip)).map_err(|e| Error::file(path, e))
}
