//! RIFF/WAVE PCM16 stereo at 44.1 kHz, the only audio layout the device emits.

use crate::domain::Series;
use crate::error::{Error, Result};

pub const WAV_SAMPLE_RATE: u32 = 44_100;
pub const WAV_CHANNELS: u16 = 2;
pub const WAV_BITS: u16 = 16;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes to `samples × 2` with each value `int16 / 32768`. Chunks other
/// than `fmt ` and `data` are skipped.
pub fn read_wav(bytes: &[u8]) -> Result<Series> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_err("chunk runs past end of file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err("fmt chunk too short"));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != 1 {
                    return Err(format_err(format!("audio format {format} is not PCM")));
                }
                if channels != WAV_CHANNELS {
                    return Err(format_err(format!("{channels} channels, expected stereo")));
                }
                if rate != WAV_SAMPLE_RATE {
                    return Err(format_err(format!("sample rate {rate}, expected {WAV_SAMPLE_RATE}")));
                }
                if bits != WAV_BITS {
                    return Err(format_err(format!("{bits}-bit samples, expected 16")));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(format_err("data chunk before fmt chunk"));
                }
                let frames = size / 4;
                let data = bytes[body..body + frames * 4]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Series::new(frames, 2, data);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    Err(format_err("no data chunk"))
}

/// Encodes `samples × 2` values in [-1, 1] as PCM16, rounding to the
/// nearest step and saturating at the int16 range.
pub fn write_wav(audio: &Series) -> Result<Vec<u8>> {
    if audio.channels() != WAV_CHANNELS as usize {
        return Err(format_err(format!("{} channels, expected stereo", audio.channels())));
    }
    let data_len = audio.rows() * 4;
    let data_len_u32 = u32::try_from(data_len).map_err(|_| format_err("audio too long for WAV"))?;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len_u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&WAV_CHANNELS.to_le_bytes());
    out.extend_from_slice(&WAV_SAMPLE_RATE.to_le_bytes());
    let block_align = WAV_CHANNELS * WAV_BITS / 8;
    out.extend_from_slice(&(WAV_SAMPLE_RATE * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&WAV_BITS.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len_u32.to_le_bytes());
    for v in audio.data() {
        let q = (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

/// Value after a PCM16 round trip.
pub fn quantize_pcm16(v: f64) -> f64 {
    (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) / 32768.0
}
