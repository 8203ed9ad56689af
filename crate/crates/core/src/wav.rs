//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::synth::WaveformClip;

const HEADER_LEN: usize = 44;

fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(clip: &WaveformClip, path: &Path) -> Result<()> {
    let data_len = clip.samples.len() * 2;
    let mut buf = Vec::with_capacity(HEADER_LEN + data_len);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&clip.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        buf.extend_from_slice(&quantize(s).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<WaveformClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(r.format_error(0, "missing RIFF tag"));
    }
    r.u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(r.format_error(8, "missing WAVE tag"));
    }

    let mut sample_rate = None;
    loop {
        let chunk_at = r.pos();
        let id: [u8; 4] = r.take(4, "chunk id")?.try_into().expect("4 bytes");
        let size = r.u32("chunk size")? as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(
                        r.format_error(chunk_at, format!("fmt chunk too short ({size} bytes)"))
                    );
                }
                let body_at = r.pos();
                let format = r.u16("audio format")?;
                let channels = r.u16("channel count")?;
                let rate = r.u32("sample rate")?;
                r.u32("byte rate")?;
                r.u16("block align")?;
                let bits = r.u16("bits per sample")?;
                if format != 1 {
                    return Err(Error::UnsupportedEncoding {
                        path: path.to_path_buf(),
                        msg: format!("audio format {format} (only PCM = 1)"),
                    });
                }
                if bits != 16 {
                    return Err(Error::UnsupportedEncoding {
                        path: path.to_path_buf(),
                        msg: format!("{bits}-bit samples (only 16-bit)"),
                    });
                }
                if channels != 1 {
                    return Err(Error::UnsupportedEncoding {
                        path: path.to_path_buf(),
                        msg: format!("{channels} channels (only mono)"),
                    });
                }
                sample_rate = Some(rate);
                r.seek(body_at);
                r.take(size + size % 2, "fmt chunk")?;
            }
            b"data" => {
                let rate = sample_rate
                    .ok_or_else(|| r.format_error(chunk_at, "data chunk before fmt chunk"))?;
                if size % 2 != 0 {
                    return Err(r.format_error(
                        chunk_at + 4,
                        format!("odd data size {size} for 16-bit samples"),
                    ));
                }
                let data = r.take(size, "sample data")?;
                let samples = data
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                    .collect();
                return Ok(WaveformClip {
                    samples,
                    sample_rate: rate,
                    params: None,
                });
            }
            _ => {
                r.take(size + size % 2, "unknown chunk")?;
            }
        }
    }
}
