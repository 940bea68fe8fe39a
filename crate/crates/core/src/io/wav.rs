//! Minimal 16-bit PCM mono WAV reader/writer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{read_exact, read_u32};
use crate::error::{Error, Result};

/// Write samples in [-1, 1] as 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let p = path.display().to_string();
    let io_err = |e| Error::io(&p, e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);

    let data_len = (samples.len() * 2) as u32;
    w.write_all(b"RIFF").map_err(io_err)?;
    w.write_all(&(36 + data_len).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(b"WAVE").map_err(io_err)?;
    w.write_all(b"fmt ").map_err(io_err)?;
    w.write_all(&16u32.to_le_bytes()).map_err(io_err)?;
    w.write_all(&1u16.to_le_bytes()).map_err(io_err)?; // PCM
    w.write_all(&1u16.to_le_bytes()).map_err(io_err)?; // mono
    w.write_all(&sample_rate.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(sample_rate * 2).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&2u16.to_le_bytes()).map_err(io_err)?; // block align
    w.write_all(&16u16.to_le_bytes()).map_err(io_err)?; // bits
    w.write_all(b"data").map_err(io_err)?;
    w.write_all(&data_len.to_le_bytes()).map_err(io_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a 16-bit PCM mono WAV into samples scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);

    let mut tag = [0u8; 4];
    read_exact(&mut r, &mut tag, &p)?;
    if &tag != b"RIFF" {
        return Err(Error::format(&p, "missing RIFF header"));
    }
    read_u32(&mut r, &p)?; // riff size
    read_exact(&mut r, &mut tag, &p)?;
    if &tag != b"WAVE" {
        return Err(Error::format(&p, "missing WAVE tag"));
    }

    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut channels = 0u16;
    let mut fmt_seen = false;
    loop {
        if r.read_exact(&mut tag).is_err() {
            return Err(Error::format(&p, "no data chunk"));
        }
        let size = read_u32(&mut r, &p)?;
        match &tag {
            b"fmt " => {
                let mut fmt = vec![0u8; size as usize];
                read_exact(&mut r, &mut fmt, &p)?;
                if fmt.len() < 16 {
                    return Err(Error::format(&p, "short fmt chunk"));
                }
                let audio_format = u16::from_le_bytes([fmt[0], fmt[1]]);
                channels = u16::from_le_bytes([fmt[2], fmt[3]]);
                sample_rate = u32::from_le_bytes([fmt[4], fmt[5], fmt[6], fmt[7]]);
                bits = u16::from_le_bytes([fmt[14], fmt[15]]);
                if audio_format != 1 {
                    return Err(Error::format(&p, "only PCM supported"));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::format(&p, "data chunk before fmt"));
                }
                if channels != 1 {
                    return Err(Error::format(
                        &p,
                        format!("expected mono, got {channels} channels"),
                    ));
                }
                if bits != 16 {
                    return Err(Error::format(
                        &p,
                        format!("expected 16-bit PCM, got {bits}"),
                    ));
                }
                let n = size as usize / 2;
                let mut raw = vec![0u8; size as usize];
                read_exact(&mut r, &mut raw, &p)?;
                let mut samples = Vec::with_capacity(n);
                for c in raw.chunks_exact(2) {
                    samples.push(i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0);
                }
                return Ok((samples, sample_rate));
            }
            _ => {
                // Skip unknown chunk (word-aligned).
                let skip = size as usize + (size as usize & 1);
                let mut buf = vec![0u8; skip];
                read_exact(&mut r, &mut buf, &p)?;
            }
        }
    }
}
