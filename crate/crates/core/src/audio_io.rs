//! WAV input/output and the `MFSPEC1` spectrogram dump format.
//!
//! `MFSPEC1` layout, all little-endian:
//!
//! ```text
//! magic     7 bytes  "MFSPEC1"
//! frames    u32
//! bins      u32
//! domain    u8       0 = compressed complex, 1 = mel magnitude
//! data      f32 * frames * bins (* 2 for complex, interleaved re/im), row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex32;

use crate::dsp::SpectroFrame;
use crate::error::{Error, Result};

pub const SPEC_MAGIC: &[u8; 7] = b"MFSPEC1";

/// Reads a mono WAV file (16-bit integer or 32-bit float PCM) and rejects
/// any sample rate other than `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::Data(format!(
            "{}: sample rate {} Hz, expected {} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate,
            expected_rate
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported sample format {format:?} with {bits} bits",
                path.display()
            )))
        }
    };
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: bits, sample_format };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        match format {
            WavFormat::Pcm16 => writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
            WavFormat::Float32 => writer.write_sample(s)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Contents of an `MFSPEC1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecDump {
    Compressed(Vec<SpectroFrame>),
    Mel(Vec<Vec<f32>>),
}

impl SpecDump {
    fn domain_tag(&self) -> u8 {
        match self {
            SpecDump::Compressed(_) => 0,
            SpecDump::Mel(_) => 1,
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            SpecDump::Compressed(f) => f.len(),
            SpecDump::Mel(f) => f.len(),
        }
    }
}

pub fn write_spec_dump(writer: &mut impl Write, dump: &SpecDump) -> Result<()> {
    let bins = match dump {
        SpecDump::Compressed(f) => f.first().map_or(0, |x| x.len()),
        SpecDump::Mel(f) => f.first().map_or(0, |x| x.len()),
    };
    writer.write_all(SPEC_MAGIC)?;
    writer.write_all(&(dump.frames() as u32).to_le_bytes())?;
    writer.write_all(&(bins as u32).to_le_bytes())?;
    writer.write_all(&[dump.domain_tag()])?;
    match dump {
        SpecDump::Compressed(frames) => {
            for frame in frames {
                if frame.len() != bins {
                    return Err(Error::Shape("ragged spectrogram".into()));
                }
                for z in &frame.bins {
                    writer.write_all(&z.re.to_le_bytes())?;
                    writer.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        SpecDump::Mel(frames) => {
            for frame in frames {
                if frame.len() != bins {
                    return Err(Error::Shape("ragged mel spectrogram".into()));
                }
                for v in frame {
                    writer.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_spec_dump(reader: &mut impl Read) -> Result<SpecDump> {
    let mut magic = [0u8; 7];
    read_exact(reader, &mut magic)?;
    if &magic != SPEC_MAGIC {
        return Err(Error::Data("not an MFSPEC1 file (bad magic)".into()));
    }
    let frames = read_u32(reader)? as usize;
    let bins = read_u32(reader)? as usize;
    let mut tag = [0u8; 1];
    read_exact(reader, &mut tag)?;
    let mut next = || -> Result<f32> {
        let mut b = [0u8; 4];
        read_exact(reader, &mut b)?;
        Ok(f32::from_le_bytes(b))
    };
    match tag[0] {
        0 => {
            let mut out = Vec::with_capacity(frames);
            for _ in 0..frames {
                let bins = (0..bins)
                    .map(|_| Ok(Complex32::new(next()?, next()?)))
                    .collect::<Result<Vec<_>>>()?;
                out.push(SpectroFrame { bins });
            }
            Ok(SpecDump::Compressed(out))
        }
        1 => {
            let mut out = Vec::with_capacity(frames);
            for _ in 0..frames {
                out.push((0..bins).map(|_| next()).collect::<Result<Vec<_>>>()?);
            }
            Ok(SpecDump::Mel(out))
        }
        other => Err(Error::Data(format!("unknown MFSPEC1 domain tag {other}"))),
    }
}

pub fn save_spec_dump(path: impl AsRef<Path>, dump: &SpecDump) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_spec_dump(&mut w, dump)?;
    w.flush()?;
    Ok(())
}

pub fn load_spec_dump(path: impl AsRef<Path>) -> Result<SpecDump> {
    read_spec_dump(&mut BufReader::new(File::open(path)?))
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Data("truncated MFSPEC1 file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(reader, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
