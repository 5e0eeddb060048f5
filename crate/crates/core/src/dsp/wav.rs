use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Reads a 16-bit PCM WAV, averaging channels to mono and scaling by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Data(format!("missing file {}", path.display())));
    }
    let mut reader = WavReader::open(path)
        .map_err(|e| Error::Data(format!("{}: not a PCM WAV file ({e})", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Data(format!(
            "{}: unsupported encoding ({:?}, {} bits); expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}: corrupt sample data ({e})", path.display())))?;
    let frames = raw.len() / channels;
    if frames == 0 {
        return Err(Error::Data(format!("{}: zero-length audio", path.display())));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / 32768.0).sum();
            sum / channels as f64
        })
        .collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM; samples are clipped to the representable range.
pub fn save_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let to_err = |e: hound::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}
