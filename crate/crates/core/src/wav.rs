//! 16-bit PCM mono WAV I/O. Samples are `f64` in `[-1, 1)` internally.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

fn to_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// The value a sample takes after a write/read round trip.
pub fn quantize_pcm16(w: &Waveform) -> Waveform {
    Waveform {
        samples: w.samples.iter().map(|&x| to_i16(x) as f64 / 32768.0).collect(),
        sample_rate: w.sample_rate,
    }
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &x in &w.samples {
        writer.write_sample(to_i16(x)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Reads any integer or float WAV; multichannel files keep the first channel.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wrap)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wrap)?,
    };
    let samples = interleaved.into_iter().step_by(channels).collect();
    Waveform::new(samples, spec.sample_rate)
}
