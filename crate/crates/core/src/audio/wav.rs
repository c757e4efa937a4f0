use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use log::warn;

use super::{AudioClip, DspError};

/// Reads a PCM or IEEE-float WAV file. Multi-channel audio is averaged to
/// mono; integer samples are scaled by `1 / 2^(bits-1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, DspError> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| DspError::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(DspError::Wav {
            path: path.display().to_string(),
            msg: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(DspError::Wav {
                path: path.display().to_string(),
                msg: format!("unsupported encoding {fmt:?} with {bits} bits"),
            })
        }
    };
    let samples: Vec<f64> = interleaved
        .chunks(channels)
        .map(|f| f.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a 16-bit PCM mono WAV. Samples outside `[-1, 1]` are clipped.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), DspError> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io_err = |e: hound::Error| DspError::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    let mut clipped = 0usize;
    for &s in clip.samples() {
        if s.abs() > 1.0 {
            clipped += 1;
        }
        let v = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)?;
    if clipped > 0 {
        warn!("{}: clipped {clipped} samples to [-1, 1]", path.display());
    }
    Ok(())
}
