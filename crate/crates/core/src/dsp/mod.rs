//! Deterministic signal-processing primitives: waveforms, STFT/ISTFT,
//! log-mel features, mel-cepstra and resampling.
//!
//! All internal arithmetic is `f64`; conversion to 16-bit PCM happens only in
//! [`crate::wav`].

mod mel;
mod resample;
mod stft;

pub use mel::{
    hz_to_mel, idct_orthonormal, dct_orthonormal, log_mel, mel_cepstra, mel_to_hz, CepstraSeq,
    MelConfig, MelFilterbank, MelFrames, LOG_MEL_FLOOR,
};
pub use resample::resample;
pub use stft::{hann_periodic, istft, stft, Spectrogram};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * factor).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn check_same_rate(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::RateMismatch(self.sample_rate, other.sample_rate));
        }
        Ok(())
    }

    pub(crate) fn check_same_len(&self, other: &Waveform) -> Result<()> {
        self.check_same_rate(other)?;
        if self.len() != other.len() {
            return Err(Error::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

/// Framing parameters in milliseconds, resolved to samples per sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_len: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// Feature-extraction settings of the conversion model: 20 ms window,
    /// 5 ms hop, 1024-point FFT.
    fn default() -> Self {
        Self {
            window_ms: 20.0,
            hop_ms: 5.0,
            fft_len: 1024,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    /// Analysis settings used by the enhancement stages (32 ms / 8 ms / 256 at 8 kHz).
    pub fn enhancement() -> Self {
        Self {
            window_ms: 32.0,
            hop_ms: 8.0,
            fft_len: 256,
            window: WindowKind::Hann,
        }
    }

    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.window_len(sample_rate);
        let hop = self.hop_len(sample_rate);
        if !(self.window_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(Error::InvalidConfig("window and hop must be positive".into()));
        }
        if win == 0 || hop == 0 {
            return Err(Error::InvalidConfig(format!(
                "window ({win}) and hop ({hop}) must be at least one sample at {sample_rate} Hz"
            )));
        }
        if self.hop_ms > self.window_ms {
            return Err(Error::InvalidConfig(format!(
                "hop {} ms exceeds window {} ms",
                self.hop_ms, self.window_ms
            )));
        }
        if self.fft_len < 2 || self.fft_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "fft length {} must be even and at least 2",
                self.fft_len
            )));
        }
        if win > self.fft_len {
            return Err(Error::InvalidConfig(format!(
                "window of {win} samples is longer than fft length {}",
                self.fft_len
            )));
        }
        Ok(())
    }
}
