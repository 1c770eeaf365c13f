//! Spectral-gating noise suppression with Wiener-style gains.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{istft, stft, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

/// Smoothing constant of the periodogram tracked by minimum statistics.
const MIN_STATS_SMOOTHING: f64 = 0.85;
const MIN_STATS_BIAS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseEstimator {
    /// Mean power of the first `n` frames.
    LeadingFrames { n: usize },
    /// Running minimum of the smoothed periodogram over `window` frames.
    MinimumStatistics { window: usize },
}

impl Default for NoiseEstimator {
    fn default() -> Self {
        NoiseEstimator::LeadingFrames { n: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub noise_est: NoiseEstimator,
    pub gain_floor: f64,
    pub oversubtraction: f64,
    /// Recursive smoothing coefficient applied to the gains over time.
    pub smoothing: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            noise_est: NoiseEstimator::default(),
            gain_floor: 0.1,
            oversubtraction: 1.0,
            smoothing: 0.7,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_floor > 0.0 && self.gain_floor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gain floor must be in (0, 1], got {}",
                self.gain_floor
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidConfig("smoothing must be in [0, 1)".into()));
        }
        if !(self.oversubtraction >= 0.0 && self.oversubtraction.is_finite()) {
            return Err(Error::InvalidConfig("oversubtraction must be non-negative".into()));
        }
        match self.noise_est {
            NoiseEstimator::LeadingFrames { n: 0 } | NoiseEstimator::MinimumStatistics { window: 0 } => {
                Err(Error::InvalidConfig("noise estimator window must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-bin noise power estimate.
pub fn estimate_noise_psd(s: &Spectrogram, c: &DenoiseConfig) -> Result<Vec<f64>> {
    c.validate()?;
    let power = s.power();
    let (n_frames, n_bins) = power.dim();
    match c.noise_est {
        NoiseEstimator::LeadingFrames { n } => {
            if n_frames < n {
                return Err(Error::TooShort(format!(
                    "noise estimate needs {n} frames, got {n_frames}"
                )));
            }
            Ok((0..n_bins)
                .map(|f| (0..n).map(|t| power[(t, f)]).sum::<f64>() / n as f64)
                .collect())
        }
        NoiseEstimator::MinimumStatistics { window } => {
            if n_frames == 0 {
                return Err(Error::TooShort("empty spectrogram".into()));
            }
            // The running minimum is a time series; its average over the
            // utterance gives one stationary estimate per bin.
            Ok((0..n_bins)
                .map(|f| {
                    let mut smoothed = Vec::with_capacity(n_frames);
                    let mut p = power[(0, f)];
                    for t in 0..n_frames {
                        p = MIN_STATS_SMOOTHING * p + (1.0 - MIN_STATS_SMOOTHING) * power[(t, f)];
                        smoothed.push(p);
                    }
                    let track: f64 = (0..n_frames)
                        .map(|t| {
                            let lo = (t + 1).saturating_sub(window);
                            smoothed[lo..=t].iter().copied().fold(f64::INFINITY, f64::min)
                        })
                        .sum();
                    MIN_STATS_BIAS * track / n_frames as f64
                })
                .collect())
        }
    }
}

/// Smoothed spectral gains, `T × bins`, each in `[gain_floor, 1]`.
pub fn spectral_gains(s: &Spectrogram, noise_psd: &[f64], c: &DenoiseConfig) -> Result<Array2<f64>> {
    c.validate()?;
    if noise_psd.len() != s.n_bins() {
        return Err(Error::DimensionMismatch(format!(
            "noise estimate has {} bins, spectrogram {}",
            noise_psd.len(),
            s.n_bins()
        )));
    }
    let power = s.power();
    let mut gains = Array2::zeros(power.dim());
    for f in 0..s.n_bins() {
        let mut prev = None;
        for t in 0..s.n_frames() {
            let x2 = power[(t, f)];
            let raw = if x2 > 0.0 {
                (1.0 - c.oversubtraction * noise_psd[f] / x2).max(0.0)
            } else if noise_psd[f] > 0.0 {
                0.0
            } else {
                1.0
            };
            let g = match prev {
                Some(p) => c.smoothing * p + (1.0 - c.smoothing) * raw,
                None => raw,
            };
            prev = Some(g);
            gains[(t, f)] = g.max(c.gain_floor);
        }
    }
    Ok(gains)
}

pub fn denoise_spectrogram(s: &Spectrogram, c: &DenoiseConfig) -> Result<Spectrogram> {
    let psd = estimate_noise_psd(s, c)?;
    let gains = spectral_gains(s, &psd, c)?;
    Ok(s.with_frames(&s.frames * &gains.mapv(|g| num_complex::Complex64::new(g, 0.0))))
}

pub fn denoise(w: &Waveform, c: &DenoiseConfig, stft_config: &StftConfig) -> Result<Waveform> {
    c.validate()?;
    istft(&denoise_spectrogram(&stft(w, stft_config)?, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_speakers, synth_utterance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(len: usize, sigma: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>(),
            8000,
        )
        .unwrap()
    }

    fn rel_err(a: &Waveform, b: &Waveform) -> f64 {
        let num: f64 = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).powi(2)).sum();
        (num / b.energy()).sqrt()
    }

    #[test]
    fn white_noise_psd_is_flat() {
        let sc = StftConfig::enhancement();
        let s = stft(&white(80000, 0.1, 1), &sc).unwrap();
        // both estimators over a long noise-only stretch
        for est in [
            NoiseEstimator::LeadingFrames { n: 1000 },
            NoiseEstimator::MinimumStatistics { window: 64 },
        ] {
            let c = DenoiseConfig { noise_est: est, ..Default::default() };
            let psd = estimate_noise_psd(&s, &c).unwrap();
            // long-run average over the whole signal as the oracle level,
            // skipping dc and nyquist which carry only real energy
            let p = s.power();
            let inner = &psd[1..psd.len() - 1];
            let mean_all: f64 = (1..s.n_bins() - 1)
                .map(|f| p.column(f).sum() / s.n_frames() as f64)
                .sum::<f64>()
                / (s.n_bins() - 2) as f64;
            let mean_est = inner.iter().sum::<f64>() / inner.len() as f64;
            for &v in inner {
                assert!((10.0 * (v / mean_est).log10()).abs() <= 3.0, "{est:?}");
            }
            if matches!(est, NoiseEstimator::LeadingFrames { .. }) {
                assert!((10.0 * (mean_est / mean_all).log10()).abs() < 1.0);
            }
        }
    }

    #[test]
    fn zero_signal_zero_psd() {
        let sc = StftConfig::enhancement();
        let s = stft(&Waveform::zeros(4000, 8000), &sc).unwrap();
        for est in [
            NoiseEstimator::LeadingFrames { n: 16 },
            NoiseEstimator::MinimumStatistics { window: 64 },
        ] {
            let c = DenoiseConfig { noise_est: est, ..Default::default() };
            assert!(estimate_noise_psd(&s, &c).unwrap().iter().all(|&v| v == 0.0));
        }
        let c = DenoiseConfig::default();
        assert!(denoise(&Waveform::zeros(4000, 8000), &c, &sc).unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leading_estimate_ignores_later_content() {
        let sc = StftConfig::enhancement();
        let noise = white(8000, 0.05, 3);
        let spk = default_speakers(2);
        let mut a = noise.clone();
        let mut b = noise.clone();
        // 16 frames at hop 64 plus the half-window of centering
        let onset = 16 * 64 + 128;
        let sa = synth_utterance(&spk[0], 1.0, 1, 8000).unwrap();
        let sb = synth_utterance(&spk[1], 1.0, 2, 8000).unwrap();
        for i in onset..8000 {
            a.samples[i] += sa.samples[i - onset];
            b.samples[i] += sb.samples[i - onset];
        }
        let c = DenoiseConfig::default();
        let pa = estimate_noise_psd(&stft(&a, &sc).unwrap(), &c).unwrap();
        let pb = estimate_noise_psd(&stft(&b, &sc).unwrap(), &c).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn clean_input_with_negligible_noise_estimate_passes() {
        let sc = StftConfig::enhancement();
        let spk = &default_speakers(1)[0];
        let mut x = synth_utterance(spk, 2.0, 7, 8000).unwrap();
        // near-silent lead-in gives a near-zero noise estimate
        let mut samples = vec![0.0; 2000];
        samples.extend(x.samples.iter().copied());
        let tiny = white(samples.len(), 1e-7, 4);
        for (s, n) in samples.iter_mut().zip(&tiny.samples) {
            *s += n;
        }
        x = Waveform::new(samples, 8000).unwrap();
        let y = denoise(&x, &DenoiseConfig::default(), &sc).unwrap();
        assert!(rel_err(&y, &x) <= 0.05, "{}", rel_err(&y, &x));
    }

    #[test]
    fn stationary_noise_reduced_by_ten_db() {
        let sc = StftConfig::enhancement();
        for seed in 0..3 {
            let n = white(16000, 0.1, 10 + seed);
            let y = denoise(&n, &DenoiseConfig::default(), &sc).unwrap();
            let reduction = 10.0 * (n.energy() / y.energy()).log10();
            assert!(reduction >= 10.0, "seed {seed}: {reduction:.2} dB");
        }
    }

    #[test]
    fn unit_floor_is_identity() {
        let sc = StftConfig::enhancement();
        let x = white(6000, 0.2, 5);
        let c = DenoiseConfig { gain_floor: 1.0, ..Default::default() };
        let y = denoise(&x, &c, &sc).unwrap();
        assert!(rel_err(&y, &x) < 1e-9);
    }

    #[test]
    fn gains_within_bounds() {
        let sc = StftConfig::enhancement();
        let x = white(6000, 0.2, 6);
        let s = stft(&x, &sc).unwrap();
        for floor in [0.05, 0.1, 0.5] {
            let c = DenoiseConfig { gain_floor: floor, oversubtraction: 2.0, ..Default::default() };
            let psd = estimate_noise_psd(&s, &c).unwrap();
            let g = spectral_gains(&s, &psd, &c).unwrap();
            assert!(g.iter().all(|&v| v >= floor - 1e-15 && v <= 1.0 + 1e-15));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            DenoiseConfig { gain_floor: 0.0, ..Default::default() },
            DenoiseConfig { gain_floor: 1.5, ..Default::default() },
            DenoiseConfig { smoothing: 1.0, ..Default::default() },
            DenoiseConfig { noise_est: NoiseEstimator::LeadingFrames { n: 0 }, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
