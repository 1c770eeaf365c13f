//! Rendering log-mel frames back to audio: non-negative mel-to-linear
//! inversion followed by Griffin-Lim phase reconstruction.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revoicer_core::dsp::{istft, stft, MelFilterbank, MelFrames, Spectrogram, StftConfig, Waveform};

use crate::error::{Error, Result};

pub const DEFAULT_NNLS_ITERS: usize = 50;
pub const DEFAULT_GL_ITERS: usize = 60;
const TINY: f64 = 1e-30;

/// Non-negative least-squares solution of `M·p = m` for every frame of mel
/// power `m` (`T × M`), by multiplicative updates started from the
/// column-normalized back-projection. Returns linear power, `T × F`.
pub fn mel_to_linear(mel_power: &Array2<f64>, fb: &MelFilterbank, iterations: usize) -> Result<Array2<f64>> {
    if mel_power.ncols() != fb.n_mels() {
        return Err(Error::InvalidConfig(format!(
            "{} mel bins for a {}-band filterbank",
            mel_power.ncols(),
            fb.n_mels()
        )));
    }
    if mel_power.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::NonFinite("mel power must be finite and non-negative".into()));
    }
    let col_sum = fb.apply_transpose(&vec![1.0; fb.n_mels()]);
    let mut out = Array2::zeros((mel_power.nrows(), fb.n_bins));
    for (t, m) in mel_power.rows().into_iter().enumerate() {
        let m = m.to_vec();
        let num = fb.apply_transpose(&m);
        let mut p: Vec<f64> = num.iter().zip(&col_sum).map(|(a, c)| if *c > 0.0 { a / c } else { 0.0 }).collect();
        for _ in 0..iterations {
            let den = fb.apply_transpose(&fb.apply(&p));
            for ((pv, n), d) in p.iter_mut().zip(&num).zip(&den) {
                *pv *= n / (d + TINY);
            }
        }
        for (o, v) in out.row_mut(t).iter_mut().zip(&p) {
            *o = *v;
        }
    }
    Ok(out)
}

/// Waveform of length `len` whose STFT magnitude approximates `mag`
/// (`T × F`), starting from seeded uniform random phases.
pub fn griffin_lim(
    mag: &Array2<f64>,
    config: &StftConfig,
    sample_rate: u32,
    len: usize,
    iterations: usize,
    seed: u64,
) -> Result<Waveform> {
    if mag.ncols() != config.n_bins() {
        return Err(Error::InvalidConfig(format!(
            "{} magnitude bins for fft length {}",
            mag.ncols(),
            config.fft_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = mag.mapv(|a| Complex64::from_polar(a, rng.gen_range(0.0..std::f64::consts::TAU)));
    let mut spec = Spectrogram {
        frames,
        config: *config,
        sample_rate,
        original_len: len,
    };
    for _ in 0..iterations {
        let w = istft(&spec)?;
        let est = stft(&w, config)?;
        if est.frames.dim() != mag.dim() {
            return Err(Error::InvalidConfig(format!(
                "{} frames requested but a {len}-sample signal has {}",
                mag.nrows(),
                est.n_frames()
            )));
        }
        spec.frames = ndarray::Zip::from(mag).and(&est.frames).map_collect(|&a, &z| {
            let r = z.norm();
            if r > 0.0 {
                z * (a / r)
            } else {
                Complex64::new(a, 0.0)
            }
        });
    }
    Ok(istft(&spec)?)
}

/// Log-mel frames to a waveform of `len` samples.
pub fn render_log_mel(
    mel: &MelFrames,
    stft_config: &StftConfig,
    sample_rate: u32,
    len: usize,
    nnls_iters: usize,
    gl_iters: usize,
    seed: u64,
) -> Result<Waveform> {
    let fb = MelFilterbank::new(sample_rate, stft_config.fft_len, &mel.config)?;
    let power = mel.frames.mapv(f64::exp);
    let lin = mel_to_linear(&power, &fb, nnls_iters)?;
    griffin_lim(&lin.mapv(f64::sqrt), stft_config, sample_rate, len, gl_iters, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use revoicer_core::dsp::{log_mel, MelConfig};

    fn tone(len: usize) -> Waveform {
        let s = (0..len)
            .map(|n| {
                let t = n as f64 / 8000.0;
                0.4 * (std::f64::consts::TAU * 440.0 * t).sin() + 0.2 * (std::f64::consts::TAU * 1250.0 * t).sin()
            })
            .collect();
        Waveform::new(s, 8000).unwrap()
    }

    #[test]
    fn nnls_is_non_negative_and_fits_mel() {
        let fb = MelFilterbank::new(8000, 1024, &MelConfig::default()).unwrap();
        let sc = StftConfig::default();
        let p = stft(&tone(4000), &sc).unwrap().power();
        let m = Array2::from_shape_fn((p.nrows(), 80), |(t, j)| fb.apply(&p.row(t).to_vec())[j]);
        let lin = mel_to_linear(&m, &fb, 200).unwrap();
        assert!(lin.iter().all(|v| *v >= 0.0));
        let mut err = 0.0;
        let mut norm = 0.0;
        for t in 0..m.nrows() {
            let back = fb.apply(&lin.row(t).to_vec());
            for j in 0..80 {
                err += (back[j] - m[[t, j]]).powi(2);
                norm += m[[t, j]].powi(2);
            }
        }
        assert!((err / norm).sqrt() < 0.05, "{}", (err / norm).sqrt());
    }

    #[test]
    fn griffin_lim_recovers_magnitude() {
        let sc = StftConfig::default();
        let x = tone(4000);
        let mag = stft(&x, &sc).unwrap().magnitude();
        let y = griffin_lim(&mag, &sc, 8000, x.len(), 60, 1).unwrap();
        assert_eq!(y.len(), x.len());
        let my = stft(&y, &sc).unwrap().magnitude();
        let err: f64 = my.iter().zip(mag.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = mag.iter().map(|a| a * a).sum();
        assert!((err / norm).sqrt() < 0.2, "spectral convergence {}", (err / norm).sqrt());
    }

    #[test]
    fn rendering_is_deterministic_and_keeps_mel_shape() {
        let sc = StftConfig::default();
        let x = tone(3000);
        let mel = log_mel(&stft(&x, &sc).unwrap(), &MelConfig::default()).unwrap();
        let a = render_log_mel(&mel, &sc, 8000, x.len(), 50, 30, 7).unwrap();
        let b = render_log_mel(&mel, &sc, 8000, x.len(), 50, 30, 7).unwrap();
        assert_eq!(a, b);
        let back = log_mel(&stft(&a, &sc).unwrap(), &MelConfig::default()).unwrap();
        // compare where the tone has energy
        let mut diffs = vec![];
        for (r, s) in back.frames.iter().zip(mel.frames.iter()) {
            if *s > -8.0 {
                diffs.push((r - s).abs());
            }
        }
        diffs.sort_by(f64::total_cmp);
        assert!(diffs[diffs.len() / 2] < 1.0, "median log-mel error {}", diffs[diffs.len() / 2]);
    }
}
