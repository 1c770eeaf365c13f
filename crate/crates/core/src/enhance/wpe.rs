//! Single-channel weighted prediction error dereverberation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{istft, stft, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WpeConfig {
    /// Prediction filter length K.
    pub taps: usize,
    /// Prediction delay D, frames.
    pub delay: usize,
    pub iterations: usize,
    pub variance_floor: f64,
    /// Ridge term added to the weighted correlation matrix.
    pub regularization: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self {
            taps: 10,
            delay: 3,
            iterations: 3,
            variance_floor: 1e-8,
            regularization: 1e-6,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.delay == 0 || self.iterations == 0 {
            return Err(Error::InvalidConfig(
                "wpe taps, delay and iterations must all be at least 1".into(),
            ));
        }
        if !(self.variance_floor > 0.0 && self.regularization > 0.0) {
            return Err(Error::InvalidConfig("wpe floors must be positive".into()));
        }
        Ok(())
    }

    /// Frames at the start that have no complete regressor.
    pub fn warmup_frames(&self) -> usize {
        self.delay + self.taps - 1
    }
}

/// Delayed regressor `[x_{t−D}, …, x_{t−D−K+1}]`.
fn regressor<'a>(x: &'a [Complex64], t: usize, c: &WpeConfig) -> impl Iterator<Item = Complex64> + 'a {
    let first = t - c.delay;
    (0..c.taps).map(move |k| x[first - k])
}

/// Solves `(Σ_t x̃_t x̃_tᴴ/λ_t + ridge·I) g = Σ_t x̃_t x_t*/λ_t` over frames
/// `t ≥ D+K−1` of one frequency bin. `lambda` is indexed by frame.
///
/// The system is the normal equation of a ridge-weighted least-squares
/// problem; solving that problem by QR instead of factoring the normal
/// matrix keeps the error proportional to its condition number rather than
/// the square of it, which matters once small residuals produce large
/// weights.
pub fn solve_prediction_filter(
    x: &[Complex64],
    lambda: &[f64],
    c: &WpeConfig,
    bin: usize,
) -> Result<Vec<Complex64>> {
    let k = c.taps;
    let frames: Vec<usize> = (c.warmup_frames()..x.len()).collect();
    let rows = frames.len() + k;
    // unknown is conj(g): gᴴx̃_t = x̃_tᵀ conj(g)
    let mut a = DMatrix::<Complex64>::zeros(rows, k);
    let mut b = DVector::<Complex64>::zeros(rows);
    for (r, &t) in frames.iter().enumerate() {
        let w = 1.0 / lambda[t].sqrt();
        for (j, v) in regressor(x, t, c).enumerate() {
            a[(r, j)] = v * w;
        }
        b[r] = x[t] * w;
    }
    let ridge = c.regularization.sqrt();
    for j in 0..k {
        a[(frames.len() + j, j)] = Complex64::new(ridge, 0.0);
    }
    let qr = a.clone().qr();
    let rhs = qr.q().adjoint() * &b;
    let g_conj = match qr.r().solve_upper_triangular(&rhs) {
        Some(v) if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => v,
        _ => {
            let normal = a.adjoint() * &a;
            normal
                .pseudo_inverse(1e-12)
                .map_err(|_| Error::Solver { bin })?
                * (a.adjoint() * b)
        }
    };
    if g_conj.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Solver { bin });
    }
    Ok(g_conj.iter().map(|z| z.conj()).collect())
}

fn dereverb_bin(x: &[Complex64], c: &WpeConfig, bin: usize) -> Result<Vec<Complex64>> {
    let mut d = x.to_vec();
    for _ in 0..c.iterations {
        let lambda: Vec<f64> = d.iter().map(|v| v.norm_sqr().max(c.variance_floor)).collect();
        let g = solve_prediction_filter(x, &lambda, c, bin)?;
        for t in c.warmup_frames()..x.len() {
            let pred: Complex64 = g.iter().zip(regressor(x, t, c)).map(|(gk, xk)| gk.conj() * xk).sum();
            d[t] = x[t] - pred;
        }
    }
    Ok(d)
}

pub fn wpe_dereverb(x: &Spectrogram, c: &WpeConfig) -> Result<Spectrogram> {
    c.validate()?;
    let n_frames = x.n_frames();
    if n_frames <= c.taps + c.delay {
        return Err(Error::TooShort(format!(
            "wpe needs more than {} frames, got {n_frames}",
            c.taps + c.delay
        )));
    }
    let columns: Vec<Vec<Complex64>> = x.frames.axis_iter(Axis(1)).map(|col| col.to_vec()).collect();
    let bins: Vec<Vec<Complex64>> = columns
        .par_iter()
        .enumerate()
        .map(|(f, col)| dereverb_bin(col, c, f))
        .collect::<Result<_>>()?;
    let mut out = Array2::<Complex64>::zeros(x.frames.dim());
    for (f, col) in bins.into_iter().enumerate() {
        for (t, v) in col.into_iter().enumerate() {
            out[(t, f)] = v;
        }
    }
    Ok(x.with_frames(out))
}

pub fn wpe_waveform(w: &Waveform, c: &WpeConfig, stft_config: &StftConfig) -> Result<Waveform> {
    let spec = stft(w, stft_config)?;
    istft(&wpe_dereverb(&spec, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_speakers, gen_rir, reverberate, synth_utterance, RirSpec};
    use crate::metrics::si_sdr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(frames: usize, bins: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((frames, bins), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let config = StftConfig::enhancement();
        Spectrogram {
            frames: data,
            config,
            sample_rate: 8000,
            original_len: 0,
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let s = random_spec(40, 5, 0).with_frames(Array2::zeros((40, 5)));
        let out = wpe_dereverb(&s, &WpeConfig::default()).unwrap();
        assert!(out.frames.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn too_short_rejected() {
        let s = random_spec(13, 3, 0);
        assert!(matches!(wpe_dereverb(&s, &WpeConfig::default()), Err(Error::TooShort(_))));
        let bad = WpeConfig { iterations: 0, ..Default::default() };
        assert!(wpe_dereverb(&random_spec(40, 3, 0), &bad).is_err());
    }

    #[test]
    fn warmup_frames_pass_through() {
        let s = random_spec(60, 4, 1);
        let c = WpeConfig::default();
        let out = wpe_dereverb(&s, &c).unwrap();
        for t in 0..c.warmup_frames() {
            assert_eq!(out.frames.row(t), s.frames.row(t));
        }
    }

    #[test]
    fn constant_weights_reduce_to_ridge_least_squares() {
        let c = WpeConfig { taps: 4, delay: 2, regularization: 1e-3, ..Default::default() };
        for seed in 0..5 {
            let s = random_spec(50, 1, seed);
            let x: Vec<Complex64> = s.frames.column(0).to_vec();
            let lam = 0.7;
            let g = solve_prediction_filter(&x, &vec![lam; x.len()], &c, 0).unwrap();

            // independent normal equations: residual x_t − (A ḡ)_t with rows
            // of A holding the delayed frames; solved with LU
            let rows: Vec<usize> = (c.warmup_frames()..x.len()).collect();
            let a = DMatrix::from_fn(rows.len(), c.taps, |i, k| x[rows[i] - c.delay - k]);
            let b = DVector::from_fn(rows.len(), |i, _| x[rows[i]]);
            let normal = a.adjoint() * &a / Complex64::new(lam, 0.0)
                + DMatrix::identity(c.taps, c.taps) * Complex64::new(c.regularization, 0.0);
            let rhs = a.adjoint() * b / Complex64::new(lam, 0.0);
            let g_bar = normal.lu().solve(&rhs).unwrap();
            for k in 0..c.taps {
                assert!((g[k] - g_bar[k].conj()).norm() < 1e-8, "{:?} vs {:?}", g[k], g_bar[k]);
            }
        }
    }

    #[test]
    fn per_bin_independence() {
        let s = random_spec(50, 6, 9);
        let c = WpeConfig::default();
        let out = wpe_dereverb(&s, &c).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = Array2::from_shape_fn((50, 6), |(t, f)| s.frames[(t, perm[f])]);
        let out_p = wpe_dereverb(&s.with_frames(permuted), &c).unwrap();
        for t in 0..50 {
            for f in 0..6 {
                assert_eq!(out_p.frames[(t, f)], out.frames[(t, perm[f])]);
            }
        }
    }

    #[test]
    fn scale_covariance() {
        let s = random_spec(60, 4, 2);
        let c = WpeConfig::default();
        let base = wpe_dereverb(&s, &c).unwrap();
        for alpha in [0.3, 2.0, 7.5] {
            let scaled = s.with_frames(s.frames.mapv(|v| v * alpha));
            let out = wpe_dereverb(&scaled, &c).unwrap();
            for (a, b) in out.frames.iter().zip(base.frames.iter()) {
                assert!((a - b * alpha).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn waveform_silence_and_determinism() {
        let c = WpeConfig::default();
        let sc = StftConfig::enhancement();
        let z = Waveform::zeros(4000, 8000);
        assert!(wpe_waveform(&z, &c, &sc).unwrap().samples.iter().all(|&v| v == 0.0));
        let spk = &default_speakers(1)[0];
        let x = synth_utterance(spk, 1.5, 4, 8000).unwrap();
        let a = wpe_waveform(&x, &c, &sc).unwrap();
        let b = wpe_waveform(&x, &c, &sc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), x.len());
    }

    #[test]
    fn improves_reverberant_speech() {
        let c = WpeConfig::default();
        let sc = StftConfig::enhancement();
        let speakers = default_speakers(4);
        let (mut before, mut after) = (0.0, 0.0);
        for i in 0..4u64 {
            let clean = synth_utterance(&speakers[i as usize], 2.0, 100 + i, 8000).unwrap();
            let spec = RirSpec {
                t60: 0.5,
                direct_delay: 16,
                drr_db: 0.0,
                length: RirSpec::default_length(0.5, 16, 8000),
                seed: i,
            };
            let h = gen_rir(&spec, 8000).unwrap();
            let rev = reverberate(&clean, &h, 16).unwrap();
            before += si_sdr(&rev, &clean).unwrap();
            after += si_sdr(&wpe_waveform(&rev, &c, &sc).unwrap(), &clean).unwrap();
        }
        assert!(after > before, "{after} <= {before}");
    }
}
