use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{Error, Result};

/// Power floor applied before the logarithm.
pub const LOG_MEL_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    /// `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
        }
    }
}

/// Triangular HTK-scale filterbank with each row summing to one.
///
/// Rows are stored sparsely (each triangle touches a contiguous run of bins),
/// which keeps the mel-to-linear inversion in the vocoder cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_bins: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, fft_len: usize, config: &MelConfig) -> Result<Self> {
        let n_mels = config.n_mels;
        if n_mels < 13 {
            return Err(Error::InvalidConfig(format!(
                "at least 13 mel bands required, got {n_mels}"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = config.f_max.unwrap_or(nyquist);
        if !(config.f_min >= 0.0 && f_max > config.f_min && f_max <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "mel range [{}, {f_max}] invalid for {sample_rate} Hz",
                config.f_min
            )));
        }
        let n_bins = fft_len / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(config.f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_len as f64;

        let rows = (0..n_mels)
            .map(|j| {
                let (lo, center, hi) = (edges[j], edges[j + 1], edges[j + 2]);
                let mut dense: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > lo && f <= center {
                            (f - lo) / (center - lo)
                        } else if f > center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let sum: f64 = dense.iter().sum();
                if sum > 0.0 {
                    dense.iter_mut().for_each(|w| *w /= sum);
                } else {
                    // band narrower than a bin: fall back to the nearest bin
                    let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
                    dense[k] = 1.0;
                }
                let start = dense.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = dense.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, dense[start..end].to_vec())
            })
            .collect();
        Ok(Self { n_bins, rows })
    }

    pub fn n_mels(&self) -> usize {
        self.rows.len()
    }

    pub fn dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows.len(), self.n_bins));
        for (j, (start, w)) in self.rows.iter().enumerate() {
            for (i, &v) in w.iter().enumerate() {
                m[[j, start + i]] = v;
            }
        }
        m
    }

    /// `M · p` for one frame of linear-frequency values.
    pub fn apply(&self, linear: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(start, w)| w.iter().zip(&linear[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ · m` for one frame of mel values.
    pub fn apply_transpose(&self, mel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bins];
        for ((start, w), &m) in self.rows.iter().zip(mel) {
            for (i, &v) in w.iter().enumerate() {
                out[start + i] += v * m;
            }
        }
        out
    }
}

/// Log-mel energies, `T × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrames {
    pub frames: Array2<f64>,
    pub config: MelConfig,
}

impl MelFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn log_mel(s: &Spectrogram, config: &MelConfig) -> Result<MelFrames> {
    let fb = MelFilterbank::new(s.sample_rate, s.config.fft_len, config)?;
    let mut frames = Array2::zeros((s.n_frames(), fb.n_mels()));
    let mut power = vec![0.0; s.n_bins()];
    for (t, row) in s.frames.rows().into_iter().enumerate() {
        for (p, c) in power.iter_mut().zip(row.iter()) {
            *p = c.norm_sqr();
        }
        for (j, e) in fb.apply(&power).into_iter().enumerate() {
            frames[[t, j]] = e.max(LOG_MEL_FLOOR).ln();
        }
    }
    Ok(MelFrames {
        frames,
        config: *config,
    })
}

/// Orthonormal DCT-II.
pub fn dct_orthonormal(x: &[f64]) -> Vec<f64> {
    let m = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(n, v)| {
                        v * (std::f64::consts::PI * k as f64 * (2.0 * n as f64 + 1.0) / (2.0 * m))
                            .cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Inverse of [`dct_orthonormal`] (DCT-III with the same scaling). Missing
/// trailing coefficients are treated as zero.
pub fn idct_orthonormal(c: &[f64], len: usize) -> Vec<f64> {
    let m = len as f64;
    (0..len)
        .map(|n| {
            c.iter()
                .enumerate()
                .map(|(k, v)| {
                    let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                    scale
                        * v
                        * (std::f64::consts::PI * k as f64 * (2.0 * n as f64 + 1.0) / (2.0 * m))
                            .cos()
                })
                .sum()
        })
        .collect()
}

/// Mel-cepstra, `T × D`. Column 0 is the energy term c0; distance measures
/// skip it.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstraSeq {
    pub frames: Array2<f64>,
    pub includes_c0: bool,
}

impl CepstraSeq {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn mel_cepstra(m: &MelFrames, n_coeffs: usize) -> Result<CepstraSeq> {
    if n_coeffs > m.n_mels() || n_coeffs == 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot keep {n_coeffs} cepstra from {} mel bands",
            m.n_mels()
        )));
    }
    let mut frames = Array2::zeros((m.n_frames(), n_coeffs));
    for (t, row) in m.frames.rows().into_iter().enumerate() {
        let c = dct_orthonormal(&row.to_vec());
        for k in 0..n_coeffs {
            frames[[t, k]] = c[k];
        }
    }
    Ok(CepstraSeq {
        frames,
        includes_c0: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig, Waveform};
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_from_power(power: Array2<f64>) -> Spectrogram {
        Spectrogram {
            frames: power.mapv(|p| Complex64::new(p.sqrt(), 0.0)),
            config: StftConfig::default(),
            sample_rate: 8000,
            original_len: 0,
        }
    }

    #[test]
    fn rows_sum_to_one() {
        for (sr, fft) in [(8000, 1024), (8000, 256), (16000, 512)] {
            let fb = MelFilterbank::new(sr, fft, &MelConfig::default()).unwrap();
            let dense = fb.dense();
            for row in dense.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn too_few_bands_rejected() {
        let cfg = MelConfig {
            n_mels: 12,
            ..Default::default()
        };
        assert!(MelFilterbank::new(8000, 1024, &cfg).is_err());
    }

    #[test]
    fn zero_spectrogram_hits_floor() {
        let s = stft(&Waveform::zeros(800, 8000), &StftConfig::default()).unwrap();
        let m = log_mel(&s, &MelConfig::default()).unwrap();
        assert!(m.frames.iter().all(|&v| v == LOG_MEL_FLOOR.ln()));
    }

    #[test]
    fn flat_power_maps_to_unit_band_energy() {
        let m = log_mel(&spec_from_power(Array2::ones((3, 513))), &MelConfig::default()).unwrap();
        assert!(m.frames.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn white_noise_matches_dense_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Waveform::new((0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        let m = log_mel(&s, &MelConfig::default()).unwrap();
        let dense = MelFilterbank::new(8000, 1024, &MelConfig::default())
            .unwrap()
            .dense();
        let power = s.power();
        for t in [0, 10, 50] {
            for j in 0..80 {
                let mut e = 0.0;
                for k in 0..513 {
                    e += dense[[j, k]] * power[[t, k]];
                }
                assert!((m.frames[[t, j]] - e.max(LOG_MEL_FLOOR).ln()).abs() < 1e-9);
            }
        }
        // wide bands average more bins, so their band energies fluctuate less
        let var = |j: usize| {
            let col = m.frames.column(j);
            let mean = col.mean().unwrap();
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64
        };
        assert!(var(75) < var(5));
    }

    #[test]
    fn transpose_is_adjoint() {
        let fb = MelFilterbank::new(8000, 1024, &MelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..513).map(|_| rng.gen()).collect();
        let q: Vec<f64> = (0..80).map(|_| rng.gen()).collect();
        let lhs: f64 = fb.apply(&p).iter().zip(&q).map(|(a, b)| a * b).sum();
        let rhs: f64 = fb.apply_transpose(&q).iter().zip(&p).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dct_of_constant_is_c0_only() {
        let c = dct_orthonormal(&[2.5; 80]);
        assert!((c[0] - 2.5 * 80f64.sqrt()).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn dct_of_ramp_matches_direct_sum() {
        // X_k = s_k Σ_n x_n cos(π k (2n+1) / 8)
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = dct_orthonormal(&x);
        let expected = [
            5.0,
            -2.230442497387663,
            0.0,
            -0.15851266778110737,
        ];
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn dct_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..80).map(|_| rng.gen_range(-20.0..5.0)).collect();
        let back = idct_orthonormal(&dct_orthonormal(&x), 80);
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cepstra_keep_leading_coefficients() {
        let m = MelFrames {
            frames: Array2::from_elem((4, 80), -3.0),
            config: MelConfig::default(),
        };
        let c = mel_cepstra(&m, 25).unwrap();
        assert_eq!(c.dim(), 25);
        assert!(c.frames.column(0).iter().all(|&v| (v + 3.0 * 80f64.sqrt()).abs() < 1e-9));
        assert!(mel_cepstra(&m, 81).is_err());
    }
}
