use crate::dsp::{log_mel, mel_cepstra, stft, CepstraSeq, MelConfig, StftConfig, Waveform};
use crate::error::{Error, Result};

/// `10/ln 10 · √2`: converts a cepstral Euclidean distance to dB.
pub const MCD_FACTOR: f64 = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;
/// Cepstra kept per frame for distortion measurements.
pub const MCD_COEFFS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct DtwPath {
    /// Aligned `(i, j)` index pairs from `(0, 0)` to the last frames.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of frame distances along the path.
    pub cost: f64,
}

fn first_coeff(c: &CepstraSeq) -> usize {
    usize::from(c.includes_c0)
}

/// Euclidean distance between frame `i` of `a` and frame `j` of `b`,
/// ignoring the energy coefficient.
fn frame_distance(a: &CepstraSeq, i: usize, b: &CepstraSeq, j: usize) -> f64 {
    let k0 = first_coeff(a);
    let (ra, rb) = (a.frames.row(i), b.frames.row(j));
    (k0..a.dim())
        .map(|k| (ra[k] - rb[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_dims(a: &CepstraSeq, b: &CepstraSeq) -> Result<()> {
    if a.dim() != b.dim() || a.includes_c0 != b.includes_c0 {
        return Err(Error::DimensionMismatch(format!(
            "cepstra of dimension {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.n_frames() == 0 || b.n_frames() == 0 {
        return Err(Error::TooShort("empty cepstra sequence".into()));
    }
    Ok(())
}

/// Minimum-cost monotone alignment with unit steps along either axis or the
/// diagonal. Ties prefer the diagonal step.
pub fn dtw_align(a: &CepstraSeq, b: &CepstraSeq) -> Result<DtwPath> {
    check_dims(a, b)?;
    let (n, m) = (a.n_frames(), b.n_frames());
    let mut acc = vec![f64::INFINITY; n * m];
    let idx = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a, i, b, j);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = d + best;
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut pairs = vec![(i, j)];
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
        let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath {
        pairs,
        cost: acc[idx(n - 1, m - 1)],
    })
}

/// Mean mel-cepstral distortion in dB over aligned frame pairs. Without
/// alignment the sequences must have equal length and are paired frame by
/// frame.
pub fn mcd(a: &CepstraSeq, b: &CepstraSeq, align: bool) -> Result<f64> {
    check_dims(a, b)?;
    let pairs = if align {
        dtw_align(a, b)?.pairs
    } else {
        if a.n_frames() != b.n_frames() {
            return Err(Error::LengthMismatch(a.n_frames(), b.n_frames()));
        }
        (0..a.n_frames()).map(|t| (t, t)).collect()
    };
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| MCD_FACTOR * frame_distance(a, i, b, j))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Cepstra used for distortion measurements: log-mel of the given STFT
/// configuration, first [`MCD_COEFFS`] DCT coefficients.
pub fn waveform_cepstra(w: &Waveform, stft_config: &StftConfig) -> Result<CepstraSeq> {
    let spec = stft(w, stft_config)?;
    mel_cepstra(&log_mel(&spec, &MelConfig::default())?, MCD_COEFFS)
}

/// DTW-aligned MCD between two waveforms with the default analysis settings.
pub fn mcd_waveforms(est: &Waveform, reference: &Waveform) -> Result<f64> {
    est.check_same_rate(reference)?;
    let sc = StftConfig::default();
    mcd(&waveform_cepstra(est, &sc)?, &waveform_cepstra(reference, &sc)?, true)
}
