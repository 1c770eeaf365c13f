//! Short-time objective intelligibility, following the reference
//! implementation's framing and clipping conventions.

use realfft::RealFftPlanner;

use crate::dsp::{resample, Waveform};
use crate::error::{Error, Result};

const FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const N_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per analysis segment (384 ms).
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// `hanning(len + 2)[1:-1]`: a symmetric Hann window without the zero ends.
fn inner_hann(len: usize) -> Vec<f64> {
    let m = (len + 2) as f64;
    (1..=len)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / (m - 1.0)).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

/// Drops frames more than 40 dB below the loudest reference frame and
/// overlap-adds the rest back together.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = inner_hann(FRAME);
    let windowed = |s: &[f64], i: usize| -> Vec<f64> { (0..FRAME).map(|n| w[n] * s[i + n]).collect() };
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| {
            let f = windowed(x, i);
            20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    let ola = |s: &[f64]| -> Vec<f64> {
        if kept.is_empty() {
            return vec![];
        }
        let mut out = vec![0.0; (kept.len() - 1) * HOP + FRAME];
        for (k, &i) in kept.iter().enumerate() {
            for (n, v) in windowed(s, i).into_iter().enumerate() {
                out[k * HOP + n] += v;
            }
        }
        out
    };
    (ola(x), ola(y))
}

/// Band envelopes, `bands × frames`.
fn third_octave_envelopes(x: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let w = inner_hann(FRAME);
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut env = vec![Vec::new(); bands.len()];
    for i in frame_starts(x.len()) {
        input.iter_mut().for_each(|v| *v = 0.0);
        for n in 0..FRAME {
            input[n] = w[n] * x[i + n];
        }
        fft.process(&mut input, &mut output).expect("fixed fft sizes");
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = output[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[b].push(e.sqrt());
        }
    }
    env
}

/// Bin ranges `[lo, hi)` of the one-third-octave bands.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let freqs: Vec<f64> = (0..=NFFT / 2).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |f: f64| -> usize {
        let mut best = 0;
        for (k, v) in freqs.iter().enumerate() {
            if (v - f).powi(2) < (freqs[best] - f).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..N_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Intelligibility score of `est` against the clean `reference`, in [−1, 1].
pub fn stoi(est: &Waveform, reference: &Waveform) -> Result<f64> {
    est.check_same_rate(reference)?;
    est.check_same_len(reference)?;
    if reference.duration_s() < 0.5 {
        return Err(Error::TooShort(format!(
            "stoi needs at least 0.5 s, got {:.3} s",
            reference.duration_s()
        )));
    }
    let x = resample(reference, FS)?;
    let y = resample(est, FS)?;
    let (x, y) = remove_silent_frames(&x.samples, &y.samples);
    let bands = third_octave_bands();
    let xe = third_octave_envelopes(&x, &bands);
    let ye = third_octave_envelopes(&y, &bands);
    let n_frames = xe.first().map_or(0, Vec::len);
    if n_frames < SEGMENT {
        return Err(Error::TooShort(format!(
            "{n_frames} non-silent frames, need at least {SEGMENT}"
        )));
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let n_segments = n_frames - SEGMENT + 1;
    for m in SEGMENT..=n_frames {
        for b in 0..N_BANDS {
            let xs = &xe[b][m - SEGMENT..m];
            let ys = &ye[b][m - SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + EPS);
            let yc: Vec<f64> = ys.iter().zip(xs).map(|(yv, xv)| (yv * scale).min(xv * clip)).collect();
            let mx = xs.iter().sum::<f64>() / SEGMENT as f64;
            let my = yc.iter().sum::<f64>() / SEGMENT as f64;
            let xc: Vec<f64> = xs.iter().map(|v| v - mx).collect();
            let yc: Vec<f64> = yc.iter().map(|v| v - my).collect();
            let (nx, ny) = (norm(&xc) + EPS, norm(&yc) + EPS);
            total += xc.iter().zip(&yc).map(|(a, b)| (a / nx) * (b / ny)).sum::<f64>();
        }
    }
    Ok(total / (N_BANDS * n_segments) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_speakers, synth_utterance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn speech() -> Waveform {
        synth_utterance(&default_speakers(1)[0], 2.5, 11, 8000).unwrap()
    }

    fn noise(len: usize, rms: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rms * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
    }

    fn add_noise(s: &Waveform, snr_db: f64, seed: u64) -> Waveform {
        let n = noise(s.len(), s.rms() * 10f64.powf(-snr_db / 20.0), seed);
        Waveform::new(s.samples.iter().zip(&n).map(|(a, b)| a + b).collect(), 8000).unwrap()
    }

    #[test]
    fn band_edges_match_reference_tables() {
        // first and last band of the 15-band, 150 Hz, 512-point layout
        let b = third_octave_bands();
        assert_eq!(b[0], (7, 9));
        assert_eq!(b[14], (174, 219));
    }

    #[test]
    fn self_score_near_one() {
        let s = speech();
        assert!(stoi(&s, &s).unwrap() >= 0.99);
    }

    #[test]
    fn monotone_in_snr() {
        let s = speech();
        let lo = stoi(&add_noise(&s, -10.0, 1), &s).unwrap();
        let hi = stoi(&add_noise(&s, 10.0, 1), &s).unwrap();
        assert!(lo < hi, "{lo} vs {hi}");
    }

    #[test]
    fn independent_noise_scores_near_zero() {
        let s = speech();
        for seed in 0..20 {
            let n = Waveform::new(noise(s.len(), 0.1, 100 + seed), 8000).unwrap();
            let v = stoi(&n, &s).unwrap();
            assert!(v.abs() < 0.2, "trial {seed}: {v}");
        }
    }

    #[test]
    fn scale_invariant_and_bounded() {
        let s = speech();
        let y = add_noise(&s, 0.0, 4);
        let a = stoi(&y, &s).unwrap();
        let b = stoi(&y.scaled(3.7), &s).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn short_input_rejected() {
        let s = Waveform::zeros(3000, 8000);
        assert!(matches!(stoi(&s, &s), Err(Error::TooShort(_))));
    }
}
