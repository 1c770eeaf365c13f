use ndarray::Array2;
use num_complex::Complex64;
use realfft::RealFftPlanner;

use super::{StftConfig, Waveform};
use crate::error::{Error, Result};

/// Complex STFT frames, `T × (fft_len/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
    pub original_len: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// `|X|²` per entry.
    pub fn power(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm_sqr())
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }

    /// Same geometry, new frame contents.
    pub fn with_frames(&self, frames: Array2<Complex64>) -> Self {
        debug_assert_eq!(frames.dim(), self.frames.dim());
        Self {
            frames,
            config: self.config,
            sample_rate: self.sample_rate,
            original_len: self.original_len,
        }
    }
}

pub fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of frames for a signal of `len` samples with center padding.
pub(crate) fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop) + 1
}

fn padded_signal(x: &[f64], win: usize, hop: usize) -> Vec<f64> {
    let len = x.len() as isize;
    let half = (win / 2) as isize;
    let n_frames = frame_count(x.len(), hop);
    let padded_len = (n_frames - 1) * hop + win;
    (0..padded_len as isize)
        .map(|p| {
            let i = p - half;
            if (0..len).contains(&i) {
                x[i as usize]
            } else if i < 0 {
                // reflect without repeating the edge sample
                let r = -i;
                if r < len {
                    x[r as usize]
                } else {
                    0.0
                }
            } else {
                let r = 2 * (len - 1) - i;
                if i - len < half && r >= 0 {
                    x[r as usize]
                } else {
                    0.0
                }
            }
        })
        .collect()
}

pub fn stft(w: &Waveform, config: &StftConfig) -> Result<Spectrogram> {
    if w.is_empty() {
        return Err(Error::TooShort("stft of an empty waveform".into()));
    }
    config.validate(w.sample_rate)?;
    let win = config.window_len(w.sample_rate);
    let hop = config.hop_len(w.sample_rate);
    let n_fft = config.fft_len;
    let window = hann_periodic(win);
    let padded = padded_signal(&w.samples, win, hop);
    let n_frames = frame_count(w.len(), hop);

    let mut planner = RealFftPlanner::<f64>::new();
    let r2c = planner.plan_fft_forward(n_fft);
    let mut input = r2c.make_input_vec();
    let mut output = r2c.make_output_vec();
    let mut scratch = r2c.make_scratch_vec();
    let mut frames = Array2::<Complex64>::zeros((n_frames, config.n_bins()));
    for t in 0..n_frames {
        let start = t * hop;
        input.iter_mut().for_each(|v| *v = 0.0);
        for n in 0..win {
            input[n] = padded[start + n] * window[n];
        }
        r2c.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("fft buffer sizes are fixed by the plan");
        frames.row_mut(t).assign(&ndarray::ArrayView1::from(&output[..]));
    }
    Ok(Spectrogram {
        frames,
        config: *config,
        sample_rate: w.sample_rate,
        original_len: w.len(),
    })
}

/// Smallest value of the overlap-added squared window over one hop period.
fn min_window_overlap(window: &[f64], hop: usize) -> f64 {
    (0..hop)
        .map(|n| {
            window
                .iter()
                .skip(n)
                .step_by(hop)
                .map(|w| w * w)
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let config = &s.config;
    config.validate(s.sample_rate)?;
    let win = config.window_len(s.sample_rate);
    let hop = config.hop_len(s.sample_rate);
    let n_fft = config.fft_len;
    if s.n_bins() != config.n_bins() {
        return Err(Error::DimensionMismatch(format!(
            "spectrogram has {} bins, config expects {}",
            s.n_bins(),
            config.n_bins()
        )));
    }
    let window = hann_periodic(win);
    if min_window_overlap(&window, hop) < 1e-8 {
        return Err(Error::NotCola { hop, window: win });
    }

    let n_frames = s.n_frames();
    let out_len = (n_frames.saturating_sub(1)) * hop + win;
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];

    let mut planner = RealFftPlanner::<f64>::new();
    let c2r = planner.plan_fft_inverse(n_fft);
    let mut spec = c2r.make_input_vec();
    let mut frame = c2r.make_output_vec();
    let mut scratch = c2r.make_scratch_vec();
    let inv_n = 1.0 / n_fft as f64;
    for t in 0..n_frames {
        spec.copy_from_slice(s.frames.row(t).as_slice().expect("standard layout"));
        spec[0].im = 0.0;
        spec[n_fft / 2].im = 0.0;
        c2r.process_with_scratch(&mut spec, &mut frame, &mut scratch)
            .expect("dc and nyquist bins are real");
        let start = t * hop;
        for n in 0..win {
            acc[start + n] += frame[n] * inv_n * window[n];
            norm[start + n] += window[n] * window[n];
        }
    }

    let half = win / 2;
    let samples = (0..s.original_len)
        .map(|i| {
            let p = i + half;
            if p < out_len && norm[p] > 1e-12 {
                acc[p] / norm[p]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: s.sample_rate,
    })
}
