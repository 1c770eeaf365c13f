//! Environmental noise stand-in: a colored stationary bed plus band-limited
//! bursts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::Waveform;

const TARGET_RMS: f64 = 0.1;
/// Mean number of bursts per second.
const BURST_RATE: f64 = 1.5;

fn bandpass(x: &[f64], center: f64, bandwidth: f64, sample_rate: u32) -> Vec<f64> {
    let r = (-std::f64::consts::PI * bandwidth / sample_rate as f64).exp();
    let theta = std::f64::consts::TAU * center / sample_rate as f64;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = (1.0 - r) * v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

pub fn gen_noise(len: usize, seed: u64, sample_rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let pole = rng.gen_range(0.3..0.95);
    let white_mix = rng.gen_range(0.05..0.3);
    let mut state = 0.0;
    let mut bed: Vec<f64> = (0..len)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            state = pole * state + (1.0 - pole) * g;
            state + white_mix * (1.0 - pole) * g
        })
        .collect();
    let bed_rms = (bed.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if bed_rms > 0.0 {
        bed.iter_mut().for_each(|v| *v /= bed_rms);
    }

    let n_bursts = (BURST_RATE * len as f64 / sr).round() as usize;
    for _ in 0..n_bursts {
        let burst_len = ((rng.gen_range(0.05..0.25) * sr) as usize).clamp(1, len.max(1));
        let start = rng.gen_range(0..=len.saturating_sub(burst_len));
        let center = rng.gen_range(200.0..0.4 * sr);
        let amp = rng.gen_range(0.5..1.5);
        let raw: Vec<f64> = (0..burst_len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let filtered = bandpass(&raw, center, 0.25 * center, sample_rate);
        let f_rms =
            (filtered.iter().map(|v| v * v).sum::<f64>() / burst_len as f64).sqrt().max(1e-12);
        for (i, v) in filtered.iter().enumerate() {
            let u = (i as f64 + 0.5) / burst_len as f64;
            let env = 0.5 - 0.5 * (std::f64::consts::TAU * u).cos();
            bed[start + i] += amp * env * v / f_rms;
        }
    }

    let rms = (bed.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        bed.iter_mut().for_each(|v| *v *= TARGET_RMS / rms);
    }
    Waveform {
        samples: bed,
        sample_rate,
    }
}
