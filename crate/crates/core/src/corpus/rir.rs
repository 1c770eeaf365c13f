use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Parameters of a synthetic room impulse response: a direct-path impulse
/// followed by an exponentially decaying Gaussian tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirSpec {
    /// Seconds for the tail energy to fall by 60 dB.
    pub t60: f64,
    /// Position of the direct path, samples.
    pub direct_delay: usize,
    /// Direct-to-reverberant energy ratio, dB.
    pub drr_db: f64,
    /// Total length, samples.
    pub length: usize,
    pub seed: u64,
}

impl RirSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t60 > 0.0 && self.t60.is_finite()) {
            return Err(Error::InvalidConfig(format!("t60 must be positive, got {}", self.t60)));
        }
        if self.length < self.direct_delay + 1 {
            return Err(Error::InvalidConfig(format!(
                "rir length {} cannot hold direct path at {}",
                self.length, self.direct_delay
            )));
        }
        if !self.drr_db.is_finite() {
            return Err(Error::InvalidConfig("drr must be finite".into()));
        }
        Ok(())
    }

    /// Length covering the full decay plus the direct delay.
    pub fn default_length(t60: f64, direct_delay: usize, sample_rate: u32) -> usize {
        direct_delay + 1 + (1.2 * t60 * sample_rate as f64).ceil() as usize
    }
}

/// Direct path of amplitude 1, tail `a0·g_m·exp(−3·ln10·m/(t60·fs))` for
/// `m ≥ 1` samples after it (energy envelope `exp(−6·ln10·t/t60)`). `a0` is
/// chosen so the expected tail energy equals `10^(−drr/10)`.
pub fn gen_rir(spec: &RirSpec, sample_rate: u32) -> Result<Waveform> {
    spec.validate()?;
    let mut h = vec![0.0; spec.length];
    h[spec.direct_delay] = 1.0;
    let tail_len = spec.length - spec.direct_delay - 1;
    let decay = -3.0 * std::f64::consts::LN_10 / (spec.t60 * sample_rate as f64);
    let expected_energy: f64 = (1..=tail_len).map(|m| (2.0 * decay * m as f64).exp()).sum();
    if tail_len > 0 && expected_energy > 0.0 {
        let a0 = (10f64.powf(-spec.drr_db / 10.0) / expected_energy).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for m in 1..=tail_len {
            let g: f64 = StandardNormal.sample(&mut rng);
            h[spec.direct_delay + m] = a0 * g * (decay * m as f64).exp();
        }
    }
    Waveform::new(h, sample_rate)
}

/// Full linear convolution `s * h`, truncated to `len(s) + direct_delay`
/// samples. Dropping the first `direct_delay` samples aligns the direct path
/// with `s`.
pub fn convolve_rir(s: &Waveform, h: &Waveform, direct_delay: usize) -> Result<Waveform> {
    s.check_same_rate(h)?;
    let out_len = s.len() + direct_delay;
    if s.is_empty() || h.is_empty() {
        return Ok(Waveform::zeros(out_len, s.sample_rate));
    }
    let full_len = s.len() + h.len() - 1;
    let n = full_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let spectrum = |x: &[f64]| {
        let mut buf = fwd.make_input_vec();
        buf[..x.len()].copy_from_slice(x);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("fft sizes fixed by plan");
        out
    };
    let a = spectrum(&s.samples);
    let b = spectrum(&h.samples);
    let mut prod: Vec<_> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    prod[0].im = 0.0;
    prod[n / 2].im = 0.0;
    let mut time = inv.make_output_vec();
    inv.process(&mut prod, &mut time).expect("fft sizes fixed by plan");
    let scale = 1.0 / n as f64;
    let samples = (0..out_len)
        .map(|i| if i < full_len { time[i] * scale } else { 0.0 })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: s.sample_rate,
    })
}

/// Convolves and drops the leading `direct_delay` samples so the output is
/// time-aligned with `s` and has the same length.
pub fn reverberate(s: &Waveform, h: &Waveform, direct_delay: usize) -> Result<Waveform> {
    let full = convolve_rir(s, h, direct_delay)?;
    Ok(Waveform {
        samples: full.samples[direct_delay..].to_vec(),
        sample_rate: full.sample_rate,
    })
}
