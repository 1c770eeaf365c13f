//! Synthetic "speech": a harmonic source with a content-dependent pitch
//! contour, shaped by three formant resonators and a syllabic envelope.
//!
//! Content (syllable timing, voicing, intonation shape) comes from the
//! utterance seed alone; the speaker contributes formants and pitch range.
//! Rendering the same seed with two speakers therefore yields parallel
//! utterances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const FORMANT_BANDWIDTHS: [f64; 3] = [80.0, 110.0, 150.0];
const OUTPUT_PEAK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    pub formant_freqs: [f64; 3],
    /// `[lo, hi]` fundamental frequency range, Hz.
    pub pitch_range: [f64; 2],
    pub seed: u64,
}

impl SpeakerSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let f = self.formant_freqs;
        if !(f[0] > 0.0 && f[0] < f[1] && f[1] < f[2] && f[2] < nyquist) {
            return Err(Error::InvalidConfig(format!(
                "speaker {}: formants {f:?} must be increasing and below {nyquist} Hz",
                self.id
            )));
        }
        let [lo, hi] = self.pitch_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "speaker {}: pitch range [{lo}, {hi}] invalid",
                self.id
            )));
        }
        Ok(())
    }
}

/// `n` speakers with well separated formant sets and alternating low/high
/// pitch ranges.
pub fn default_speakers(n: usize) -> Vec<SpeakerSpec> {
    const BASES: [([f64; 3], [f64; 2]); 4] = [
        ([500.0, 1300.0, 2300.0], [90.0, 150.0]),
        ([650.0, 1700.0, 2750.0], [170.0, 260.0]),
        ([380.0, 1000.0, 1950.0], [80.0, 130.0]),
        ([780.0, 2000.0, 3100.0], [190.0, 290.0]),
    ];
    (0..n)
        .map(|i| {
            let (formants, pitch) = BASES[i % BASES.len()];
            // later rounds shift formants slightly so every speaker is unique
            let shift = 1.0 + 0.04 * (i / BASES.len()) as f64;
            SpeakerSpec {
                id: format!("spk{i}"),
                formant_freqs: formants.map(|f| f * shift),
                pitch_range: pitch,
                seed: 1000 + i as u64,
            }
        })
        .collect()
}

struct Syllable {
    start: usize,
    len: usize,
    peak: f64,
    voiced: bool,
}

fn plan_syllables(rng: &mut ChaCha8Rng, n: usize, sample_rate: u32) -> Vec<Syllable> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = ((rng.gen_range(0.12..0.28) * sample_rate as f64) as usize).max(1);
        out.push(Syllable {
            start,
            len: len.min(n - start),
            peak: rng.gen_range(0.6..1.0),
            voiced: rng.gen_bool(0.85),
        });
        start += len;
    }
    out
}

/// Relative cycle-to-cycle pitch perturbation.
const JITTER: f64 = 0.02;

struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sample_rate: u32) -> Self {
        let r = (-std::f64::consts::PI * bandwidth / sample_rate as f64).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Renders `duration_s` seconds (1–10 s) of the content identified by `seed`
/// in the voice of `spk`. Deterministic in `(spk, seed)`.
pub fn synth_utterance(
    spk: &SpeakerSpec,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
) -> Result<Waveform> {
    spk.validate(sample_rate)?;
    if !(1.0..=10.0).contains(&duration_s) {
        return Err(Error::InvalidConfig(format!(
            "utterance duration {duration_s} s outside [1, 10]"
        )));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut content = ChaCha8Rng::seed_from_u64(seed);
    let syllables = plan_syllables(&mut content, n, sample_rate);

    // intonation shape in [0, 1]: a few slow sinusoids through tanh
    let components: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                content.gen_range(0.4..1.2),
                content.gen_range(0.5..3.0),
                content.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let unvoiced: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut content)).collect();

    let mut voice = ChaCha8Rng::seed_from_u64(derive_seed(spk.seed, &[&seed.to_string()]));
    let [lo, hi] = spk.pitch_range;
    let nyquist = sr / 2.0;

    let mut env_v = vec![0.0; n];
    let mut env_u = vec![0.0; n];
    for syl in &syllables {
        for i in 0..syl.len {
            let u = (i as f64 + 0.5) / syl.len as f64;
            let shape = 0.15 + 0.85 * (std::f64::consts::PI * u).sin().powf(0.6);
            let e = syl.peak * shape;
            if syl.voiced {
                env_v[syl.start + i] = e;
            } else {
                env_u[syl.start + i] = 0.35 * e;
            }
        }
    }
    // 20 ms fades at both ends
    let fade = ((0.02 * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = i as f64 / fade as f64;
        for env in [&mut env_v, &mut env_u] {
            env[i] *= g;
            env[n - 1 - i] *= g;
        }
    }

    let mut phase = 0.0f64;
    // cycle-to-cycle pitch perturbation, redrawn at every glottal period
    let mut jitter = 1.0;
    let mut source = vec![0.0; n];
    for i in 0..n {
        let t = i as f64 / sr;
        let x: f64 = components
            .iter()
            .map(|(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
            .sum();
        let shape = 0.5 + 0.5 * x.tanh();
        let f0 = lo * (hi / lo).powf(shape) * jitter;
        phase += std::f64::consts::TAU * f0 / sr;
        if phase >= std::f64::consts::TAU {
            phase -= std::f64::consts::TAU;
            jitter = 1.0 + JITTER * voice.gen_range(-1.0..1.0);
        }
        let mut harmonic = 0.0;
        let mut h = 1;
        while h as f64 * f0 < 0.9 * nyquist {
            harmonic += (h as f64 * phase).cos() / h as f64;
            h += 1;
        }
        source[i] = env_v[i] * harmonic + env_u[i] * unvoiced[i];
    }

    let mut resonators: Vec<Resonator> = spk
        .formant_freqs
        .iter()
        .zip(FORMANT_BANDWIDTHS)
        .map(|(&f, b)| Resonator::new(f, b, sample_rate))
        .collect();
    let mut out: Vec<f64> = source
        .into_iter()
        .map(|x| resonators.iter_mut().fold(x, |acc, r| r.process(acc)))
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= OUTPUT_PEAK / peak);
    }
    Waveform::new(out, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel, stft, MelConfig, StftConfig};

    #[test]
    fn deterministic_per_speaker_and_seed() {
        let spk = &default_speakers(1)[0];
        let a = synth_utterance(spk, 1.5, 7, 8000).unwrap();
        let b = synth_utterance(spk, 1.5, 7, 8000).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_utterance(spk, 1.5, 8, 8000).unwrap());
        assert_eq!(a.len(), 12000);
        assert!((a.peak() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut spk = default_speakers(1).remove(0);
        assert!(synth_utterance(&spk, 0.5, 1, 8000).is_err());
        spk.formant_freqs = [900.0, 800.0, 2000.0];
        assert!(synth_utterance(&spk, 2.0, 1, 8000).is_err());
    }

    /// Local maxima of an order-10 LPC envelope (autocorrelation method,
    /// Levinson-Durbin), sampled every 5 Hz.
    fn spectral_peaks(w: &Waveform) -> Vec<f64> {
        let order = 10;
        let x = &w.samples;
        let r: Vec<f64> = (0..=order)
            .map(|lag| (lag..x.len()).map(|i| x[i] * x[i - lag]).sum())
            .collect();
        let mut a = vec![0.0; order + 1];
        a[0] = 1.0;
        let mut err = r[0];
        for i in 1..=order {
            let acc: f64 = (1..i).map(|j| a[j] * r[i - j]).sum();
            let k = -(r[i] + acc) / err;
            let prev = a.clone();
            for j in 1..i {
                a[j] = prev[j] + k * prev[i - j];
            }
            a[i] = k;
            err *= 1.0 - k * k;
        }
        let sr = w.sample_rate as f64;
        let freqs: Vec<f64> = (0..(sr / 2.0 / 5.0) as usize).map(|i| i as f64 * 5.0).collect();
        let env: Vec<f64> = freqs
            .iter()
            .map(|f| {
                let th = std::f64::consts::TAU * f / sr;
                let (re, im) = a.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, c)| {
                    (re + c * (k as f64 * th).cos(), im - c * (k as f64 * th).sin())
                });
                1.0 / (re * re + im * im)
            })
            .collect();
        (1..env.len() - 1)
            .filter(|&k| env[k] > env[k - 1] && env[k] >= env[k + 1])
            .map(|k| freqs[k])
            .collect()
    }

    #[test]
    fn spectral_peaks_near_formants() {
        for spk in default_speakers(4) {
            let w = synth_utterance(&spk, 4.0, 11, 8000).unwrap();
            let peaks = spectral_peaks(&w);
            for f in spk.formant_freqs {
                let nearest = peaks
                    .iter()
                    .map(|p| (p - f).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest <= 50.0, "{}: formant {f} peaks {peaks:?}", spk.id);
            }
        }
    }

    #[test]
    fn speakers_separable_by_nearest_centroid() {
        let spks = default_speakers(2);
        let feats = |spk: &SpeakerSpec, seed: u64| {
            let w = synth_utterance(spk, 2.0, seed, 8000).unwrap();
            log_mel(&stft(&w, &StftConfig::default()).unwrap(), &MelConfig::default()).unwrap()
        };
        let centroid = |spk: &SpeakerSpec| {
            let m = feats(spk, 100);
            m.frames.mean_axis(ndarray::Axis(0)).unwrap()
        };
        let cents = [centroid(&spks[0]), centroid(&spks[1])];
        let (mut correct, mut total) = (0, 0);
        for (label, spk) in spks.iter().enumerate() {
            let m = feats(spk, 200);
            for row in m.frames.rows() {
                let d: Vec<f64> = cents
                    .iter()
                    .map(|c| c.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                let pred = if d[0] <= d[1] { 0 } else { 1 };
                correct += (pred == label) as usize;
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.9, "accuracy {acc}");
    }
}
