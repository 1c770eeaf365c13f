use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Peak above which a mixture would clip in 16-bit PCM.
const CLIP_LEVEL: f64 = 1.0;
/// Target peak after normalization.
const NORMALIZED_PEAK: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// `norm · (speech + scale · noise)`.
    pub mixed: Waveform,
    /// Speech component as it appears in `mixed`.
    pub speech: Waveform,
    /// Noise component as it appears in `mixed`.
    pub noise: Waveform,
    pub scale: f64,
    /// Joint normalization factor, 1.0 when no clipping would occur.
    pub norm_factor: f64,
}

/// Tiles or crops `n` to exactly `len` samples.
pub fn fit_length(n: &Waveform, len: usize) -> Waveform {
    let samples = if n.is_empty() {
        vec![0.0; len]
    } else {
        n.samples.iter().copied().cycle().take(len).collect()
    };
    Waveform {
        samples,
        sample_rate: n.sample_rate,
    }
}

/// Mixes reverberant speech and reverberant noise so that
/// `20·log10(rms(s_rev) / rms(scale·n_rev)) = snr_db`. Noise is tiled or
/// cropped to the speech length. When the sum would clip, all three signals
/// are scaled jointly to a 0.95 peak, which leaves the SNR unchanged.
pub fn mix_at_snr(s_rev: &Waveform, n_rev: &Waveform, snr_db: f64) -> Result<Mixture> {
    s_rev.check_same_rate(n_rev)?;
    let noise = fit_length(n_rev, s_rev.len());
    let (rs, rn) = (s_rev.rms(), noise.rms());
    if rs == 0.0 {
        return Err(Error::Silent("speech has zero rms".into()));
    }
    if rn == 0.0 {
        return Err(Error::Silent("noise has zero rms".into()));
    }
    let scale = (rs / rn) * 10f64.powf(-snr_db / 20.0);
    let mixed: Vec<f64> = s_rev
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(s, n)| s + scale * n)
        .collect();
    let noise_scaled: Vec<f64> = noise.samples.iter().map(|n| scale * n).collect();
    let peak = mixed
        .iter()
        .chain(&s_rev.samples)
        .chain(&noise_scaled)
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let norm_factor = if peak > CLIP_LEVEL {
        NORMALIZED_PEAK / peak
    } else {
        1.0
    };
    let apply = |v: Vec<f64>| -> Waveform {
        Waveform {
            samples: if norm_factor == 1.0 {
                v
            } else {
                v.into_iter().map(|x| x * norm_factor).collect()
            },
            sample_rate: s_rev.sample_rate,
        }
    };
    Ok(Mixture {
        mixed: apply(mixed),
        speech: apply(s_rev.samples.clone()),
        noise: apply(noise_scaled),
        scale,
        norm_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn alternating(len: usize, amp: f64) -> Waveform {
        w((0..len).map(|i| if i % 2 == 0 { amp } else { -amp }).collect())
    }

    #[test]
    fn equal_rms_zero_db_gives_unit_scale() {
        let m = mix_at_snr(&alternating(100, 0.3), &w(vec![0.3; 100]), 0.0).unwrap();
        assert!((m.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_rms_twenty_db_gives_tenth() {
        let m = mix_at_snr(&alternating(100, 0.3), &w(vec![-0.3; 100]), 20.0).unwrap();
        assert!((m.scale - 0.1).abs() < 1e-12);
    }

    #[test]
    fn measured_snr_matches() {
        let s = w((0..500).map(|i| (i as f64 * 0.1).sin() * 0.4).collect());
        let n = w((0..170).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect());
        for snr in [-5.0, 0.0, 7.0, 19.0, 40.0] {
            let m = mix_at_snr(&s, &n, snr).unwrap();
            let measured = 20.0 * (m.speech.rms() / m.noise.rms()).log10();
            assert!((measured - snr).abs() < 1e-9);
            assert_eq!(m.mixed.len(), s.len());
            for i in 0..s.len() {
                let sum = m.speech.samples[i] + m.noise.samples[i];
                assert!((m.mixed.samples[i] - sum).abs() <= 1e-15);
                if m.norm_factor == 1.0 {
                    assert_eq!(m.mixed.samples[i], sum);
                }
            }
        }
    }

    #[test]
    fn high_snr_limit_recovers_speech() {
        let s = alternating(64, 0.5);
        let m = mix_at_snr(&s, &w(vec![0.2; 64]), 300.0).unwrap();
        assert!(m.scale < 1e-14);
        for (a, b) in m.mixed.samples.iter().zip(&s.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_normalizes_jointly() {
        let s = alternating(100, 0.9);
        let n = alternating(100, 0.9);
        let m = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!((m.mixed.peak() - 0.95).abs() < 1e-12);
        assert!((m.norm_factor - 0.95 / 1.8).abs() < 1e-12);
        let snr = 20.0 * (m.speech.rms() / m.noise.rms()).log10();
        assert!(snr.abs() < 1e-9);
    }

    #[test]
    fn silent_inputs_rejected() {
        assert!(mix_at_snr(&w(vec![0.0; 10]), &w(vec![0.1; 10]), 0.0).is_err());
        assert!(mix_at_snr(&w(vec![0.1; 10]), &w(vec![0.0; 10]), 0.0).is_err());
    }

    #[test]
    fn noise_tiled_and_cropped() {
        let n = w(vec![1.0, 2.0, 3.0]);
        assert_eq!(fit_length(&n, 7).samples, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        assert_eq!(fit_length(&n, 2).samples, vec![1.0, 2.0]);
    }
}
