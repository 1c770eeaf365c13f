use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the interpolation kernel on each side of its center.
const KERNEL_ZEROS: f64 = 16.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let a = std::f64::consts::PI * (x + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

/// Windowed-sinc resampling to `target_hz`.
///
/// Kernel taps are renormalized to unit sum at every output position, so
/// constant signals pass through exactly (including at the edges).
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::InvalidConfig("target sample rate must be positive".into()));
    }
    if target_hz == w.sample_rate || w.is_empty() {
        return Ok(Waveform {
            samples: w.samples.clone(),
            sample_rate: target_hz,
        });
    }
    let src = w.sample_rate as u64;
    let dst = target_hz as u64;
    let cutoff = ROLLOFF * (dst as f64 / src as f64).min(1.0);
    let half_width = (KERNEL_ZEROS / cutoff).ceil() as i64;
    let out_len = ((w.len() as u64 * dst) as f64 / src as f64).round() as usize;
    let x = &w.samples;
    let n_in = x.len() as i64;

    let samples = (0..out_len as u64)
        .map(|n| {
            let base = (n * src / dst) as i64;
            let frac = (n * src % dst) as f64 / dst as f64;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for k in (base - half_width + 1)..=(base + half_width) {
                if k < 0 || k >= n_in {
                    continue;
                }
                let d = (base - k) as f64 + frac;
                let u = d / half_width as f64;
                if u.abs() >= 1.0 {
                    continue;
                }
                let weight = cutoff * sinc(cutoff * d) * blackman(u);
                acc += weight * x[k as usize];
                wsum += weight;
            }
            if wsum.abs() > 1e-12 {
                acc / wsum
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_hz,
    })
}
