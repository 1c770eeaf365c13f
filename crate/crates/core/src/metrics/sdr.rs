use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Reported ratios are clamped to ±this many dB.
pub const DB_CAP: f64 = 100.0;
const ZERO_ENERGY: f64 = 1e-20;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den < ZERO_ENERGY {
        return DB_CAP;
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn check_pair(est: &Waveform, reference: &Waveform) -> Result<()> {
    est.check_same_rate(reference)?;
    est.check_same_len(reference)?;
    if reference.energy() == 0.0 {
        return Err(Error::Silent("reference signal".into()));
    }
    Ok(())
}

fn projection_scale(est: &Waveform, reference: &Waveform) -> f64 {
    dot(&est.samples, &reference.samples) / reference.energy()
}

/// Scale-invariant signal-to-distortion ratio, dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let alpha = projection_scale(est, reference);
    let err: f64 = est
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    Ok(ratio_db(alpha * alpha * reference.energy(), err))
}

/// Scale-dependent signal-to-distortion ratio, dB: the projected target
/// energy over the error against the unscaled reference.
pub fn sd_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let alpha = projection_scale(est, reference);
    let err: f64 = est
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| (e - r).powi(2))
        .sum();
    Ok(ratio_db(alpha * alpha * reference.energy(), err))
}

/// Signal-to-artifacts ratio with a zero-lag projection of `est` onto
/// `span{s_ref, n_ref}`.
pub fn sar_zero_lag(est: &Waveform, s_ref: &Waveform, n_ref: &Waveform) -> Result<f64> {
    est.check_same_rate(s_ref)?;
    est.check_same_rate(n_ref)?;
    est.check_same_len(s_ref)?;
    est.check_same_len(n_ref)?;
    let (es, en) = (s_ref.energy(), n_ref.energy());
    if es == 0.0 || en == 0.0 {
        return Err(Error::DegenerateSpan("a reference is silent".into()));
    }
    // Gram-Schmidt basis of the reference span
    let q1: Vec<f64> = s_ref.samples.iter().map(|v| v / es.sqrt()).collect();
    let c = dot(&n_ref.samples, &q1);
    let mut q2: Vec<f64> = n_ref.samples.iter().zip(&q1).map(|(n, q)| n - c * q).collect();
    let r = dot(&q2, &q2).sqrt();
    if r <= 1e-10 * en.sqrt() {
        return Err(Error::DegenerateSpan("speech and noise references are collinear".into()));
    }
    q2.iter_mut().for_each(|v| *v /= r);
    let (a, b) = (dot(&est.samples, &q1), dot(&est.samples, &q2));
    let residual: f64 = est
        .samples
        .iter()
        .zip(q1.iter().zip(&q2))
        .map(|(e, (u, v))| (e - a * u - b * v).powi(2))
        .sum();
    Ok(ratio_db(a * a + b * b, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Waveform {
        w((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identical_and_scaled_hit_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random(1000, &mut rng);
        assert_eq!(si_sdr(&r, &r).unwrap(), DB_CAP);
        assert_eq!(si_sdr(&r.scaled(2.0), &r).unwrap(), DB_CAP);
        assert_eq!(sd_sdr(&r, &r).unwrap(), DB_CAP);
    }

    #[test]
    fn orthogonal_error_at_one_percent_is_twenty_db() {
        let r = w((0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        // constant vector is orthogonal to the alternating one
        let e = 0.1;
        let est = w(r.samples.iter().map(|v| v + e).collect());
        assert!((si_sdr(&est, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn scale_dependent_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(500, &mut rng);
        assert!((sd_sdr(&r.scaled(2.0), &r).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(sd_sdr(&r.scaled(0.5), &r).unwrap().abs() < 1e-9);
    }

    #[test]
    fn silent_reference_rejected() {
        let r = w(vec![0.0; 10]);
        assert!(matches!(si_sdr(&w(vec![1.0; 10]), &r), Err(Error::Silent(_))));
        assert!(sd_sdr(&w(vec![1.0; 9]), &w(vec![1.0; 10])).is_err());
    }

    #[test]
    fn sar_in_span_and_out_of_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random(800, &mut rng);
        let n = random(800, &mut rng);
        let est = w(s.samples.iter().zip(&n.samples).map(|(a, b)| 0.7 * a - 1.3 * b).collect());
        assert!(sar_zero_lag(&est, &s, &n).unwrap() > 90.0);

        let s = w((0..4).map(|i| [1.0, 0.0, 0.0, 0.0][i]).collect());
        let n = w((0..4).map(|i| [0.0, 1.0, 0.0, 0.0][i]).collect());
        let e = w(vec![0.0, 0.0, 1.0, 0.5]);
        assert_eq!(sar_zero_lag(&e, &s, &n).unwrap(), -DB_CAP);
        assert!(matches!(sar_zero_lag(&e, &s, &s.scaled(3.0)), Err(Error::DegenerateSpan(_))));
    }

    #[test]
    fn sar_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (s, n, e) = (random(300, &mut rng), random(300, &mut rng), random(300, &mut rng));
            let g = Matrix2::new(
                dot(&s.samples, &s.samples),
                dot(&s.samples, &n.samples),
                dot(&n.samples, &s.samples),
                dot(&n.samples, &n.samples),
            );
            let rhs = Vector2::new(dot(&s.samples, &e.samples), dot(&n.samples, &e.samples));
            let c = g.lu().solve(&rhs).unwrap();
            let proj: Vec<f64> =
                (0..300).map(|i| c[0] * s.samples[i] + c[1] * n.samples[i]).collect();
            let num = dot(&proj, &proj);
            let den: f64 = (0..300).map(|i| (e.samples[i] - proj[i]).powi(2)).sum();
            let oracle = 10.0 * (num / den).log10();
            assert!((sar_zero_lag(&e, &s, &n).unwrap() - oracle).abs() < 1e-9);
        }
    }
}
