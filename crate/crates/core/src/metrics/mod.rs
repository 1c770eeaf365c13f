//! Objective quality measures and per-condition report tables.

mod mcd;
mod sdr;
mod stoi;

pub use mcd::{dtw_align, mcd, mcd_waveforms, waveform_cepstra, DtwPath, MCD_COEFFS, MCD_FACTOR};
pub use sdr::{sar_zero_lag, sd_sdr, si_sdr, DB_CAP};
pub use stoi::stoi;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, KEY_NOISE_REV};
use crate::wav::read_wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SiSdr,
    SdSdr,
    Stoi,
    Sar,
    Mcd,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::SiSdr, Metric::SdSdr, Metric::Stoi, Metric::Sar, Metric::Mcd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::SiSdr => "si_sdr",
            Metric::SdSdr => "sd_sdr",
            Metric::Stoi => "stoi",
            Metric::Sar => "sar",
            Metric::Mcd => "mcd",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }

    /// Evaluates the metric. `noise_ref` is needed only for SAR.
    pub fn compute(self, est: &Waveform, reference: &Waveform, noise_ref: Option<&Waveform>) -> Result<f64> {
        match self {
            Metric::SiSdr => si_sdr(est, reference),
            Metric::SdSdr => sd_sdr(est, reference),
            Metric::Stoi => stoi(est, reference),
            Metric::Sar => {
                let n = noise_ref.ok_or_else(|| {
                    Error::InvalidConfig("sar needs a noise reference".into())
                })?;
                sar_zero_lag(est, reference, n)
            }
            Metric::Mcd => mcd_waveforms(est, reference),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric '{s}'")))
    }
}

/// Values of one metric under one condition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub values: BTreeMap<String, f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Cell {
    fn refresh(&mut self) {
        let n = self.values.len() as f64;
        self.mean = self.values.values().sum::<f64>() / n;
        self.std = (self.values.values().map(|v| (v - self.mean).powi(2)).sum::<f64>() / n).sqrt();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub condition: String,
    pub metric: String,
    pub utt_id: String,
    pub error: String,
}

/// condition → metric → cell. Non-finite values never enter a cell; they are
/// listed under `failures` instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: BTreeMap<String, BTreeMap<String, Cell>>,
    pub failures: Vec<Failure>,
}

impl MetricReport {
    pub fn record(&mut self, condition: &str, metric: &str, utt_id: &str, value: Result<f64>) {
        match value {
            Ok(v) if v.is_finite() => {
                let cell = self
                    .cells
                    .entry(condition.to_string())
                    .or_default()
                    .entry(metric.to_string())
                    .or_default();
                cell.values.insert(utt_id.to_string(), v);
                cell.refresh();
            }
            other => self.failures.push(Failure {
                condition: condition.into(),
                metric: metric.into(),
                utt_id: utt_id.into(),
                error: match other {
                    Ok(v) => format!("non-finite value {v}"),
                    Err(e) => e.to_string(),
                },
            }),
        }
    }

    pub fn cell(&self, condition: &str, metric: &str) -> Option<&Cell> {
        self.cells.get(condition)?.get(metric)
    }

    pub fn merge(&mut self, other: MetricReport) {
        for (cond, metrics) in other.cells {
            for (metric, cell) in metrics {
                for (utt, v) in cell.values {
                    self.record(&cond, &metric, &utt, Ok(v));
                }
            }
        }
        self.failures.extend(other.failures);
        self.failures.sort();
    }
}

/// Scores the `est_key` files of `est` against the `ref_key` files of
/// `reference`, pairing entries by utterance id. The SAR noise reference is
/// the reference entry's reverberant noise component.
pub fn evaluate_manifests(
    est: &Manifest,
    est_key: &str,
    reference: &Manifest,
    ref_key: &str,
    metrics: &[Metric],
    condition: &str,
) -> Result<MetricReport> {
    let results: Vec<(String, Vec<(Metric, Result<f64>)>)> = est
        .entries
        .par_iter()
        .map(|e| -> Result<_> {
            let r = reference.get(&e.utt_id).ok_or_else(|| {
                Error::Manifest(format!("utterance {} missing from reference manifest", e.utt_id))
            })?;
            let y = read_wav(e.path(est_key)?)?;
            let x = read_wav(r.path(ref_key)?)?;
            let n = if metrics.contains(&Metric::Sar) {
                Some(read_wav(r.path(KEY_NOISE_REV)?)?)
            } else {
                None
            };
            let vals = metrics.iter().map(|&m| (m, m.compute(&y, &x, n.as_ref()))).collect();
            Ok((e.utt_id.clone(), vals))
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::default();
    for (utt, vals) in results {
        for (m, v) in vals {
            report.record(condition, m.name(), &utt, v);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_round_trip() {
        let all = Metric::parse_list("si_sdr,sd_sdr,stoi,sar,mcd").unwrap();
        assert_eq!(all, Metric::ALL.to_vec());
        assert!(Metric::parse_list("pesq").is_err());
    }

    #[test]
    fn report_cells_and_failures() {
        let mut r = MetricReport::default();
        r.record("NR", "si_sdr", "a", Ok(1.0));
        r.record("NR", "si_sdr", "b", Ok(3.0));
        r.record("NR", "si_sdr", "c", Ok(f64::NAN));
        r.record("NR", "stoi", "a", Err(Error::Silent("x".into())));
        let c = r.cell("NR", "si_sdr").unwrap();
        assert_eq!(c.mean, 2.0);
        assert_eq!(c.std, 1.0);
        assert_eq!(r.failures.len(), 2);
        assert!(r.cell("NR", "stoi").is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("null"));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
