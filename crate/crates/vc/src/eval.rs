//! Nearest-centroid speaker classification over log-mel frames.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames whose mean log-mel lies more than this below the utterance's
/// loudest frame are treated as silence (natural-log units, about 40 dB).
pub const ACTIVE_RANGE: f64 = 9.21;

/// Indices of the non-silent frames of a `T × M` log-mel matrix.
pub fn active_frames(mel: &Array2<f64>) -> Vec<usize> {
    let level: Vec<f64> = mel.rows().into_iter().map(|r| r.mean().unwrap_or(f64::NEG_INFINITY)).collect();
    let top = level.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..level.len()).filter(|&t| level[t] >= top - ACTIVE_RANGE).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidClassifier {
    pub speakers: Vec<String>,
    /// One row per speaker.
    pub centroids: Vec<Vec<f64>>,
}

impl CentroidClassifier {
    /// Fits one centroid per speaker from the active frames of its utterances.
    pub fn fit<'a>(data: impl IntoIterator<Item = (&'a str, &'a Array2<f64>)>) -> Result<Self> {
        let mut speakers: Vec<String> = vec![];
        let mut sums: Vec<Vec<f64>> = vec![];
        let mut counts: Vec<usize> = vec![];
        for (spk, mel) in data {
            let i = match speakers.iter().position(|s| s == spk) {
                Some(i) => i,
                None => {
                    speakers.push(spk.to_string());
                    sums.push(vec![0.0; mel.ncols()]);
                    counts.push(0);
                    speakers.len() - 1
                }
            };
            if mel.ncols() != sums[i].len() {
                return Err(Error::Data(format!("speaker {spk}: inconsistent mel width {}", mel.ncols())));
            }
            for t in active_frames(mel) {
                for (s, v) in sums[i].iter_mut().zip(mel.row(t)) {
                    *s += v;
                }
                counts[i] += 1;
            }
        }
        if speakers.is_empty() {
            return Err(Error::Data("no utterances to fit the classifier".into()));
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
            .collect();
        Ok(Self { speakers, centroids })
    }

    pub fn classify(&self, frame: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// `(hits, active frames)` of `mel` classified as `target`.
    pub fn score(&self, mel: &Array2<f64>, target: &str) -> Result<(usize, usize)> {
        let want = self
            .speakers
            .iter()
            .position(|s| s == target)
            .ok_or_else(|| Error::UnknownSpeaker(target.to_string()))?;
        let active = active_frames(mel);
        let hits = active.iter().filter(|&&t| self.classify(&mel.row(t).to_vec()) == want).count();
        Ok((hits, active.len()))
    }
}
