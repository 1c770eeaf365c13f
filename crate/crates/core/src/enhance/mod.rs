//! Enhancement stages (denoising, dereverberation, externally processed
//! audio) and their application to a whole manifest.

mod denoise;
mod wpe;

pub use denoise::{
    denoise, denoise_spectrogram, estimate_noise_psd, spectral_gains, DenoiseConfig,
    NoiseEstimator,
};
pub use wpe::{solve_prediction_filter, wpe_dereverb, wpe_waveform, WpeConfig};

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dsp::{StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, KEY_MIXED};
use crate::wav::{quantize_pcm16, read_wav, write_wav};

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Denoise(DenoiseConfig),
    Wpe(WpeConfig),
    /// Pre-enhanced WAVs named `<utt_id>.wav` in the given directory.
    External(PathBuf),
}

impl Stage {
    pub fn key(&self) -> &'static str {
        match self {
            Stage::Denoise(_) => "dn",
            Stage::Wpe(_) => "dr",
            Stage::External(_) => "ext",
        }
    }

    /// Parses `dn`, `dr` (or `dr=wpe`), and `ext:<dir>`.
    pub fn parse(s: &str, wpe: WpeConfig) -> Result<Self> {
        let s = s.trim();
        match s {
            "dn" | "dn=denoise" => Ok(Stage::Denoise(DenoiseConfig::default())),
            "dr" | "dr=wpe" => Ok(Stage::Wpe(wpe)),
            _ => match s.strip_prefix("ext:") {
                Some(dir) if !dir.is_empty() => Ok(Stage::External(PathBuf::from(dir))),
                _ => Err(Error::InvalidConfig(format!("unknown enhancement stage '{s}'"))),
            },
        }
    }

    /// Processes one utterance. `utt_id` locates the file of external stages.
    pub fn apply(&self, w: &Waveform, utt_id: &str, stft_config: &StftConfig) -> Result<Waveform> {
        match self {
            Stage::Denoise(c) => denoise(w, c, stft_config),
            Stage::Wpe(c) => wpe_waveform(w, c, stft_config),
            Stage::External(dir) => {
                let y = read_wav(&external_path(dir, utt_id))?;
                if y.sample_rate != w.sample_rate {
                    return Err(Error::RateMismatch(y.sample_rate, w.sample_rate));
                }
                if y.len() != w.len() {
                    return Err(Error::LengthMismatch(y.len(), w.len()));
                }
                Ok(y)
            }
        }
    }
}

fn external_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.wav"))
}

pub fn parse_chain(s: &str, wpe: WpeConfig) -> Result<Vec<Stage>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(vec![]);
    }
    let chain = s.split(',').map(|p| Stage::parse(p, wpe)).collect::<Result<Vec<_>>>()?;
    if chain.len() > 2 {
        return Err(Error::InvalidConfig(format!(
            "chains hold at most two stages, got {}",
            chain.len()
        )));
    }
    Ok(chain)
}

/// Path key naming the output of `chain` applied to `input_key`, e.g.
/// `dn-dr` for the mixture or `clean-dn` for another input.
pub fn chain_key(input_key: &str, chain: &[Stage]) -> String {
    let stages: Vec<&str> = chain.iter().map(Stage::key).collect();
    let joined = stages.join("-");
    if input_key == KEY_MIXED {
        joined
    } else {
        format!("{input_key}-{joined}")
    }
}

/// Applies `chain` in order to the `input_key` file of every entry. Each
/// stage's output is written as PCM16 to `out_dir/<key>/<utt_id>.wav` and
/// recorded under that key, so every prefix of the chain is also available.
/// The next stage reads the quantized result, which makes a chained run
/// identical to running the stages one after another through files.
pub fn apply_stage_chain(
    manifest: &Manifest,
    input_key: &str,
    chain: &[Stage],
    out_dir: &Path,
    stft_config: &StftConfig,
) -> Result<Manifest> {
    if chain.len() > 2 {
        return Err(Error::InvalidConfig("chains hold at most two stages".into()));
    }
    let mut out = manifest.clone();
    if chain.is_empty() {
        for e in &mut out.entries {
            e.provenance.push("enhance:none".into());
        }
        return Ok(out);
    }
    for stage in chain {
        if let Stage::External(dir) = stage {
            let missing: Vec<String> = manifest
                .entries
                .iter()
                .filter(|e| !external_path(dir, &e.utt_id).is_file())
                .map(|e| e.utt_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::ExternalCoverage {
                    dir: dir.clone(),
                    missing,
                });
            }
        }
    }
    let keys: Vec<String> = (1..=chain.len()).map(|n| chain_key(input_key, &chain[..n])).collect();
    let out_dir = std::path::absolute(out_dir)?;

    let written: Vec<Vec<PathBuf>> = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<Vec<PathBuf>> {
            let mut w = read_wav(e.path(input_key)?)?;
            let mut paths = Vec::with_capacity(chain.len());
            for (stage, key) in chain.iter().zip(&keys) {
                w = quantize_pcm16(&stage.apply(&w, &e.utt_id, stft_config)?);
                let p = out_dir.join(key).join(format!("{}.wav", e.utt_id));
                write_wav(&p, &w)?;
                paths.push(p);
            }
            Ok(paths)
        })
        .collect::<Result<_>>()?;

    let final_key = keys.last().expect("chain is non-empty");
    for (e, paths) in out.entries.iter_mut().zip(written) {
        for (key, p) in keys.iter().zip(paths) {
            e.paths.insert(key.clone(), p);
        }
        e.provenance.push(format!("enhance:{final_key}"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_follow_chain_order() {
        let w = WpeConfig::default();
        let a = parse_chain("dn,dr", w).unwrap();
        let b = parse_chain("dr,dn", w).unwrap();
        assert_eq!(chain_key(KEY_MIXED, &a), "dn-dr");
        assert_eq!(chain_key(KEY_MIXED, &b), "dr-dn");
        assert_eq!(chain_key("clean", &a[..1]), "clean-dn");
        assert!(parse_chain("", w).unwrap().is_empty());
        assert!(parse_chain("dn,dr,dn", w).is_err());
        assert!(parse_chain("xx", w).is_err());
        assert_eq!(
            parse_chain("ext:/tmp/x", w).unwrap(),
            vec![Stage::External(PathBuf::from("/tmp/x"))]
        );
    }
}
