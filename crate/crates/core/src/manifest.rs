//! Per-utterance JSONL manifest tying together every file variant of an
//! utterance (clean, noise, RIRs, mixture, enhanced versions).
//!
//! In memory all paths are absolute; on disk they are stored relative to the
//! manifest's directory so corpora can be moved as a unit.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEY_CLEAN: &str = "clean";
pub const KEY_NOISE: &str = "noise";
pub const KEY_RIR_SPEECH: &str = "rir_speech";
pub const KEY_RIR_NOISE: &str = "rir_noise";
pub const KEY_MIXED: &str = "mixed";
/// Reverberant speech exactly as it enters the mixture.
pub const KEY_SPEECH_REV: &str = "speech_rev";
/// Scaled reverberant noise exactly as it enters the mixture.
pub const KEY_NOISE_REV: &str = "noise_rev";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub snr_db: f64,
    /// T60 of the speech RIR, seconds.
    pub t60: f64,
    pub noise_t60: f64,
    pub speech_rir_seed: u64,
    pub noise_rir_seed: u64,
    /// Seed of the utterance content; other speakers rendered with the same
    /// seed say "the same thing".
    pub content_seed: u64,
    /// Speech duration, excluding the lead-in.
    pub duration_s: f64,
    /// Noise-only context prepended to the utterance.
    pub lead_in_s: f64,
    /// Multiplier applied to the reverberant noise to reach `snr_db`.
    pub noise_scale: f64,
    /// Joint peak normalization applied after mixing (1.0 when none).
    pub norm_factor: f64,
    /// Reference signals between which `snr_db` is defined.
    pub snr_reference: String,
    pub paths: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl ManifestEntry {
    pub fn path(&self, key: &str) -> Result<&Path> {
        self.paths.get(key).map(PathBuf::as_path).ok_or_else(|| {
            Error::Manifest(format!("utterance {} has no path field '{key}'", self.utt_id))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let root = absolute(path)?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            for p in entry.paths.values_mut() {
                *p = normalize(&root.join(&*p));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let path = absolute(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        std::fs::create_dir_all(&root)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for entry in &self.entries {
            let mut e = entry.clone();
            for p in e.paths.values_mut() {
                let abs = absolute(p)?;
                *p = pathdiff::diff_paths(&abs, &root).unwrap_or(abs);
            }
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Resolves `.` and `..` components without touching the filesystem.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push(c);
                }
            }
            other => out.push(other),
        }
    }
    out
}
