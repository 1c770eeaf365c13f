use std::collections::HashSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use revoicer_core::corpus::CorpusConfig;
use revoicer_core::enhance::{chain_key, parse_chain, Stage, WpeConfig};
use revoicer_core::manifest::{KEY_CLEAN, KEY_MIXED};
use revoicer_core::metrics::Metric;
use revoicer_vc::convert::RenderOptions;
use revoicer_vc::model::FeatureConfig;
use revoicer_vc::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// One row of the method matrix: which corpus signal to start from and the
/// enhancement chain applied to it before training and conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    /// `clean` or `mixed`.
    pub input: String,
    /// Stage list as accepted by `enhance --chain`; empty for none.
    #[serde(default)]
    pub chain: String,
}

impl ConditionSpec {
    pub fn new(name: &str, input: &str, chain: &str) -> Self {
        Self {
            name: name.into(),
            input: input.into(),
            chain: chain.into(),
        }
    }

    pub fn stages(&self, wpe: WpeConfig) -> Result<Vec<Stage>> {
        parse_chain(&self.chain, wpe).with_context(|| format!("condition {}", self.name))
    }

    /// Manifest path key holding this condition's audio.
    pub fn key(&self, wpe: WpeConfig) -> Result<String> {
        let stages = self.stages(wpe)?;
        Ok(if stages.is_empty() {
            self.input.clone()
        } else {
            chain_key(&self.input, &stages)
        })
    }
}

pub fn default_conditions() -> Vec<ConditionSpec> {
    vec![
        ConditionSpec::new("C", KEY_CLEAN, ""),
        ConditionSpec::new("NR", KEY_MIXED, ""),
        ConditionSpec::new("NR-dn", KEY_MIXED, "dn"),
        ConditionSpec::new("NR-dr", KEY_MIXED, "dr"),
        ConditionSpec::new("NR-dn-dr", KEY_MIXED, "dn,dr"),
        ConditionSpec::new("NR-dr-dn", KEY_MIXED, "dr,dn"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; overrides the corpus and training seeds.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub conditions: Vec<ConditionSpec>,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub wpe: WpeConfig,
    /// Enhancement metrics computed against the clean signals.
    pub metrics: Vec<String>,
    pub render: RenderOptions,
    /// Conversion target speakers; empty means every speaker.
    pub targets: Vec<String>,
    /// Output directory when none is given on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            conditions: default_conditions(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            wpe: WpeConfig::default(),
            metrics: ["si_sdr", "sd_sdr", "stoi", "sar"].map(String::from).to_vec(),
            render: RenderOptions::default(),
            targets: vec![],
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(revoicer_core::Error::MissingFile(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// The configuration actually run: master seed pushed into the corpus
    /// and training sections, output directory dropped.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = self.seed;
        c.train.seed = self.seed;
        c.out_dir = None;
        c
    }

    pub fn metric_list(&self) -> Result<Vec<Metric>> {
        Ok(Metric::parse_list(&self.metrics.join(","))?)
    }

    pub fn target_speakers(&self) -> Vec<String> {
        if self.targets.is_empty() {
            self.corpus.speakers.iter().map(|s| s.id.clone()).collect()
        } else {
            self.targets.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.wpe.validate()?;
        self.metric_list()?;
        if self.conditions.is_empty() {
            bail!("no conditions configured");
        }
        let mut names = HashSet::new();
        for c in &self.conditions {
            if c.name.is_empty() || c.name.contains(['/', '\\']) || c.name.starts_with('.') {
                bail!("condition name '{}' is not usable as a directory name", c.name);
            }
            if !names.insert(&c.name) {
                bail!("duplicate condition name '{}'", c.name);
            }
            if c.input != KEY_CLEAN && c.input != KEY_MIXED {
                bail!("condition {}: input must be '{KEY_CLEAN}' or '{KEY_MIXED}', got '{}'", c.name, c.input);
            }
            c.stages(self.wpe)?;
        }
        for t in &self.targets {
            if self.corpus.speaker(t).is_none() {
                bail!("conversion target '{t}' is not a corpus speaker");
            }
        }
        if self.features.sample_rate != self.corpus.sample_rate {
            bail!(
                "feature sample rate {} differs from the corpus rate {}",
                self.features.sample_rate,
                self.corpus.sample_rate
            );
        }
        if self.train.model.n_mels != self.features.mel.n_mels {
            bail!(
                "model expects {} mel bands but features have {}",
                self.train.model.n_mels,
                self.features.mel.n_mels
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_have_six_conditions() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let names: Vec<&str> = c.conditions.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["C", "NR", "NR-dn", "NR-dr", "NR-dn-dr", "NR-dr-dn"]);
        let keys: Vec<String> = c.conditions.iter().map(|x| x.key(c.wpe).unwrap()).collect();
        assert_eq!(keys, ["clean", "mixed", "dn", "dr", "dn-dr", "dr-dn"]);
    }

    #[test]
    fn duplicate_names_and_bad_chains_rejected() {
        let mut c = ExperimentConfig::default();
        c.conditions.push(ConditionSpec::new("NR", "mixed", "dn"));
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.conditions[2].chain = "dn,xx".into();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.targets = vec!["nobody".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(c.resolved().corpus.seed, 3);
        assert_eq!(c.resolved().train.seed, 3);
    }
}
