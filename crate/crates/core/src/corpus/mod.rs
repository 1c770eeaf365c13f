//! Synthetic noisy-reverberant corpus: `y = s * h_s + scale · (n * h_n)`.
//!
//! Training and evaluation draw their RIRs from disjoint seed pools, and
//! speech and noise of one utterance always use different RIRs. Every random
//! choice derives from `(master seed, stable id)`, so utterances can be
//! rendered in any order or in parallel without changing the output.

mod mix;
mod noise;
mod rir;
mod speech;

pub use mix::{fit_length, mix_at_snr, Mixture};
pub use noise::gen_noise;
pub use rir::{convolve_rir, gen_rir, reverberate, RirSpec};
pub use speech::{default_speakers, synth_utterance, SpeakerSpec};

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::manifest::{
    Manifest, ManifestEntry, Split, KEY_CLEAN, KEY_MIXED, KEY_NOISE, KEY_NOISE_REV,
    KEY_RIR_NOISE, KEY_RIR_SPEECH, KEY_SPEECH_REV,
};
use crate::seed::derive_seed;
use crate::wav::write_wav;

pub const TRAIN_SNR_LEVELS: [f64; 8] = [6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0];
pub const EVAL_SNR_LEVELS: [f64; 4] = [7.0, 11.0, 15.0, 19.0];
pub const SNR_REFERENCE: &str = "reverberant-speech/reverberant-noise, whole-utterance rms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub speakers: Vec<SpeakerSpec>,
    pub train_utts_per_speaker: usize,
    pub eval_utts_per_speaker: usize,
    pub train_snr_db: Vec<f64>,
    pub eval_snr_db: Vec<f64>,
    /// `[lo, hi]` T60 range in seconds per split.
    pub train_t60: [f64; 2],
    pub eval_t60: [f64; 2],
    pub drr_db: [f64; 2],
    pub direct_delay: usize,
    /// RIRs in each split's pool.
    pub rirs_per_split: usize,
    pub duration_s: [f64; 2],
    /// Noise-only context before the speech starts.
    pub lead_in_s: f64,
    /// Length of each generated noise clip before tiling/cropping.
    pub noise_clip_s: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            speakers: default_speakers(4),
            train_utts_per_speaker: 10,
            eval_utts_per_speaker: 4,
            train_snr_db: TRAIN_SNR_LEVELS.to_vec(),
            eval_snr_db: EVAL_SNR_LEVELS.to_vec(),
            train_t60: [0.2, 0.6],
            eval_t60: [0.2, 0.6],
            drr_db: [-3.0, 3.0],
            direct_delay: 16,
            rirs_per_split: 16,
            duration_s: [1.5, 2.5],
            lead_in_s: 0.2,
            noise_clip_s: 3.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if self.speakers.is_empty() {
            return Err(Error::InvalidConfig("no speakers configured".into()));
        }
        let mut ids = HashSet::new();
        for spk in &self.speakers {
            spk.validate(self.sample_rate)?;
            if !ids.insert(&spk.id) {
                return Err(Error::InvalidConfig(format!("duplicate speaker id {}", spk.id)));
            }
        }
        if self.train_snr_db.is_empty() || self.eval_snr_db.is_empty() {
            return Err(Error::InvalidConfig("snr level sets must be non-empty".into()));
        }
        for [lo, hi] in [self.train_t60, self.eval_t60] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidConfig(format!("t60 range [{lo}, {hi}] invalid")));
            }
        }
        if self.drr_db[0] > self.drr_db[1] {
            return Err(Error::InvalidConfig("drr range reversed".into()));
        }
        if self.rirs_per_split < 2 {
            return Err(Error::InvalidConfig(
                "need at least two RIRs per split (speech and noise must differ)".into(),
            ));
        }
        let [dlo, dhi] = self.duration_s;
        if !(dlo >= 1.0 && dlo <= dhi && dhi <= 10.0) {
            return Err(Error::InvalidConfig(format!("duration range [{dlo}, {dhi}] invalid")));
        }
        if !(self.lead_in_s >= 0.0 && self.noise_clip_s > 0.0) {
            return Err(Error::InvalidConfig("lead-in and noise clip lengths invalid".into()));
        }
        Ok(())
    }

    fn t60_range(&self, split: Split) -> [f64; 2] {
        match split {
            Split::Train => self.train_t60,
            Split::Eval => self.eval_t60,
        }
    }

    fn snr_levels(&self, split: Split) -> &[f64] {
        match split {
            Split::Train => &self.train_snr_db,
            Split::Eval => &self.eval_snr_db,
        }
    }

    fn utts_per_speaker(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_utts_per_speaker,
            Split::Eval => self.eval_utts_per_speaker,
        }
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerSpec> {
        self.speakers.iter().find(|s| s.id == id)
    }

    /// RIR pool of one split; pools of different splits never share a seed.
    pub fn rir_pool(&self, split: Split) -> Vec<RirSpec> {
        (0..self.rirs_per_split)
            .map(|i| {
                let seed = derive_seed(self.seed, &["rir", split.as_str(), &i.to_string()]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let [lo, hi] = self.t60_range(split);
                let t60 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let [dlo, dhi] = self.drr_db;
                let drr_db = if dhi > dlo { rng.gen_range(dlo..dhi) } else { dlo };
                RirSpec {
                    t60,
                    direct_delay: self.direct_delay,
                    drr_db,
                    length: RirSpec::default_length(t60, self.direct_delay, self.sample_rate),
                    seed,
                }
            })
            .collect()
    }

    /// Seed of the utterance content. Training content is unique per speaker
    /// (nonparallel); evaluation content is shared across speakers, so every
    /// speaker's eval utterance `i` says the same thing.
    pub fn content_seed(&self, speaker: &str, split: Split, index: usize) -> u64 {
        match split {
            Split::Train => derive_seed(self.seed, &["content", "train", speaker, &index.to_string()]),
            Split::Eval => derive_seed(self.seed, &["content", "eval", &index.to_string()]),
        }
    }

    pub fn content_duration(&self, content_seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(content_seed, &["duration"]));
        let [lo, hi] = self.duration_s;
        let d = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        // whole milliseconds keep sample counts exact
        (d * 1000.0).round() / 1000.0
    }
}

pub fn utt_id(speaker: &str, split: Split, index: usize) -> String {
    format!("{speaker}_{}_{index:03}", split.as_str())
}

/// Everything decided about one utterance before any audio is rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePlan {
    pub utt_id: String,
    pub speaker: SpeakerSpec,
    pub split: Split,
    pub index: usize,
    pub content_seed: u64,
    pub duration_s: f64,
    pub snr_db: f64,
    pub speech_rir: RirSpec,
    pub noise_rir: RirSpec,
    pub speech_rir_index: usize,
    pub noise_rir_index: usize,
    pub noise_seed: u64,
}

pub fn plan_corpus(config: &CorpusConfig) -> Result<Vec<UtterancePlan>> {
    config.validate()?;
    let train_pool = config.rir_pool(Split::Train);
    let eval_pool = config.rir_pool(Split::Eval);
    let train_seeds: HashSet<u64> = train_pool.iter().map(|r| r.seed).collect();
    if eval_pool.iter().any(|r| train_seeds.contains(&r.seed)) {
        return Err(Error::InvalidConfig("train and eval RIR seed pools intersect".into()));
    }
    let mut plans = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let pool = match split {
            Split::Train => &train_pool,
            Split::Eval => &eval_pool,
        };
        for spk in &config.speakers {
            for index in 0..config.utts_per_speaker(split) {
                let id = utt_id(&spk.id, split, index);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["utt", &id]));
                let speech_idx = rng.gen_range(0..pool.len());
                let mut noise_idx = rng.gen_range(0..pool.len() - 1);
                if noise_idx >= speech_idx {
                    noise_idx += 1;
                }
                let snr_db = *config
                    .snr_levels(split)
                    .choose(&mut rng)
                    .expect("validated non-empty");
                let content_seed = config.content_seed(&spk.id, split, index);
                plans.push(UtterancePlan {
                    utt_id: id.clone(),
                    speaker: spk.clone(),
                    split,
                    index,
                    content_seed,
                    duration_s: config.content_duration(content_seed),
                    snr_db,
                    speech_rir: pool[speech_idx].clone(),
                    noise_rir: pool[noise_idx].clone(),
                    speech_rir_index: speech_idx,
                    noise_rir_index: noise_idx,
                    noise_seed: derive_seed(config.seed, &["noise", &id]),
                });
            }
        }
    }
    Ok(plans)
}

/// All signals of one rendered utterance. `speech_rev` and `noise_rev` are
/// the pre-mixing reverberant signals; `mixture` holds what was mixed.
#[derive(Debug, Clone)]
pub struct RenderedUtterance {
    pub clean: Waveform,
    pub noise: Waveform,
    pub rir_speech: Waveform,
    pub rir_noise: Waveform,
    pub speech_rev: Waveform,
    pub noise_rev: Waveform,
    pub mixture: Mixture,
}

/// Clean speech of `content_seed` spoken by `speaker`, with the lead-in
/// silence prepended.
pub fn render_clean(
    config: &CorpusConfig,
    speaker: &SpeakerSpec,
    content_seed: u64,
) -> Result<Waveform> {
    let duration = config.content_duration(content_seed);
    let speech = synth_utterance(speaker, duration, content_seed, config.sample_rate)?;
    let lead = (config.lead_in_s * config.sample_rate as f64).round() as usize;
    let mut samples = vec![0.0; lead];
    samples.extend_from_slice(&speech.samples);
    Waveform::new(samples, config.sample_rate)
}

pub fn render_utterance(config: &CorpusConfig, plan: &UtterancePlan) -> Result<RenderedUtterance> {
    let sr = config.sample_rate;
    let clean = render_clean(config, &plan.speaker, plan.content_seed)?;
    let clip_len = (config.noise_clip_s * sr as f64).round() as usize;
    let noise = fit_length(&gen_noise(clip_len, plan.noise_seed, sr), clean.len());
    let rir_speech = gen_rir(&plan.speech_rir, sr)?;
    let rir_noise = gen_rir(&plan.noise_rir, sr)?;
    let speech_rev = reverberate(&clean, &rir_speech, plan.speech_rir.direct_delay)?;
    let noise_rev = reverberate(&noise, &rir_noise, plan.noise_rir.direct_delay)?;
    let mixture = mix_at_snr(&speech_rev, &noise_rev, plan.snr_db)?;
    Ok(RenderedUtterance {
        clean,
        noise,
        rir_speech,
        rir_noise,
        speech_rev,
        noise_rev,
        mixture,
    })
}

fn prepare_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputExists(out.to_path_buf()));
            }
            std::fs::remove_dir_all(out)?;
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "corpus_config.json";

/// Renders every planned utterance into `out`, writing clean, noise, RIR,
/// reverberant component and mixture WAVs plus `manifest.jsonl`.
pub fn build_corpus(config: &CorpusConfig, out: &Path, force: bool) -> Result<Manifest> {
    let plans = plan_corpus(config)?;
    prepare_output_dir(out, force)?;
    let out = std::path::absolute(out)?;
    std::fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;

    let rir_path = |split: Split, index: usize| -> PathBuf {
        out.join("rir").join(format!("{}_{index:02}.wav", split.as_str()))
    };
    for split in [Split::Train, Split::Eval] {
        for (i, spec) in config.rir_pool(split).iter().enumerate() {
            write_wav(&rir_path(split, i), &gen_rir(spec, config.sample_rate)?)?;
        }
    }

    let entries: Vec<ManifestEntry> = plans
        .par_iter()
        .map(|plan| -> Result<ManifestEntry> {
            let r = render_utterance(config, plan)?;
            let file = |dir: &str| out.join(dir).join(format!("{}.wav", plan.utt_id));
            let mut paths = BTreeMap::new();
            for (key, wav) in [
                (KEY_CLEAN, &r.clean),
                (KEY_NOISE, &r.noise),
                (KEY_SPEECH_REV, &r.mixture.speech),
                (KEY_NOISE_REV, &r.mixture.noise),
                (KEY_MIXED, &r.mixture.mixed),
            ] {
                let p = file(key);
                write_wav(&p, wav)?;
                paths.insert(key.to_string(), p);
            }
            paths.insert(
                KEY_RIR_SPEECH.to_string(),
                rir_path(plan.split, plan.speech_rir_index),
            );
            paths.insert(
                KEY_RIR_NOISE.to_string(),
                rir_path(plan.split, plan.noise_rir_index),
            );
            Ok(ManifestEntry {
                utt_id: plan.utt_id.clone(),
                speaker_id: plan.speaker.id.clone(),
                split: plan.split,
                snr_db: plan.snr_db,
                t60: plan.speech_rir.t60,
                noise_t60: plan.noise_rir.t60,
                speech_rir_seed: plan.speech_rir.seed,
                noise_rir_seed: plan.noise_rir.seed,
                content_seed: plan.content_seed,
                duration_s: plan.duration_s,
                lead_in_s: config.lead_in_s,
                noise_scale: r.mixture.scale,
                norm_factor: r.mixture.norm_factor,
                snr_reference: SNR_REFERENCE.to_string(),
                paths,
                provenance: vec![format!("synth-corpus:seed={}", config.seed)],
            })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest::new(entries);
    manifest.save(&out.join(MANIFEST_FILE))?;
    log::info!("wrote {} utterances to {}", manifest.len(), out.display());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            speakers: default_speakers(2),
            train_utts_per_speaker: 2,
            eval_utts_per_speaker: 1,
            duration_s: [1.0, 1.2],
            rirs_per_split: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn rir_pools_disjoint() {
        let c = CorpusConfig::default();
        let train: HashSet<u64> = c.rir_pool(Split::Train).iter().map(|r| r.seed).collect();
        assert!(c.rir_pool(Split::Eval).iter().all(|r| !train.contains(&r.seed)));
    }

    #[test]
    fn plans_use_distinct_rirs_and_configured_snrs() {
        let c = CorpusConfig::default();
        let plans = plan_corpus(&c).unwrap();
        assert_eq!(plans.len(), 4 * (10 + 4));
        for p in &plans {
            assert_ne!(p.speech_rir.seed, p.noise_rir.seed);
            assert!(c.snr_levels(p.split).contains(&p.snr_db));
        }
    }

    #[test]
    fn eval_content_is_parallel_across_speakers() {
        let c = CorpusConfig::default();
        assert_eq!(
            c.content_seed("spk0", Split::Eval, 2),
            c.content_seed("spk3", Split::Eval, 2)
        );
        assert_ne!(
            c.content_seed("spk0", Split::Train, 2),
            c.content_seed("spk3", Split::Train, 2)
        );
    }

    #[test]
    fn rendered_mixture_satisfies_mixing_model() {
        let c = small_config();
        for plan in plan_corpus(&c).unwrap() {
            let r = render_utterance(&c, &plan).unwrap();
            let m = &r.mixture;
            assert_eq!(r.clean.len(), r.speech_rev.len());
            let lead = (c.lead_in_s * 8000.0) as usize;
            assert!(r.clean.samples[..lead].iter().all(|&v| v == 0.0));
            let snr = 20.0 * (r.speech_rev.rms() / (m.scale * r.noise_rev.rms())).log10();
            assert!((snr - plan.snr_db).abs() < 1e-6);
            for i in 0..m.mixed.len() {
                let pre = r.speech_rev.samples[i] + m.scale * r.noise_rev.samples[i];
                assert_eq!(m.mixed.samples[i], pre * m.norm_factor);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.rirs_per_split = 1;
        assert!(plan_corpus(&c).is_err());
        let mut c = small_config();
        c.speakers[1].id = c.speakers[0].id.clone();
        assert!(plan_corpus(&c).is_err());
    }
}
