use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revoicer_core::dsp::{log_mel, stft, MelFrames, Waveform};
use revoicer_core::manifest::{Manifest, Split};
use revoicer_core::seed::derive_seed;
use revoicer_core::wav::read_wav;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{FeatureConfig, MelNorm, ModelConfig, VcModel};
use crate::tensor::Tensor;

pub const MIN_SPEAKERS: usize = 2;
pub const MIN_UTTS_PER_SPEAKER: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_utts: usize,
    /// Frames per random training crop.
    pub crop_frames: usize,
    pub beta: f64,
    pub adam: AdamConfig,
    /// Step at which the learning rate is halved; `None` means `steps / 2`.
    pub lr_halve_at: Option<usize>,
    /// Dead codebook rows are reseeded every this many steps (0 disables).
    pub reseed_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Checks every forward and backward buffer for NaN/Inf.
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_utts: 8,
            crop_frames: 32,
            beta: 0.25,
            adam: AdamConfig::default(),
            lr_halve_at: None,
            reseed_every: 500,
            seed: 0,
            model: ModelConfig::default(),
            check_finite: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_utts == 0 {
            return Err(Error::InvalidConfig("steps and batch_utts must be positive".into()));
        }
        if self.crop_frames < crate::model::MIN_FRAMES {
            return Err(Error::InvalidConfig(format!("crop of {} frames is too short", self.crop_frames)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta {}", self.beta)));
        }
        self.adam.validate()?;
        self.model.validate()
    }

    pub fn halve_at(&self) -> usize {
        self.lr_halve_at.unwrap_or(self.steps / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VcModel,
    pub curve: Vec<LossRecord>,
    pub reseeded_rows: usize,
}

/// Mean total loss over the `window` steps ending at `step`.
pub fn windowed_mean(curve: &[LossRecord], step: usize, window: usize) -> Option<f64> {
    let lo = step.saturating_sub(window);
    let vals: Vec<f64> = curve.iter().filter(|r| r.step >= lo && r.step < step).map(|r| r.total).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Log-mel features of a waveform with the model's feature settings.
pub fn extract_features(w: &Waveform, features: &FeatureConfig) -> Result<MelFrames> {
    if w.sample_rate != features.sample_rate {
        return Err(revoicer_core::Error::RateMismatch(w.sample_rate, features.sample_rate).into());
    }
    Ok(log_mel(&stft(w, &features.stft)?, &features.mel)?)
}

/// One training utterance: speaker index and log-mel frames.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub speaker: usize,
    pub mel: Array2<f64>,
}

/// Features of every train-split entry's `key` file. Speakers are indexed in
/// sorted order.
pub fn load_training_set(manifest: &Manifest, key: &str, features: &FeatureConfig) -> Result<(Vec<String>, Vec<TrainItem>)> {
    let speakers: Vec<String> = {
        let mut s: Vec<String> = manifest.split(Split::Train).map(|e| e.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    let mut items = vec![];
    for e in manifest.split(Split::Train) {
        let w = read_wav(e.path(key)?)?;
        let mel = extract_features(&w, features)?;
        let speaker = speakers.iter().position(|s| *s == e.speaker_id).expect("collected above");
        items.push(TrainItem {
            speaker,
            mel: mel.frames,
        });
    }
    Ok((speakers, items))
}

fn check_data(speakers: &[String], items: &[TrainItem], crop: usize) -> Result<()> {
    if speakers.len() < MIN_SPEAKERS {
        return Err(Error::Data(format!(
            "{} speaker(s) in the training split, need at least {MIN_SPEAKERS}",
            speakers.len()
        )));
    }
    for (i, s) in speakers.iter().enumerate() {
        let n = items.iter().filter(|it| it.speaker == i).count();
        if n < MIN_UTTS_PER_SPEAKER {
            return Err(Error::Data(format!(
                "speaker {s} has {n} training utterance(s), need at least {MIN_UTTS_PER_SPEAKER}"
            )));
        }
    }
    if let Some(i) = items.iter().position(|it| it.mel.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("features of training utterance {i}")));
    }
    if let Some(it) = items.iter().find(|it| it.mel.nrows() < crop) {
        return Err(Error::Data(format!(
            "utterance with {} frames is shorter than the {crop}-frame crop",
            it.mel.nrows()
        )));
    }
    Ok(())
}

/// Trains a model from scratch. Each step draws `batch_utts` utterances with
/// replacement and a random crop from each, then runs quantization, the
/// straight-through backward pass, an Adam step and the codebook EMA update.
pub fn train(
    speakers: Vec<String>,
    items: &[TrainItem],
    features: FeatureConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(&speakers, items, cfg.crop_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["train"]));
    let norm = MelNorm::fit(items.iter().map(|it| &it.mel))?;
    let normalized: Vec<Array2<f64>> = items.iter().map(|it| norm.apply(&it.mel)).collect();
    let mut model = VcModel::new(cfg.model.clone(), features, norm, speakers, &mut rng)?;
    let mut adam = Adam::new(&model.params, cfg.adam)?;
    let m = cfg.model.n_mels;
    let crop = cfg.crop_frames;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut reseeded_rows = 0;
    for step in 0..cfg.steps {
        adam.set_lr(if step >= cfg.halve_at() { cfg.adam.lr / 2.0 } else { cfg.adam.lr });
        let mut data = Vec::with_capacity(cfg.batch_utts * crop * m);
        let mut spk = Vec::with_capacity(cfg.batch_utts);
        for _ in 0..cfg.batch_utts {
            let u = rng.gen_range(0..items.len());
            let start = rng.gen_range(0..=normalized[u].nrows() - crop);
            data.extend(normalized[u].slice(ndarray::s![start..start + crop, ..]).iter().copied());
            spk.push(items[u].speaker);
        }
        let x = Tensor::new(vec![cfg.batch_utts, crop, m], data)?;
        if step == 0 {
            let z = model.encode_batch(&x)?;
            model.codebook.init_from(&z.data, z.numel() / cfg.model.code_dim, &mut rng)?;
        }
        let mut f = model.forward_train(&x, &spk, cfg.beta, cfg.check_finite)?;
        if !f.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                recon: f.recon,
                commit: f.commit,
            });
        }
        f.graph.backward(f.loss)?;
        let grads = f.graph.param_grads(&model.params);
        adam.step(&mut model.params, &grads)?;
        let z = &f.graph.value(f.z).data;
        model.codebook.ema_update(z, &f.quant.indices)?;
        if cfg.reseed_every > 0 && (step + 1) % cfg.reseed_every == 0 {
            reseeded_rows += model.codebook.reseed_dead(z, f.quant.indices.len(), &mut rng)?;
        }
        if cfg.check_finite && !model.codebook.is_finite() {
            return Err(Error::NonFinite(format!("codebook after step {step}")));
        }
        curve.push(LossRecord {
            step,
            recon: f.recon,
            commit: f.commit,
            total: f.total,
        });
        if (step + 1) % 500 == 0 {
            log::debug!(
                "step {}: recon {:.4} commit {:.4} (mean total {:.4})",
                step + 1,
                f.recon,
                f.commit,
                windowed_mean(&curve, step + 1, 500).unwrap_or(f.total)
            );
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        reseeded_rows,
    })
}

/// Loads the train split of `manifest` (files under `key`) and trains on it.
pub fn train_on_manifest(manifest: &Manifest, key: &str, features: FeatureConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (speakers, items) = load_training_set(manifest, key, &features)?;
    train(speakers, &items, features, cfg)
}

/// Distinct codebook rows selected when encoding the given utterances.
pub fn codebook_usage(model: &VcModel, mels: &[MelFrames]) -> Result<usize> {
    let mut used = vec![false; model.codebook.size];
    for mel in mels {
        let z = model.encode(mel)?;
        let q = crate::vq::quantize(&z.data, z.shape[0], &model.codebook)?;
        for i in q.indices {
            used[i] = true;
        }
    }
    Ok(used.iter().filter(|u| **u).count())
}
