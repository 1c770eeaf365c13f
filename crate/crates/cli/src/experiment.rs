//! The method matrix: corpus, per-condition enhancement, enhancement
//! metrics, model training, conversion and MCD, with on-disk checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use revoicer_core::corpus::{build_corpus, MANIFEST_FILE};
use revoicer_core::dsp::StftConfig;
use revoicer_core::enhance::apply_stage_chain;
use revoicer_core::manifest::{Manifest, ManifestEntry, Split, KEY_CLEAN};
use revoicer_core::metrics::{evaluate_manifests, mcd_waveforms, MetricReport};
use revoicer_core::seed::derive_seed;
use revoicer_core::wav::{read_wav, write_wav};
use revoicer_vc::convert::{convert_waveform, RenderOptions};
use revoicer_vc::eval::CentroidClassifier;
use revoicer_vc::io::{load_model, save_model};
use revoicer_vc::model::VcModel;
use revoicer_vc::train::{codebook_usage, extract_features, train_on_manifest, windowed_mean, LossRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConditionSpec, ExperimentConfig};

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "experiment_config.json";
pub const MCD_REFERENCE: &str = "target speaker's clean rendition of the same utterance content \
(synthetic parallel reference; training itself is non-parallel), DTW-aligned";
const CHECKPOINTS: &str = "checkpoints";
const LOSS_WINDOW: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub source_utt: String,
    pub source_speaker: String,
    pub target: String,
    /// Relative to the condition directory.
    pub output: PathBuf,
    pub reference_utt: String,
    pub mcd: f64,
    /// MCD against the source utterance's clean rendition.
    pub mcd_vs_source: f64,
    /// Active frames of the output classified as `target`.
    pub classified_as_target: usize,
    pub active_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementScores {
    pub train: MetricReport,
    pub eval: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcSummary {
    /// Mean MCD over cross-speaker conversions to the configured targets.
    pub mcd_mean: f64,
    pub mcd_std: f64,
    pub n_pairs: usize,
    /// Mean MCD of conversions back to the source speaker.
    pub self_mcd_mean: f64,
    /// Mean MCD per `source->target` speaker pair, self pairs included.
    pub pair_mcd: BTreeMap<String, f64>,
    /// Same pairs, measured against the source utterance instead of the
    /// target's rendition.
    pub pair_mcd_vs_source: BTreeMap<String, f64>,
    /// Fraction of active cross-conversion frames classified as the target.
    pub classifier_accuracy: f64,
    pub loss_first_window: f64,
    pub loss_last_window: f64,
    pub codebook_rows_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ConditionStatus {
    Ok,
    Failed { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub mcd_reference: String,
    /// Enhancement metrics against the clean signals, per split.
    pub enhancement: EnhancementScores,
    pub vc: BTreeMap<String, VcSummary>,
    pub conditions: BTreeMap<String, ConditionStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub body: ReportBody,
    /// SHA-256 of the compact JSON encoding of `body`.
    pub body_sha256: String,
    pub generated_unix_s: u64,
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn vc_mcd(&self, condition: &str) -> Option<f64> {
        self.body.vc.get(condition).map(|s| s.mcd_mean)
    }

    pub fn enhancement_mean(&self, split: Split, condition: &str, metric: &str) -> Option<f64> {
        let r = match split {
            Split::Train => &self.body.enhancement.train,
            Split::Eval => &self.body.enhancement.eval,
        };
        r.cell(condition, metric).map(|c| c.mean)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    /// Stages that actually ran (as opposed to being restored from
    /// checkpoints), e.g. `corpus` or `NR-dn/train`.
    pub executed: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Per-directory stage markers.
struct Checkpoints {
    dir: PathBuf,
    resume: bool,
}

impl Checkpoints {
    fn marker(&self, stage: &str) -> PathBuf {
        self.dir.join(CHECKPOINTS).join(format!("{stage}.done"))
    }

    fn done(&self, stage: &str) -> bool {
        self.resume && self.marker(stage).is_file()
    }

    fn mark(&self, stage: &str) -> Result<()> {
        write_atomic(&self.marker(stage), b"")
    }

    /// Forgets `stages`, so anything downstream of a rerun stage reruns too.
    fn invalidate(&self, stages: &[&str]) -> Result<()> {
        for s in stages {
            let m = self.marker(s);
            if m.exists() {
                std::fs::remove_file(m)?;
            }
        }
        Ok(())
    }
}

const CONDITION_STAGES: [&str; 4] = ["enhance", "metrics", "train", "convert"];

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    corpus: &'a Manifest,
    classifier: OnceLock<std::result::Result<CentroidClassifier, String>>,
    executed: Mutex<Vec<String>>,
}

impl Shared<'_> {
    fn executed(&self, s: String) {
        log::info!("finished {s}");
        self.executed.lock().expect("poisoned").push(s);
    }

    fn corpus_entry(&self, utt_id: &str) -> Result<&ManifestEntry> {
        self.corpus.get(utt_id).ok_or_else(|| anyhow!("utterance {utt_id} missing from the corpus manifest"))
    }

    /// Nearest-centroid speaker classifier fitted on clean training audio.
    fn classifier(&self) -> Result<&CentroidClassifier> {
        let c = self.classifier.get_or_init(|| {
            let fit = || -> Result<CentroidClassifier> {
                let mels = self
                    .corpus
                    .split(Split::Train)
                    .collect::<Vec<_>>()
                    .par_iter()
                    .map(|e| {
                        let w = read_wav(e.path(KEY_CLEAN)?)?;
                        Ok((e.speaker_id.clone(), extract_features(&w, &self.cfg.features)?.frames))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CentroidClassifier::fit(mels.iter().map(|(s, m)| (s.as_str(), m)))?)
            };
            fit().map_err(|e| format!("{e:#}"))
        });
        c.as_ref().map_err(|e| anyhow!("speaker classifier: {e}"))
    }
}

fn subset(m: &Manifest, split: Split) -> Manifest {
    Manifest::new(m.split(split).cloned().collect())
}

/// The clean corpus entry saying the same thing as `source` in `target`'s voice.
fn parallel_reference<'a>(corpus: &'a Manifest, source: &ManifestEntry, target: &str) -> Result<&'a ManifestEntry> {
    corpus
        .split(source.split)
        .find(|e| e.speaker_id == target && e.content_seed == source.content_seed)
        .ok_or_else(|| anyhow!("no parallel rendition of {} by {target}", source.utt_id))
}

struct ConditionRun<'a> {
    spec: &'a ConditionSpec,
    dir: PathBuf,
    ck: Checkpoints,
}

impl ConditionRun<'_> {
    fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    fn run(&self, sh: &Shared) -> std::result::Result<VcSummary, (String, anyhow::Error)> {
        let name = &self.spec.name;
        let cfg = sh.cfg;
        let key = self.spec.key(cfg.wpe).map_err(|e| ("enhance".to_string(), e))?;
        let stage = |s: &str, f: &dyn Fn() -> Result<()>| -> std::result::Result<(), (String, anyhow::Error)> {
            if self.ck.done(s) {
                return Ok(());
            }
            let pos = CONDITION_STAGES.iter().position(|x| *x == s).expect("known stage");
            self.ck.invalidate(&CONDITION_STAGES[pos..]).map_err(|e| (s.to_string(), e))?;
            f().map_err(|e| (s.to_string(), e))?;
            self.ck.mark(s).map_err(|e| (s.to_string(), e))?;
            sh.executed(format!("{name}/{s}"));
            Ok(())
        };

        stage("enhance", &|| {
            let stages = self.spec.stages(cfg.wpe)?;
            let m = apply_stage_chain(sh.corpus, &self.spec.input, &stages, &self.dir.join("audio"), &StftConfig::enhancement())?;
            m.save(&self.manifest_path())?;
            Ok(())
        })?;
        let load_manifest = || Manifest::load(&self.manifest_path()).map_err(anyhow::Error::from);

        let metrics_file = self.dir.join("enhancement_metrics.json");
        stage("metrics", &|| {
            let m = load_manifest()?;
            let metrics = cfg.metric_list()?;
            let score = |split| evaluate_manifests(&subset(&m, split), &key, sh.corpus, KEY_CLEAN, &metrics, name);
            let scores = EnhancementScores {
                train: score(Split::Train)?,
                eval: score(Split::Eval)?,
            };
            write_json(&metrics_file, &scores)
        })?;

        let model_file = self.dir.join("model.rvc");
        let curve_file = self.dir.join("loss_curve.json");
        stage("train", &|| {
            let m = load_manifest()?;
            log::info!("{name}: training {} steps on '{key}'", cfg.train.steps);
            let out = train_on_manifest(&m, &key, cfg.features.clone(), &cfg.train)?;
            save_model(&out.model, &model_file)?;
            write_json(&curve_file, &out.curve)
        })?;

        let conv_file = self.dir.join("conversions.json");
        stage("convert", &|| {
            let m = load_manifest()?;
            let model = load_model(&model_file)?;
            let records = self.convert_all(sh, &m, &key, &model)?;
            write_json(&conv_file, &records)
        })?;

        self.summarize(sh, &model_file, &curve_file, &conv_file)
            .map_err(|e| ("summary".to_string(), e))
    }

    fn convert_all(&self, sh: &Shared, m: &Manifest, key: &str, model: &VcModel) -> Result<Vec<ConversionRecord>> {
        let classifier = sh.classifier()?;
        let targets = sh.cfg.target_speakers();
        let mut jobs = vec![];
        for e in m.split(Split::Eval) {
            let mut tg: Vec<&str> = targets.iter().map(String::as_str).filter(|t| *t != e.speaker_id).collect();
            tg.push(&e.speaker_id);
            for t in tg {
                jobs.push((e, t.to_string()));
            }
        }
        jobs.par_iter()
            .map(|(e, target)| -> Result<ConversionRecord> {
                let src = read_wav(e.path(key)?)?;
                let opts = RenderOptions {
                    phase_seed: derive_seed(sh.cfg.seed, &["render", &e.utt_id, target]),
                    ..sh.cfg.render
                };
                let y = convert_waveform(model, &src, target, &opts)
                    .with_context(|| format!("converting {} to {target}", e.utt_id))?;
                let rel = PathBuf::from("converted").join(format!("{}__{target}.wav", e.utt_id));
                write_wav(&self.dir.join(&rel), &y)?;
                // score what was written, i.e. after PCM16 quantization
                let y = read_wav(&self.dir.join(&rel))?;
                let r = parallel_reference(sh.corpus, e, target)?;
                let reference = read_wav(r.path(KEY_CLEAN)?)?;
                let mcd = mcd_waveforms(&y, &reference)?;
                let mcd_vs_source = if r.utt_id == e.utt_id {
                    mcd
                } else {
                    mcd_waveforms(&y, &read_wav(sh.corpus_entry(&e.utt_id)?.path(KEY_CLEAN)?)?)?
                };
                let mel = extract_features(&y, &model.features)?;
                let (hits, frames) = classifier.score(&mel.frames, target)?;
                Ok(ConversionRecord {
                    source_utt: e.utt_id.clone(),
                    source_speaker: e.speaker_id.clone(),
                    target: target.clone(),
                    output: rel,
                    reference_utt: r.utt_id.clone(),
                    mcd,
                    mcd_vs_source,
                    classified_as_target: hits,
                    active_frames: frames,
                })
            })
            .collect()
    }

    fn summarize(&self, sh: &Shared, model_file: &Path, curve_file: &Path, conv_file: &Path) -> Result<VcSummary> {
        let records: Vec<ConversionRecord> = read_json(conv_file)?;
        let curve: Vec<LossRecord> = read_json(curve_file)?;
        let targets = sh.cfg.target_speakers();
        let cross: Vec<&ConversionRecord> = records
            .iter()
            .filter(|r| r.target != r.source_speaker && targets.contains(&r.target))
            .collect();
        if cross.is_empty() {
            bail!("no cross-speaker conversions");
        }
        let self_pairs: Vec<f64> = records.iter().filter(|r| r.target == r.source_speaker).map(|r| r.mcd).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let cross_mcd: Vec<f64> = cross.iter().map(|r| r.mcd).collect();
        let mcd_mean = mean(&cross_mcd);
        let mcd_std = (cross_mcd.iter().map(|v| (v - mcd_mean).powi(2)).sum::<f64>() / cross_mcd.len() as f64).sqrt();
        let mut pairs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut pairs_src: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &records {
            let k = format!("{}->{}", r.source_speaker, r.target);
            pairs.entry(k.clone()).or_default().push(r.mcd);
            pairs_src.entry(k).or_default().push(r.mcd_vs_source);
        }
        let hits: usize = cross.iter().map(|r| r.classified_as_target).sum();
        let frames: usize = cross.iter().map(|r| r.active_frames).sum();
        let steps = curve.len();
        // rows used on the condition's own eval inputs
        let model = load_model(model_file)?;
        let m = Manifest::load(&self.manifest_path())?;
        let key = self.spec.key(sh.cfg.wpe)?;
        let mels = m
            .split(Split::Eval)
            .map(|e| Ok(extract_features(&read_wav(e.path(&key)?)?, &model.features)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(VcSummary {
            mcd_mean,
            mcd_std,
            n_pairs: cross.len(),
            self_mcd_mean: mean(&self_pairs),
            pair_mcd: pairs.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
            pair_mcd_vs_source: pairs_src.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
            classifier_accuracy: hits as f64 / frames.max(1) as f64,
            loss_first_window: windowed_mean(&curve, LOSS_WINDOW.min(steps), LOSS_WINDOW).unwrap_or(f64::NAN),
            loss_last_window: windowed_mean(&curve, steps, LOSS_WINDOW).unwrap_or(f64::NAN),
            codebook_rows_used: codebook_usage(&model, &mels)?,
        })
    }
}

fn prepare_output(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    let saved = out.join(CONFIG_FILE);
    if resume && saved.is_file() {
        let prev: ExperimentConfig = read_json(&saved)?;
        if prev != cfg.resolved() {
            bail!(revoicer_core::Error::InvalidConfig(format!(
                "cannot resume: {} was produced with a different configuration",
                out.display()
            )));
        }
        return Ok(());
    }
    if !resume && out.exists() && std::fs::read_dir(out)?.next().is_some() {
        bail!(revoicer_core::Error::OutputExists(out.to_path_buf()));
    }
    std::fs::create_dir_all(out)?;
    write_json(&saved, &cfg.resolved())
}

/// Runs every stage that has no checkpoint (all of them unless `resume`)
/// and writes `report.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    prepare_output(&cfg, out, resume)?;
    let out = std::path::absolute(out)?;
    let root = Checkpoints {
        dir: out.clone(),
        resume,
    };
    let mut executed = vec![];
    let corpus_dir = out.join("corpus");
    if !root.done("corpus") {
        log::info!("building corpus in {}", corpus_dir.display());
        build_corpus(&cfg.corpus, &corpus_dir, true)?;
        root.mark("corpus")?;
        executed.push("corpus".to_string());
    }
    let corpus = Manifest::load(&corpus_dir.join(MANIFEST_FILE))?;

    let shared = Shared {
        cfg: &cfg,
        corpus: &corpus,
        classifier: OnceLock::new(),
        executed: Mutex::new(executed),
    };
    let results: Vec<(String, std::result::Result<VcSummary, (String, anyhow::Error)>)> = cfg
        .conditions
        .par_iter()
        .map(|spec| {
            let dir = out.join("conditions").join(&spec.name);
            let run = ConditionRun {
                spec,
                ck: Checkpoints {
                    dir: dir.clone(),
                    resume,
                },
                dir,
            };
            (spec.name.clone(), run.run(&shared))
        })
        .collect();

    let mut enh_train = MetricReport::default();
    let mut enh_eval = MetricReport::default();
    let mut vc = BTreeMap::new();
    let mut conditions = BTreeMap::new();
    for (name, r) in results {
        let metrics_file = out.join("conditions").join(&name).join("enhancement_metrics.json");
        if let Ok(scores) = read_json::<EnhancementScores>(&metrics_file) {
            enh_train.merge(scores.train);
            enh_eval.merge(scores.eval);
        }
        match r {
            Ok(summary) => {
                vc.insert(name.clone(), summary);
                conditions.insert(name, ConditionStatus::Ok);
            }
            Err((stage, e)) => {
                log::warn!("condition {name} failed in {stage}: {e:#}");
                conditions.insert(
                    name,
                    ConditionStatus::Failed {
                        stage,
                        error: format!("{e:#}"),
                    },
                );
            }
        }
    }
    let mut executed = shared.executed.into_inner().expect("poisoned");
    executed.sort();

    let config_json = serde_json::to_vec(&cfg)?;
    let body = ReportBody {
        config_sha256: sha256_hex(&config_json),
        seed: cfg.seed,
        config: cfg,
        versions: BTreeMap::from([
            ("revoicer".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("report_format".to_string(), "1".to_string()),
        ]),
        mcd_reference: MCD_REFERENCE.to_string(),
        enhancement: EnhancementScores {
            train: enh_train,
            eval: enh_eval,
        },
        vc,
        conditions,
    };
    let report = ExperimentReport {
        body_sha256: sha256_hex(&serde_json::to_vec(&body)?),
        body,
        generated_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(RunOutcome { report, executed })
}
