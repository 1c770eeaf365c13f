use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use revoicer_core::corpus::{build_corpus, CorpusConfig, MANIFEST_FILE};
use revoicer_core::dsp::StftConfig;
use revoicer_core::enhance::{apply_stage_chain, chain_key, parse_chain, WpeConfig};
use revoicer_core::manifest::{Manifest, KEY_MIXED};
use revoicer_core::metrics::{evaluate_manifests, Metric};
use revoicer_vc::convert::{convert_file, ConversionRequest, RenderOptions};
use revoicer_vc::io::{load_model, save_model};
use revoicer_vc::model::FeatureConfig;
use revoicer_vc::train::{train_on_manifest, TrainConfig};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::experiment::run_experiment;

#[derive(Debug, Parser)]
#[command(name = "revoicer", version, about = "Noisy-reverberant voice conversion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-speaker corpus.
    SynthCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Apply an enhancement chain to every mixture of a manifest.
    Enhance {
        #[arg(long)]
        manifest: PathBuf,
        /// dn, dr, dn,dr, dr,dn or ext:<dir>
        #[arg(long)]
        chain: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        wpe: WpeArgs,
    },
    /// Score estimates against references.
    Metrics {
        /// <manifest>:<key>
        #[arg(long = "est")]
        est: String,
        /// <manifest>:<key>
        #[arg(long = "ref")]
        reference: String,
        #[arg(long, default_value = "si_sdr,sd_sdr,stoi,sar,mcd")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a conversion model on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert one file to a trained speaker's voice.
    Convert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full condition matrix and write report.json.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Debug, Args)]
pub struct WpeArgs {
    #[arg(long = "wpe-taps")]
    pub taps: Option<usize>,
    #[arg(long = "wpe-delay")]
    pub delay: Option<usize>,
    #[arg(long = "wpe-iters")]
    pub iters: Option<usize>,
}

impl WpeArgs {
    pub fn config(&self) -> Result<WpeConfig> {
        let mut c = WpeConfig::default();
        if let Some(v) = self.taps {
            c.taps = v;
        }
        if let Some(v) = self.delay {
            c.delay = v;
        }
        if let Some(v) = self.iters {
            c.iterations = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        bail!(revoicer_core::Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `<manifest>:<key>`; the key follows the last colon.
fn manifest_key(spec: &str) -> Result<(Manifest, String)> {
    let Some((path, key)) = spec.rsplit_once(':') else {
        bail!(revoicer_core::Error::InvalidConfig(format!("expected <manifest>:<key>, got '{spec}'")));
    };
    if key.is_empty() {
        bail!(revoicer_core::Error::InvalidConfig(format!("empty key in '{spec}'")));
    }
    Ok((Manifest::load(Path::new(path))?, key.to_string()))
}

/// Runs one command; returns the JSON summary printed on stdout.
pub fn execute(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::SynthCorpus { config, out, seed, force } => {
            let mut cfg: CorpusConfig = read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = build_corpus(&cfg, &out, force)?;
            Ok(json!({ "manifest": out.join(MANIFEST_FILE), "utterances": m.len() }))
        }
        Command::Enhance { manifest, chain, out, wpe } => {
            let wpe = wpe.config()?;
            let stages = parse_chain(&chain, wpe)?;
            if stages.is_empty() {
                bail!(revoicer_core::Error::InvalidConfig("empty enhancement chain".into()));
            }
            let input = Manifest::load(&manifest)?;
            // keep keys from earlier runs into the same directory
            let out_manifest = out.join(MANIFEST_FILE);
            let base = if out_manifest.is_file() {
                let prev = Manifest::load(&out_manifest)?;
                let same = prev.len() == input.len()
                    && prev.entries.iter().zip(&input.entries).all(|(a, b)| a.utt_id == b.utt_id);
                if same {
                    prev
                } else {
                    input
                }
            } else {
                input
            };
            let m = apply_stage_chain(&base, KEY_MIXED, &stages, &out, &StftConfig::enhancement())?;
            m.save(&out_manifest)?;
            Ok(json!({ "manifest": out_manifest, "key": chain_key(KEY_MIXED, &stages) }))
        }
        Command::Metrics { est, reference, metrics, out } => {
            let metrics = Metric::parse_list(&metrics)?;
            let (em, ek) = manifest_key(&est)?;
            let (rm, rk) = manifest_key(&reference)?;
            let report = evaluate_manifests(&em, &ek, &rm, &rk, &metrics, &ek)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            let means: serde_json::Map<String, serde_json::Value> = report
                .cells
                .get(&ek)
                .into_iter()
                .flatten()
                .map(|(k, c)| (k.clone(), json!(c.mean)))
                .collect();
            Ok(json!({ "out": out, "means": means, "failures": report.failures.len() }))
        }
        Command::Train { manifest, key, config, out } => {
            let cfg: TrainConfig = read_config(&config)?;
            let m = Manifest::load(&manifest)?;
            let r = train_on_manifest(&m, &key, FeatureConfig::default(), &cfg)?;
            save_model(&r.model, &out)?;
            let curve = out.with_extension("loss.json");
            std::fs::write(&curve, serde_json::to_vec(&r.curve)?)?;
            let last = r.curve.last().expect("at least one step");
            Ok(json!({ "model": out, "loss_curve": curve, "final_total_loss": last.total }))
        }
        Command::Convert { model, input, speaker, out } => {
            let m = load_model(&model)?;
            let req = ConversionRequest {
                source: input,
                target_speaker: speaker,
                output: out.clone(),
            };
            let w = convert_file(&m, &req, &RenderOptions::default())?;
            Ok(json!({ "out": out, "samples": w.len() }))
        }
        Command::Experiment { config, out, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let Some(out) = out.or_else(|| cfg.out_dir.clone()) else {
                bail!(revoicer_core::Error::InvalidConfig("no output directory (--out or out_dir)".into()));
            };
            let run = run_experiment(&cfg, &out, resume)?;
            Ok(json!({
                "report": out.join(crate::experiment::REPORT_FILE),
                "body_sha256": run.report.body_sha256,
                "executed": run.executed,
                "conditions": run.report.body.conditions,
            }))
        }
    }
}

/// Machine-readable form of an error, for stderr.
pub fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let mut kind = "error";
    let mut path: Option<PathBuf> = None;
    for cause in e.chain() {
        let core = cause
            .downcast_ref::<revoicer_core::Error>()
            .or_else(|| match cause.downcast_ref::<revoicer_vc::Error>() {
                Some(revoicer_vc::Error::Core(c)) => Some(c),
                _ => None,
            });
        if let Some(c) = core {
            use revoicer_core::Error as E;
            (kind, path) = match c {
                E::MissingFile(p) => ("missing_file", Some(p.clone())),
                E::Wav { path, .. } => ("wav", Some(path.clone())),
                E::InvalidConfig(_) => ("invalid_config", None),
                E::OutputExists(p) => ("output_exists", Some(p.clone())),
                E::Manifest(_) => ("manifest", None),
                E::ExternalCoverage { dir, .. } => ("missing_file", Some(dir.clone())),
                _ => ("processing", None),
            };
            break;
        }
        if let Some(v) = cause.downcast_ref::<revoicer_vc::Error>() {
            use revoicer_vc::Error as V;
            (kind, path) = match v {
                V::ModelFormat { path, .. } => ("model_format", Some(path.clone())),
                V::UnknownSpeaker(_) => ("unknown_speaker", None),
                V::InvalidConfig(_) => ("invalid_config", None),
                V::Data(_) => ("training_data", None),
                _ => ("processing", None),
            };
            break;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            kind = "invalid_json";
            break;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            kind = if io.kind() == std::io::ErrorKind::NotFound { "missing_file" } else { "io" };
            break;
        }
    }
    let mut v = json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
    if let Some(p) = path {
        v["error"]["path"] = json!(p);
    }
    v
}

/// Caps the rayon pool at `REVOICER_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("REVOICER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("REVOICER_THREADS must be a positive integer, got '{v}'"))?;
    // a pool built earlier in the same process wins
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
