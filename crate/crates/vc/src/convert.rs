use std::path::PathBuf;

use revoicer_core::dsp::Waveform;
use revoicer_core::wav::{read_wav, write_wav};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::VcModel;
use crate::train::extract_features;
use crate::vocoder::{render_log_mel, DEFAULT_GL_ITERS, DEFAULT_NNLS_ITERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionRequest {
    pub source: PathBuf,
    pub target_speaker: String,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub nnls_iters: usize,
    pub griffin_lim_iters: usize,
    /// Seed of the initial Griffin-Lim phases.
    pub phase_seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            nnls_iters: DEFAULT_NNLS_ITERS,
            griffin_lim_iters: DEFAULT_GL_ITERS,
            phase_seed: 0,
        }
    }
}

/// Converts `source` to the voice of `target` and renders it with the
/// model's analysis settings; the output has the source's length.
pub fn convert_waveform(model: &VcModel, source: &Waveform, target: &str, opts: &RenderOptions) -> Result<Waveform> {
    let mel = extract_features(source, &model.features)?;
    let (converted, _) = model.convert_mel(&mel, target)?;
    render_log_mel(
        &converted,
        &model.features.stft,
        model.features.sample_rate,
        source.len(),
        opts.nnls_iters,
        opts.griffin_lim_iters,
        opts.phase_seed,
    )
}

pub fn convert_file(model: &VcModel, req: &ConversionRequest, opts: &RenderOptions) -> Result<Waveform> {
    let src = read_wav(&req.source)?;
    let out = convert_waveform(model, &src, &req.target_speaker, opts)?;
    write_wav(&req.output, &out)?;
    Ok(out)
}
