//! Binary model files.
//!
//! Layout (little-endian): magic `RVC1`, u32 version, u32 tensor count, then
//! per tensor a u32 name length, the UTF-8 name, u32 rank, u64 dims and f64
//! values; finally a u32 speaker count and length-prefixed speaker ids.

use std::fs;
use std::path::Path;

use revoicer_core::dsp::{MelConfig, StftConfig, WindowKind};

use crate::error::{Error, Result};
use crate::model::{FeatureConfig, MelNorm, ModelConfig, VcModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vq::Codebook;

pub const MAGIC: &[u8; 4] = b"RVC1";
pub const VERSION: u32 = 1;

fn meta_tensors(m: &VcModel) -> Vec<(String, Tensor)> {
    let c = &m.config;
    let mut cfg = vec![
        c.n_mels as f64,
        c.code_dim as f64,
        c.codes as f64,
        c.speaker_dim as f64,
        c.decoder_channels as f64,
        c.decoder_blocks as f64,
        c.kernel as f64,
        c.codebook_decay,
        c.codebook_epsilon,
    ];
    cfg.extend(c.encoder_channels.iter().map(|&v| v as f64));
    let f = &m.features;
    let feat = vec![
        f.sample_rate as f64,
        f.stft.window_ms,
        f.stft.hop_ms,
        f.stft.fft_len as f64,
        f.mel.n_mels as f64,
        f.mel.f_min,
        f.mel.f_max.unwrap_or(-1.0),
    ];
    let cb = &m.codebook;
    let vec1 = |v: &[f64]| Tensor {
        shape: vec![v.len()],
        data: v.to_vec(),
    };
    vec![
        ("meta.config".into(), vec1(&cfg)),
        ("meta.features".into(), vec1(&feat)),
        ("norm.mean".into(), vec1(&m.norm.mean)),
        ("norm.std".into(), vec1(&m.norm.std)),
        (
            "codebook.vectors".into(),
            Tensor {
                shape: vec![cb.size, cb.dim],
                data: cb.vectors.clone(),
            },
        ),
        ("codebook.ema_counts".into(), vec1(&cb.ema_counts)),
        (
            "codebook.ema_sums".into(),
            Tensor {
                shape: vec![cb.size, cb.dim],
                data: cb.ema_sums.clone(),
            },
        ),
    ]
}

pub fn model_to_bytes(m: &VcModel) -> Vec<u8> {
    let mut tensors = meta_tensors(m);
    tensors.extend(m.params.iter().map(|(_, n, t)| (format!("param.{n}"), t.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(m.speakers.len() as u32).to_le_bytes());
    for s in &m.speakers {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| format!("invalid UTF-8 name: {e}"))
    }
}

fn parse(buf: &[u8]) -> std::result::Result<VcModel, String> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:?}, expected {MAGIC:?}"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version} (this build reads version {VERSION})"));
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("tensor {name}: shape {shape:?} overflows"))?;
        let bytes = r.take(n.checked_mul(8).ok_or("tensor size overflows")?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor { shape, data }));
    }
    let n_spk = r.u32()? as usize;
    let mut speakers = Vec::with_capacity(n_spk.min(4096));
    for _ in 0..n_spk {
        speakers.push(r.string()?);
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }

    let get = |name: &str| -> std::result::Result<&Tensor, String> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| format!("missing tensor {name}"))
    };
    let cfg = &get("meta.config")?.data;
    if cfg.len() != 13 {
        return Err(format!("meta.config has {} values, expected 13", cfg.len()));
    }
    let config = ModelConfig {
        n_mels: cfg[0] as usize,
        code_dim: cfg[1] as usize,
        codes: cfg[2] as usize,
        speaker_dim: cfg[3] as usize,
        decoder_channels: cfg[4] as usize,
        decoder_blocks: cfg[5] as usize,
        kernel: cfg[6] as usize,
        codebook_decay: cfg[7],
        codebook_epsilon: cfg[8],
        encoder_channels: [cfg[9] as usize, cfg[10] as usize, cfg[11] as usize, cfg[12] as usize],
    };
    let f = &get("meta.features")?.data;
    if f.len() != 7 {
        return Err(format!("meta.features has {} values, expected 7", f.len()));
    }
    let features = FeatureConfig {
        sample_rate: f[0] as u32,
        stft: StftConfig {
            window_ms: f[1],
            hop_ms: f[2],
            fft_len: f[3] as usize,
            window: WindowKind::Hann,
        },
        mel: MelConfig {
            n_mels: f[4] as usize,
            f_min: f[5],
            f_max: (f[6] >= 0.0).then_some(f[6]),
        },
    };
    let norm = MelNorm {
        mean: get("norm.mean")?.data.clone(),
        std: get("norm.std")?.data.clone(),
    };
    let vectors = get("codebook.vectors")?;
    if vectors.shape != [config.codes, config.code_dim] {
        return Err(format!("codebook shape {:?} disagrees with the configuration", vectors.shape));
    }
    let codebook = Codebook {
        size: config.codes,
        dim: config.code_dim,
        vectors: vectors.data.clone(),
        ema_counts: get("codebook.ema_counts")?.data.clone(),
        ema_sums: get("codebook.ema_sums")?.data.clone(),
        decay: config.codebook_decay,
        epsilon: config.codebook_epsilon,
    };
    if codebook.ema_counts.len() != codebook.size || codebook.ema_sums.len() != codebook.vectors.len() {
        return Err("codebook EMA state has the wrong size".into());
    }
    // rebuild the parameter layout, then fill it from the file
    let skeleton = VcModel::new(
        config.clone(),
        features.clone(),
        norm.clone(),
        speakers.clone(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
    .map_err(|e| e.to_string())?;
    let mut params = ParamStore::new();
    for (_, name, t) in skeleton.params.iter() {
        let stored = get(&format!("param.{name}"))?;
        if stored.shape != t.shape {
            return Err(format!("parameter {name} has shape {:?}, expected {:?}", stored.shape, t.shape));
        }
        params.add(name, stored.clone()).map_err(|e| e.to_string())?;
    }
    if tensors.len() != 7 + params.len() {
        return Err(format!("{} tensors, expected {}", tensors.len(), 7 + params.len()));
    }
    Ok(VcModel {
        config,
        features,
        norm,
        params,
        codebook,
        speakers,
    })
}

pub fn model_from_bytes(buf: &[u8], path: &Path) -> Result<VcModel> {
    parse(buf).map_err(|msg| Error::ModelFormat {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn save_model(m: &VcModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, model_to_bytes(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<VcModel> {
    let buf = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Core(revoicer_core::Error::MissingFile(path.to_path_buf())),
        _ => Error::Io(e),
    })?;
    model_from_bytes(&buf, path)
}
