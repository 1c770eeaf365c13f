use ndarray::Array2;
use rand::Rng;
use revoicer_core::dsp::{MelConfig, MelFrames, StftConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::params::{normal, uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vq::{quantize, Codebook, QuantizeResult, DEFAULT_CODES, DEFAULT_CODE_DIM, DEFAULT_DECAY, DEFAULT_EPSILON};

/// Minimum number of input frames the encoder accepts.
pub const MIN_FRAMES: usize = 4;
const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Output widths of the four hidden encoder blocks; the fifth block
    /// projects to `code_dim`.
    pub encoder_channels: [usize; 4],
    pub code_dim: usize,
    pub codes: usize,
    pub speaker_dim: usize,
    pub decoder_channels: usize,
    pub decoder_blocks: usize,
    pub kernel: usize,
    pub codebook_decay: f64,
    pub codebook_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            encoder_channels: [256; 4],
            code_dim: DEFAULT_CODE_DIM,
            codes: DEFAULT_CODES,
            speaker_dim: 32,
            decoder_channels: 256,
            decoder_blocks: 3,
            kernel: 3,
            codebook_decay: DEFAULT_DECAY,
            codebook_epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.n_mels, self.code_dim, self.codes, self.speaker_dim, self.decoder_channels, self.kernel];
        if sizes.contains(&0) || self.encoder_channels.contains(&0) || self.decoder_blocks == 0 {
            return Err(Error::InvalidConfig(format!("model {self:?}")));
        }
        if self.n_mels < 13 {
            return Err(Error::InvalidConfig(format!("{} mel bands, need at least 13", self.n_mels)));
        }
        Ok(())
    }

    /// Stride of encoder block `i`.
    pub fn encoder_stride(i: usize) -> usize {
        if i == 1 {
            2
        } else {
            1
        }
    }

    /// Number of latent vectors for `t` input frames.
    pub fn latent_len(t: usize) -> usize {
        t.div_ceil(2)
    }
}

/// Per-bin statistics used to standardize log-mel frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelNorm {
    /// Mean and (floored) standard deviation of every bin over all frames.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = vec![];
        let mut sq: Vec<f64> = vec![];
        for f in frames {
            if sum.is_empty() {
                sum = vec![0.0; f.ncols()];
                sq = vec![0.0; f.ncols()];
            }
            for row in f.rows() {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("no frames to fit normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mut out = frames.clone();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        out
    }

    pub fn invert(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mut out = frames.clone();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        out
    }
}

/// Feature settings the model was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            stft: StftConfig::default(),
            mel: MelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcModel {
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub norm: MelNorm,
    pub params: ParamStore,
    pub codebook: Codebook,
    pub speakers: Vec<String>,
}

/// Parameters are either tracked leaves (training) or constants (inference).
struct Binder<'a> {
    store: &'a ParamStore,
    track: bool,
}

impl Binder<'_> {
    fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("model has no parameter '{name}'")))?;
        if self.track {
            g.param(self.store, id)
        } else {
            Ok(g.input(self.store.tensor(id).clone()))
        }
    }
}

/// Result of a training forward pass.
pub struct TrainForward {
    pub graph: Graph,
    pub z: Var,
    pub loss: Var,
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
    pub quant: QuantizeResult,
}

impl VcModel {
    /// Fresh model with randomly initialized weights and an uninitialized
    /// (zero) codebook.
    pub fn new<R: Rng>(
        config: ModelConfig,
        features: FeatureConfig,
        norm: MelNorm,
        speakers: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if norm.mean.len() != config.n_mels || norm.std.len() != config.n_mels {
            return Err(Error::InvalidConfig("normalization size differs from mel bands".into()));
        }
        if features.mel.n_mels != config.n_mels {
            return Err(Error::InvalidConfig("feature and model mel bands differ".into()));
        }
        if speakers.is_empty() {
            return Err(Error::InvalidConfig("speaker table is empty".into()));
        }
        let k = config.kernel;
        let mut p = ParamStore::new();
        let mut c_in = config.n_mels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            p.add(&format!("enc{i}.w"), uniform_fan_in(&[k, c_in, c], k * c_in, rng))?;
            p.add(&format!("enc{i}.gamma"), Tensor::filled(&[c], 1.0))?;
            p.add(&format!("enc{i}.beta"), Tensor::zeros(&[c]))?;
            c_in = c;
        }
        p.add("enc4.w", uniform_fan_in(&[k, c_in, config.code_dim], k * c_in, rng))?;
        p.add("enc4.b", Tensor::zeros(&[config.code_dim]))?;
        p.add("spk.emb", normal(&[speakers.len(), config.speaker_dim], 1.0, rng))?;
        let mut c_in = config.code_dim + config.speaker_dim;
        for i in 0..config.decoder_blocks {
            let c = config.decoder_channels;
            p.add(&format!("dec{i}.w"), uniform_fan_in(&[k, c_in, c], k * c_in, rng))?;
            p.add(&format!("dec{i}.b"), Tensor::zeros(&[c]))?;
            c_in = c;
        }
        p.add("head.w", uniform_fan_in(&[c_in, config.n_mels], c_in, rng))?;
        p.add("head.b", Tensor::zeros(&[config.n_mels]))?;
        let codebook = Codebook::new(config.codes, config.code_dim, config.codebook_decay, config.codebook_epsilon)?;
        Ok(Self {
            config,
            features,
            norm,
            params: p,
            codebook,
            speakers,
        })
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    fn encoder_graph(&self, g: &mut Graph, b: &Binder, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..4 {
            let w = b.get(g, &format!("enc{i}.w"))?;
            h = g.conv1d(h, w, None, ModelConfig::encoder_stride(i), Padding::Same)?;
            let gamma = b.get(g, &format!("enc{i}.gamma"))?;
            let beta = b.get(g, &format!("enc{i}.beta"))?;
            h = g.instance_norm(h, gamma, beta)?;
            h = g.relu(h)?;
        }
        let w = b.get(g, "enc4.w")?;
        let bias = b.get(g, "enc4.b")?;
        g.conv1d(h, w, Some(bias), 1, Padding::Same)
    }

    fn decoder_graph(&self, g: &mut Graph, b: &Binder, q: Var, speakers: &[usize], t: usize) -> Result<Var> {
        let up = g.upsample_repeat(q, 2, t)?;
        let table = b.get(g, "spk.emb")?;
        let e = g.embedding(table, speakers)?;
        let e = g.expand_time(e, t)?;
        let mut h = g.concat(up, e)?;
        for i in 0..self.config.decoder_blocks {
            let w = b.get(g, &format!("dec{i}.w"))?;
            let bias = b.get(g, &format!("dec{i}.b"))?;
            h = g.conv1d(h, w, Some(bias), 1, Padding::Same)?;
            h = g.relu(h)?;
        }
        let w = b.get(g, "head.w")?;
        let bias = b.get(g, "head.b")?;
        g.linear(h, w, Some(bias))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (bsz, t, c) = x.dims3("encoder")?;
        if c != self.config.n_mels {
            return Err(crate::error::shape_err(
                "encoder",
                format!("{c} input bins, model expects {}", self.config.n_mels),
            ));
        }
        if t < MIN_FRAMES {
            return Err(Error::TooShort(format!("{t} frames, the encoder needs at least {MIN_FRAMES}")));
        }
        Ok((bsz, t))
    }

    /// Latents for a standardized `[B, T, n_mels]` batch: `[B, ceil(T/2), code_dim]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = Binder {
            store: &self.params,
            track: false,
        };
        let xi = g.input(x.clone());
        let z = self.encoder_graph(&mut g, &b, xi)?;
        Ok(g.value(z).clone())
    }

    /// Standardized log-mel frames decoded from quantized latents for the
    /// given speakers (one per batch item).
    pub fn decode_batch(&self, q: &Tensor, speakers: &[usize], t: usize) -> Result<Tensor> {
        let (bsz, _, _) = q.dims3("decoder")?;
        if speakers.len() != bsz {
            return Err(Error::InvalidConfig(format!("{} speaker ids for batch of {bsz}", speakers.len())));
        }
        let mut g = Graph::new();
        let b = Binder {
            store: &self.params,
            track: false,
        };
        let qi = g.input(q.clone());
        let y = self.decoder_graph(&mut g, &b, qi, speakers, t)?;
        Ok(g.value(y).clone())
    }

    /// Records the full training graph for a standardized batch: encoder,
    /// quantization against the current codebook, straight-through decoder
    /// input and the loss `recon + beta·commit`.
    pub fn forward_train(&self, x: &Tensor, speakers: &[usize], beta: f64, check_finite: bool) -> Result<TrainForward> {
        let (bsz, t) = self.check_input(x)?;
        if speakers.len() != bsz {
            return Err(Error::InvalidConfig(format!("{} speaker ids for batch of {bsz}", speakers.len())));
        }
        let mut g = Graph::new().with_finite_checks(check_finite);
        let b = Binder {
            store: &self.params,
            track: true,
        };
        let xi = g.input(x.clone());
        let z = self.encoder_graph(&mut g, &b, xi)?;
        let zv = g.value(z);
        let n = zv.numel() / self.config.code_dim;
        let quant = quantize(&zv.data, n, &self.codebook)?;
        let zq = Tensor::new(zv.shape.clone(), quant.quantized.clone())?;
        let q = g.straight_through(z, &zq)?;
        let y = self.decoder_graph(&mut g, &b, q, speakers, t)?;
        let recon = g.mse_loss(y, xi)?;
        let commit = g.commitment(z, &zq)?;
        let weighted = g.scale(commit, beta)?;
        let loss = g.add(recon, weighted)?;
        Ok(TrainForward {
            recon: g.value(recon).data[0],
            commit: g.value(commit).data[0],
            total: g.value(loss).data[0],
            graph: g,
            z,
            loss,
            quant,
        })
    }

    /// Standardizes one utterance's log-mel frames into a `[1, T, n_mels]` batch.
    pub fn prepare(&self, mel: &MelFrames) -> Result<Tensor> {
        if mel.n_mels() != self.config.n_mels {
            return Err(crate::error::shape_err(
                "prepare",
                format!("{} mel bands, model expects {}", mel.n_mels(), self.config.n_mels),
            ));
        }
        let x = self.norm.apply(&mel.frames);
        Tensor::new(vec![1, x.nrows(), x.ncols()], x.into_iter().collect())
    }

    /// Latents of one utterance, `N × code_dim`.
    pub fn encode(&self, mel: &MelFrames) -> Result<Tensor> {
        let z = self.encode_batch(&self.prepare(mel)?)?;
        Tensor::new(vec![z.shape[1], z.shape[2]], z.data)
    }

    /// Encodes, quantizes and decodes one utterance with the code of
    /// `target`, returning log-mel frames in the original (unstandardized)
    /// domain together with the codebook indices used.
    pub fn convert_mel(&self, mel: &MelFrames, target: &str) -> Result<(MelFrames, Vec<usize>)> {
        let spk = self.speaker_index(target)?;
        let x = self.prepare(mel)?;
        let t = x.shape[1];
        let z = self.encode_batch(&x)?;
        let n = z.shape[1];
        let quant = quantize(&z.data, n, &self.codebook)?;
        let zq = Tensor::new(z.shape.clone(), quant.quantized)?;
        let y = self.decode_batch(&zq, &[spk], t)?;
        let frames = Array2::from_shape_vec((t, self.config.n_mels), y.data)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok((
            MelFrames {
                frames: self.norm.invert(&frames),
                config: self.features.mel.clone(),
            },
            quant.indices,
        ))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_model(seed: u64) -> VcModel {
        let config = ModelConfig {
            n_mels: 16,
            encoder_channels: [8, 8, 8, 8],
            code_dim: 4,
            codes: 16,
            speaker_dim: 3,
            decoder_channels: 8,
            decoder_blocks: 2,
            ..Default::default()
        };
        let features = FeatureConfig {
            mel: MelConfig {
                n_mels: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let norm = MelNorm {
            mean: vec![0.0; 16],
            std: vec![1.0; 16],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VcModel::new(config, features, norm, vec!["a".into(), "b".into()], &mut rng).unwrap()
    }

    fn rand_batch(b: usize, t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![b, t, c], (0..b * t * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn latent_length_follows_conv_arithmetic() {
        let m = small_model(0);
        // T → same-padded stride-1 (T), stride-2 (ceil(T/2)), then stride 1
        for (t, n) in [(4, 2), (5, 3), (6, 3), (7, 4), (32, 16), (33, 17)] {
            let z = m.encode_batch(&rand_batch(1, t, 16, t as u64)).unwrap();
            assert_eq!(z.shape, vec![1, n, 4], "T = {t}");
            assert_eq!(ModelConfig::latent_len(t), n);
        }
        let short = m.encode_batch(&rand_batch(1, 3, 16, 0));
        assert!(matches!(short, Err(Error::TooShort(_))));
    }

    #[test]
    fn doubling_input_doubles_latents() {
        let m = small_model(1);
        let a = m.encode_batch(&rand_batch(1, 20, 16, 2)).unwrap();
        let b = m.encode_batch(&rand_batch(1, 40, 16, 3)).unwrap();
        assert_eq!(b.shape[1], 2 * a.shape[1]);
    }

    #[test]
    fn zero_input_gives_finite_latents() {
        let m = small_model(2);
        let z = m.encode_batch(&Tensor::zeros(&[1, 10, 16])).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn loss_is_recon_plus_weighted_commit() {
        let mut m = small_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_batch(2, 12, 16, 4);
        let z = m.encode_batch(&x).unwrap();
        m.codebook.init_from(&z.data, z.numel() / 4, &mut rng).unwrap();
        let f = m.forward_train(&x, &[0, 1], 0.25, true).unwrap();
        assert_eq!(f.total, f.recon + 0.25 * f.commit);
        assert!((f.commit - f.quant.commit_loss).abs() < 1e-12);
        for (j, &k) in f.quant.indices.iter().enumerate() {
            assert_eq!(&f.quant.quantized[j * 4..(j + 1) * 4], m.codebook.row(k));
        }
    }

    #[test]
    fn target_speaker_only_affects_decoder() {
        let mut m = small_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_batch(1, 16, 16, 5);
        let z = m.encode_batch(&x).unwrap();
        m.codebook.init_from(&z.data, z.numel() / 4, &mut rng).unwrap();
        let mel = MelFrames {
            frames: Array2::from_shape_vec((16, 16), x.data.clone()).unwrap(),
            config: m.features.mel.clone(),
        };
        let (ya, ia) = m.convert_mel(&mel, "a").unwrap();
        let (yb, ib) = m.convert_mel(&mel, "b").unwrap();
        assert_eq!(ia, ib);
        assert_ne!(ya.frames, yb.frames);
        assert!(matches!(m.convert_mel(&mel, "zz"), Err(Error::UnknownSpeaker(_))));
    }

    #[test]
    fn norm_round_trip() {
        let f = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let n = MelNorm::fit([&f]).unwrap();
        let back = n.invert(&n.apply(&f));
        for (a, b) in back.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
