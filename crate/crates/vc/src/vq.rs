use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_CODES: usize = 512;
pub const DEFAULT_CODE_DIM: usize = 64;
pub const DEFAULT_DECAY: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Rows whose EMA count falls below this are reseeded.
pub const DEAD_CODE_THRESHOLD: f64 = 1e-3;
/// Relative jitter added to rows copied from encoder outputs.
const JITTER: f64 = 1e-2;

/// Codebook with exponential-moving-average state. Vectors are stored
/// row-major, `size × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    /// The selected rows, `N × dim`.
    pub quantized: Vec<f64>,
    pub indices: Vec<usize>,
    /// `(1/N)·Σ_j ‖z_j − ẑ_j‖²`.
    pub commit_loss: f64,
}

impl Codebook {
    /// A zero codebook with empty EMA state; call [`Codebook::init_from`]
    /// before use.
    pub fn new(size: usize, dim: usize, decay: f64, epsilon: f64) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!("codebook {size}×{dim}")));
        }
        if !(0.0..1.0).contains(&decay) || epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("codebook decay {decay}, epsilon {epsilon}")));
        }
        Ok(Self {
            size,
            dim,
            vectors: vec![0.0; size * dim],
            ema_counts: vec![0.0; size],
            ema_sums: vec![0.0; size * dim],
            decay,
            epsilon,
        })
    }

    /// A codebook holding the given rows, with default EMA settings.
    pub fn from_rows(rows: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || rows.is_empty() || rows.len() % dim != 0 {
            return Err(shape_err("codebook", format!("{} values for dim {dim}", rows.len())));
        }
        let mut cb = Self::new(rows.len() / dim, dim, DEFAULT_DECAY, DEFAULT_EPSILON)?;
        cb.vectors = rows;
        Ok(cb)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().chain(&self.ema_counts).chain(&self.ema_sums).all(|v| v.is_finite())
    }

    fn jittered_copy<R: Rng>(&mut self, i: usize, src: &[f64], scale: f64, rng: &mut R) {
        for (d, s) in self.vectors[i * self.dim..(i + 1) * self.dim].iter_mut().zip(src) {
            *d = s + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }

    fn rms(z: &[f64]) -> f64 {
        (z.iter().map(|v| v * v).sum::<f64>() / z.len().max(1) as f64).sqrt()
    }

    /// Fills every row with a uniformly drawn row of `z` (`n × dim`) plus a
    /// small jitter so that repeated draws stay distinct.
    pub fn init_from<R: Rng>(&mut self, z: &[f64], n: usize, rng: &mut R) -> Result<()> {
        self.check(z, n)?;
        if n == 0 {
            return Err(Error::InvalidConfig("codebook initialization needs at least one latent".into()));
        }
        let scale = JITTER * Self::rms(z).max(1e-12);
        for i in 0..self.size {
            let j = rng.gen_range(0..n);
            let src = z[j * self.dim..(j + 1) * self.dim].to_vec();
            self.jittered_copy(i, &src, scale, rng);
        }
        self.ema_counts.fill(0.0);
        self.ema_sums.fill(0.0);
        Ok(())
    }

    fn check(&self, z: &[f64], n: usize) -> Result<()> {
        if z.len() != n * self.dim {
            return Err(shape_err(
                "quantize",
                format!("{} values for {n} rows of dim {}", z.len(), self.dim),
            ));
        }
        Ok(())
    }

    /// One EMA step from the latents `z` and their assignments.
    ///
    /// Counts and sums decay towards the batch statistics; counts are
    /// Laplace-smoothed over the total before dividing. Rows whose count is
    /// exactly zero (never assigned) keep their vectors.
    pub fn ema_update(&mut self, z: &[f64], indices: &[usize]) -> Result<()> {
        self.check(z, indices.len())?;
        let (d, decay) = (self.dim, self.decay);
        let mut n = vec![0.0; self.size];
        let mut sums = vec![0.0; self.size * d];
        for (j, &k) in indices.iter().enumerate() {
            if k >= self.size {
                return Err(shape_err("ema_update", format!("index {k} outside {} rows", self.size)));
            }
            n[k] += 1.0;
            for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(&z[j * d..(j + 1) * d]) {
                *s += v;
            }
        }
        for i in 0..self.size {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * n[i];
        }
        for (e, s) in self.ema_sums.iter_mut().zip(&sums) {
            *e = decay * *e + (1.0 - decay) * s;
        }
        let total: f64 = self.ema_counts.iter().sum();
        let denom = total + self.size as f64 * self.epsilon;
        for i in 0..self.size {
            if self.ema_counts[i] > 0.0 {
                let smoothed = (self.ema_counts[i] + self.epsilon) / denom * total;
                for k in 0..d {
                    self.vectors[i * d + k] = self.ema_sums[i * d + k] / smoothed;
                }
            }
        }
        Ok(())
    }

    /// Replaces rows whose EMA count is below [`DEAD_CODE_THRESHOLD`] with
    /// randomly drawn rows of `z` plus jitter, clearing their EMA state.
    /// Returns the number of rows replaced.
    pub fn reseed_dead<R: Rng>(&mut self, z: &[f64], n: usize, rng: &mut R) -> Result<usize> {
        self.check(z, n)?;
        if n == 0 {
            return Ok(0);
        }
        let scale = JITTER * Self::rms(z).max(1e-12);
        let mut replaced = 0;
        for i in 0..self.size {
            if self.ema_counts[i] < DEAD_CODE_THRESHOLD {
                let j = rng.gen_range(0..n);
                let src = z[j * self.dim..(j + 1) * self.dim].to_vec();
                self.jittered_copy(i, &src, scale, rng);
                self.ema_counts[i] = 0.0;
                self.ema_sums[i * self.dim..(i + 1) * self.dim].fill(0.0);
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codebook row for each of the `n` rows of `z`; ties go to the
/// lowest index.
pub fn quantize(z: &[f64], n: usize, cb: &Codebook) -> Result<QuantizeResult> {
    cb.check(z, n)?;
    let d = cb.dim;
    let mut quantized = Vec::with_capacity(n * d);
    let mut indices = Vec::with_capacity(n);
    let mut commit = 0.0;
    for j in 0..n {
        let zj = &z[j * d..(j + 1) * d];
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for i in 0..cb.size {
            let dist = sq_dist(zj, cb.row(i));
            if dist < best_d {
                best = i;
                best_d = dist;
            }
        }
        if !best_d.is_finite() {
            return Err(Error::NonFinite(format!("distance for latent row {j}")));
        }
        indices.push(best);
        quantized.extend_from_slice(cb.row(best));
        commit += best_d;
    }
    Ok(QuantizeResult {
        quantized,
        indices,
        commit_loss: if n == 0 { 0.0 } else { commit / n as f64 },
    })
}
