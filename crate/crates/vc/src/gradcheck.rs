//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Padding, Var};
use crate::tensor::Tensor;
use crate::vq::{quantize, Codebook};

pub const FD_STEP: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds `f` over leaves holding `inputs` and compares its analytic
/// gradient with central differences of step `h`. Returns the largest
/// norm-wise relative error over the inputs.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ins.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data[0])
    };
    let mut g = Graph::new().with_finite_checks(true);
    let vars = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for i in 0..numeric.len() {
            let orig = work[k].data[i];
            work[k].data[i] = orig + h;
            let up = eval(&work)?;
            work[k].data[i] = orig - h;
            let down = eval(&work)?;
            work[k].data[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Random values with magnitude at least `margin`, for piecewise-linear ops.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_tensor(shape, rng);
    for v in &mut t.data {
        *v = v.signum() * (margin + v.abs());
    }
    t
}

/// Reduces an op output to a scalar through random weights, so every output
/// element carries a distinct upstream gradient. A linear functional keeps
/// the scalar on the scale of the output, which keeps finite-difference
/// roundoff proportional to the gradient being checked.
fn reduce(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&g.value(y).shape.clone(), &mut rng);
    g.dot(y, &w)
}

pub const OPERATORS: [&str; 14] = [
    "linear",
    "conv1d",
    "relu",
    "instance_norm",
    "embedding_lookup",
    "concat",
    "expand_time",
    "upsample_repeat",
    "add",
    "scale",
    "mse_loss",
    "dot",
    "straight_through",
    "commitment",
];

/// One random finite-difference check of operator `name`; returns the
/// relative error.
pub fn check_operator(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..=2);
    let t = rng.gen_range(2..=6);
    let c = rng.gen_range(1..=4);
    let r = rng.gen::<u64>();
    match name {
        "linear" => {
            let d_out = rng.gen_range(1..=4);
            let ins = [rand_tensor(&[b, t, c], &mut rng), rand_tensor(&[c, d_out], &mut rng), rand_tensor(&[d_out], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                reduce(g, y, r)
            })
        }
        "conv1d" => {
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
            let t = t.max(k);
            let c_out = rng.gen_range(1..=3);
            let ins = [rand_tensor(&[b, t, c], &mut rng), rand_tensor(&[k, c, c_out], &mut rng), rand_tensor(&[c_out], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), stride, pad)?;
                reduce(g, y, r)
            })
        }
        "relu" => {
            let ins = [away_from_zero(&[b, t, c], 0.01, &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.relu(v[0])?;
                reduce(g, y, r)
            })
        }
        "instance_norm" => {
            // with two frames the normalized output is ±1 up to the eps term,
            // so the input gradient is O(eps) and below difference resolution
            let t = t.max(3);
            let ins = [rand_tensor(&[b, t, c], &mut rng), rand_tensor(&[c], &mut rng), rand_tensor(&[c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.instance_norm(v[0], v[1], v[2])?;
                reduce(g, y, r)
            })
        }
        "embedding_lookup" => {
            let s = rng.gen_range(1..=4);
            let ids: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..s)).collect();
            let ins = [rand_tensor(&[s, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.embedding(v[0], &ids)?;
                reduce(g, y, r)
            })
        }
        "concat" => {
            let c2 = rng.gen_range(1..=3);
            let ins = [rand_tensor(&[b, t, c], &mut rng), rand_tensor(&[b, t, c2], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.concat(v[0], v[1])?;
                reduce(g, y, r)
            })
        }
        "expand_time" => {
            let ins = [rand_tensor(&[b, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.expand_time(v[0], t)?;
                reduce(g, y, r)
            })
        }
        "upsample_repeat" => {
            let factor = rng.gen_range(1..=3);
            let out_len = rng.gen_range((t - 1) * factor + 1..=t * factor);
            let ins = [rand_tensor(&[b, t, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.upsample_repeat(v[0], factor, out_len)?;
                reduce(g, y, r)
            })
        }
        "add" => {
            let ins = [rand_tensor(&[b, t, c], &mut rng), rand_tensor(&[b, t, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.add(v[0], v[1])?;
                reduce(g, y, r)
            })
        }
        "scale" => {
            let s = rng.gen_range(-3.0..3.0);
            let ins = [rand_tensor(&[b, t, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| {
                let y = g.scale(v[0], s)?;
                reduce(g, y, r)
            })
        }
        "mse_loss" => {
            let ins = [rand_tensor(&[b, t, c], &mut rng), rand_tensor(&[b, t, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| g.mse_loss(v[0], v[1]))
        }
        "dot" => {
            let w = rand_tensor(&[b, t, c], &mut rng);
            let ins = [rand_tensor(&[b, t, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| g.dot(v[0], &w))
        }
        "straight_through" => {
            // the forward value is a constant, so finite differences see the
            // identity map only through the surrogate z + (zq − z₀)
            let z0 = rand_tensor(&[b, t, c], &mut rng);
            let zq = rand_tensor(&[b, t, c], &mut rng);
            let shift = Tensor {
                shape: z0.shape.clone(),
                data: zq.data.iter().zip(&z0.data).map(|(q, z)| q - z).collect(),
            };
            let analytic = {
                let mut g = Graph::new();
                let z = g.leaf(z0.clone())?;
                let q = g.straight_through(z, &zq)?;
                let l = reduce(&mut g, q, r)?;
                g.backward(l)?;
                g.grad(z).unwrap().to_vec()
            };
            let surrogate = {
                let mut g = Graph::new();
                let z = g.leaf(z0.clone())?;
                let s = g.input(shift.clone());
                let q = g.add(z, s)?;
                let l = reduce(&mut g, q, r)?;
                g.backward(l)?;
                g.grad(z).unwrap().to_vec()
            };
            let numeric = check_gradients(&[z0], FD_STEP, |g, v| {
                let s = g.input(shift.clone());
                let q = g.add(v[0], s)?;
                reduce(g, q, r)
            })?;
            Ok(numeric.max(rel_err(&analytic, &surrogate)))
        }
        "commitment" => {
            let zq = rand_tensor(&[b, t, c], &mut rng);
            let ins = [rand_tensor(&[b, t, c], &mut rng)];
            check_gradients(&ins, FD_STEP, |g, v| g.commitment(v[0], &zq))
        }
        other => Err(crate::error::Error::InvalidConfig(format!("no gradient check for '{other}'"))),
    }
}

/// End-to-end check through a conv encoder, the quantizer and a linear
/// decoder. Assignments are computed once at the base point and held fixed;
/// the finite differences see `L(z + (ẑ₀ − z₀)) + β·commit(z; ẑ₀)`, whose
/// gradient at the base point is what the straight-through path produces.
/// Returns the relative error over encoder and decoder parameters.
pub fn check_bottleneck(seed: u64, beta: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, c_in, d) = (2, rng.gen_range(4..=8), 3, 2);
    let x = rand_tensor(&[b, t, c_in], &mut rng);
    let w_enc = rand_tensor(&[3, c_in, d], &mut rng);
    let w_dec = rand_tensor(&[d, c_in], &mut rng);
    let n = t.div_ceil(2);
    let target = rand_tensor(&[b, t, c_in], &mut rng);
    let cb = Codebook::from_rows(rand_tensor(&[8, d], &mut rng).data, d)?;

    let encode = |g: &mut Graph, w: Var| -> Result<Var> {
        let xi = g.input(x.clone());
        g.conv1d(xi, w, None, 2, Padding::Same)
    };
    let decode_loss = |g: &mut Graph, q: Var, w: Var| -> Result<Var> {
        let up = g.upsample_repeat(q, 2, t)?;
        let y = g.linear(up, w, None)?;
        let tg = g.input(target.clone());
        g.mse_loss(y, tg)
    };

    // base point: assignments and ẑ₀
    let mut g0 = Graph::new();
    let we = g0.leaf(w_enc.clone())?;
    let z0v = encode(&mut g0, we)?;
    let z0 = g0.value(z0v).clone();
    let q0 = quantize(&z0.data, b * n, &cb)?;
    let zq = Tensor::new(z0.shape.clone(), q0.quantized.clone())?;

    let analytic = {
        let mut g = Graph::new().with_finite_checks(true);
        let we = g.leaf(w_enc.clone())?;
        let wd = g.leaf(w_dec.clone())?;
        let z = encode(&mut g, we)?;
        let q = g.straight_through(z, &zq)?;
        let rec = decode_loss(&mut g, q, wd)?;
        let com = g.commitment(z, &zq)?;
        let com = g.scale(com, beta)?;
        let l = g.add(rec, com)?;
        g.backward(l)?;
        [g.grad(we).unwrap().to_vec(), g.grad(wd).unwrap().to_vec()]
    };
    let shift = Tensor::new(z0.shape.clone(), zq.data.iter().zip(&z0.data).map(|(q, z)| q - z).collect())?;
    let surrogate = |ws: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let we = g.leaf(ws[0].clone())?;
        let wd = g.leaf(ws[1].clone())?;
        let z = encode(&mut g, we)?;
        let s = g.input(shift.clone());
        let q = g.add(z, s)?;
        let rec = decode_loss(&mut g, q, wd)?;
        let com = g.commitment(z, &zq)?;
        let com = g.scale(com, beta)?;
        let l = g.add(rec, com)?;
        Ok(g.value(l).data[0])
    };
    let mut work = vec![w_enc, w_dec];
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        let mut numeric = vec![0.0; work[k].numel()];
        for i in 0..numeric.len() {
            let orig = work[k].data[i];
            work[k].data[i] = orig + FD_STEP;
            let up = surrogate(&work)?;
            work[k].data[i] = orig - FD_STEP;
            let down = surrogate(&work)?;
            work[k].data[i] = orig;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[k], &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes_the_gate() {
        for name in OPERATORS {
            for i in 0..50 {
                let e = check_operator(name, 1000 + i).unwrap();
                assert!(e <= 1e-6, "{name} instance {i}: relative error {e:e}");
            }
        }
    }

    #[test]
    fn bottleneck_path_matches_finite_differences() {
        for i in 0..50 {
            for beta in [0.25, 0.0] {
                let e = check_bottleneck(i, beta).unwrap();
                assert!(e <= 1e-4, "instance {i} β={beta}: {e:e}");
            }
        }
    }

    #[test]
    fn gate_detects_a_wrong_gradient() {
        // scale's backward is exact; perturb the function between the
        // analytic and numeric passes to confirm a mismatch is reported
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let flip = std::cell::Cell::new(0usize);
        let e = check_gradients(&[x], FD_STEP, |g, v| {
            flip.set(flip.get() + 1);
            let s = if flip.get() == 1 { 2.0 } else { 3.0 };
            let y = g.scale(v[0], s)?;
            let z = g.input(Tensor::zeros(&[3]));
            g.mse_loss(y, z)
        })
        .unwrap();
        assert!(e > 0.1);
    }

    #[test]
    fn unknown_operator_rejected() {
        assert!(check_operator("softmax", 0).is_err());
    }
}
