//! Reverse-mode differentiation over a recorded sequence of operations.
//!
//! Every operation appends a node, so node order is a topological order and
//! backward simply walks the nodes in reverse. Sequence tensors are
//! channel-last, `[B, T, C]`.

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length `ceil(T / stride)`, zero padding split evenly (extra on the right).
    Same,
    /// No padding, output length `(T − K) / stride + 1`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Var, Var),
    ExpandTime(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Mse {
        a: Var,
        target: Var,
    },
    Dot {
        x: Var,
        w: Vec<f64>,
    },
    StraightThrough(Var),
    Commitment {
        z: Var,
        zq: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates every forward value and backward gradient for NaN/Inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!("forward value of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false).expect("constant inputs are not checked")
    }

    /// A differentiable leaf whose gradient is kept after backward.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Registers parameter `id` as a leaf; its gradient is returned by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.tensor(id).clone())?;
        self.params.push((id, v));
        Ok(v)
    }

    /// `x·W + b` over the last axis; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (&self.value(x).shape, &self.value(w).shape);
        let d_in = self.value(x).last_dim();
        if ws.len() != 2 || ws[0] != d_in {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let d_out = ws[1];
        if let Some(b) = b {
            if self.value(b).shape != [d_out] {
                return Err(shape_err("linear", format!("bias {:?}, out {d_out}", self.value(b).shape)));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            for r in out.chunks_mut(d_out) {
                r.copy_from_slice(&self.value(b).data);
            }
        }
        gemm(rows, d_in, d_out, &self.value(x).data, false, &self.value(w).data, false, 1.0, &mut out);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = d_out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, ng)
    }

    /// 1-D convolution over `[B, T, Cin]` with weights `[K, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (bsz, t_in, c_in) = self.value(x).dims3("conv1d")?;
        let ws = self.value(w).shape.clone();
        if ws.len() != 3 || ws[1] != c_in || stride == 0 {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {ws:?}, stride {stride}", self.value(x).shape),
            ));
        }
        let (k, c_out) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).shape != [c_out] {
                return Err(shape_err("conv1d", format!("bias {:?}, out {c_out}", self.value(b).shape)));
            }
        }
        let (t_out, pad_left) = match padding {
            Padding::Same => {
                let t_out = t_in.div_ceil(stride);
                let total = ((t_out - 1) * stride + k).saturating_sub(t_in);
                (t_out, total / 2)
            }
            Padding::Valid => {
                if t_in < k {
                    return Err(shape_err("conv1d", format!("valid padding needs T ≥ K, got {t_in} < {k}")));
                }
                ((t_in - k) / stride + 1, 0)
            }
        };
        if t_out == 0 {
            return Err(shape_err("conv1d", "empty input"));
        }
        let kc = k * c_in;
        let xd = &self.value(x).data;
        let mut cols = vec![0.0; bsz * t_out * kc];
        for bi in 0..bsz {
            for t in 0..t_out {
                let row = &mut cols[(bi * t_out + t) * kc..][..kc];
                for j in 0..k {
                    let src = (t * stride + j) as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < t_in {
                        let off = (bi * t_in + src as usize) * c_in;
                        row[j * c_in..][..c_in].copy_from_slice(&xd[off..off + c_in]);
                    }
                }
            }
        }
        let mut out = vec![0.0; bsz * t_out * c_out];
        if let Some(b) = b {
            for r in out.chunks_mut(c_out) {
                r.copy_from_slice(&self.value(b).data);
            }
        }
        gemm(bsz * t_out, kc, c_out, &cols, false, &self.value(w).data, false, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        // only the weight gradient needs the unfolded input
        let cols = if self.ng(w) { cols } else { Vec::new() };
        self.push(
            Tensor {
                shape: vec![bsz, t_out, c_out],
                data: out,
            },
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                cols,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Normalizes each `(b, c)` channel over time, then applies per-channel
    /// `gamma`, `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (bsz, t, c) = self.value(x).dims3("instance_norm")?;
        if self.value(gamma).shape != [c] || self.value(beta).shape != [c] {
            return Err(shape_err(
                "instance_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape,
                    self.value(gamma).shape,
                    self.value(beta).shape
                ),
            ));
        }
        let xd = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; bsz * c];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let idx = |ti: usize| (bi * t + ti) * c + ci;
                let mean = (0..t).map(|ti| xd[idx(ti)]).sum::<f64>() / t as f64;
                let var = (0..t).map(|ti| (xd[idx(ti)] - mean).powi(2)).sum::<f64>() / t as f64;
                let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                inv_std[bi * c + ci] = is;
                for ti in 0..t {
                    let h = (xd[idx(ti)] - mean) * is;
                    xhat[idx(ti)] = h;
                    out[idx(ti)] = g[ci] * h + bt[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.value(x).shape.clone();
        self.push(
            Tensor { shape, data: out },
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Rows `ids` of a `[S, E]` table, giving `[len(ids), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = &self.value(table).shape;
        if ts.len() != 2 {
            return Err(shape_err("embedding_lookup", format!("table {ts:?}")));
        }
        let (s, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= s) {
            return Err(shape_err("embedding_lookup", format!("id {bad} outside table of {s} rows")));
        }
        let td = &self.value(table).data;
        let data = ids.iter().flat_map(|&i| td[i * e..(i + 1) * e].iter().copied()).collect();
        let ng = self.ng(table);
        self.push(
            Tensor {
                shape: vec![ids.len(), e],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for (ra, rb) in ad.chunks(ca).zip(bd.chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Concat(a, b), ng)
    }

    /// Repeats `[B, E]` over `t` frames: `[B, t, E]`.
    pub fn expand_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = &self.value(x).shape;
        if s.len() != 2 || t == 0 {
            return Err(shape_err("expand_time", format!("x {s:?}, t {t}")));
        }
        let (b, e) = (s[0], s[1]);
        let xd = &self.value(x).data;
        let mut data = Vec::with_capacity(b * t * e);
        for bi in 0..b {
            for _ in 0..t {
                data.extend_from_slice(&xd[bi * e..(bi + 1) * e]);
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor {
                shape: vec![b, t, e],
                data,
            },
            Op::ExpandTime(x),
            ng,
        )
    }

    /// Repeats every frame `factor` times and keeps the first `out_len` frames.
    pub fn upsample_repeat(&mut self, x: Var, factor: usize, out_len: usize) -> Result<Var> {
        let (b, n, c) = self.value(x).dims3("upsample_repeat")?;
        if factor == 0 || out_len == 0 || out_len > n * factor {
            return Err(shape_err(
                "upsample_repeat",
                format!("{n} frames × {factor} cannot give {out_len}"),
            ));
        }
        let xd = &self.value(x).data;
        let mut data = Vec::with_capacity(b * out_len * c);
        for bi in 0..b {
            for t in 0..out_len {
                let off = (bi * n + t / factor) * c;
                data.extend_from_slice(&xd[off..off + c]);
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor {
                shape: vec![b, out_len, c],
                data,
            },
            Op::Upsample { x, factor },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * s).collect(),
        };
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    /// Mean of squared differences over all elements; a scalar.
    pub fn mse_loss(&mut self, a: Var, target: Var) -> Result<Var> {
        if self.value(a).shape != self.value(target).shape {
            return Err(shape_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.value(a).shape, self.value(target).shape),
            ));
        }
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(target).data)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let ng = self.ng(a) || self.ng(target);
        self.push(Tensor::scalar(s / n), Op::Mse { a, target }, ng)
    }

    /// `Σ_i w_i·x_i` with constant weights; a scalar.
    pub fn dot(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.value(x).shape != w.shape {
            return Err(shape_err("dot", format!("{:?} vs {:?}", self.value(x).shape, w.shape)));
        }
        let s: f64 = self.value(x).data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Dot { x, w: w.data.clone() }, ng)
    }

    /// Forward value `zq`; the gradient arriving here is passed to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, zq: &Tensor) -> Result<Var> {
        if self.value(z).shape != zq.shape {
            return Err(shape_err(
                "straight_through",
                format!("{:?} vs {:?}", self.value(z).shape, zq.shape),
            ));
        }
        let ng = self.ng(z);
        self.push(zq.clone(), Op::StraightThrough(z), ng)
    }

    /// `(1/N)·Σ_j ‖z_j − zq_j‖²` over the `N` rows of the last axis, with
    /// `zq` held constant.
    pub fn commitment(&mut self, z: Var, zq: &Tensor) -> Result<Var> {
        if self.value(z).shape != zq.shape {
            return Err(shape_err(
                "commitment",
                format!("{:?} vs {:?}", self.value(z).shape, zq.shape),
            ));
        }
        let rows = (self.value(z).numel() / self.value(z).last_dim()) as f64;
        let s: f64 = self.value(z).data.iter().zip(&zq.data).map(|(a, b)| (a - b).powi(2)).sum();
        let ng = self.ng(z);
        self.push(
            Tensor::scalar(s / rows),
            Op::Commitment {
                z,
                zq: zq.data.clone(),
            },
            ng,
        )
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
    }

    /// Accumulates d`loss`/d`node` into every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss must be a scalar, got {:?}", self.value(loss).shape)));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.ng(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", op_name(&self.nodes[i].op))));
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Input | Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let d_in = self.value(x).last_dim();
                let d_out = self.value(w).shape[1];
                let rows = self.value(x).numel() / d_in;
                if self.ng(x) {
                    let wd = self.value(w).data.clone();
                    let gx = self.grad_buf(x).unwrap();
                    gemm(rows, d_out, d_in, g, false, &wd, true, 1.0, gx);
                }
                if self.ng(w) {
                    let xd = self.value(x).data.clone();
                    let gw = self.grad_buf(w).unwrap();
                    gemm(d_in, rows, d_out, &xd, true, g, false, 1.0, gw);
                }
                if let Some(b) = b.filter(|&b| self.ng(b)) {
                    let gb = self.grad_buf(b).unwrap();
                    for r in g.chunks(d_out) {
                        for (a, v) in gb.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                ref cols,
            } => {
                let (bsz, t_in, c_in) = self.value(x).dims3("conv1d").unwrap();
                let ws = self.value(w).shape.clone();
                let (k, c_out) = (ws[0], ws[2]);
                let t_out = self.nodes[i].value.shape[1];
                let kc = k * c_in;
                if self.ng(w) {
                    let gw = self.grad_buf(w).unwrap();
                    gemm(kc, bsz * t_out, c_out, cols, true, g, false, 1.0, gw);
                }
                if let Some(b) = b.filter(|&b| self.ng(b)) {
                    let gb = self.grad_buf(b).unwrap();
                    for r in g.chunks(c_out) {
                        for (a, v) in gb.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                }
                if self.ng(x) {
                    let mut dcols = vec![0.0; bsz * t_out * kc];
                    let wd = self.value(w).data.clone();
                    gemm(bsz * t_out, c_out, kc, g, false, &wd, true, 0.0, &mut dcols);
                    let gx = self.grad_buf(x).unwrap();
                    for bi in 0..bsz {
                        for t in 0..t_out {
                            let row = &dcols[(bi * t_out + t) * kc..][..kc];
                            for j in 0..k {
                                let src = (t * stride + j) as isize - pad_left as isize;
                                if src >= 0 && (src as usize) < t_in {
                                    let off = (bi * t_in + src as usize) * c_in;
                                    for (a, v) in gx[off..off + c_in].iter_mut().zip(&row[j * c_in..][..c_in]) {
                                        *a += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.ng(x) {
                    let xd = self.value(x).data.clone();
                    let gx = self.grad_buf(x).unwrap();
                    for ((a, &v), &gv) in gx.iter_mut().zip(&xd).zip(g) {
                        if v > 0.0 {
                            *a += gv;
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let (bsz, t, c) = self.value(x).dims3("instance_norm").unwrap();
                let gam = self.value(gamma).data.clone();
                if self.ng(gamma) {
                    let gg = self.grad_buf(gamma).unwrap();
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % c] += gv * h;
                    }
                }
                if self.ng(beta) {
                    let gb = self.grad_buf(beta).unwrap();
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % c] += gv;
                    }
                }
                if self.ng(x) {
                    let gx = self.grad_buf(x).unwrap();
                    let tf = t as f64;
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let idx = |ti: usize| (bi * t + ti) * c + ci;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for ti in 0..t {
                                let dh = g[idx(ti)] * gam[ci];
                                s1 += dh;
                                s2 += dh * xhat[idx(ti)];
                            }
                            let is = inv_std[bi * c + ci];
                            for ti in 0..t {
                                let dh = g[idx(ti)] * gam[ci];
                                gx[idx(ti)] += is / tf * (tf * dh - s1 - xhat[idx(ti)] * s2);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.ng(table) {
                    let e = self.value(table).shape[1];
                    let gt = self.grad_buf(table).unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, v) in gt[id * e..(id + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
                if self.ng(a) {
                    let ga = self.grad_buf(a).unwrap();
                    for (dst, src) in ga.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        for (d, s) in dst.iter_mut().zip(&src[..ca]) {
                            *d += s;
                        }
                    }
                }
                if self.ng(b) {
                    let gb = self.grad_buf(b).unwrap();
                    for (dst, src) in gb.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        for (d, s) in dst.iter_mut().zip(&src[ca..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ExpandTime(x) => {
                if self.ng(x) {
                    let t = self.nodes[i].value.shape[1];
                    let e = self.value(x).shape[1];
                    let gx = self.grad_buf(x).unwrap();
                    for (r, src) in g.chunks(e).enumerate() {
                        for (d, s) in gx[(r / t) * e..][..e].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if self.ng(x) {
                    let (_, n, c) = self.value(x).dims3("upsample_repeat").unwrap();
                    let out_len = self.nodes[i].value.shape[1];
                    let gx = self.grad_buf(x).unwrap();
                    for (r, src) in g.chunks(c).enumerate() {
                        let (bi, t) = (r / out_len, r % out_len);
                        let off = (bi * n + t / factor) * c;
                        for (d, s) in gx[off..off + c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_buf(v) {
                        for (d, s) in gv.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.grad_buf(x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::Mse { a, target } => {
                let n = self.value(a).numel() as f64;
                let diff: Vec<f64> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(&self.value(target).data)
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                if let Some(ga) = self.grad_buf(a) {
                    for (d, v) in ga.iter_mut().zip(&diff) {
                        *d += v;
                    }
                }
                if let Some(gt) = self.grad_buf(target) {
                    for (d, v) in gt.iter_mut().zip(&diff) {
                        *d -= v;
                    }
                }
            }
            Op::Dot { x, ref w } => {
                if let Some(gx) = self.grad_buf(x) {
                    for (d, v) in gx.iter_mut().zip(w) {
                        *d += v * g[0];
                    }
                }
            }
            Op::StraightThrough(z) => {
                if let Some(gz) = self.grad_buf(z) {
                    for (d, v) in gz.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Commitment { z, ref zq } => {
                let rows = (self.value(z).numel() / self.value(z).last_dim()) as f64;
                let zd = self.value(z).data.clone();
                if let Some(gz) = self.grad_buf(z) {
                    for ((d, a), b) in gz.iter_mut().zip(&zd).zip(zq) {
                        *d += 2.0 / rows * (a - b) * g[0];
                    }
                }
            }
        }
    }

    /// Gradients of every registered parameter after [`Graph::backward`],
    /// indexed by parameter id. Parameters the loss does not reach get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.tensor(ParamId(i)).numel()]).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                for (d, s) in out[id.0].iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        out
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::Conv1d { .. } => "conv1d",
        Op::Relu(_) => "relu",
        Op::InstanceNorm { .. } => "instance_norm",
        Op::Embedding { .. } => "embedding_lookup",
        Op::Concat(..) => "concat",
        Op::ExpandTime(_) => "expand_time",
        Op::Upsample { .. } => "upsample_repeat",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Mse { .. } => "mse_loss",
        Op::Dot { .. } => "dot",
        Op::StraightThrough(_) => "straight_through",
        Op::Commitment { .. } => "commitment",
    }
}
