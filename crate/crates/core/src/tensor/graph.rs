//! Recorded-graph reverse-mode autodiff.
//!
//! A [`Graph`] is a Wengert tape: every forward call appends the produced
//! value plus an op record naming its inputs. Records are therefore already in
//! topological order, and [`Graph::backward`] visits each exactly once in
//! reverse. Gradients accumulate across repeated backward calls until
//! [`Graph::zero_grads`] is invoked. Non-finite values (forward or backward)
//! are hard errors, never silent.

use super::kernels::{self, Conv2dDims, ConvT2dDims};
use super::{Tensor, TensorError, TensorResult};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Quantizer behavior inside a recorded forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantizeMode {
    /// Round half away from zero; gradient passes straight through.
    Round,
    /// Additive U(-0.5, 0.5) surrogate noise, regenerated from this seed on
    /// every evaluation (so repeated forwards of the same graph inputs are
    /// reproducible, which the finite-difference checks rely on).
    Noise { seed: u64 },
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { a: Var, s: f32 },
    Sum { a: Var },
    Mean { a: Var },
    LeakyRelu { a: Var, slope: f32 },
    Clamp01 { a: Var },
    RoundSte { a: Var },
    Reshape { a: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: Conv2dDims },
    ConvT2d { x: Var, w: Var, b: Option<Var>, dims: ConvT2dDims },
    Mse { a: Var, b: Var },
    LogisticBits { v: Var, mu: Var, log_scale: Var },
    Dihedral { a: Var, d: u8 },
    Resize { a: Var },
    PadZeroTopLeft { a: Var, top: usize, left: usize },
    Crop { a: Var, top: usize, left: usize },
    PadReplicate { a: Var, bottom: usize, right: usize },
    SubChannelMean { a: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires: bool,
    op: Op,
}

/// Reverse-mode tape over f32 tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const PMF_FLOOR: f64 = 1.0 / 65536.0;
const SIGMA_MIN: f64 = 1e-6;
const LN2: f64 = core::f64::consts::LN_2;

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Discretized-logistic probability of the unit bin centered on `v`.
#[inline]
fn bin_prob(v: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let a = (v - mu + 0.5) / sigma;
    let b = (v - mu - 0.5) / sigma;
    let sa = sigmoid(a);
    let sb = sigmoid(b);
    (sa - sb, a, b)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient buffer of `v`, if backward has deposited one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Inserts a trainable or attackable leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, requires: bool, op: Op) -> TensorResult<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise and reductions ───────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires || self.node(b).requires;
        self.push("add", value, req, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires || self.node(b).requires;
        self.push("sub", value, req, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires || self.node(b).requires;
        self.push("mul", value, req, Op::Mul { a, b })
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> TensorResult<Var> {
        let data = self.value(a).iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires;
        self.push("mul_scalar", value, req, Op::MulScalar { a, s })
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let total: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        let req = self.node(a).requires;
        self.push("sum", Tensor::scalar(total as f32), req, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let total: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        let req = self.node(a).requires;
        self.push(
            "mean",
            Tensor::scalar((total / n as f64) as f32),
            req,
            Op::Mean { a },
        )
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        // Subgradient at zero is zero, so relu == leaky_relu with slope 0.
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> TensorResult<Var> {
        let data = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires;
        self.push("leaky_relu", value, req, Op::LeakyRelu { a, slope })
    }

    pub fn clamp01(&mut self, a: Var) -> TensorResult<Var> {
        let data = self.value(a).iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires;
        self.push("clamp01", value, req, Op::Clamp01 { a })
    }

    /// Round half away from zero with a straight-through gradient.
    pub fn round_ste(&mut self, a: Var) -> TensorResult<Var> {
        let data = self.value(a).iter().map(|&x| x.round()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.node(a).requires;
        self.push("round_ste", value, req, Op::RoundSte { a })
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> TensorResult<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let req = self.node(a).requires;
        self.push("reshape", value, req, Op::Reshape { a })
    }

    // ── convolution ──────────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Var> {
        let dims = Conv2dDims::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(bv) = b {
            if self.shape(bv) != [dims.co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(bv).to_vec(),
                    rhs: vec![dims.co],
                });
            }
        }
        let mut out = vec![0.0f32; dims.n * dims.co * dims.oh * dims.ow];
        kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            dims,
            &mut out,
        );
        let value = Tensor::new(vec![dims.n, dims.co, dims.oh, dims.ow], out)?;
        let req = self.node(x).requires
            || self.node(w).requires
            || b.is_some_and(|bv| self.node(bv).requires);
        self.push("conv2d", value, req, Op::Conv2d { x, w, b, dims })
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Var> {
        let dims = ConvT2dDims::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(bv) = b {
            if self.shape(bv) != [dims.ci] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_transpose",
                    lhs: self.shape(bv).to_vec(),
                    rhs: vec![dims.ci],
                });
            }
        }
        let mut out = vec![0.0f32; dims.n * dims.ci * dims.th * dims.tw];
        kernels::convt2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            dims,
            &mut out,
        );
        let value = Tensor::new(vec![dims.n, dims.ci, dims.th, dims.tw], out)?;
        let req = self.node(x).requires
            || self.node(w).requires
            || b.is_some_and(|bv| self.node(bv).requires);
        self.push("conv2d_transpose", value, req, Op::ConvT2d { x, w, b, dims })
    }

    // ── losses ───────────────────────────────────────────────────────────────

    /// Mean squared error over all elements (scalar output).
    pub fn mse(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mse",
                msg: "mse of empty tensors".into(),
            });
        }
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let req = self.node(a).requires || self.node(b).requires;
        self.push(
            "mse",
            Tensor::scalar((total / n as f64) as f32),
            req,
            Op::Mse { a, b },
        )
    }

    /// Total code length in bits of `v` (shape `[N, C, H, W]`) under a
    /// per-channel discretized logistic with location `mu` and scale
    /// `exp(log_scale)` (both `[C]`). Bin probabilities are floored at 2^-16
    /// and scales at 1e-6; floored elements contribute zero gradient.
    pub fn logistic_bits(&mut self, v: Var, mu: Var, log_scale: Var) -> TensorResult<Var> {
        let (_, c, _, _) = self.value(v).dims4("logistic_bits")?;
        if self.shape(mu) != [c] || self.shape(log_scale) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "logistic_bits",
                lhs: self.shape(mu).to_vec(),
                rhs: vec![c],
            });
        }
        let sigmas: Vec<f64> = self
            .value(log_scale)
            .iter()
            .map(|&ls| (ls as f64).exp().max(SIGMA_MIN))
            .collect();
        let mus: Vec<f64> = self.value(mu).iter().map(|&m| m as f64).collect();
        let (n, _, h, w) = self.value(v).dims4("logistic_bits")?;
        let plane = h * w;
        let data = self.value(v).data();
        let mut bits = 0.0f64;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for &x in &data[base..base + plane] {
                    let (p, _, _) = bin_prob(x as f64, mus[ci], sigmas[ci]);
                    bits -= p.max(PMF_FLOOR).log2();
                }
            }
        }
        let req =
            self.node(v).requires || self.node(mu).requires || self.node(log_scale).requires;
        self.push(
            "logistic_bits",
            Tensor::scalar(bits as f32),
            req,
            Op::LogisticBits { v, mu, log_scale },
        )
    }

    // ── spatial rearrangements (differentiable transform plumbing) ───────────

    /// Applies dihedral element `d` (see kernels) to a `[C, H, W]` tensor.
    pub fn dihedral(&mut self, a: Var, d: u8) -> TensorResult<Var> {
        if d >= 8 {
            return Err(TensorError::Invalid {
                op: "dihedral",
                msg: format!("element index {d} out of range"),
            });
        }
        let (c, h, w) = self.value(a).dims3("dihedral")?;
        let out = kernels::dihedral_apply(self.value(a).data(), c, h, w, d);
        let (h2, w2) = kernels::dihedral_dims(d, h, w);
        let value = Tensor::new(vec![c, h2, w2], out)?;
        let req = self.node(a).requires;
        self.push("dihedral", value, req, Op::Dihedral { a, d })
    }

    /// Bilinear align-corners resize of a `[C, H, W]` tensor.
    pub fn resize_bilinear(&mut self, a: Var, h2: usize, w2: usize) -> TensorResult<Var> {
        let (c, h, w) = self.value(a).dims3("resize_bilinear")?;
        if h2 == 0 || w2 == 0 {
            return Err(TensorError::Invalid {
                op: "resize_bilinear",
                msg: "target dims must be positive".into(),
            });
        }
        let out = kernels::bilinear_resize(self.value(a).data(), c, h, w, h2, w2);
        let value = Tensor::new(vec![c, h2, w2], out)?;
        let req = self.node(a).requires;
        self.push("resize_bilinear", value, req, Op::Resize { a })
    }

    /// Zero-pads `top` rows above and `left` columns before a `[C, H, W]`
    /// tensor (the canvas grows).
    pub fn pad_zero_top_left(&mut self, a: Var, top: usize, left: usize) -> TensorResult<Var> {
        let (c, h, w) = self.value(a).dims3("pad_zero_top_left")?;
        let (h2, w2) = (h + top, w + left);
        let mut out = vec![0.0f32; c * h2 * w2];
        let src = self.value(a).data();
        for ch in 0..c {
            for y in 0..h {
                let srow = (ch * h + y) * w;
                let drow = (ch * h2 + y + top) * w2 + left;
                out[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
            }
        }
        let value = Tensor::new(vec![c, h2, w2], out)?;
        let req = self.node(a).requires;
        self.push("pad_zero_top_left", value, req, Op::PadZeroTopLeft { a, top, left })
    }

    /// Crops a `[C, H, W]` tensor to `out_h x out_w` starting at (top, left).
    pub fn crop(
        &mut self,
        a: Var,
        top: usize,
        left: usize,
        out_h: usize,
        out_w: usize,
    ) -> TensorResult<Var> {
        let (c, h, w) = self.value(a).dims3("crop")?;
        if top + out_h > h || left + out_w > w || out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid {
                op: "crop",
                msg: format!("window ({top},{left})+{out_h}x{out_w} exceeds {h}x{w}"),
            });
        }
        let mut out = vec![0.0f32; c * out_h * out_w];
        let src = self.value(a).data();
        for ch in 0..c {
            for y in 0..out_h {
                let srow = (ch * h + y + top) * w + left;
                let drow = (ch * out_h + y) * out_w;
                out[drow..drow + out_w].copy_from_slice(&src[srow..srow + out_w]);
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        let req = self.node(a).requires;
        self.push("crop", value, req, Op::Crop { a, top, left })
    }

    /// Replicate-pads `bottom` rows and `right` columns after a `[C, H, W]`
    /// tensor (stride alignment for the codec).
    pub fn pad_replicate(&mut self, a: Var, bottom: usize, right: usize) -> TensorResult<Var> {
        let (c, h, w) = self.value(a).dims3("pad_replicate")?;
        let (h2, w2) = (h + bottom, w + right);
        let mut out = vec![0.0f32; c * h2 * w2];
        let src = self.value(a).data();
        for ch in 0..c {
            for y in 0..h2 {
                let sy = y.min(h - 1);
                let srow = (ch * h + sy) * w;
                let drow = (ch * h2 + y) * w2;
                out[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
                let edge = src[srow + w - 1];
                out[drow + w..drow + w2].fill(edge);
            }
        }
        let value = Tensor::new(vec![c, h2, w2], out)?;
        let req = self.node(a).requires;
        self.push("pad_replicate", value, req, Op::PadReplicate { a, bottom, right })
    }

    /// Subtracts each channel's spatial mean from a `[N, C, H, W]` tensor.
    pub fn sub_channel_mean(&mut self, a: Var) -> TensorResult<Var> {
        let (n, c, h, w) = self.value(a).dims4("sub_channel_mean")?;
        let plane = h * w;
        if plane == 0 {
            return Err(TensorError::Invalid {
                op: "sub_channel_mean",
                msg: "empty spatial extent".into(),
            });
        }
        let src = self.value(a).data();
        let mut out = vec![0.0f32; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let m: f64 = src[base..base + plane].iter().map(|&v| v as f64).sum::<f64>()
                    / plane as f64;
                let m = m as f32;
                for i in 0..plane {
                    out[base + i] = src[base + i] - m;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let req = self.node(a).requires;
        self.push("sub_channel_mean", value, req, Op::SubChannelMean { a })
    }

    // ── backward ─────────────────────────────────────────────────────────────

    fn accumulate(&self, buf: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut buf[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => buf[v.0] = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Each pass works in its own buffer
    /// seeded with 1.0 at the loss, then folds into the stored per-node
    /// gradients, so repeated backward calls accumulate (reset with
    /// [`Graph::zero_grads`]).
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.node(loss).requires {
            // Loss does not depend on any tracked leaf: nothing to do.
            return Ok(());
        }
        let mut buf: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        buf[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(gy) = buf[i].take() else {
                continue;
            };
            self.propagate(i, &gy, &mut buf)?;
            buf[i] = Some(gy);
        }
        for (i, g) in buf.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            match &mut self.nodes[i].grad {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[f32], buf: &mut [Option<Vec<f32>>]) -> TensorResult<()> {
        // Op records only reference earlier nodes, so reads of input values
        // below never alias the output node `idx`.
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(buf, a, gy);
                self.accumulate(buf, b, gy);
            }
            Op::Sub { a, b } => {
                self.accumulate(buf, a, gy);
                let neg: Vec<f32> = gy.iter().map(|g| -g).collect();
                self.accumulate(buf, b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires {
                    let ga: Vec<f32> = gy
                        .iter()
                        .zip(self.nodes[b.0].value.iter())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(buf, a, &ga);
                }
                if self.nodes[b.0].requires {
                    let gb: Vec<f32> = gy
                        .iter()
                        .zip(self.nodes[a.0].value.iter())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(buf, b, &gb);
                }
            }
            Op::MulScalar { a, s } => {
                let ga: Vec<f32> = gy.iter().map(|g| g * s).collect();
                self.accumulate(buf, a, &ga);
            }
            Op::Sum { a } => {
                let g = gy[0];
                let ga = vec![g; self.nodes[a.0].value.len()];
                self.accumulate(buf, a, &ga);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                let g = gy[0] / n as f32;
                let ga = vec![g; n];
                self.accumulate(buf, a, &ga);
            }
            Op::LeakyRelu { a, slope } => {
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(self.nodes[a.0].value.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(buf, a, &ga);
            }
            Op::Clamp01 { a } => {
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(self.nodes[a.0].value.iter())
                    .map(|(g, &x)| if (0.0..=1.0).contains(&x) { *g } else { 0.0 })
                    .collect();
                self.accumulate(buf, a, &ga);
            }
            Op::RoundSte { a } => {
                // Straight-through estimator: identity gradient.
                self.accumulate(buf, a, gy);
            }
            Op::Reshape { a } => {
                self.accumulate(buf, a, gy);
            }
            Op::Conv2d { x, w, b, dims } => {
                if self.nodes[x.0].requires {
                    let mut gx = vec![0.0f32; self.nodes[x.0].value.len()];
                    kernels::conv2d_bwd_input(gy, self.nodes[w.0].value.data(), dims, &mut gx);
                    self.accumulate(buf, x, &gx);
                }
                if self.nodes[w.0].requires {
                    let mut gw = vec![0.0f32; self.nodes[w.0].value.len()];
                    kernels::conv2d_bwd_weight(self.nodes[x.0].value.data(), gy, dims, &mut gw);
                    self.accumulate(buf, w, &gw);
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].requires {
                        let mut gb = vec![0.0f32; dims.co];
                        kernels::conv2d_bwd_bias(gy, dims, &mut gb);
                        self.accumulate(buf, bv, &gb);
                    }
                }
            }
            Op::ConvT2d { x, w, b, dims } => {
                if self.nodes[x.0].requires {
                    let mut gx = vec![0.0f32; self.nodes[x.0].value.len()];
                    kernels::convt2d_bwd_input(gy, self.nodes[w.0].value.data(), dims, &mut gx);
                    self.accumulate(buf, x, &gx);
                }
                if self.nodes[w.0].requires {
                    let mut gw = vec![0.0f32; self.nodes[w.0].value.len()];
                    kernels::convt2d_bwd_weight(self.nodes[x.0].value.data(), gy, dims, &mut gw);
                    self.accumulate(buf, w, &gw);
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].requires {
                        let mut gb = vec![0.0f32; dims.ci];
                        kernels::convt2d_bwd_bias(gy, dims, &mut gb);
                        self.accumulate(buf, bv, &gb);
                    }
                }
            }
            Op::Mse { a, b } => {
                let g = gy[0];
                let n = self.nodes[a.0].value.len() as f32;
                let scale = 2.0 * g / n;
                if self.nodes[a.0].requires {
                    let ga: Vec<f32> = self.nodes[a.0]
                        .value
                        .iter()
                        .zip(self.nodes[b.0].value.iter())
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    self.accumulate(buf, a, &ga);
                }
                if self.nodes[b.0].requires {
                    let gb: Vec<f32> = self.nodes[a.0]
                        .value
                        .iter()
                        .zip(self.nodes[b.0].value.iter())
                        .map(|(&x, &y)| -scale * (x - y))
                        .collect();
                    self.accumulate(buf, b, &gb);
                }
            }
            Op::LogisticBits { v, mu, log_scale } => {
                let g = gy[0] as f64;
                let (n, c, h, w) = self.nodes[v.0]
                    .value
                    .dims4("logistic_bits")
                    .expect("validated at record time");
                let plane = h * w;
                let ls_vals = self.nodes[log_scale.0].value.data();
                let sigmas: Vec<f64> = ls_vals
                    .iter()
                    .map(|&ls| (ls as f64).exp().max(SIGMA_MIN))
                    .collect();
                // d sigma / d log_scale is sigma itself unless the clamp bound.
                let sig_live: Vec<bool> =
                    ls_vals.iter().map(|&ls| (ls as f64).exp() >= SIGMA_MIN).collect();
                let mus: Vec<f64> = self.nodes[mu.0].value.iter().map(|&m| m as f64).collect();
                let data = self.nodes[v.0].value.data();
                let mut gv = vec![0.0f32; data.len()];
                let mut gmu = vec![0.0f64; c];
                let mut gls = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let sigma = sigmas[ci];
                        for i in 0..plane {
                            let (p, a, b) = bin_prob(data[base + i] as f64, mus[ci], sigma);
                            if p <= PMF_FLOOR {
                                continue; // floored bin: zero gradient
                            }
                            let sa = sigmoid(a);
                            let sb = sigmoid(b);
                            let da = sa * (1.0 - sa);
                            let db = sb * (1.0 - sb);
                            let dbits_dp = -1.0 / (p * LN2);
                            let dp_dv = (da - db) / sigma;
                            let dp_dsigma = -(a * da - b * db) / sigma;
                            gv[base + i] += (g * dbits_dp * dp_dv) as f32;
                            gmu[ci] += g * dbits_dp * (-dp_dv);
                            if sig_live[ci] {
                                gls[ci] += g * dbits_dp * dp_dsigma * sigma;
                            }
                        }
                    }
                }
                self.accumulate(buf, v, &gv);
                let gmu32: Vec<f32> = gmu.iter().map(|&x| x as f32).collect();
                self.accumulate(buf, mu, &gmu32);
                let gls32: Vec<f32> = gls.iter().map(|&x| x as f32).collect();
                self.accumulate(buf, log_scale, &gls32);
            }
            Op::Dihedral { a, d } => {
                let (c, h, w) = self.nodes[idx]
                    .value
                    .dims3("dihedral")
                    .expect("validated at record time");
                let inv = kernels::DIHEDRAL_INVERSE[d as usize];
                let ga = kernels::dihedral_apply(gy, c, h, w, inv);
                self.accumulate(buf, a, &ga);
            }
            Op::Resize { a } => {
                let (c, h2, w2) = self.nodes[idx]
                    .value
                    .dims3("resize_bilinear")
                    .expect("validated at record time");
                let (_, h, w) = self.nodes[a.0]
                    .value
                    .dims3("resize_bilinear")
                    .expect("validated at record time");
                let mut ga = vec![0.0f32; self.nodes[a.0].value.len()];
                kernels::bilinear_resize_backward(gy, c, h2, w2, h, w, &mut ga);
                self.accumulate(buf, a, &ga);
            }
            Op::PadZeroTopLeft { a, top, left } => {
                let (c, h, w) = self.nodes[a.0]
                    .value
                    .dims3("pad_zero_top_left")
                    .expect("validated at record time");
                let (h2, w2) = (h + top, w + left);
                let mut ga = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let grow = (ch * h2 + y + top) * w2 + left;
                        let arow = (ch * h + y) * w;
                        ga[arow..arow + w].copy_from_slice(&gy[grow..grow + w]);
                    }
                }
                self.accumulate(buf, a, &ga);
            }
            Op::Crop { a, top, left } => {
                let (c, h, w) = self.nodes[a.0]
                    .value
                    .dims3("crop")
                    .expect("validated at record time");
                let (_, oh, ow) = self.nodes[idx]
                    .value
                    .dims3("crop")
                    .expect("validated at record time");
                let mut ga = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let arow = (ch * h + y + top) * w + left;
                        let grow = (ch * oh + y) * ow;
                        ga[arow..arow + ow].copy_from_slice(&gy[grow..grow + ow]);
                    }
                }
                self.accumulate(buf, a, &ga);
            }
            Op::PadReplicate { a, bottom, right } => {
                let (c, h, w) = self.nodes[a.0]
                    .value
                    .dims3("pad_replicate")
                    .expect("validated at record time");
                let (h2, w2) = (h + bottom, w + right);
                let mut ga = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        let sy = y.min(h - 1);
                        for x in 0..w2 {
                            let sx = x.min(w - 1);
                            ga[(ch * h + sy) * w + sx] += gy[(ch * h2 + y) * w2 + x];
                        }
                    }
                }
                self.accumulate(buf, a, &ga);
            }
            Op::SubChannelMean { a } => {
                let (n, c, h, w) = self.nodes[a.0]
                    .value
                    .dims4("sub_channel_mean")
                    .expect("validated at record time");
                let plane = h * w;
                let mut ga = vec![0.0f32; gy.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let m: f64 = gy[base..base + plane].iter().map(|&v| v as f64).sum::<f64>()
                            / plane as f64;
                        let m = m as f32;
                        for i in 0..plane {
                            ga[base + i] = gy[base + i] - m;
                        }
                    }
                }
                self.accumulate(buf, a, &ga);
            }
        }
        Ok(())
    }
}

// ── finite-difference verification ──────────────────────────────────────────

/// Outcome of a central finite-difference sweep over one input tensor.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords: usize,
    pub within_tol: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
}

impl FdReport {
    /// Fraction of coordinates that met their tolerance.
    pub fn pass_fraction(&self) -> f64 {
        if self.coords == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.coords as f64
        }
    }
}

/// Checks `analytic` against central finite differences of `f` at `x`.
///
/// `f` should return the probe loss in f64 (e.g. an f64 dot product over an
/// op's f32 output) so that accumulation noise in the harness itself stays
/// below the tolerances. Coordinates with `|analytic| < abs_floor` are
/// compared absolutely at `abs_tol`; the rest relatively at `rel_tol`
/// (symmetric denominator). Fully sequential and deterministic for a
/// deterministic `f`.
pub fn central_diff_check(
    mut f: impl FnMut(&[f32]) -> f64,
    x: &[f32],
    analytic: &[f32],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    abs_tol: f64,
) -> FdReport {
    assert_eq!(x.len(), analytic.len());
    let mut report = FdReport {
        coords: x.len(),
        within_tol: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let x0 = x[i] as f64;
        let hi = (x0 + h) as f32;
        let lo = (x0 - h) as f32;
        probe[i] = hi;
        let fp = f(&probe);
        probe[i] = lo;
        let fm = f(&probe);
        probe[i] = x[i];
        // Use the realized f32 spacing, not the nominal h.
        let denom = hi as f64 - lo as f64;
        let fd = (fp - fm) / denom;
        let a = analytic[i] as f64;
        let abs_err = (fd - a).abs();
        if a.abs() < abs_floor {
            report.worst_abs = report.worst_abs.max(abs_err);
            if abs_err <= abs_tol {
                report.within_tol += 1;
            }
        } else {
            let rel = abs_err / a.abs().max(fd.abs());
            report.worst_rel = report.worst_rel.max(rel);
            if rel <= rel_tol {
                report.within_tol += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Values with |v| uniform in (lo, hi) and random sign: keeps probes of
    /// relu-family ops a safe distance from the kink at zero.
    fn rand_tensor_signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let m = rng.random_range(lo..hi);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn probe_weights(shape: &[usize], seed: u64) -> Vec<f32> {
        let len = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|_| {
                let m: f32 = rng.random_range(0.5..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    /// FD oracle harness. `build` maps (graph, input var) to the op output
    /// (any shape). Analytic gradients flow through an in-graph weighted sum
    /// while the probe loss recomputes the identical dot product in f64, so
    /// harness noise stays far below the tolerances. `h` is per-op: generous
    /// for piecewise-linear ops (their central difference has no truncation
    /// error), small for curved ones.
    fn fd_input_check(
        build: impl Fn(&mut Graph, Var) -> Var,
        x: &Tensor,
        h: f64,
        seed: u64,
    ) -> FdReport {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = build(&mut g, xv);
        let w = probe_weights(g.shape(y), seed);
        let wv = g.constant(Tensor::new(g.shape(y).to_vec(), w.clone()).unwrap());
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(xv).unwrap().to_vec();
        let shape = x.shape().to_vec();
        let f = |vals: &[f32]| -> f64 {
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::new(shape.clone(), vals.to_vec()).unwrap(), false);
            let y = build(&mut g, xv);
            g.value(y)
                .iter()
                .zip(&w)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        central_diff_check(f, x.data(), &analytic, h, 1e-3, 1e-6, 1e-5)
    }

    fn assert_fd(report: &FdReport, what: &str) {
        assert!(
            report.pass_fraction() >= 0.95,
            "{what}: only {}/{} coords within tolerance (worst rel {:.3e}, worst abs {:.3e})",
            report.within_tol,
            report.coords,
            report.worst_rel,
            report.worst_abs,
        );
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        // |x| in (0.3, 1.0): probes at h = 0.25 never cross the kink.
        let x = rand_tensor_signed(&mut rng, &[2, 3, 4], 0.3, 1.0);

        let leaky = fd_input_check(|g, v| g.leaky_relu(v, 0.01).unwrap(), &x, 0.25, 1);
        assert_fd(&leaky, "leaky_relu");

        let relu = fd_input_check(|g, v| g.relu(v).unwrap(), &x, 0.25, 2);
        assert_fd(&relu, "relu");

        // clamp inputs stay strictly inside (0, 1) even after the probe step
        let xc = rand_tensor(&mut rng, &[3, 5], 0.26, 0.74);
        let clamp = fd_input_check(|g, v| g.clamp01(v).unwrap(), &xc, 0.2, 3);
        assert_fd(&clamp, "clamp01");

        // quadratic: central differences are exact up to rounding
        let mul = fd_input_check(|g, v| g.mul(v, v).unwrap(), &x, 0.25, 4);
        assert_fd(&mul, "mul (square)");

        let add = fd_input_check(
            |g, v| {
                let s = g.mul_scalar(v, 3.5).unwrap();
                g.add(v, s).unwrap()
            },
            &x,
            0.25,
            5,
        );
        assert_fd(&add, "add + mul_scalar");

        let sub = fd_input_check(
            |g, v| {
                let s = g.mul_scalar(v, -0.5).unwrap();
                g.sub(v, s).unwrap()
            },
            &x,
            0.25,
            6,
        );
        assert_fd(&sub, "sub");

        let mean = fd_input_check(
            |g, v| {
                let s = g.mul_scalar(v, 3.5).unwrap();
                g.mean(s).unwrap()
            },
            &x,
            0.25,
            7,
        );
        assert_fd(&mean, "mul_scalar + mean");

        let resh = fd_input_check(|g, v| g.reshape(v, vec![4, 6]).unwrap(), &x, 0.25, 8);
        assert_fd(&resh, "reshape");
    }

    #[test]
    fn fd_conv_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.2, 0.2);

        // gradient w.r.t. the conv input (linear: large h is exact)
        let wc = w.clone();
        let bc = b.clone();
        let conv_x = fd_input_check(
            move |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                g.conv2d(v, wv, Some(bv), 2, 1).unwrap()
            },
            &x,
            0.25,
            5,
        );
        assert_fd(&conv_x, "conv2d w.r.t. input");

        // gradient w.r.t. the conv weight
        let xc = x.clone();
        let conv_w = fd_input_check(
            move |g, v| {
                let xv = g.constant(xc.clone());
                g.conv2d(xv, v, None, 2, 1).unwrap()
            },
            &w,
            0.25,
            6,
        );
        assert_fd(&conv_w, "conv2d w.r.t. weight");

        // gradient w.r.t. the bias
        let xc = x.clone();
        let wc = w.clone();
        let conv_b = fd_input_check(
            move |g, v| {
                let xv = g.constant(xc.clone());
                let wv = g.constant(wc.clone());
                g.conv2d(xv, wv, Some(v), 2, 1).unwrap()
            },
            &b,
            0.25,
            7,
        );
        assert_fd(&conv_b, "conv2d w.r.t. bias");

        // transpose conv, all three operands
        let t = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
        let bt = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let wtc = wt.clone();
        let tconv_x = fd_input_check(
            move |g, v| {
                let wv = g.constant(wtc.clone());
                g.conv2d_transpose(v, wv, None, 2, 1).unwrap()
            },
            &t,
            0.25,
            8,
        );
        assert_fd(&tconv_x, "conv2d_transpose w.r.t. input");

        let tc = t.clone();
        let tconv_w = fd_input_check(
            move |g, v| {
                let xv = g.constant(tc.clone());
                g.conv2d_transpose(xv, v, None, 2, 1).unwrap()
            },
            &wt,
            0.25,
            9,
        );
        assert_fd(&tconv_w, "conv2d_transpose w.r.t. weight");

        let (tc, wtc) = (t.clone(), wt.clone());
        let tconv_b = fd_input_check(
            move |g, v| {
                let xv = g.constant(tc.clone());
                let wv = g.constant(wtc.clone());
                g.conv2d_transpose(xv, wv, Some(v), 2, 1).unwrap()
            },
            &bt,
            0.25,
            30,
        );
        assert_fd(&tconv_b, "conv2d_transpose w.r.t. bias");
    }

    #[test]
    fn fd_spatial_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let x = rand_tensor(&mut rng, &[2, 5, 7], -1.0, 1.0);

        for d in 0..8u8 {
            let r = fd_input_check(move |g, v| g.dihedral(v, d).unwrap(), &x, 0.25, 10 + d as u64);
            assert_fd(&r, &format!("dihedral {d}"));
        }

        let resize = fd_input_check(|g, v| g.resize_bilinear(v, 9, 11).unwrap(), &x, 0.25, 20);
        assert_fd(&resize, "resize_bilinear up");

        let shrink = fd_input_check(|g, v| g.resize_bilinear(v, 3, 4).unwrap(), &x, 0.25, 21);
        assert_fd(&shrink, "resize_bilinear down");

        let pad = fd_input_check(|g, v| g.pad_zero_top_left(v, 3, 2).unwrap(), &x, 0.25, 22);
        assert_fd(&pad, "pad_zero_top_left");

        let crop = fd_input_check(|g, v| g.crop(v, 1, 2, 3, 4).unwrap(), &x, 0.25, 23);
        assert_fd(&crop, "crop");

        let rep = fd_input_check(|g, v| g.pad_replicate(v, 3, 1).unwrap(), &x, 0.25, 24);
        assert_fd(&rep, "pad_replicate");

        let x4 = rand_tensor(&mut rng, &[1, 3, 4, 5], -1.0, 1.0);
        let scm = fd_input_check(|g, v| g.sub_channel_mean(v).unwrap(), &x4, 0.25, 25);
        assert_fd(&scm, "sub_channel_mean");
    }

    #[test]
    fn fd_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let a = rand_tensor(&mut rng, &[2, 3, 3], 0.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 3], 0.0, 1.0);

        // quadratic: central differences are exact up to rounding
        let bc = b.clone();
        let mse = fd_input_check(
            move |g, v| {
                let bv = g.constant(bc.clone());
                let m = g.mse(v, bv).unwrap();
                g.mul_scalar(m, 50.0).unwrap()
            },
            &a,
            0.1,
            26,
        );
        assert_fd(&mse, "mse");
    }

    /// f64 reference for the rate term, shared by the FD checks below: the
    /// exact function the op claims to compute, evaluated without any f32
    /// intermediate so the comparison noise floor is pure FD truncation.
    fn oracle_bits(v: &[f32], mu: &[f32], ls: &[f32], c: usize) -> f64 {
        let plane = v.len() / c;
        let mut bits = 0.0;
        for ci in 0..c {
            let m = mu[ci] as f64;
            let s = (ls[ci] as f64).exp().max(SIGMA_MIN);
            for i in 0..plane {
                let (p, _, _) = bin_prob(v[ci * plane + i] as f64, m, s);
                bits -= p.max(PMF_FLOOR).log2();
            }
        }
        bits
    }

    #[test]
    fn fd_logistic_bits_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        // offsets |v - mu| in roughly (0.9, 2.2): away from the pmf peak
        // where the derivative vanishes and the tail where the floor kicks in
        let v = rand_tensor_signed(&mut rng, &[1, 3, 3, 3], 0.9, 2.2);
        let mu = rand_tensor(&mut rng, &[3], -0.15, 0.15);
        let ls = rand_tensor(&mut rng, &[3], -0.7, 0.7);
        let c = 3;

        let mut g = Graph::new();
        let vv = g.leaf(v.clone(), true);
        let mv = g.leaf(mu.clone(), true);
        let sv = g.leaf(ls.clone(), true);
        let bits = g.logistic_bits(vv, mv, sv).unwrap();
        g.backward(bits).unwrap();

        // graph forward agrees with the f64 oracle
        let want = oracle_bits(v.data(), mu.data(), ls.data(), c);
        let got = g.value(bits).item().unwrap() as f64;
        assert!((got - want).abs() / want <= 1e-5, "{got} vs {want}");

        let (muc, lsc) = (mu.clone(), ls.clone());
        let rv = central_diff_check(
            |vals| oracle_bits(vals, muc.data(), lsc.data(), c),
            v.data(),
            g.grad(vv).unwrap(),
            2e-2,
            1e-3,
            1e-6,
            1e-5,
        );
        assert_fd(&rv, "logistic_bits w.r.t. values");

        let (vc, lsc) = (v.clone(), ls.clone());
        let rmu = central_diff_check(
            |vals| oracle_bits(vc.data(), vals, lsc.data(), c),
            mu.data(),
            g.grad(mv).unwrap(),
            2e-2,
            1e-3,
            1e-6,
            1e-5,
        );
        assert_fd(&rmu, "logistic_bits w.r.t. mu");

        let (vc, muc) = (v.clone(), mu.clone());
        let rls = central_diff_check(
            |vals| oracle_bits(vc.data(), muc.data(), vals, c),
            ls.data(),
            g.grad(sv).unwrap(),
            2e-2,
            1e-3,
            1e-6,
            1e-5,
        );
        assert_fd(&rls, "logistic_bits w.r.t. log-scale");
    }

    #[test]
    fn logistic_bits_matches_closed_form() {
        // Unit logistic, zero latent: p = 2*sigmoid(0.5) - 1, about 0.2449,
        // which costs about 2.0297 bits.
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap());
        let mu = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let ls = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let bits = g.logistic_bits(v, mu, ls).unwrap();
        let got = g.value(bits).item().unwrap() as f64;
        let p = 2.0 * sigmoid(0.5) - 1.0;
        assert!((p - 0.2449).abs() < 1e-4);
        let want = -p.log2();
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        assert!((got - 2.0297).abs() < 1e-3);
    }

    #[test]
    fn logistic_bits_floors_tiny_probabilities() {
        // 60 sigma out in the tail: bin probability underflows, the floor
        // caps the cost at 16 bits and the gradient at zero.
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![60.0]).unwrap(), true);
        let mu = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let ls = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let bits = g.logistic_bits(v, mu, ls).unwrap();
        assert!((g.value(bits).item().unwrap() - 16.0).abs() < 1e-4);
        g.backward(bits).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.0]);
    }

    #[test]
    fn round_ste_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![6], vec![0.5, -0.5, 1.49, -1.5, 2.5, 0.0]).unwrap(),
            true,
        );
        let y = g.round_ste(x).unwrap();
        // round half away from zero
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 1.0, -2.0, 3.0, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0], "two backward calls accumulate");
        g.zero_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn forward_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![3.0e38]).unwrap(), false);
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul" }));
    }

    #[test]
    fn chained_spatial_pipeline_is_exact_permutation() {
        // dihedral -> pad -> crop round trip preserves values exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[3, 4, 6], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let d = g.dihedral(v, 1).unwrap();
        let p = g.pad_zero_top_left(d, 2, 3).unwrap();
        let c = g.crop(p, 2, 3, 6, 4).unwrap();
        let u = g.dihedral(c, DIHEDRAL_INVERSE_PUB[1]).unwrap();
        assert_eq!(g.value(u).data(), x.data());
    }

    // Local mirror so the test reads naturally.
    const DIHEDRAL_INVERSE_PUB: [u8; 8] = super::super::kernels::DIHEDRAL_INVERSE;
}
