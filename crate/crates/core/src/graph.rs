//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is a valid
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients additively into every node that requires them.
//! Graphs are single-use and confined to one thread: build, backward, drop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, bias: Option<Var> },
    TokenLinear { w: Var, x: Var, bias: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    InstanceNorm(Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Auxiliary floats saved for the backward pass (normalization statistics).
    saved: Vec<f64>,
}

/// Recorded computation from leaves to (usually) a scalar loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Standard normal CDF via `erf`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
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

    /// Position marker for [`Graph::retained_floats_since`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Floats held by nodes created at or after `mark`: each node's output
    /// plus any statistics it saved for the backward pass.
    pub fn retained_floats_since(&self, mark: usize) -> usize {
        self.nodes[mark..].iter().map(|n| n.value.numel() + n.saved.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], saved: Vec<f64>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[.., m, k] · b[k, p]`; leading axes of `a` are treated as extra rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.shape()[ta.rank() - 1] != tb.shape()[0] {
            return Err(dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let k = tb.shape()[0];
        let p = tb.shape()[1];
        let rows = ta.numel() / k;
        let mut out = vec![0.0; rows * p];
        kernels::gemm_acc(ta.data(), tb.data(), &mut out, rows, k, p);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b], Vec::new()))
    }

    /// `x[.., k] · wᵀ + bias` with `w: [out, k]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() < 1 || tw.rank() != 2 || tx.shape()[tx.rank() - 1] != tw.shape()[1] {
            return Err(dim(
                "linear",
                format!("input {:?} incompatible with weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (o, k) = (tw.shape()[0], tw.shape()[1]);
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(dim("linear", format!("bias {:?} for {} outputs", self.value(b).shape(), o)));
            }
        }
        let rows = tx.numel() / k;
        let mut out = vec![0.0; rows * o];
        kernels::gemm_nt_acc(tx.data(), tw.data(), &mut out, rows, k, o);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let t = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::Linear { x, w, bias }, &inputs, Vec::new()))
    }

    /// Mixes the token axis: `w[p, n] · x_b[n, c] + bias[p]` for each batch item of `x: [b, n, c]`.
    pub fn token_linear(&mut self, w: Var, x: Var, bias: Option<Var>) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.rank() != 2 || tx.rank() != 3 || tw.shape()[1] != tx.shape()[1] {
            return Err(dim(
                "token_linear",
                format!("weight {:?} incompatible with tokens {:?}", tw.shape(), tx.shape()),
            ));
        }
        let (p, n) = (tw.shape()[0], tw.shape()[1]);
        let (b, c) = (tx.shape()[0], tx.shape()[2]);
        if let Some(bv) = bias {
            if self.value(bv).shape() != [p] {
                return Err(dim(
                    "token_linear",
                    format!("bias {:?} for {} outputs", self.value(bv).shape(), p),
                ));
            }
        }
        let mut out = vec![0.0; b * p * c];
        for bi in 0..b {
            let xs = &tx.data()[bi * n * c..(bi + 1) * n * c];
            let os = &mut out[bi * p * c..(bi + 1) * p * c];
            kernels::gemm_acc(tw.data(), xs, os, p, n, c);
            if let Some(bv) = bias {
                for (row, &bb) in os.chunks_mut(c).zip(self.value(bv).data()) {
                    row.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let t = Tensor::new(&[b, p, c], out)?;
        let mut inputs = vec![w, x];
        inputs.extend(bias);
        Ok(self.push(t, Op::TokenLinear { w, x, bias }, &inputs, Vec::new()))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b], Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b], Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b], Vec::new()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), &[a], Vec::new())
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        self.push(t, Op::AddScalar(a), &[a], Vec::new())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a), &[a], Vec::new())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a], Vec::new())
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        self.push(t, Op::Mean(a), &[a], Vec::new())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a], Vec::new())
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() < 2 {
            return Err(dim("transpose", format!("rank-{} tensor", ta.rank())));
        }
        let r = ta.rank();
        let (rows, cols) = (ta.shape()[r - 2], ta.shape()[r - 1]);
        let data = transpose_last2(ta.data(), rows, cols);
        let mut shape = ta.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Transpose(a), &[a], Vec::new()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a], Vec::new()))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a], Vec::new())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(libm::tanh);
        self.push(t, Op::Tanh(a), &[a], Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a), &[a], Vec::new())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(a, slope), &[a], Vec::new())
    }

    // ---- normalization -----------------------------------------------------

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().ok_or_else(|| dim("layer_norm", "scalar input"))?;
        if c == 0 || self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(dim(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?} and beta {:?}",
                    tx.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let rows = tx.numel() / c;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; tx.numel()];
        let mut saved = vec![0.0; 2 * rows];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let (mean, rstd) = moments(row, eps);
            saved[2 * r] = mean;
            saved[2 * r + 1] = rstd;
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta], saved))
    }

    /// Per-sample, per-channel normalization over spatial positions of `[b, c, h, w]` (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(dim("instance_norm", format!("expected [b,c,h,w], got {:?}", tx.shape())));
        }
        let plane = tx.shape()[2] * tx.shape()[3];
        let planes = tx.numel() / plane;
        let mut out = vec![0.0; tx.numel()];
        let mut saved = vec![0.0; planes];
        for p in 0..planes {
            let src = &tx.data()[p * plane..(p + 1) * plane];
            let (mean, rstd) = moments(src, eps);
            saved[p] = rstd;
            for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *o = (v - mean) * rstd;
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::InstanceNorm(x), &[x], saved))
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of `x: [b, c_in, h, w]` with `w: [c_out, c_in, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, ci, h, wd, co, k) = conv_dims("conv2d", tx, tw)?;
        let geom = ConvGeom::new(k, stride, pad);
        let (ho, wo) = match (geom.conv_out(h), geom.conv_out(wd)) {
            (Some(ho), Some(wo)) if k > 0 => (ho, wo),
            _ => {
                return Err(dim(
                    "conv2d",
                    format!("kernel {} stride {} pad {} does not fit input {}x{}", k, stride, pad, h, wd),
                ))
            }
        };
        check_bias(self, "conv2d", bias, co)?;
        let r = ci * k * k;
        let plane = ho * wo;
        let mut cols = vec![0.0; r * plane];
        let mut out = vec![0.0; b * co * plane];
        for bi in 0..b {
            let xs = &tx.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            kernels::im2col(xs, ci, h, wd, &geom, ho, wo, &mut cols);
            let os = &mut out[bi * co * plane..(bi + 1) * co * plane];
            kernels::gemm_acc(tw.data(), &cols, os, co, r, plane);
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), plane);
        }
        let t = Tensor::new(&[b, co, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv2d { x, w, bias, geom }, &inputs, Vec::new()))
    }

    /// Adjoint of [`Graph::conv2d`] for the same weight `w: [c_out, c_in, k, k]`:
    /// maps `[b, c_out, h, w]` to `[b, c_in, (h-1)·stride - 2·pad + k + output_pad, ..]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tw.shape()[0] != tx.shape()[1] || tw.shape()[2] != tw.shape()[3] {
            return Err(dim(
                "conv_transpose2d",
                format!("input {:?} incompatible with kernel {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (b, co, hy, wy) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (ci, k) = (tw.shape()[1], tw.shape()[2]);
        let geom = ConvGeom::new(k, stride, pad);
        let sizes = (geom.transpose_out(hy, output_pad), geom.transpose_out(wy, output_pad));
        let (hx, wx) = match sizes {
            (Some(hx), Some(wx))
                if output_pad < stride && geom.conv_out(hx) == Some(hy) && geom.conv_out(wx) == Some(wy) =>
            {
                (hx, wx)
            }
            _ => {
                return Err(dim(
                    "conv_transpose2d",
                    format!(
                        "kernel {} stride {} pad {} output_pad {} invalid for input {}x{}",
                        k, stride, pad, output_pad, hy, wy
                    ),
                ))
            }
        };
        check_bias(self, "conv_transpose2d", bias, ci)?;
        let r = ci * k * k;
        let plane = hy * wy;
        let mut cols = vec![0.0; r * plane];
        let mut out = vec![0.0; b * ci * hx * wx];
        for bi in 0..b {
            cols.fill(0.0);
            let ys = &tx.data()[bi * co * plane..(bi + 1) * co * plane];
            kernels::gemm_tn_acc(tw.data(), ys, &mut cols, r, co, plane);
            let os = &mut out[bi * ci * hx * wx..(bi + 1) * ci * hx * wx];
            kernels::col2im(&cols, ci, hx, wx, &geom, hy, wy, os);
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), hx * wx);
        }
        let t = Tensor::new(&[b, ci, hx, wx], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, bias, geom }, &inputs, Vec::new()))
    }

    // ---- layout ----------------------------------------------------------

    /// `[b, c, h, w]` → `[b, (h/p)·(w/p), c·p·p]`; tokens in row-major patch order,
    /// features ordered `(channel, dy, dx)`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || patch == 0 || tx.shape()[2] % patch != 0 || tx.shape()[3] % patch != 0 {
            return Err(dim(
                "patchify",
                format!("feature map {:?} not divisible into {}x{} patches", tx.shape(), patch, patch),
            ));
        }
        let s = tx.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; tx.numel()];
        patch_permute(tx.data(), &mut out, b, c, h, w, patch, true);
        let n = (h / patch) * (w / patch);
        let t = Tensor::new(&[b, n, c * patch * patch], out)?;
        Ok(self.push(t, Op::Patchify { x, patch }, &[x], Vec::new()))
    }

    /// Inverse of [`Graph::patchify`]: tokens `[b, n, c·p·p]` → `[b, c, h, w]`.
    pub fn unpatchify(&mut self, x: Var, channels: usize, h: usize, w: usize, patch: usize) -> Result<Var> {
        let tx = self.value(x);
        let valid = tx.rank() == 3
            && patch > 0
            && h % patch == 0
            && w % patch == 0
            && tx.shape()[1] == (h / patch) * (w / patch)
            && tx.shape()[2] == channels * patch * patch;
        if !valid {
            return Err(dim(
                "unpatchify",
                format!("tokens {:?} cannot form [{}, {}, {}] with patch {}", tx.shape(), channels, h, w, patch),
            ));
        }
        let b = tx.shape()[0];
        let mut out = vec![0.0; tx.numel()];
        patch_permute(tx.data(), &mut out, b, channels, h, w, patch, false);
        let t = Tensor::new(&[b, channels, h, w], out)?;
        Ok(self.push(t, Op::Unpatchify { x, patch }, &[x], Vec::new()))
    }

    /// `[b, c, h, w]` → `[b, c]` by averaging spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(dim("global_avg_pool", format!("expected [b,c,h,w], got {:?}", tx.shape())));
        }
        let plane = tx.shape()[2] * tx.shape()[3];
        let data: Vec<f64> = tx.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let t = Tensor::new(&tx.shape()[..2], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x], Vec::new()))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(dim("backward", format!("loss must be a scalar, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (k, p) = (tb.shape()[0], tb.shape()[1]);
                let rows = ta.numel() / k;
                if self.wants(a) {
                    kernels::gemm_nt_acc(gy, tb.data(), slot(grads, a, ta.numel()), rows, p, k);
                }
                if self.wants(b) {
                    kernels::gemm_tn_acc(ta.data(), gy, slot(grads, b, tb.numel()), k, rows, p);
                }
            }
            Op::Linear { x, w, bias } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (o, k) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / k;
                if self.wants(x) {
                    kernels::gemm_acc(gy, tw.data(), slot(grads, x, tx.numel()), rows, o, k);
                }
                if self.wants(w) {
                    kernels::gemm_tn_acc(gy, tx.data(), slot(grads, w, tw.numel()), o, rows, k);
                }
                if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
                    let gb = slot(grads, bv, o);
                    for row in gy.chunks(o) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::TokenLinear { w, x, bias } => {
                let (tw, tx) = (self.value(w), self.value(x));
                let (p, n) = (tw.shape()[0], tw.shape()[1]);
                let (b, c) = (tx.shape()[0], tx.shape()[2]);
                for bi in 0..b {
                    let gys = &gy[bi * p * c..(bi + 1) * p * c];
                    if self.wants(x) {
                        let gx = slot(grads, x, tx.numel());
                        kernels::gemm_tn_acc(tw.data(), gys, &mut gx[bi * n * c..(bi + 1) * n * c], n, p, c);
                    }
                    if self.wants(w) {
                        let xs = &tx.data()[bi * n * c..(bi + 1) * n * c];
                        kernels::gemm_nt_acc(gys, xs, slot(grads, w, p * n), p, c, n);
                    }
                    if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
                        let gb = slot(grads, bv, p);
                        for (g, row) in gb.iter_mut().zip(gys.chunks(c)) {
                            *g += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, a, gy, |g, _| g);
                self.acc_map(grads, b, gy, |g, _| g);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, a, gy, |g, _| g);
                self.acc_map(grads, b, gy, |g, _| -g);
            }
            Op::Mul(a, b) => {
                let tb = self.value(b).data();
                let ta = self.value(a).data();
                if self.wants(a) {
                    let ga = slot(grads, a, ta.len());
                    for ((g, &d), &bv) in ga.iter_mut().zip(gy).zip(tb) {
                        *g += d * bv;
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, tb.len());
                    for ((g, &d), &av) in gb.iter_mut().zip(gy).zip(ta) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(a, s) => self.acc_map(grads, a, gy, |g, _| g * s),
            Op::AddScalar(a) => self.acc_map(grads, a, gy, |g, _| g),
            Op::Square(a) => self.acc_map(grads, a, gy, |g, x| 2.0 * x * g),
            Op::Abs(a) => self.acc_map(grads, a, gy, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let d = gy[0] / n as f64;
                slot(grads, a, n).iter_mut().for_each(|g| *g += d);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                slot(grads, a, n).iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::Transpose(a) => {
                if self.wants(a) {
                    let r = y.rank();
                    let (rows, cols) = (y.shape()[r - 2], y.shape()[r - 1]);
                    let back = transpose_last2(gy, rows, cols);
                    add_into(slot(grads, a, back.len()), &back);
                }
            }
            Op::Reshape(a) => {
                if self.wants(a) {
                    add_into(slot(grads, a, gy.len()), gy);
                }
            }
            Op::Gelu(a) => self.acc_map(grads, a, gy, |g, x| g * (normal_cdf(x) + x * normal_pdf(x))),
            Op::Tanh(a) => {
                if self.wants(a) {
                    let ga = slot(grads, a, gy.len());
                    for ((g, &d), &t) in ga.iter_mut().zip(gy).zip(y.data()) {
                        *g += d * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(a) => self.acc_map(grads, a, gy, |g, x| if x > 0.0 { g } else { 0.0 }),
            Op::LeakyRelu(a, slope) => self.acc_map(grads, a, gy, |g, x| if x > 0.0 { g } else { slope * g }),
            Op::LayerNorm { x, gamma, beta } => self.layer_norm_backward(node, gy, grads, x, gamma, beta),
            Op::InstanceNorm(x) => {
                if self.wants(x) {
                    let plane = y.shape()[2] * y.shape()[3];
                    let gx = slot(grads, x, gy.len());
                    for (p, &rstd) in node.saved.iter().enumerate() {
                        let range = p * plane..(p + 1) * plane;
                        let xhat = &y.data()[range.clone()];
                        let g = &gy[range.clone()];
                        norm_backward(g, xhat, rstd, &mut gx[range]);
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => self.conv_backward(y, gy, grads, x, w, bias, geom),
            Op::ConvTranspose2d { x, w, bias, geom } => {
                self.conv_transpose_backward(y, gy, grads, x, w, bias, geom)
            }
            Op::Patchify { x, patch } => {
                if self.wants(x) {
                    let s = self.value(x).shape();
                    let mut back = vec![0.0; gy.len()];
                    patch_permute(gy, &mut back, s[0], s[1], s[2], s[3], patch, false);
                    add_into(slot(grads, x, back.len()), &back);
                }
            }
            Op::Unpatchify { x, patch } => {
                if self.wants(x) {
                    let s = y.shape();
                    let mut back = vec![0.0; gy.len()];
                    patch_permute(gy, &mut back, s[0], s[1], s[2], s[3], patch, true);
                    add_into(slot(grads, x, back.len()), &back);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(x) {
                    let s = self.value(x).shape();
                    let plane = s[2] * s[3];
                    let gx = slot(grads, x, self.value(x).numel());
                    for (chunk, &g) in gx.chunks_mut(plane).zip(gy) {
                        let d = g / plane as f64;
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                }
            }
        }
    }

    /// Accumulates `f(gy_i, x_i)` into the gradient of `a`.
    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], a: Var, gy: &[f64], f: impl Fn(f64, f64) -> f64) {
        if !self.wants(a) {
            return;
        }
        let xa = self.value(a).data();
        let ga = slot(grads, a, xa.len());
        for ((g, &d), &x) in ga.iter_mut().zip(gy).zip(xa) {
            *g += f(d, x);
        }
    }

    fn layer_norm_backward(
        &self,
        node: &Node,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        gamma: Var,
        beta: Var,
    ) {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        let gam = self.value(gamma).data();
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; c];
        let mut dxhat = vec![0.0; c];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let mut gx = if self.wants(x) { Some(vec![0.0; tx.numel()]) } else { None };
        for r in 0..rows {
            let (mean, rstd) = (node.saved[2 * r], node.saved[2 * r + 1]);
            let row = &tx.data()[r * c..(r + 1) * c];
            let g = &gy[r * c..(r + 1) * c];
            for j in 0..c {
                xhat[j] = (row[j] - mean) * rstd;
                dxhat[j] = g[j] * gam[j];
                ggamma[j] += g[j] * xhat[j];
                gbeta[j] += g[j];
            }
            if let Some(gx) = gx.as_mut() {
                norm_backward(&dxhat, &xhat, rstd, &mut gx[r * c..(r + 1) * c]);
            }
        }
        if let Some(gx) = gx {
            add_into(slot(grads, x, gx.len()), &gx);
        }
        if self.wants(gamma) {
            add_into(slot(grads, gamma, c), &ggamma);
        }
        if self.wants(beta) {
            add_into(slot(grads, beta, c), &gbeta);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        y: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let s = tx.shape();
        let (b, ci, h, wd) = (s[0], s[1], s[2], s[3]);
        let (co, ho, wo) = (y.shape()[1], y.shape()[2], y.shape()[3]);
        let k = geom.kernel;
        let r = ci * k * k;
        let plane = ho * wo;
        let mut cols = vec![0.0; r * plane];
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        for bi in 0..b {
            let gys = &gy[bi * co * plane..(bi + 1) * co * plane];
            if want_w {
                let xs = &tx.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                kernels::im2col(xs, ci, h, wd, &geom, ho, wo, &mut cols);
                kernels::gemm_nt_acc(gys, &cols, slot(grads, w, tw.numel()), co, plane, r);
            }
            if want_x {
                cols.fill(0.0);
                kernels::gemm_tn_acc(tw.data(), gys, &mut cols, r, co, plane);
                let gx = slot(grads, x, tx.numel());
                kernels::col2im(&cols, ci, h, wd, &geom, ho, wo, &mut gx[bi * ci * h * wd..(bi + 1) * ci * h * wd]);
            }
        }
        if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
            channel_bias_grad(gy, slot(grads, bv, co), co, plane);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose_backward(
        &self,
        y: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let s = tx.shape();
        let (b, co, hy, wy) = (s[0], s[1], s[2], s[3]);
        let (ci, hx, wx) = (y.shape()[1], y.shape()[2], y.shape()[3]);
        let k = geom.kernel;
        let r = ci * k * k;
        let plane = hy * wy;
        let mut cols = vec![0.0; r * plane];
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        if want_x || want_w {
            for bi in 0..b {
                let gys = &gy[bi * ci * hx * wx..(bi + 1) * ci * hx * wx];
                kernels::im2col(gys, ci, hx, wx, &geom, hy, wy, &mut cols);
                if want_x {
                    let gx = slot(grads, x, tx.numel());
                    kernels::gemm_acc(tw.data(), &cols, &mut gx[bi * co * plane..(bi + 1) * co * plane], co, r, plane);
                }
                if want_w {
                    let xs = &tx.data()[bi * co * plane..(bi + 1) * co * plane];
                    kernels::gemm_nt_acc(xs, &cols, slot(grads, w, tw.numel()), co, plane, r);
                }
            }
        }
        if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
            channel_bias_grad(gy, slot(grads, bv, ci), ci, hx * wx);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn moments(values: &[f64], eps: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

/// Gradient through `xhat = (x - mean) · rstd` given `dxhat`.
fn norm_backward(dxhat: &[f64], xhat: &[f64], rstd: f64, gx: &mut [f64]) {
    let n = dxhat.len() as f64;
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
    for ((g, &d), &xh) in gx.iter_mut().zip(dxhat).zip(xhat) {
        *g += rstd / n * (n * d - sum_d - xh * sum_dx);
    }
}

fn transpose_last2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mat = rows * cols;
    let mut out = vec![0.0; data.len()];
    if mat == 0 {
        return out;
    }
    for (src, dst) in data.chunks(mat).zip(out.chunks_mut(mat)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn conv_dims(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 || w.shape()[1] != x.shape()[1] || w.shape()[2] != w.shape()[3] {
        return Err(dim(op, format!("input {:?} incompatible with kernel {:?}", x.shape(), w.shape())));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3], w.shape()[0], w.shape()[2]))
}

fn check_bias(g: &Graph, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if g.value(b).shape() != [channels] => {
            Err(dim(op, format!("bias {:?} for {} channels", g.value(b).shape(), channels)))
        }
        _ => Ok(()),
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let bv = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn channel_bias_grad(gy: &[f64], gb: &mut [f64], channels: usize, plane: usize) {
    for (i, chunk) in gy.chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().sum::<f64>();
    }
}

/// Moves data between image layout `[b, c, h, w]` and token layout `[b, n, c·p·p]`.
#[allow(clippy::too_many_arguments)]
fn patch_permute(src: &[f64], dst: &mut [f64], b: usize, c: usize, h: usize, w: usize, p: usize, to_tokens: bool) {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let img = ((bi * c + ch) * h + y) * w + x;
                    let token = (y / p) * gw + x / p;
                    let f = (ch * p + y % p) * p + x % p;
                    let tok = (bi * gh * gw + token) * feat + f;
                    if to_tokens {
                        dst[tok] = src[img];
                    } else {
                        dst[img] = src[tok];
                    }
                }
            }
        }
    }
}
