//! Reverse-mode differentiation over an append-only record of operations.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations return [`Var`] handles into the tape; [`Tape::backward`] walks
//! the record in reverse and accumulates gradients with sum semantics. Nodes
//! only carry gradients when at least one of their inputs does, so frozen
//! subgraphs cost nothing on the way back.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    ResizeBilinear(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_signature: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Hash of every ReLU on/off decision made so far. Two forward passes
    /// that land on different sides of a kink produce different signatures.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a[…×k] · b[k×n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if bt.rank() != 2 || at.rank() < 2 || at.last_dim() != bt.shape()[0] {
            return Err(Error::shape(format!(
                "matmul {} · {}",
                shape_str(at),
                shape_str(bt)
            )));
        }
        let k = at.last_dim();
        let m = at.numel() / k;
        let n = bt.shape()[1];
        let data = gemm(at.data(), bt.data(), m, k, n);
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[1] {
            return Err(Error::shape(format!(
                "matmul_nt {} · {}ᵀ",
                shape_str(at),
                shape_str(bt)
            )));
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
        let value = Tensor::new(vec![m, n], gemm_nt(at.data(), bt.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(format!(
                "{name} {} vs {}",
                shape_str(at),
                shape_str(bt)
            )));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division; a zero anywhere in the denominator is rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Contract("division by zero".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds `bias[n]` to every row of `x[…×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        if bt.rank() != 1 || xt.last_dim() != bt.numel() {
            return Err(Error::shape(format!(
                "bias {} for input {}",
                shape_str(bt),
                shape_str(xt)
            )));
        }
        let n = bt.numel();
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bt.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Adds `bias[C]` to each channel plane of `x[C×H×W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        if xt.rank() != 3 || bt.rank() != 1 || xt.shape()[0] != bt.numel() {
            return Err(Error::shape(format!(
                "channel bias {} for input {}",
                shape_str(bt),
                shape_str(xt)
            )));
        }
        let plane = xt.shape()[1] * xt.shape()[2];
        let mut data = xt.data().to_vec();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let b = bt.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddChannelBias(x, bias), rg))
    }

    /// `x·scale + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * scale + shift).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::shape(format!("transpose of {}", shape_str(xt))));
        }
        let (r, c) = (xt.shape()[0], xt.shape()[1]);
        let src = xt.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 || len == 0 || start + len > xt.shape()[1] {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {}) of {}",
                start + len,
                shape_str(xt)
            )));
        }
        let (r, c) = (xt.shape()[0], xt.shape()[1]);
        let mut data = Vec::with_capacity(r * len);
        for row in xt.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape(format!("concat_cols row mismatch: {s:?}")));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape(format!(
                    "concat_rows column mismatch: {s:?} vs {cols}"
                )));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::shape(format!(
                "softmax axis {axis} for {}",
                shape_str(xt)
            )));
        }
        let (outer, len, inner) = axis_split(xt.shape(), axis);
        let src = xt.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    data[idx(j)] /= denom;
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes the trailing axis to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xt.last_dim();
        if gt.shape() != [d] || bt.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm params {} / {} for input {}",
                shape_str(gt),
                shape_str(bt),
                shape_str(xt)
            )));
        }
        let rows = xt.numel() / d;
        let mut xhat = vec![0.0; xt.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xt.numel()];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gt.data()[j] * h + bt.data()[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut h = self.kink_signature;
        for &v in self.value(x).data() {
            h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3);
        }
        self.kink_signature = h.rotate_left(7) ^ 0x9e37_79b9_7f4a_7c15;
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Cross-correlation of `input[C_in×H×W]` with `kernel[C_out×C_in×k×k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (it, kt) = (self.value(input), self.value(kernel));
        let geom = ConvGeom::new(it.shape(), kt.shape(), stride, padding)?;
        let out = geom.forward(it.data(), kt.data());
        let value = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Transposed convolution of `input[C_in×H×W]` with
    /// `kernel[C_in×C_out×k×k]`, no padding: output side `(H−1)·stride + k`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (it, kt) = (self.value(input), self.value(kernel));
        let g = TConvGeom::new(it.shape(), kt.shape(), stride)?;
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        let (inp, ker) = (it.data(), kt.data());
        for ci in 0..g.c_in {
            for co in 0..g.c_out {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let w = ker[((ci * g.c_out + co) * g.k + ky) * g.k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for iy in 0..g.h {
                            let oy = iy * g.stride + ky;
                            for ix in 0..g.w {
                                let ox = ix * g.stride + kx;
                                out[(co * g.oh + oy) * g.ow + ox] +=
                                    w * inp[(ci * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![g.c_out, g.oh, g.ow], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Bilinear resize of `x[C×H×W]` with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!(
                "resize {} to {out_h}×{out_w}",
                shape_str(xt)
            )));
        }
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let src = xt.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let v = (1.0 - ly)
                        * ((1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                        + ly * ((1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
                    out[(ch * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::ResizeBilinear(x), rg))
    }

    /// Mean binary cross-entropy of `logits` against `target` in the stable
    /// form `max(z,0) − z·t + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let zt = self.value(logits);
        if zt.shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce logits {} vs target {}",
                shape_str(zt),
                shape_str(target)
            )));
        }
        let n = zt.numel() as f64;
        let total: f64 = zt
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(lt)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: (0..self.nodes.len()).map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let k = at.last_dim();
                let m = at.numel() / k;
                let n = bt.shape()[1];
                if wants(*a) {
                    accumulate(grads, *a, gemm_nt(g, bt.data(), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, gemm_tn(at.data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                if wants(*a) {
                    accumulate(grads, *a, gemm(g, bt.data(), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, gemm_tn(g, at.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, bt.data(), |g, y| g * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, zip_map(g, at.data(), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, bt.data(), |g, y| g / y));
                }
                if wants(*b) {
                    let d = g
                        .iter()
                        .zip(at.data())
                        .zip(bt.data())
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, d);
                }
            }
            Op::AddChannelBias(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*b) {
                    let c = val(*b).numel();
                    let plane = g.len() / c;
                    let d = g.chunks(plane).map(|p| p.iter().sum()).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Affine(x, s) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::SliceCols(x, start) => {
                if wants(*x) {
                    let c = val(*x).shape()[1];
                    let len = node.value.shape()[1];
                    let mut d = vec![0.0; val(*x).numel()];
                    for (r, row) in g.chunks(len).enumerate() {
                        d[r * c + start..r * c + start + len].copy_from_slice(row);
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if wants(p) {
                        let d = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + c].iter().copied())
                            .collect();
                        accumulate(grads, p, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                if wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let d = zip_map(g, val(*x).data(), |g, v| {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    });
                    accumulate(grads, *x, d);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let d = zip_map(g, val(*x).data(), |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(grads, *x, d);
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let d = zip_map(g, node.value.data(), |g, s| g * s * (1.0 - s));
                    accumulate(grads, *x, d);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, vec![g[0]; val(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).numel();
                    accumulate(grads, *x, vec![g[0] / n as f64; n]);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (it, kt) = (val(*input), val(*kernel));
                let geom = ConvGeom::new(it.shape(), kt.shape(), *stride, *padding)
                    .expect("validated in forward");
                let (di, dk) =
                    geom.backward(it.data(), kt.data(), g, wants(*input), wants(*kernel));
                if let Some(di) = di {
                    accumulate(grads, *input, di);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                stride,
            } => {
                let (it, kt) = (val(*input), val(*kernel));
                let t = TConvGeom::new(it.shape(), kt.shape(), *stride).expect("validated");
                let (inp, ker) = (it.data(), kt.data());
                let mut di = wants(*input).then(|| vec![0.0; inp.len()]);
                let mut dk = wants(*kernel).then(|| vec![0.0; ker.len()]);
                for ci in 0..t.c_in {
                    for co in 0..t.c_out {
                        for ky in 0..t.k {
                            for kx in 0..t.k {
                                let kidx = ((ci * t.c_out + co) * t.k + ky) * t.k + kx;
                                let w = ker[kidx];
                                let mut acc = 0.0;
                                for iy in 0..t.h {
                                    let oy = iy * t.stride + ky;
                                    for ix in 0..t.w {
                                        let ox = ix * t.stride + kx;
                                        let gv = g[(co * t.oh + oy) * t.ow + ox];
                                        let iidx = (ci * t.h + iy) * t.w + ix;
                                        if let Some(di) = di.as_mut() {
                                            di[iidx] += gv * w;
                                        }
                                        acc += gv * inp[iidx];
                                    }
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[kidx] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(di) = di {
                    accumulate(grads, *input, di);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
            }
            Op::ResizeBilinear(x) => {
                if wants(*x) {
                    let xs = val(*x).shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                    let ys = bilinear_taps(h, oh);
                    let xt = bilinear_taps(w, ow);
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xt.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                plane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                plane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                                plane[y1 * w + x0] += gv * ly * (1.0 - lx);
                                plane[y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::BceWithLogits { logits, target } => {
                if wants(*logits) {
                    let z = val(*logits).data();
                    let n = z.len() as f64;
                    let d = z
                        .iter()
                        .zip(target)
                        .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                        .collect();
                    accumulate(grads, *logits, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source taps `(lo, hi, frac)` for each output coordinate under half-pixel
/// bilinear sampling.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || kernel[1] != input[0] || kernel[2] != kernel[3]
        {
            return Err(Error::shape(format!(
                "conv2d input {input:?} with kernel {kernel:?}"
            )));
        }
        let k = kernel[2];
        if k == 0 || stride == 0 {
            return Err(Error::shape("conv2d needs k ≥ 1 and stride ≥ 1"));
        }
        let (h, w) = (input[1], input[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(format!(
                "conv2d output size not positive: input {input:?}, k={k}, pad={padding}"
            )));
        }
        Ok(Self {
            c_in: input[0],
            h,
            w,
            c_out: kernel[0],
            k,
            stride,
            padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        })
    }

    /// Input coordinate for output `o` and tap `t`, if inside the image.
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o * self.stride + t)
            .checked_sub(self.padding)
            .filter(|&i| i < limit)
    }

    fn forward(&self, inp: &[f64], ker: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c_out * self.oh * self.ow];
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = ker[((co * self.c_in + ci) * self.k + ky) * self.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..self.oh {
                            let Some(iy) = self.src(oy, ky, self.h) else {
                                continue;
                            };
                            let irow = &inp[(ci * self.h + iy) * self.w..][..self.w];
                            let orow = &mut out[(co * self.oh + oy) * self.ow..][..self.ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                if let Some(ix) = self.src(ox, kx, self.w) {
                                    *o += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        inp: &[f64],
        ker: &[f64],
        g: &[f64],
        want_input: bool,
        want_kernel: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut di = want_input.then(|| vec![0.0; inp.len()]);
        let mut dk = want_kernel.then(|| vec![0.0; ker.len()]);
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let kidx = ((co * self.c_in + ci) * self.k + ky) * self.k + kx;
                        let wv = ker[kidx];
                        let mut acc = 0.0;
                        for oy in 0..self.oh {
                            let Some(iy) = self.src(oy, ky, self.h) else {
                                continue;
                            };
                            for ox in 0..self.ow {
                                let Some(ix) = self.src(ox, kx, self.w) else {
                                    continue;
                                };
                                let gv = g[(co * self.oh + oy) * self.ow + ox];
                                let iidx = (ci * self.h + iy) * self.w + ix;
                                if let Some(di) = di.as_mut() {
                                    di[iidx] += gv * wv;
                                }
                                acc += gv * inp[iidx];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
        (di, dk)
    }
}

struct TConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl TConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || kernel[0] != input[0] || kernel[2] != kernel[3]
        {
            return Err(Error::shape(format!(
                "conv_transpose2d input {input:?} with kernel {kernel:?}"
            )));
        }
        if stride == 0 || kernel[2] == 0 {
            return Err(Error::shape("conv_transpose2d needs k ≥ 1 and stride ≥ 1"));
        }
        let k = kernel[2];
        Ok(Self {
            c_in: input[0],
            h: input[1],
            w: input[2],
            c_out: kernel[1],
            k,
            stride,
            oh: (input[1] - 1) * stride + k,
            ow: (input[2] - 1) * stride + k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let i3 = tape.constant(Tensor::eye(3));
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let ai = tape.matmul(a, i3).unwrap();
        assert_eq!(tape.value(ai), tape.value(a));
        let az = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(az), &Tensor::zeros(&[2, 2]));

        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let xy = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(xy).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let img = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img);

        let ones = tape.constant(Tensor::ones(&[1, 4, 4]));
        let k3 = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k3, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));

        let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let k = tape.constant(Tensor::zeros(&[5, 3, 2, 2]));
        let y = tape.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[5, 4, 4]);

        let small = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(tape.conv2d(small, k3, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[4], 0.3));
        let s = tape.softmax(u, 0).unwrap();
        assert!(tape
            .value(s)
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let got = tape.value(s).data().to_vec();
        assert!((got[0] - 0.25).abs() < 1e-15 && (got[1] - 0.75).abs() < 1e-15);

        let base = t(&[2, 3], &[0.1, -2.0, 3.0, 0.5, 0.5, -1.0]);
        let shifted =
            Tensor::new(vec![2, 3], base.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
        let sums: Vec<f64> = tape
            .value(sa)
            .data()
            .chunks(3)
            .map(|r| r.iter().sum())
            .collect();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_on_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 3f64.ln(), 1.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[2] - 0.75).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15 && (v[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[3]));
        let zero = tape.constant(Tensor::zeros(&[3]));

        let c = tape.constant(Tensor::full(&[2, 3], 4.2));
        let y = tape.layer_norm(c, one, zero, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let beta = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(t(&[1, 3], &[3.0, -1.0, 8.0]));
        let y = tape.layer_norm(x, zero, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, one, zero, 0.0).unwrap();
        let s = 1.5f64.sqrt();
        let v = tape.value(y).data();
        assert!((v[0] + s).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] - s).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[2, 3], 0.7), true);
        let frozen = tape.leaf(Tensor::full(&[2, 3], 1.0), false);
        let prod = tape.mul(w, frozen).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Tensor::ones(&[2, 3]));
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn division_guards_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.div(a, b).is_err());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut tape = Tape::new();
        let img =
            Tensor::new(vec![2, 3, 4], (0..24).map(|v| f64::from(v) * 0.5).collect()).unwrap();
        let x = tape.constant(img.clone());
        let y = tape.resize_bilinear(x, 3, 4).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn conv_transpose_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 3, 3]));
        let k = tape.constant(Tensor::ones(&[4, 2, 2, 2]));
        let y = tape.conv_transpose2d(x, k, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 6, 6]);
        // Stride equals kernel size, so taps never overlap.
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn bce_is_ln2_at_zero_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let target = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = tape.bce_with_logits(z, &target).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
