//! Wengert-list reverse-mode differentiation.
//!
//! Every forward call appends one node to the tape and returns a [`Var`]
//! handle. Nodes only reference earlier nodes, so a single reverse sweep
//! visits everything in topological order.

use crate::autodiff::kernels::{col2im, conv_out, conv_transpose_out, im2col, swap_outer, ConvGeom};
use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};

/// Batchnorm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Probability clamp used inside the binary cross-entropy logs.
pub const BCE_CLAMP: f64 = 1e-7;
/// DCGAN leaky-relu slope.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (n - 1 denominator), the value folded into running averages.
    pub var: Vec<f64>,
}

/// The layer kinds a tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    BatchNorm2d,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softmax,
    Reshape(Vec<usize>),
    MseLoss,
    BceLoss,
    Mean,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerKind::BatchNorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu => "leaky_relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::Reshape(_) => "reshape",
            LayerKind::MseLoss => "mse_loss",
            LayerKind::BceLoss => "bce_loss",
            LayerKind::Mean => "mean",
        }
    }
}

enum Op<E> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<E>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        x_cm: Vec<E>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Relu(Var),
    LeakyRelu(Var, E),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    MseLoss(Var, Var),
    BceLoss(Var, Var),
    BceLogits(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    Mean(Var),
    Sum(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Reshape(_) => "reshape",
            Op::MseLoss(..) => "mse_loss",
            Op::BceLoss(..) => "bce_loss",
            Op::BceLogits(..) => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of one forward computation. Not shareable across threads while
/// training; build a fresh tape per step.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{op}: {msg}"))
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite value fed to the tape".into()));
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor<E>) -> Result<Var> {
        self.leaf(t, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor<E>) -> Result<Var> {
        self.leaf(t, false)
    }

    fn push(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, inputs: &[Var]) -> Result<Var> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value at flat index {pos}",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record one layer of the given kind. `inputs` are data operands followed
    /// by the layer's parameters, in the order the dedicated method takes them.
    pub fn forward_op(&mut self, kind: &LayerKind, inputs: &[Var]) -> Result<Var> {
        let want = match kind {
            LayerKind::Dense | LayerKind::Conv2d { .. } | LayerKind::ConvTranspose2d { .. } => 3,
            LayerKind::BatchNorm2d => 3,
            LayerKind::MseLoss | LayerKind::BceLoss => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(shape_err(
                kind.name(),
                format!("expected {want} operands, got {}", inputs.len()),
            ));
        }
        let i = inputs;
        match kind {
            LayerKind::Dense => self.dense(i[0], i[1], Some(i[2])),
            LayerKind::Conv2d { stride, pad } => self.conv2d(i[0], i[1], Some(i[2]), *stride, *pad),
            LayerKind::ConvTranspose2d { stride, pad } => {
                self.conv_transpose2d(i[0], i[1], Some(i[2]), *stride, *pad)
            }
            LayerKind::BatchNorm2d => self.batch_norm2d(i[0], i[1], i[2]).map(|(v, _)| v),
            LayerKind::Relu => self.relu(i[0]),
            LayerKind::LeakyRelu => self.leaky_relu(i[0]),
            LayerKind::Tanh => self.tanh(i[0]),
            LayerKind::Sigmoid => self.sigmoid(i[0]),
            LayerKind::Softmax => self.softmax(i[0]),
            LayerKind::Reshape(shape) => self.reshape(i[0], shape),
            LayerKind::MseLoss => self.mse_loss(i[0], i[1]),
            LayerKind::BceLoss => self.bce_loss(i[0], i[1]),
            LayerKind::Mean => self.mean(i[0]),
        }
    }

    /// `y = x w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err("dense", format!("bias {:?}, want [{fout}]", self.shape(b))));
            }
        }
        let mut y = vec![E::zero(); n * fout];
        E::gemm(n, fin, fout, self.data(x), false, self.data(w), true, &mut y, false);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(fout) {
                row.iter_mut().zip(bias).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Op::Dense { x, w, b }, vec![n, fout], y, &ins)
    }

    fn check_image(&self, op: &str, x: Var) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(shape_err(op, format!("expected [n, c, h, w] input, got {s:?}"))),
        }
    }

    /// Kernel must be `[a, b, k, k]` with `in_ch` on axis `in_axis`.
    fn check_kernel(&self, op: &str, w: Var, in_ch: usize, in_axis: usize) -> Result<[usize; 3]> {
        match *self.shape(w) {
            [a, b, k1, k2] if k1 == k2 => {
                if [a, b][in_axis] != in_ch {
                    return Err(shape_err(
                        op,
                        format!("kernel {:?} does not accept {in_ch} input channels", self.shape(w)),
                    ));
                }
                Ok([a, b, k1])
            }
            ref s => Err(shape_err(op, format!("kernel must be [a, b, k, k], got {s:?}"))),
        }
    }

    fn check_bias(&self, op: &str, b: Option<Var>, ch: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [ch] => Err(shape_err(
                op,
                format!("bias {:?}, want [{ch}]", self.shape(b)),
            )),
            _ => Ok(()),
        }
    }

    /// 2-D convolution; `w: [out_ch, in_ch, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.check_image("conv2d", x)?;
        let [cout, _, k] = self.check_kernel("conv2d", w, cin, 1)?;
        self.check_bias("conv2d", b, cout)?;
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("{h}x{wd} input does not tile with k={k} s={stride} p={pad}"),
                ))
            }
        };
        let geom = ConvGeom {
            n,
            c: cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let mut cols = vec![E::zero(); geom.rows() * geom.cols()];
        im2col(&geom, self.data(x), &mut cols);
        let mut y_cm = vec![E::zero(); cout * geom.cols()];
        E::gemm(cout, geom.rows(), geom.cols(), self.data(w), false, &cols, false, &mut y_cm, false);
        let mut y = swap_outer(&y_cm, cout, n, oh * ow);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.data(b), n, cout, oh * ow);
        }
        let needs_cols = self.requires_grad(w);
        let mut ins = vec![x, w];
        ins.extend(b);
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: if needs_cols { cols } else { Vec::new() },
        };
        self.push(op, vec![n, cout, oh, ow], y, &ins)
    }

    /// Transposed 2-D convolution; `w: [in_ch, out_ch, k, k]`, output side
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.check_image("conv_transpose2d", x)?;
        let [_, cout, k] = self.check_kernel("conv_transpose2d", w, cin, 0)?;
        self.check_bias("conv_transpose2d", b, cout)?;
        let (oh, ow) = match (
            conv_transpose_out(h, k, stride, pad),
            conv_transpose_out(wd, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(
                    "conv_transpose2d",
                    format!("{h}x{wd} input gives empty output with k={k} s={stride} p={pad}"),
                ))
            }
        };
        // Viewed as the adjoint of a conv whose image is the output.
        let geom = ConvGeom {
            n,
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        if conv_out(oh, k, stride, pad) != Some(h) || conv_out(ow, k, stride, pad) != Some(wd) {
            return Err(shape_err(
                "conv_transpose2d",
                format!("padding {pad} too large for k={k}"),
            ));
        }
        let x_cm = swap_outer(self.data(x), n, cin, h * wd);
        let mut cols = vec![E::zero(); geom.rows() * geom.cols()];
        E::gemm(geom.rows(), cin, geom.cols(), self.data(w), true, &x_cm, false, &mut cols, false);
        let mut y = vec![E::zero(); n * cout * oh * ow];
        col2im(&geom, &cols, &mut y);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.data(b), n, cout, oh * ow);
        }
        let needs_x = self.requires_grad(w);
        let mut ins = vec![x, w];
        ins.extend(b);
        let op = Op::ConvTranspose2d {
            x,
            w,
            b,
            geom,
            x_cm: if needs_x { x_cm } else { Vec::new() },
        };
        self.push(op, vec![n, cout, oh, ow], y, &ins)
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = self.check_image("batchnorm2d", x)?;
        let c = dims[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batchnorm2d",
                format!(
                    "affine terms {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(dims)
    }

    /// Batchnorm normalizing with the statistics of this batch.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = self.check_affine(x, gamma, beta)?;
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.data(x);
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                s += xd[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                ss += xd[base..base + plane]
                    .iter()
                    .map(|v| (v.f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                .collect(),
        };
        let (y, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, [n, c, h, w]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: true,
        };
        let v = self.push(op, vec![n, c, h, w], y, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Batchnorm with fixed (running) statistics: a per-channel affine map.
    pub fn batch_norm2d_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let [n, c, h, w] = self.check_affine(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, mean, &inv_std, [n, c, h, w]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: false,
        };
        self.push(op, vec![n, c, h, w], y, &[x, gamma, beta])
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        [n, c, h, w]: [usize; 4],
    ) -> (Vec<E>, Vec<E>) {
        let plane = h * w;
        let xd = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut y = vec![E::zero(); xd.len()];
        let mut xhat = vec![E::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, is) = (mean[ch], inv_std[ch]);
                for i in base..base + plane {
                    let xh = E::lit((xd[i].f64() - mu) * is);
                    xhat[i] = xh;
                    y[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        (y, xhat)
    }

    fn unary(&mut self, x: Var, op: Op<E>, f: impl Fn(E) -> E) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, y, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > E::zero() { v } else { E::zero() })
    }

    /// Leaky relu with the fixed 0.2 slope.
    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let s = E::lit(LEAKY_SLOPE);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v > E::zero() { v } else { v * s })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= E::zero() {
                E::one() / (E::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (E::one() + e)
            }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("non-empty shape");
        let y = softmax_rows(self.data(x), cols);
        let shape = self.shape(x).to_vec();
        self.push(Op::Softmax(x), shape, y, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = crate::autodiff::tensor::check_shape(shape)?;
        if n != self.value(x).numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} into {shape:?}", self.shape(x)),
            ));
        }
        let y = self.data(x).to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), y, &[x])
    }

    /// Keep the batch axis, merge the rest.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum();
        let n = self.data(a).len() as f64;
        self.push(Op::MseLoss(a, b), vec![1], vec![E::lit(s / n)], &[a, b])
    }

    /// Mean binary cross-entropy of probabilities `p` against targets `t`.
    pub fn bce_loss(&mut self, p: Var, t: Var) -> Result<Var> {
        self.same_shape("bce_loss", p, t)?;
        let s: f64 = self
            .data(p)
            .iter()
            .zip(self.data(t))
            .map(|(p, t)| {
                let pc = p.f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let t = t.f64();
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let n = self.data(p).len() as f64;
        self.push(Op::BceLoss(p, t), vec![1], vec![E::lit(s / n)], &[p, t])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets,
    /// evaluated in the overflow-free softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, t: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", logits, t)?;
        let s: f64 = self
            .data(logits)
            .iter()
            .zip(self.data(t))
            .map(|(l, t)| {
                let (l, t) = (l.f64(), t.f64());
                l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
            })
            .sum();
        let n = self.data(logits).len() as f64;
        self.push(Op::BceLogits(logits, t), vec![1], vec![E::lit(s / n)], &[logits, t])
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.shape(logits) {
            [n, c] => (n, c),
            ref s => return Err(shape_err("cross_entropy", format!("logits {s:?}"))),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(shape_err("cross_entropy", "labels do not match logits"));
        }
        let probs = softmax_rows(self.data(logits), c);
        let s: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * c + l].f64().max(1e-30)).ln())
            .sum();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(op, vec![1], vec![E::lit(s / n as f64)], &[logits])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: f64 = d.iter().map(|v| v.f64()).sum();
        let m = E::lit(s / d.len() as f64);
        self.push(Op::Mean(x), vec![1], vec![m], &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|v| v.f64()).sum();
        self.push(Op::Sum(x), vec![1], vec![E::lit(s)], &[x])
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op<E>, f: impl Fn(E, E) -> E) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, y, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: E) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), move |v| v * s)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar [1] loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &grads[i] {
                if matches!(node.op, Op::Leaf) && g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for leaf {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if let Some(gx) = self.slot(*x, grads) {
                    E::gemm(n, fout, fin, g, false, self.data(*w), false, gx, true);
                }
                if let Some(gw) = self.slot(*w, grads) {
                    E::gemm(fout, n, fin, g, true, self.data(*x), false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(*b, grads) {
                        for row in g.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let cout = self.shape(*w)[0];
                let plane = geom.oh * geom.ow;
                let g_cm = swap_outer(g, geom.n, cout, plane);
                if let Some(gw) = self.slot(*w, grads) {
                    E::gemm(cout, geom.cols(), geom.rows(), &g_cm, false, cols, true, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(*b, grads) {
                        channel_sums(g, geom.n, cout, plane, gb);
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let mut dcols = vec![E::zero(); geom.rows() * geom.cols()];
                    E::gemm(geom.rows(), cout, geom.cols(), self.data(*w), true, &g_cm, false, &mut dcols, false);
                    col2im(geom, &dcols, gx);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                x_cm,
            } => {
                let cin = self.shape(*x)[1];
                let mut dcols = vec![E::zero(); geom.rows() * geom.cols()];
                im2col(geom, g, &mut dcols);
                if let Some(gw) = self.slot(*w, grads) {
                    E::gemm(cin, geom.cols(), geom.rows(), x_cm, false, &dcols, true, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(*b, grads) {
                        channel_sums(g, geom.n, geom.c, geom.h * geom.w, gb);
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let mut gx_cm = vec![E::zero(); cin * geom.cols()];
                    E::gemm(cin, geom.rows(), geom.cols(), self.data(*w), false, &dcols, false, &mut gx_cm, false);
                    let back = swap_outer(&gx_cm, cin, geom.n, geom.oh * geom.ow);
                    gx.iter_mut().zip(back).for_each(|(a, v)| *a = *a + v);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (n * plane) as f64;
                let gam = self.data(*gamma);
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for k in base..base + plane {
                            sum_g[ch] += g[k].f64();
                            sum_gx[ch] += g[k].f64() * xhat[k].f64();
                        }
                    }
                }
                if let Some(gg) = self.slot(*gamma, grads) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, &v)| *a = *a + E::lit(v));
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, &v)| *a = *a + E::lit(v));
                }
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let gm = gam[ch].f64();
                            let is = inv_std[ch];
                            for k in base..base + plane {
                                let d = if *batch {
                                    gm * is / m
                                        * (m * g[k].f64() - sum_g[ch] - xhat[k].f64() * sum_gx[ch])
                                } else {
                                    gm * is * g[k].f64()
                                };
                                gx[k] = gx[k] + E::lit(d);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => self.elementwise(*x, grads, |k| {
                if self.data(*x)[k] > E::zero() {
                    g[k]
                } else {
                    E::zero()
                }
            }),
            Op::LeakyRelu(x, s) => self.elementwise(*x, grads, |k| {
                if self.data(*x)[k] > E::zero() {
                    g[k]
                } else {
                    g[k] * *s
                }
            }),
            Op::Tanh(x) => self.elementwise(*x, grads, |k| g[k] * (E::one() - y[k] * y[k])),
            Op::Sigmoid(x) => self.elementwise(*x, grads, |k| g[k] * y[k] * (E::one() - y[k])),
            Op::Softmax(x) => {
                let cols = *self.shape(*x).last().expect("shape");
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                        for j in 0..cols {
                            let v = yr[j].f64() * (gr[j].f64() - dot);
                            gx[r * cols + j] = gx[r * cols + j] + E::lit(v);
                        }
                    }
                }
            }
            Op::Reshape(x) => self.elementwise(*x, grads, |k| g[k]),
            Op::MseLoss(a, b) => {
                let n = self.data(*a).len() as f64;
                let scale = 2.0 * g[0].f64() / n;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.elementwise(*a, grads, |k| E::lit(scale * (ad[k].f64() - bd[k].f64())));
                self.elementwise(*b, grads, |k| E::lit(-scale * (ad[k].f64() - bd[k].f64())));
            }
            Op::BceLoss(p, t) => {
                let n = self.data(*p).len() as f64;
                let gl = g[0].f64() / n;
                let (pd, td) = (self.data(*p), self.data(*t));
                let clamp = |k: usize| pd[k].f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                self.elementwise(*p, grads, |k| {
                    let pc = clamp(k);
                    E::lit(gl * (pc - td[k].f64()) / (pc * (1.0 - pc)))
                });
                self.elementwise(*t, grads, |k| {
                    let pc = clamp(k);
                    E::lit(gl * ((1.0 - pc).ln() - pc.ln()))
                });
            }
            Op::BceLogits(l, t) => {
                let gl = g[0].f64() / self.data(*l).len() as f64;
                let (ld, td) = (self.data(*l), self.data(*t));
                self.elementwise(*l, grads, |k| {
                    let x = ld[k].f64();
                    let sig = if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        x.exp() / (1.0 + x.exp())
                    };
                    E::lit(gl * (sig - td[k].f64()))
                });
                self.elementwise(*t, grads, |k| E::lit(-gl * ld[k].f64()));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let gl = g[0].f64() / labels.len() as f64;
                self.elementwise(*logits, grads, |k| {
                    let (r, j) = (k / c, k % c);
                    let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                    E::lit(gl * (probs[k].f64() - onehot))
                });
            }
            Op::Mean(x) => {
                let n = E::lit(self.data(*x).len() as f64);
                self.elementwise(*x, grads, |_| g[0] / n);
            }
            Op::Sum(x) => self.elementwise(*x, grads, |_| g[0]),
            Op::Add(a, b) => {
                self.elementwise(*a, grads, |k| g[k]);
                self.elementwise(*b, grads, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.elementwise(*a, grads, |k| g[k]);
                self.elementwise(*b, grads, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.elementwise(*a, grads, |k| g[k] * bd[k]);
                self.elementwise(*b, grads, |k| g[k] * ad[k]);
            }
            Op::Scale(x, s) => self.elementwise(*x, grads, |k| g[k] * *s),
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` if `v`
    /// does not need a gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<E>>]) -> Option<&'g mut [E]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); n]))
    }

    fn elementwise(&self, x: Var, grads: &mut [Option<Vec<E>>], f: impl Fn(usize) -> E) {
        if let Some(gx) = self.slot(x, grads) {
            for (k, a) in gx.iter_mut().enumerate() {
                *a = *a + f(k);
            }
        }
    }
}

fn softmax_rows<E: Element>(x: &[E], cols: usize) -> Vec<E> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        y.extend(e.iter().map(|v| E::lit(v / s)));
    }
    y
}

fn add_channel_bias<E: Element>(y: &mut [E], bias: &[E], n: usize, c: usize, plane: usize) {
    for sample in y[..n * c * plane].chunks_mut(c * plane) {
        for (chan, &b) in sample.chunks_mut(plane).zip(bias) {
            chan.iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn channel_sums<E: Element>(g: &[E], n: usize, c: usize, plane: usize, out: &mut [E]) {
    for sample in g[..n * c * plane].chunks(c * plane) {
        for (chan, o) in sample.chunks(plane).zip(out.iter_mut()) {
            let s: f64 = chan.iter().map(|v| v.f64()).sum();
            *o = *o + E::lit(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 4, 4], 1.0).unwrap()).unwrap();
        let w = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0).unwrap()).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[0.3, -0.1, 0.7, 0.2])).unwrap();
        let b = tape.constant(t(&[2, 2], &[0.3, -0.1, 0.7, 0.2])).unwrap();
        let loss = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(loss).data(), &[0.0]);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let r = tape.constant(t(&[2], &[1.0, f32::NAN]));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn dense_shape_mismatch_is_descriptive() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let w = tape.constant(Tensor::zeros(&[4, 5]).unwrap()).unwrap();
        match tape.dense(x, w, None) {
            Err(Error::Shape(msg)) => assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]")),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn conv_then_transpose_restores_spatial_dims() {
        for (h, k, s, p) in [(16, 4, 2, 1), (8, 3, 1, 1), (9, 3, 2, 1), (12, 5, 1, 2), (7, 1, 1, 0)] {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::zeros(&[1, 2, h, h]).unwrap()).unwrap();
            let w = tape.constant(Tensor::zeros(&[3, 2, k, k]).unwrap()).unwrap();
            let y = tape.conv2d(x, w, None, s, p).unwrap();
            let wt = tape.constant(Tensor::zeros(&[3, 2, k, k]).unwrap()).unwrap();
            let z = tape.conv_transpose2d(y, wt, None, s, p).unwrap();
            assert_eq!(tape.shape(z), &[1, 2, h, h], "h={h} k={k} s={s} p={p}");
        }
    }

    #[test]
    fn forward_op_dispatch_matches_direct_call() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 2], &[0.5, -0.5])).unwrap();
        let w = tape.constant(t(&[1, 2], &[2.0, 1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.25])).unwrap();
        let y = tape.forward_op(&LayerKind::Dense, &[x, w, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.75]);
        assert!(tape.forward_op(&LayerKind::Dense, &[x, w]).is_err());
    }
}
