//! Reverse-mode gradient recording.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Tape::backward`] walks it once in reverse.

use crate::conv::{conv_backward, conv_forward, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        offset: usize,
    },
    MeanChunks {
        input: Var,
        chunks: usize,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// True when `rhs` either matches `lhs` or matches `lhs` without its leading
/// (batch) axis.
fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs || (lhs.len() > 1 && &lhs[1..] == rhs)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcastable(va.shape(), vb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let rhs = vb.data();
        let data = va
            .data()
            .chunks(rhs.len())
            .flat_map(|chunk| chunk.iter().zip(rhs).map(|(&x, &y)| f(x, y)))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise sum. `b` may omit the leading batch axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product. `b` may omit the leading batch axis of `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.needs(a);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Cross-correlation with "same-ceil" zero padding.
    ///
    /// `input` is `[C_in, H, W]` or `[B, C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, K, K]` and `bias`, when present, is `[C_out]`. The
    /// output keeps the input's rank with spatial size `ceil(H / stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let (batch, dims) = match xs.as_slice() {
            [c, h, w] => (1, [*c, *h, *w]),
            [b, c, h, w] => (*b, [*c, *h, *w]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d input",
                    expected: vec![0, 0, 0],
                    got: xs,
                })
            }
        };
        let [c_in, h, w] = dims;
        if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d kernel",
                expected: vec![ks.first().copied().unwrap_or(1), c_in, 4, 4],
                got: ks,
            });
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [ks[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    expected: vec![ks[0]],
                    got: bs.to_vec(),
                });
            }
        }
        let geom = ConvGeometry::same_ceil(batch, c_in, ks[0], h, w, ks[2], stride);
        let data = conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if xs.len() == 3 {
            vec![geom.out_channels, geom.out_h, geom.out_w]
        } else {
            vec![batch, geom.out_channels, geom.out_h, geom.out_w]
        };
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `W·x + b` for `x` of shape `[F_in]` or `[B, F_in]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let (batch, f_in) = match xs.as_slice() {
            [f] => (1, *f),
            [b, f] => (*b, *f),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "fully_connected input",
                    expected: vec![ws.get(1).copied().unwrap_or(0)],
                    got: xs,
                })
            }
        };
        if ws.len() != 2 || ws[1] != f_in {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected weight",
                expected: vec![ws.first().copied().unwrap_or(0), f_in],
                got: ws,
            });
        }
        let f_out = ws[0];
        if bs != [f_out] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected bias",
                expected: vec![f_out],
                got: bs,
            });
        }
        let bias_data = self.value(bias).data();
        let mut out: Vec<f64> = (0..batch).flat_map(|_| bias_data.iter().copied()).collect();
        gemm(
            1.0,
            self.value(input).data(),
            Layout::row_major(batch, f_in),
            self.value(weight).data(),
            Layout::row_major(f_out, f_in).t(),
            1.0,
            &mut out,
            Layout::row_major(batch, f_out),
        );
        let shape = if xs.len() == 1 { vec![f_out] } else { vec![batch, f_out] };
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Linear {
                input,
                weight,
                bias,
                batch,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if len == 0 || start + len > shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "narrow",
                expected: vec![start + len.max(1)],
                got: shape.to_vec(),
            });
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let data = v.data()[start * row..(start + len) * row].to_vec();
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.needs(a);
        Ok(self.push(
            out,
            Op::Narrow {
                input: a,
                offset: start * row,
            },
            rg,
        ))
    }

    /// Splits the leading axis into `chunks` equal consecutive blocks and
    /// averages them: `[chunks·B, ...] -> [B, ...]`.
    pub fn mean_chunks(&mut self, a: Var, chunks: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if chunks == 0 || shape[0] % chunks != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_chunks",
                expected: vec![chunks],
                got: shape.to_vec(),
            });
        }
        let block = v.len() / chunks;
        let mut data = vec![0.0; block];
        for chunk in v.data().chunks(block) {
            for (d, x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
        let scale = 1.0 / chunks as f64;
        data.iter_mut().for_each(|d| *d *= scale);
        let mut out_shape = shape.to_vec();
        out_shape[0] /= chunks;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.needs(a);
        Ok(self.push(out, Op::MeanChunks { input: a, chunks }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    ///
    /// `logits` is `[C]` with one target or `[B, C]` with `B` targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let classes = *v.shape().last().unwrap();
        let batch = v.len() / classes;
        if v.shape().len() > 2 || targets.len() != batch {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: vec![targets.len(), classes],
                got: v.shape().to_vec(),
            });
        }
        if let Some(&target) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange { target, classes });
        }
        let mut probs = Vec::with_capacity(v.len());
        let mut loss = 0.0;
        for (row, &t) in v.data().chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_total = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss -= row[t] - max - log_total;
            probs.extend(row.iter().map(|&z| (z - max - log_total).exp()));
        }
        let out = Tensor::scalar(loss / batch as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    /// Folds a full-size gradient down to `target`'s (possibly batch-broadcast) size.
    fn reduce_to(&self, target: Var, full: Vec<f64>) -> Vec<f64> {
        let n = self.value(target).len();
        if n == full.len() {
            return full;
        }
        let mut out = vec![0.0; n];
        for chunk in full.chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gd.to_vec());
                if self.needs(b) {
                    let db = self.reduce_to(b, gd.to_vec());
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let da = gd
                        .chunks(vb.len())
                        .flat_map(|c| c.iter().zip(vb).map(|(g, y)| g * y))
                        .collect();
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let full: Vec<f64> = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    let db = self.reduce_to(b, full);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, a, da);
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                let da = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, a, da);
            }
            &Op::LeakyRelu(a, slope) => {
                let x = self.value(a).data();
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, a, da);
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                ref geom,
            } => {
                let need = [
                    self.needs(input),
                    self.needs(kernel),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let cg = conv_backward(geom, self.value(input).data(), self.value(kernel).data(), gd, need);
                if let Some(dx) = cg.input {
                    self.accumulate(grads, input, dx);
                }
                if let Some(dk) = cg.kernel {
                    self.accumulate(grads, kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Linear {
                input,
                weight,
                bias,
                batch,
            } => {
                let w = self.value(weight);
                let (f_out, f_in) = (w.shape()[0], w.shape()[1]);
                let dy = Layout::row_major(batch, f_out);
                if self.needs(input) {
                    let mut dx = vec![0.0; batch * f_in];
                    gemm(
                        1.0,
                        gd,
                        dy,
                        w.data(),
                        Layout::row_major(f_out, f_in),
                        0.0,
                        &mut dx,
                        Layout::row_major(batch, f_in),
                    );
                    self.accumulate(grads, input, dx);
                }
                if self.needs(weight) {
                    let mut dw = vec![0.0; f_out * f_in];
                    gemm(
                        1.0,
                        gd,
                        dy.t(),
                        self.value(input).data(),
                        Layout::row_major(batch, f_in),
                        0.0,
                        &mut dw,
                        Layout::row_major(f_out, f_in),
                    );
                    self.accumulate(grads, weight, dw);
                }
                if self.needs(bias) {
                    let db = self.reduce_to(bias, gd.to_vec());
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Reshape(a) => self.accumulate(grads, a, gd.to_vec()),
            &Op::Narrow { input, offset } => {
                if self.needs(input) {
                    let mut dx = vec![0.0; self.value(input).len()];
                    dx[offset..offset + gd.len()].copy_from_slice(gd);
                    self.accumulate(grads, input, dx);
                }
            }
            &Op::MeanChunks { input, chunks } => {
                let scale = 1.0 / chunks as f64;
                let dx = (0..chunks).flat_map(|_| gd.iter().map(|g| g * scale)).collect();
                self.accumulate(grads, input, dx);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![gd[0]; n]);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let classes = probs.len() / targets.len();
                let scale = gd[0] / targets.len() as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dz[row * classes + t] -= scale;
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}
