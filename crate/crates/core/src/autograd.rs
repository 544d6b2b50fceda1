//! A small reverse-mode tape over rank-2 `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the reverse of creation order
//! is a valid topological order for the backward pass.

use crate::error::{Error, Result};
use crate::ssm::{selective_scan_backward, selective_scan_forward, ScanDims};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a masked token loss is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    DwConv2d {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        kernel: usize,
    },
    CausalConv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        dims: ScanDims,
        states: Vec<f64>,
    },
    CausalSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one backward pass, indexed by [`Var`].
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

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::invalid(format!("matmul_bt: {m}x{k} vs {n}x{k2}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (r, c) = self.dims(row);
        if r != 1 || c != n {
            return Err(Error::invalid(format!("{what}: {m}x{n} with row {r}x{c}")));
        }
        let vr = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(vr)
                    .map(|(&a, &b)| f(a, b))
                    .collect::<Vec<_>>()
            })
            .collect();
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, op, &[x, row]))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |a| a * sigmoid(a), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Per-row layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.dims(v) != (1, n) {
                return Err(Error::invalid(format!("layer_norm {name} must be 1x{n}")));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::invalid(
                "gather index length does not match output shape",
            ));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Select whole rows of `x` in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!("row {bad} out of range {m}")));
        }
        let index = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(x, index, rows.len(), n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero parts"));
        };
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::invalid(format!("concat_rows: width {c} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(x), &[x]))
    }

    /// Depthwise 2-D convolution with zero padding over a `height x width`
    /// grid stored as `(height*width) x channels`; `w` is `kernel^2 x channels`.
    pub fn dw_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        kernel: usize,
    ) -> Result<Var> {
        let (m, c) = self.dims(x);
        if m != height * width || kernel.is_multiple_of(2) {
            return Err(Error::invalid("dw_conv2d: bad grid or even kernel"));
        }
        if self.dims(w) != (kernel * kernel, c) || self.dims(b) != (1, c) {
            return Err(Error::invalid("dw_conv2d: weight/bias shape mismatch"));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let pad = (kernel / 2) as isize;
        let mut out = vec![0.0; m * c];
        for i in 0..height {
            for j in 0..width {
                let o = &mut out[(i * width + j) * c..(i * width + j + 1) * c];
                o.copy_from_slice(bv);
                for di in 0..kernel {
                    let si = i as isize + di as isize - pad;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for dj in 0..kernel {
                        let sj = j as isize + dj as isize - pad;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        let src = &xv[(si as usize * width + sj as usize) * c..][..c];
                        let wr = &wv[(di * kernel + dj) * c..][..c];
                        for ch in 0..c {
                            o[ch] += wr[ch] * src[ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(m, c, out)?;
        Ok(self.push(
            out,
            Op::DwConv2d {
                x,
                w,
                b,
                height,
                width,
                kernel,
            },
            &[x, w, b],
        ))
    }

    /// Depthwise causal 1-D convolution over rows; `w` is `kernel x channels`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let (m, c) = self.dims(x);
        if self.dims(w) != (kernel, c) || self.dims(b) != (1, c) {
            return Err(Error::invalid("causal_conv1d: weight/bias shape mismatch"));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * c];
        for t in 0..m {
            let o = &mut out[t * c..(t + 1) * c];
            o.copy_from_slice(bv);
            for k in 0..kernel {
                let Some(src_t) = (t + k + 1).checked_sub(kernel) else {
                    continue;
                };
                for ch in 0..c {
                    o[ch] += wv[k * c + ch] * xv[src_t * c + ch];
                }
            }
        }
        let out = Tensor::matrix(m, c, out)?;
        Ok(self.push(out, Op::CausalConv1d { x, w, b, kernel }, &[x, w, b]))
    }

    /// Selective scan with ZOH discretization. `x, delta: L x D`,
    /// `a: D x N` (continuous, should be negative), `b, c: L x N`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (len, channels) = self.dims(x);
        let (d2, state) = self.dims(a);
        if self.dims(delta) != (len, channels)
            || d2 != channels
            || self.dims(b) != (len, state)
            || self.dims(c) != (len, state)
        {
            return Err(Error::invalid("selective_scan: inconsistent shapes"));
        }
        let dims = ScanDims {
            len,
            channels,
            state,
        };
        let (y, states) = selective_scan_forward(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let out = Tensor::matrix(len, channels, y)?;
        Ok(self.push(
            out,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                dims,
                states,
            },
            &[x, delta, a, b, c],
        ))
    }

    /// Row softmax of a square score matrix with entries above the diagonal masked.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != n {
            return Err(Error::invalid("causal_softmax expects a square matrix"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * n + j] /= z;
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::CausalSoftmax(x), &[x]))
    }

    /// Masked token negative log-likelihood.
    ///
    /// `mask[i]` selects which rows contribute; with [`Reduction::Mean`] the
    /// sum is divided by the number of selected rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[f64],
        reduction: Reduction,
    ) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.len() != m || mask.len() != m {
            return Err(Error::invalid(format!(
                "cross_entropy: {m} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let total: f64 = mask.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateBatch(
                "loss mask selects no positions".into(),
            ));
        }
        let denom = match reduction {
            Reduction::Mean => total,
            Reduction::Sum => 1.0,
        };
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
            if mask[i] != 0.0 {
                let t = targets[i] as usize;
                if t >= v {
                    return Err(Error::invalid(format!("target {t} out of vocabulary {v}")));
                }
                loss += mask[i] * (log_z - row[t]);
            }
        }
        let weights = mask.iter().map(|w| w / denom).collect();
        Ok(self.push(
            Tensor::row_vector(vec![loss / denom]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::row_vector(vec![s]), Op::Sum(x), &[x])
    }

    /// Backward pass from a scalar (`1 x 1`) output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::invalid(
                "backward() needs a scalar output; use backward_with",
            ));
        }
        self.backward_with(out, Tensor::full(self.value(out).shape(), 1.0))
    }

    /// Backward pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::invalid("seed gradient shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| matmul_bt_into(gd, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(av, gd, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| matmul_into(gd, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(gd, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(gd).for_each(|(o, g)| *o -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut()
                        .zip(gd)
                        .zip(bv)
                        .for_each(|((o, g), y)| *o += g * y)
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut()
                        .zip(gd)
                        .zip(av)
                        .for_each(|((o, g), x)| *o += g * x)
                });
            }
            Op::AddRow(x, row) => {
                let n = self.dims(*x).1;
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
                self.accumulate(grads, *row, |gr| {
                    for chunk in gd.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let n = self.dims(*x).1;
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                self.accumulate(grads, *x, |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += gd[i] * rv[i % n];
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for (i, (&g, &x)) in gd.iter().zip(xv).enumerate() {
                        gr[i % n] += g * x;
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(gd).for_each(|(o, g)| *o += f * g)
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &g), &a) in gx.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(a);
                        *o += g * s * (1.0 + a * (1.0 - s));
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &g), &a) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += g * sigmoid(a);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = self.nodes[idx].value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &g), &y) in gx.iter_mut().zip(gd).zip(yv) {
                        *o += g * y;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |gg| {
                    for (i, (&g, &h)) in gd.iter().zip(xhat).enumerate() {
                        gg[i % n] += g * h;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for chunk in gd.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut gh = vec![0.0; n];
                    for i in 0..m {
                        let row_g = &gd[i * n..(i + 1) * n];
                        let row_h = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            gh[j] = row_g[j] * gv[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh =
                            gh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (gh[j] - mean_gh - row_h[j] * mean_ghh);
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (&i, &g) in index.iter().zip(gd) {
                        gx[i] += g;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.dims(*x);
                let inv = 1.0 / m as f64;
                self.accumulate(grads, *x, |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += gd[i % n] * inv;
                    }
                });
            }
            Op::DwConv2d {
                x,
                w,
                b,
                height,
                width,
                kernel,
            } => {
                let (height, width, kernel) = (*height, *width, *kernel);
                let c = self.dims(*x).1;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let pad = (kernel / 2) as isize;
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..height {
                        for j in 0..width {
                            for di in 0..kernel {
                                let si = i as isize + di as isize - pad;
                                if si < 0 || si >= height as isize {
                                    continue;
                                }
                                for dj in 0..kernel {
                                    let sj = j as isize + dj as isize - pad;
                                    if sj < 0 || sj >= width as isize {
                                        continue;
                                    }
                                    f(
                                        i * width + j,
                                        si as usize * width + sj as usize,
                                        di * kernel + dj,
                                    );
                                }
                            }
                        }
                    }
                };
                self.accumulate(grads, *x, |gx| {
                    taps(&mut |out, src, tap| {
                        for ch in 0..c {
                            gx[src * c + ch] += gd[out * c + ch] * wv[tap * c + ch];
                        }
                    })
                });
                self.accumulate(grads, *w, |gw| {
                    taps(&mut |out, src, tap| {
                        for ch in 0..c {
                            gw[tap * c + ch] += gd[out * c + ch] * xv[src * c + ch];
                        }
                    })
                });
                self.accumulate(grads, *b, |gb| {
                    for chunk in gd.chunks(c) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::CausalConv1d { x, w, b, kernel } => {
                let kernel = *kernel;
                let (m, c) = self.dims(*x);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| {
                    for t in 0..m {
                        for k in 0..kernel {
                            let Some(s) = (t + k + 1).checked_sub(kernel) else {
                                continue;
                            };
                            for ch in 0..c {
                                gx[s * c + ch] += gd[t * c + ch] * wv[k * c + ch];
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for t in 0..m {
                        for k in 0..kernel {
                            let Some(s) = (t + k + 1).checked_sub(kernel) else {
                                continue;
                            };
                            for ch in 0..c {
                                gw[k * c + ch] += gd[t * c + ch] * xv[s * c + ch];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for chunk in gd.chunks(c) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                dims,
                states,
            } => {
                let sg = selective_scan_backward(
                    *dims,
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    states,
                    gd,
                );
                self.accumulate(grads, *x, |o| add_into(o, &sg.x));
                self.accumulate(grads, *delta, |o| add_into(o, &sg.delta));
                self.accumulate(grads, *a, |o| add_into(o, &sg.a));
                self.accumulate(grads, *b, |o| add_into(o, &sg.b));
                self.accumulate(grads, *c, |o| add_into(o, &sg.c));
            }
            Op::CausalSoftmax(x) => {
                let n = self.dims(*x).1;
                let yv = self.nodes[idx].value.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        let dot: f64 = (0..=i).map(|j| yv[i * n + j] * gd[i * n + j]).sum();
                        for j in 0..=i {
                            gx[i * n + j] += yv[i * n + j] * (gd[i * n + j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.dims(*logits).1;
                let upstream = gd[0];
                self.accumulate(grads, *logits, |gl| {
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = upstream * w;
                        for j in 0..v {
                            gl[i * v + j] += s * probs[i * v + j];
                        }
                        gl[i * v + targets[i] as usize] -= s;
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
