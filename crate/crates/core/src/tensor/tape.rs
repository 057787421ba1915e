//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward sweep. `backward` walks the list once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvCfg, PoolCfg, Stencil1d};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: ConvCfg,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        cfg: PoolCfg,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Add(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `y = w[index] * x` for a 1-D weight vector `w`.
    Scale {
        x: Var,
        w: Var,
        index: usize,
    },
    MulConst(Var, f64),
    Softmax(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Separable {
        x: Var,
        rows: Stencil1d,
        cols: Stencil1d,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward sweep.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: Vec<ParamGroup>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which weights and architecture logits are both trainable.
    pub fn new() -> Self {
        Self::with_trainable(&[ParamGroup::Weight, ParamGroup::Arch])
    }

    pub fn with_trainable(groups: &[ParamGroup]) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: groups.to_vec(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Non-finite data is rejected.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let trainable = self.trainable.contains(&store.group(id));
        let v = self.leaf(store.get(id).clone(), trainable)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: ConvCfg) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), cfg)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, cfg }, &ins))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = kernels::deconv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(
            y,
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &ins,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::upsample_nearest_forward(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }, &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, cfg: PoolCfg) -> Result<Var> {
        let (y, argmax) = kernels::max_pool_forward(self.value(x), cfg)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool2d(&mut self, x: Var, cfg: PoolCfg) -> Result<Var> {
        let y = kernels::avg_pool_forward(self.value(x), cfg)?;
        Ok(self.push(y, Op::AvgPool { x, cfg }, &[x]))
    }

    /// Batch norm with batch statistics. Returns the output and the batch
    /// `(mean, biased variance)` so the caller can update running stats.
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, shift: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check_bn(x, gain, shift)?;
        let (mean, var) = kernels::channel_stats(self.value(x));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
        let (y, xhat) = kernels::batch_norm_apply(
            self.value(x),
            self.value(gain).data(),
            self.value(shift).data(),
            &mean,
            &inv_std,
        );
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gain, shift],
        );
        Ok((v, mean, var))
    }

    /// Batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gain: Var, shift: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        self.check_bn(x, gain, shift)?;
        let c = self.shape(x)[1];
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm2d", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
        let (y, xhat) = kernels::batch_norm_apply(
            self.value(x),
            self.value(gain).data(),
            self.value(shift).data(),
            mean,
            &inv_std,
        );
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gain, shift],
        ))
    }

    fn check_bn(&self, x: Var, gain: Var, shift: Var) -> Result<()> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("expected NCHW, got {s:?}")));
        }
        let c = s[1];
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!("channel dim {c} vs affine {:?}", self.shape(gain)),
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    /// Hyperbolic tangent, clamped so outputs stay strictly inside (-1, 1).
    pub fn tanh(&mut self, x: Var) -> Var {
        const EDGE: f64 = 1.0 - f64::EPSILON / 2.0;
        let y = self.value(x).map(|v| v.tanh().clamp(-EDGE, EDGE));
        self.push(y, Op::Tanh(x), &[x])
    }

    /// `y = x W^T + b` with `x: (B, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[batch, fin], &[fout, win]) = (xs, ws) else {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        };
        if fin != win {
            return Err(Error::shape("linear", format!("input features {fin} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; batch * fout];
        for i in 0..batch {
            let row = &xd[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                let mut acc = b.map_or(0.0, |b| self.value(b).data()[o]);
                for k in 0..fin {
                    acc += row[k] * wr[k];
                }
                out[i * fout + o] = acc;
            }
        }
        let y = Tensor::from_vec(&[batch, fout], out);
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &ins))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("add", "no operands"));
        };
        let mut y = self.value(first).clone();
        for &v in &xs[1..] {
            if self.shape(v) != y.shape() {
                return Err(Error::shape(
                    "add",
                    format!("{:?} vs {:?}", y.shape(), self.shape(v)),
                ));
            }
            y.add_assign(self.value(v));
        }
        Ok(self.push(y, Op::Add(xs.to_vec()), xs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equally-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies `x` by element `index` of the 1-D tensor `w`.
    pub fn scale(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 1 || index >= ws[0] {
            return Err(Error::shape("scale", format!("index {index} into weights {ws:?}")));
        }
        let k = self.value(w).data()[index];
        let y = self.value(x).map(|v| k * v);
        Ok(self.push(y, Op::Scale { x, w, index }, &[x, w]))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| c * v);
        self.push(y, Op::MulConst(x, c), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let Some(&n) = t.shape().last() else {
            return Err(Error::shape("softmax", "zero-dimensional input"));
        };
        if n == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let y = Tensor::from_vec(t.shape(), out);
        Ok(self.push(y, Op::Softmax(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::abs);
        self.push(y, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(y, Op::Mean(x), &[x])
    }

    /// Selects rows along the first axis; repeated rows accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n.max(1);
        let mut out = Vec::with_capacity(per * rows.len());
        for &r in rows {
            if r >= n {
                return Err(Error::shape("gather", format!("row {r} of {n}")));
            }
            out.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let y = Tensor::from_vec(&shape, out);
        Ok(self.push(
            y,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Applies a separable linear map (height stencil, width stencil) per plane.
    pub fn separable(&mut self, x: Var, rows: Stencil1d, cols: Stencil1d) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] != rows.in_len || s[3] != cols.in_len {
            return Err(Error::shape(
                "pyramid",
                format!("input {s:?} vs stencils {}x{}", rows.in_len, cols.in_len),
            ));
        }
        let y = kernels::separable_apply(self.value(x), &rows, &cols, false);
        Ok(self.push(y, Op::Separable { x, rows, cols }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(&loss_shape, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(gy);
                continue;
            }
            let contributions = self.node_backward(node, &gy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // only trainable leaves keep gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn node_backward(&self, node: &Node, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, cfg } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), gy, *cfg, rg(*x));
                out.extend(dx.map(|d| (*x, d)));
                out.push((*w, dw));
                out.extend(b.map(|b| (b, db)));
            }
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) = kernels::deconv2d_backward(val(*x), val(*w), gy, *stride, *padding, rg(*x));
                out.extend(dx.map(|d| (*x, d)));
                out.push((*w, dw));
                out.extend(b.map(|b| (b, db)));
            }
            Op::Upsample { x, factor } => {
                out.push((*x, kernels::upsample_nearest_backward(val(*x).shape(), gy, *factor)));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, kernels::max_pool_backward(val(*x).shape(), gy, argmax)));
            }
            Op::AvgPool { x, cfg } => {
                out.push((*x, kernels::avg_pool_backward(val(*x).shape(), gy, *cfg)));
            }
            Op::BatchNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let shape = val(*x).shape();
                let g = val(*gain).data();
                let (dx, dg, ds) = if *train {
                    kernels::batch_norm_train_backward(shape, gy, xhat, g, inv_std)
                } else {
                    kernels::batch_norm_eval_backward(shape, gy, xhat, g, inv_std)
                };
                let c = dg.len();
                out.push((*x, dx));
                out.push((*gain, Tensor::from_vec(&[c], dg)));
                out.push((*shift, Tensor::from_vec(&[c], ds)));
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .zip_map(gy, |xv, g| if xv > 0.0 { g } else { 0.0 })
                    .unwrap();
                out.push((*x, d));
            }
            Op::Tanh(x) => {
                let d = node.value.zip_map(gy, |y, g| g * (1.0 - y * y)).unwrap();
                out.push((*x, d));
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (val(*x), val(*w));
                let (batch, fin) = (xs.shape()[0], xs.shape()[1]);
                let fout = ws.shape()[0];
                let (xd, wd, g) = (xs.data(), ws.data(), gy.data());
                if rg(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    for i in 0..batch {
                        for o in 0..fout {
                            let gv = g[i * fout + o];
                            for k in 0..fin {
                                dx[i * fin + k] += gv * wd[o * fin + k];
                            }
                        }
                    }
                    out.push((*x, Tensor::from_vec(xs.shape(), dx)));
                }
                let mut dw = vec![0.0; fout * fin];
                let mut db = vec![0.0; fout];
                for i in 0..batch {
                    for o in 0..fout {
                        let gv = g[i * fout + o];
                        db[o] += gv;
                        for k in 0..fin {
                            dw[o * fin + k] += gv * xd[i * fin + k];
                        }
                    }
                }
                out.push((*w, Tensor::from_vec(ws.shape(), dw)));
                out.extend(b.map(|b| (b, Tensor::from_vec(&[fout], db))));
            }
            Op::Reshape(x) => {
                out.push((*x, gy.clone().reshape(val(*x).shape()).unwrap()));
            }
            Op::Add(xs) => {
                for &x in xs {
                    out.push((x, gy.clone()));
                }
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                out.push((*a, val(*b).zip_map(gy, |q, g| q * g).unwrap()));
                out.push((*b, val(*a).zip_map(gy, |p, g| p * g).unwrap()));
            }
            Op::Scale { x, w, index } => {
                let wt = val(*w);
                let k = wt.data()[*index];
                out.push((*x, gy.map(|g| k * g)));
                if rg(*w) {
                    let dot: f64 = val(*x).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
                    let mut dw = Tensor::zeros(wt.shape());
                    dw.data_mut()[*index] = dot;
                    out.push((*w, dw));
                }
            }
            Op::MulConst(x, c) => out.push((*x, gy.map(|g| c * g))),
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(gy.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                out.push((*x, Tensor::from_vec(y.shape(), dx)));
            }
            Op::Abs(x) => {
                let d = val(*x).zip_map(gy, |v, g| g * sign(v)).unwrap();
                out.push((*x, d));
            }
            Op::Square(x) => {
                let d = val(*x).zip_map(gy, |v, g| 2.0 * v * g).unwrap();
                out.push((*x, d));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), gy.item())));
            }
            Op::Mean(x) => {
                let t = val(*x);
                out.push((*x, Tensor::full(t.shape(), gy.item() / t.numel() as f64)));
            }
            Op::Gather { x, rows } => {
                let t = val(*x);
                let per = t.numel() / t.shape()[0].max(1);
                let mut dx = vec![0.0; t.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..per {
                        dx[r * per + k] += gy.data()[i * per + k];
                    }
                }
                out.push((*x, Tensor::from_vec(t.shape(), dx)));
            }
            Op::Separable { x, rows, cols } => {
                out.push((*x, kernels::separable_apply(gy, rows, cols, true)));
            }
        }
        out
    }
}

/// Subgradient convention: `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of trainable leaves after one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.5; 6]), true).unwrap();
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]), true).unwrap();
        let sq = tape.square(x);
        let s = tape.sum(sq);
        assert_eq!(tape.value(s).item(), 5.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), true).unwrap();
        let c = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0])).unwrap();
        let d = tape.sub(x, c).unwrap();
        let s = tape.sum(d);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::from_vec(&[1], vec![f64::NAN]), false);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let g = tape.gather_rows(z, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn tanh_stays_open_interval() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1e3, 0.0, 1e3]), false).unwrap();
        let y = tape.tanh(x);
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1.0));
    }
}
