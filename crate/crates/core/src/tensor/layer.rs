use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{conv_out_len, deconv_out_len, ConvCfg, PoolCfg, BN_MOMENTUM};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    SepConv2d,
    DilConv2d,
    Deconv2d,
    NnUpsample2d,
    MaxPool2d,
    AvgPool2d,
    BatchNorm2d,
    Relu,
    Tanh,
    Linear,
    Reshape,
    Add,
    Scale,
    Softmax,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Conv2d,
        OpKind::SepConv2d,
        OpKind::DilConv2d,
        OpKind::Deconv2d,
        OpKind::NnUpsample2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::BatchNorm2d,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Linear,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::SepConv2d => "sep_conv2d",
            OpKind::DilConv2d => "dil_conv2d",
            OpKind::Deconv2d => "deconv2d",
            OpKind::NnUpsample2d => "nn_upsample2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::BatchNorm2d => "batch_norm2d",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Linear => "linear",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One primitive layer: its hyperparameters plus handles to its tensors in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpParams {
    pub kind: OpKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub scale_factor: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Per-sample target shape for `reshape`; element index for `scale`.
    pub target_shape: Vec<usize>,
    pub index: usize,
    /// Learnable tensors, ordered per kind (see constructors).
    pub weights: Vec<ParamId>,
    /// Batch-norm running mean and variance.
    pub running: Option<(ParamId, ParamId)>,
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl OpParams {
    fn bare(kind: OpKind) -> Self {
        OpParams {
            kind,
            kernel: 0,
            stride: 1,
            padding: 0,
            dilation: 1,
            scale_factor: 1,
            in_channels: 0,
            out_channels: 0,
            target_shape: Vec::new(),
            index: 0,
            weights: Vec::new(),
            running: None,
        }
    }

    /// Dense convolution; weights `[kernel, bias?]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut op = Self::bare(OpKind::Conv2d);
        op.kernel = kernel;
        op.stride = stride;
        op.padding = padding;
        op.in_channels = cin;
        op.out_channels = cout;
        let w = he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        op.weights.push(store.push(format!("{name}.weight"), ParamGroup::Weight, w));
        if bias {
            op.weights
                .push(store.push(format!("{name}.bias"), ParamGroup::Weight, Tensor::zeros(&[cout])));
        }
        op
    }

    /// Depthwise `k x k` (optionally dilated) followed by pointwise `1 x 1`.
    #[allow(clippy::too_many_arguments)]
    fn depthwise_pointwise<R: Rng + ?Sized>(
        kind: OpKind,
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let mut op = Self::bare(kind);
        op.kernel = kernel;
        op.dilation = dilation;
        op.padding = dilation * (kernel - 1) / 2;
        op.in_channels = cin;
        op.out_channels = cout;
        let dw = he_normal(&[cin, 1, kernel, kernel], kernel * kernel, rng);
        let pw = he_normal(&[cout, cin, 1, 1], cin, rng);
        op.weights.push(store.push(format!("{name}.depthwise"), ParamGroup::Weight, dw));
        op.weights.push(store.push(format!("{name}.pointwise"), ParamGroup::Weight, pw));
        op
    }

    /// Size-preserving separable convolution; weights `[depthwise, pointwise]`.
    pub fn sep_conv2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self::depthwise_pointwise(OpKind::SepConv2d, store, name, cin, cout, kernel, 1, rng)
    }

    /// Size-preserving dilated separable convolution (dilation 2).
    pub fn dil_conv2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self::depthwise_pointwise(OpKind::DilConv2d, store, name, cin, cout, kernel, 2, rng)
    }

    /// Transposed convolution; weights `[kernel (Cin, Cout, k, k), bias?]`.
    #[allow(clippy::too_many_arguments)]
    pub fn deconv2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut op = Self::bare(OpKind::Deconv2d);
        op.kernel = kernel;
        op.stride = stride;
        op.padding = padding;
        op.in_channels = cin;
        op.out_channels = cout;
        let w = he_normal(&[cin, cout, kernel, kernel], cin * kernel * kernel, rng);
        op.weights.push(store.push(format!("{name}.weight"), ParamGroup::Weight, w));
        if bias {
            op.weights
                .push(store.push(format!("{name}.bias"), ParamGroup::Weight, Tensor::zeros(&[cout])));
        }
        op
    }

    pub fn nn_upsample2d(factor: usize) -> Self {
        let mut op = Self::bare(OpKind::NnUpsample2d);
        op.scale_factor = factor;
        op
    }

    pub fn max_pool2d(kernel: usize, stride: usize, padding: usize) -> Self {
        let mut op = Self::bare(OpKind::MaxPool2d);
        op.kernel = kernel;
        op.stride = stride;
        op.padding = padding;
        op
    }

    pub fn avg_pool2d(kernel: usize, stride: usize, padding: usize) -> Self {
        let mut op = Self::bare(OpKind::AvgPool2d);
        op.kernel = kernel;
        op.stride = stride;
        op.padding = padding;
        op
    }

    /// Affine batch norm; weights `[gain, shift]` plus running buffers.
    pub fn batch_norm2d(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mut op = Self::bare(OpKind::BatchNorm2d);
        op.in_channels = channels;
        op.out_channels = channels;
        op.weights
            .push(store.push(format!("{name}.gain"), ParamGroup::Weight, Tensor::ones(&[channels])));
        op.weights
            .push(store.push(format!("{name}.shift"), ParamGroup::Weight, Tensor::zeros(&[channels])));
        let mean = store.push(
            format!("{name}.running_mean"),
            ParamGroup::Buffer,
            Tensor::zeros(&[channels]),
        );
        let var = store.push(
            format!("{name}.running_var"),
            ParamGroup::Buffer,
            Tensor::ones(&[channels]),
        );
        op.running = Some((mean, var));
        op
    }

    pub fn relu() -> Self {
        Self::bare(OpKind::Relu)
    }

    pub fn tanh() -> Self {
        Self::bare(OpKind::Tanh)
    }

    /// Fully connected layer; weights `[matrix (out, in), bias]`.
    pub fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let mut op = Self::bare(OpKind::Linear);
        op.in_channels = fin;
        op.out_channels = fout;
        let w = he_normal(&[fout, fin], fin, rng);
        op.weights.push(store.push(format!("{name}.weight"), ParamGroup::Weight, w));
        op.weights
            .push(store.push(format!("{name}.bias"), ParamGroup::Weight, Tensor::zeros(&[fout])));
        op
    }

    /// Reshape keeping the leading batch axis.
    pub fn reshape(per_sample: &[usize]) -> Self {
        let mut op = Self::bare(OpKind::Reshape);
        op.target_shape = per_sample.to_vec();
        op
    }

    pub fn add() -> Self {
        Self::bare(OpKind::Add)
    }

    /// Scales input 0 by element `index` of the 1-D input 1.
    pub fn scale(index: usize) -> Self {
        let mut op = Self::bare(OpKind::Scale);
        op.index = index;
        op
    }

    pub fn softmax() -> Self {
        Self::bare(OpKind::Softmax)
    }

    pub fn num_inputs(&self) -> Option<usize> {
        match self.kind {
            OpKind::Add => None,
            OpKind::Scale => Some(2),
            _ => Some(1),
        }
    }

    /// Output shape for the given input shapes, without computing anything.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let op = self.kind.name();
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape(op, "no inputs"))?;
        let spatial = |f: &dyn Fn(usize) -> Option<usize>| -> Result<Vec<usize>> {
            if first.len() != 4 {
                return Err(Error::shape(op, format!("expected NCHW, got {first:?}")));
            }
            let (h, w) = match (f(first[2]), f(first[3])) {
                (Some(h), Some(w)) => (h, w),
                _ => return Err(Error::shape(op, format!("spatial dims {first:?} too small"))),
            };
            let c = if self.out_channels == 0 { first[1] } else { self.out_channels };
            Ok(vec![first[0], c, h, w])
        };
        let check_channels = || -> Result<()> {
            if first.len() == 4 && self.in_channels != 0 && first[1] != self.in_channels {
                return Err(Error::shape(
                    op,
                    format!("channel dim 1 is {} but layer expects {}", first[1], self.in_channels),
                ));
            }
            Ok(())
        };
        match self.kind {
            OpKind::Conv2d | OpKind::SepConv2d | OpKind::DilConv2d | OpKind::MaxPool2d | OpKind::AvgPool2d => {
                check_channels()?;
                spatial(&|l| conv_out_len(l, self.kernel, self.stride, self.padding, self.dilation))
            }
            OpKind::Deconv2d => {
                check_channels()?;
                spatial(&|l| deconv_out_len(l, self.kernel, self.stride, self.padding))
            }
            OpKind::NnUpsample2d => spatial(&|l| Some(l * self.scale_factor)),
            OpKind::BatchNorm2d => {
                check_channels()?;
                if first.len() != 4 {
                    return Err(Error::shape(op, format!("expected NCHW, got {first:?}")));
                }
                Ok(first.to_vec())
            }
            OpKind::Relu | OpKind::Tanh | OpKind::Softmax => Ok(first.to_vec()),
            OpKind::Linear => match first {
                &[b, f] if f == self.in_channels => Ok(vec![b, self.out_channels]),
                _ => Err(Error::shape(
                    op,
                    format!("input {first:?} vs in_features {}", self.in_channels),
                )),
            },
            OpKind::Reshape => {
                let per: usize = first[1..].iter().product();
                if per != self.target_shape.iter().product::<usize>() {
                    return Err(Error::shape(
                        op,
                        format!("cannot view {first:?} as per-sample {:?}", self.target_shape),
                    ));
                }
                let mut s = vec![first[0]];
                s.extend_from_slice(&self.target_shape);
                Ok(s)
            }
            OpKind::Add => {
                for s in &inputs[1..] {
                    if *s != first {
                        return Err(Error::shape(op, format!("{first:?} vs {s:?}")));
                    }
                }
                Ok(first.to_vec())
            }
            OpKind::Scale => Ok(first.to_vec()),
        }
    }

    /// Runs the layer on `inputs`, recording on `tape`. Train-mode batch norm
    /// updates the running statistics in `store`.
    pub fn forward(&self, store: &mut ParamStore, inputs: &[Var], tape: &mut Tape, mode: Mode) -> Result<Var> {
        let op = self.kind.name();
        if let Some(n) = self.num_inputs() {
            if inputs.len() != n {
                return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
            }
        }
        for &v in inputs {
            if !tape.value(v).all_finite() {
                return Err(Error::NonFinite { op });
            }
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| tape.shape(v)).collect();
        self.output_shape(&shapes)?;
        let x = inputs[0];
        let p = |tape: &mut Tape, store: &ParamStore, i: usize| tape.param(store, self.weights[i]);
        match self.kind {
            OpKind::Conv2d => {
                let w = p(tape, store, 0)?;
                let b = if self.weights.len() > 1 { Some(p(tape, store, 1)?) } else { None };
                tape.conv2d(x, w, b, ConvCfg::new(self.stride, self.padding))
            }
            OpKind::SepConv2d | OpKind::DilConv2d => {
                let dw = p(tape, store, 0)?;
                let pw = p(tape, store, 1)?;
                let cfg = ConvCfg {
                    stride: self.stride,
                    padding: self.padding,
                    dilation: self.dilation,
                    groups: self.in_channels,
                };
                let h = tape.conv2d(x, dw, None, cfg)?;
                tape.conv2d(h, pw, None, ConvCfg::new(1, 0))
            }
            OpKind::Deconv2d => {
                let w = p(tape, store, 0)?;
                let b = if self.weights.len() > 1 { Some(p(tape, store, 1)?) } else { None };
                tape.deconv2d(x, w, b, self.stride, self.padding)
            }
            OpKind::NnUpsample2d => tape.upsample_nearest(x, self.scale_factor),
            OpKind::MaxPool2d => tape.max_pool2d(x, self.pool_cfg()),
            OpKind::AvgPool2d => tape.avg_pool2d(x, self.pool_cfg()),
            OpKind::BatchNorm2d => {
                let gain = p(tape, store, 0)?;
                let shift = p(tape, store, 1)?;
                let (rm, rv) = self
                    .running
                    .ok_or_else(|| Error::shape(op, "missing running statistics"))?;
                match mode {
                    Mode::Train => {
                        let (y, mean, var) = tape.batch_norm_train(x, gain, shift)?;
                        let m = tape.shape(x)[0] * tape.shape(x)[2] * tape.shape(x)[3];
                        let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                        for (r, b) in store.get_mut(rm).data_mut().iter_mut().zip(&mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                        }
                        for (r, b) in store.get_mut(rv).data_mut().iter_mut().zip(&var) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
                        }
                        Ok(y)
                    }
                    Mode::Eval => {
                        let mean = store.get(rm).data().to_vec();
                        let var = store.get(rv).data().to_vec();
                        tape.batch_norm_eval(x, gain, shift, &mean, &var)
                    }
                }
            }
            OpKind::Relu => Ok(tape.relu(x)),
            OpKind::Tanh => Ok(tape.tanh(x)),
            OpKind::Linear => {
                let w = p(tape, store, 0)?;
                let b = p(tape, store, 1)?;
                tape.linear(x, w, Some(b))
            }
            OpKind::Reshape => {
                let mut s = vec![tape.shape(x)[0]];
                s.extend_from_slice(&self.target_shape);
                tape.reshape(x, &s)
            }
            OpKind::Add => tape.add(inputs),
            OpKind::Scale => tape.scale(x, inputs[1], self.index),
            OpKind::Softmax => tape.softmax(x),
        }
    }

    fn pool_cfg(&self) -> PoolCfg {
        PoolCfg {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}
