//! Candidate operations that may sit on a mixed edge.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mode, OpParams, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpClass {
    Normal,
    Upsample,
    Zero,
}

/// How a candidate is assembled from primitive layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpSpec {
    /// bn + relu + conv k x k
    Conv { kernel: usize },
    /// bn + relu + depthwise k x k + pointwise
    SepConv { kernel: usize },
    /// bn + relu + dilated depthwise k x k + pointwise
    DilConv { kernel: usize },
    MaxPool3,
    AvgPool3,
    Skip,
    /// bn + relu + transposed conv with kernel `2f + extra`, stride `f`
    Deconv { extra: usize },
    /// bn + relu + nearest up-sampling + conv k x k
    NnConv { kernel: usize },
    /// Output is identically zero.
    Zero,
    /// Fixed multiplication by a constant; a parameter-free diagnostic op.
    ConstScale(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateOp {
    pub name: String,
    pub class: OpClass,
    pub spec: OpSpec,
    /// Spatial up-sampling factor (1 for normal ops).
    pub factor: usize,
}

impl fmt::Display for CandidateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

pub const NORMAL_OPS: [&str; 9] = [
    "conv1x1",
    "conv3x3",
    "max_pool3x3",
    "avg_pool3x3",
    "skip",
    "sep_conv3x3",
    "sep_conv5x5",
    "dil_conv3x3",
    "dil_conv5x5",
];

pub const UPSAMPLE_OPS: [&str; 4] = ["deconv4", "deconv6", "nn_conv1", "nn_conv3"];

pub const ZERO_OP: &str = "zero";

/// Size-preserving candidate by name.
pub fn normal_op(name: &str) -> Result<CandidateOp> {
    let spec = match name {
        "conv1x1" => OpSpec::Conv { kernel: 1 },
        "conv3x3" => OpSpec::Conv { kernel: 3 },
        "max_pool3x3" => OpSpec::MaxPool3,
        "avg_pool3x3" => OpSpec::AvgPool3,
        "skip" => OpSpec::Skip,
        "sep_conv3x3" => OpSpec::SepConv { kernel: 3 },
        "sep_conv5x5" => OpSpec::SepConv { kernel: 5 },
        "dil_conv3x3" => OpSpec::DilConv { kernel: 3 },
        "dil_conv5x5" => OpSpec::DilConv { kernel: 5 },
        _ => return Err(Error::UnknownOp(name.to_string())),
    };
    Ok(CandidateOp {
        name: name.to_string(),
        class: OpClass::Normal,
        spec,
        factor: 1,
    })
}

/// Up-sampling candidate by name, adapted to `factor`.
pub fn upsample_op(name: &str, factor: usize) -> Result<CandidateOp> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::UnsupportedFactor(factor));
    }
    let spec = match name {
        "deconv4" => OpSpec::Deconv { extra: 0 },
        "deconv6" => OpSpec::Deconv { extra: 2 },
        "nn_conv1" => OpSpec::NnConv { kernel: 1 },
        "nn_conv3" => OpSpec::NnConv { kernel: 3 },
        _ => return Err(Error::UnknownOp(name.to_string())),
    };
    Ok(CandidateOp {
        name: name.to_string(),
        class: OpClass::Upsample,
        spec,
        factor,
    })
}

pub fn zero_op() -> CandidateOp {
    CandidateOp {
        name: ZERO_OP.to_string(),
        class: OpClass::Zero,
        spec: OpSpec::Zero,
        factor: 1,
    }
}

/// A parameter-free `x -> c x` candidate of the given class.
pub fn const_scale_op(c: f64, class: OpClass) -> CandidateOp {
    CandidateOp {
        name: format!("scale{c}"),
        class,
        spec: OpSpec::ConstScale(c),
        factor: 1,
    }
}

pub fn normal_catalog() -> Vec<CandidateOp> {
    NORMAL_OPS.iter().map(|n| normal_op(n).unwrap()).collect()
}

pub fn upsample_catalog(factor: usize) -> Result<Vec<CandidateOp>> {
    UPSAMPLE_OPS.iter().map(|n| upsample_op(n, factor)).collect()
}

impl CandidateOp {
    /// Builds the layers of this candidate mapping `cin` to `cout` channels.
    pub fn instantiate<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<OpInstance> {
        let same_channels = |what: &str| -> Result<()> {
            if cin != cout {
                return Err(Error::Topology(format!(
                    "{what} `{}` cannot map {cin} to {cout} channels",
                    self.name
                )));
            }
            Ok(())
        };
        let bn_relu = |store: &mut ParamStore| {
            vec![
                OpParams::batch_norm2d(store, &format!("{prefix}.bn"), cin),
                OpParams::relu(),
            ]
        };
        let f = self.factor;
        let layers = match self.spec {
            OpSpec::Conv { kernel } => {
                let mut l = bn_relu(store);
                l.push(OpParams::conv2d(
                    store,
                    &format!("{prefix}.conv"),
                    cin,
                    cout,
                    kernel,
                    1,
                    kernel / 2,
                    false,
                    rng,
                ));
                l
            }
            OpSpec::SepConv { kernel } => {
                let mut l = bn_relu(store);
                l.push(OpParams::sep_conv2d(store, &format!("{prefix}.sep"), cin, cout, kernel, rng));
                l
            }
            OpSpec::DilConv { kernel } => {
                let mut l = bn_relu(store);
                l.push(OpParams::dil_conv2d(store, &format!("{prefix}.dil"), cin, cout, kernel, rng));
                l
            }
            OpSpec::MaxPool3 => {
                same_channels("pooling")?;
                vec![OpParams::max_pool2d(3, 1, 1)]
            }
            OpSpec::AvgPool3 => {
                same_channels("pooling")?;
                vec![OpParams::avg_pool2d(3, 1, 1)]
            }
            OpSpec::Skip | OpSpec::ConstScale(_) => {
                same_channels("parameter-free op")?;
                Vec::new()
            }
            OpSpec::Deconv { extra } => {
                let kernel = 2 * f + extra;
                let padding = f / 2 + extra / 2;
                let mut l = bn_relu(store);
                l.push(OpParams::deconv2d(
                    store,
                    &format!("{prefix}.deconv"),
                    cin,
                    cout,
                    kernel,
                    f,
                    padding,
                    false,
                    rng,
                ));
                l
            }
            OpSpec::NnConv { kernel } => {
                let mut l = bn_relu(store);
                l.push(OpParams::nn_upsample2d(f));
                l.push(OpParams::conv2d(
                    store,
                    &format!("{prefix}.conv"),
                    cin,
                    cout,
                    kernel,
                    1,
                    kernel / 2,
                    false,
                    rng,
                ));
                l
            }
            OpSpec::Zero => Vec::new(),
        };
        Ok(OpInstance {
            op: self.clone(),
            layers,
            out_channels: cout,
        })
    }
}

/// A candidate with its layers bound to tensors in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OpInstance {
    pub op: CandidateOp,
    pub layers: Vec<OpParams>,
    pub out_channels: usize,
}

impl OpInstance {
    /// Applies the candidate. `None` means the output is identically zero.
    pub fn forward(&self, store: &mut ParamStore, x: Var, tape: &mut Tape, mode: Mode) -> Result<Option<Var>> {
        match self.op.spec {
            OpSpec::Zero => return Ok(None),
            OpSpec::ConstScale(c) => return Ok(Some(tape.mul_const(x, c))),
            _ => {}
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(store, &[h], tape, mode)?;
        }
        Ok(Some(h))
    }

    /// Applies the candidate, materializing zero outputs with the expected shape.
    pub fn forward_dense(
        &self,
        store: &mut ParamStore,
        x: Var,
        tape: &mut Tape,
        mode: Mode,
    ) -> Result<Var> {
        match self.forward(store, x, tape, mode)? {
            Some(v) => Ok(v),
            None => {
                let s = tape.shape(x).to_vec();
                let f = self.op.factor;
                tape.constant(Tensor::zeros(&[s[0], self.out_channels, s[2] * f, s[3] * f]))
            }
        }
    }
}
