//! SGD with momentum, Adam, and cosine annealing.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Per-parameter buffers of one optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    /// Velocity (SGD) or first moment (Adam).
    pub first: Tensor,
    /// Second moment (Adam only).
    pub second: Option<Tensor>,
    pub steps: u64,
}

/// Optimizer configuration plus buffers keyed by caller-chosen slot numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub slots: BTreeMap<u64, Slot>,
    /// Total `step` calls; never decreases.
    pub step_count: u64,
}

fn check_shapes(op: &'static str, param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            op,
            format!("parameter {:?} vs gradient {:?}", param.shape(), grad.shape()),
        ));
    }
    Ok(())
}

/// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes("sgd_step", param, grad)?;
    check_shapes("sgd_step", param, velocity)?;
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam with weight decay folded into the gradient.
/// `step` is the 1-based count after this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
    weight_decay: f64,
) -> Result<()> {
    check_shapes("adam_step", param, grad)?;
    check_shapes("adam_step", param, m)?;
    check_shapes("adam_step", param, v)?;
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for (((p, g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let g = g + weight_decay * *p;
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

impl OptimizerState {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
            weight_decay,
            slots: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam { beta1, beta2, eps },
            lr,
            weight_decay,
            slots: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Updates `param` in place using the buffers of `slot` at learning rate `lr`.
    pub fn update(&mut self, slot: u64, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        check_shapes("optimizer", param, grad)?;
        let is_adam = matches!(self.kind, OptimizerKind::Adam { .. });
        let s = self.slots.entry(slot).or_insert_with(|| Slot {
            first: Tensor::zeros(param.shape()),
            second: is_adam.then(|| Tensor::zeros(param.shape())),
            steps: 0,
        });
        if s.first.shape() != param.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("slot {slot} buffer {:?} vs parameter {:?}", s.first.shape(), param.shape()),
            ));
        }
        s.steps += 1;
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                sgd_step(param, grad, &mut s.first, lr, momentum, self.weight_decay)
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let v = s.second.as_mut().expect("adam slot has second moment");
                adam_step(
                    param,
                    grad,
                    &mut s.first,
                    v,
                    s.steps,
                    lr,
                    (beta1, beta2, eps),
                    self.weight_decay,
                )
            }
        }
    }
}

/// `lr0 * (1 + cos(pi t / T)) / 2`, clamped to `[0, T]`.
pub fn cosine_lr(lr0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    let t = t.clamp(0.0, total);
    lr0 * 0.5 * (1.0 + (PI * t / total).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn sgd_single_step() {
        let (mut p, mut v) = (s(1.0), s(0.0));
        sgd_step(&mut p, &s(0.5), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v.item() - 0.5).abs() < 1e-12);
        assert!((p.item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let (mut p, mut v) = (s(0.7), s(0.0));
        sgd_step(&mut p, &s(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.item(), 0.7);
    }

    #[test]
    fn sgd_two_steps_accumulate_momentum() {
        let mut opt = OptimizerState::sgd(0.1, 0.9, 0.0);
        let mut p = s(0.0);
        opt.update(0, &mut p, &s(1.0), 0.1).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-12);
        opt.update(0, &mut p, &s(1.0), 0.1).unwrap();
        assert!((p.item() + 0.29).abs() < 1e-12);
        assert_eq!(opt.step_count, 2);
    }

    #[test]
    fn adam_first_step() {
        let mut opt = OptimizerState::adam(1e-3, 0.9, 0.999, 1e-8, 0.0);
        let mut p = s(0.0);
        opt.update(0, &mut p, &s(1.0), 1e-3).unwrap();
        // lr * 1 / (1 + eps)
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.item() - expect).abs() < 1e-12, "{}", p.item());
        assert!((p.item() + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut opt = OptimizerState::adam(1e-3, 0.5, 0.999, 1e-8, 0.0);
        let mut p = s(0.4);
        for _ in 0..5 {
            opt.update(0, &mut p, &s(0.0), 1e-3).unwrap();
        }
        assert_eq!(p.item(), 0.4);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[3]), &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.3, 0.0, 10.0), 0.3);
        assert!(cosine_lr(0.3, 10.0, 10.0).abs() < 1e-12);
        assert!((cosine_lr(0.3, 5.0, 10.0) - 0.15).abs() < 1e-12);
    }
}
