//! Central-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Mode, OpKind, OpParams, ParamGroup, ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when the function under test failed to evaluate.
    pub error: Option<String>,
}

impl GradReport {
    fn failed(label: &str, err: String) -> Self {
        GradReport {
            label: label.to_string(),
            groups: Vec::new(),
            max_rel_err: f64::INFINITY,
            pass: false,
            error: Some(err),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic against central-difference gradients for a scalar
/// function of `inputs` and of every trainable tensor in `store`.
pub fn check_function<F>(label: &str, store: &ParamStore, inputs: &[Tensor], tol: f64, f: F) -> GradReport
where
    F: Fn(&mut ParamStore, &mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut s = store.clone();
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut s, &mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let analytic = (|| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut s = store.clone();
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut s, &mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let gi = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let gp = store
            .ids()
            .filter(|&id| store.group(id) != ParamGroup::Buffer)
            .map(|id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect();
        Ok((gi, gp))
    })();
    let (grad_inputs, grad_params) = match analytic {
        Ok(g) => g,
        Err(e) => return GradReport::failed(label, e.to_string()),
    };

    let mut groups = Vec::new();
    for (i, g) in grad_inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..inputs[i].numel() {
            let probe = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[i].data_mut()[k] += delta;
                eval(store, &perturbed)
            };
            match (probe(FD_STEP), probe(-FD_STEP)) {
                (Ok(p), Ok(m)) => {
                    let num = (p - m) / (2.0 * FD_STEP);
                    worst = worst.max(relative_error(g.data()[k], num));
                }
                (Err(e), _) | (_, Err(e)) => return GradReport::failed(label, e.to_string()),
            }
        }
        groups.push(GroupReport {
            name: format!("input{i}"),
            max_rel_err: worst,
            pass: worst <= tol,
        });
    }

    let trainable: Vec<_> = store
        .ids()
        .filter(|&id| store.group(id) != ParamGroup::Buffer)
        .collect();
    for (id, g) in trainable.into_iter().zip(&grad_params) {
        let mut worst: f64 = 0.0;
        for k in 0..store.get(id).numel() {
            let probe = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[k] += delta;
                eval(&s, inputs)
            };
            match (probe(FD_STEP), probe(-FD_STEP)) {
                (Ok(p), Ok(m)) => {
                    let num = (p - m) / (2.0 * FD_STEP);
                    worst = worst.max(relative_error(g.data()[k], num));
                }
                (Err(e), _) | (_, Err(e)) => return GradReport::failed(label, e.to_string()),
            }
        }
        groups.push(GroupReport {
            name: store.name(id).to_string(),
            max_rel_err: worst,
            pass: worst <= tol,
        });
    }

    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    GradReport {
        label: label.to_string(),
        pass: groups.iter().all(|g| g.pass),
        groups,
        max_rel_err,
        error: None,
    }
}

/// Loss `sum(y * r)` with a fixed random projection `r`, so every output
/// element contributes a distinct weight.
pub fn projected_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let r = tape.constant(r)?;
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

/// Random input for `kind` drawn away from its non-differentiable points.
fn input_for(kind: OpKind, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    match kind {
        // relu: keep clear of the kink at zero
        OpKind::Relu => Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    let m: f64 = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) { m } else { -m }
                })
                .collect(),
        ),
        // max pool: distinct values on a coarse grid so no window has near-ties
        OpKind::MaxPool2d => {
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            Tensor::from_vec(shape, vals)
        }
        _ => Tensor::randn(shape, 1.0, rng),
    }
}

/// Builds a layer of `kind` sized for `input_shape` and checks its gradients.
pub fn grad_check(kind: OpKind, input_shape: &[usize], tol: f64, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = input_shape.get(1).copied().unwrap_or(1);
    let label = kind.name();
    let op = match kind {
        OpKind::Conv2d => OpParams::conv2d(&mut store, label, c, c + 1, 3, 1, 1, true, &mut rng),
        OpKind::SepConv2d => OpParams::sep_conv2d(&mut store, label, c, c, 3, &mut rng),
        OpKind::DilConv2d => OpParams::dil_conv2d(&mut store, label, c, c, 3, &mut rng),
        OpKind::Deconv2d => OpParams::deconv2d(&mut store, label, c, c + 1, 4, 2, 1, true, &mut rng),
        OpKind::NnUpsample2d => OpParams::nn_upsample2d(2),
        OpKind::MaxPool2d => OpParams::max_pool2d(3, 1, 1),
        OpKind::AvgPool2d => OpParams::avg_pool2d(3, 1, 1),
        OpKind::BatchNorm2d => {
            let op = OpParams::batch_norm2d(&mut store, label, c);
            // non-trivial affine terms
            let g = Tensor::rand_uniform(&[c], 0.5, 1.5, &mut rng);
            let b = Tensor::randn(&[c], 0.5, &mut rng);
            store.set(op.weights[0], g);
            store.set(op.weights[1], b);
            op
        }
        OpKind::Relu => OpParams::relu(),
        OpKind::Tanh => OpParams::tanh(),
        OpKind::Linear => {
            let fin = input_shape.last().copied().unwrap_or(1);
            let op = OpParams::linear(&mut store, label, fin, 3, &mut rng);
            store.set(op.weights[1], Tensor::randn(&[3], 0.5, &mut rng));
            op
        }
        OpKind::Reshape => {
            let per: usize = input_shape[1..].iter().product();
            OpParams::reshape(&[per])
        }
        OpKind::Add => OpParams::add(),
        OpKind::Scale => OpParams::scale(1),
        OpKind::Softmax => OpParams::softmax(),
    };
    let mut inputs = vec![input_for(kind, input_shape, &mut rng)];
    match kind {
        OpKind::Add => inputs.push(Tensor::randn(input_shape, 1.0, &mut rng)),
        OpKind::Scale => inputs.push(Tensor::randn(&[3], 1.0, &mut rng)),
        _ => {}
    }
    check_function(label, &store, &inputs, tol, |s, tape, vars| {
        let y = op.forward(s, vars, tape, Mode::Train)?;
        projected_sum(tape, y, seed)
    })
}

/// Input shape used for `kind` by the standard suite.
pub fn default_shape(kind: OpKind) -> Vec<usize> {
    match kind {
        OpKind::Linear => vec![3, 5],
        OpKind::Softmax => vec![8],
        OpKind::Scale | OpKind::Add | OpKind::Relu | OpKind::Tanh => vec![2, 3, 4, 4],
        OpKind::BatchNorm2d => vec![4, 2, 3, 3],
        OpKind::Reshape => vec![2, 2, 3, 3],
        _ => vec![2, 2, 5, 5],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_finite_differences() {
        let r = grad_check(OpKind::Conv2d, &[1, 2, 5, 5], 1e-5, 7);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn relu_exact_away_from_zero() {
        let r = grad_check(OpKind::Relu, &[2, 3, 4, 4], 1e-6, 1);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn batch_norm_train_mode() {
        let r = grad_check(OpKind::BatchNorm2d, &[4, 2, 3, 3], 1e-4, 2);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn softmax_eight_logits() {
        let r = grad_check(OpKind::Softmax, &[8], 1e-6, 3);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // d/dx of x*x evaluated as if it were x: the checker must flag it
        let store = ParamStore::new();
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]);
        let r = check_function("bogus", &store, &[x], 1e-4, |_, tape, v| {
            let c = tape.constant(tape.value(v[0]).clone())?;
            let y = tape.mul(v[0], c)?;
            // y = x * stop_grad(x): analytic gradient is x, true gradient is 2x
            Ok(tape.sum(y))
        });
        assert!(!r.pass);
    }
}
