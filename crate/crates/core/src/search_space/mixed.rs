use crate::error::{Error, Result};
use crate::search_space::catalog::{CandidateOp, OpInstance};
use crate::tensor::{Mode, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeClass {
    DirectNormal,
    DirectUpsample,
    Residual,
}

impl EdgeClass {
    pub fn is_direct(self) -> bool {
        !matches!(self, EdgeClass::Residual)
    }
}

/// Softmax-weighted mixture of candidate operations between two nodes.
///
/// An edge with a single candidate and no logits is a plain operation; that
/// is how instantiated genotypes reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedEdge {
    pub id: usize,
    pub source: usize,
    pub target: usize,
    pub class: EdgeClass,
    pub ops: Vec<OpInstance>,
    /// Logits, one per candidate, stored in the arch group.
    pub alpha: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
}

impl MixedEdge {
    pub fn candidates(&self) -> impl Iterator<Item = &CandidateOp> {
        self.ops.iter().map(|o| &o.op)
    }

    pub fn candidate_names(&self) -> Vec<String> {
        self.candidates().map(|c| c.name.clone()).collect()
    }

    fn zeros_like_output(&self, x_shape: &[usize]) -> Tensor {
        Tensor::zeros(&[
            x_shape[0],
            self.out_channels,
            x_shape[2] * self.factor,
            x_shape[3] * self.factor,
        ])
    }
}

/// `sum_o softmax(alpha)_o * o(x)` over the edge's candidates.
pub fn mixed_forward(
    edge: &MixedEdge,
    store: &mut ParamStore,
    x: Var,
    tape: &mut Tape,
    mode: Mode,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != edge.in_channels {
        return Err(Error::shape(
            "mixed_forward",
            format!(
                "edge {} expects {} input channels, got shape {xs:?}",
                edge.id, edge.in_channels
            ),
        ));
    }
    let Some(alpha) = edge.alpha else {
        if edge.ops.len() != 1 {
            return Err(Error::Topology(format!(
                "edge {} has {} candidates but no logits",
                edge.id,
                edge.ops.len()
            )));
        }
        return match edge.ops[0].forward(store, x, tape, mode)? {
            Some(y) => Ok(y),
            None => tape.constant(edge.zeros_like_output(&xs)),
        };
    };
    let n = store.get(alpha).numel();
    if n != edge.ops.len() {
        return Err(Error::Topology(format!(
            "edge {}: {} logits for {} candidates",
            edge.id,
            n,
            edge.ops.len()
        )));
    }
    let a = tape.param(store, alpha)?;
    let weights = tape.softmax(a)?;
    let mut terms = Vec::with_capacity(edge.ops.len());
    for (k, op) in edge.ops.iter().enumerate() {
        if let Some(y) = op.forward(store, x, tape, mode)? {
            terms.push(tape.scale(y, weights, k)?);
        }
    }
    if terms.is_empty() {
        return tape.constant(edge.zeros_like_output(&xs));
    }
    tape.add(&terms)
}

/// Softmax of an edge's logits as plain numbers.
pub fn edge_weights(store: &ParamStore, edge: &MixedEdge) -> Vec<f64> {
    match edge.alpha {
        Some(a) => softmax(store.get(a).data()),
        None => vec![1.0],
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::catalog::{const_scale_op, normal_op, OpClass};
    use crate::tensor::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge(store: &mut ParamStore, ops: Vec<CandidateOp>, logits: Vec<f64>, channels: usize) -> MixedEdge {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = ops.len();
        let inst = ops
            .iter()
            .enumerate()
            .map(|(i, o)| o.instantiate(store, &format!("e.{i}"), channels, channels, &mut rng).unwrap())
            .collect();
        let alpha = store.push("e.alpha", ParamGroup::Arch, Tensor::from_vec(&[n], logits));
        MixedEdge {
            id: 0,
            source: 0,
            target: 1,
            class: EdgeClass::DirectNormal,
            ops: inst,
            alpha: Some(alpha),
            in_channels: channels,
            out_channels: channels,
            factor: 1,
        }
    }

    fn run(e: &MixedEdge, store: &mut ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false).unwrap();
        let y = mixed_forward(e, store, v, &mut tape, Mode::Train).unwrap();
        tape.value(y).clone()
    }

    fn identity_and_double() -> Vec<CandidateOp> {
        vec![normal_op("skip").unwrap(), const_scale_op(2.0, OpClass::Normal)]
    }

    #[test]
    fn uniform_logits_average() {
        let mut store = ParamStore::new();
        let e = edge(&mut store, identity_and_double(), vec![0.0, 0.0], 1);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, 4.0]);
        let y = run(&e, &mut store, &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 1.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn ln3_logit_gives_three_quarters() {
        let mut store = ParamStore::new();
        let e = edge(&mut store, identity_and_double(), vec![3f64.ln(), 0.0], 1);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, -1.0]);
        let y = run(&e, &mut store, &x);
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        assert!((y.data()[1] + 1.25).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_selects_candidate() {
        let mut store = ParamStore::new();
        let e = edge(&mut store, identity_and_double(), vec![40.0, 0.0], 1);
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.3, -0.7, 1.9]);
        let y = run(&e, &mut store, &x);
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let e = edge(&mut store, identity_and_double(), vec![0.0, 0.0], 2);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]), false).unwrap();
        assert!(mixed_forward(&e, &mut store, v, &mut tape, Mode::Train).is_err());
    }
}
