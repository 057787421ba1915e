//! Finite-difference checks over every primitive, mixed edges and the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::glo::{lap_pyramid, recon_loss_var};
use crate::search_space::catalog::{normal_op, upsample_op, zero_op, CandidateOp};
use crate::search_space::{mixed_forward, EdgeClass, MixedEdge};
use crate::tensor::gradcheck::{check_function, default_shape, grad_check, projected_sum, GradReport};
use crate::tensor::{Mode, OpKind, ParamGroup, ParamStore, Tensor};

pub const SUITE_TOL: f64 = 1e-4;
pub const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub label: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    pub error: Option<String>,
}

fn mixed_edge(
    class: EdgeClass,
    ops: &[CandidateOp],
    cin: usize,
    cout: usize,
    factor: usize,
    seed: u64,
) -> crate::error::Result<(MixedEdge, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let inst = ops
        .iter()
        .map(|o| o.instantiate(&mut store, &o.name, cin, cout, &mut rng))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let alpha = store.push("alpha", ParamGroup::Arch, Tensor::randn(&[ops.len()], 1.0, &mut rng));
    let edge = MixedEdge {
        id: 0,
        source: 0,
        target: 1,
        class,
        ops: inst,
        alpha: Some(alpha),
        in_channels: cin,
        out_channels: cout,
        factor,
    };
    Ok((edge, store))
}

/// Gradients of a softmax-mixed normal edge with respect to input, weights and logits.
pub fn mixed_normal_check(seed: u64, tol: f64) -> GradReport {
    let label = "mixed_normal";
    let ops: Vec<CandidateOp> = ["conv1x1", "skip", "avg_pool3x3", "sep_conv3x3"]
        .iter()
        .map(|n| normal_op(n).unwrap())
        .collect();
    let (edge, store) = match mixed_edge(EdgeClass::DirectNormal, &ops, 2, 2, 1, seed) {
        Ok(v) => v,
        Err(e) => return failed(label, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    check_function(label, &store, &[x], tol, |s, tape, v| {
        let y = mixed_forward(&edge, s, v[0], tape, Mode::Train)?;
        projected_sum(tape, y, seed)
    })
}

/// Same for a residual up-sampling edge that includes the zero candidate.
pub fn mixed_residual_check(seed: u64, tol: f64) -> GradReport {
    let label = "mixed_residual";
    let mut ops: Vec<CandidateOp> = ["deconv4", "nn_conv1"]
        .iter()
        .map(|n| upsample_op(n, 2).unwrap())
        .collect();
    let mut z = zero_op();
    z.factor = 2;
    ops.push(z);
    let (edge, store) = match mixed_edge(EdgeClass::Residual, &ops, 2, 1, 2, seed) {
        Ok(v) => v,
        Err(e) => return failed(label, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    check_function(label, &store, &[x], tol, |s, tape, v| {
        let y = mixed_forward(&edge, s, v[0], tape, Mode::Train)?;
        projected_sum(tape, y, seed)
    })
}

/// Gradient of the reconstruction loss with respect to both images.
pub fn recon_loss_check(seed: u64, tol: f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
    // keep every band difference away from the kink of |.|
    let (x, y) = loop {
        let x = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng);
        let y = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng);
        let (Ok(bx), Ok(by)) = (lap_pyramid(&x, 2), lap_pyramid(&y, 2)) else {
            return failed("recon_loss", "pyramid failed".into());
        };
        let near = bx
            .iter()
            .zip(&by)
            .any(|(a, b)| a.data().iter().zip(b.data()).any(|(u, v)| (u - v).abs() < 1e-3));
        if !near {
            break (x, y);
        }
    };
    check_function("recon_loss", &ParamStore::new(), &[x, y], tol, |_, tape, v| {
        recon_loss_var(tape, v[0], v[1], 0.7, 2)
    })
}

fn failed(label: &str, err: String) -> GradReport {
    GradReport {
        label: label.to_string(),
        groups: Vec::new(),
        max_rel_err: f64::INFINITY,
        pass: false,
        error: Some(err),
    }
}

fn summarize(label: &str, reports: Vec<GradReport>) -> SuiteRow {
    SuiteRow {
        label: label.to_string(),
        seeds: reports.len(),
        max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        pass: reports.iter().all(|r| r.pass),
        error: reports.iter().find_map(|r| r.error.clone()),
    }
}

/// Every op kind plus mixed edges and the loss, each over [`SUITE_SEEDS`].
pub fn run_suite(tol: f64) -> Vec<SuiteRow> {
    let mut rows: Vec<SuiteRow> = OpKind::ALL
        .iter()
        .map(|&k| {
            let shape = default_shape(k);
            summarize(
                k.name(),
                SUITE_SEEDS.iter().map(|&s| grad_check(k, &shape, tol, s)).collect(),
            )
        })
        .collect();
    rows.push(summarize(
        "mixed_normal",
        SUITE_SEEDS.iter().map(|&s| mixed_normal_check(s, tol)).collect(),
    ));
    rows.push(summarize(
        "mixed_residual",
        SUITE_SEEDS.iter().map(|&s| mixed_residual_check(s, tol)).collect(),
    ));
    rows.push(summarize(
        "recon_loss",
        SUITE_SEEDS.iter().map(|&s| recon_loss_check(s, tol)).collect(),
    ));
    rows
}

/// Fixed-width table of suite rows.
pub fn format_table(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<16} {:>5} {:>12}  {}\n", "op", "seeds", "max_rel_err", "result");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>5} {:>12.3e}  {}{}\n",
            r.label,
            r.seeds,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" },
            r.error.as_ref().map(|e| format!(" ({e})")).unwrap_or_default()
        ));
    }
    s
}
