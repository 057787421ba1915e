use degas::pruning::prune_network;
use degas::search_space::catalog::{const_scale_op, normal_catalog, upsample_catalog, OpClass};
use degas::search_space::{
    build_supergraph, instantiate_genotype, mixed_forward, EdgeClass, GraphSpec, MixedEdge,
};
use degas::tensor::{Mode, ParamGroup, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn latent(b: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[b, d], 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn three_stage_census() {
    let mut net = build_supergraph(&GraphSpec::new(3, 1, 4, 8, 16), 0).unwrap();
    assert_eq!(net.topology.census(), (3, 3, 5));
    let names = |i: usize| net.topology.nodes[i].id.clone();
    let mut res: Vec<(String, String)> = net
        .edges
        .iter()
        .filter(|e| e.class == EdgeClass::Residual)
        .map(|e| (names(e.source), names(e.target)))
        .collect();
    res.sort();
    let want: Vec<(String, String)> = [("stem", "u2"), ("stem", "u3"), ("u1", "u2"), ("u1", "u3"), ("u2", "u3")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    assert_eq!(res, want);
    let y = net.generate(&latent(2, 8, 1), Mode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 3, 32, 32]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn two_stage_census() {
    let net = build_supergraph(&GraphSpec::new(2, 1, 4, 8, 8), 0).unwrap();
    assert_eq!(net.topology.census(), (2, 2, 2));
    assert_eq!(net.topology.output_size(), 16);
}

#[test]
fn chain_length_with_two_normals() {
    let t = GraphSpec::new(3, 2, 4, 8, 16).topology().unwrap();
    assert_eq!(t.normal_node_count(), 6);
    // stem + 3 up + 6 normal + head
    assert_eq!(t.nodes.len() + 1, 11);
    assert_eq!(t.edges.iter().filter(|e| e.class.is_direct()).count(), 9);
}

#[test]
fn zero_only_on_residuals_and_alpha_lengths() {
    let net = build_supergraph(&GraphSpec::new(3, 2, 4, 8, 16), 0).unwrap();
    for e in &net.edges {
        let has_zero = e.candidates().any(|c| c.class == OpClass::Zero);
        assert_eq!(has_zero, e.class == EdgeClass::Residual);
        assert_eq!(net.store.get(e.alpha.unwrap()).numel(), e.ops.len());
        assert!(net.store.get(e.alpha.unwrap()).data().iter().all(|&a| a == 0.0));
    }
}

#[test]
fn catalogs() {
    let n = normal_catalog();
    assert_eq!(n.len(), 9);
    assert!(n.iter().all(|c| c.class == OpClass::Normal));
    assert_eq!(upsample_catalog(2).unwrap().len(), 4);
    assert!(upsample_catalog(3).is_err());
}

fn apply(ops: &[degas::search_space::catalog::CandidateOp], cin: usize, cout: usize, x: &Tensor) -> Vec<Tensor> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    ops.iter()
        .map(|o| {
            let inst = o.instantiate(&mut store, &o.name, cin, cout, &mut rng).unwrap();
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), false).unwrap();
            match inst.forward(&mut store, v, &mut t, Mode::Train).unwrap() {
                Some(y) => t.value(y).clone(),
                None => Tensor::zeros(&[x.shape()[0], cout, x.shape()[2] * o.factor, x.shape()[3] * o.factor]),
            }
        })
        .collect()
}

#[test]
fn candidate_shape_contracts() {
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for y in apply(&normal_catalog(), 4, 4, &x) {
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }
    let x8 = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    for y in apply(&upsample_catalog(2).unwrap(), 4, 2, &x8) {
        assert_eq!(y.shape(), &[1, 2, 16, 16]);
    }
    for y in apply(&upsample_catalog(4).unwrap(), 4, 2, &x) {
        assert_eq!(y.shape(), &[2, 2, 16, 16]);
    }
    let skip = normal_catalog().into_iter().find(|c| c.name == "skip").unwrap();
    assert_eq!(apply(&[skip], 4, 4, &x)[0], x);
}

fn two_scale_edge(a: [f64; 2]) -> (MixedEdge, ParamStore) {
    let ops = [const_scale_op(1.0, OpClass::Normal), const_scale_op(2.0, OpClass::Normal)];
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inst = ops
        .iter()
        .map(|o| o.instantiate(&mut store, &o.name, 1, 1, &mut rng).unwrap())
        .collect();
    let alpha = store.push("alpha", ParamGroup::Arch, Tensor::from_vec(&[2], a.to_vec()));
    let edge = MixedEdge {
        id: 0,
        source: 0,
        target: 1,
        class: EdgeClass::DirectNormal,
        ops: inst,
        alpha: Some(alpha),
        in_channels: 1,
        out_channels: 1,
        factor: 1,
    };
    (edge, store)
}

fn mixed(a: [f64; 2], x: &Tensor) -> Tensor {
    let (edge, mut store) = two_scale_edge(a);
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), false).unwrap();
    let y = mixed_forward(&edge, &mut store, v, &mut t, Mode::Train).unwrap();
    t.value(y).clone()
}

#[test]
fn mixed_forward_examples() {
    let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let close = |a: &Tensor, k: f64, tol: f64| a.data().iter().zip(x.data()).all(|(y, x)| (y - k * x).abs() < tol);
    assert!(close(&mixed([0.0, 0.0], &x), 1.5, 1e-12));
    assert!(close(&mixed([3f64.ln(), 0.0], &x), 1.25, 1e-12));
    assert!(close(&mixed([40.0, 0.0], &x), 1.0, 1e-9));
}

#[test]
fn zero_dominated_residuals_match_chain() {
    let spec = GraphSpec::new(2, 1, 4, 8, 8);
    let mut sup = build_supergraph(&spec, 3).unwrap();
    for e in sup.edges.clone() {
        if e.class == EdgeClass::Residual {
            let k = e.ops.len();
            let mut a = vec![0.0; k];
            a[k - 1] = 40.0;
            sup.store.set(e.alpha.unwrap(), Tensor::from_vec(&[k], a));
        }
    }
    let mut chain = sup.clone();
    chain.edges.retain(|e| e.class != EdgeClass::Residual);
    let z = latent(3, 8, 4);
    let a = sup.generate(&z, Mode::Eval).unwrap();
    let b = chain.generate(&z, Mode::Eval).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn identical_latents_give_identical_images() {
    let mut net = build_supergraph(&GraphSpec::new(2, 1, 4, 8, 8), 5).unwrap();
    let row = latent(1, 8, 6);
    let z = Tensor::stack(&[row.batch_item(0), row.batch_item(0)]).unwrap();
    let y = net.generate(&z, Mode::Eval).unwrap();
    assert_eq!(y.batch_item(0), y.batch_item(1));
}

#[test]
fn genotype_instantiation_shapes() {
    let spec = GraphSpec::new(3, 1, 4, 8, 16);
    let sup = build_supergraph(&spec, 0).unwrap();
    let g = prune_network(&sup).unwrap();
    let mut fixed = instantiate_genotype(&g, &spec, 1).unwrap();
    assert!(!fixed.is_searchable());
    assert_eq!(fixed.genotype().unwrap().nodes, g.nodes);
    let y = fixed.generate(&latent(2, 8, 0), Mode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 3, 32, 32]);

    let mut wide = spec.clone();
    wide.base = 6;
    wide.latent_dim = 12;
    let mut big = instantiate_genotype(&g, &wide, 1).unwrap();
    assert_eq!(big.generate(&latent(1, 12, 0), Mode::Eval).unwrap().shape(), &[1, 3, 48, 48]);

    let mut bare = g.clone();
    for n in &mut bare.nodes {
        n.residual = None;
    }
    let chain = instantiate_genotype(&bare, &spec, 1).unwrap();
    assert!(chain.edges.iter().all(|e| e.class.is_direct()));
}

#[test]
fn size_mismatch_rejected() {
    let mut spec = GraphSpec::new(2, 1, 4, 8, 8);
    spec.image_size = Some(32);
    assert!(build_supergraph(&spec, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixed_is_convex_and_shift_invariant(a0 in -5.0f64..5.0, a1 in -5.0f64..5.0, c in -20.0f64..20.0, seed in 0u64..100) {
        let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = mixed([a0, a1], &x);
        for (v, xi) in y.data().iter().zip(x.data()) {
            let (lo, hi) = if *xi >= 0.0 { (*xi, 2.0 * xi) } else { (2.0 * xi, *xi) };
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
        let s = mixed([a0 + c, a1 + c], &x);
        prop_assert!(y.max_abs_diff(&s) < 1e-9);
    }

    #[test]
    fn census_formula(stages in 1usize..5, n in 1usize..3) {
        let t = GraphSpec::new(stages, n, 2, 4, 32).topology().unwrap();
        let (up, norm, res) = t.census();
        prop_assert_eq!(up, stages);
        prop_assert_eq!(norm, stages * n);
        // pairs among {stem, u1..u_{S-1}} -> later u_j, minus the direct stem -> u1
        prop_assert_eq!(res, stages * (stages + 1) / 2 - 1);
    }
}
