use degas::glo::LatentTable;
use degas::harness::render_toy;
use degas::metrics::*;
use degas::search_space::{build_supergraph, GraphSpec};
use degas::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stats1(mu: f64, var: f64) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_vec(vec![mu]),
        cov: DMatrix::from_vec(1, 1, vec![var]),
    }
}

#[test]
fn frechet_one_dimensional_examples() {
    assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
    assert!((frechet_distance(&stats1(0.5, 1.0), &stats1(0.5, 4.0)).unwrap() - 1.0).abs() < 1e-12);
    let s = stats1(0.3, 2.0);
    assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-9);
}

#[test]
fn frechet_rejects_dimension_mismatch() {
    let b = GaussianStats {
        mean: DVector::zeros(2),
        cov: DMatrix::identity(2, 2),
    };
    assert!(frechet_distance(&stats1(0.0, 1.0), &b).is_err());
}

#[test]
fn fit_closed_forms() {
    let same = Tensor::from_vec(&[4, 2], vec![0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1, 0.2]);
    let s = GaussianStats::fit(&same).unwrap();
    assert!(s.cov.iter().all(|v| v.abs() < 1e-15));

    // rows 2 e_1, 2 e_2, 2 e_3, 0 (N = 4, d = 3)
    let mut data = vec![0.0; 12];
    for i in 0..3 {
        data[i * 3 + i] = 2.0;
    }
    let s = GaussianStats::fit(&Tensor::from_vec(&[4, 3], data)).unwrap();
    for i in 0..3 {
        assert!((s.mean[i] - 0.5).abs() < 1e-12);
        for j in 0..3 {
            // sum_k (x_ki - 0.5)(x_kj - 0.5) / 3
            let want = if i == j { (1.5f64 * 1.5 + 3.0 * 0.25) / 3.0 } else { (-1.5 * 0.5 * 2.0 + 0.25 * 2.0) / 3.0 };
            assert!((s.cov[(i, j)] - want).abs() < 1e-12, "{i}{j}");
        }
    }
    assert!(GaussianStats::fit(&Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn fitted_latent_mean_matches() {
    let z = LatentTable::init(40, 5, &mut ChaCha8Rng::seed_from_u64(3));
    let s = fit_latent_gaussian(&z).unwrap();
    for k in 0..5 {
        let m = (0..40).map(|i| z.row(i)[k]).sum::<f64>() / 40.0;
        assert!((s.mean[k] - m).abs() < 1e-12);
    }
    for i in 0..5 {
        for j in 0..5 {
            assert!((s.cov[(i, j)] - s.cov[(j, i)]).abs() < 1e-9);
        }
    }
    let eig = s.cov.clone().symmetric_eigenvalues();
    assert!(eig.iter().all(|&l| l >= -1e-9));
}

fn small_net() -> degas::search_space::Network {
    build_supergraph(&GraphSpec::new(1, 1, 4, 6, 4), 2).unwrap()
}

#[test]
fn sampling_contract() {
    let mut net = small_net();
    let z = LatentTable::init(20, 6, &mut ChaCha8Rng::seed_from_u64(1));
    let s = fit_latent_gaussian(&z).unwrap();
    let a = sample_images(&mut net, &s, 5, 9).unwrap();
    let b = sample_images(&mut net, &s, 5, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[5, 3, 8, 8]);
    assert!(a.data().iter().all(|v| v.abs() < 1.0));
    assert_eq!(sample_images(&mut net, &s, 0, 9).unwrap().shape(), &[0, 3, 8, 8]);
}

#[test]
fn feature_contract() {
    let imgs = render_toy(6, 16, 4);
    let f = random_features(&imgs).unwrap();
    assert_eq!(f.shape(), &[6, FEATURE_DIM]);
    assert_eq!(random_features(&imgs).unwrap(), f);
    let twice = Tensor::stack(&[imgs.batch_item(2), imgs.batch_item(2)]).unwrap();
    let g = random_features(&twice).unwrap();
    assert_eq!(g.batch_item(0), g.batch_item(1));
    assert_eq!(g.batch_item(0), f.batch_item(2));

    let perm = [3, 0, 5, 1, 4, 2];
    let shuffled = Tensor::stack(&perm.iter().map(|&i| imgs.batch_item(i)).collect::<Vec<_>>()).unwrap();
    let fs = random_features(&shuffled).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(fs.batch_item(k), f.batch_item(i));
    }
    assert_eq!(random_features(&Tensor::zeros(&[2, 3, 8, 8])).unwrap().shape(), &[2, FEATURE_DIM]);
    assert!(random_features(&Tensor::zeros(&[2, 3, 4, 4])).is_err());
}

#[test]
fn halves_closer_than_noise() {
    let imgs = render_toy(256, 16, 11);
    let pick = |r: std::ops::Range<usize>| Tensor::stack(&r.map(|i| imgs.batch_item(i)).collect::<Vec<_>>()).unwrap();
    let (a, b) = (pick(0..128), pick(128..256));
    let noise = Tensor::rand_uniform(&[128, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let same = proxy_fid(&a, &b).unwrap();
    let diff = proxy_fid(&a, &noise).unwrap();
    assert!(same < diff, "{same} vs {diff}");
    assert_eq!(proxy_fid(&a, &b).unwrap(), same);
}

#[test]
fn interpolation_contract() {
    let mut net = small_net();
    let z0 = vec![0.1, -0.2, 0.3, 0.0, 0.2, -0.1];
    let z1 = vec![-0.3, 0.1, 0.0, 0.4, -0.2, 0.1];
    let seq = interpolate(&mut net, &z0, &z1, 2).unwrap();
    assert_eq!(seq.len(), 2);
    let one = |z: &[f64], net: &mut degas::search_space::Network| {
        let s = interpolate(net, z, z, 1).unwrap();
        s[0].clone()
    };
    assert_eq!(seq[0], one(&z0, &mut net));
    assert_eq!(seq[1], one(&z1, &mut net));
    let flat = interpolate(&mut net, &z0, &z0, 5).unwrap();
    assert_eq!(flat.len(), 5);
    assert!(flat.iter().all(|f| f == &flat[0]));
    assert_eq!(flat[0].shape(), &[3, 8, 8]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frechet_symmetric_and_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = GaussianStats::fit(&Tensor::randn(&[12, 4], 1.0, &mut rng)).unwrap();
        let b = GaussianStats::fit(&Tensor::randn(&[12, 4], 2.0, &mut rng)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }
}
