//! Sampling from a trained generator and proxy Fréchet statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::glo::{project_latent, LatentTable};
use crate::search_space::Network;
use crate::tensor::{Mode, OpParams, ParamStore, Tape, Tensor};

/// Feature width of [`random_features`].
pub const FEATURE_DIM: usize = 16;
/// Seed of the fixed feature network.
pub const FEATURE_SEED: u64 = 0x0F1D_5EED;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and covariance (denominator N-1) of the rows of `x: (N, d)`.
    /// Needs at least `d + 1` rows.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(Error::Metrics(format!("expected (N, d) rows, got {:?}", x.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n < d + 1 {
            return Err(Error::Metrics(format!("{n} rows cannot fit a {d}-dimensional covariance")));
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        // exact symmetry
        let sym = (&cov + cov.transpose()) * 0.5;
        cov = sym;
        Ok(GaussianStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_latent_gaussian(z: &LatentTable) -> Result<GaussianStats> {
    GaussianStats::fit(z.tensor())
}

/// `V diag(sqrt(max(l, 0))) V^T` of a symmetric matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Metrics(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    // Tr((S_a S_b)^(1/2)) = Tr((A^(1/2) S_b A^(1/2))^(1/2)), computed both ways for symmetry
    let cross = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        let r = sqrt_psd(x);
        let m = &r * y * &r;
        let m = (&m + m.transpose()) * 0.5;
        SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>()
    };
    let tr = 0.5 * (cross(&a.cov, &b.cov) + cross(&b.cov, &a.cov));
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * tr;
    Ok(d.max(0.0))
}

/// `count` images from `z ~ N(mu, S)`, each code projected to the unit ball,
/// through the network in eval mode.
pub fn sample_images(net: &mut Network, stats: &GaussianStats, count: usize, seed: u64) -> Result<Tensor> {
    let d = net.topology.latent_dim;
    if stats.dim() != d {
        return Err(Error::Metrics(format!("stats dim {} vs latent dim {d}", stats.dim())));
    }
    let size = net.topology.output_size();
    if count == 0 {
        return Ok(Tensor::zeros(&[0, 3, size, size]));
    }
    let e = SymmetricEigen::new(stats.cov.clone());
    let root = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::with_capacity(count * d);
    for _ in 0..count {
        let eps = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
        let mut v: Vec<f64> = (&stats.mean + &root * eps).iter().copied().collect();
        project_latent(&mut v);
        z.extend(v);
    }
    net.generate(&Tensor::from_vec(&[count, d], z), Mode::Eval)
}

/// Fixed random feature extractor: three stride-2 3x3 convs with relu, then
/// global average pooling to [`FEATURE_DIM`] values per image.
pub struct FeatureNet {
    store: ParamStore,
    layers: Vec<OpParams>,
}

impl FeatureNet {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (i, (cin, cout)) in [(3, 8), (8, 16), (16, FEATURE_DIM)].into_iter().enumerate() {
            layers.push(OpParams::conv2d(&mut store, &format!("feat{i}"), cin, cout, 3, 2, 1, true, &mut rng));
            layers.push(OpParams::relu());
        }
        FeatureNet { store, layers }
    }

    /// `(N, 3, H, W)` images to `(N, FEATURE_DIM)` features.
    pub fn features(&mut self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Metrics(format!("expected (N, 3, H, W) images, got {s:?}")));
        }
        if s[2] < 8 || s[3] < 8 {
            return Err(Error::Metrics(format!("images {}x{} smaller than 8x8", s[2], s[3])));
        }
        let n = s[0];
        if n == 0 {
            return Ok(Tensor::zeros(&[0, FEATURE_DIM]));
        }
        let mut tape = Tape::with_trainable(&[]);
        let mut h = tape.constant(images.clone())?;
        for l in &self.layers {
            h = l.forward(&mut self.store, &[h], &mut tape, Mode::Eval)?;
        }
        let out = tape.value(h);
        let hw = out.shape()[2] * out.shape()[3];
        let data = out.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        Ok(Tensor::from_vec(&[n, FEATURE_DIM], data))
    }
}

impl Default for FeatureNet {
    fn default() -> Self {
        Self::new()
    }
}

pub fn random_features(images: &Tensor) -> Result<Tensor> {
    FeatureNet::new().features(images)
}

/// Fréchet distance between the feature Gaussians of two image sets.
pub fn proxy_fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut net = FeatureNet::new();
    let fa = GaussianStats::fit(&net.features(a)?)?;
    let fb = GaussianStats::fit(&net.features(b)?)?;
    frechet_distance(&fa, &fb)
}

/// Images at `steps` evenly spaced points from `z0` to `z1`, each projected first.
pub fn interpolate(net: &mut Network, z0: &[f64], z1: &[f64], steps: usize) -> Result<Vec<Tensor>> {
    let d = net.topology.latent_dim;
    if z0.len() != d || z1.len() != d {
        return Err(Error::shape(
            "interpolate",
            format!("latents of length {} and {}, expected {d}", z0.len(), z1.len()),
        ));
    }
    (0..steps)
        .map(|i| {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let mut z: Vec<f64> = z0.iter().zip(z1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            project_latent(&mut z);
            let img = net.generate(&Tensor::from_vec(&[1, d], z), Mode::Eval)?;
            let s = img.shape()[1..].to_vec();
            img.reshape(&s)
        })
        .collect()
}
