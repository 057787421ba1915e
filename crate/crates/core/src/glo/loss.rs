//! Laplacian pyramid and the reconstruction objective.
//!
//! Pyramid: 5-tap binomial blur with mirror padding; down = blur then keep
//! even samples; expand = zero insertion then blur scaled by 4. Band `j < J`
//! is `G_j - expand(G_{j+1})`, band `J` is the low-pass `G_J`.

use crate::error::{Error, Result};
use crate::tensor::kernels::Stencil1d;
use crate::tensor::{Tape, Tensor, Var};

fn check_levels(shape: &[usize], levels: usize) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape("lap_pyramid", format!("expected NCHW, got {shape:?}")));
    }
    let m = 1usize << levels;
    if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
        return Err(Error::shape(
            "lap_pyramid",
            format!("spatial {}x{} not divisible by 2^{levels}", shape[2], shape[3]),
        ));
    }
    Ok(())
}

/// Pyramid bands of a recorded value: `levels` residual bands then the low-pass band.
pub fn lap_pyramid_var(tape: &mut Tape, x: Var, levels: usize) -> Result<Vec<Var>> {
    check_levels(tape.shape(x), levels)?;
    let mut bands = Vec::with_capacity(levels + 1);
    let mut g = x;
    for _ in 0..levels {
        let (h, w) = (tape.shape(g)[2], tape.shape(g)[3]);
        let down = tape.separable(g, Stencil1d::blur_down(h), Stencil1d::blur_down(w))?;
        let up = tape.separable(down, Stencil1d::expand(h / 2), Stencil1d::expand(w / 2))?;
        bands.push(tape.sub(g, up)?);
        g = down;
    }
    bands.push(g);
    Ok(bands)
}

/// Pyramid bands of an image batch `(N, C, H, W)`.
pub fn lap_pyramid(x: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::with_trainable(&[]);
    let v = tape.constant(x.clone())?;
    let bands = lap_pyramid_var(&mut tape, v, levels)?;
    Ok(bands.into_iter().map(|b| tape.value(b).clone()).collect())
}

/// Inverts [`lap_pyramid`]: `G_j = L_j + expand(G_{j+1})`.
pub fn lap_reconstruct(bands: &[Tensor]) -> Result<Tensor> {
    let Some(mut g) = bands.last().cloned() else {
        return Err(Error::shape("lap_reconstruct", "no bands"));
    };
    let mut tape = Tape::with_trainable(&[]);
    for band in bands[..bands.len() - 1].iter().rev() {
        let (h, w) = (g.shape()[2], g.shape()[3]);
        let gv = tape.constant(g)?;
        let up = tape.separable(gv, Stencil1d::expand(h), Stencil1d::expand(w))?;
        g = tape.value(up).zip_map(band, |a, b| a + b)?;
    }
    Ok(g)
}

/// `sum_j 4^j * mean|L_j(x) - L_j(y)|` over all bands including the low-pass.
pub fn lap1_loss_var(tape: &mut Tape, x: Var, y: Var, levels: usize) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::shape(
            "lap1_loss",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(y)),
        ));
    }
    // the pyramid is linear, so bands of the difference are band differences
    let d = tape.sub(x, y)?;
    let bands = lap_pyramid_var(tape, d, levels)?;
    let mut terms = Vec::with_capacity(bands.len());
    for (j, b) in bands.into_iter().enumerate() {
        let a = tape.abs(b);
        let m = tape.mean(a);
        terms.push(tape.mul_const(m, 4f64.powi(j as i32)));
    }
    tape.add(&terms)
}

/// `lap1(x, y) + lambda * mean((x - y)^2)`.
pub fn recon_loss_var(tape: &mut Tape, x: Var, y: Var, lambda: f64, levels: usize) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("negative l2 weight {lambda}")));
    }
    let lap = lap1_loss_var(tape, x, y, levels)?;
    if lambda == 0.0 {
        return Ok(lap);
    }
    let d = tape.sub(x, y)?;
    let sq = tape.square(d);
    let mse = tape.mean(sq);
    let l2 = tape.mul_const(mse, lambda);
    tape.add(&[lap, l2])
}

pub fn lap1_loss(x: &Tensor, y: &Tensor, levels: usize) -> Result<f64> {
    let mut tape = Tape::with_trainable(&[]);
    let (a, b) = (tape.constant(x.clone())?, tape.constant(y.clone())?);
    let l = lap1_loss_var(&mut tape, a, b, levels)?;
    Ok(tape.value(l).item())
}

pub fn recon_loss(x: &Tensor, y: &Tensor, lambda: f64, levels: usize) -> Result<f64> {
    let mut tape = Tape::with_trainable(&[]);
    let (a, b) = (tape.constant(x.clone())?, tape.constant(y.clone())?);
    let l = recon_loss_var(&mut tape, a, b, lambda, levels)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_zero_residuals() {
        let x = Tensor::full(&[1, 3, 8, 8], 0.37);
        let bands = lap_pyramid(&x, 2).unwrap();
        assert_eq!(bands.len(), 3);
        assert!(bands[0].data().iter().all(|v| v.abs() < 1e-12));
        assert!(bands[1].data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(bands[2].shape(), &[1, 3, 2, 2]);
        assert!(bands[2].data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn zero_levels_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 3, 5], 1.0, &mut rng);
        let bands = lap_pyramid(&x, 0).unwrap();
        assert_eq!(bands, vec![x]);
    }

    #[test]
    fn reconstruction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng);
        let bands = lap_pyramid(&x, 3).unwrap();
        assert!(lap_reconstruct(&bands).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(lap_pyramid(&Tensor::zeros(&[1, 1, 12, 12]), 3).is_err());
    }

    #[test]
    fn constant_shift_costs_four_delta() {
        let x = Tensor::full(&[1, 3, 4, 4], 0.2);
        let y = Tensor::full(&[1, 3, 4, 4], 0.2 + 0.15);
        let l = lap1_loss(&x, &y, 1).unwrap();
        assert!((l - 4.0 * 0.15).abs() < 1e-12, "{l}");
    }

    #[test]
    fn recon_loss_examples() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let y = Tensor::from_vec(&[1, 1, 1, 1], vec![0.0]);
        assert_eq!(recon_loss(&x, &y, 1.0, 0).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        assert_eq!(recon_loss(&a, &a, 3.0, 2).unwrap(), 0.0);
        assert_eq!(recon_loss(&a, &b, 0.0, 2).unwrap(), lap1_loss(&a, &b, 2).unwrap());
        assert!(recon_loss(&a, &b, -1.0, 2).is_err());
        assert!(recon_loss(&a, &Tensor::zeros(&[1, 3, 4, 4]), 1.0, 1).is_err());
    }
}
