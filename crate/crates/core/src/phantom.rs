//! Synthetic data generators, analytic training oracles, and PSNR.

use serde::{Deserialize, Serialize};

use crate::dsm::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    GaussianField,
    PiecewiseSmooth,
    EllipseComposite,
}

/// Ground-truth image in [0,1] plus generator provenance.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Tensor,
    pub kind: PhantomKind,
    pub seed: u64,
}

/// n i.i.d. N(0, τ²I) images: the corpus whose smoothed score has a
/// closed form, used as the training oracle.
pub fn gaussian_data(tau: f64, shape: &[usize], n: usize, seed: u64) -> Result<Dataset> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
    }
    let mut rng = Rng::from_seed(seed);
    let items = (0..n)
        .map(|_| rng.gaussian(shape, tau))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items)
}

/// Exact DSM target for N(0, τ²I) data: x̃ ~ N(0, (τ²+σ²)I), so
/// H(x̃) = −σ²∇log p(x̃) = σ²·x̃/(τ²+σ²).
pub fn analytic_smoothed_score(x_tilde: &Tensor, tau: f64, sigma: f64) -> Result<Tensor> {
    if tau <= 0.0 || sigma <= 0.0 {
        return Err(Error::InvalidArgument("tau and sigma must be positive".into()));
    }
    Ok(x_tilde.scale(sigma * sigma / (tau * tau + sigma * sigma)))
}

/// Union of random smooth-edged ellipses and rectangles with constant
/// intensities, clipped to [0,1].
pub fn piecewise_phantom(shape: &[usize], ncomponents: usize, seed: u64) -> Result<Phantom> {
    if ncomponents == 0 {
        return Err(Error::InvalidArgument("ncomponents must be >= 1".into()));
    }
    let (c, h, w) = match shape {
        [h, w] => (1usize, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "phantom shape must be HxW or CxHxW, got {other:?}"
            )))
        }
    };
    let mut rng = Rng::from_seed(seed);
    let mut img = Tensor::zeros(&[h, w]);
    let edge = 1.5; // soft-edge width in pixels
    for comp in 0..ncomponents {
        let cy = rng.uniform(0.2, 0.8) * h as f64;
        let cx = rng.uniform(0.2, 0.8) * w as f64;
        let ry = rng.uniform(0.08, 0.3) * h as f64;
        let rx = rng.uniform(0.08, 0.3) * w as f64;
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let intensity = rng.uniform(0.2, 0.9);
        let rectangular = comp % 3 == 2;
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = ct * dx + st * dy;
                let v = -st * dx + ct * dy;
                // signed distance-ish quantity, negative inside
                let d = if rectangular {
                    (u.abs() / rx).max(v.abs() / ry) - 1.0
                } else {
                    ((u / rx).powi(2) + (v / ry).powi(2)).sqrt() - 1.0
                };
                let blend = 1.0 / (1.0 + (d * rx.min(ry) / edge).exp());
                let p = &mut img.data_mut()[y * w + x];
                *p += intensity * blend;
            }
        }
    }
    let img = img.map(|v| v.clamp(0.0, 1.0));
    let image = if c == 1 && shape.len() == 2 {
        img
    } else {
        // first channel carries the phantom, remaining channels zero
        let mut data = vec![0.0; c * h * w];
        data[..h * w].copy_from_slice(img.data());
        Tensor::from_raw(vec![c, h, w], data)
    };
    Ok(Phantom { image, kind: PhantomKind::EllipseComposite, seed })
}

/// 10·log10(peak²/MSE) in dB; identical images give +∞.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    let mse = x.mse(reference)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_data_statistics() {
        let tau = 0.3;
        let ds = gaussian_data(tau, &[1, 32, 32], 120, 1).unwrap(); // >1e5 elements
        let n: f64 = ds.items().iter().map(|t| t.numel() as f64).sum();
        let mean: f64 = ds.items().iter().map(|t| t.sum()).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * tau / n.sqrt() * 3.0, "mean {mean}");
        let var: f64 = ds.items().iter().map(|t| t.dot(t).unwrap()).sum::<f64>() / n;
        assert!((var - tau * tau).abs() / (tau * tau) < 0.02, "var {var}");
        // reproducible
        let ds2 = gaussian_data(tau, &[1, 32, 32], 120, 1).unwrap();
        assert_eq!(ds.items()[0].data(), ds2.items()[0].data());
    }

    #[test]
    fn analytic_score_special_cases() {
        let z = Tensor::zeros(&[4]);
        assert_eq!(analytic_smoothed_score(&z, 0.3, 0.1).unwrap().data(), z.data());
        // tau = sigma -> x/2
        let x = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let s = analytic_smoothed_score(&x, 0.2, 0.2).unwrap();
        assert_eq!(s.data(), &[0.5, -1.0]);
        // tau -> infinity: flat prior, zero score
        let s = analytic_smoothed_score(&x, 1e9, 0.1).unwrap();
        assert!(s.data().iter().all(|&v| v.abs() < 1e-16));
    }

    #[test]
    fn phantom_range_and_determinism() {
        assert!(piecewise_phantom(&[16, 16], 0, 1).is_err());
        let p = piecewise_phantom(&[1, 16, 16], 4, 2).unwrap();
        assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let q = piecewise_phantom(&[1, 16, 16], 4, 2).unwrap();
        assert_eq!(p.image.data(), q.image.data());
        // the phantom should actually contain structure
        assert!(p.image.norm() > 0.0);
    }

    #[test]
    fn psnr_arithmetic() {
        let x = Tensor::full(&[10, 10], 0.5);
        let shifted = x.map(|v| v + 0.1);
        let db = psnr(&shifted, &x, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-12, "psnr {db}");
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    }
}
