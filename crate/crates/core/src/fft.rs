//! Complex images as paired real tensors, and the unitary 2-D FFT.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H×W complex image carried as two real tensors.
#[derive(Debug, Clone)]
pub struct ComplexImage {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexImage {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::ShapeMismatch(format!(
                "complex image: re {:?} vs im {:?}",
                re.shape(),
                im.shape()
            )));
        }
        if re.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "complex image must be 2-d, got {:?}",
                re.shape()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            re: Tensor::zeros(&[h, w]),
            im: Tensor::zeros(&[h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn norm(&self) -> f64 {
        (self.re.norm().powi(2) + self.im.norm().powi(2)).sqrt()
    }

    /// Pointwise complex multiply by another image.
    pub fn mul(&self, other: &ComplexImage) -> Result<ComplexImage> {
        let re = self
            .re
            .mul_elem(&other.re)?
            .sub(&self.im.mul_elem(&other.im)?)?;
        let im = self
            .re
            .mul_elem(&other.im)?
            .add(&self.im.mul_elem(&other.re)?)?;
        ComplexImage::new(re, im)
    }

    /// Pointwise multiply by the conjugate of `other`.
    pub fn mul_conj(&self, other: &ComplexImage) -> Result<ComplexImage> {
        let re = self
            .re
            .mul_elem(&other.re)?
            .add(&self.im.mul_elem(&other.im)?)?;
        let im = self
            .im
            .mul_elem(&other.re)?
            .sub(&self.re.mul_elem(&other.im)?)?;
        ComplexImage::new(re, im)
    }
}

fn transform(x: &ComplexImage, inverse: bool) -> ComplexImage {
    let (h, w) = (x.height(), x.width());
    let mut buf: Vec<Complex64> = x
        .re
        .data()
        .iter()
        .zip(x.im.data())
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };

    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::default(); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }

    // unitary normalization: 1/sqrt(HW) in each direction
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let re = Tensor::from_fn(&[h, w], |i| buf[i].re * scale);
    let im = Tensor::from_fn(&[h, w], |i| buf[i].im * scale);
    ComplexImage { re, im }
}

/// Unitary 2-D discrete Fourier transform.
pub fn fft2(x: &ComplexImage) -> ComplexImage {
    transform(x, false)
}

/// Unitary inverse, `ifft2(fft2(x)) = x` to precision.
pub fn ifft2(x: &ComplexImage) -> ComplexImage {
    transform(x, true)
}
