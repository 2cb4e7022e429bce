//! Linear measurement operators with exact adjoints, normalized so the
//! ‖A‖ ≤ 1 precondition of the guaranteed step size holds by
//! construction, plus measurement simulation.
//!
//! Complex data crosses the solver boundary as real two-channel tensors
//! `[2,H,W]`; only the multicoil Fourier operator reinterprets them as
//! complex internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, ComplexImage};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A forward map with an exact adjoint.
pub trait LinearOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, y: &Tensor) -> Result<Tensor>;
    fn domain_shape(&self) -> &[usize];
    fn range_shape(&self) -> &[usize];
    /// Project a range-space tensor onto the actual measurement support
    /// (identity for dense-range operators, mask re-application for
    /// sampling operators). Used when simulating noisy measurements.
    fn project_range(&self, y: &Tensor) -> Result<Tensor> {
        Ok(y.clone())
    }
}

/// A = I (denoising).
pub struct IdentityOp {
    shape: Vec<usize>,
}

impl IdentityOp {
    pub fn new(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec() }
    }
}

impl LinearOperator for IdentityOp {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(x, &self.shape, "identity apply")?;
        Ok(x.clone())
    }
    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        check_shape(y, &self.shape, "identity adjoint")?;
        Ok(y.clone())
    }
    fn domain_shape(&self) -> &[usize] {
        &self.shape
    }
    fn range_shape(&self) -> &[usize] {
        &self.shape
    }
}

fn check_shape(t: &Tensor, want: &[usize], ctx: &str) -> Result<()> {
    if t.shape() != want {
        return Err(Error::ShapeMismatch(format!(
            "{ctx}: got {:?}, want {want:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Elementwise zeroing by a 0/1 mask (inpainting); a self-adjoint
/// projection.
pub struct MaskOp {
    mask: Tensor,
}

impl MaskOp {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask must be 0/1 valued".into()));
        }
        if mask.data().iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("all-false mask has zero norm".into()));
        }
        Ok(Self { mask })
    }
}

impl LinearOperator for MaskOp {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.mul_elem(&self.mask)
    }
    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        y.mul_elem(&self.mask)
    }
    fn domain_shape(&self) -> &[usize] {
        self.mask.shape()
    }
    fn range_shape(&self) -> &[usize] {
        self.mask.shape()
    }
    fn project_range(&self, y: &Tensor) -> Result<Tensor> {
        y.mul_elem(&self.mask)
    }
}

/// Cartesian undersampling pattern: full readout lines (rows) selected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingMask {
    pub lines: Vec<bool>,
    pub accel: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn num_selected(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self, width: usize) -> Tensor {
        let h = self.lines.len();
        Tensor::from_fn(&[h, width], |i| if self.lines[i / width] { 1.0 } else { 0.0 })
    }

    pub fn from_tensor(t: &Tensor, accel: f64, seed: u64) -> Result<Self> {
        let [h, w] = match t.shape() {
            [h, w] => [*h, *w],
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "mask tensor must be HxW, got {other:?}"
                )))
            }
        };
        let mut lines = Vec::with_capacity(h);
        for i in 0..h {
            let row = &t.data()[i * w..(i + 1) * w];
            let on = row[0] != 0.0;
            if row.iter().any(|&v| (v != 0.0) != on) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a full readout line"
                )));
            }
            lines.push(on);
        }
        Ok(Self { lines, accel, seed })
    }
}

/// Variable-density Cartesian mask: the center 4% of lines are always
/// kept; the remaining lines are drawn without replacement with
/// probability proportional to a Gaussian profile in line index, until
/// ⌈H/R⌉ lines are selected.
pub fn variable_density_mask(h: usize, accel: f64, seed: u64) -> Result<SamplingMask> {
    if accel < 1.0 {
        return Err(Error::InvalidArgument(format!("acceleration {accel} < 1")));
    }
    if accel > h as f64 {
        return Err(Error::InvalidArgument(format!(
            "acceleration {accel} exceeds line count {h}"
        )));
    }
    let total = (h as f64 / accel).ceil() as usize;
    let ncenter = ((0.04 * h as f64).ceil() as usize).min(total).max(1);
    let center = h / 2;
    let mut lines = vec![false; h];
    // center block: ncenter lines around h/2
    let start = center.saturating_sub(ncenter / 2);
    for i in start..(start + ncenter).min(h) {
        lines[i] = true;
    }
    let mut selected = lines.iter().filter(|&&b| b).count();

    let width = h as f64 / 6.0;
    let mut weights: Vec<f64> = (0..h)
        .map(|i| {
            let d = i as f64 - center as f64;
            (-d * d / (2.0 * width * width)).exp()
        })
        .collect();
    for (i, w) in weights.iter_mut().enumerate() {
        if lines[i] {
            *w = 0.0;
        }
    }
    let mut rng = Rng::from_seed(seed);
    while selected < total {
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            break;
        }
        let mut u = rng.uniform(0.0, sum);
        let mut pick = h - 1;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        lines[pick] = true;
        weights[pick] = 0.0;
        selected += 1;
    }
    Ok(SamplingMask { lines, accel, seed })
}

/// Normalized coil sensitivity profiles: Σ_i |c_i(p)|² = 1 everywhere.
#[derive(Debug, Clone)]
pub struct CoilMaps {
    maps: Vec<ComplexImage>,
}

impl CoilMaps {
    pub fn new(maps: Vec<ComplexImage>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("need at least one coil".into()));
        }
        let (h, w) = (maps[0].height(), maps[0].width());
        for m in &maps {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::ShapeMismatch("coil maps differ in shape".into()));
            }
        }
        let cm = Self { maps };
        cm.check_normalized()?;
        Ok(cm)
    }

    fn check_normalized(&self) -> Result<()> {
        let n = self.maps[0].re.numel();
        for p in 0..n {
            let s: f64 = self
                .maps
                .iter()
                .map(|c| c.re.data()[p].powi(2) + c.im.data()[p].powi(2))
                .sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "coil maps not normalized at pixel {p}: sum |c|^2 = {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn ncoils(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[ComplexImage] {
        &self.maps
    }

    /// Flatten to a `[ncoils,2,H,W]` tensor for serialization.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.maps[0].height(), self.maps[0].width());
        let n = h * w;
        let mut data = Vec::with_capacity(self.maps.len() * 2 * n);
        for m in &self.maps {
            data.extend_from_slice(m.re.data());
            data.extend_from_slice(m.im.data());
        }
        Tensor::from_raw(vec![self.maps.len(), 2, h, w], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [nc, two, h, w] = match t.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "coil map tensor must be [ncoils,2,H,W], got {other:?}"
                )))
            }
        };
        if two != 2 {
            return Err(Error::ShapeMismatch("coil map tensor needs 2 channels".into()));
        }
        let n = h * w;
        let maps = (0..nc)
            .map(|c| {
                let base = c * 2 * n;
                ComplexImage::new(
                    Tensor::from_raw(vec![h, w], t.data()[base..base + n].to_vec()),
                    Tensor::from_raw(vec![h, w], t.data()[base + n..base + 2 * n].to_vec()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }
}

/// Smooth synthetic coil profiles: Gaussian magnitude bumps placed around
/// the field of view with linear phase ramps, jointly normalized.
pub fn synthetic_coil_maps(h: usize, w: usize, ncoils: usize) -> Result<CoilMaps> {
    if ncoils == 0 {
        return Err(Error::InvalidArgument("ncoils must be >= 1".into()));
    }
    let mut raw: Vec<(Tensor, Tensor)> = Vec::with_capacity(ncoils);
    for c in 0..ncoils {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / ncoils as f64;
        let cy = h as f64 / 2.0 + 0.35 * h as f64 * angle.sin();
        let cx = w as f64 / 2.0 + 0.35 * w as f64 * angle.cos();
        let s2 = (0.6 * h.max(w) as f64).powi(2);
        let mag = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            0.2 + (-d2 / s2).exp()
        });
        let phase = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 * angle + 2.0 * (x * angle.cos() + y * angle.sin()) / (h + w) as f64
        });
        raw.push((mag, phase));
    }
    // joint normalization: divide by sqrt(sum of squared magnitudes)
    let n = h * w;
    let mut maps = Vec::with_capacity(ncoils);
    let norm: Vec<f64> = (0..n)
        .map(|p| raw.iter().map(|(m, _)| m.data()[p].powi(2)).sum::<f64>().sqrt())
        .collect();
    for (mag, phase) in raw {
        let re = Tensor::from_fn(&[h, w], |p| mag.data()[p] / norm[p] * phase.data()[p].cos());
        let im = Tensor::from_fn(&[h, w], |p| mag.data()[p] / norm[p] * phase.data()[p].sin());
        maps.push(ComplexImage::new(re, im)?);
    }
    CoilMaps::new(maps)
}

/// Multicoil masked-Fourier operator A x = S F (C x), per coil, stacked.
/// Domain `[2,H,W]` (real two-channel image), range `[ncoils,2,H,W]`
/// (masked k-space per coil, unsampled lines zeroed).
pub struct MriOp {
    mask: Tensor,
    csm: CoilMaps,
    domain: Vec<usize>,
    range: Vec<usize>,
}

impl MriOp {
    pub fn new(mask: &SamplingMask, csm: CoilMaps) -> Result<Self> {
        let (h, w) = (csm.maps()[0].height(), csm.maps()[0].width());
        if mask.lines.len() != h {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} lines for height {h}",
                mask.lines.len()
            )));
        }
        Ok(Self {
            mask: mask.to_tensor(w),
            domain: vec![2, h, w],
            range: vec![csm.ncoils(), 2, h, w],
            csm,
        })
    }

    fn split(&self, x: &Tensor) -> ComplexImage {
        let (h, w) = (self.domain[1], self.domain[2]);
        let n = h * w;
        ComplexImage {
            re: Tensor::from_raw(vec![h, w], x.data()[..n].to_vec()),
            im: Tensor::from_raw(vec![h, w], x.data()[n..].to_vec()),
        }
    }
}

impl LinearOperator for MriOp {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(x, &self.domain, "mri apply")?;
        let img = self.split(x);
        let n = self.domain[1] * self.domain[2];
        let mut out = Vec::with_capacity(self.csm.ncoils() * 2 * n);
        for c in self.csm.maps() {
            let weighted = img.mul(c)?;
            let k = fft2(&weighted);
            let re = k.re.mul_elem(&self.mask)?;
            let im = k.im.mul_elem(&self.mask)?;
            out.extend_from_slice(re.data());
            out.extend_from_slice(im.data());
        }
        Ok(Tensor::from_raw(self.range.clone(), out))
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        check_shape(y, &self.range, "mri adjoint")?;
        let (h, w) = (self.domain[1], self.domain[2]);
        let n = h * w;
        let mut acc = ComplexImage::zeros(h, w);
        for (i, c) in self.csm.maps().iter().enumerate() {
            let base = i * 2 * n;
            let k = ComplexImage {
                re: Tensor::from_raw(vec![h, w], y.data()[base..base + n].to_vec())
                    .mul_elem(&self.mask)?,
                im: Tensor::from_raw(vec![h, w], y.data()[base + n..base + 2 * n].to_vec())
                    .mul_elem(&self.mask)?,
            };
            let img = ifft2(&k);
            let contrib = img.mul_conj(c)?;
            acc.re.axpy(1.0, &contrib.re)?;
            acc.im.axpy(1.0, &contrib.im)?;
        }
        let mut data = Vec::with_capacity(2 * n);
        data.extend_from_slice(acc.re.data());
        data.extend_from_slice(acc.im.data());
        Ok(Tensor::from_raw(self.domain.clone(), data))
    }

    fn domain_shape(&self) -> &[usize] {
        &self.domain
    }

    fn range_shape(&self) -> &[usize] {
        &self.range
    }

    fn project_range(&self, y: &Tensor) -> Result<Tensor> {
        check_shape(y, &self.range, "mri project")?;
        let (h, w) = (self.domain[1], self.domain[2]);
        let n = h * w;
        let mut out = y.clone();
        for i in 0..self.csm.ncoils() * 2 {
            let base = i * n;
            for p in 0..n {
                out.data_mut()[base + p] *= self.mask.data()[p];
            }
        }
        Ok(out)
    }
}

/// Wrap an operator, dividing apply/adjoint by a fixed factor.
pub struct ScaledOp<T: LinearOperator> {
    inner: T,
    inv_scale: f64,
}

impl<T: LinearOperator> ScaledOp<T> {
    pub fn new(inner: T, scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("scale {scale} must be > 0")));
        }
        Ok(Self { inner, inv_scale: 1.0 / scale })
    }
}

impl<T: LinearOperator> LinearOperator for ScaledOp<T> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.apply(x)?.scale(self.inv_scale))
    }
    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.inner.adjoint(y)?.scale(self.inv_scale))
    }
    fn domain_shape(&self) -> &[usize] {
        self.inner.domain_shape()
    }
    fn range_shape(&self) -> &[usize] {
        self.inner.range_shape()
    }
    fn project_range(&self, y: &Tensor) -> Result<Tensor> {
        self.inner.project_range(y)
    }
}

/// Dense matrix operator for small-scale oracle tests.
pub struct DenseOp {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    domain: Vec<usize>,
    range: Vec<usize>,
}

impl DenseOp {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != rows * cols {
            return Err(Error::ShapeMismatch("dense matrix size".into()));
        }
        Ok(Self { rows, cols, matrix, domain: vec![cols], range: vec![rows] })
    }
}

impl LinearOperator for DenseOp {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(x, &self.domain, "dense apply")?;
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            y[r] = self.matrix[r * self.cols..(r + 1) * self.cols]
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum();
        }
        Ok(Tensor::from_raw(self.range.clone(), y))
    }
    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        check_shape(y, &self.range, "dense adjoint")?;
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                x[c] += self.matrix[r * self.cols + c] * y.data()[r];
            }
        }
        Ok(Tensor::from_raw(self.domain.clone(), x))
    }
    fn domain_shape(&self) -> &[usize] {
        &self.domain
    }
    fn range_shape(&self) -> &[usize] {
        &self.range
    }
}

/// ‖A‖ via power iteration on AᴴA.
pub fn operator_norm(op: &dyn LinearOperator, iters: usize, rng: &mut Rng) -> Result<f64> {
    if iters < 50 {
        return Err(Error::InvalidArgument(format!("iters {iters} < 50")));
    }
    let mut v = rng.gaussian(op.domain_shape(), 1.0)?;
    let n0 = v.norm();
    if n0 == 0.0 {
        return Err(Error::InvalidArgument("degenerate start vector".into()));
    }
    v.scale_in_place(1.0 / n0);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = op.adjoint(&op.apply(&v)?)?;
        lambda = w.norm();
        if lambda < 1e-14 {
            return Err(Error::InvalidArgument("zero operator".into()));
        }
        v = w.scale(1.0 / lambda);
    }
    Ok(lambda.sqrt())
}

/// Divide an operator by its measured norm so ‖A‖ = 1 by construction.
pub fn normalize<T: LinearOperator>(op: T, iters: usize, rng: &mut Rng) -> Result<ScaledOp<T>> {
    let norm = operator_norm(&op, iters, rng)?;
    ScaledOp::new(op, norm)
}

/// b = A x + n with n ~ N(0, η²) per real component, projected back onto
/// the measurement support.
pub fn simulate(
    op: &dyn LinearOperator,
    x_true: &Tensor,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if eta < 0.0 {
        return Err(Error::InvalidArgument(format!("negative eta {eta}")));
    }
    let clean = op.apply(x_true)?;
    if eta == 0.0 {
        return Ok(clean);
    }
    let noise = rng.gaussian(clean.shape(), eta)?;
    op.project_range(&clean.add(&noise)?)
}

/// 20-probe adjoint dot-test; returns the max relative mismatch of
/// ⟨Ax, y⟩ vs ⟨x, Aᴴy⟩.
pub fn dot_test(op: &dyn LinearOperator, rng: &mut Rng, probes: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x = rng.gaussian(op.domain_shape(), 1.0)?;
        let y = rng.gaussian(op.range_shape(), 1.0)?;
        let lhs = op.apply(&x)?.dot(&y)?;
        let rhs = x.dot(&op.adjoint(&y)?)?;
        let denom = lhs.abs().max(rhs.abs()).max(1e-12);
        worst = worst.max((lhs - rhs).abs() / denom);
    }
    Ok(worst)
}
