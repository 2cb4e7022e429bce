//! MAP solvers: monotone gradient descent with the energy prior
//! (EPnP-GD), plus steepest-descent RED and plain score-PnP baselines.

use serde::{Deserialize, Serialize};

use crate::baseline::PlainScoreNet;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::linop::LinearOperator;
use crate::lipschitz::step_size;
use crate::phantom::psnr;
use crate::tensor::Tensor;

/// A prior usable by the MAP objective: scalar energy and its gradient.
pub trait Prior {
    fn energy(&self, x: &Tensor) -> Result<f64>;
    fn grad(&self, x: &Tensor) -> Result<Tensor>;
}

impl Prior for EnergyModel {
    fn energy(&self, x: &Tensor) -> Result<f64> {
        EnergyModel::energy(self, x)
    }
    fn grad(&self, x: &Tensor) -> Result<Tensor> {
        self.score(x)
    }
}

/// Ψ(x) = ½‖x‖², H(x) = x. Closed-form test stub with Lipschitz constant 1.
pub struct QuadraticPrior;

impl Prior for QuadraticPrior {
    fn energy(&self, x: &Tensor) -> Result<f64> {
        Ok(0.5 * x.dot(x)?)
    }
    fn grad(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gamma {
    /// γ = 1/L_eq from the recorded Lipschitz constant; activates the
    /// monotone-descent runtime guard.
    Auto { l: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// x₀ = Aᴴb (adjoint of the measurements).
    Adjoint,
    Zeros,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    pub eta: f64,
    pub sigma: f64,
    pub gamma: Gamma,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub init: Init,
}

impl SolveConfig {
    pub fn new(eta: f64, sigma: f64, gamma: Gamma) -> Self {
        Self { eta, sigma, gamma, max_iters: 10_000, rel_tol: 1e-8, init: Init::Adjoint }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::InvalidArgument("eta and sigma must be positive".into()));
        }
        if self.rel_tol <= 0.0 {
            return Err(Error::InvalidArgument("rel_tol must be positive".into()));
        }
        if let Gamma::Fixed(g) = self.gamma {
            if g <= 0.0 {
                return Err(Error::InvalidArgument("explicit gamma must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn resolve_gamma(&self) -> Result<f64> {
        match self.gamma {
            Gamma::Fixed(g) => Ok(g),
            Gamma::Auto { l } => step_size(l, self.eta, self.sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    DescentViolation,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub f: f64,
    pub data_term: f64,
    pub prior_term: f64,
    pub grad_norm: f64,
    pub psnr: Option<f64>,
}

/// Per-iteration record of a solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
    pub status: SolveStatus,
    pub gamma: f64,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.rows.last().map(|r| r.iter).unwrap_or(0)
    }

    /// `iter,f,data_term,prior_term,grad_norm,psnr` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,f,data_term,prior_term,grad_norm,psnr\n");
        for r in &self.rows {
            let p = r
                .psnr
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                r.iter, r.f, r.data_term, r.prior_term, r.grad_norm, p
            ));
        }
        s
    }

    /// Largest relative cost increase over the trace (0 for a perfectly
    /// monotone run).
    pub fn max_relative_increase(&self) -> f64 {
        let mut worst = 0.0f64;
        for w in self.rows.windows(2) {
            let inc = w[1].f - w[0].f;
            if inc > 0.0 {
                worst = worst.max(inc / w[0].f.abs().max(1e-300));
            }
        }
        worst
    }
}

/// f(x) = ‖Ax − b‖²/(2η²) + Ψ(x)/σ², returned as (f, data, prior).
pub fn map_cost(
    prior: &dyn Prior,
    op: &dyn LinearOperator,
    b: &Tensor,
    cfg: &SolveConfig,
    x: &Tensor,
) -> Result<(f64, f64, f64)> {
    let r = op.apply(x)?.sub(b)?;
    let data = r.dot(&r)? / (2.0 * cfg.eta * cfg.eta);
    let pr = prior.energy(x)? / (cfg.sigma * cfg.sigma);
    Ok((data + pr, data, pr))
}

/// ∇f(x) = Aᴴ(Ax − b)/η² + H(x)/σ².
pub fn map_grad(
    prior: &dyn Prior,
    op: &dyn LinearOperator,
    b: &Tensor,
    cfg: &SolveConfig,
    x: &Tensor,
) -> Result<Tensor> {
    let r = op.apply(x)?.sub(b)?;
    let mut g = op.adjoint(&r)?.scale(1.0 / (cfg.eta * cfg.eta));
    g.axpy(1.0 / (cfg.sigma * cfg.sigma), &prior.grad(x)?)?;
    Ok(g)
}

fn initial_point(op: &dyn LinearOperator, b: &Tensor, cfg: &SolveConfig) -> Result<Tensor> {
    match &cfg.init {
        Init::Adjoint => op.adjoint(b),
        Init::Zeros => Ok(Tensor::zeros(op.domain_shape())),
        Init::Custom(data) => Tensor::new(op.domain_shape().to_vec(), data.clone()),
    }
}

/// Steepest descent on the MAP objective with the monotone-descent
/// guard: when γ is auto-derived from L, any cost increase aborts with
/// `DescentViolation` (an L-underestimate diagnostic).
pub fn epnp_gd(
    prior: &dyn Prior,
    op: &dyn LinearOperator,
    b: &Tensor,
    cfg: &SolveConfig,
    ground_truth: Option<&Tensor>,
) -> Result<(Tensor, SolveTrace)> {
    cfg.validate()?;
    let gamma = cfg.resolve_gamma()?;
    let guard = matches!(cfg.gamma, Gamma::Auto { .. });
    let mut x = initial_point(op, b, cfg)?;

    let mut rows = Vec::new();
    let record = |rows: &mut Vec<TraceRow>,
                  iter: usize,
                  f: f64,
                  data: f64,
                  pr: f64,
                  gnorm: f64,
                  x: &Tensor|
     -> Result<()> {
        let p = match ground_truth {
            Some(t) => Some(psnr(x, t, 1.0)?),
            None => None,
        };
        rows.push(TraceRow { iter, f, data_term: data, prior_term: pr, grad_norm: gnorm, psnr: p });
        Ok(())
    };

    let (mut f, mut data, mut pr) = map_cost(prior, op, b, cfg, &x)?;
    let mut status = SolveStatus::MaxIters;
    let mut iter = 0usize;
    loop {
        let g = map_grad(prior, op, b, cfg, &x)?;
        let gnorm = g.norm();
        record(&mut rows, iter, f, data, pr, gnorm, &x)?;
        if iter >= cfg.max_iters {
            break;
        }
        let mut x_next = x.clone();
        x_next.axpy(-gamma, &g)?;
        let (f_next, d_next, p_next) = map_cost(prior, op, b, cfg, &x_next)?;
        if !f_next.is_finite() {
            return Err(Error::NonFinite(format!("cost at iteration {}", iter + 1)));
        }
        if guard && f_next > f + 8.0 * f64::EPSILON * f.abs() {
            status = SolveStatus::DescentViolation;
            let g2 = map_grad(prior, op, b, cfg, &x_next)?;
            record(&mut rows, iter + 1, f_next, d_next, p_next, g2.norm(), &x_next)?;
            return Ok((x, SolveTrace { rows, status, gamma }));
        }
        let rel_change = (f_next - f).abs() / f.abs().max(1e-300);
        x = x_next;
        let prev_f = f;
        f = f_next;
        data = d_next;
        pr = p_next;
        iter += 1;
        // stopping rule: relative cost change below tolerance
        let _ = prev_f;
        if rel_change <= cfg.rel_tol {
            status = SolveStatus::Converged;
            let g2 = map_grad(prior, op, b, cfg, &x)?;
            record(&mut rows, iter, f, data, pr, g2.norm(), &x)?;
            break;
        }
    }
    Ok((x, SolveTrace { rows, status, gamma }))
}

/// Steepest-descent RED: x ← x − γ(Aᴴ(Ax−b)/η² + λ(x − D(x))). The f
/// column records the classical RED surrogate data + λ/2·⟨x, x − D(x)⟩;
/// no monotonicity is claimed.
pub fn red_sd(
    denoiser: &dyn Fn(&Tensor) -> Result<Tensor>,
    op: &dyn LinearOperator,
    b: &Tensor,
    cfg: &SolveConfig,
    lambda: f64,
) -> Result<(Tensor, SolveTrace)> {
    cfg.validate()?;
    let gamma = cfg.resolve_gamma()?;
    let mut x = initial_point(op, b, cfg)?;
    let mut rows = Vec::new();
    let mut status = SolveStatus::MaxIters;
    for iter in 0..=cfg.max_iters {
        let r = op.apply(&x)?.sub(b)?;
        let data = r.dot(&r)? / (2.0 * cfg.eta * cfg.eta);
        let residual = x.sub(&denoiser(&x)?)?;
        let pr = 0.5 * lambda * x.dot(&residual)?;
        let mut g = op.adjoint(&r)?.scale(1.0 / (cfg.eta * cfg.eta));
        g.axpy(lambda, &residual)?;
        let gnorm = g.norm();
        rows.push(TraceRow {
            iter,
            f: data + pr,
            data_term: data,
            prior_term: pr,
            grad_norm: gnorm,
            psnr: None,
        });
        if iter == cfg.max_iters {
            break;
        }
        let mut x_next = x.clone();
        x_next.axpy(-gamma, &g)?;
        if !x_next.is_finite() {
            return Err(Error::NonFinite(format!("RED iterate at {}", iter + 1)));
        }
        let step_rel = x_next.sub(&x)?.norm() / x.norm().max(1e-12);
        x = x_next;
        if step_rel <= cfg.rel_tol {
            status = SolveStatus::Converged;
            break;
        }
    }
    Ok((x, SolveTrace { rows, status, gamma }))
}

/// Plain score-PnP: the EPnP update with the non-conservative network's
/// output in place of H. No cost function exists; the f column records
/// the update norm.
pub fn score_pnp(
    net: &PlainScoreNet,
    op: &dyn LinearOperator,
    b: &Tensor,
    cfg: &SolveConfig,
) -> Result<(Tensor, SolveTrace)> {
    cfg.validate()?;
    let gamma = cfg.resolve_gamma()?;
    let mut x = initial_point(op, b, cfg)?;
    let mut rows = Vec::new();
    let mut status = SolveStatus::MaxIters;
    let mut g0_norm = None;
    for iter in 0..=cfg.max_iters {
        let r = op.apply(&x)?.sub(b)?;
        let data = r.dot(&r)? / (2.0 * cfg.eta * cfg.eta);
        let mut g = op.adjoint(&r)?.scale(1.0 / (cfg.eta * cfg.eta));
        g.axpy(1.0 / (cfg.sigma * cfg.sigma), &net.forward(&x)?)?;
        let gnorm = g.norm();
        let g0 = *g0_norm.get_or_insert(gnorm.max(1e-12));
        rows.push(TraceRow {
            iter,
            f: gnorm,
            data_term: data,
            prior_term: 0.0,
            grad_norm: gnorm,
            psnr: None,
        });
        if gnorm / g0 <= cfg.rel_tol {
            status = SolveStatus::Converged;
            break;
        }
        if iter == cfg.max_iters {
            break;
        }
        let mut x_next = x.clone();
        x_next.axpy(-gamma, &g)?;
        if !x_next.is_finite() {
            return Err(Error::NonFinite(format!("score-PnP iterate at {}", iter + 1)));
        }
        x = x_next;
    }
    Ok((x, SolveTrace { rows, status, gamma }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::IdentityOp;
    use crate::rng::Rng;

    fn quad_cfg(eta: f64, sigma: f64) -> SolveConfig {
        SolveConfig::new(eta, sigma, Gamma::Auto { l: 1.0 })
    }

    #[test]
    fn cost_decomposition_identity() {
        let op = IdentityOp::new(&[1, 4, 4]);
        let mut rng = Rng::from_seed(1);
        let b = rng.uniform_tensor(&[1, 4, 4], 0.0, 1.0);
        let x = rng.uniform_tensor(&[1, 4, 4], 0.0, 1.0);
        let cfg = quad_cfg(0.5, 0.7);
        let (f, d, p) = map_cost(&QuadraticPrior, &op, &b, &cfg, &x).unwrap();
        assert_eq!(f, d + p);
    }

    #[test]
    fn symmetric_quadratic_cost() {
        // A = I, b = 0, psi = 0.5||x||^2, eta = sigma = 1 -> f = ||x||^2
        let op = IdentityOp::new(&[1, 3, 3]);
        let b = Tensor::zeros(&[1, 3, 3]);
        let x = Rng::from_seed(2).gaussian(&[1, 3, 3], 1.0).unwrap();
        let cfg = quad_cfg(1.0, 1.0);
        let (f, _, _) = map_cost(&QuadraticPrior, &op, &b, &cfg, &x).unwrap();
        assert!((f - x.dot(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_cost_finite_differences() {
        let op = IdentityOp::new(&[1, 3, 3]);
        let mut rng = Rng::from_seed(3);
        let b = rng.uniform_tensor(&[1, 3, 3], 0.0, 1.0);
        let x = rng.uniform_tensor(&[1, 3, 3], 0.0, 1.0);
        let cfg = quad_cfg(0.3, 0.4);
        let g = map_grad(&QuadraticPrior, &op, &b, &cfg, &x).unwrap();
        let eps = 1e-6;
        for j in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fp = map_cost(&QuadraticPrior, &op, &b, &cfg, &xp).unwrap().0;
            let fm = map_cost(&QuadraticPrior, &op, &b, &cfg, &xm).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g.data()[j]).abs() / fd.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn quadratic_closed_form_minimizer() {
        // x* = (b/eta^2) / (1/eta^2 + 1/sigma^2) elementwise
        let op = IdentityOp::new(&[1, 4, 4]);
        let b = Rng::from_seed(4).uniform_tensor(&[1, 4, 4], 0.0, 1.0);
        let (eta, sigma) = (0.1, 0.2);
        let mut cfg = quad_cfg(eta, sigma);
        cfg.rel_tol = 1e-14;
        let (x, trace) = epnp_gd(&QuadraticPrior, &op, &b, &cfg, None).unwrap();
        let scale = (1.0 / (eta * eta)) / (1.0 / (eta * eta) + 1.0 / (sigma * sigma));
        let expect = b.scale(scale);
        let err = x.sub(&expect).unwrap().norm() / expect.norm();
        assert!(err < 1e-6, "closed-form mismatch {err}");
        assert_eq!(trace.status, SolveStatus::Converged);
        assert_eq!(trace.max_relative_increase(), 0.0);
    }

    #[test]
    fn auto_gamma_arithmetic() {
        let cfg = SolveConfig::new(0.01, 0.01, Gamma::Auto { l: 1.0 });
        assert_eq!(cfg.resolve_gamma().unwrap(), 5.0e-5);
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        // zero prior via quadratic at x=0, A = I, b = x
        let op = IdentityOp::new(&[1, 2, 2]);
        let b = Tensor::zeros(&[1, 2, 2]);
        let cfg = quad_cfg(1.0, 1.0);
        let g = map_grad(&QuadraticPrior, &op, &b, &cfg, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn descent_guard_fires_on_underestimated_l() {
        struct SteepQuadratic;
        impl Prior for SteepQuadratic {
            fn energy(&self, x: &Tensor) -> Result<f64> {
                Ok(50.0 * x.dot(x)?)
            }
            fn grad(&self, x: &Tensor) -> Result<Tensor> {
                Ok(x.scale(100.0)) // true Lipschitz constant 100
            }
        }
        let op = IdentityOp::new(&[1, 4, 4]);
        let b = Rng::from_seed(5).uniform_tensor(&[1, 4, 4], 0.5, 1.0);
        let cfg = SolveConfig {
            eta: 1.0,
            sigma: 0.1,
            gamma: Gamma::Auto { l: 0.0 }, // claims the prior is flat
            max_iters: 100,
            rel_tol: 1e-10,
            init: Init::Adjoint,
        };
        // true L_eq = 1 + 100/0.01 = 10001 but gamma resolves to 1
        let (_, trace) = epnp_gd(&SteepQuadratic, &op, &b, &cfg, None).unwrap();
        assert_eq!(trace.status, SolveStatus::DescentViolation);
    }

    #[test]
    fn red_identity_denoiser_is_least_squares() {
        let op = IdentityOp::new(&[1, 4, 4]);
        let b = Rng::from_seed(6).uniform_tensor(&[1, 4, 4], 0.0, 1.0);
        let mut cfg = SolveConfig::new(0.1, 0.1, Gamma::Fixed(5e-3));
        cfg.rel_tol = 1e-10;
        let id = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
        let (x, trace) = red_sd(&id, &op, &b, &cfg, 1.0).unwrap();
        // with D = I the prior term vanishes; minimizer is b
        let err = x.sub(&b).unwrap().norm() / b.norm();
        assert!(err < 1e-6, "err {err}");
        assert_eq!(trace.status, SolveStatus::Converged);
    }

    #[test]
    fn red_lambda_zero_matches_least_squares_descent() {
        let op = IdentityOp::new(&[1, 3, 3]);
        let b = Rng::from_seed(7).uniform_tensor(&[1, 3, 3], 0.0, 1.0);
        let mut cfg = SolveConfig::new(0.2, 0.2, Gamma::Fixed(1e-2));
        cfg.max_iters = 50;
        cfg.rel_tol = 1e-16;
        let noisy_denoiser = |x: &Tensor| -> Result<Tensor> { Ok(x.scale(0.5)) };
        let id = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
        let (x0, _) = red_sd(&noisy_denoiser, &op, &b, &cfg, 0.0).unwrap();
        let (x1, _) = red_sd(&id, &op, &b, &cfg, 0.0).unwrap();
        assert_eq!(x0.data(), x1.data(), "lambda = 0 must ignore the denoiser");
    }
}
