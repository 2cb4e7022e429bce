//! Benchmark harness: phantom × acceleration × algorithm grid with a
//! PSNR comparison table.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::PlainScoreNet;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::linop::{simulate, synthetic_coil_maps, variable_density_mask, LinearOperator, MriOp};
use crate::lipschitz::step_size;
use crate::phantom::{piecewise_phantom, psnr};
use crate::rng::Rng;
use crate::solver::{epnp_gd, red_sd, score_pnp, Gamma, Init, SolveConfig, SolveStatus};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    EpnpGd,
    RedSd,
    ScorePnp,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::EpnpGd => "epnp-gd",
            Algorithm::RedSd => "red-sd",
            Algorithm::ScorePnp => "score-pnp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_phantoms: usize,
    pub height: usize,
    pub width: usize,
    pub ncomponents: usize,
    pub ncoils: usize,
    pub accels: Vec<f64>,
    pub eta: f64,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub rel_tol: f64,
    pub max_iters: usize,
    /// RED regularization weight; defaults to 1/σ² when absent.
    #[serde(default)]
    pub lambda_red: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_phantoms: 10,
            height: 32,
            width: 32,
            ncomponents: 4,
            ncoils: 4,
            accels: vec![2.0, 6.0],
            eta: 0.01,
            seed: 0,
            algorithms: vec![Algorithm::EpnpGd, Algorithm::RedSd, Algorithm::ScorePnp],
            rel_tol: 1e-8,
            max_iters: 10_000,
            lambda_red: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseRow {
    pub phantom: usize,
    pub operator: String,
    pub accel: f64,
    pub algorithm: String,
    pub psnr: f64,
    pub psnr_init: f64,
    pub iters: usize,
    pub status: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub algorithm: String,
    pub accel: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<CaseRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Recompute the aggregate table from per-case rows (mean ± std per
/// algorithm × acceleration).
pub fn compute_aggregates(rows: &[CaseRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let key = (r.algorithm.clone(), r.accel);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|(alg, accel)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.algorithm == alg && r.accel == *accel)
                .map(|r| r.psnr)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Aggregate {
                algorithm: alg.clone(),
                accel: *accel,
                mean_psnr: mean,
                std_psnr: var.sqrt(),
                cases: vals.len(),
            }
        })
        .collect()
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "phantom,operator,accel,algorithm,psnr,psnr_init,iters,status,wall_seconds\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e},{},{},{:.6}\n",
                r.phantom, r.operator, r.accel, r.algorithm, r.psnr, r.psnr_init, r.iters,
                r.status, r.wall_seconds
            ));
        }
        s
    }

    /// Deterministic serialization: everything except wall-clock times.
    /// This is the representation the reproducibility contract covers.
    pub fn canonical_csv(&self) -> String {
        let mut s = String::from("phantom,operator,accel,algorithm,psnr,psnr_init,iters,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e},{},{}\n",
                r.phantom, r.operator, r.accel, r.algorithm, r.psnr, r.psnr_init, r.iters, r.status
            ));
        }
        for a in &self.aggregates {
            s.push_str(&format!(
                "# {} R={}: {:.17e} +- {:.17e} ({} cases)\n",
                a.algorithm, a.accel, a.mean_psnr, a.std_psnr, a.cases
            ));
        }
        s
    }

    /// Human-readable comparison table.
    pub fn table(&self) -> String {
        let mut s = String::from(format!("{:<12}", "Algorithm"));
        let mut accels: Vec<f64> = self.aggregates.iter().map(|a| a.accel).collect();
        accels.dedup();
        for a in &accels {
            s.push_str(&format!(" | Avg. PSNR R={a}x"));
        }
        s.push('\n');
        let mut algs: Vec<String> = self.aggregates.iter().map(|a| a.algorithm.clone()).collect();
        algs.dedup();
        for alg in algs {
            s.push_str(&format!("{alg:<12}"));
            for accel in &accels {
                if let Some(a) = self
                    .aggregates
                    .iter()
                    .find(|a| a.algorithm == alg && a.accel == *accel)
                {
                    s.push_str(&format!(" | {:6.2} +- {:<5.2}  ", a.mean_psnr, a.std_psnr));
                }
            }
            s.push('\n');
        }
        s
    }
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIters => "max_iters",
        SolveStatus::DescentViolation => "descent_violation",
    }
}

/// Run the full phantom suite. `lipschitz_l` is the certified constant of
/// the energy model's gradient network (with safety factor applied).
pub fn run_benchmark(
    model: &EnergyModel,
    lipschitz_l: f64,
    plain: Option<&PlainScoreNet>,
    suite: &SuiteConfig,
) -> Result<BenchReport> {
    if suite.n_phantoms == 0 {
        return Err(Error::InvalidArgument("empty suite".into()));
    }
    let (h, w) = (suite.height, suite.width);
    if model.config.in_channels != 2 || model.config.height != h || model.config.width != w {
        return Err(Error::ShapeMismatch(format!(
            "bench needs a 2-channel {h}x{w} model, got {}x{}x{}",
            model.config.in_channels, model.config.height, model.config.width
        )));
    }
    let sigma = model.sigma;
    let lambda = suite.lambda_red.unwrap_or(1.0 / (sigma * sigma));
    let csm = synthetic_coil_maps(h, w, suite.ncoils)?;

    let mut rows = Vec::new();
    for p in 0..suite.n_phantoms {
        let truth = piecewise_phantom(&[2, h, w], suite.ncomponents, suite.seed + p as u64)?.image;
        for (ai, &accel) in suite.accels.iter().enumerate() {
            let mask_seed = suite.seed + 1000 + (p * suite.accels.len() + ai) as u64;
            let mask = variable_density_mask(h, accel, mask_seed)?;
            let op = MriOp::new(&mask, csm.clone())?;
            let mut noise_rng = Rng::from_seed(mask_seed ^ 0x9e3779b9);
            let b = simulate(&op, &truth, suite.eta, &mut noise_rng)?;
            let x0 = op.adjoint(&b)?;
            let psnr_init = psnr(&x0, &truth, 1.0)?;

            for alg in &suite.algorithms {
                let start = Instant::now();
                let (x, status, iters) = match alg {
                    Algorithm::EpnpGd => {
                        let cfg = SolveConfig {
                            eta: suite.eta,
                            sigma,
                            gamma: Gamma::Auto { l: lipschitz_l },
                            max_iters: suite.max_iters,
                            rel_tol: suite.rel_tol,
                            init: Init::Adjoint,
                        };
                        let (x, t) = epnp_gd(model, &op, &b, &cfg, Some(&truth))?;
                        (x, t.status, t.iterations())
                    }
                    Algorithm::RedSd => {
                        let gamma = 1.0 / (1.0 / (suite.eta * suite.eta) + 2.0 * lambda);
                        let cfg = SolveConfig {
                            eta: suite.eta,
                            sigma,
                            gamma: Gamma::Fixed(gamma),
                            max_iters: suite.max_iters,
                            rel_tol: suite.rel_tol.max(1e-6),
                            init: Init::Adjoint,
                        };
                        let denoise: Box<dyn Fn(&Tensor) -> Result<Tensor>> = match plain {
                            Some(net) => Box::new(move |x: &Tensor| net.denoise(x)),
                            None => Box::new(move |x: &Tensor| model.denoise(x)),
                        };
                        let (x, t) = red_sd(&denoise, &op, &b, &cfg, lambda)?;
                        (x, t.status, t.iterations())
                    }
                    Algorithm::ScorePnp => {
                        let net = plain.ok_or_else(|| {
                            Error::InvalidArgument(
                                "score-pnp requested without a plain net checkpoint".into(),
                            )
                        })?;
                        // spectral-normalized net is a contraction: L <= 1
                        let gamma = step_size(1.0, suite.eta, sigma)?;
                        let cfg = SolveConfig {
                            eta: suite.eta,
                            sigma,
                            gamma: Gamma::Fixed(gamma),
                            max_iters: suite.max_iters,
                            rel_tol: suite.rel_tol.max(1e-6),
                            init: Init::Adjoint,
                        };
                        let (x, t) = score_pnp(net, &op, &b, &cfg)?;
                        (x, t.status, t.iterations())
                    }
                };
                rows.push(CaseRow {
                    phantom: p,
                    operator: "mri".into(),
                    accel,
                    algorithm: alg.name().into(),
                    psnr: psnr(&x, &truth, 1.0)?,
                    psnr_init,
                    iters,
                    status: status_name(status).into(),
                    wall_seconds: start.elapsed().as_secs_f64(),
                });
            }
        }
    }
    let aggregates = compute_aggregates(&rows);
    Ok(BenchReport { rows, aggregates })
}
