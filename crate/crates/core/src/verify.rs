//! Self-checking: a battery of runtime verification checks over a
//! trained model and the operator stack, with a machine-readable report.

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, IntegrationPath};
use crate::error::Result;
use crate::linop::{dot_test, synthetic_coil_maps, variable_density_mask, MriOp};
use crate::lipschitz::{estimate_l, step_size, LipschitzConfig};
use crate::rng::Rng;
use crate::solver::{epnp_gd, Gamma, Init, SolveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyLevel {
    Quick,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured quantity the threshold applies to.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {:<32} value={:.3e} threshold={:.3e} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold,
                c.detail
            ));
        }
        s.push_str(if self.passed { "all checks passed\n" } else { "FAILURES present\n" });
        s
    }
}

fn check(name: &str, value: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value.is_finite() && value <= threshold,
        value,
        threshold,
        detail,
    }
}

/// Run the verification battery against a model. `Quick` covers the
/// structural identities; `Full` adds the mutation power test and a
/// monotone smoke solve.
pub fn run_verification(
    model: &EnergyModel,
    level: VerifyLevel,
    seed: u64,
) -> Result<VerifyReport> {
    let mut rng = Rng::from_seed(seed);
    let shape = model.config.input_shape();
    let mut checks = Vec::new();

    // 1. score vs finite differences of the scalar energy
    {
        let x = rng.uniform_tensor(&shape, 0.0, 1.0);
        let h = model.score(&x)?;
        let eps = 1e-5;
        let n = x.numel();
        let stride = (n / 16).max(1);
        let mut worst = 0.0f64;
        for j in (0..n).step_by(stride) {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (model.energy(&xp)? - model.energy(&xm)?) / (2.0 * eps);
            worst = worst.max((fd - h.data()[j]).abs() / fd.abs().max(1.0));
        }
        checks.push(check(
            "score_matches_energy_gradient",
            worst,
            1e-4,
            "sampled coords, central differences".into(),
        ));
    }

    // 2. Jacobian symmetry of H
    {
        let x = rng.uniform_tensor(&shape, 0.0, 1.0);
        let asym = model.jacobian_symmetry(&x, 1e-4, 24)?;
        checks.push(check(
            "jacobian_symmetry",
            asym,
            1e-3,
            "max |J_ij - J_ji| / max |J_ij|".into(),
        ));
    }

    // 3. path independence of the line integral of H
    {
        let a = rng.uniform_tensor(&shape, 0.0, 1.0);
        let x = rng.uniform_tensor(&shape, 0.0, 1.0);
        let steps = if level == VerifyLevel::Full { 1024 } else { 256 };
        let straight = model.line_integral_energy(&a, &x, IntegrationPath::Straight, steps)?;
        let detour = model.line_integral_energy(&a, &x, IntegrationPath::TwoSegment, steps)?;
        let delta = model.energy(&x)? - model.energy(&a)?;
        let denom = delta.abs().max(1.0);
        let err = (straight - delta).abs().max((detour - delta).abs()) / denom;
        checks.push(check(
            "line_integral_path_independence",
            err,
            1e-3,
            format!("straight {straight:.6e}, detour {detour:.6e}, energy delta {delta:.6e}"),
        ));
    }

    // 4. operator adjoint dot-tests on a representative MRI operator
    {
        let h = shape[1].max(8);
        let mask = variable_density_mask(h, 2.0, seed)?;
        let csm = synthetic_coil_maps(h, h, 2)?;
        let op = MriOp::new(&mask, csm)?;
        let worst = dot_test(&op, &mut rng, 20)?;
        checks.push(check(
            "operator_adjoint_dot_test",
            worst,
            1e-10,
            format!("multicoil Fourier, {h}x{h}, R=2"),
        ));
    }

    // 5. step-size arithmetic against hand evaluation
    {
        let got = step_size(1.0, 0.01, 0.01)?;
        let err = (got - 5.0e-5).abs();
        checks.push(check(
            "step_size_arithmetic",
            err,
            0.0,
            format!("step_size(1, 0.01, 0.01) = {got:.17e}"),
        ));
    }

    if level == VerifyLevel::Full {
        // 6. mutation power: decoupled decoder weights must break symmetry
        {
            let mutant = model.decoupled_decoder_variant(0.6, seed ^ 0xdead);
            let x = rng.uniform_tensor(&shape, 0.0, 1.0);
            let asym = mutant.jacobian_symmetry(&x, 1e-4, 24)?;
            // inverted sense: the check passes when asymmetry is LARGE
            checks.push(CheckResult {
                name: "mutation_breaks_symmetry".into(),
                passed: asym > 1e-1,
                value: asym,
                threshold: 1e-1,
                detail: "decoupled transpose weights; value must exceed threshold".into(),
            });
        }

        // 7. monotone smoke solve on a denoising problem
        {
            let probes: Vec<_> = (0..4).map(|_| rng.uniform_tensor(&shape, 0.0, 1.0)).collect();
            let lcfg = LipschitzConfig { iters: 15, seed, ..Default::default() };
            let est = estimate_l(model, &probes, &lcfg)?;
            let op = crate::linop::IdentityOp::new(&shape);
            let truth = rng.uniform_tensor(&shape, 0.0, 1.0);
            let mut noise_rng = Rng::from_seed(seed ^ 0xbeef);
            let b = crate::linop::simulate(&op, &truth, 0.05, &mut noise_rng)?;
            let cfg = SolveConfig {
                eta: 0.05,
                sigma: model.sigma.max(0.05),
                gamma: Gamma::Auto { l: est.l },
                max_iters: 200,
                rel_tol: 1e-10,
                init: Init::Adjoint,
            };
            let (_, trace) = epnp_gd(model, &op, &b, &cfg, None)?;
            checks.push(check(
                "monotone_descent_smoke",
                trace.max_relative_increase(),
                0.0,
                format!("{} iterations, L = {:.3e}", trace.iterations(), est.l),
            ));
        }
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { level, seed, checks, passed })
}
