//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line. Shared trained fixtures are built lazily.

use std::sync::OnceLock;

use epnp_core::baseline::{train_plain, PlainNetConfig, PlainScoreNet};
use epnp_core::bench::{run_benchmark, Algorithm, SuiteConfig};
use epnp_core::dsm::{dsm_loss, perturb, train, Dataset, OptimizerKind, TrainConfig};
use epnp_core::energy::{EnergyModel, EnergyNetConfig, HeadKind, IntegrationPath};
use epnp_core::graph::Activation;
use epnp_core::linop::{
    dot_test, normalize, operator_norm, simulate, synthetic_coil_maps, variable_density_mask,
    CoilMaps, IdentityOp, LinearOperator, MaskOp, MriOp, SamplingMask,
};
use epnp_core::lipschitz::{estimate_l, probe_set, step_size, LipschitzConfig};
use epnp_core::phantom::{analytic_smoothed_score, gaussian_data, piecewise_phantom};
use epnp_core::rng::Rng;
use epnp_core::solver::{epnp_gd, Gamma, Init, QuadraticPrior, SolveConfig, SolveStatus};
use epnp_core::Tensor;

fn report(criterion: usize, passed: bool, detail: &str) {
    println!(
        "acceptance {criterion:2}: {} {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn small_softplus(h: usize, w: usize, in_channels: usize, seed: u64) -> EnergyModel {
    let config = EnergyNetConfig {
        num_layers: 2,
        channels: 8,
        kernel: 3,
        activation: Activation::Softplus,
        head: HeadKind::Sum,
        in_channels,
        height: h,
        width: w,
        strides: vec![1, 1],
    };
    EnergyModel::new(config, 0.1, &mut Rng::from_seed(seed)).unwrap()
}

/// Model trained on N(0, τ²I) data; the DSM oracle fixture.
fn gaussian_trained() -> &'static (EnergyModel, f64, f64) {
    static CELL: OnceLock<(EnergyModel, f64, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (tau, sigma) = (0.3, 0.1);
        let mut model = small_softplus(32, 32, 1, 101);
        model.sigma = sigma;
        let data = gaussian_data(tau, &[1, 32, 32], 128, 102).unwrap();
        let cfg = TrainConfig {
            sigma,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            epochs: 500,
            seed: 103,
        };
        let history = train(&mut model, &data, &cfg).unwrap();
        assert!(history.last().unwrap().mean_loss.is_finite());
        (model, tau, sigma)
    })
}

/// 2-channel model + certified L + spectrally normalized baseline net,
/// all trained on the piecewise phantom corpus.
struct MriFixture {
    model: EnergyModel,
    l: f64,
    plain: PlainScoreNet,
}

fn mri_trained() -> &'static MriFixture {
    static CELL: OnceLock<MriFixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let sigma = 0.1;
        let items: Vec<Tensor> = (0..48)
            .map(|i| piecewise_phantom(&[2, 32, 32], 4, 200 + i).unwrap().image)
            .collect();
        let data = Dataset::new(items.clone()).unwrap();
        let mut model = small_softplus(32, 32, 2, 201);
        model.sigma = sigma;
        let cfg = TrainConfig {
            sigma,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            epochs: 150,
            seed: 202,
        };
        train(&mut model, &data, &cfg).unwrap();

        let mut rng = Rng::from_seed(203);
        let probes = probe_set(&items, &[2, 32, 32], sigma, 6, &mut rng).unwrap();
        let lcfg = LipschitzConfig { iters: 15, seed: 204, ..Default::default() };
        let l = estimate_l(&model, &probes, &lcfg).unwrap().l;

        let pcfg = PlainNetConfig {
            num_layers: 4,
            channels: 8,
            kernel: 3,
            in_channels: 2,
            height: 32,
            width: 32,
        };
        let mut plain = PlainScoreNet::new(pcfg, sigma, &mut Rng::from_seed(205)).unwrap();
        let ptrain = TrainConfig { epochs: 6, ..cfg.clone() };
        train_plain(&mut plain, &data, &ptrain).unwrap();
        MriFixture { model, l, plain }
    })
}

fn bench_suite() -> SuiteConfig {
    SuiteConfig {
        n_phantoms: 10,
        height: 32,
        width: 32,
        ncomponents: 4,
        ncoils: 4,
        accels: vec![2.0, 6.0],
        eta: 0.01,
        seed: 300,
        algorithms: vec![Algorithm::EpnpGd, Algorithm::RedSd, Algorithm::ScorePnp],
        rel_tol: 1e-6,
        max_iters: 1500,
        lambda_red: None,
    }
}

#[test]
fn criterion_01_conservativity() {
    let model = small_softplus(8, 8, 1, 1);
    let mut rng = Rng::from_seed(2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rng.uniform_tensor(&[1, 8, 8], 0.0, 1.0);
        worst = worst.max(model.jacobian_symmetry(&x, 1e-4, 64).unwrap());
    }
    let mutant = model.decoupled_decoder_variant(0.6, 3);
    let x = rng.uniform_tensor(&[1, 8, 8], 0.0, 1.0);
    let broken = mutant.jacobian_symmetry(&x, 1e-4, 64).unwrap();
    report(
        1,
        worst <= 1e-3 && broken > 1e-1,
        &format!("jacobian symmetry {worst:.3e} <= 1e-3, decoupled mutation {broken:.3e} > 1e-1"),
    );
}

#[test]
fn criterion_02_score_is_energy_gradient() {
    let model = small_softplus(8, 8, 1, 4);
    let mut rng = Rng::from_seed(5);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rng.uniform_tensor(&[1, 8, 8], 0.0, 1.0);
        let h = model.score(&x).unwrap();
        for j in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (model.energy(&xp).unwrap() - model.energy(&xm).unwrap()) / (2.0 * eps);
            worst = worst.max((fd - h.data()[j]).abs() / fd.abs().max(1.0));
        }
    }
    report(2, worst <= 1e-5, &format!("max rel err {worst:.3e} <= 1e-5 over 10 points"));
}

#[test]
fn criterion_03_line_integral_consistency() {
    let (model, _, _) = gaussian_trained();
    let mut rng = Rng::from_seed(6);
    let a = rng.uniform_tensor(&[1, 32, 32], 0.0, 0.5);
    let x = rng.uniform_tensor(&[1, 32, 32], 0.0, 0.5);
    let delta = model.energy(&x).unwrap() - model.energy(&a).unwrap();
    let straight = model.line_integral_energy(&a, &x, IntegrationPath::Straight, 1024).unwrap();
    let detour = model.line_integral_energy(&a, &x, IntegrationPath::TwoSegment, 1024).unwrap();
    let denom = delta.abs().max(1.0);
    let err = (straight - delta).abs().max((detour - delta).abs()) / denom;
    report(
        3,
        err <= 1e-3,
        &format!("paths vs energy delta: rel err {err:.3e} <= 1e-3 at 1024 steps"),
    );
}

#[test]
fn criterion_04_dsm_gaussian_oracle() {
    let (model, tau, sigma) = gaussian_trained();
    let (tau, sigma) = (*tau, *sigma);
    // held-out noisy samples vs the closed-form smoothed score
    let mut rng = Rng::from_seed(7);
    let mut num = 0.0;
    let mut den = 0.0;
    for _ in 0..16 {
        let x = rng.gaussian(&[1, 32, 32], tau).unwrap();
        let (noisy, _) = perturb(&x, sigma, &mut rng).unwrap();
        let want = analytic_smoothed_score(&noisy, tau, sigma).unwrap();
        let got = model.score(&noisy).unwrap();
        num += got.sub(&want).unwrap().dot(&got.sub(&want).unwrap()).unwrap();
        den += want.dot(&want).unwrap();
    }
    let rel = (num / den).sqrt();

    // zero network: loss reduces to E||sigma z||^2 / n = sigma^2
    let mut zm = small_softplus(32, 32, 1, 8);
    for id in 0..zm.params().len() {
        let z = Tensor::zeros(zm.params().value(id).shape());
        *zm.params_mut().value_mut(id) = z;
    }
    let mut batch = Vec::new();
    let x0 = Tensor::zeros(&[1, 32, 32]);
    for _ in 0..64 {
        batch.push(perturb(&x0, sigma, &mut rng).unwrap());
    }
    let loss = dsm_loss(&zm, &batch).unwrap();
    let loss_rel = (loss - sigma * sigma).abs() / (sigma * sigma);
    report(
        4,
        rel <= 0.10 && loss_rel <= 0.02,
        &format!("trained H rel L2 {rel:.3e} <= 0.10, zero-net loss {loss:.4e} vs sigma^2 within {loss_rel:.3e}"),
    );
}

#[test]
fn criterion_05_step_size_rule() {
    let exact = step_size(1.0, 0.01, 0.01).unwrap() == 5.0e-5;
    let mut monotone = true;
    let grid = [0.003, 0.01, 0.03, 0.1, 0.3, 1.0];
    for w in grid.windows(2) {
        // gamma decreases in L, increases in eta and sigma
        monotone &= step_size(w[1], 0.1, 0.1).unwrap() < step_size(w[0], 0.1, 0.1).unwrap();
        monotone &= step_size(1.0, w[1], 0.1).unwrap() > step_size(1.0, w[0], 0.1).unwrap();
        monotone &= step_size(1.0, 0.1, w[1]).unwrap() > step_size(1.0, 0.1, w[0]).unwrap();
    }
    report(5, exact && monotone, "step_size(1, 0.01, 0.01) = 5.0e-5 exactly; monotone over grids");
}

#[test]
fn criterion_06_monotone_descent_mri() {
    let fx = mri_trained();
    let csm = synthetic_coil_maps(32, 32, 4).unwrap();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for p in 0..10u64 {
        let truth = piecewise_phantom(&[2, 32, 32], 4, 400 + p).unwrap().image;
        for (ri, accel) in [2.0, 6.0].into_iter().enumerate() {
            let mask = variable_density_mask(32, accel, 500 + p * 2 + ri as u64).unwrap();
            let op = MriOp::new(&mask, csm.clone()).unwrap();
            let mut nrng = Rng::from_seed(600 + p);
            let b = simulate(&op, &truth, 0.01, &mut nrng).unwrap();
            let cfg = SolveConfig {
                eta: 0.01,
                sigma: fx.model.sigma,
                gamma: Gamma::Auto { l: fx.l },
                max_iters: 1500,
                rel_tol: 1e-8,
                init: Init::Adjoint,
            };
            let (_, trace) = epnp_gd(&fx.model, &op, &b, &cfg, None).unwrap();
            assert_ne!(trace.status, SolveStatus::DescentViolation);
            worst = worst.max(trace.max_relative_increase());
            cases += 1;
        }
    }
    report(
        6,
        cases == 20 && worst == 0.0,
        &format!("max relative cost increase {worst:.3e} over {cases} solves (R in {{2,6}})"),
    );
}

#[test]
fn criterion_07_quadratic_oracle() {
    let op = IdentityOp::new(&[1, 8, 8]);
    let b = Rng::from_seed(9).uniform_tensor(&[1, 8, 8], 0.0, 1.0);
    let (eta, sigma) = (0.1, 0.2);
    let cfg = SolveConfig {
        eta,
        sigma,
        gamma: Gamma::Auto { l: 1.0 },
        max_iters: 20_000,
        rel_tol: 1e-14,
        init: Init::Adjoint,
    };
    let (x, _) = epnp_gd(&QuadraticPrior, &op, &b, &cfg, None).unwrap();
    let scale = (1.0 / (eta * eta)) / (1.0 / (eta * eta) + 1.0 / (sigma * sigma));
    let expect = b.scale(scale);
    let err = x.sub(&expect).unwrap().norm() / expect.norm();
    report(7, err <= 1e-6, &format!("closed-form minimizer rel err {err:.3e} <= 1e-6"));
}

#[test]
fn criterion_08_operators() {
    let mut rng = Rng::from_seed(10);

    let mask64 = variable_density_mask(64, 2.0, 11).unwrap();
    let lines = mask64.num_selected();
    let center_ok = (31..=33).all(|i| mask64.lines[i]);

    let csm = synthetic_coil_maps(16, 16, 3).unwrap();
    let mask = variable_density_mask(16, 2.0, 12).unwrap();
    let op = MriOp::new(&mask, csm).unwrap();
    let dt = dot_test(&op, &mut rng, 20).unwrap();
    let m = MaskOp::new(Tensor::new(vec![8], vec![1., 0., 1., 1., 0., 1., 1., 0.]).unwrap()).unwrap();
    let dt2 = dot_test(&m, &mut rng, 20).unwrap();

    let normed = normalize(op, 60, &mut rng).unwrap();
    let n = operator_norm(&normed, 60, &mut rng).unwrap();

    // full mask + flat single coil: unitary up to 1e-8
    let full = SamplingMask { lines: vec![true; 16], accel: 1.0, seed: 0 };
    let one_coil = CoilMaps::new(vec![epnp_core::fft::ComplexImage::new(
        Tensor::full(&[16, 16], 1.0),
        Tensor::zeros(&[16, 16]),
    )
    .unwrap()])
    .unwrap();
    let iso = MriOp::new(&full, one_coil).unwrap();
    let x = rng.gaussian(&[2, 16, 16], 1.0).unwrap();
    let iso_err = (iso.apply(&x).unwrap().norm() - x.norm()).abs() / x.norm();

    let passed = lines == 32
        && center_ok
        && dt <= 1e-10
        && dt2 <= 1e-10
        && (n - 1.0).abs() <= 1e-3
        && iso_err <= 1e-8;
    report(
        8,
        passed,
        &format!(
            "dot-tests {dt:.2e}/{dt2:.2e} <= 1e-10, normalized norm {n:.6}, isometry err {iso_err:.2e}, R=2 H=64 lines {lines} with center block"
        ),
    );
}

fn bench_report() -> &'static epnp_core::bench::BenchReport {
    static CELL: OnceLock<epnp_core::bench::BenchReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let fx = mri_trained();
        run_benchmark(&fx.model, fx.l, Some(&fx.plain), &bench_suite()).unwrap()
    })
}

#[test]
fn criterion_09_benchmark_psnr() {
    let report_data = bench_report();
    let r2: Vec<_> = report_data
        .rows
        .iter()
        .filter(|r| r.accel == 2.0 && r.algorithm == "epnp-gd")
        .collect();
    assert_eq!(r2.len(), 10);
    let mean_epnp = r2.iter().map(|r| r.psnr).sum::<f64>() / r2.len() as f64;
    let mean_init = r2.iter().map(|r| r.psnr_init).sum::<f64>() / r2.len() as f64;
    let all_terminate = report_data
        .rows
        .iter()
        .all(|r| r.status == "converged" || r.status == "max_iters");
    let no_violation = report_data.rows.iter().all(|r| r.status != "descent_violation");
    println!("{}", report_data.table());
    report(
        9,
        mean_epnp >= mean_init + 3.0 && all_terminate && no_violation,
        &format!(
            "R=2 mean PSNR {mean_epnp:.2} dB vs adjoint init {mean_init:.2} dB (gain {:.2} >= 3), all algorithms terminated",
            mean_epnp - mean_init
        ),
    );
}

#[test]
fn criterion_10_benchmark_determinism() {
    let first = bench_report().canonical_csv();
    let fx = mri_trained();
    let again = run_benchmark(&fx.model, fx.l, Some(&fx.plain), &bench_suite()).unwrap();
    let passed = first == again.canonical_csv();
    report(10, passed, "identical suite config + seed reproduces the report bitwise");
}
