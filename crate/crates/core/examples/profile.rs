//! Rough timing of the hot paths: score/energy evaluation, the MRI
//! operator, and one full solve.

use std::time::Instant;

use epnp_core::energy::{EnergyModel, EnergyNetConfig, HeadKind};
use epnp_core::graph::Activation;
use epnp_core::linop::{
    simulate, synthetic_coil_maps, variable_density_mask, LinearOperator, MriOp,
};
use epnp_core::phantom::piecewise_phantom;
use epnp_core::rng::Rng;
use epnp_core::solver::{epnp_gd, Gamma, Init, SolveConfig};

fn main() {
    let config = EnergyNetConfig {
        num_layers: 2,
        channels: 8,
        kernel: 3,
        activation: Activation::Softplus,
        head: HeadKind::Sum,
        in_channels: 2,
        height: 32,
        width: 32,
        strides: vec![1, 1],
    };
    let model = EnergyModel::new(config, 0.1, &mut Rng::from_seed(1)).unwrap();
    let x = Rng::from_seed(2).uniform_tensor(&[2, 32, 32], 0.0, 1.0);

    let t = Instant::now();
    for _ in 0..100 {
        model.score(&x).unwrap();
    }
    println!("score: {:?}/call", t.elapsed() / 100);

    let t = Instant::now();
    for _ in 0..100 {
        model.energy(&x).unwrap();
    }
    println!("energy: {:?}/call", t.elapsed() / 100);

    let csm = synthetic_coil_maps(32, 32, 4).unwrap();
    let mask = variable_density_mask(32, 2.0, 3).unwrap();
    let op = MriOp::new(&mask, csm).unwrap();
    let t = Instant::now();
    for _ in 0..100 {
        op.adjoint(&op.apply(&x).unwrap()).unwrap();
    }
    println!("mri apply+adjoint: {:?}/call", t.elapsed() / 100);

    let truth = piecewise_phantom(&[2, 32, 32], 4, 5).unwrap().image;
    let b = simulate(&op, &truth, 0.01, &mut Rng::from_seed(6)).unwrap();
    let cfg = SolveConfig {
        eta: 0.01,
        sigma: 0.1,
        gamma: Gamma::Auto { l: 2.0 },
        max_iters: 1500,
        rel_tol: 1e-8,
        init: Init::Adjoint,
    };
    let t = Instant::now();
    let (_, trace) = epnp_gd(&model, &op, &b, &cfg, None).unwrap();
    println!(
        "solve: {:?}, {} iters, status {:?}",
        t.elapsed(),
        trace.iterations(),
        trace.status
    );
}
