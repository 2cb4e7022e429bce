//! `epnp`: train, certify, and run energy-based plug-and-play image
//! recovery from the command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 numerical failure (descent violation or non-finite values).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use epnp_core::baseline::{train_plain, PlainNetConfig, PlainScoreNet};
use epnp_core::bench::{run_benchmark, SuiteConfig};
use epnp_core::checkpoint::{self, LipschitzMeta, TrainingMeta};
use epnp_core::dsm::{train, Dataset, OptimizerKind, TrainConfig};
use epnp_core::energy::{EnergyModel, EnergyNetConfig, HeadKind};
use epnp_core::graph::Activation;
use epnp_core::io::{load_tensor, save_pgm16, save_tensor, Dtype};
use epnp_core::linop::{
    synthetic_coil_maps, variable_density_mask, CoilMaps, IdentityOp, LinearOperator, MaskOp,
    MriOp, SamplingMask,
};
use epnp_core::lipschitz::{estimate_l, probe_set, LipschitzConfig};
use epnp_core::phantom::{gaussian_data, piecewise_phantom};
use epnp_core::rng::Rng;
use epnp_core::solver::{epnp_gd, Gamma, Init, SolveConfig, SolveStatus};
use epnp_core::tensor::Tensor;
use epnp_core::verify::{run_verification, VerifyLevel};
use epnp_core::Error;

#[derive(Parser)]
#[command(name = "epnp", about = "energy-based plug-and-play image recovery", version)]
struct Cli {
    /// Base seed for all randomized stages.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Storage precision for tensors written to disk (compute is f64).
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    /// Worker threads; 1 guarantees bitwise reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl PrecisionArg {
    fn dtype(self) -> Dtype {
        match self {
            PrecisionArg::F32 => Dtype::F32,
            PrecisionArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an energy model and write a checkpoint.
    Train(TrainArgs),
    /// Estimate the Lipschitz constant of H and record it in the checkpoint.
    EstimateLipschitz(LipschitzArgs),
    /// Generate a variable-density Cartesian sampling mask.
    MakeMask(MakeMaskArgs),
    /// Solve an inverse problem from measurements with a trained prior.
    Reconstruct(ReconstructArgs),
    /// Run the property-check battery against a checkpoint.
    Verify(VerifyArgs),
    /// Run the phantom benchmark suite.
    Bench(BenchArgs),
    /// train -> estimate-lipschitz -> bench in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone, Serialize)]
struct TrainArgs {
    /// Output directory (checkpoint, history CSV, resolved config).
    #[arg(long)]
    out_dir: PathBuf,
    /// Training corpus: synthetic phantoms or an isotropic Gaussian.
    #[arg(long, value_enum, default_value_t = DatasetArg::Phantoms)]
    dataset: DatasetArg,
    /// Gaussian corpus std (dataset = gaussian).
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    #[arg(long, default_value_t = 16)]
    n_images: usize,
    #[arg(long, default_value_t = 1)]
    in_channels: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Softplus)]
    activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = HeadArg::Sum)]
    head: HeadArg,
    /// DSM noise level sigma.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DatasetArg {
    Phantoms,
    Gaussian,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ActivationArg {
    Relu,
    Softplus,
    Silu,
}

impl ActivationArg {
    fn core(self) -> Activation {
        match self {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Softplus => Activation::Softplus,
            ActivationArg::Silu => Activation::Silu,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum HeadArg {
    Dense,
    Sum,
}

#[derive(Args, Clone, Serialize)]
struct LipschitzArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    probes: usize,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1.1)]
    safety_factor: f64,
    /// Optional JSON report path (default: next to the checkpoint).
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize)]
struct MakeMaskArgs {
    /// Number of k-space lines (image height).
    #[arg(long)]
    size: usize,
    #[arg(long)]
    accel: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    operator: OperatorArg,
    /// Measurement tensor file (shape must match the operator range).
    #[arg(long)]
    measurements: PathBuf,
    /// Mask tensor: image-domain 0/1 for inpaint, HxW line mask for mri.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Coil sensitivities tensor [ncoils,2,H,W]; synthetic if omitted.
    #[arg(long)]
    csm: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    /// "auto" (from the recorded Lipschitz constant) or a float.
    #[arg(long, default_value = "auto")]
    gamma: String,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Adjoint)]
    init: InitArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OperatorArg {
    Denoise,
    Inpaint,
    Mri,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum InitArg {
    Adjoint,
    Zeros,
}

#[derive(Args, Clone, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = LevelArg::Quick)]
    level: LevelArg,
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Args, Clone, Serialize)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Suite config JSON; a default 10-phantom suite if omitted.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    phantoms: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Benchmark phantom count.
    #[arg(long, default_value_t = 10)]
    bench_phantoms: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads != 1 {
        eprintln!("note: --threads {} requested; compute runs single-threaded", cli.threads);
    }
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::DescentViolation { .. } | Error::NonFinite(_) | Error::Divergence(_) => 3,
                _ => 2,
            }
        }
    };
    ExitCode::from(code)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> epnp_core::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> epnp_core::Result<u8> {
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(cli, args),
        Cmd::EstimateLipschitz(args) => cmd_lipschitz(cli, args),
        Cmd::MakeMask(args) => cmd_make_mask(cli, args),
        Cmd::Reconstruct(args) => cmd_reconstruct(cli, args),
        Cmd::Verify(args) => cmd_verify(cli, args),
        Cmd::Bench(args) => cmd_bench(cli, args),
        Cmd::Pipeline(args) => cmd_pipeline(cli, args),
    }
}

fn build_dataset(args: &TrainArgs, seed: u64) -> epnp_core::Result<(Dataset, String)> {
    match args.dataset {
        DatasetArg::Gaussian => {
            let shape = [args.in_channels, args.height, args.width];
            let data = gaussian_data(args.tau, &shape, args.n_images, seed)?;
            Ok((data, format!("gaussian(tau={})", args.tau)))
        }
        DatasetArg::Phantoms => {
            let items = (0..args.n_images)
                .map(|i| {
                    Ok(piecewise_phantom(
                        &[args.in_channels, args.height, args.width],
                        4,
                        seed + i as u64,
                    )?
                    .image)
                })
                .collect::<epnp_core::Result<Vec<_>>>()?;
            Ok((Dataset::new(items)?, "phantoms".into()))
        }
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> epnp_core::Result<u8> {
    std::fs::create_dir_all(&args.out_dir)?;
    let config = EnergyNetConfig {
        num_layers: args.layers,
        channels: args.channels,
        kernel: args.kernel,
        activation: args.activation.core(),
        head: match args.head {
            HeadArg::Dense => HeadKind::Dense,
            HeadArg::Sum => HeadKind::Sum,
        },
        in_channels: args.in_channels,
        height: args.height,
        width: args.width,
        strides: vec![1; args.layers],
    };
    config.validate()?;
    let (dataset, dataset_name) = build_dataset(args, cli.seed)?;
    let mut model = EnergyModel::new(config, args.sigma, &mut Rng::from_seed(cli.seed ^ 1))?;
    let tcfg = TrainConfig {
        sigma: args.sigma,
        learning_rate: args.learning_rate,
        optimizer: OptimizerKind::Adam,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: cli.seed ^ 2,
    };
    let history = train(&mut model, &dataset, &tcfg)?;
    let final_loss = history.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    checkpoint::save_model(
        &args.out_dir.join("model.ckpt"),
        &model,
        Some(TrainingMeta {
            epochs: args.epochs,
            final_loss,
            seed: cli.seed,
            dataset: dataset_name,
        }),
        None,
        cli.precision.dtype(),
    )?;
    std::fs::write(
        args.out_dir.join("train_history.csv"),
        epnp_core::dsm::history_to_csv(&history),
    )?;
    write_json(&args.out_dir.join("config.json"), args)?;
    println!(
        "trained {} epochs, final loss {final_loss:.6e}, checkpoint {}",
        args.epochs,
        args.out_dir.join("model.ckpt").display()
    );
    Ok(0)
}

fn cmd_lipschitz(cli: &Cli, args: &LipschitzArgs) -> epnp_core::Result<u8> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let shape = ckpt.model.config.input_shape();
    let mut rng = Rng::from_seed(cli.seed ^ 3);
    let probes = probe_set(&[], &shape, ckpt.model.sigma, args.probes, &mut rng)?;
    let lcfg = LipschitzConfig {
        iters: args.iters,
        eps: args.eps,
        safety_factor: args.safety_factor,
        seed: cli.seed ^ 4,
    };
    let est = estimate_l(&ckpt.model, &probes, &lcfg)?;
    checkpoint::update_header(&args.checkpoint, |h| {
        h.lipschitz = Some(LipschitzMeta {
            lipschitz_l: est.l,
            method: "jacobian-power".into(),
            num_probes: est.num_probes,
            safety_factor: est.safety_factor,
        });
    })?;
    let report_path = args
        .out_report
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension("lipschitz.json"));
    write_json(&report_path, &est)?;
    println!("L = {:.6e} (safety {} applied), recorded in checkpoint", est.l, est.safety_factor);
    Ok(0)
}

fn cmd_make_mask(cli: &Cli, args: &MakeMaskArgs) -> epnp_core::Result<u8> {
    let mask = variable_density_mask(args.size, args.accel, cli.seed)?;
    save_tensor(&args.out, &mask.to_tensor(args.size), cli.precision.dtype())?;
    write_json(&args.out.with_extension("json"), &mask)?;
    println!(
        "mask: {} of {} lines (R={}), written to {}",
        mask.num_selected(),
        args.size,
        args.accel,
        args.out.display()
    );
    Ok(0)
}

fn cmd_reconstruct(cli: &Cli, args: &ReconstructArgs) -> epnp_core::Result<u8> {
    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let model = &ckpt.model;
    let [c, h, w] = model.config.input_shape();
    let b = load_tensor(&args.measurements)?;

    let op: Box<dyn LinearOperator> = match args.operator {
        OperatorArg::Denoise => Box::new(IdentityOp::new(&[c, h, w])),
        OperatorArg::Inpaint => {
            let path = args.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument("inpaint needs --mask (image-domain 0/1 tensor)".into())
            })?;
            Box::new(MaskOp::new(load_tensor(path)?)?)
        }
        OperatorArg::Mri => {
            if c != 2 {
                return Err(Error::InvalidArgument(format!(
                    "mri needs a 2-channel model, checkpoint has {c}"
                )));
            }
            let path = args.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument("mri needs --mask (HxW line mask tensor)".into())
            })?;
            let mask = SamplingMask::from_tensor(&load_tensor(path)?, 0.0, 0)?;
            let csm = match &args.csm {
                Some(p) => CoilMaps::from_tensor(&load_tensor(p)?)?,
                None => synthetic_coil_maps(h, w, args.coils)?,
            };
            Box::new(MriOp::new(&mask, csm)?)
        }
    };
    if b.shape() != op.range_shape() {
        return Err(Error::ShapeMismatch(format!(
            "measurements {:?} vs operator range {:?}",
            b.shape(),
            op.range_shape()
        )));
    }

    let gamma = if args.gamma == "auto" {
        let l = ckpt
            .header
            .lipschitz
            .as_ref()
            .map(|m| m.lipschitz_l)
            .ok_or_else(|| {
                Error::InvalidArgument(
                    "gamma=auto needs a recorded Lipschitz constant; run estimate-lipschitz".into(),
                )
            })?;
        Gamma::Auto { l }
    } else {
        let g: f64 = args
            .gamma
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad --gamma {}", args.gamma)))?;
        Gamma::Fixed(g)
    };
    let cfg = SolveConfig {
        eta: args.eta,
        sigma: model.sigma,
        gamma,
        max_iters: args.max_iters,
        rel_tol: args.tol,
        init: match args.init {
            InitArg::Adjoint => Init::Adjoint,
            InitArg::Zeros => Init::Zeros,
        },
    };
    let (x, trace) = epnp_gd(model, op.as_ref(), &b, &cfg, None)?;

    save_tensor(&args.out_dir.join("recon.tnsr"), &x, cli.precision.dtype())?;
    save_pgm16(&args.out_dir.join("recon.pgm"), &preview_image(&x)?)?;
    std::fs::write(args.out_dir.join("trace.csv"), trace.to_csv())?;
    write_json(&args.out_dir.join("config.json"), args)?;
    println!(
        "solve finished: status {:?}, {} iterations, gamma {:.3e}",
        trace.status,
        trace.iterations(),
        trace.gamma
    );
    if trace.status == SolveStatus::DescentViolation {
        eprintln!("descent violation: the recorded Lipschitz constant underestimates L");
        return Ok(3);
    }
    Ok(0)
}

/// Collapse a reconstruction to an HxW grayscale for PGM export:
/// [H,W] and [1,H,W] pass through, [2,H,W] becomes the complex magnitude.
fn preview_image(x: &Tensor) -> epnp_core::Result<Tensor> {
    match *x.shape() {
        [_, _] => Ok(x.clone()),
        [1, h, w] => Tensor::new(vec![h, w], x.data().to_vec()),
        [2, h, w] => {
            let n = h * w;
            let d = x.data();
            let mag = (0..n).map(|i| d[i].hypot(d[n + i])).collect();
            Tensor::new(vec![h, w], mag)
        }
        ref s => Err(Error::InvalidArgument(format!(
            "cannot render shape {s:?} as an image"
        ))),
    }
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> epnp_core::Result<u8> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let level = match args.level {
        LevelArg::Quick => VerifyLevel::Quick,
        LevelArg::Full => VerifyLevel::Full,
    };
    let report = run_verification(&ckpt.model, level, cli.seed ^ 5)?;
    print!("{}", report.summary());
    let path = args
        .out_report
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension("verify.json"));
    write_json(&path, &report)?;
    Ok(if report.passed { 0 } else { 1 })
}

fn load_suite(args: &BenchArgs, seed: u64) -> epnp_core::Result<SuiteConfig> {
    match &args.suite {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(SuiteConfig { seed, ..SuiteConfig::default() }),
    }
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> epnp_core::Result<u8> {
    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let l = ckpt
        .header
        .lipschitz
        .as_ref()
        .map(|m| m.lipschitz_l)
        .ok_or_else(|| {
            Error::InvalidArgument(
                "bench needs a recorded Lipschitz constant; run estimate-lipschitz".into(),
            )
        })?;
    let suite = load_suite(args, cli.seed)?;
    let plain = trained_plain_baseline(&ckpt.model, &suite)?;
    let report = run_benchmark(&ckpt.model, l, Some(&plain), &suite)?;

    write_json(&args.out_dir.join("suite.json"), &suite)?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    std::fs::write(args.out_dir.join("report.csv"), report.to_csv())?;
    std::fs::write(args.out_dir.join("report.canonical.csv"), report.canonical_csv())?;
    std::fs::write(args.out_dir.join("table.txt"), report.table())?;
    print!("{}", report.table());
    if report.rows.iter().any(|r| r.status == "descent_violation") {
        return Ok(3);
    }
    Ok(0)
}

/// The spectral-normalized baseline is retrained deterministically from
/// the suite seed; it is a comparison point, not a tracked artifact.
fn trained_plain_baseline(
    model: &EnergyModel,
    suite: &SuiteConfig,
) -> epnp_core::Result<PlainScoreNet> {
    let pcfg = PlainNetConfig {
        num_layers: 4,
        channels: 8,
        kernel: 3,
        in_channels: model.config.in_channels,
        height: suite.height,
        width: suite.width,
    };
    let mut plain = PlainScoreNet::new(pcfg, model.sigma, &mut Rng::from_seed(suite.seed ^ 6))?;
    let items = (0..suite.n_phantoms.max(8))
        .map(|i| {
            Ok(piecewise_phantom(
                &[model.config.in_channels, suite.height, suite.width],
                suite.ncomponents,
                suite.seed + 7000 + i as u64,
            )?
            .image)
        })
        .collect::<epnp_core::Result<Vec<_>>>()?;
    let tcfg = TrainConfig {
        sigma: model.sigma,
        learning_rate: 2e-3,
        optimizer: OptimizerKind::Adam,
        batch_size: 4,
        epochs: 6,
        seed: suite.seed ^ 7,
    };
    train_plain(&mut plain, &Dataset::new(items)?, &tcfg)?;
    Ok(plain)
}

fn cmd_pipeline(cli: &Cli, args: &PipelineArgs) -> epnp_core::Result<u8> {
    std::fs::create_dir_all(&args.out_dir)?;
    let stage = |name: &str, e: Error| Error::InvalidArgument(format!("stage {name}: {e}"));

    let train_args = TrainArgs {
        out_dir: args.out_dir.clone(),
        dataset: DatasetArg::Phantoms,
        tau: 0.3,
        n_images: args.phantoms,
        in_channels: 2,
        height: args.size,
        width: args.size,
        layers: 2,
        channels: 8,
        kernel: 3,
        activation: ActivationArg::Softplus,
        head: HeadArg::Sum,
        sigma: 0.1,
        learning_rate: 2e-3,
        batch_size: 4,
        epochs: args.epochs,
    };
    cmd_train(cli, &train_args).map_err(|e| stage("train", e))?;

    let ckpt_path = args.out_dir.join("model.ckpt");
    let lip_args = LipschitzArgs {
        checkpoint: ckpt_path.clone(),
        probes: 6,
        iters: 15,
        eps: 1e-4,
        safety_factor: 1.1,
        out_report: None,
    };
    cmd_lipschitz(cli, &lip_args).map_err(|e| stage("estimate-lipschitz", e))?;

    let bench_args = BenchArgs {
        checkpoint: ckpt_path,
        suite: None,
        out_dir: args.out_dir.join("bench"),
    };
    // a smaller default suite when requested
    let mut suite = SuiteConfig { seed: cli.seed, ..SuiteConfig::default() };
    suite.n_phantoms = args.bench_phantoms;
    suite.height = args.size;
    suite.width = args.size;
    let suite_path = args.out_dir.join("bench_suite.json");
    write_json(&suite_path, &suite).map_err(|e| stage("bench", e))?;
    let bench_args = BenchArgs { suite: Some(suite_path), ..bench_args };
    let code = cmd_bench(cli, &bench_args).map_err(|e| stage("bench", e))?;
    write_json(&args.out_dir.join("pipeline.json"), args)?;
    Ok(code)
}
