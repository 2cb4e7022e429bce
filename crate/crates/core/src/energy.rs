//! Scalar energy network Ψ(x), its explicit shared-weight gradient
//! network H(x) = ∇Ψ(x), and the conservativity verification suite.
//!
//! H is not produced by runtime autodiff: it is a second graph built
//! mechanically as the adjoint chain (headᵀ → φ′ gate → convᵀ, layer by
//! layer) over the *same* parameter blocks as Ψ. Weight sharing is what
//! makes the score a conservative vector field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, BlockId, Graph, NodeId, Op, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the final feature map is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One linear layer flattening the final features (fixed input size).
    Dense,
    /// 1×1 conv to one channel followed by a spatial sum (resolution-agnostic).
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyNetConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub head: HeadKind,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-layer stride; length must equal `num_layers`.
    pub strides: Vec<usize>,
}

impl Default for EnergyNetConfig {
    fn default() -> Self {
        Self {
            num_layers: 5,
            channels: 64,
            kernel: 3,
            activation: Activation::Relu,
            head: HeadKind::Dense,
            in_channels: 1,
            height: 32,
            width: 32,
            strides: vec![1; 5],
        }
    }
}

impl EnergyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        if self.strides.len() != self.num_layers {
            return Err(Error::InvalidArgument(format!(
                "strides has {} entries for {} layers",
                self.strides.len(),
                self.num_layers
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("zero stride".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    /// Shape of the feature map after each layer.
    fn layer_shapes(&self) -> Vec<[usize; 3]> {
        let pad = self.kernel / 2;
        let mut shapes = vec![self.input_shape()];
        for l in 0..self.num_layers {
            let [_, h, w] = shapes[l];
            let s = self.strides[l];
            shapes.push([
                self.channels,
                (h + 2 * pad - self.kernel) / s + 1,
                (w + 2 * pad - self.kernel) / s + 1,
            ]);
        }
        shapes
    }
}

/// Parameter block layout of one energy network.
#[derive(Debug, Clone)]
pub struct EnergyNetBlocks {
    pub conv_w: Vec<BlockId>,
    pub conv_b: Vec<BlockId>,
    pub head_w: BlockId,
    pub head_b: BlockId,
}

impl EnergyNetBlocks {
    /// Blocks in checkpoint declaration order.
    pub fn ordered(&self) -> Vec<BlockId> {
        let mut ids = Vec::new();
        for (&w, &b) in self.conv_w.iter().zip(&self.conv_b) {
            ids.push(w);
            ids.push(b);
        }
        ids.push(self.head_w);
        ids.push(self.head_b);
        ids
    }
}

/// The trained prior: config, shared parameter storage, the two graphs,
/// and the training noise level σ.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub config: EnergyNetConfig,
    pub sigma: f64,
    params: ParamStore,
    blocks: EnergyNetBlocks,
    psi_graph: Graph,
    psi_out: NodeId,
    h_graph: Graph,
    h_out: NodeId,
}

fn init_params(config: &EnergyNetConfig, rng: &mut Rng) -> Result<(ParamStore, EnergyNetBlocks)> {
    let mut params = ParamStore::new();
    let shapes = config.layer_shapes();
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    for l in 0..config.num_layers {
        let cin = shapes[l][0];
        let fan_in = cin * config.kernel * config.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        conv_w.push(params.add(
            format!("conv{l}.w"),
            rng.gaussian(&[config.channels, cin, config.kernel, config.kernel], std)?,
        ));
        conv_b.push(params.add(format!("conv{l}.b"), Tensor::zeros(&[config.channels])));
    }
    let last = shapes[config.num_layers];
    let (head_w, head_b) = match config.head {
        HeadKind::Dense => {
            let feat = last[0] * last[1] * last[2];
            let std = 1.0 / (feat as f64).sqrt();
            (
                params.add("head.w", rng.gaussian(&[1, feat], std)?),
                params.add("head.b", Tensor::zeros(&[1])),
            )
        }
        HeadKind::Sum => {
            let std = 1.0 / (last[0] as f64).sqrt();
            (
                params.add("head.w", rng.gaussian(&[1, last[0], 1, 1], std)?),
                params.add("head.b", Tensor::zeros(&[1])),
            )
        }
    };
    Ok((
        params,
        EnergyNetBlocks { conv_w, conv_b, head_w, head_b },
    ))
}

/// Build the scalar-energy graph. Returns (graph, output node).
fn build_psi_graph(config: &EnergyNetConfig, blocks: &EnergyNetBlocks) -> (Graph, NodeId) {
    let pad = config.kernel / 2;
    let shapes = config.layer_shapes();
    let mut g = Graph::new();
    let mut a = g.push(Op::Input(0), vec![]);
    for l in 0..config.num_layers {
        let z = g.push(
            Op::Conv2d {
                w: blocks.conv_w[l],
                bias: Some(blocks.conv_b[l]),
                stride: config.strides[l],
                pad,
            },
            vec![a],
        );
        a = g.push(Op::Pointwise(config.activation), vec![z]);
    }
    let last = shapes[config.num_layers];
    let out = match config.head {
        HeadKind::Dense => {
            let flat = g.push(Op::Reshape(vec![last[0] * last[1] * last[2]]), vec![a]);
            g.push(
                Op::Linear { w: blocks.head_w, bias: Some(blocks.head_b) },
                vec![flat],
            )
        }
        HeadKind::Sum => {
            let c = g.push(
                Op::Conv2d { w: blocks.head_w, bias: None, stride: 1, pad: 0 },
                vec![a],
            );
            let s = g.push(Op::Sum, vec![c]);
            let bias = g.push(Op::Param(blocks.head_b), vec![]);
            g.push(Op::Add, vec![s, bias])
        }
    };
    (g, out)
}

/// Build the explicit gradient network H = ∇Ψ as the adjoint chain over
/// shared blocks. `decoder_w` lets the verification suite decouple the
/// transpose-side weights to prove the symmetry check has power; normal
/// construction passes the same ids as the encoder.
fn build_h_graph(
    config: &EnergyNetConfig,
    blocks: &EnergyNetBlocks,
    decoder_w: &[BlockId],
    decoder_head_w: BlockId,
) -> (Graph, NodeId) {
    let pad = config.kernel / 2;
    let shapes = config.layer_shapes();
    let mut g = Graph::new();
    let x = g.push(Op::Input(0), vec![]);

    // encoder recomputation: pre-activations gate the adjoint chain
    let mut pre = Vec::with_capacity(config.num_layers);
    let mut a = x;
    for l in 0..config.num_layers {
        let z = g.push(
            Op::Conv2d {
                w: blocks.conv_w[l],
                bias: Some(blocks.conv_b[l]),
                stride: config.strides[l],
                pad,
            },
            vec![a],
        );
        pre.push(z);
        a = g.push(Op::Pointwise(config.activation), vec![z]);
    }

    let last = shapes[config.num_layers];
    // seed of the chain: gradient of the head w.r.t. the last feature map
    let mut u = match config.head {
        HeadKind::Dense => {
            let p = g.push(Op::Param(decoder_head_w), vec![]);
            g.push(Op::Reshape(vec![last[0], last[1], last[2]]), vec![p])
        }
        HeadKind::Sum => {
            let ones = g.push(Op::Const(Tensor::full(&[1, last[1], last[2]], 1.0)), vec![]);
            g.push(
                Op::Conv2dTranspose {
                    w: decoder_head_w,
                    stride: 1,
                    pad: 0,
                    out_shape: last,
                },
                vec![ones],
            )
        }
    };
    for l in (0..config.num_layers).rev() {
        let gate = g.push(Op::PointwiseDeriv(config.activation), vec![pre[l]]);
        let gated = g.push(Op::Mul, vec![u, gate]);
        u = g.push(
            Op::Conv2dTranspose {
                w: decoder_w[l],
                stride: config.strides[l],
                pad,
                out_shape: shapes[l],
            },
            vec![gated],
        );
    }
    (g, u)
}

impl EnergyModel {
    /// Fresh randomly initialized model.
    pub fn new(config: EnergyNetConfig, sigma: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
        }
        let (params, blocks) = init_params(&config, rng)?;
        Ok(Self::assemble(config, sigma, params, blocks))
    }

    pub(crate) fn assemble(
        config: EnergyNetConfig,
        sigma: f64,
        params: ParamStore,
        blocks: EnergyNetBlocks,
    ) -> Self {
        let (psi_graph, psi_out) = build_psi_graph(&config, &blocks);
        let (h_graph, h_out) =
            build_h_graph(&config, &blocks, &blocks.conv_w, blocks.head_w);
        Self { config, sigma, params, blocks, psi_graph, psi_out, h_graph, h_out }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &EnergyNetBlocks {
        &self.blocks
    }

    /// The gradient-network graph and its output node; the training loop
    /// backpropagates through this graph directly.
    pub fn h_graph(&self) -> (&Graph, NodeId) {
        (&self.h_graph, self.h_out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.config.input_shape();
        if x.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Scalar energy Ψ(x).
    pub fn energy(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let eval = self.psi_graph.forward(&self.params, &[x])?;
        Ok(eval.value(self.psi_out).data()[0])
    }

    /// H(x) = ∇Ψ(x), same shape as x.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let eval = self.h_graph.forward(&self.params, &[x])?;
        Ok(eval.value(self.h_out).clone())
    }

    /// x̃ − H(x̃): the one-step denoiser implied by DSM training.
    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        x.sub(&self.score(x)?)
    }

    /// Finite-difference Jacobian symmetry check. Builds J over a sampled
    /// coordinate subset (full Jacobian when the input is small) and
    /// returns max|J_ij − J_ji| / max|J_ij|.
    pub fn jacobian_symmetry(&self, x: &Tensor, eps: f64, max_coords: usize) -> Result<f64> {
        self.check_input(x)?;
        let n = x.numel();
        let stride = (n / max_coords).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut cols = Vec::with_capacity(coords.len());
        for &j in &coords {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let col = self.score(&xp)?.sub(&self.score(&xm)?)?.scale(1.0 / (2.0 * eps));
            cols.push(col);
        }
        let mut max_abs = 0.0f64;
        let mut max_asym = 0.0f64;
        for (cj, &j) in cols.iter().zip(&coords) {
            for (ci, &i) in cols.iter().zip(&coords) {
                let jij = cj.data()[i];
                let jji = ci.data()[j];
                max_abs = max_abs.max(jij.abs());
                max_asym = max_asym.max((jij - jji).abs());
            }
        }
        if max_abs == 0.0 {
            return Ok(0.0);
        }
        Ok(max_asym / max_abs)
    }

    /// Trapezoid estimate of ∫_C H(z)·dz between `a` and `x`. Since H is
    /// conservative this must equal Ψ(x) − Ψ(a) for any path.
    pub fn line_integral_energy(
        &self,
        a: &Tensor,
        x: &Tensor,
        path: IntegrationPath,
        steps: usize,
    ) -> Result<f64> {
        self.check_input(a)?;
        self.check_input(x)?;
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("steps {steps} too small")));
        }
        match path {
            IntegrationPath::Straight => self.segment_integral(a, x, steps),
            IntegrationPath::TwoSegment => {
                // detour via an offset midpoint; offset is a fixed
                // deterministic pattern scaled by the endpoint distance
                let mut mid = a.add(x)?.scale(0.5);
                let dist = x.sub(a)?.norm();
                let scale = 0.1 * dist / (mid.numel() as f64).sqrt();
                for (i, v) in mid.data_mut().iter_mut().enumerate() {
                    let dir = if i % 2 == 0 { 1.0 } else { -1.0 };
                    *v += scale * dir;
                }
                let half = (steps / 2).max(2);
                Ok(self.segment_integral(a, &mid, half)? + self.segment_integral(&mid, x, half)?)
            }
        }
    }

    fn segment_integral(&self, a: &Tensor, b: &Tensor, steps: usize) -> Result<f64> {
        let dir = b.sub(a)?;
        let mut acc = 0.0;
        let mut prev = self.score(a)?.dot(&dir)?;
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            let mut z = a.clone();
            z.axpy(t, &dir)?;
            let cur = self.score(&z)?.dot(&dir)?;
            acc += 0.5 * (prev + cur) / steps as f64;
            prev = cur;
        }
        Ok(acc)
    }

    /// Diagnostic variant whose gradient network uses independently
    /// perturbed copies of the transpose-side weights. Breaks the
    /// conservativity guarantee on purpose so the symmetry check can be
    /// shown to have power.
    pub fn decoupled_decoder_variant(&self, rel_perturb: f64, seed: u64) -> EnergyModel {
        let mut clone = self.clone();
        let mut rng = Rng::from_seed(seed);
        let mut dec_w = Vec::new();
        for &w in &self.blocks.conv_w {
            let v = self.params.value(w);
            let rms = v.norm() / (v.numel() as f64).sqrt();
            let noise = rng.gaussian(v.shape(), rel_perturb * rms).unwrap();
            let perturbed = v.add(&noise).unwrap();
            dec_w.push(clone.params.add("decoupled.w", perturbed));
        }
        let (h_graph, h_out) =
            build_h_graph(&self.config, &self.blocks, &dec_w, self.blocks.head_w);
        clone.h_graph = h_graph;
        clone.h_out = h_out;
        clone
    }
}

/// Path choice for [`EnergyModel::line_integral_energy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationPath {
    Straight,
    TwoSegment,
}

/// k×k average pooling with stride k (the downsampling operator P).
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let [c, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool2d needs [C,H,W], got {other:?}"
            )))
        }
    };
    if h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "pool size {k} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let inv = 1.0 / (k * k) as f64;
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += x.data()[(ci * h + y * k + dy) * w + xo * k + dx];
                    }
                }
                out.data_mut()[(ci * oh + y) * ow + xo] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`avg_pool2d`] (Pᵀ, nearest-neighbor spreading).
pub fn avg_pool2d_adjoint(y: &Tensor, k: usize) -> Result<Tensor> {
    let [c, oh, ow] = match y.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool2d_adjoint needs [C,H,W], got {other:?}"
            )))
        }
    };
    let (h, w) = (oh * k, ow * k);
    let mut out = Tensor::zeros(&[c, h, w]);
    let inv = 1.0 / (k * k) as f64;
    for ci in 0..c {
        for yy in 0..oh {
            for xo in 0..ow {
                let g = y.data()[(ci * oh + yy) * ow + xo] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        out.data_mut()[(ci * h + yy * k + dy) * w + xo * k + dx] = g;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(act: Activation, head: HeadKind) -> EnergyNetConfig {
        EnergyNetConfig {
            num_layers: 2,
            channels: 4,
            kernel: 3,
            activation: act,
            head,
            in_channels: 1,
            height: 6,
            width: 6,
            strides: vec![1, 1],
        }
    }

    #[test]
    fn zero_network_energy_is_head_bias() {
        let mut rng = Rng::from_seed(1);
        let mut m = EnergyModel::new(small_config(Activation::Relu, HeadKind::Dense), 0.1, &mut rng)
            .unwrap();
        for id in 0..m.params().len() {
            let z = Tensor::zeros(m.params().value(id).shape());
            *m.params_mut().value_mut(id) = z;
        }
        let beta = 1.25;
        let head_b = m.blocks().head_b;
        m.params_mut().value_mut(head_b).data_mut()[0] = beta;
        let x = Rng::from_seed(2).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        assert_eq!(m.energy(&x).unwrap(), beta);
        let h = m.score(&x).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let d = m.denoise(&x).unwrap();
        assert_eq!(d.data(), x.data());
    }

    #[test]
    fn energy_finite_on_random_input() {
        let mut rng = Rng::from_seed(3);
        let m = EnergyModel::new(small_config(Activation::Relu, HeadKind::Dense), 0.1, &mut rng)
            .unwrap();
        let x = Rng::from_seed(4).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        assert!(m.energy(&x).unwrap().is_finite());
    }

    #[test]
    fn one_layer_linear_toy_hand_check() {
        // identity-free check: phi = softplus but with weights that keep us in
        // a hand-computable regime is messy; instead use a 1-layer net with a
        // 1x1 kernel and sum head so psi = sum(w * x * gate) is directly
        // computable for positive inputs under relu.
        let config = EnergyNetConfig {
            num_layers: 1,
            channels: 1,
            kernel: 1,
            activation: Activation::Relu,
            head: HeadKind::Sum,
            in_channels: 1,
            height: 2,
            width: 2,
            strides: vec![1],
        };
        let mut rng = Rng::from_seed(5);
        let mut m = EnergyModel::new(config, 0.1, &mut rng).unwrap();
        let b = m.blocks().clone();
        m.params_mut().value_mut(b.conv_w[0]).data_mut()[0] = 2.0;
        m.params_mut().value_mut(b.conv_b[0]).data_mut()[0] = 0.0;
        m.params_mut().value_mut(b.head_w).data_mut()[0] = 1.0;
        m.params_mut().value_mut(b.head_b).data_mut()[0] = 0.0;
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // psi = sum(relu(2x)) = 2 * 10 = 20
        assert_eq!(m.energy(&x).unwrap(), 20.0);
        // H = 2 * relu'(2x) * 1 = 2 everywhere (all inputs positive)
        assert_eq!(m.score(&x).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    fn score_vs_fd(m: &EnergyModel, x: &Tensor, eps: f64) -> f64 {
        let h = m.score(x).unwrap();
        let mut max_rel = 0.0f64;
        let scale = h.norm() / (h.numel() as f64).sqrt();
        for j in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (m.energy(&xp).unwrap() - m.energy(&xm).unwrap()) / (2.0 * eps);
            max_rel = max_rel.max((fd - h.data()[j]).abs() / scale.max(1e-10));
        }
        max_rel
    }

    #[test]
    fn score_matches_energy_finite_differences() {
        for head in [HeadKind::Dense, HeadKind::Sum] {
            let mut rng = Rng::from_seed(6);
            let m = EnergyModel::new(small_config(Activation::Softplus, head), 0.1, &mut rng)
                .unwrap();
            let x = Rng::from_seed(7).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
            let err = score_vs_fd(&m, &x, 1e-5);
            assert!(err < 1e-5, "head {head:?}: rel err {err}");
        }
    }

    #[test]
    fn score_matches_fd_with_stride2() {
        let config = EnergyNetConfig {
            num_layers: 2,
            channels: 3,
            kernel: 3,
            activation: Activation::Silu,
            head: HeadKind::Dense,
            in_channels: 1,
            height: 8,
            width: 8,
            strides: vec![2, 1],
        };
        let mut rng = Rng::from_seed(8);
        let m = EnergyModel::new(config, 0.1, &mut rng).unwrap();
        let x = Rng::from_seed(9).uniform_tensor(&[1, 8, 8], 0.0, 1.0);
        let err = score_vs_fd(&m, &x, 1e-5);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn weight_sharing_single_storage() {
        let mut rng = Rng::from_seed(10);
        let mut m = EnergyModel::new(small_config(Activation::Softplus, HeadKind::Dense), 0.1, &mut rng)
            .unwrap();
        let x = Rng::from_seed(11).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        let e0 = m.energy(&x).unwrap();
        let s0 = m.score(&x).unwrap();
        let w0 = m.blocks().conv_w[0];
        m.params_mut().value_mut(w0).data_mut()[0] += 0.3;
        let e1 = m.energy(&x).unwrap();
        let s1 = m.score(&x).unwrap();
        assert!(e0 != e1, "energy unchanged by weight mutation");
        assert!(s0.data() != s1.data(), "score unchanged by weight mutation");
    }

    #[test]
    fn jacobian_symmetry_and_mutation() {
        let mut rng = Rng::from_seed(12);
        let m = EnergyModel::new(small_config(Activation::Softplus, HeadKind::Dense), 0.1, &mut rng)
            .unwrap();
        let x = Rng::from_seed(13).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        let ratio = m.jacobian_symmetry(&x, 1e-5, 64).unwrap();
        assert!(ratio < 1e-3, "symmetry ratio {ratio}");
        let bad = m.decoupled_decoder_variant(0.5, 99);
        let bad_ratio = bad.jacobian_symmetry(&x, 1e-5, 64).unwrap();
        assert!(bad_ratio > 1e-1, "mutated ratio only {bad_ratio}");
    }

    #[test]
    fn line_integral_small_steps_rejected() {
        let mut rng = Rng::from_seed(14);
        let m = EnergyModel::new(small_config(Activation::Softplus, HeadKind::Dense), 0.1, &mut rng)
            .unwrap();
        let a = Tensor::zeros(&[1, 6, 6]);
        let x = Tensor::full(&[1, 6, 6], 0.5);
        assert!(m.line_integral_energy(&a, &x, IntegrationPath::Straight, 1).is_err());
    }

    #[test]
    fn line_integral_matches_energy_difference() {
        let mut rng = Rng::from_seed(15);
        let m = EnergyModel::new(small_config(Activation::Softplus, HeadKind::Sum), 0.1, &mut rng)
            .unwrap();
        let a = Rng::from_seed(16).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        let x = Rng::from_seed(17).uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        let want = m.energy(&x).unwrap() - m.energy(&a).unwrap();
        let straight = m
            .line_integral_energy(&a, &x, IntegrationPath::Straight, 1024)
            .unwrap();
        let detour = m
            .line_integral_energy(&a, &x, IntegrationPath::TwoSegment, 1024)
            .unwrap();
        let denom = want.abs().max(1e-12);
        assert!((straight - want).abs() / denom < 1e-3, "straight {straight} vs {want}");
        assert!((detour - want).abs() / denom < 1e-3, "detour {detour} vs {want}");
        assert!((straight - detour).abs() / denom < 1e-3);
    }

    #[test]
    fn avg_pool_dot_test_and_values() {
        let x = Tensor::new(
            vec![1, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let p = avg_pool2d(&x, 2).unwrap();
        assert_eq!(p.data(), &[2.5]);
        let mut rng = Rng::from_seed(18);
        let a = rng.gaussian(&[2, 4, 4], 1.0).unwrap();
        let y = rng.gaussian(&[2, 2, 2], 1.0).unwrap();
        let lhs = avg_pool2d(&a, 2).unwrap().dot(&y).unwrap();
        let rhs = a.dot(&avg_pool2d_adjoint(&y, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
