//! Plain (non-conservative) score network baseline with per-layer
//! spectral normalization, trained with the same noise-prediction loss
//! as the energy model.

use serde::{Deserialize, Serialize};

use crate::dsm::{perturb, Dataset, OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{conv2d_forward, conv2d_transpose_forward, Activation, BlockId, Graph, NodeId, Op, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlainNetConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for PlainNetConfig {
    fn default() -> Self {
        Self { num_layers: 10, channels: 64, kernel: 3, in_channels: 1, height: 32, width: 32 }
    }
}

/// Free-form CNN noise estimator N(x): conv/ReLU chain, linear final
/// conv back to the input channel count.
#[derive(Debug, Clone)]
pub struct PlainScoreNet {
    pub config: PlainNetConfig,
    pub sigma: f64,
    params: ParamStore,
    conv_w: Vec<BlockId>,
    conv_b: Vec<BlockId>,
    graph: Graph,
    out: NodeId,
}

impl PlainScoreNet {
    pub fn new(config: PlainNetConfig, sigma: f64, rng: &mut Rng) -> Result<Self> {
        if config.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if config.num_layers < 2 {
            return Err(Error::InvalidArgument("need at least two layers".into()));
        }
        let mut params = ParamStore::new();
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for l in 0..config.num_layers {
            let cin = if l == 0 { config.in_channels } else { config.channels };
            let cout = if l == config.num_layers - 1 {
                config.in_channels
            } else {
                config.channels
            };
            let fan_in = cin * config.kernel * config.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            conv_w.push(params.add(
                format!("plain{l}.w"),
                rng.gaussian(&[cout, cin, config.kernel, config.kernel], std)?,
            ));
            conv_b.push(params.add(format!("plain{l}.b"), Tensor::zeros(&[cout])));
        }
        let pad = config.kernel / 2;
        let mut graph = Graph::new();
        let mut a = graph.push(Op::Input(0), vec![]);
        for l in 0..config.num_layers {
            a = graph.push(
                Op::Conv2d { w: conv_w[l], bias: Some(conv_b[l]), stride: 1, pad },
                vec![a],
            );
            if l + 1 < config.num_layers {
                a = graph.push(Op::Pointwise(Activation::Relu), vec![a]);
            }
        }
        Ok(Self { config, sigma, params, conv_w, conv_b, graph, out: a })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Parameter blocks in declaration order (w0, b0, w1, b1, ...).
    pub fn ordered_blocks(&self) -> Vec<BlockId> {
        self.conv_w
            .iter()
            .zip(&self.conv_b)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let want = [self.config.in_channels, self.config.height, self.config.width];
        if x.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "plain net input {:?}, want {:?}",
                x.shape(),
                want
            )));
        }
        Ok(self.graph.forward(&self.params, &[x])?.value(self.out).clone())
    }

    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        x.sub(&self.forward(x)?)
    }

    fn layer_in_shape(&self, l: usize) -> [usize; 3] {
        let c = if l == 0 { self.config.in_channels } else { self.config.channels };
        [c, self.config.height, self.config.width]
    }

    /// Spectral norm of conv layer `l` as a linear operator at its input
    /// shape, by power iteration.
    pub fn layer_spectral_norm(&self, l: usize, iters: usize, rng: &mut Rng) -> Result<f64> {
        conv_spectral_norm(
            self.params.value(self.conv_w[l]),
            self.layer_in_shape(l),
            self.config.kernel / 2,
            iters,
            rng,
        )
    }

    /// Project every conv layer so its spectral norm is ≤ 1.
    pub fn spectral_project(&mut self, iters: usize, rng: &mut Rng) -> Result<()> {
        for l in 0..self.config.num_layers {
            let s = self.layer_spectral_norm(l, iters, rng)?;
            if s > 1.0 {
                self.params.value_mut(self.conv_w[l]).scale_in_place(1.0 / s);
            }
        }
        Ok(())
    }
}

fn conv_spectral_norm(
    w: &Tensor,
    in_shape: [usize; 3],
    pad: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut v = rng.gaussian(&in_shape, 1.0)?;
    let n0 = v.norm();
    v.scale_in_place(1.0 / n0);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let fwd = conv2d_forward(&v, w, None, 1, pad)?;
        let back = conv2d_transpose_forward(&fwd, w, 1, pad, in_shape)?;
        lambda = back.norm();
        if lambda < 1e-14 {
            return Ok(0.0);
        }
        v = back.scale(1.0 / lambda);
    }
    Ok(lambda.sqrt())
}

/// Train the plain net as a noise estimator with spectral projection
/// after every optimizer step. Returns per-epoch mean losses.
pub fn train_plain(
    net: &mut PlainScoreNet,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng = Rng::from_seed(config.seed);
    let mut proj_rng = Rng::from_seed(config.seed ^ 0x5bd1e995);
    let mut adam_m: Vec<Tensor> = (0..net.params.len())
        .map(|id| Tensor::zeros(net.params.value(id).shape()))
        .collect();
    let mut adam_v = adam_m.clone();
    let mut t = 0usize;
    let mut history = Vec::with_capacity(config.epochs);

    for _epoch in 0..config.epochs {
        let order = rng.permutation(dataset.len());
        let mut epoch_loss = 0.0;
        let mut nbatches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            net.params.zero_grads();
            let inv = 1.0 / (chunk.len() * dataset.items()[0].numel()) as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let (noisy, target) = perturb(&dataset.items()[i], config.sigma, &mut rng)?;
                let eval = net.graph.forward(&net.params, &[&noisy])?;
                let r = eval.value(net.out).sub(&target)?;
                loss += r.dot(&r)? * inv;
                let seed = r.scale(2.0 * inv);
                net.graph.backward(&mut net.params, &eval, net.out, &seed)?;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence("non-finite baseline loss".into()));
            }
            match config.optimizer {
                OptimizerKind::Adam => {
                    const B1: f64 = 0.9;
                    const B2: f64 = 0.999;
                    t += 1;
                    let bc1 = 1.0 - B1.powi(t as i32);
                    let bc2 = 1.0 - B2.powi(t as i32);
                    for id in 0..net.params.len() {
                        let g = net.params.grad(id).clone();
                        for ((mv, vv), gv) in adam_m[id]
                            .data_mut()
                            .iter_mut()
                            .zip(adam_v[id].data_mut())
                            .zip(g.data())
                        {
                            *mv = B1 * *mv + (1.0 - B1) * gv;
                            *vv = B2 * *vv + (1.0 - B2) * gv * gv;
                        }
                        let m = adam_m[id].clone();
                        let vva = adam_v[id].clone();
                        let value = net.params.value_mut(id);
                        for ((pv, mv), vv) in
                            value.data_mut().iter_mut().zip(m.data()).zip(vva.data())
                        {
                            *pv -= config.learning_rate * (mv / bc1) / ((vv / bc2).sqrt() + 1e-8);
                        }
                    }
                }
                OptimizerKind::Sgd => {
                    for id in 0..net.params.len() {
                        let g = net.params.grad(id).clone();
                        net.params.value_mut(id).axpy(-config.learning_rate, &g)?;
                    }
                }
            }
            net.spectral_project(10, &mut proj_rng)?;
            epoch_loss += loss;
            nbatches += 1;
        }
        history.push(epoch_loss / nbatches as f64);
    }
    // final tight projection
    net.spectral_project(50, &mut proj_rng)?;
    Ok(history)
}
