//! Denoising score matching: train the gradient network H to predict the
//! injected noise σz from perturbed samples x + σz.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// DSM noise std in image-intensity units.
    pub sigma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma {} must be > 0", self.sigma)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Clean training images, all of one shape, in [0,1] intensity range.
#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<Tensor>,
}

impl Dataset {
    pub fn new(items: Vec<Tensor>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let shape = items[0].shape().to_vec();
        if items.iter().any(|t| t.shape() != shape) {
            return Err(Error::ShapeMismatch("dataset items differ in shape".into()));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Tensor] {
        &self.items
    }
}

/// x̃ = x + σz, target = σz.
pub fn perturb(x: &Tensor, sigma: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let target = rng.gaussian(x.shape(), sigma)?;
    let noisy = x.add(&target)?;
    Ok((noisy, target))
}

/// Mean over batch and pixels of ‖H(x̃) − σz‖².
pub fn dsm_loss(model: &EnergyModel, batch: &[(Tensor, Tensor)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (noisy, target) in batch {
        let h = model.score(noisy)?;
        let r = h.sub(target)?;
        acc += r.dot(&r)?;
        count += r.numel();
    }
    Ok(acc / count as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamState {
    fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ParamStore, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for id in 0..params.len() {
            let g = params.grad(id).clone();
            for ((mv, vv), gv) in self.m[id]
                .data_mut()
                .iter_mut()
                .zip(self.v[id].data_mut())
                .zip(g.data())
            {
                *mv = B1 * *mv + (1.0 - B1) * gv;
                *vv = B2 * *vv + (1.0 - B2) * gv * gv;
            }
            let m = &self.m[id];
            let v = &self.v[id];
            let value = params.value_mut(id);
            for ((pv, mv), vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

fn sgd_step(params: &mut ParamStore, lr: f64) {
    for id in 0..params.len() {
        let g = params.grad(id).clone();
        params.value_mut(id).axpy(-lr, &g).expect("grad shape");
    }
}

/// Accumulate the gradient of the mean-squared DSM objective for one
/// batch into the model's parameter store. Returns the batch loss.
pub fn accumulate_batch_gradient(
    model: &mut EnergyModel,
    batch: &[(Tensor, Tensor)],
) -> Result<f64> {
    let inv = 1.0 / (batch.len() * batch[0].0.numel()) as f64;
    let mut loss = 0.0;
    let (graph, out) = {
        let (g, o) = model.h_graph();
        (g.clone(), o)
    };
    for (noisy, target) in batch {
        let eval = graph.forward(model.params(), &[noisy])?;
        let r = eval.value(out).sub(target)?;
        loss += r.dot(&r)? * inv;
        let seed = r.scale(2.0 * inv);
        graph.backward(model.params_mut(), &eval, out, &seed)?;
    }
    Ok(loss)
}

/// Minimize the DSM loss by stochastic first-order optimization.
/// Deterministic under seed in single-thread execution. Aborts if the
/// epoch loss exceeds 10× the initial loss for 3 consecutive epochs.
pub fn train(
    model: &mut EnergyModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let mut rng = Rng::from_seed(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut initial_loss = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = rng.permutation(dataset.len());
        let mut epoch_loss = 0.0;
        let mut nbatches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Tensor, Tensor)> = chunk
                .iter()
                .map(|&i| perturb(&dataset.items()[i], config.sigma, &mut rng))
                .collect::<Result<_>>()?;
            model.params_mut().zero_grads();
            let loss = accumulate_batch_gradient(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
            }
            match config.optimizer {
                OptimizerKind::Adam => adam.step(model.params_mut(), config.learning_rate),
                OptimizerKind::Sgd => sgd_step(model.params_mut(), config.learning_rate),
            }
            epoch_loss += loss;
            nbatches += 1;
        }
        let mean_loss = epoch_loss / nbatches as f64;
        let init = *initial_loss.get_or_insert(mean_loss);
        if mean_loss > 10.0 * init {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                return Err(Error::Divergence(format!(
                    "loss {mean_loss:.3e} exceeded 10x initial {init:.3e} for 3 epochs"
                )));
            }
        } else {
            bad_epochs = 0;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// Write a loss history as `epoch,mean_loss,wall_seconds` CSV.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,mean_loss,wall_seconds\n");
    for r in history {
        s.push_str(&format!("{},{:.17e},{:.6}\n", r.epoch, r.mean_loss, r.wall_seconds));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{EnergyNetConfig, HeadKind};
    use crate::graph::Activation;

    fn tiny_model(act: Activation, seed: u64) -> EnergyModel {
        let config = EnergyNetConfig {
            num_layers: 2,
            channels: 4,
            kernel: 3,
            activation: act,
            head: HeadKind::Dense,
            in_channels: 1,
            height: 6,
            width: 6,
            strides: vec![1, 1],
        };
        EnergyModel::new(config, 0.1, &mut Rng::from_seed(seed)).unwrap()
    }

    #[test]
    fn perturb_determinism_and_stats() {
        let x = Tensor::full(&[1, 10, 10], 0.5);
        let (n1, t1) = perturb(&x, 0.2, &mut Rng::from_seed(1)).unwrap();
        let (n2, t2) = perturb(&x, 0.2, &mut Rng::from_seed(1)).unwrap();
        assert_eq!(n1.data(), n2.data());
        assert_eq!(t1.data(), t2.data());

        // E||target||^2 / numel = sigma^2, Monte Carlo over >= 1e5 draws
        let big = Tensor::zeros(&[400, 400]);
        let mut rng = Rng::from_seed(2);
        let (_, target) = perturb(&big, 0.2, &mut rng).unwrap();
        let mean_sq = target.dot(&target).unwrap() / target.numel() as f64;
        assert!((mean_sq - 0.04).abs() / 0.04 < 0.02, "mean sq {mean_sq}");
    }

    #[test]
    fn zero_network_loss_is_sigma_squared() {
        let mut m = tiny_model(Activation::Relu, 3);
        for id in 0..m.params().len() {
            *m.params_mut().value_mut(id) = Tensor::zeros(m.params().value(id).shape());
        }
        let sigma = 0.1;
        let mut rng = Rng::from_seed(4);
        // 1e4+ samples worth of elements across the batch
        let x = Tensor::full(&[1, 6, 6], 0.5);
        let batch: Vec<_> = (0..400)
            .map(|_| perturb(&x, sigma, &mut rng).unwrap())
            .collect();
        let loss = dsm_loss(&m, &batch).unwrap();
        assert!((loss - sigma * sigma).abs() / (sigma * sigma) < 0.02, "loss {loss}");
    }

    #[test]
    fn perfect_fit_gives_zero_loss() {
        let m = tiny_model(Activation::Relu, 5);
        let mut rng = Rng::from_seed(6);
        let x = rng.uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        let h = m.score(&x).unwrap();
        // inject the model's own output as the target
        let loss = dsm_loss(&m, &[(x, h)]).unwrap();
        assert!(loss < 1e-25, "loss {loss}");
    }

    #[test]
    fn empty_batch_rejected() {
        let m = tiny_model(Activation::Relu, 7);
        assert!(dsm_loss(&m, &[]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut m = tiny_model(Activation::Softplus, 8);
        let mut rng = Rng::from_seed(9);
        let x = rng.uniform_tensor(&[1, 6, 6], 0.0, 1.0);
        let batch = vec![perturb(&x, 0.1, &mut rng).unwrap()];
        m.params_mut().zero_grads();
        accumulate_batch_gradient(&mut m, &batch).unwrap();
        let analytic: Vec<Tensor> = (0..m.params().len())
            .map(|id| m.params().grad(id).clone())
            .collect();
        let eps = 1e-6;
        let mut max_rel = 0.0f64;
        for id in 0..m.params().len() {
            let n = m.params().value(id).numel();
            let step = (n / 10).max(1);
            for c in (0..n).step_by(step) {
                let orig = m.params().value(id).data()[c];
                m.params_mut().value_mut(id).data_mut()[c] = orig + eps;
                let lp = dsm_loss(&m, &batch).unwrap();
                m.params_mut().value_mut(id).data_mut()[c] = orig - eps;
                let lm = dsm_loss(&m, &batch).unwrap();
                m.params_mut().value_mut(id).data_mut()[c] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[id].data()[c];
                max_rel = max_rel.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let dataset = {
            let mut rng = Rng::from_seed(10);
            Dataset::new(
                (0..8)
                    .map(|_| rng.uniform_tensor(&[1, 6, 6], 0.0, 1.0))
                    .collect(),
            )
            .unwrap()
        };
        let config = TrainConfig {
            sigma: 0.1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 4,
            epochs: 5,
            seed: 11,
        };
        let mut m1 = tiny_model(Activation::Relu, 12);
        let mut m2 = tiny_model(Activation::Relu, 12);
        let h1 = train(&mut m1, &dataset, &config).unwrap();
        let h2 = train(&mut m2, &dataset, &config).unwrap();
        let l1: Vec<f64> = h1.iter().map(|r| r.mean_loss).collect();
        let l2: Vec<f64> = h2.iter().map(|r| r.mean_loss).collect();
        assert_eq!(l1, l2, "same seed must give identical loss histories");
        assert!(
            h1.last().unwrap().mean_loss < h1[0].mean_loss,
            "final loss should drop below initial"
        );
    }

    #[test]
    fn training_does_not_mutate_dataset() {
        let mut rng = Rng::from_seed(13);
        let items: Vec<Tensor> = (0..4).map(|_| rng.uniform_tensor(&[1, 6, 6], 0.0, 1.0)).collect();
        let copies = items.clone();
        let dataset = Dataset::new(items).unwrap();
        let mut m = tiny_model(Activation::Relu, 14);
        let config = TrainConfig { epochs: 2, batch_size: 2, sigma: 0.1, ..Default::default() };
        train(&mut m, &dataset, &config).unwrap();
        for (a, b) in dataset.items().iter().zip(&copies) {
            assert_eq!(a.data(), b.data());
        }
    }
}
