use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerParams, Mode, Model, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            l2_lambda: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam moments need beta in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Labeled classifier inputs; labels are 1-based.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, x: Tensor, label: usize) {
        self.inputs.push(x);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss (cross-entropy plus L2 term) of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<LayerParams>,
    v: Vec<LayerParams>,
}

impl Adam {
    pub fn new(params: &[LayerParams], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<LayerParams> = params.iter().map(LayerParams::zeros_like).collect();
        Adam { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_config(params: &[LayerParams], cfg: &TrainConfig) -> Self {
        Adam::new(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [LayerParams], grads: &[LayerParams]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            update(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Mini-batch training with shuffling, dropout and L2 regularization. Every
/// random draw (shuffle order, dropout masks) derives from `cfg.seed`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.inputs.len() != data.labels.len() {
        return Err(Error::invalid("inputs and labels differ in count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(model.params(), cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Tensor> = batch.iter().map(|&i| data.inputs[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mode = Mode::Train { seed: rng.gen() };
            let (loss, grads) = model.loss_and_gradient(&xs, &ys, cfg.l2_lambda, mode)?;
            total += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grads);
        }
        loss_curve.push(total / data.len() as f64);
    }
    Ok(TrainReport { loss_curve })
}

/// Fraction of `data` whose eval-mode argmax equals its label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let probs = model.predict(&data.inputs)?;
    let hits = probs.iter().zip(&data.labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(hits as f64 / data.len() as f64)
}
