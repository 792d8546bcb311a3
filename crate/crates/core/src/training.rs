//! AdamW with decoupled weight decay, the epoch loop, and accuracy.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Prepared};
use crate::params::{Graph, ParamStore};

/// Fine-tuning learning rate used with large pretrained encoders.
pub const FINE_TUNE_LR: f64 = 2e-5;
/// Default learning rate for the small from-scratch encoder.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: DESK_LR,
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epochs: 20,
            seed: 0,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let non_negative = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Moment buffers and hyperparameters for AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            lr,
            eps,
            weight_decay,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        AdamWState::new(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update over every parameter, reading gradients from the store
    /// (absent gradients count as zero):
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
    /// m̂ = m/(1−β₁ᵗ)            v̂ = v/(1−β₂ᵗ)
    /// θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)
    /// ```
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, (_, t)) in store.iter().enumerate() {
            if t.numel() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "optimizer buffer {i} has {} entries, parameter has {}",
                    self.m[i].len(),
                    t.numel()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = param.grad().map(<[f64]>::to_vec);
            let data = param.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let theta = data[j];
                data[j] = theta - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta);
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        store.tensors_mut().for_each(|t| t.scale_grad(factor));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
}

/// A model, its optimizer state and the shuffling stream of one run.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamWState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamWState::from_config(&model.store, &config);
        // Models are usually initialized from the same seed; shuffle on a
        // separate stream.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            optimizer,
            rng,
            config,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One shuffled pass over `data`: per batch, forward every example
    /// through the shared model, average the losses, backpropagate, clip,
    /// and step.
    pub fn train_epoch(&mut self, data: &[Prepared]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Input("cannot train on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let step = self.steps;
            let tag = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("training step {step}: {msg}")),
                other => other,
            };
            let model = &mut self.model;
            let mut g = Graph::new(&model.store);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (loss, pred) = model.forward(&mut g, &data[i]).map_err(tag)?;
                losses.push(loss);
                if pred.predicted_index == data[i].gold {
                    correct += 1;
                }
            }
            let joined = g.tape.concat(&losses).map_err(tag)?;
            let total = g.tape.sum(joined).map_err(tag)?;
            let mean = g.tape.scale(total, 1.0 / batch.len() as f64).map_err(tag)?;
            loss_sum += g.tape.value(total).data()[0];

            model.store.zero_grads();
            g.backward_into(mean, &mut model.store).map_err(tag)?;
            clip_grad_norm(&mut model.store, self.config.grad_clip_norm);
            self.optimizer.step(&mut model.store)?;
            model.store.zero_grads();
            self.steps += 1;
        }
        Ok(EpochMetrics {
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        })
    }
}

/// Fraction of examples whose predicted index equals the gold index.
pub fn evaluate(model: &Model, data: &[Prepared]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for ex in data {
        if model.predict(ex)?.predicted_index == ex.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of already computed predictions.
pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != gold.len() {
        return Err(Error::Input(format!(
            "accuracy needs equal non-empty lists, got {} and {}",
            predicted.len(),
            gold.len()
        )));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(vec![theta]).unwrap());
        s
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let t = store.tensors_mut().next().unwrap();
        t.zero_grad();
        t.accumulate_grad(&[g]).unwrap();
    }

    fn theta(store: &ParamStore) -> f64 {
        store.flat_values()[0]
    }

    #[test]
    fn decay_only_step() {
        let mut s = scalar_store(2.0);
        set_grad(&mut s, 0.0);
        let mut opt = AdamWState::new(&s, 0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut s).unwrap();
        assert!((theta(&s) - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_from_zero() {
        let mut s = scalar_store(0.0);
        set_grad(&mut s, 1.0);
        let lr = 2e-5;
        let mut opt = AdamWState::new(&s, lr, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s).unwrap();
        assert!((theta(&s) - (-lr / (1.0 + 1e-8))).abs() < 1e-18);
    }

    #[test]
    fn zero_betas_reduce_to_sign_sgd() {
        for g in [0.5, -3.0, 1e-3] {
            let mut s = scalar_store(1.0);
            set_grad(&mut s, g);
            let mut opt = AdamWState::new(&s, 0.01, 0.0, 0.0, 1e-8, 0.0);
            opt.step(&mut s).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((theta(&s) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let s = scalar_store(1.0);
        let mut opt = AdamWState::new(&s, 0.01, 0.9, 0.999, 1e-8, 0.0);
        let mut other = ParamStore::new();
        other.add("x", Tensor::zeros(&[3]));
        assert!(matches!(opt.step(&mut other), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2]));
        s.tensors_mut().next().unwrap().accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
        // Disabled clipping leaves gradients alone.
        assert!((clip_grad_norm(&mut s, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
