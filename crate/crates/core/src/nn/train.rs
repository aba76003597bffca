//! Mini-batch training with binary cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backprop::{self, Cache};
use super::model::AttentionModel;
use super::ops::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::Dataset;

/// Probability clamp used by every log-loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step.
    Sgd,
    /// Adam (beta1 0.9, beta2 0.999, eps 1e-8).
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::config(format!("unknown optimizer {s:?} (sgd|adam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean over positions of `-(y ln p + (1-y) ln(1-p))`, with `p` clamped.
pub fn bce_loss(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "bce: {} predictions vs {} labels",
            pred.len(),
            label.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// BCE loss on logits and its gradient with respect to the logits.
pub(crate) fn bce_with_grad(logits: &[f64], label: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(label)
        .map(|(&z, &y)| {
            let raw = sigmoid(z);
            let p = clamp_prob(raw);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            if raw == p {
                (p - y) / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn apply_update(
    model: &mut AttentionModel,
    grads: &AttentionModel,
    lr: f64,
    batch: usize,
    adam: &mut Option<AdamState>,
) {
    let inv = 1.0 / batch as f64;
    match adam {
        None => {
            for (p, g) in model.params_mut().into_iter().zip(grads.params()) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv * inv;
                }
            }
        }
        Some(st) => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            st.t += 1;
            let c1 = 1.0 - B1.powi(st.t);
            let c2 = 1.0 - B2.powi(st.t);
            for (((p, g), m), v) in model
                .params_mut()
                .into_iter()
                .zip(grads.params())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let gv = gv * inv;
                    m[i] = B1 * m[i] + (1.0 - B1) * gv;
                    v[i] = B2 * v[i] + (1.0 - B2) * gv * gv;
                    *pv -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Shared epoch loop. `loss_grad(i, logits)` returns the loss components of
/// sample `i` (the first one is the total, checked for divergence) and the
/// gradient with respect to the logits. Returns per-epoch component means.
pub(crate) fn run_epochs<F>(
    model: &mut AttentionModel,
    inputs: &[Vec<f64>],
    cfg: &TrainConfig,
    mut loss_grad: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize, &[f64]) -> (Vec<f64>, Vec<f64>),
{
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = model.zeros_like();
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| AdamState {
        m: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        v: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        t: 0,
    });
    let mut cache = Cache::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums: Vec<f64> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            for p in grads.params_mut() {
                p.data_mut().fill(0.0);
            }
            for &i in batch {
                let logits = backprop::forward(model, &inputs[i], Some(&mut cache));
                let (parts, dlogits) = loss_grad(i, &logits);
                if sums.is_empty() {
                    sums = vec![0.0; parts.len()];
                }
                for (s, v) in sums.iter_mut().zip(&parts) {
                    *s += v;
                }
                if !parts[0].is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                backprop::backward(model, &cache, &dlogits, &mut grads);
            }
            apply_update(model, &grads, cfg.learning_rate, batch.len(), &mut adam);
        }
        let means: Vec<f64> = sums.iter().map(|s| s / inputs.len() as f64).collect();
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: loss {:?}", means);
        history.push(means);
    }
    Ok(history)
}

/// Patched model inputs for every sample.
pub(crate) fn model_inputs(model: &AttentionModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples
        .iter()
        .map(|s| Ok(model.patch_input(&model.sample_input(s))?.into_data()))
        .collect()
}

pub(crate) fn check_dataset(model: &AttentionModel, data: &Dataset) -> Result<()> {
    let c = &model.config;
    if data.history != c.seq_len || data.width != c.input_dim || data.outputs != c.outputs {
        return Err(Error::config(format!(
            "dataset (T={}, S={}, D_O={}) does not match model (T_I={}, D_I={}, D_O={})",
            data.history, data.width, data.outputs, c.seq_len, c.input_dim, c.outputs
        )));
    }
    Ok(())
}

/// Trains `model` on `data` with mean BCE loss.
pub fn train(mut model: AttentionModel, data: &Dataset, cfg: &TrainConfig) -> Result<(AttentionModel, TrainReport)> {
    check_dataset(&model, data)?;
    let inputs = model_inputs(&model, data)?;
    let labels: Vec<Vec<f64>> = data.samples.iter().map(|s| s.label()).collect();
    let history = run_epochs(&mut model, &inputs, cfg, |i, logits| {
        let (loss, grad) = bce_with_grad(logits, &labels[i]);
        (vec![loss], grad)
    })?;
    let report = TrainReport {
        epoch_losses: history.into_iter().map(|h| h[0]).collect(),
    };
    Ok((model, report))
}

/// Mean BCE of one raw `T_I x D_I` input and the gradient of every
/// parameter, laid out like the model itself.
pub fn loss_gradient(model: &AttentionModel, x: &Tensor, label: &[f64]) -> Result<(f64, AttentionModel)> {
    if label.len() != model.config.outputs {
        return Err(Error::shape(format!(
            "label width {} vs {} outputs",
            label.len(),
            model.config.outputs
        )));
    }
    let patched = model.patch_input(x)?.into_data();
    let mut cache = Cache::default();
    let logits = backprop::forward(model, &patched, Some(&mut cache));
    let (loss, dlogits) = bce_with_grad(&logits, label);
    let mut grads = model.zeros_like();
    backprop::backward(model, &cache, &dlogits, &mut grads);
    Ok((loss, grads))
}

/// Logits of `model` for every sample.
pub fn predict_logits(model: &AttentionModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_dataset(model, data)?;
    Ok(model_inputs(model, data)?
        .iter()
        .map(|x| backprop::forward(model, x, None))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelConfig;
    use crate::tensor::Tensor;
    use crate::trace::Sample;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 4,
            heads: 2,
            ffn_dim: 6,
            input_dim: 3,
            seq_len: 2,
            patches: 2,
            outputs: 4,
            segment_bits: 2,
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| Sample {
                x: (0..6).map(|_| rng.gen_range(0..4)).collect(),
                width: 3,
                pcs: vec![0, 0],
                y: (0..4).map(|_| rng.gen_range(0..2)).collect(),
            })
            .collect();
        Dataset {
            history: 2,
            width: 3,
            outputs: 4,
            samples,
        }
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        let l = bce_loss(&[0.5; 3], &[1.0, 0.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = bce_loss(&[0.25], &[1.0]).unwrap();
        assert!((l - 1.386_294_361).abs() < 1e-6);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn overfits_single_sample() {
        let model = AttentionModel::new(tiny_config(), 3).unwrap();
        let mut data = tiny_dataset(1, 1);
        data.samples[0].y = vec![1, 0, 1, 0];
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.5,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (_, report) = train(model, &data, &cfg).unwrap();
        assert!(
            *report.epoch_losses.last().unwrap() < 0.05,
            "{:?}",
            report.epoch_losses.last()
        );
    }

    #[test]
    fn zero_learning_rate_is_null_update() {
        let model = AttentionModel::new(tiny_config(), 3).unwrap();
        let data = tiny_dataset(5, 2);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (trained, report) = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(report.epoch_losses.len(), 2);
    }

    #[test]
    fn deterministic_for_seed() {
        let data = tiny_dataset(10, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(AttentionModel::new(tiny_config(), 1).unwrap(), &data, &cfg).unwrap();
        let b = train(AttentionModel::new(tiny_config(), 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = tiny_dataset(0, 0);
        let r = train(
            AttentionModel::new(tiny_config(), 1).unwrap(),
            &data,
            &TrainConfig::default(),
        );
        assert!(matches!(r, Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let data = tiny_dataset(8, 4);
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let r = train(AttentionModel::new(tiny_config(), 1).unwrap(), &data, &cfg);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    fn loss_of(model: &AttentionModel, x: &[f64], y: &[f64]) -> f64 {
        bce_with_grad(&backprop::forward(model, x, None), y).0
    }

    /// Central finite differences against the analytic gradient for every
    /// parameter of a randomized tiny model.
    fn gradient_check(cfg: ModelConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = AttentionModel::new(cfg, seed).unwrap();
        // Move norms away from identity so their gradients are exercised.
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x: Vec<f64> = (0..cfg.seq_len * cfg.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let x = model
            .patch_input(&Tensor::matrix(cfg.seq_len, cfg.input_dim, x).unwrap())
            .unwrap()
            .into_data();
        let y: Vec<f64> = (0..cfg.outputs).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let mut cache = Cache::default();
        let logits = backprop::forward(&model, &x, Some(&mut cache));
        let (_, dl) = bce_with_grad(&logits, &y);
        let mut grads = model.zeros_like();
        backprop::backward(&model, &cache, &dl, &mut grads);
        let names = model.param_names();
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.data().to_vec()).collect();
        let h = 1e-5;
        for (pi, name) in names.iter().enumerate() {
            for k in 0..analytic[pi].len() {
                let orig = model.params()[pi].data()[k];
                model.params_mut()[pi].data_mut()[k] = orig + h;
                let up = loss_of(&model, &x, &y);
                model.params_mut()[pi].data_mut()[k] = orig - h;
                let down = loss_of(&model, &x, &y);
                model.params_mut()[pi].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi][k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-4, "{name}[{k}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(tiny_config(), 11);
        gradient_check(
            ModelConfig {
                layers: 2,
                dim: 6,
                heads: 3,
                ffn_dim: 5,
                input_dim: 2,
                seq_len: 4,
                patches: 2,
                outputs: 3,
                segment_bits: 1,
            },
            12,
        );
    }

    #[test]
    fn adam_also_learns() {
        let model = AttentionModel::new(tiny_config(), 3).unwrap();
        let data = tiny_dataset(16, 5);
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 4,
            optimizer: Optimizer::Adam,
            ..TrainConfig::default()
        };
        let (_, report) = train(model, &data, &cfg).unwrap();
        assert!(report.epoch_losses.last() < report.epoch_losses.first());
    }
}
