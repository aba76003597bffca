//! Multi-label knowledge distillation with temperature-softened sigmoid
//! targets.

use crate::error::{Error, Result};
use crate::nn::model::{AttentionModel, ModelConfig};
use crate::nn::train::{bce_with_grad, check_dataset, model_inputs, predict_logits, run_epochs, TrainConfig, PROB_EPS};
use crate::trace::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Softening temperature `T`.
    pub temperature: f64,
    /// Weight of the KD term; `1 - lambda` goes to BCE.
    pub lambda: f64,
    /// Multiply the KD term by `T^2`.
    pub scale_by_t2: bool,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            lambda: 0.5,
            scale_by_t2: false,
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillReport {
    /// Mean combined loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_kd: Vec<f64>,
    pub epoch_bce: Vec<f64>,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {t}")))
    }
}

/// `1 / (1 + exp(-y / T))`.
pub fn t_sigmoid(y: f64, t: f64) -> Result<f64> {
    check_temperature(t)?;
    Ok(1.0 / (1.0 + (-y / t).exp()))
}

fn bernoulli_kl(zt: f64, zs: f64) -> f64 {
    let zt = zt.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let zs = zs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    zt * (zt / zs).ln() + (1.0 - zt) * ((1.0 - zt) / (1.0 - zs)).ln()
}

/// Sum over outputs of `KL([z_t, 1-z_t] || [z_s, 1-z_s])` with
/// `z = t_sigmoid(logit, T)`.
pub fn kd_loss(teacher: &[f64], student: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    if teacher.len() != student.len() {
        return Err(Error::shape(format!(
            "kd: {} teacher logits vs {} student logits",
            teacher.len(),
            student.len()
        )));
    }
    Ok(kd_with_grad(teacher, student, t).0)
}

/// KD loss and its gradient with respect to the student logits.
pub(crate) fn kd_with_grad(teacher: &[f64], student: &[f64], t: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = teacher
        .iter()
        .zip(student)
        .map(|(&yt, &ys)| {
            let zt = 1.0 / (1.0 + (-yt / t).exp());
            let zs = 1.0 / (1.0 + (-ys / t).exp());
            loss += bernoulli_kl(zt, zs);
            if zs.clamp(PROB_EPS, 1.0 - PROB_EPS) == zs {
                (zs - zt) / t
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Combined `lambda * KD + (1 - lambda) * BCE` for one sample, returning
/// `([total, kd, bce], dlogits)`.
pub(crate) fn combined_with_grad(
    teacher_logits: &[f64],
    student_logits: &[f64],
    label: &[f64],
    cfg: &DistillConfig,
) -> (Vec<f64>, Vec<f64>) {
    let (kd, gkd) = kd_with_grad(teacher_logits, student_logits, cfg.temperature);
    let (bce, gbce) = bce_with_grad(student_logits, label);
    let kd_w = cfg.lambda
        * if cfg.scale_by_t2 {
            cfg.temperature * cfg.temperature
        } else {
            1.0
        };
    let bce_w = 1.0 - cfg.lambda;
    let grad = gkd.iter().zip(&gbce).map(|(a, b)| kd_w * a + bce_w * b).collect();
    (vec![kd_w * kd + bce_w * bce, kd, bce], grad)
}

/// Trains a fresh student (initialized from `cfg.train.seed`) against the
/// frozen teacher.
pub fn distill(
    teacher: &AttentionModel,
    student: ModelConfig,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<(AttentionModel, DistillReport)> {
    let init = AttentionModel::new(student, cfg.train.seed)?;
    distill_from(teacher, init, data, cfg)
}

/// Like [`distill`], starting from the given student parameters.
pub fn distill_from(
    teacher: &AttentionModel,
    mut student: AttentionModel,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<(AttentionModel, DistillReport)> {
    cfg.validate()?;
    if teacher.config.outputs != student.config.outputs
        || teacher.config.seq_len != student.config.seq_len
        || teacher.config.input_dim != student.config.input_dim
    {
        return Err(Error::config("teacher and student disagree on input/output shape"));
    }
    check_dataset(&student, data)?;
    let teacher_logits = predict_logits(teacher, data)?;
    let labels: Vec<Vec<f64>> = data.samples.iter().map(|s| s.label()).collect();
    let inputs = model_inputs(&student, data)?;
    let history = run_epochs(&mut student, &inputs, &cfg.train, |i, logits| {
        combined_with_grad(&teacher_logits[i], logits, &labels[i], cfg)
    })?;
    let mut report = DistillReport::default();
    for h in history {
        report.epoch_losses.push(h[0]);
        report.epoch_kd.push(h[1]);
        report.epoch_bce.push(h[2]);
    }
    Ok((student, report))
}
