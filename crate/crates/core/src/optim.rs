//! Adam with piecewise-constant learning-rate schedules and coupled L2 weight
//! decay, plus a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One learning-rate stage: the rate applies from `start_epoch` (1-based)
/// until the next stage starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub start_epoch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub lr_stages: Vec<LrStage>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::reconstruction()
    }
}

fn stages(pairs: &[(usize, f64)]) -> Vec<LrStage> {
    pairs
        .iter()
        .map(|&(start_epoch, lr)| LrStage { start_epoch, lr })
        .collect()
}

impl OptimizerConfig {
    /// Schedule for the reconstruction initialization: 35 epochs, rate drops
    /// at epochs 6 and 26, weight decay 5e-5.
    pub fn reconstruction() -> Self {
        OptimizerConfig {
            epochs: 35,
            lr_stages: stages(&[(1, 1e-3), (6, 1e-4), (26, 1e-5)]),
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            seed: 0,
        }
    }

    /// Schedule for task-head initialization and joint training: 120 epochs,
    /// rate drops at epochs 21 and 101, weight decay 1e-4.
    pub fn joint() -> Self {
        OptimizerConfig {
            epochs: 120,
            lr_stages: stages(&[(1, 1e-3), (21, 1e-4), (101, 1e-5)]),
            weight_decay: 1e-4,
            ..Self::reconstruction()
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_stages(mut self, pairs: &[(usize, f64)]) -> Self {
        self.lr_stages = stages(pairs);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .lr_stages
            .first()
            .ok_or_else(|| Error::InvalidConfig("lr_stages is empty".into()))?;
        if first.start_epoch != 1 {
            return Err(Error::InvalidConfig(format!(
                "lr_stages must start at epoch 1, found {}",
                first.start_epoch
            )));
        }
        if self
            .lr_stages
            .windows(2)
            .any(|w| w[1].start_epoch <= w[0].start_epoch)
        {
            return Err(Error::InvalidConfig(
                "lr_stages start epochs must be strictly increasing".into(),
            ));
        }
        if self.lr_stages.iter().any(|s| !(s.lr >= 0.0 && s.lr.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(self, epoch)
    }
}

/// Partial optimizer settings; unset fields come from a base schedule.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OptimizerOverrides {
    epochs: Option<usize>,
    lr_stages: Option<Vec<LrStage>>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
}

impl OptimizerOverrides {
    fn over(self, base: OptimizerConfig) -> OptimizerConfig {
        OptimizerConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            lr_stages: self.lr_stages.unwrap_or(base.lr_stages),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

/// `deserialize_with` helper: fields missing from the input keep their
/// [`OptimizerConfig::reconstruction`] values.
pub fn reconstruction_or_default<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<OptimizerConfig, D::Error> {
    Ok(OptimizerOverrides::deserialize(d)?.over(OptimizerConfig::reconstruction()))
}

/// `deserialize_with` helper: fields missing from the input keep their
/// [`OptimizerConfig::joint`] values.
pub fn joint_or_default<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<OptimizerConfig, D::Error> {
    Ok(OptimizerOverrides::deserialize(d)?.over(OptimizerConfig::joint()))
}

/// Rate of the last stage whose start epoch is `<= epoch`.
pub fn lr_at(cfg: &OptimizerConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} outside 1..={}",
            cfg.epochs
        )));
    }
    cfg.lr_stages
        .iter()
        .rev()
        .find(|s| s.start_epoch <= epoch)
        .map(|s| s.lr)
        .ok_or_else(|| Error::InvalidConfig("lr_stages must start at epoch 1".into()))
}

/// First and second moment accumulators for a list of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        AdamState {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update over every block. The effective
    /// gradient is `grad + weight_decay * param`.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "Adam state has {} blocks, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[b].len() || g.len() != self.m[b].len() {
                return Err(Error::DimensionMismatch(format!(
                    "block {b}: state {} params {} grads {}",
                    self.m[b].len(),
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient block {b}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..p.len() {
                let grad = g[i] + cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub worst_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient returned by `loss_and_grad` at `params`
/// against central differences with the given step.
///
/// The relative error of coordinate i is `|a_i - n_i| / max(|n_i|, 1e-3·max_j |n_j|)`,
/// so coordinates whose gradient is negligible next to the largest one are
/// judged against that scale rather than against their own roundoff.
pub fn finite_diff_check<F>(
    mut loss_and_grad: F,
    params: &[f64],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let numeric: Vec<f64> = (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = loss_and_grad(&x).0;
            x[i] = orig - step;
            let down = loss_and_grad(&x).0;
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect();
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-300);
    let mut report = GradCheckReport {
        passed: true,
        worst_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(floor);
        if err > report.worst_rel_error || !err.is_finite() {
            report.worst_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report.passed = report.worst_rel_error <= tolerance;
    report
}
