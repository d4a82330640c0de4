//! Training losses: binary cross entropy, the smooth calibration loss over
//! EMA-smoothed per-group statistics, and the MSE ablation variant.
//!
//! The smooth calibration loss discretizes the ideal-calibration condition
//! `E[y | s' = p] = p`: outputs are bucketed into `N` equal-width groups,
//! per-group averages of labels and outputs are smoothed across batches with
//! an exponential moving average, and the loss is the group-size-weighted
//! squared gap between the two averages. Per batch, the EMA update runs
//! first and the loss is evaluated on the updated state.
//!
//! Gradients flow only through the current batch's `(1 - tau) * mean(s')`
//! contribution: group membership is a non-differentiable binning, labels
//! are constants, and the EMA history is treated as constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which auxiliary loss accompanies BCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    /// Smooth calibration loss.
    ScLoss,
    /// Mean squared error against the binary label.
    Mse,
    /// BCE only.
    None,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scloss" => Ok(Self::ScLoss),
            "mse" => Ok(Self::Mse),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown loss variant '{other}' (expected scloss, mse, or none)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ScLoss => "scloss",
            Self::Mse => "mse",
            Self::None => "none",
        }
    }
}

/// Weights and shape of the total training loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the auxiliary loss.
    pub lambda: f64,
    /// Number of equal-width groups for the calibration loss.
    pub num_groups: usize,
    /// EMA decay rate in [0, 1]; 0 disables smoothing.
    pub tau: f64,
    pub variant: LossVariant,
    /// Divide stored EMA values by `1 - tau^updates` before use. Off by
    /// default: the zero initialization is kept as-is.
    pub bias_correction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            num_groups: 10,
            tau: 0.95,
            variant: LossVariant::ScLoss,
            bias_correction: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.num_groups < 1 {
            return Err(Error::Config("group count N must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Smoothed per-group averages of labels and calibrated outputs.
#[derive(Debug, Clone)]
pub struct EmaState {
    y_bar: Vec<f64>,
    s_bar: Vec<f64>,
    seen: Vec<bool>,
    updates: Vec<u64>,
    tau: f64,
}

impl EmaState {
    /// Fresh state with every average at zero.
    pub fn new(num_groups: usize, tau: f64) -> Self {
        Self {
            y_bar: vec![0.0; num_groups],
            s_bar: vec![0.0; num_groups],
            seen: vec![false; num_groups],
            updates: vec![0; num_groups],
            tau,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.y_bar.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Re-zero all averages (start of an epoch).
    pub fn reset(&mut self) {
        self.y_bar.fill(0.0);
        self.s_bar.fill(0.0);
        self.seen.fill(false);
        self.updates.fill(0);
    }

    /// Stored label average of 1-based group `k`.
    pub fn y_bar(&self, k: usize) -> f64 {
        self.y_bar[k - 1]
    }

    /// Stored output average of 1-based group `k`.
    pub fn s_bar(&self, k: usize) -> f64 {
        self.s_bar[k - 1]
    }

    pub fn seen(&self, k: usize) -> bool {
        self.seen[k - 1]
    }

    /// `1 / (1 - tau^updates_k)` when bias correction is on, else 1.
    fn correction(&self, k: usize, enabled: bool) -> f64 {
        if !enabled || self.updates[k - 1] == 0 {
            return 1.0;
        }
        let denom = 1.0 - self.tau.powi(self.updates[k - 1] as i32);
        if denom <= 1e-12 {
            1.0
        } else {
            1.0 / denom
        }
    }
}

/// Mean binary cross entropy and its gradient w.r.t. each output.
pub fn bce_loss(s_prime: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s_prime.len() != y.len() {
        return Err(Error::Shape(format!(
            "bce: {} outputs vs {} labels",
            s_prime.len(),
            y.len()
        )));
    }
    if s_prime.is_empty() {
        return Err(Error::Shape("bce on an empty batch".into()));
    }
    let n = s_prime.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s_prime.len());
    for (&s, &yv) in s_prime.iter().zip(y) {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Domain(format!(
                "bce requires outputs strictly inside (0, 1), got {s}"
            )));
        }
        loss -= yv * s.ln() + (1.0 - yv) * (1.0 - s).ln();
        grad.push((s - yv) / (s * (1.0 - s)) / n);
    }
    Ok((loss / n, grad))
}

/// Mean squared error against the labels, with gradient.
pub fn mse_loss(s_prime: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s_prime.len() != y.len() {
        return Err(Error::Shape(format!(
            "mse: {} outputs vs {} labels",
            s_prime.len(),
            y.len()
        )));
    }
    if s_prime.is_empty() {
        return Err(Error::Shape("mse on an empty batch".into()));
    }
    let n = s_prime.len() as f64;
    let loss: f64 = s_prime
        .iter()
        .zip(y)
        .map(|(&s, &yv)| (s - yv).powi(2))
        .sum::<f64>()
        / n;
    let grad: Vec<f64> = s_prime
        .iter()
        .zip(y)
        .map(|(&s, &yv)| 2.0 * (s - yv) / n)
        .collect();
    Ok((loss, grad))
}

/// 1-based group index per row: `k = floor(s' * N) + 1`, with `s' = 1`
/// folded into group `N` (half-open bins, top edge closed).
pub fn assign_groups(s_prime: &[f64], num_groups: usize) -> Vec<usize> {
    s_prime
        .iter()
        .map(|&s| {
            let k = (s * num_groups as f64).floor() as usize + 1;
            k.min(num_groups)
        })
        .collect()
}

/// EMA update for every group present in the batch:
/// `bar <- tau * bar + (1 - tau) * batch_mean`. Empty groups keep their
/// stored values.
pub fn ema_update(state: &mut EmaState, groups: &[usize], y: &[f64], s_prime: &[f64]) {
    let n_groups = state.num_groups();
    let mut count = vec![0usize; n_groups];
    let mut y_sum = vec![0.0; n_groups];
    let mut s_sum = vec![0.0; n_groups];
    for i in 0..groups.len() {
        let k = groups[i] - 1;
        count[k] += 1;
        y_sum[k] += y[i];
        s_sum[k] += s_prime[i];
    }
    let tau = state.tau;
    for k in 0..n_groups {
        if count[k] == 0 {
            continue;
        }
        let m = count[k] as f64;
        state.y_bar[k] = tau * state.y_bar[k] + (1.0 - tau) * y_sum[k] / m;
        state.s_bar[k] = tau * state.s_bar[k] + (1.0 - tau) * s_sum[k] / m;
        state.seen[k] = true;
        state.updates[k] += 1;
    }
}

/// Smooth calibration loss on an updated state:
/// `(1/|B|) * sum_k |G_k| (y_bar_k - s_bar_k)^2` over groups that are
/// non-empty in this batch. The gradient to each row of group `k` is
/// `2 (s_bar_k - y_bar_k) (1 - tau) / |B|`.
pub fn sc_loss(groups: &[usize], state: &EmaState, bias_correction: bool) -> (f64, Vec<f64>) {
    let batch = groups.len() as f64;
    let n_groups = state.num_groups();
    let mut count = vec![0usize; n_groups];
    for &g in groups {
        count[g - 1] += 1;
    }
    let mut loss = 0.0;
    let mut per_group_grad = vec![0.0; n_groups];
    for k in 1..=n_groups {
        if count[k - 1] == 0 {
            continue;
        }
        let c = state.correction(k, bias_correction);
        let gap = (state.y_bar(k) - state.s_bar(k)) * c;
        loss += count[k - 1] as f64 * gap * gap;
        per_group_grad[k - 1] = -2.0 * gap * c * (1.0 - state.tau) / batch;
    }
    let grad: Vec<f64> = groups.iter().map(|&g| per_group_grad[g - 1]).collect();
    (loss / batch, grad)
}

/// Loss values and per-row gradient for one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub bce: f64,
    /// The auxiliary term before weighting (calibration loss or MSE; 0 for
    /// the BCE-only variant).
    pub aux: f64,
    pub grad: Vec<f64>,
}

/// The full per-batch loss: EMA update first, then
/// `BCE + lambda * auxiliary` with the gradient summed accordingly.
pub fn total_loss(
    config: &LossConfig,
    s_prime: &[f64],
    y: &[f64],
    state: &mut EmaState,
) -> Result<LossOutput> {
    config.validate()?;
    let (bce, bce_grad) = bce_loss(s_prime, y)?;
    let (aux, aux_grad) = match config.variant {
        LossVariant::ScLoss => {
            let groups = assign_groups(s_prime, config.num_groups);
            ema_update(state, &groups, y, s_prime);
            sc_loss(&groups, state, config.bias_correction)
        }
        LossVariant::Mse => mse_loss(s_prime, y)?,
        LossVariant::None => (0.0, vec![0.0; s_prime.len()]),
    };
    let total = bce + config.lambda * aux;
    let grad: Vec<f64> = bce_grad
        .iter()
        .zip(&aux_grad)
        .map(|(&bg, &ag)| bg + config.lambda * ag)
        .collect();
    Ok(LossOutput {
        total,
        bce,
        aux,
        grad,
    })
}
