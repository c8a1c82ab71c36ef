//! Adam with decoupled weight decay, and the cyclic snapshot schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first_moment: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.dims())).collect();
        Self {
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Weight decay is decoupled:
/// `p −= lr·wd·p` precedes the Adam delta. Gradients are validated before any
/// parameter is touched.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.first_moment[i].dims() {
            return Err(Error::shape(format!("adam: parameter {i} shape mismatch")));
        }
        g.ensure_finite("gradient")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.as_f64();
            let mj = config.beta1 * m[j].as_f64() + (1.0 - config.beta1) * gv;
            let vj = config.beta2 * v[j].as_f64() + (1.0 - config.beta2) * gv * gv;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let updated = pv.as_f64() * decay - lr * m_hat / (v_hat.sqrt() + config.eps);
            *pv = T::from_f64(updated);
        }
    }
    Ok(())
}

/// Cyclic learning-rate schedule with a snapshot stored at every cycle end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub cycle_length: usize,
    pub total_iterations: usize,
    pub snapshots_to_keep: usize,
}

impl ScheduleConfig {
    /// 150,000 iterations, resets every 10,000, last six snapshots kept.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 0.02,
            cycle_length: 10_000,
            total_iterations: 150_000,
            snapshots_to_keep: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if self.cycle_length == 0 || self.total_iterations == 0 || !self.total_iterations.is_multiple_of(self.cycle_length) {
            return Err(Error::invalid(format!(
                "cycle_length {} must divide total_iterations {}",
                self.cycle_length, self.total_iterations
            )));
        }
        if self.snapshots_to_keep == 0 || self.snapshots_to_keep > self.cycles() {
            return Err(Error::invalid(format!(
                "snapshots_to_keep {} must be in 1..={}",
                self.snapshots_to_keep,
                self.cycles()
            )));
        }
        Ok(())
    }

    pub fn cycles(&self) -> usize {
        self.total_iterations / self.cycle_length.max(1)
    }

    /// Completed-iteration counts at which the kept snapshots are stored.
    pub fn ensemble_iterations(&self) -> Vec<usize> {
        let cycles = self.cycles();
        (cycles + 1 - self.snapshots_to_keep.min(cycles)..=cycles)
            .map(|c| c * self.cycle_length)
            .collect()
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            cycle_length: 500,
            total_iterations: 3_000,
            snapshots_to_keep: 3,
        }
    }
}

/// Cosine annealing from `base_lr` towards 0 within each cycle, reset at
/// every cycle start.
pub fn lr_at(schedule: &ScheduleConfig, iteration: usize) -> f64 {
    let phase = (iteration % schedule.cycle_length) as f64 / schedule.cycle_length as f64;
    schedule.base_lr * 0.5 * (1.0 + (PI * phase).cos())
}

/// True when `iteration` completed iterations end a cycle.
pub fn snapshot_due(schedule: &ScheduleConfig, iteration: usize) -> bool {
    iteration > 0 && iteration.is_multiple_of(schedule.cycle_length)
}

/// True when the snapshot at `iteration` belongs to the kept ensemble.
pub fn snapshot_kept(schedule: &ScheduleConfig, iteration: usize) -> bool {
    snapshot_due(schedule, iteration) && schedule.ensemble_iterations().contains(&iteration)
}
