use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics carried between training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

struct Layout {
    n: usize,
    c: usize,
    hw: usize,
}

fn layout<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<Layout> {
    let [n, c, h, w] = *input.dims() else {
        return Err(Error::shape(format!(
            "batch norm expects [N,C,H,W], got {:?}",
            input.dims()
        )));
    };
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", &state.running_mean),
        ("running_var", &state.running_var),
    ] {
        if t.dims() != [c] {
            return Err(Error::shape(format!("{name} {:?} vs {c} channels", t.dims())));
        }
    }
    Ok(Layout { n, c, hw: h * w })
}

/// Per-channel (mean, population variance), accumulated in f64.
fn batch_stats<T: Real>(x: &[T], l: &Layout) -> Vec<(f64, f64)> {
    let count = (l.n * l.hw) as f64;
    (0..l.c)
        .map(|ch| {
            let mut sum = 0.0;
            for i in 0..l.n {
                let base = (i * l.c + ch) * l.hw;
                sum += x[base..base + l.hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..l.n {
                let base = (i * l.c + ch) * l.hw;
                sq += x[base..base + l.hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean, sq / count)
        })
        .collect()
}

fn stats_for_mode<T: Real>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
    l: &Layout,
) -> Result<Vec<(f64, f64)>> {
    if mode.uses_batch_stats() {
        if l.n * l.hw < 2 {
            return Err(Error::invalid("batch norm in train mode needs N·H·W ≥ 2"));
        }
        Ok(batch_stats(input.data(), l))
    } else {
        Ok(state
            .running_mean
            .data()
            .iter()
            .zip(state.running_var.data())
            .map(|(m, v)| (m.as_f64(), v.as_f64()))
            .collect())
    }
}

/// Normalizes `[N,C,H,W]` per channel, then applies `gamma·x̂ + beta`.
///
/// Train mode uses batch statistics and returns running statistics updated
/// with momentum [`BN_MOMENTUM`]; other modes use (and return unchanged) the
/// running statistics.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormState<T>)> {
    let l = layout(input, gamma, beta, state)?;
    let stats = stats_for_mode(input, state, mode, &l)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for (ch, &(mean, var)) in stats.iter().enumerate() {
        let inv = 1.0 / (var + BN_EPS).sqrt();
        let scale = T::from_f64(gamma.data()[ch].as_f64() * inv);
        let shift = T::from_f64(beta.data()[ch].as_f64() - gamma.data()[ch].as_f64() * mean * inv);
        for i in 0..l.n {
            let base = (i * l.c + ch) * l.hw;
            for (o, &v) in out[base..base + l.hw].iter_mut().zip(&x[base..base + l.hw]) {
                *o = v * scale + shift;
            }
        }
    }
    let new_state = if mode.uses_batch_stats() {
        let m = BN_MOMENTUM;
        BatchNormState {
            running_mean: Tensor::from_fn(&[l.c], |ch| {
                T::from_f64((1.0 - m) * state.running_mean.data()[ch].as_f64() + m * stats[ch].0)
            }),
            running_var: Tensor::from_fn(&[l.c], |ch| {
                T::from_f64((1.0 - m) * state.running_var.data()[ch].as_f64() + m * stats[ch].1)
            }),
        }
    } else {
        state.clone()
    };
    Ok((Tensor::new(input.dims().to_vec(), out)?, new_state))
}

/// Backward pass; `state` must be the statistics passed to the forward call.
pub fn batch_norm_grad<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<BatchNormGrads<T>> {
    let l = layout(input, gamma, gamma, state)?;
    if grad_out.dims() != input.dims() {
        return Err(Error::shape(format!(
            "grad_out {:?} vs input {:?}",
            grad_out.dims(),
            input.dims()
        )));
    }
    let stats = stats_for_mode(input, state, mode, &l)?;
    let x = input.data();
    let dy = grad_out.data();
    let count = (l.n * l.hw) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); l.c];
    let mut dbeta = vec![T::zero(); l.c];
    for (ch, &(mean, var)) in stats.iter().enumerate() {
        let inv = 1.0 / (var + BN_EPS).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..l.n {
            let base = (i * l.c + ch) * l.hw;
            for (&g, &v) in dy[base..base + l.hw].iter().zip(&x[base..base + l.hw]) {
                let g = g.as_f64();
                sum_dy += g;
                sum_dy_xhat += g * (v.as_f64() - mean) * inv;
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);
        let g_scale = gamma.data()[ch].as_f64() * inv;
        let (mean_dy, mean_dy_xhat) = if mode.uses_batch_stats() {
            (sum_dy / count, sum_dy_xhat / count)
        } else {
            (0.0, 0.0)
        };
        for i in 0..l.n {
            let base = (i * l.c + ch) * l.hw;
            for ((d, &g), &v) in dx[base..base + l.hw]
                .iter_mut()
                .zip(&dy[base..base + l.hw])
                .zip(&x[base..base + l.hw])
            {
                let xhat = (v.as_f64() - mean) * inv;
                *d = T::from_f64(g_scale * (g.as_f64() - mean_dy - xhat * mean_dy_xhat));
            }
        }
    }
    Ok(BatchNormGrads {
        grad_input: Tensor::new(input.dims().to_vec(), dx)?,
        grad_gamma: Tensor::new(vec![l.c], dgamma)?,
        grad_beta: Tensor::new(vec![l.c], dbeta)?,
    })
}
