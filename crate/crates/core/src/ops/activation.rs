use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, NUM_CLASSES};

/// Logit channels: two phases (ED, ES) of four classes each.
pub const GROUPED_CHANNELS: usize = 2 * NUM_CLASSES;

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.max(T::zero()))
}

pub fn relu_grad<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.dims() != input.dims() {
        return Err(Error::shape("relu_grad shape mismatch"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

fn group_layout(dims: &[usize]) -> Result<(usize, usize)> {
    let (batch, c, rest) = match dims {
        [c, rest @ ..] if dims.len() == 3 => (1, *c, rest.iter().product::<usize>()),
        [n, c, rest @ ..] if dims.len() == 4 => (*n, *c, rest.iter().product::<usize>()),
        _ => {
            return Err(Error::shape(format!(
                "softmax_groups expects [8,H,W] or [N,8,H,W], got {dims:?}"
            )))
        }
    };
    if c != GROUPED_CHANNELS {
        return Err(Error::shape(format!(
            "softmax_groups needs {GROUPED_CHANNELS} channels, got {c}"
        )));
    }
    Ok((batch, rest))
}

/// Max-stabilized softmax over each 4-channel phase group, independently per voxel.
pub fn softmax_groups<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, hw) = group_layout(logits.dims())?;
    let z = logits.data();
    let mut out = vec![T::zero(); z.len()];
    for b in 0..batch {
        for g in 0..2 {
            let base = (b * GROUPED_CHANNELS + g * NUM_CLASSES) * hw;
            for v in 0..hw {
                let at = |c: usize| base + c * hw + v;
                let m = (0..NUM_CLASSES).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for c in 0..NUM_CLASSES {
                    let e = (z[at(c)] - m).exp();
                    out[at(c)] = e;
                    total += e;
                }
                for c in 0..NUM_CLASSES {
                    out[at(c)] /= total;
                }
            }
        }
    }
    Tensor::new(logits.dims().to_vec(), out)
}

/// Chains a gradient w.r.t. probabilities back to the logits:
/// `dz_i = p_i (g_i − Σ_j g_j p_j)` within each group.
pub fn softmax_groups_grad<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.dims() != grad_probs.dims() {
        return Err(Error::shape("softmax_groups_grad shape mismatch"));
    }
    let (batch, hw) = group_layout(probs.dims())?;
    let p = probs.data();
    let g = grad_probs.data();
    let mut out = vec![T::zero(); p.len()];
    for b in 0..batch {
        for grp in 0..2 {
            let base = (b * GROUPED_CHANNELS + grp * NUM_CLASSES) * hw;
            for v in 0..hw {
                let at = |c: usize| base + c * hw + v;
                let dot: T = (0..NUM_CLASSES).map(|c| g[at(c)] * p[at(c)]).sum();
                for c in 0..NUM_CLASSES {
                    out[at(c)] = p[at(c)] * (g[at(c)] - dot);
                }
            }
        }
    }
    Tensor::new(probs.dims().to_vec(), out)
}
