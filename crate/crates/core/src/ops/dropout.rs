use rand::RngCore;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// Kept units and the survivor rescaling `1/(1−rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn all_kept(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            scale: 1.0,
        }
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| !k).count() as f64 / self.keep.len().max(1) as f64
    }

    /// Draws a mask of `len` units from the start of `rng`.
    pub fn sample(len: usize, rate: f64, rng: &RngStream) -> Self {
        // 32-bit uniform draws, two per u64
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mut gen = rng.rng();
        let mut keep = Vec::with_capacity(len);
        while keep.len() < len {
            let r = gen.next_u64();
            keep.push((r & 0xFFFF_FFFF) >= threshold);
            if keep.len() < len {
                keep.push((r >> 32) >= threshold);
            }
        }
        Self {
            keep,
            scale: 1.0 / (1.0 - rate),
        }
    }

    pub fn apply<T: Real>(&self, x: &mut [T]) {
        let s = T::from_f64(self.scale);
        for (v, &k) in x.iter_mut().zip(&self.keep) {
            *v = if k { *v * s } else { T::zero() };
        }
    }
}

/// Inverted dropout. `Train` and `Mc` zero each unit with probability `rate`
/// and rescale survivors; `Eval` is the identity.
pub fn dropout<T: Real>(input: &Tensor<T>, rate: f64, mode: Mode, rng: &RngStream) -> Result<(Tensor<T>, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0,1), got {rate}")));
    }
    if !mode.dropout_active() || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::all_kept(input.len())));
    }
    let mask = DropoutMask::sample(input.len(), rate, rng);
    let mut out = input.clone();
    mask.apply(out.data_mut());
    Ok((out, mask))
}

pub fn dropout_grad<T: Real>(grad_out: &Tensor<T>, mask: &DropoutMask) -> Result<Tensor<T>> {
    if grad_out.len() != mask.keep.len() {
        return Err(Error::shape("dropout mask length mismatch"));
    }
    let mut g = grad_out.clone();
    mask.apply(g.data_mut());
    Ok(g)
}
