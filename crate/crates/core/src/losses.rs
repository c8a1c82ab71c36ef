//! Cross-entropy, soft-Dice and Brier losses over per-phase class
//! probabilities, with exact gradients w.r.t. the probabilities.
//!
//! All losses take `probs` shaped `[4, ...]` (class axis first) and a label
//! map whose dims equal the trailing dims of `probs`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::activation::GROUPED_CHANNELS;
use crate::tensor::{LabelMap, Real, Tensor, NUM_CLASSES};

pub const CE_FLOOR: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    CrossEntropy,
    SoftDice,
    Brier,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::CrossEntropy, LossKind::SoftDice, LossKind::Brier];

    /// Short tag used on the command line and in file names.
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::SoftDice => "sd",
            LossKind::Brier => "bs",
        }
    }

    pub fn evaluate<T: Real>(self, probs: &Tensor<T>, labels: &LabelMap) -> Result<(f64, Tensor<T>)> {
        match self {
            LossKind::CrossEntropy => cross_entropy(probs, labels),
            LossKind::SoftDice => soft_dice(probs, labels),
            LossKind::Brier => brier(probs, labels),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "sd" | "soft_dice" => Ok(LossKind::SoftDice),
            "bs" | "brier" => Ok(LossKind::Brier),
            other => Err(Error::invalid(format!(
                "unknown loss '{other}' (expected ce, sd or bs)"
            ))),
        }
    }
}

fn voxels<T: Real>(probs: &Tensor<T>, labels: &LabelMap) -> Result<usize> {
    if probs.dims().first() != Some(&NUM_CLASSES) || &probs.dims()[1..] != labels.dims() {
        return Err(Error::shape(format!(
            "probs {:?} do not match labels {:?}",
            probs.dims(),
            labels.dims()
        )));
    }
    Ok(labels.len())
}

/// Mean over voxels of `−ln max(p_true, 1e-12)`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &LabelMap) -> Result<(f64, Tensor<T>)> {
    let n = voxels(probs, labels)?;
    let p = probs.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0;
    for (v, &c) in labels.data().iter().enumerate() {
        let idx = c as usize * n + v;
        let pt = p[idx].as_f64();
        if pt > CE_FLOOR {
            total -= pt.ln();
            grad[idx] = T::from_f64(-1.0 / (pt * n as f64));
        } else {
            total -= CE_FLOOR.ln();
        }
    }
    Ok((total / n as f64, Tensor::new(probs.dims().to_vec(), grad)?))
}

/// Mean over voxels and classes of `(p_c − onehot_c)²`.
pub fn brier<T: Real>(probs: &Tensor<T>, labels: &LabelMap) -> Result<(f64, Tensor<T>)> {
    let n = voxels(probs, labels)?;
    let p = probs.data();
    let denom = (n * NUM_CLASSES) as f64;
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0;
    for (v, &label) in labels.data().iter().enumerate() {
        for c in 0..NUM_CLASSES {
            let idx = c * n + v;
            let target = if c == label as usize { 1.0 } else { 0.0 };
            let diff = p[idx].as_f64() - target;
            total += diff * diff;
            grad[idx] = T::from_f64(2.0 * diff / denom);
        }
    }
    Ok((total / denom, Tensor::new(probs.dims().to_vec(), grad)?))
}

/// `1 − mean_{c∈{1,2,3}} (2Σp·g + ε)/(Σp² + Σg² + ε)`; background is not scored.
pub fn soft_dice<T: Real>(probs: &Tensor<T>, labels: &LabelMap) -> Result<(f64, Tensor<T>)> {
    let n = voxels(probs, labels)?;
    let p = probs.data();
    let l = labels.data();
    let foreground = (NUM_CLASSES - 1) as f64;
    let mut grad = vec![T::zero(); p.len()];
    let mut dice_sum = 0.0;
    for c in 1..NUM_CLASSES {
        let pc = &p[c * n..(c + 1) * n];
        let (mut inter, mut p_sq, mut g_sum) = (0.0, 0.0, 0.0);
        for (&pv, &lv) in pc.iter().zip(l) {
            let pv = pv.as_f64();
            p_sq += pv * pv;
            if lv as usize == c {
                inter += pv;
                g_sum += 1.0;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = p_sq + g_sum + DICE_EPS;
        dice_sum += num / den;
        for (v, (&pv, &lv)) in pc.iter().zip(l).enumerate() {
            let g = if lv as usize == c { 1.0 } else { 0.0 };
            let d_dice = 2.0 * g / den - num * 2.0 * pv.as_f64() / (den * den);
            grad[c * n + v] = T::from_f64(-d_dice / foreground);
        }
    }
    Ok((1.0 - dice_sum / foreground, Tensor::new(probs.dims().to_vec(), grad)?))
}

/// Extracts the `[4, N, H, W]` probabilities of one phase from `[N, 8, H, W]`.
pub fn phase_probs<T: Real>(probs: &Tensor<T>, phase: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = *probs.dims() else {
        return Err(Error::shape("expected [N,8,H,W] probabilities"));
    };
    if c != GROUPED_CHANNELS || phase > 1 {
        return Err(Error::shape("expected 8 channels and phase 0 or 1"));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); NUM_CLASSES * n * hw];
    for i in 0..n {
        for k in 0..NUM_CLASSES {
            let src = (i * c + phase * NUM_CLASSES + k) * hw;
            let dst = (k * n + i) * hw;
            out[dst..dst + hw].copy_from_slice(&probs.data()[src..src + hw]);
        }
    }
    Tensor::new(vec![NUM_CLASSES, n, h, w], out)
}

/// Training objective for a batch: the chosen loss evaluated per phase
/// (ED, ES) over the whole batch, then averaged. Returns the gradient
/// w.r.t. the `[N,8,H,W]` probabilities.
pub fn batch_loss<T: Real>(
    kind: LossKind,
    probs: &Tensor<T>,
    ed_labels: &LabelMap,
    es_labels: &LabelMap,
) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = *probs.dims() else {
        return Err(Error::shape("expected [N,8,H,W] probabilities"));
    };
    let hw = h * w;
    let mut grad = vec![T::zero(); probs.len()];
    let mut total = 0.0;
    for (phase, labels) in [ed_labels, es_labels].into_iter().enumerate() {
        if labels.dims() != [n, h, w] {
            return Err(Error::shape(format!(
                "labels {:?} vs probs {:?}",
                labels.dims(),
                probs.dims()
            )));
        }
        let (value, g) = kind.evaluate(&phase_probs(probs, phase)?, labels)?;
        total += 0.5 * value;
        for i in 0..n {
            for k in 0..NUM_CLASSES {
                let dst = (i * c + phase * NUM_CLASSES + k) * hw;
                let src = (k * n + i) * hw;
                for (d, &s) in grad[dst..dst + hw].iter_mut().zip(&g.data()[src..src + hw]) {
                    *d = s * T::from_f64(0.5);
                }
            }
        }
    }
    Ok((total, Tensor::new(probs.dims().to_vec(), grad)?))
}

/// One point of the loss-versus-confidence diagnostic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrueLabelLoss {
    pub p_true: f64,
    pub loss: f64,
}

/// Single-voxel loss as a function of the probability given to the true
/// (foreground) class, the remaining mass spread evenly over the other three.
///
/// For soft-Dice only the true class's Dice term is scored: with a single
/// voxel the absent classes have empty references and their ε-smoothed terms
/// carry no information about the true label.
pub fn loss_for_true_label_curve(kind: LossKind, samples: usize) -> Vec<TrueLabelLoss> {
    (1..=samples)
        .map(|i| {
            let p = i as f64 / samples as f64;
            let rest = (1.0 - p) / 3.0;
            let loss = match kind {
                LossKind::CrossEntropy => -p.max(CE_FLOOR).ln(),
                LossKind::Brier => ((1.0 - p).powi(2) + 3.0 * rest * rest) / NUM_CLASSES as f64,
                LossKind::SoftDice => 1.0 - (2.0 * p + DICE_EPS) / (p * p + 1.0 + DICE_EPS),
            };
            TrueLabelLoss { p_true: p, loss }
        })
        .collect()
}

/// CSV with columns `p_true,ce,sd,bs`.
pub fn loss_curve_csv(samples: usize) -> String {
    let ce = loss_for_true_label_curve(LossKind::CrossEntropy, samples);
    let sd = loss_for_true_label_curve(LossKind::SoftDice, samples);
    let bs = loss_for_true_label_curve(LossKind::Brier, samples);
    let mut out = String::from("p_true,ce,sd,bs\n");
    for ((a, b), c) in ce.iter().zip(&sd).zip(&bs) {
        out.push_str(&format!("{:.6},{:.9},{:.9},{:.9}\n", a.p_true, a.loss, b.loss, c.loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: [f64; 4], label: u8) -> (Tensor<f64>, LabelMap) {
        (
            Tensor::new(vec![4, 1], p.to_vec()).unwrap(),
            LabelMap::new(vec![1], vec![label]).unwrap(),
        )
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (p, l) = single([0.0, 1.0, 0.0, 0.0], 1);
        assert_eq!(cross_entropy(&p, &l).unwrap().0, 0.0);
        let (p, l) = single([0.25; 4], 2);
        assert!((cross_entropy(&p, &l).unwrap().0 - 4f64.ln()).abs() < 1e-12);
        let (p, l) = single([0.5, 0.5, 0.0, 0.0], 0);
        assert!((cross_entropy(&p, &l).unwrap().0 - 2f64.ln()).abs() < 1e-12);
        let (p, l) = single([1.0, 0.0, 0.0, 0.0], 3);
        let (v, g) = cross_entropy(&p, &l).unwrap();
        assert!((v + CE_FLOOR.ln()).abs() < 1e-9);
        assert!(g.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn brier_reference_values() {
        let (p, l) = single([0.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(brier(&p, &l).unwrap().0, 0.0);
        for label in 0..4 {
            let (p, l) = single([0.25; 4], label);
            assert!((brier(&p, &l).unwrap().0 - 0.1875).abs() < 1e-12);
        }
        let (p, l) = single([0.5, 0.5, 0.0, 0.0], 0);
        assert!((brier(&p, &l).unwrap().0 - 0.125).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_reference_values() {
        let labels = LabelMap::new(vec![4], vec![0, 1, 2, 3]).unwrap();
        let mut onehot = Tensor::<f64>::zeros(&[4, 4]);
        for v in 0..4 {
            onehot.data_mut()[v * 4 + v] = 1.0;
        }
        assert!(soft_dice(&onehot, &labels).unwrap().0.abs() < 1e-9);

        // one voxel of class 1 with p = 0.25, other foreground classes empty
        let (p, l) = single([0.25; 4], 1);
        let (loss, _) = soft_dice(&p, &l).unwrap();
        let dice1 = (0.5 + DICE_EPS) / (1.0625 + DICE_EPS);
        assert!((dice1 - 0.470588).abs() < 1e-5);
        let empty = DICE_EPS / (0.0625 + DICE_EPS);
        assert!((loss - (1.0 - (dice1 + 2.0 * empty) / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn curves_start_at_zero_for_confident_truth() {
        for kind in LossKind::ALL {
            let curve = loss_for_true_label_curve(kind, 100);
            assert!(curve.last().unwrap().loss.abs() < 1e-9, "{kind}");
        }
        let csv = loss_curve_csv(4);
        assert!(csv.starts_with("p_true,ce,sd,bs\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn parse_tags() {
        for kind in LossKind::ALL {
            assert_eq!(kind.tag().parse::<LossKind>().unwrap(), kind);
        }
        assert!("focal".parse::<LossKind>().is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = Tensor::<f64>::full(&[4, 3], 0.25);
        let l = LabelMap::zeros(&[2]);
        assert!(cross_entropy(&p, &l).is_err());
        assert!(soft_dice(&Tensor::<f64>::full(&[3, 2], 0.3), &l).is_err());
    }
}
