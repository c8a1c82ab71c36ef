//! Segmentation metrics and analyses: Dice, largest-component
//! post-processing, reliability diagrams and simulated referral.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, NUM_CLASSES};
use crate::uncertainty::{ClassProbMap, UncertaintyMap};

/// Per-voxel argmax; ties go to the lowest class index.
pub fn argmax_labels(probs: &ClassProbMap) -> Result<LabelMap> {
    let n = probs.voxels();
    let p = probs.probs.data();
    let data = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if p[c * n + v] > p[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(probs.spatial_dims().to_vec(), data)
}

fn same_shape(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P∩R| / (|P|+|R|)` for one class; 1 when both sets are empty.
pub fn dice(pred: &LabelMap, reference: &LabelMap, class_id: u8) -> Result<f64> {
    same_shape(pred, reference)?;
    let (mut p, mut r, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(reference.data()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        r += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if p + r == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + r) as f64
    })
}

/// Dice for RV, Myo and LV.
pub fn foreground_dice(pred: &LabelMap, reference: &LabelMap) -> Result<[f64; 3]> {
    Ok([
        dice(pred, reference, 1)?,
        dice(pred, reference, 2)?,
        dice(pred, reference, 3)?,
    ])
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn volume_dims(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [s, h, w] => Ok((s, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(Error::shape(format!("expected a 2D or 3D label map, got {dims:?}"))),
    }
}

/// Keeps, for every foreground class, only its largest 6-connected component
/// (ties: the component containing the smallest linear index); other voxels
/// of that class become background.
///
/// Components are found with a single raster pass of union-find over the
/// backward face neighbours.
pub fn largest_component_filter(labels: &LabelMap) -> Result<LabelMap> {
    let (s, h, w) = volume_dims(labels.dims())?;
    let d = labels.data();
    let n = d.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if d[i] == 0 {
                    continue;
                }
                let link = |j: usize, parent: &mut Vec<usize>| {
                    if d[j] == d[i] {
                        let (a, b) = (find(parent, i), find(parent, j));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi] = lo;
                        }
                    }
                };
                if x > 0 {
                    link(i - 1, &mut parent);
                }
                if y > 0 {
                    link(i - w, &mut parent);
                }
                if z > 0 {
                    link(i - h * w, &mut parent);
                }
            }
        }
    }
    // roots are always the smallest index of their component
    let mut size = vec![0usize; n];
    let mut roots = vec![0usize; n];
    for i in 0..n {
        if d[i] != 0 {
            let r = find(&mut parent, i);
            roots[i] = r;
            size[r] += 1;
        }
    }
    let mut keep = [None::<usize>; NUM_CLASSES];
    for i in 0..n {
        if d[i] != 0 && roots[i] == i {
            let c = d[i] as usize;
            match keep[c] {
                Some(best) if size[best] >= size[i] => {}
                _ => keep[c] = Some(i),
            }
        }
    }
    let out = (0..n)
        .map(|i| {
            let c = d[i];
            if c != 0 && keep[c as usize] != Some(roots[i]) {
                0
            } else {
                c
            }
        })
        .collect();
    LabelMap::new(labels.dims().to_vec(), out)
}

pub const RELIABILITY_BINS: usize = 10;

/// Ten equal-width confidence bins over `[0,1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReliabilityBins {
    pub count: [u64; RELIABILITY_BINS],
    pub confidence_sum: [f64; RELIABILITY_BINS],
    pub true_positives: [u64; RELIABILITY_BINS],
}

impl ReliabilityBins {
    pub fn bin_of(p: f64) -> usize {
        ((p * RELIABILITY_BINS as f64).floor().max(0.0) as usize).min(RELIABILITY_BINS - 1)
    }

    pub fn add(&mut self, p: f64, correct: bool) {
        let b = Self::bin_of(p);
        self.count[b] += 1;
        self.confidence_sum[b] += p;
        self.true_positives[b] += correct as u64;
    }

    pub fn merge(&mut self, other: &ReliabilityBins) {
        for b in 0..RELIABILITY_BINS {
            self.count[b] += other.count[b];
            self.confidence_sum[b] += other.confidence_sum[b];
            self.true_positives[b] += other.true_positives[b];
        }
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum()
    }

    pub fn edges(bin: usize) -> (f64, f64) {
        (
            bin as f64 / RELIABILITY_BINS as f64,
            (bin + 1) as f64 / RELIABILITY_BINS as f64,
        )
    }

    pub fn mean_confidence(&self, bin: usize) -> Option<f64> {
        (self.count[bin] > 0).then(|| self.confidence_sum[bin] / self.count[bin] as f64)
    }

    pub fn tp_fraction(&self, bin: usize) -> Option<f64> {
        (self.count[bin] > 0).then(|| self.true_positives[bin] as f64 / self.count[bin] as f64)
    }

    /// `Σ_b (n_b / N)·|tp_fraction_b − confidence_b|`.
    pub fn ece(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..RELIABILITY_BINS)
            .filter(|&b| self.count[b] > 0)
            .map(|b| {
                let gap = self.tp_fraction(b).unwrap_or(0.0) - self.mean_confidence(b).unwrap_or(0.0);
                self.count[b] as f64 / total as f64 * gap.abs()
            })
            .sum()
    }

    /// Columns `bin_low,bin_high,count,confidence_mean,tp_fraction`; empty
    /// bins report 0 for the means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,confidence_mean,tp_fraction\n");
        for b in 0..RELIABILITY_BINS {
            let (lo, hi) = Self::edges(b);
            let _ = writeln!(
                out,
                "{lo:.1},{hi:.1},{},{:.6},{:.6}",
                self.count[b],
                self.mean_confidence(b).unwrap_or(0.0),
                self.tp_fraction(b).unwrap_or(0.0)
            );
        }
        out
    }
}

/// Deposits every in-scope (voxel, class) probability into its bin with
/// outcome `ref == class`. Foreground classes only unless
/// `include_background`. Returns the bins and their ECE.
pub fn reliability_bins(
    probs: &ClassProbMap,
    reference: &LabelMap,
    include_background: bool,
) -> Result<(ReliabilityBins, f64)> {
    if probs.spatial_dims() != reference.dims() {
        return Err(Error::shape(format!(
            "probs {:?} vs reference {:?}",
            probs.spatial_dims(),
            reference.dims()
        )));
    }
    let n = probs.voxels();
    let p = probs.probs.data();
    let mut bins = ReliabilityBins::default();
    let first = if include_background { 0 } else { 1 };
    for c in first..NUM_CLASSES {
        for (v, &r) in reference.data().iter().enumerate() {
            bins.add(p[c * n + v] as f64, r as usize == c);
        }
    }
    let ece = bins.ece();
    Ok((bins, ece))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferralPoint {
    pub threshold: f64,
    pub frac_referred: f64,
    /// Dice for RV, Myo, LV after correction.
    pub dice: [f64; 3],
}

/// Points ordered by descending threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferralCurve {
    pub points: Vec<ReferralPoint>,
}

impl ReferralCurve {
    /// Pointwise mean of curves sharing the same thresholds.
    pub fn mean(curves: &[ReferralCurve]) -> Result<ReferralCurve> {
        let first = curves.first().ok_or_else(|| Error::invalid("no curves to average"))?;
        let k = curves.len() as f64;
        let mut points = Vec::with_capacity(first.points.len());
        for (i, p0) in first.points.iter().enumerate() {
            let mut frac = 0.0;
            let mut dice = [0.0; 3];
            for c in curves {
                let p = c
                    .points
                    .get(i)
                    .filter(|p| p.threshold == p0.threshold)
                    .ok_or_else(|| Error::shape("curves use different thresholds"))?;
                frac += p.frac_referred;
                for (d, v) in dice.iter_mut().zip(p.dice) {
                    *d += v;
                }
            }
            points.push(ReferralPoint {
                threshold: p0.threshold,
                frac_referred: frac / k,
                dice: dice.map(|d| d / k),
            });
        }
        Ok(ReferralCurve { points })
    }

    /// Columns `threshold,frac_referred,dice_RV,dice_Myo,dice_LV`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,frac_referred,dice_RV,dice_Myo,dice_LV\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:.8},{:.6},{:.6},{:.6},{:.6}",
                p.threshold, p.frac_referred, p.dice[0], p.dice[1], p.dice[2]
            );
        }
        out
    }
}

/// Simulated expert correction starting from hard labels: voxels with
/// uncertainty strictly above each threshold take their reference label.
pub fn referral_curve_from_labels(
    pred: &LabelMap,
    reference: &LabelMap,
    umap: &UncertaintyMap,
    thresholds: &[f64],
) -> Result<ReferralCurve> {
    same_shape(pred, reference)?;
    if umap.values.dims() != reference.dims() {
        return Err(Error::shape("uncertainty map does not match labels"));
    }
    if thresholds.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("referral thresholds must be sorted descending"));
    }
    let u = umap.values.data();
    let n = u.len() as f64;
    let mut corrected = pred.clone();
    let points = thresholds
        .iter()
        .map(|&t| {
            let mut referred = 0usize;
            for (i, &v) in u.iter().enumerate() {
                if v as f64 > t {
                    referred += 1;
                    corrected.set(i, reference.data()[i]);
                }
            }
            Ok(ReferralPoint {
                threshold: t,
                frac_referred: referred as f64 / n,
                dice: foreground_dice(&corrected, reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferralCurve { points })
}

/// Referral starting from the argmax of `pred_probs`.
pub fn referral_curve(
    pred_probs: &ClassProbMap,
    reference: &LabelMap,
    umap: &UncertaintyMap,
    thresholds: &[f64],
) -> Result<ReferralCurve> {
    referral_curve_from_labels(&argmax_labels(pred_probs)?, reference, umap, thresholds)
}

/// Nearest-rank quantiles (percent, descending input gives descending output).
pub fn quantile_thresholds(values: &[f32], percents: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("no uncertainty values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(percents
        .iter()
        .map(|&q| crate::phantom::nearest_rank(&sorted, q) as f64)
        .collect())
}
