//! MC-dropout sampling over snapshot ensembles and the two voxelwise
//! uncertainty maps: multi-class entropy (e-map) and maximum class variance
//! across samples (u-map).

use std::fmt;

use rayon::prelude::*;

use crate::dcnn::{forward, pad_input, NetworkParams};
use crate::error::{Error, Result};
use crate::ops::{softmax_groups, Mode};
use crate::rng::RngStream;
use crate::tensor::{Tensor, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Ed,
    Es,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Ed, Phase::Es];

    pub fn index(self) -> usize {
        match self {
            Phase::Ed => 0,
            Phase::Es => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Phase::Ed => "ed",
            Phase::Es => "es",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

pub const NORMALIZATION_TOLERANCE: f32 = 1e-5;

/// Per-voxel class distribution for one phase, `[4, ...spatial]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbMap {
    pub probs: Tensor<f32>,
    pub phase: Phase,
}

impl ClassProbMap {
    /// Validates the class axis and per-voxel normalization.
    pub fn new(probs: Tensor<f32>, phase: Phase) -> Result<Self> {
        if probs.ndim() < 2 || probs.dims()[0] != NUM_CLASSES {
            return Err(Error::shape(format!(
                "class map must be [4,...], got {:?}",
                probs.dims()
            )));
        }
        let n = probs.len() / NUM_CLASSES;
        let p = probs.data();
        for v in 0..n {
            let mut total = 0.0;
            for c in 0..NUM_CLASSES {
                let x = p[c * n + v];
                if !(-NORMALIZATION_TOLERANCE..=1.0 + NORMALIZATION_TOLERANCE).contains(&x) {
                    return Err(Error::invalid(format!("probability {x} out of [0,1] at voxel {v}")));
                }
                total += x;
            }
            if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::invalid(format!("probabilities sum to {total} at voxel {v}")));
            }
        }
        Ok(Self { probs, phase })
    }

    pub fn spatial_dims(&self) -> &[usize] {
        &self.probs.dims()[1..]
    }

    pub fn voxels(&self) -> usize {
        self.probs.len() / NUM_CLASSES
    }

    pub fn prob(&self, class: usize, voxel: usize) -> f32 {
        self.probs.data()[class * self.voxels() + voxel]
    }

    /// Stacks per-slice maps `[4,H,W]` into a volume `[4,S,H,W]`.
    pub fn stack_slices(slices: &[ClassProbMap]) -> Result<ClassProbMap> {
        let first = slices.first().ok_or_else(|| Error::shape("no slices to stack"))?;
        let plane = first.voxels();
        let s = slices.len();
        let mut data = vec![0f32; NUM_CLASSES * s * plane];
        for (z, m) in slices.iter().enumerate() {
            if m.spatial_dims() != first.spatial_dims() || m.phase != first.phase {
                return Err(Error::shape("slices differ in shape or phase"));
            }
            for c in 0..NUM_CLASSES {
                let dst = (c * s + z) * plane;
                data[dst..dst + plane].copy_from_slice(&m.probs.data()[c * plane..(c + 1) * plane]);
            }
        }
        let mut dims = vec![NUM_CLASSES, s];
        dims.extend_from_slice(first.spatial_dims());
        Ok(ClassProbMap {
            probs: Tensor::new(dims, data)?,
            phase: first.phase,
        })
    }
}

/// `T` stochastic probability maps of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStack {
    pub samples: Vec<ClassProbMap>,
    /// `(model index, samples drawn from it)`.
    pub provenance: Vec<(usize, usize)>,
}

impl SampleStack {
    pub fn new(samples: Vec<ClassProbMap>, provenance: Vec<(usize, usize)>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("sample stack needs T ≥ 1"))?;
        if samples
            .iter()
            .any(|s| s.probs.dims() != first.probs.dims() || s.phase != first.phase)
        {
            return Err(Error::shape("samples differ in shape or phase"));
        }
        Ok(Self { samples, provenance })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UncertaintyKind {
    Entropy,
    MaxVariance,
}

impl UncertaintyKind {
    /// Largest attainable value: `ln 4` for entropy, `1/4` for a variance of
    /// values in `[0,1]`.
    pub fn upper_bound(self) -> f64 {
        match self {
            UncertaintyKind::Entropy => (NUM_CLASSES as f64).ln(),
            UncertaintyKind::MaxVariance => 0.25,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            UncertaintyKind::Entropy => "emap",
            UncertaintyKind::MaxVariance => "umap",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub values: Tensor<f32>,
    pub kind: UncertaintyKind,
}

/// Softmax probabilities `[8,H,W]` for an unpadded slice pair; the slices are
/// zero-padded by the network's context so the output matches their extent.
pub fn slice_probs(
    params: &NetworkParams<f32>,
    ed: &Tensor<f32>,
    es: &Tensor<f32>,
    mode: Mode,
    rng: &RngStream,
) -> Result<Tensor<f32>> {
    let pad = params.config.context_pad();
    let logits = forward(params, &pad_input(ed, pad)?, &pad_input(es, pad)?, mode, rng)?;
    softmax_groups(&logits)
}

fn split_phases(probs: &Tensor<f32>) -> Result<[ClassProbMap; 2]> {
    let spatial = probs.dims()[1..].to_vec();
    let half = probs.len() / 2;
    let mut dims = vec![NUM_CLASSES];
    dims.extend_from_slice(&spatial);
    let ed = Tensor::new(dims.clone(), probs.data()[..half].to_vec())?;
    let es = Tensor::new(dims, probs.data()[half..].to_vec())?;
    Ok([ClassProbMap::new(ed, Phase::Ed)?, ClassProbMap::new(es, Phase::Es)?])
}

/// Deterministic prediction with dropout disabled: one forward pass.
pub fn predict_single(params: &NetworkParams<f32>, ed: &Tensor<f32>, es: &Tensor<f32>) -> Result<[ClassProbMap; 2]> {
    split_phases(&slice_probs(params, ed, es, Mode::Eval, &RngStream::new(0, 0))?)
}

/// MC-dropout sampling: `samples_per_model` stochastic passes per model,
/// sample `(m, s)` drawing from `rng.derive_path(&[m, s])`. Returns the ED
/// and ES stacks with `T = models × samples_per_model`.
pub fn mc_predict(
    models: &[NetworkParams<f32>],
    ed: &Tensor<f32>,
    es: &Tensor<f32>,
    samples_per_model: usize,
    rng: &RngStream,
) -> Result<[SampleStack; 2]> {
    if models.is_empty() || samples_per_model == 0 {
        return Err(Error::invalid("mc_predict needs at least one model and one sample"));
    }
    let rf = models[0].receptive_field();
    if models.iter().any(|m| m.receptive_field() != rf) {
        return Err(Error::shape("ensemble members disagree on receptive field"));
    }
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..samples_per_model).map(move |s| (m, s)))
        .collect();
    let maps = jobs
        .par_iter()
        .map(|&(m, s)| {
            let stream = rng.derive_path(&[m as u64, s as u64]);
            split_phases(&slice_probs(&models[m], ed, es, Mode::Mc, &stream)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance: Vec<(usize, usize)> = (0..models.len()).map(|m| (m, samples_per_model)).collect();
    let (mut ed_s, mut es_s) = (Vec::with_capacity(maps.len()), Vec::with_capacity(maps.len()));
    for [a, b] in maps {
        ed_s.push(a);
        es_s.push(b);
    }
    Ok([
        SampleStack::new(ed_s, provenance.clone())?,
        SampleStack::new(es_s, provenance)?,
    ])
}

/// Voxelwise arithmetic mean over the stack.
pub fn mean_probs(stack: &SampleStack) -> Result<ClassProbMap> {
    let first = stack
        .samples
        .first()
        .ok_or_else(|| Error::invalid("empty sample stack"))?;
    let mut acc = vec![0f64; first.probs.len()];
    for s in &stack.samples {
        for (a, &p) in acc.iter_mut().zip(s.probs.data()) {
            *a += p as f64;
        }
    }
    let t = stack.samples.len() as f64;
    let data = acc.into_iter().map(|a| (a / t) as f32).collect();
    ClassProbMap::new(Tensor::new(first.probs.dims().to_vec(), data)?, first.phase)
}

/// `−Σ_c p_c ln p_c` per voxel (natural log, `0·ln 0 = 0`).
pub fn entropy_map(probs: &ClassProbMap) -> Result<UncertaintyMap> {
    let n = probs.voxels();
    let p = probs.probs.data();
    let values = (0..n)
        .map(|v| {
            let h: f64 = (0..NUM_CLASSES)
                .map(|c| p[c * n + v] as f64)
                .filter(|&x| x > 0.0)
                .map(|x| -x * x.ln())
                .sum();
            h.max(0.0) as f32
        })
        .collect();
    Ok(UncertaintyMap {
        values: Tensor::new(probs.spatial_dims().to_vec(), values)?,
        kind: UncertaintyKind::Entropy,
    })
}

/// Per voxel: population variance of each class probability over the `T`
/// samples (single-pass Welford), then the maximum over classes.
pub fn max_variance_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    if stack.samples.len() < 2 {
        return Err(Error::invalid("max-variance map needs at least two samples"));
    }
    let first = &stack.samples[0];
    let len = first.probs.len();
    let n = first.voxels();
    let mut mean = vec![0f64; len];
    let mut m2 = vec![0f64; len];
    for (k, s) in stack.samples.iter().enumerate() {
        let count = (k + 1) as f64;
        for ((mu, sq), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(s.probs.data()) {
            let x = x as f64;
            let delta = x - *mu;
            *mu += delta / count;
            *sq += delta * (x - *mu);
        }
    }
    let t = stack.samples.len() as f64;
    let values = (0..n)
        .map(|v| {
            (0..NUM_CLASSES)
                .map(|c| (m2[c * n + v] / t).max(0.0))
                .fold(0.0, f64::max) as f32
        })
        .collect();
    Ok(UncertaintyMap {
        values: Tensor::new(first.spatial_dims().to_vec(), values)?,
        kind: UncertaintyKind::MaxVariance,
    })
}

/// Binary PGM (P5) of an `[H,W]` plane, linearly mapping `[lo,hi]` to `[0,255]`.
pub fn render_pgm(plane: &[f32], h: usize, w: usize, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(plane[..h * w].iter().map(|&v| {
        let t = ((v as f64 - lo) / span).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }));
    out
}

/// Tiles the slices of an `[S,H,W]` volume left to right into one plane.
pub fn montage(volume: &Tensor<f32>) -> Result<(Vec<f32>, usize, usize)> {
    let [s, h, w] = *volume.dims() else {
        return Err(Error::shape("montage expects [S,H,W]"));
    };
    let mut out = vec![0f32; h * w * s];
    for z in 0..s {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = y * w * s + z * w;
            out[dst..dst + w].copy_from_slice(&volume.data()[src..src + w]);
        }
    }
    Ok((out, h, w * s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[[f32; 4]]) -> ClassProbMap {
        let n = values.len();
        let mut data = vec![0f32; 4 * n];
        for (v, p) in values.iter().enumerate() {
            for c in 0..4 {
                data[c * n + v] = p[c];
            }
        }
        ClassProbMap::new(Tensor::new(vec![4, n], data).unwrap(), Phase::Ed).unwrap()
    }

    #[test]
    fn rejects_unnormalized() {
        let t = Tensor::new(vec![4, 1], vec![0.5f32, 0.5, 0.5, 0.0]).unwrap();
        assert!(ClassProbMap::new(t, Phase::Es).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        let m = map(&[[0.25; 4], [0.0, 1.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]]);
        let e = entropy_map(&m).unwrap();
        assert!((e.values.data()[0] as f64 - 4f64.ln()).abs() < 1e-6);
        assert_eq!(e.values.data()[1], 0.0);
        assert!((e.values.data()[2] as f64 - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn mean_and_variance_reference_values() {
        let a = map(&[[1.0, 0.0, 0.0, 0.0]]);
        let b = map(&[[0.0, 1.0, 0.0, 0.0]]);
        let stack = SampleStack::new(vec![a.clone(), b], vec![(0, 2)]).unwrap();
        assert_eq!(mean_probs(&stack).unwrap().probs.data(), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(max_variance_map(&stack).unwrap().values.data(), &[0.25]);

        let same = SampleStack::new(vec![a.clone(), a.clone(), a.clone()], vec![(0, 3)]).unwrap();
        assert_eq!(mean_probs(&same).unwrap(), a);
        assert_eq!(max_variance_map(&same).unwrap().values.data(), &[0.0]);
        let single = SampleStack::new(vec![a], vec![(0, 1)]).unwrap();
        assert!(max_variance_map(&single).is_err());
    }

    #[test]
    fn pgm_header_and_scale() {
        let bytes = render_pgm(&[0.0, 0.125, 0.25], 1, 3, 0.0, 0.25);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn montage_tiles_slices() {
        let v = Tensor::<f32>::from_fn(&[2, 1, 2], |i| i as f32);
        let (plane, h, w) = montage(&v).unwrap();
        assert_eq!((h, w), (1, 4));
        assert_eq!(plane, vec![0.0, 1.0, 2.0, 3.0]);
    }
}
