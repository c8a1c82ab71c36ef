//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code.

#![allow(dead_code)]

use std::collections::VecDeque;

/// Direct nested-loop valid dilated convolution of one `[C,H,W]` image.
pub fn conv_nested(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    d: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = h - (k - 1) * d;
    let ow = w - (k - 1) * d;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weights[((o * c_in + c) * k + ky) * k + kx];
                            acc += wv * input[(c * h + y + ky * d) * w + x + kx * d];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Largest-component filter by breadth-first search: per class keep the
/// biggest 6-connected component (first found wins ties, search starts in
/// raster order).
pub fn bfs_largest_component(labels: &[u8], s: usize, h: usize, w: usize) -> Vec<u8> {
    let n = labels.len();
    let mut comp = vec![usize::MAX; n];
    let mut sizes: Vec<(u8, usize)> = Vec::new();
    for start in 0..n {
        if labels[start] == 0 || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let class = labels[start];
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        comp[start] = id;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut nbrs = Vec::with_capacity(6);
            if z > 0 {
                nbrs.push(i - h * w);
            }
            if z + 1 < s {
                nbrs.push(i + h * w);
            }
            if y > 0 {
                nbrs.push(i - w);
            }
            if y + 1 < h {
                nbrs.push(i + w);
            }
            if x > 0 {
                nbrs.push(i - 1);
            }
            if x + 1 < w {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if labels[j] == class && comp[j] == usize::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push((class, size));
    }
    let mut best = [None::<usize>; 4];
    for (id, &(class, size)) in sizes.iter().enumerate() {
        let b = &mut best[class as usize];
        if b.map_or(true, |old| sizes[old].1 < size) {
            *b = Some(id);
        }
    }
    (0..n)
        .map(|i| {
            let c = labels[i];
            if c != 0 && best[c as usize] != Some(comp[i]) {
                0
            } else {
                c
            }
        })
        .collect()
}

/// Textbook Adam with decoupled weight decay, written independently.
pub struct ReferenceAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, wd: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            wd,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        for i in 0..p.len() {
            p[i] -= lr * self.wd * p[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.beta2.powi(self.t));
            p[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Two-pass (mean first, then squared deviations) population variance.
pub fn two_pass_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Dice of one class by counting.
pub fn dice_count(pred: &[u8], reference: &[u8], class: u8) -> f64 {
    let p = pred.iter().filter(|&&v| v == class).count();
    let r = reference.iter().filter(|&&v| v == class).count();
    let both = pred
        .iter()
        .zip(reference)
        .filter(|(a, b)| **a == class && **b == class)
        .count();
    if p + r == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + r) as f64
    }
}

/// Every subset of the wrong voxels corrected, scored: returns, per subset
/// bitmask, the per-class Dice (RV, Myo, LV).
pub fn enumerate_corrections(pred: &[u8], reference: &[u8]) -> (Vec<usize>, Vec<[f64; 3]>) {
    let wrong: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != reference[i]).collect();
    let subsets = 1usize << wrong.len();
    let scores = (0..subsets)
        .map(|mask| {
            let mut fixed = pred.to_vec();
            for (b, &i) in wrong.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    fixed[i] = reference[i];
                }
            }
            [
                dice_count(&fixed, reference, 1),
                dice_count(&fixed, reference, 2),
                dice_count(&fixed, reference, 3),
            ]
        })
        .collect();
    (wrong, scores)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += h;
    let mut minus = x.to_vec();
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Below 1e-6 in magnitude the comparison is absolute.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Small deterministic generator for test data (xorshift64*), independent of
/// the library's streams.
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Random point on the probability simplex with `k` entries.
    pub fn simplex(&mut self, k: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..k).map(|_| -self.uniform().max(1e-300).ln()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

pub fn seeded(seed: u64) -> TestRng {
    TestRng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
}

/// Small experiment (6 phantoms at 48², 17-voxel receptive field, 40
/// iterations) that runs the whole pipeline in seconds.
pub const TINY_CONFIG: &str = "\
[phantom]
num_cases = 6
grid = 48
slices = 2, 3
lv_radius = 4, 6
myo_thickness = 2, 3

[network]
kernels = 3, 3, 3, 3, 3, 3, 3, 3, 1, 1
dilations = 1, 1, 1, 1, 1, 1, 1, 1, 1, 1
channels = 4
receptive_field = 17

[training]
folds = 3
iterations = 40
cycle_length = 10
snapshots_to_keep = 3
patch_size = 16

[predict]
samples_per_model = 2

[analysis]
loss_curve_samples = 50
";
