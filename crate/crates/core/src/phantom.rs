//! Synthetic cardiac phantoms and the preprocessing applied to every case:
//! in-plane resampling, percentile normalization, 90° rotation augmentation,
//! context-padded patch sampling and cross-validation folds.
//!
//! Label ids: 0 background, 1 RV, 2 myocardium, 3 LV.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{LabelMap, Tensor};
use crate::uqt;

pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;

pub const TARGET_SPACING_MM: f64 = 1.4;

const CASE_STREAM: u64 = 0x5048_414e; // "PHAN"
const FOLD_STREAM: u64 = 0x464f_4c44; // "FOLD"

/// Ranges the generator samples per case.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub grid: usize,
    pub spacing_mm: f64,
    pub slices: (usize, usize),
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    pub rv_span_deg: (f64, f64),
    /// ES/ED ratio of LV cavity radius.
    pub contraction: (f64, f64),
    /// Gaussian noise σ as a fraction of the structure intensity range.
    pub noise_fraction: f64,
    /// Per-harmonic amplitude bound of the multiplicative bias field.
    pub bias_amplitude: f64,
    /// Partial-volume blur σ in voxels (0 disables).
    pub blur_sigma: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            grid: 96,
            spacing_mm: TARGET_SPACING_MM,
            slices: (6, 10),
            lv_radius: (8.0, 16.0),
            myo_thickness: (3.0, 6.0),
            rv_span_deg: (90.0, 180.0),
            contraction: (0.7, 0.85),
            noise_fraction: 0.05,
            bias_amplitude: 0.1,
            blur_sigma: 0.6,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min {
        return Err(Error::invalid(format!(
            "{name} range ({lo}, {hi}) invalid (minimum {min})"
        )));
    }
    Ok(())
}

impl GeometryConfig {
    /// Largest distance from the heart center any structure can reach.
    fn max_extent(&self) -> f64 {
        let outer = self.lv_radius.1 + self.myo_thickness.1;
        outer + rv_thickness_bound(self.lv_radius.1) + CENTER_JITTER
    }

    pub fn validate(&self) -> Result<()> {
        check_range("lv_radius", self.lv_radius, f64::MIN_POSITIVE)?;
        check_range("myo_thickness", self.myo_thickness, 1.0)?;
        check_range("rv_span_deg", self.rv_span_deg, f64::MIN_POSITIVE)?;
        check_range("contraction", self.contraction, f64::MIN_POSITIVE)?;
        if self.rv_span_deg.1 > 360.0 || self.contraction.1 > 1.0 {
            return Err(Error::invalid("rv span must be ≤ 360° and contraction ≤ 1"));
        }
        if self.slices.0 == 0 || self.slices.0 > self.slices.1 {
            return Err(Error::invalid("slice range invalid"));
        }
        if !(self.spacing_mm > 0.0) || self.noise_fraction < 0.0 || self.bias_amplitude < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::invalid(
                "spacing must be positive; noise, bias and blur non-negative",
            ));
        }
        if self.max_extent() + 2.0 > self.grid as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "structures up to {:.1} voxels from center do not fit a {} grid",
                self.max_extent(),
                self.grid
            )));
        }
        Ok(())
    }
}

const CENTER_JITTER: f64 = 4.0;

fn rv_thickness_bound(lv_radius: f64) -> f64 {
    0.9 * lv_radius
}

/// Values drawn for one case; stored in `meta.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseGeometry {
    pub slices: usize,
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub myo_thickness: f64,
    pub rv_direction: f64,
    pub rv_span: f64,
    pub rv_thickness: f64,
    pub contraction: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    /// `[S,H,W]` raw intensities.
    pub ed_image: Tensor<f32>,
    pub es_image: Tensor<f32>,
    /// `[S,H,W]` exact labels.
    pub ed_labels: LabelMap,
    pub es_labels: LabelMap,
    /// In-plane voxel spacing (mm) along (y, x).
    pub spacing: (f64, f64),
    pub geometry: CaseGeometry,
}

impl PhantomCase {
    pub fn slices(&self) -> usize {
        self.ed_image.dims()[0]
    }
}

/// Per-slice shape of one phase.
#[derive(Clone, Copy, Debug)]
struct SliceShape {
    lv: f64,
    myo_outer: f64,
    rv: f64,
}

fn slice_shapes(g: &CaseGeometry, slice: usize, systole: bool) -> SliceShape {
    let t = if g.slices > 1 {
        slice as f64 / (g.slices - 1) as f64
    } else {
        0.0
    };
    // base to apex taper
    let taper = 1.0 - 0.3 * t * t;
    let lv = g.lv_radius * taper;
    let outer = lv + g.myo_thickness;
    let rv = if slice + 1 == g.slices && g.slices > 1 {
        0.0
    } else {
        g.rv_thickness * taper
    };
    if !systole {
        return SliceShape {
            lv,
            myo_outer: outer,
            rv,
        };
    }
    // myocardial area is conserved while the cavity contracts
    let lv_es = lv * g.contraction;
    SliceShape {
        lv: lv_es,
        myo_outer: (lv_es * lv_es + outer * outer - lv * lv).sqrt(),
        rv: rv * g.contraction,
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

fn rasterize(g: &CaseGeometry, shape: SliceShape, grid: usize, out: &mut [u8]) {
    for y in 0..grid {
        for x in 0..grid {
            let dy = y as f64 - g.center.0;
            let dx = x as f64 - g.center.1;
            let d = (dy * dy + dx * dx).sqrt();
            let label = if d <= shape.lv {
                LV
            } else if d <= shape.myo_outer {
                MYO
            } else if shape.rv > 0.0 {
                let delta = wrap_angle(dy.atan2(dx) - g.rv_direction);
                let half = g.rv_span / 2.0;
                if delta.abs() <= half && d <= shape.myo_outer + shape.rv * (PI * delta / g.rv_span).cos() {
                    RV
                } else {
                    BACKGROUND
                }
            } else {
                BACKGROUND
            };
            out[y * grid + x] = label;
        }
    }
}

struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    level: f64,
}

const AIR: f64 = 0.05;
const BODY: f64 = 0.35;
const LEVEL_RV: f64 = 0.75;
const LEVEL_MYO: f64 = 0.2;
const LEVEL_LV: f64 = 0.9;

fn gaussian_blur(img: &mut [f64], grid: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let g = grid as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..g {
        for x in 0..g {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let xx = (x + i as isize - radius).clamp(0, g - 1);
                acc += k * img[(y * g + xx) as usize];
            }
            tmp[(y * g + x) as usize] = acc;
        }
    }
    for y in 0..g {
        for x in 0..g {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = (y + i as isize - radius).clamp(0, g - 1);
                acc += k * tmp[(yy * g + x) as usize];
            }
            img[(y * g + x) as usize] = acc;
        }
    }
}

/// Generates one seeded case. LV is a disk, myocardium the surrounding
/// annulus, RV a crescent abutting the myocardium; the ES phase contracts the
/// cavities radially. Intensities are per-structure levels, blurred, times a
/// two-harmonic bias field, plus Gaussian noise, times a random scanner gain.
pub fn generate_case(seed: u64, config: &GeometryConfig) -> Result<PhantomCase> {
    config.validate()?;
    let mut rng = RngStream::new(seed, CASE_STREAM).rng();
    let grid = config.grid;
    let mid = (grid as f64 - 1.0) / 2.0;
    let lv_radius = rng.random_range(config.lv_radius.0..=config.lv_radius.1);
    let geometry = CaseGeometry {
        slices: rng.random_range(config.slices.0..=config.slices.1),
        center: (
            mid + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
            mid + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
        ),
        lv_radius,
        myo_thickness: rng.random_range(config.myo_thickness.0..=config.myo_thickness.1),
        rv_direction: PI + rng.random_range(-0.35..=0.35),
        rv_span: rng
            .random_range(config.rv_span_deg.0..=config.rv_span_deg.1)
            .to_radians(),
        rv_thickness: rng.random_range(0.5..=1.0) * rv_thickness_bound(lv_radius),
        contraction: rng.random_range(config.contraction.0..=config.contraction.1),
        gain: rng.random_range(300.0..=1200.0),
    };
    let s = geometry.slices;
    let plane = grid * grid;

    let body_radii = (mid * rng.random_range(0.78..=0.92), mid * rng.random_range(0.85..=0.97));
    let heart_reach = geometry.lv_radius + geometry.myo_thickness + geometry.rv_thickness + 3.0;
    let mut blobs = Vec::new();
    while blobs.len() < 2 {
        let angle = rng.random_range(0.0..2.0 * PI);
        let dist = rng.random_range(heart_reach + 6.0..=heart_reach + 16.0);
        let radii = (rng.random_range(4.0..=9.0), rng.random_range(4.0..=9.0));
        let center = (
            geometry.center.0 + dist * angle.sin(),
            geometry.center.1 + dist * angle.cos(),
        );
        if center.0 < 0.0 || center.1 < 0.0 || center.0 >= grid as f64 || center.1 >= grid as f64 {
            continue;
        }
        blobs.push(Blob {
            center,
            radii,
            level: rng.random_range(0.45..=0.65),
        });
    }
    let harmonics: Vec<(f64, f64, f64, f64)> = (1..=2)
        .map(|h| {
            let dir = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.0..=config.bias_amplitude);
            let phase = rng.random_range(0.0..2.0 * PI);
            (h as f64 * dir.cos(), h as f64 * dir.sin(), amp, phase)
        })
        .collect();
    let bias: Vec<f64> = (0..plane)
        .map(|i| {
            let (y, x) = ((i / grid) as f64 / grid as f64, (i % grid) as f64 / grid as f64);
            1.0 + harmonics
                .iter()
                .map(|&(fy, fx, a, p)| a * (2.0 * PI * (fy * y + fx * x) + p).cos())
                .sum::<f64>()
        })
        .collect();
    let sigma = config.noise_fraction * (LEVEL_LV - LEVEL_MYO);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;

    let background: Vec<f64> = (0..plane)
        .map(|i| {
            let (y, x) = ((i / grid) as f64, (i % grid) as f64);
            let ey = (y - mid) / body_radii.0;
            let ex = (x - mid) / body_radii.1;
            let mut level = if ey * ey + ex * ex <= 1.0 { BODY } else { AIR };
            for b in &blobs {
                let by = (y - b.center.0) / b.radii.0;
                let bx = (x - b.center.1) / b.radii.1;
                if by * by + bx * bx <= 1.0 {
                    level = b.level;
                }
            }
            level
        })
        .collect();

    let mut labels = [vec![0u8; s * plane], vec![0u8; s * plane]];
    let mut images = [vec![0f32; s * plane], vec![0f32; s * plane]];
    for phase in 0..2 {
        for z in 0..s {
            let shape = slice_shapes(&geometry, z, phase == 1);
            let lab = &mut labels[phase][z * plane..(z + 1) * plane];
            rasterize(&geometry, shape, grid, lab);
            let mut img: Vec<f64> = lab
                .iter()
                .zip(&background)
                .map(|(&l, &bg)| match l {
                    LV => LEVEL_LV,
                    MYO => LEVEL_MYO,
                    RV => LEVEL_RV,
                    _ => bg,
                })
                .collect();
            gaussian_blur(&mut img, grid, config.blur_sigma);
            for ((dst, v), b) in images[phase][z * plane..(z + 1) * plane].iter_mut().zip(img).zip(&bias) {
                let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *dst = (geometry.gain * (v * b + n)) as f32;
            }
        }
    }
    let dims = vec![s, grid, grid];
    let [ed_l, es_l] = labels;
    let [ed_i, es_i] = images;
    Ok(PhantomCase {
        ed_image: Tensor::new(dims.clone(), ed_i)?,
        es_image: Tensor::new(dims.clone(), es_i)?,
        ed_labels: LabelMap::new(dims.clone(), ed_l)?,
        es_labels: LabelMap::new(dims, es_l)?,
        spacing: (config.spacing_mm, config.spacing_mm),
        geometry,
    })
}

fn resampled_len(len: usize, spacing_in: f64, spacing_out: f64) -> usize {
    ((len as f64 * spacing_in / spacing_out).round() as usize).max(1)
}

/// Source coordinate of output voxel `j`, aligning voxel centers.
fn source_coord(j: usize, spacing_in: f64, spacing_out: f64, len_in: usize) -> f64 {
    let x = (j as f64 + 0.5) * spacing_out / spacing_in - 0.5;
    x.clamp(0.0, (len_in - 1) as f64)
}

fn check_spacings(spacing_in: (f64, f64), spacing_out: f64) -> Result<()> {
    if !(spacing_in.0 > 0.0 && spacing_in.1 > 0.0 && spacing_out > 0.0) {
        return Err(Error::invalid("spacings must be positive"));
    }
    Ok(())
}

/// Bilinear resampling of an `[H,W]` intensity slice to `spacing_out` mm.
/// Output extent is `round(dim·spacing_in/spacing_out)`.
pub fn resample_inplane(image: &Tensor<f32>, spacing_in: (f64, f64), spacing_out: f64) -> Result<Tensor<f32>> {
    check_spacings(spacing_in, spacing_out)?;
    let [h, w] = *image.dims() else {
        return Err(Error::shape("resample_inplane expects [H,W]"));
    };
    let (oh, ow) = (
        resampled_len(h, spacing_in.0, spacing_out),
        resampled_len(w, spacing_in.1, spacing_out),
    );
    let src = image.data();
    let xs: Vec<(usize, usize, f32)> = (0..ow)
        .map(|j| {
            let x = source_coord(j, spacing_in.1, spacing_out, w);
            let x0 = x.floor() as usize;
            (x0, (x0 + 1).min(w - 1), (x - x0 as f64) as f32)
        })
        .collect();
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let y = source_coord(i, spacing_in.0, spacing_out, h);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        for &(x0, x1, fx) in &xs {
            let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Nearest-neighbour resampling for label slices.
pub fn resample_labels_inplane(labels: &LabelMap, spacing_in: (f64, f64), spacing_out: f64) -> Result<LabelMap> {
    check_spacings(spacing_in, spacing_out)?;
    let [h, w] = *labels.dims() else {
        return Err(Error::shape("resample_labels_inplane expects [H,W]"));
    };
    let (oh, ow) = (
        resampled_len(h, spacing_in.0, spacing_out),
        resampled_len(w, spacing_in.1, spacing_out),
    );
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let y = source_coord(i, spacing_in.0, spacing_out, h).round() as usize;
        for j in 0..ow {
            let x = source_coord(j, spacing_in.1, spacing_out, w).round() as usize;
            out.push(labels.data()[y * w + x]);
        }
    }
    LabelMap::new(vec![oh, ow], out)
}

/// Resamples every slice of a case to `spacing_out`.
pub fn resample_case(case: &PhantomCase, spacing_out: f64) -> Result<PhantomCase> {
    if case.spacing == (spacing_out, spacing_out) {
        return Ok(case.clone());
    }
    let images = |v: &Tensor<f32>| -> Result<Tensor<f32>> {
        let parts = (0..v.dims()[0])
            .map(|z| resample_inplane(&v.slab(z), case.spacing, spacing_out))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    };
    let labels = |v: &LabelMap| -> Result<LabelMap> {
        let parts = (0..v.dims()[0])
            .map(|z| resample_labels_inplane(&v.slab(z), case.spacing, spacing_out))
            .collect::<Result<Vec<_>>>()?;
        LabelMap::stack(&parts)
    };
    Ok(PhantomCase {
        ed_image: images(&case.ed_image)?,
        es_image: images(&case.es_image)?,
        ed_labels: labels(&case.ed_labels)?,
        es_labels: labels(&case.es_labels)?,
        spacing: (spacing_out, spacing_out),
        geometry: case.geometry.clone(),
    })
}

/// Nearest-rank percentile of a sorted slice, `pct` in (0, 100].
pub fn nearest_rank(sorted: &[f32], pct: f64) -> f32 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Maps intensities to `[0,1]` by `clamp((x − p5)/(p95 − p5), 0, 1)`, with
/// nearest-rank percentiles over the whole tensor. A degenerate range
/// (`p95 = p5`) maps everything to 0.5.
pub fn normalize_percentile(image: &Tensor<f32>) -> Tensor<f32> {
    let mut sorted = image.data().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = nearest_rank(&sorted, 5.0);
    let hi = nearest_rank(&sorted, 95.0);
    if hi <= lo {
        return image.map(|_| 0.5);
    }
    let range = hi - lo;
    image.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
}

/// Normalized, resampled copy of a raw case, ready for the network.
pub fn preprocess_case(case: &PhantomCase) -> Result<PhantomCase> {
    let mut c = resample_case(case, TARGET_SPACING_MM)?;
    c.ed_image = normalize_percentile(&c.ed_image);
    c.es_image = normalize_percentile(&c.es_image);
    Ok(c)
}

fn rot90_raw<E: Copy>(dims: &[usize], data: &[E], k: usize) -> (Vec<usize>, Vec<E>) {
    let n = dims.len();
    let (h, w) = (dims[n - 2], dims[n - 1]);
    let k = k % 4;
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let plane = h * w;
    let mut out = Vec::with_capacity(data.len());
    for src in data.chunks_exact(plane) {
        for i in 0..oh {
            for j in 0..ow {
                // counter-clockwise: out[i][j] = in[j][w-1-i] for k = 1
                let (y, x) = match k {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                out.push(src[y * w + x]);
            }
        }
    }
    let mut new_dims = dims.to_vec();
    new_dims[n - 2] = oh;
    new_dims[n - 1] = ow;
    (new_dims, out)
}

pub fn rot90_image(image: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    if image.ndim() < 2 {
        return Err(Error::shape("rotation needs at least two dims"));
    }
    let (dims, data) = rot90_raw(image.dims(), image.data(), k);
    Tensor::new(dims, data)
}

pub fn rot90_labels(labels: &LabelMap, k: usize) -> Result<LabelMap> {
    if labels.dims().len() < 2 {
        return Err(Error::shape("rotation needs at least two dims"));
    }
    let (dims, data) = rot90_raw(labels.dims(), labels.data(), k);
    LabelMap::new(dims, data)
}

/// Rotates image and labels by `k`·90° counter-clockwise over the last two axes.
pub fn augment_rot90(image: &Tensor<f32>, labels: &LabelMap, k: usize) -> Result<(Tensor<f32>, LabelMap)> {
    if k > 3 {
        return Err(Error::invalid(format!("rotation count must be 0..=3, got {k}")));
    }
    Ok((rot90_image(image, k)?, rot90_labels(labels, k)?))
}

/// One training sample: context-padded images and the aligned reference.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub ed_image: Tensor<f32>,
    pub es_image: Tensor<f32>,
    pub ed_ref: LabelMap,
    pub es_ref: LabelMap,
    /// Top-left corner of the reference window in slice coordinates.
    pub origin: (isize, isize),
}

fn window<E: Copy>(plane: &[E], h: usize, w: usize, y0: isize, x0: isize, size: usize, fill: E) -> Vec<E> {
    let mut out = vec![fill; size * size];
    for i in 0..size {
        let y = y0 + i as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        for j in 0..size {
            let x = x0 + j as isize;
            if x >= 0 && x < w as isize {
                out[i * size + j] = plane[y as usize * w + x as usize];
            }
        }
    }
    out
}

/// Draws a `patch`×`patch` reference window at a random location of slice
/// `slice_idx`, and the `pad_to`×`pad_to` image window centered on it (image
/// context where available, zeros beyond the slice).
pub fn sample_patch(
    case: &PhantomCase,
    slice_idx: usize,
    patch: usize,
    pad_to: usize,
    rng: &RngStream,
) -> Result<PatchSample> {
    let [s, h, w] = *case.ed_image.dims() else {
        return Err(Error::shape("case images must be [S,H,W]"));
    };
    if slice_idx >= s {
        return Err(Error::invalid(format!("slice {slice_idx} out of range ({s} slices)")));
    }
    if pad_to < patch || !(pad_to - patch).is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "pad_to {pad_to} must exceed patch {patch} by an even margin"
        )));
    }
    let margin = ((pad_to - patch) / 2) as isize;
    let mut gen = rng.rng();
    let pick = |gen: &mut rand_chacha::ChaCha8Rng, extent: usize| -> isize {
        let slack = extent as i64 - patch as i64;
        let offset = if slack >= 0 {
            gen.random_range(0..=slack)
        } else {
            gen.random_range(slack..=0)
        };
        offset as isize
    };
    let y0 = pick(&mut gen, h);
    let x0 = pick(&mut gen, w);
    let plane = h * w;
    let img = |t: &Tensor<f32>| {
        let data = window(
            &t.data()[slice_idx * plane..(slice_idx + 1) * plane],
            h,
            w,
            y0 - margin,
            x0 - margin,
            pad_to,
            0.0,
        );
        Tensor::new(vec![pad_to, pad_to], data)
    };
    let lab = |l: &LabelMap| {
        let data = window(
            &l.data()[slice_idx * plane..(slice_idx + 1) * plane],
            h,
            w,
            y0,
            x0,
            patch,
            BACKGROUND,
        );
        LabelMap::new(vec![patch, patch], data)
    };
    Ok(PatchSample {
        ed_image: img(&case.ed_image)?,
        es_image: img(&case.es_image)?,
        ed_ref: lab(&case.ed_labels)?,
        es_ref: lab(&case.es_labels)?,
        origin: (y0, x0),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Seeded permutation of `0..num_cases` cut into `folds` disjoint test sets.
pub fn make_folds(num_cases: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds == 0 || num_cases == 0 || !num_cases.is_multiple_of(folds) {
        return Err(Error::invalid(format!("{folds} folds do not divide {num_cases} cases")));
    }
    let mut ids: Vec<usize> = (0..num_cases).collect();
    ids.shuffle(&mut RngStream::new(seed, FOLD_STREAM).rng());
    let size = num_cases / folds;
    Ok((0..folds)
        .map(|f| {
            let mut test_ids = ids[f * size..(f + 1) * size].to_vec();
            test_ids.sort_unstable();
            let train_ids = (0..num_cases).filter(|i| !test_ids.contains(i)).collect();
            FoldSplit {
                fold_id: f,
                train_ids,
                test_ids,
            }
        })
        .collect())
}

/// One line per fold, space-separated test ids.
pub fn folds_to_text(folds: &[FoldSplit]) -> String {
    folds
        .iter()
        .map(|f| f.test_ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn folds_from_text(text: &str) -> Result<Vec<FoldSplit>> {
    let tests: Vec<Vec<usize>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| Error::Format(format!("fold file line {}: {e}", n + 1)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let all: Vec<usize> = {
        let mut v: Vec<usize> = tests.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    };
    if all.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::Format("fold file lists a case in two test sets".into()));
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(fold_id, test_ids)| FoldSplit {
            fold_id,
            train_ids: all.iter().copied().filter(|i| !test_ids.contains(i)).collect(),
            test_ids,
        })
        .collect())
}

pub fn case_dir_name(id: usize) -> String {
    format!("case_{id:03}")
}

/// Writes `ed_image.uqt`, `es_image.uqt`, `ed_labels.uqt`, `es_labels.uqt`
/// and `meta.txt` into `dir`.
pub fn write_case(dir: &Path, case: &PhantomCase, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    uqt::write_f32(&dir.join("ed_image.uqt"), &case.ed_image)?;
    uqt::write_f32(&dir.join("es_image.uqt"), &case.es_image)?;
    uqt::write_u8(&dir.join("ed_labels.uqt"), &case.ed_labels)?;
    uqt::write_u8(&dir.join("es_labels.uqt"), &case.es_labels)?;
    let g = &case.geometry;
    let mut meta = String::new();
    let _ = writeln!(meta, "spacing = {},{}", case.spacing.0, case.spacing.1);
    let _ = writeln!(meta, "seed = {seed}");
    let _ = writeln!(meta, "slices = {}", g.slices);
    let _ = writeln!(meta, "center = {:.4},{:.4}", g.center.0, g.center.1);
    let _ = writeln!(meta, "lv_radius = {:.4}", g.lv_radius);
    let _ = writeln!(meta, "myo_thickness = {:.4}", g.myo_thickness);
    let _ = writeln!(meta, "rv_direction = {:.4}", g.rv_direction);
    let _ = writeln!(meta, "rv_span = {:.4}", g.rv_span);
    let _ = writeln!(meta, "rv_thickness = {:.4}", g.rv_thickness);
    let _ = writeln!(meta, "contraction = {:.4}", g.contraction);
    let _ = writeln!(meta, "gain = {:.4}", g.gain);
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

pub fn read_case(dir: &Path) -> Result<PhantomCase> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let field = |key: &str| -> Result<Vec<f64>> {
        let line = meta
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .ok_or_else(|| Error::Format(format!("{}: missing '{key}'", meta_path.display())))?;
        line.1
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{key}: {e}")))
            })
            .collect()
    };
    let spacing = field("spacing")?;
    let center = field("center")?;
    if spacing.len() != 2 || center.len() != 2 {
        return Err(Error::Format("spacing and center need two values".into()));
    }
    let one = |key: &str| -> Result<f64> { Ok(field(key)?[0]) };
    let case = PhantomCase {
        ed_image: uqt::read_f32(&dir.join("ed_image.uqt"))?,
        es_image: uqt::read_f32(&dir.join("es_image.uqt"))?,
        ed_labels: uqt::read_u8(&dir.join("ed_labels.uqt"))?,
        es_labels: uqt::read_u8(&dir.join("es_labels.uqt"))?,
        spacing: (spacing[0], spacing[1]),
        geometry: CaseGeometry {
            slices: one("slices")? as usize,
            center: (center[0], center[1]),
            lv_radius: one("lv_radius")?,
            myo_thickness: one("myo_thickness")?,
            rv_direction: one("rv_direction")?,
            rv_span: one("rv_span")?,
            rv_thickness: one("rv_thickness")?,
            contraction: one("contraction")?,
            gain: one("gain")?,
        },
    };
    let d = case.ed_image.dims();
    if case.es_image.dims() != d || case.ed_labels.dims() != d || case.es_labels.dims() != d {
        return Err(Error::Format(format!(
            "{}: image and label shapes differ",
            dir.display()
        )));
    }
    Ok(case)
}
