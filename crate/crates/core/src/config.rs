//! Plain-text experiment configuration: `key = value` lines grouped under
//! `[section]` headers, `#` comments. Keys left out take the desk defaults.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dcnn::NetworkConfig;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::optim::{AdamConfig, ScheduleConfig};
use crate::phantom::GeometryConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub losses: Vec<LossKind>,
    pub folds: usize,
    /// Folds processed when a command is not given an explicit fold.
    pub run_folds: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Side of the reference window; images carry `receptive_field − 1`
    /// extra context.
    pub patch_size: usize,
    pub rotate: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            losses: LossKind::ALL.to_vec(),
            folds: 3,
            run_folds: vec![0],
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 2,
            patch_size: 48,
            rotate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub samples_per_model: usize,
    pub postprocess: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            samples_per_model: 10,
            postprocess: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    /// Percent quantiles of the pooled uncertainty values used as referral
    /// thresholds, descending.
    pub referral_quantiles: Vec<f64>,
    pub include_background: bool,
    pub loss_curve_samples: usize,
    pub render_maps: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            referral_quantiles: vec![100.0, 99.5, 99.0, 98.0, 97.0, 96.0, 95.0, 92.5, 90.0, 85.0, 80.0],
            include_background: false,
            loss_curve_samples: 1000,
            render_maps: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub num_cases: usize,
    pub geometry: GeometryConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub predict: PredictConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    /// Desk scale: 12 phantoms in 3 folds (8 train / 4 test), fold 0 only.
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("uncseg_out"),
            num_cases: 12,
            geometry: GeometryConfig::default(),
            network: NetworkConfig::desk(),
            training: TrainingConfig::default(),
            predict: PredictConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full network and schedule: 100 cases, 4 folds, 150,000 iterations.
    pub fn full_scale() -> Self {
        Self {
            num_cases: 100,
            network: NetworkConfig::default(),
            training: TrainingConfig {
                folds: 4,
                run_folds: vec![0, 1, 2, 3],
                schedule: ScheduleConfig::full_scale(),
                batch_size: 16,
                patch_size: 151,
                ..TrainingConfig::default()
            },
            ..Self::default()
        }
    }

    /// Side of the context-padded training image window.
    pub fn pad_to(&self) -> usize {
        self.training.patch_size + self.network.declared_receptive_field - 1
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.network.validate()?;
        self.training.schedule.validate()?;
        let t = &self.training;
        if t.losses.is_empty() {
            return Err(Error::invalid("no losses selected"));
        }
        if t.folds < 2 || !self.num_cases.is_multiple_of(t.folds) {
            return Err(Error::invalid(format!(
                "{} folds must be ≥ 2 and divide {} cases",
                t.folds, self.num_cases
            )));
        }
        if let Some(f) = t.run_folds.iter().find(|&&f| f >= t.folds) {
            return Err(Error::invalid(format!("fold {f} out of range")));
        }
        if t.batch_size == 0 || t.patch_size == 0 {
            return Err(Error::invalid("batch and patch size must be positive"));
        }
        if self.predict.samples_per_model == 0 {
            return Err(Error::invalid("samples_per_model must be positive"));
        }
        let q = &self.analysis.referral_quantiles;
        if q.is_empty() || q.iter().any(|v| !(0.0..=100.0).contains(v)) || q.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("referral quantiles must be descending percentages"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let g = &self.geometry;
        let n = &self.network;
        let t = &self.training;
        let pair = |p: (f64, f64)| format!("{}, {}", p.0, p.1);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            s,
            "[experiment]\nseed = {}\noutput_dir = {}\n",
            self.seed,
            self.output_dir.display()
        );
        let _ = writeln!(
            s,
            "[phantom]\nnum_cases = {}\ngrid = {}\nspacing_mm = {}",
            self.num_cases, g.grid, g.spacing_mm
        );
        let _ = writeln!(s, "slices = {}, {}", g.slices.0, g.slices.1);
        let _ = writeln!(
            s,
            "lv_radius = {}\nmyo_thickness = {}",
            pair(g.lv_radius),
            pair(g.myo_thickness)
        );
        let _ = writeln!(
            s,
            "rv_span_deg = {}\ncontraction = {}",
            pair(g.rv_span_deg),
            pair(g.contraction)
        );
        let _ = writeln!(
            s,
            "noise_fraction = {}\nbias_amplitude = {}\nblur_sigma = {}\n",
            g.noise_fraction, g.bias_amplitude, g.blur_sigma
        );
        let _ = writeln!(
            s,
            "[network]\nkernels = {}\ndilations = {}",
            list(&n.layer_kernels),
            list(&n.layer_dilations)
        );
        let _ = writeln!(
            s,
            "channels = {}\ndropout_rate = {}\nreceptive_field = {}\n",
            n.channels, n.dropout_rate, n.declared_receptive_field
        );
        let losses = t.losses.iter().map(|l| l.tag()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            s,
            "[training]\nlosses = {losses}\nfolds = {}\nrun_folds = {}",
            t.folds,
            list(&t.run_folds)
        );
        let sc = &t.schedule;
        let _ = writeln!(
            s,
            "iterations = {}\ncycle_length = {}\nsnapshots_to_keep = {}\nbase_lr = {}",
            sc.total_iterations, sc.cycle_length, sc.snapshots_to_keep, sc.base_lr
        );
        let a = &t.adam;
        let _ = writeln!(
            s,
            "beta1 = {}\nbeta2 = {}\nadam_eps = {}\nweight_decay = {}",
            a.beta1, a.beta2, a.eps, a.weight_decay
        );
        let _ = writeln!(
            s,
            "batch_size = {}\npatch_size = {}\nrotate = {}\n",
            t.batch_size, t.patch_size, t.rotate
        );
        let _ = writeln!(
            s,
            "[predict]\nsamples_per_model = {}\npostprocess = {}\n",
            self.predict.samples_per_model, self.predict.postprocess
        );
        let an = &self.analysis;
        let q = an
            .referral_quantiles
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let _ = write!(
            s,
            "[analysis]\nreferral_quantiles = {q}\ninclude_background = {}\nloss_curve_samples = {}\nrender_maps = {}\n",
            an.include_background, an.loss_curve_samples, an.render_maps
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| Error::Config { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header '{content}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(err(format!("key '{key}' appears before any section header")));
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(err(format!("duplicate key '{key}' in [{section}]")));
            }
            cfg.set(&section, key, value).map_err(err)?;
        }
        cfg.validate().map_err(|e| Error::Config {
            line: text.lines().count(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let g = &mut self.geometry;
        let n = &mut self.network;
        let t = &mut self.training;
        match (section, key) {
            ("experiment", "seed") => self.seed = scalar(key, v)?,
            ("experiment", "output_dir") => {
                if v.is_empty() {
                    return Err("output_dir must not be empty".into());
                }
                self.output_dir = PathBuf::from(v)
            }
            ("phantom", "num_cases") => self.num_cases = scalar(key, v)?,
            ("phantom", "grid") => g.grid = scalar(key, v)?,
            ("phantom", "spacing_mm") => g.spacing_mm = scalar(key, v)?,
            ("phantom", "slices") => g.slices = pair(key, v)?,
            ("phantom", "lv_radius") => g.lv_radius = pair(key, v)?,
            ("phantom", "myo_thickness") => g.myo_thickness = pair(key, v)?,
            ("phantom", "rv_span_deg") => g.rv_span_deg = pair(key, v)?,
            ("phantom", "contraction") => g.contraction = pair(key, v)?,
            ("phantom", "noise_fraction") => g.noise_fraction = scalar(key, v)?,
            ("phantom", "bias_amplitude") => g.bias_amplitude = scalar(key, v)?,
            ("phantom", "blur_sigma") => g.blur_sigma = scalar(key, v)?,
            ("network", "kernels") => n.layer_kernels = values(key, v)?,
            ("network", "dilations") => n.layer_dilations = values(key, v)?,
            ("network", "channels") => n.channels = scalar(key, v)?,
            ("network", "dropout_rate") => n.dropout_rate = scalar(key, v)?,
            ("network", "receptive_field") => n.declared_receptive_field = scalar(key, v)?,
            ("training", "losses") => t.losses = values(key, v)?,
            ("training", "folds") => t.folds = scalar(key, v)?,
            ("training", "run_folds") => t.run_folds = values(key, v)?,
            ("training", "iterations") => t.schedule.total_iterations = scalar(key, v)?,
            ("training", "cycle_length") => t.schedule.cycle_length = scalar(key, v)?,
            ("training", "snapshots_to_keep") => t.schedule.snapshots_to_keep = scalar(key, v)?,
            ("training", "base_lr") => t.schedule.base_lr = scalar(key, v)?,
            ("training", "beta1") => t.adam.beta1 = scalar(key, v)?,
            ("training", "beta2") => t.adam.beta2 = scalar(key, v)?,
            ("training", "adam_eps") => t.adam.eps = scalar(key, v)?,
            ("training", "weight_decay") => t.adam.weight_decay = scalar(key, v)?,
            ("training", "batch_size") => t.batch_size = scalar(key, v)?,
            ("training", "patch_size") => t.patch_size = scalar(key, v)?,
            ("training", "rotate") => t.rotate = scalar(key, v)?,
            ("predict", "samples_per_model") => self.predict.samples_per_model = scalar(key, v)?,
            ("predict", "postprocess") => self.predict.postprocess = scalar(key, v)?,
            ("analysis", "referral_quantiles") => self.analysis.referral_quantiles = values(key, v)?,
            ("analysis", "include_background") => self.analysis.include_background = scalar(key, v)?,
            ("analysis", "loss_curve_samples") => self.analysis.loss_curve_samples = scalar(key, v)?,
            ("analysis", "render_maps") => self.analysis.render_maps = scalar(key, v)?,
            _ => return Err(format!("unknown key '{key}' in [{section}]")),
        }
        Ok(())
    }
}

const SECTIONS: [&str; 6] = ["experiment", "phantom", "network", "training", "predict", "analysis"];

fn scalar<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("{key}: cannot parse '{v}': {e}"))
}

fn values<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| scalar(key, s))
        .collect()
}

fn pair<T: FromStr + Copy>(key: &str, v: &str) -> std::result::Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    match values::<T>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("{key}: expected two comma-separated values, got '{v}'")),
    }
}
