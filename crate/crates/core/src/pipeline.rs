//! Experiment orchestration on disk: phantom generation, training, prediction
//! and analysis. Every random draw is derived from the config's root seed.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! data/case_NNN/            phantom volumes and meta.txt
//! data/folds.txt            test ids per fold
//! runs/<loss>/fold_K/       train_log.csv, snapshot_IIIIII/
//! predictions/<loss>/<mode>/case_NNN/
//! analysis/                 CSVs, summary.txt, maps/*.pgm
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::dcnn::{
    backward, build_network, forward_batch, load_checkpoint, save_checkpoint, NetworkParams, INPUT_CHANNELS,
};
use crate::error::{Error, Result};
use crate::eval::{
    argmax_labels, largest_component_filter, quantile_thresholds, referral_curve_from_labels, reliability_bins,
    ReferralCurve, ReliabilityBins,
};
use crate::losses::{batch_loss, loss_curve_csv, LossKind};
use crate::ops::{softmax_groups, softmax_groups_grad, Mode};
use crate::optim::{adam_step, lr_at, snapshot_kept, AdamState};
use crate::phantom::{
    case_dir_name, folds_from_text, folds_to_text, generate_case, make_folds, preprocess_case, read_case, rot90_image,
    rot90_labels, sample_patch, write_case, FoldSplit, PhantomCase,
};
use crate::rng::RngStream;
use crate::tensor::{LabelMap, Tensor};
use crate::uncertainty::{
    entropy_map, max_variance_map, mc_predict, mean_probs, montage, predict_single, render_pgm, ClassProbMap, Phase,
    UncertaintyKind, UncertaintyMap,
};
use crate::uqt;

const PHANTOM_KEY: u64 = 1;
const TRAIN_KEY: u64 = 2;
const PREDICT_KEY: u64 = 3;
const INIT_KEY: u64 = 0;
const SAMPLE_KEY: u64 = 1;
const DROPOUT_KEY: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PredictMode {
    /// Snapshot ensemble with dropout sampling; yields u-maps.
    Mc,
    /// Last snapshot, dropout off, one pass; yields e-maps.
    Single,
}

impl PredictMode {
    pub const ALL: [PredictMode; 2] = [PredictMode::Single, PredictMode::Mc];

    pub fn tag(self) -> &'static str {
        match self {
            PredictMode::Mc => "mc",
            PredictMode::Single => "single",
        }
    }

    pub fn map_kind(self) -> UncertaintyKind {
        match self {
            PredictMode::Mc => UncertaintyKind::MaxVariance,
            PredictMode::Single => UncertaintyKind::Entropy,
        }
    }
}

impl FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(PredictMode::Mc),
            "single" => Ok(PredictMode::Single),
            _ => Err(Error::invalid(format!("unknown predict mode '{s}' (mc|single)"))),
        }
    }
}

/// Paths of the experiment tree.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            root: config.output_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn case_dir(&self, id: usize) -> PathBuf {
        self.data_dir().join(case_dir_name(id))
    }

    pub fn folds_file(&self) -> PathBuf {
        self.data_dir().join("folds.txt")
    }

    pub fn run_dir(&self, loss: LossKind, fold: usize) -> PathBuf {
        self.root.join("runs").join(loss.tag()).join(format!("fold_{fold}"))
    }

    pub fn snapshot_dir(&self, loss: LossKind, fold: usize, iteration: usize) -> PathBuf {
        self.run_dir(loss, fold).join(format!("snapshot_{iteration:06}"))
    }

    pub fn train_log(&self, loss: LossKind, fold: usize) -> PathBuf {
        self.run_dir(loss, fold).join("train_log.csv")
    }

    pub fn prediction_dir(&self, loss: LossKind, mode: PredictMode, id: usize) -> PathBuf {
        self.root
            .join("predictions")
            .join(loss.tag())
            .join(mode.tag())
            .join(case_dir_name(id))
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing {
            path: path.to_path_buf(),
            what: what.to_string(),
        })
    }
}

fn root_stream(config: &ExperimentConfig) -> RngStream {
    RngStream::new(config.seed, 0)
}

/// Generates `num_cases` phantoms and the fold file; returns the case dirs.
pub fn cmd_phantom(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let layout = Layout::new(config);
    create_dir(&layout.data_dir())?;
    let root = root_stream(config);
    let mut dirs = Vec::with_capacity(config.num_cases);
    for id in 0..config.num_cases {
        let seed = root.derive_path(&[PHANTOM_KEY, id as u64]).next_u64_at_start();
        let case = generate_case(seed, &config.geometry)?;
        let dir = layout.case_dir(id);
        write_case(&dir, &case, seed)?;
        dirs.push(dir);
    }
    let folds = make_folds(config.num_cases, config.training.folds, config.seed)?;
    write_text(&layout.folds_file(), &folds_to_text(&folds))?;
    Ok(dirs)
}

pub fn load_fold(config: &ExperimentConfig, fold: usize) -> Result<FoldSplit> {
    let path = Layout::new(config).folds_file();
    require(&path, "fold file (run `phantom` first)")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    folds_from_text(&text)?
        .into_iter()
        .find(|f| f.fold_id == fold)
        .ok_or_else(|| Error::invalid(format!("fold {fold} not present in {}", path.display())))
}

/// Reads and preprocesses one stored case.
pub fn load_case(config: &ExperimentConfig, id: usize) -> Result<PhantomCase> {
    let dir = Layout::new(config).case_dir(id);
    require(&dir, "phantom case (run `phantom` first)")?;
    preprocess_case(&read_case(&dir)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_time: f64,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,lr,loss,wall_time";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.3}", r.iteration, r.lr, r.loss, r.wall_time);
    }
    out
}

/// Training batch for iteration `it`: random case, slice, quarter-turn and
/// patch location per item.
fn training_batch(
    config: &ExperimentConfig,
    cases: &[PhantomCase],
    rng: &RngStream,
    it: usize,
) -> Result<(Tensor<f32>, LabelMap, LabelMap)> {
    let t = &config.training;
    let (patch, pad_to) = (t.patch_size, config.pad_to());
    let mut input = Vec::with_capacity(t.batch_size * INPUT_CHANNELS * pad_to * pad_to);
    let (mut ed_ref, mut es_ref) = (Vec::new(), Vec::new());
    for b in 0..t.batch_size {
        let stream = rng.derive_path(&[SAMPLE_KEY, it as u64, b as u64]);
        let mut gen = stream.rng();
        let case = &cases[gen.random_range(0..cases.len())];
        let slice = gen.random_range(0..case.slices());
        let k = if t.rotate { gen.random_range(0..4usize) } else { 0 };
        let s = sample_patch(case, slice, patch, pad_to, &stream.derive(0))?;
        input.extend_from_slice(rot90_image(&s.ed_image, k)?.data());
        input.extend_from_slice(rot90_image(&s.es_image, k)?.data());
        ed_ref.push(rot90_labels(&s.ed_ref, k)?);
        es_ref.push(rot90_labels(&s.es_ref, k)?);
    }
    Ok((
        Tensor::new(vec![t.batch_size, INPUT_CHANNELS, pad_to, pad_to], input)?,
        LabelMap::stack(&ed_ref)?,
        LabelMap::stack(&es_ref)?,
    ))
}

/// Runs the full schedule on preprocessed `cases`. `on_snapshot` receives
/// every kept snapshot with its completed-iteration count.
pub fn train_network(
    config: &ExperimentConfig,
    loss: LossKind,
    cases: &[PhantomCase],
    rng: &RngStream,
    mut on_snapshot: impl FnMut(usize, &NetworkParams<f32>) -> Result<()>,
) -> Result<Vec<LogRow>> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    let schedule = &config.training.schedule;
    let mut params = build_network::<f32>(&config.network, &rng.derive(INIT_KEY))?;
    let mut state = AdamState::new(params.trainable());
    let start = Instant::now();
    let mut log = Vec::with_capacity(schedule.total_iterations);
    for it in 0..schedule.total_iterations {
        let lr = lr_at(schedule, it);
        let (input, ed_ref, es_ref) = training_batch(config, cases, rng, it)?;
        let diverged = |e: Error| Error::Diverged {
            iteration: it,
            reason: e.to_string(),
        };
        let pass = forward_batch(
            &params,
            &input,
            Mode::Train,
            &rng.derive_path(&[DROPOUT_KEY, it as u64]),
        )
        .map_err(diverged)?;
        let probs = softmax_groups(&pass.logits)?;
        let (value, grad_probs) = batch_loss(loss, &probs, &ed_ref, &es_ref)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: format!("loss is {value}"),
            });
        }
        let grad_logits = softmax_groups_grad(&probs, &grad_probs)?;
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("forward cache missing"))?;
        let grads = backward(&params, cache, &grad_logits)?;
        adam_step(
            &mut params.trainable_mut(),
            &grads,
            &mut state,
            lr,
            &config.training.adam,
        )
        .map_err(diverged)?;
        params.set_norm_states(pass.norm_states);
        log.push(LogRow {
            iteration: it,
            lr,
            loss: value,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if snapshot_kept(schedule, it + 1) {
            on_snapshot(it + 1, &params)?;
        }
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub snapshots: Vec<PathBuf>,
    pub log: Vec<LogRow>,
}

/// Trains one network on the fold's training cases. All losses of a fold
/// share initialization and sample sequence.
pub fn cmd_train(config: &ExperimentConfig, loss: LossKind, fold: usize) -> Result<TrainSummary> {
    config.validate()?;
    let split = load_fold(config, fold)?;
    let cases = split
        .train_ids
        .iter()
        .map(|&id| load_case(config, id))
        .collect::<Result<Vec<_>>>()?;
    let layout = Layout::new(config);
    let run_dir = layout.run_dir(loss, fold);
    create_dir(&run_dir)?;
    let rng = root_stream(config).derive_path(&[TRAIN_KEY, fold as u64]);
    let mut snapshots = Vec::new();
    let log = train_network(config, loss, &cases, &rng, |iteration, params| {
        let dir = layout.snapshot_dir(loss, fold, iteration);
        save_checkpoint(&dir, params, iteration)?;
        snapshots.push(dir);
        Ok(())
    })?;
    write_text(&layout.train_log(loss, fold), &log_to_csv(&log))?;
    Ok(TrainSummary { snapshots, log })
}

/// Volume prediction of one case: per phase the (mean) probabilities and the
/// uncertainty map.
#[derive(Clone, Debug)]
pub struct CasePrediction {
    pub probs: [ClassProbMap; 2],
    pub umaps: [UncertaintyMap; 2],
    pub samples: usize,
}

fn stack_maps(maps: Vec<UncertaintyMap>) -> Result<UncertaintyMap> {
    let kind = maps[0].kind;
    let values: Vec<Tensor<f32>> = maps.into_iter().map(|m| m.values).collect();
    Ok(UncertaintyMap {
        values: Tensor::stack(&values)?,
        kind,
    })
}

/// Slice-by-slice prediction of a preprocessed case.
pub fn predict_case(
    models: &[NetworkParams<f32>],
    case: &PhantomCase,
    mode: PredictMode,
    samples_per_model: usize,
    rng: &RngStream,
) -> Result<CasePrediction> {
    let mut probs: [Vec<ClassProbMap>; 2] = [Vec::new(), Vec::new()];
    let mut maps: [Vec<UncertaintyMap>; 2] = [Vec::new(), Vec::new()];
    let mut samples = 1;
    for z in 0..case.slices() {
        let ed = case.ed_image.slab(z);
        let es = case.es_image.slab(z);
        match mode {
            PredictMode::Single => {
                let model = models.last().ok_or_else(|| Error::invalid("no model"))?;
                for (p, m) in predict_single(model, &ed, &es)?.into_iter().enumerate() {
                    maps[p].push(entropy_map(&m)?);
                    probs[p].push(m);
                }
            }
            PredictMode::Mc => {
                let stacks = mc_predict(models, &ed, &es, samples_per_model, &rng.derive(z as u64))?;
                for (p, s) in stacks.iter().enumerate() {
                    samples = s.len();
                    probs[p].push(mean_probs(s)?);
                    maps[p].push(max_variance_map(s)?);
                }
            }
        }
    }
    let [ed_p, es_p] = probs;
    let [ed_m, es_m] = maps;
    Ok(CasePrediction {
        probs: [ClassProbMap::stack_slices(&ed_p)?, ClassProbMap::stack_slices(&es_p)?],
        umaps: [stack_maps(ed_m)?, stack_maps(es_m)?],
        samples,
    })
}

/// Hard labels from probabilities, optionally reduced to the largest 3D
/// component per class.
pub fn hard_labels(probs: &ClassProbMap, postprocess: bool) -> Result<LabelMap> {
    let labels = argmax_labels(probs)?;
    if postprocess {
        largest_component_filter(&labels)
    } else {
        Ok(labels)
    }
}

fn map_file(phase: Phase, kind: UncertaintyKind) -> String {
    format!("{}_{}.uqt", phase.tag(), kind.tag())
}

pub fn models_for(config: &ExperimentConfig, loss: LossKind, fold: usize, mode: PredictMode) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(config);
    let mut its = config.training.schedule.ensemble_iterations();
    if mode == PredictMode::Single {
        its = its.split_off(its.len() - 1);
    }
    let dirs: Vec<PathBuf> = its.iter().map(|&i| layout.snapshot_dir(loss, fold, i)).collect();
    for d in &dirs {
        require(&d.join("manifest.txt"), "checkpoint (run `train` first)")?;
    }
    Ok(dirs)
}

/// Predicts every test case of `fold` for the configured losses; returns the
/// written case directories.
pub fn cmd_predict(config: &ExperimentConfig, fold: usize, mode: PredictMode) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let layout = Layout::new(config);
    let split = load_fold(config, fold)?;
    let mut written = Vec::new();
    for &loss in &config.training.losses {
        let dirs = models_for(config, loss, fold, mode)?;
        let models = dirs
            .iter()
            .map(|d| load_checkpoint(d).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        for &id in &split.test_ids {
            let case = load_case(config, id)?;
            let rng = root_stream(config).derive_path(&[PREDICT_KEY, fold as u64, id as u64]);
            let pred = predict_case(&models, &case, mode, config.predict.samples_per_model, &rng)?;
            let out = layout.prediction_dir(loss, mode, id);
            create_dir(&out)?;
            for phase in Phase::BOTH {
                let p = phase.index();
                uqt::write_f32(&out.join(format!("{}_probs.uqt", phase.tag())), &pred.probs[p].probs)?;
                let labels = hard_labels(&pred.probs[p], config.predict.postprocess)?;
                uqt::write_u8(&out.join(format!("{}_labels.uqt", phase.tag())), &labels)?;
                uqt::write_f32(&out.join(map_file(phase, mode.map_kind())), &pred.umaps[p].values)?;
            }
            let mut prov = String::new();
            let _ = writeln!(prov, "mode = {}", mode.tag());
            let _ = writeln!(prov, "fold = {fold}");
            for d in &dirs {
                let rel = d.strip_prefix(&layout.root).unwrap_or(d);
                let _ = writeln!(prov, "model = {}", rel.display());
            }
            let per_model = if mode == PredictMode::Mc {
                config.predict.samples_per_model
            } else {
                1
            };
            let _ = writeln!(prov, "samples_per_model = {per_model}");
            let _ = writeln!(prov, "samples = {}", pred.samples);
            let _ = writeln!(prov, "postprocess = {}", config.predict.postprocess);
            write_text(&out.join("provenance.txt"), &prov)?;
            written.push(out);
        }
    }
    Ok(written)
}

/// Stored prediction of one case in one mode.
#[derive(Clone, Debug)]
pub struct StoredPrediction {
    pub probs: [ClassProbMap; 2],
    pub labels: [LabelMap; 2],
    pub umaps: [UncertaintyMap; 2],
}

pub fn read_prediction(
    config: &ExperimentConfig,
    loss: LossKind,
    mode: PredictMode,
    id: usize,
) -> Result<StoredPrediction> {
    let dir = Layout::new(config).prediction_dir(loss, mode, id);
    require(&dir, "prediction (run `predict` first)")?;
    let kind = mode.map_kind();
    let read = |phase: Phase| -> Result<(ClassProbMap, LabelMap, UncertaintyMap)> {
        let probs = ClassProbMap::new(uqt::read_f32(&dir.join(format!("{}_probs.uqt", phase.tag())))?, phase)?;
        let labels = uqt::read_u8(&dir.join(format!("{}_labels.uqt", phase.tag())))?;
        let values = uqt::read_f32(&dir.join(map_file(phase, kind)))?;
        Ok((probs, labels, UncertaintyMap { values, kind }))
    };
    let (p0, l0, u0) = read(Phase::Ed)?;
    let (p1, l1, u1) = read(Phase::Es)?;
    Ok(StoredPrediction {
        probs: [p0, p1],
        labels: [l0, l1],
        umaps: [u0, u1],
    })
}

/// Quantile used for the headline referral figure: the top 1 % of voxels.
pub const HEADLINE_REFERRAL_QUANTILE: f64 = 99.0;

/// Results for one (loss, map kind) over all analysed test cases.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub loss: LossKind,
    pub mode: PredictMode,
    /// ECE per phase and pooled over both phases.
    pub ece: [f64; 2],
    pub ece_pooled: f64,
    /// Mean per-case Dice (RV, Myo, LV) per phase before referral.
    pub dice: [[f64; 3]; 2],
    /// Same after referring the top 1 % most uncertain voxels.
    pub dice_referred: [[f64; 3]; 2],
    pub frac_referred: [f64; 2],
}

fn mean3(v: &[[f64; 3]; 2]) -> f64 {
    v.iter().flatten().sum::<f64>() / 6.0
}

impl SummaryRow {
    /// Mean foreground Dice over classes and phases.
    pub fn mean_dice(&self) -> f64 {
        mean3(&self.dice)
    }

    pub fn mean_dice_referred(&self) -> f64 {
        mean3(&self.dice_referred)
    }

    pub fn referral_gain(&self) -> f64 {
        self.mean_dice_referred() - self.mean_dice()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSummary {
    pub rows: Vec<SummaryRow>,
}

impl AnalysisSummary {
    pub fn row(&self, loss: LossKind, mode: PredictMode) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.loss == loss && r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "loss mode map ece_ed ece_es ece dice_rv_ed dice_myo_ed dice_lv_ed dice_rv_es dice_myo_es dice_lv_es mean_dice mean_dice_ref1pct gain_ref1pct\n",
        );
        for r in &self.rows {
            let _ = write!(
                out,
                "{} {} {} {:.5} {:.5} {:.5}",
                r.loss.tag(),
                r.mode.tag(),
                r.mode.map_kind().tag(),
                r.ece[0],
                r.ece[1],
                r.ece_pooled
            );
            for d in r.dice.iter().flatten() {
                let _ = write!(out, " {d:.4}");
            }
            let _ = writeln!(
                out,
                " {:.4} {:.4} {:+.4}",
                r.mean_dice(),
                r.mean_dice_referred(),
                r.referral_gain()
            );
        }
        out
    }
}

/// Case ids analysed: the test cases of every configured fold, sorted.
fn analysed_cases(config: &ExperimentConfig) -> Result<Vec<(usize, usize)>> {
    let mut ids = Vec::new();
    for &fold in &config.training.run_folds {
        for id in load_fold(config, fold)?.test_ids {
            ids.push((id, fold));
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

fn write_pgm(path: &Path, volume: &Tensor<f32>, lo: f64, hi: f64) -> Result<()> {
    let (plane, h, w) = montage(volume)?;
    fs::write(path, render_pgm(&plane, h, w, lo, hi)).map_err(|e| Error::io(path, e))
}

fn error_volume(pred: &LabelMap, reference: &LabelMap) -> Result<Tensor<f32>> {
    let data = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| if a == b { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(pred.dims().to_vec(), data)
}

/// Reliability and referral CSVs per (loss, map kind, phase), the
/// loss-for-true-label curve, PGM renders of the first analysed case and the
/// summary table.
pub fn cmd_analyze(config: &ExperimentConfig) -> Result<AnalysisSummary> {
    config.validate()?;
    let layout = Layout::new(config);
    let out = layout.analysis_dir();
    let maps_dir = out.join("maps");
    create_dir(&maps_dir)?;
    let cases = analysed_cases(config)?;
    let references = cases
        .iter()
        .map(|&(id, _)| {
            let c = load_case(config, id)?;
            Ok((c.ed_labels.clone(), c.es_labels.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let quantiles = &config.analysis.referral_quantiles;
    let mut rows = Vec::new();
    for &loss in &config.training.losses {
        for mode in PredictMode::ALL {
            let preds = cases
                .iter()
                .map(|&(id, _)| read_prediction(config, loss, mode, id))
                .collect::<Result<Vec<_>>>()?;
            let kind = mode.map_kind();
            let mut pooled = ReliabilityBins::default();
            let mut ece = [0.0; 2];
            let mut dice = [[0.0; 3]; 2];
            let mut dice_referred = [[0.0; 3]; 2];
            let mut frac_referred = [0.0; 2];
            for phase in Phase::BOTH {
                let p = phase.index();
                let reference = |i: usize| if p == 0 { &references[i].0 } else { &references[i].1 };
                let mut bins = ReliabilityBins::default();
                for (i, pred) in preds.iter().enumerate() {
                    let (b, _) = reliability_bins(&pred.probs[p], reference(i), config.analysis.include_background)?;
                    bins.merge(&b);
                }
                pooled.merge(&bins);
                ece[p] = bins.ece();
                let tag = format!("{}_{}_{}", loss.tag(), kind.tag(), phase.tag());
                write_text(&out.join(format!("reliability_{tag}.csv")), &bins.to_csv())?;

                let values: Vec<f32> = preds
                    .iter()
                    .flat_map(|s| s.umaps[p].values.data().iter().copied())
                    .collect();
                let curve_for = |qs: &[f64]| -> Result<ReferralCurve> {
                    let thresholds = quantile_thresholds(&values, qs)?;
                    let curves = preds
                        .iter()
                        .enumerate()
                        .map(|(i, s)| referral_curve_from_labels(&s.labels[p], reference(i), &s.umaps[p], &thresholds))
                        .collect::<Result<Vec<_>>>()?;
                    ReferralCurve::mean(&curves)
                };
                let curve = curve_for(quantiles)?;
                write_text(&out.join(format!("referral_{tag}.csv")), &curve.to_csv())?;
                let headline = curve_for(&[100.0, HEADLINE_REFERRAL_QUANTILE])?;
                dice[p] = headline.points[0].dice;
                dice_referred[p] = headline.points[1].dice;
                frac_referred[p] = headline.points[1].frac_referred;
            }
            rows.push(SummaryRow {
                loss,
                mode,
                ece,
                ece_pooled: pooled.ece(),
                dice,
                dice_referred,
                frac_referred,
            });
            if config.analysis.render_maps {
                if let Some(first) = preds.first() {
                    for phase in Phase::BOTH {
                        let p = phase.index();
                        let reference = if p == 0 { &references[0].0 } else { &references[0].1 };
                        let stem = format!("{}_{}_{}", loss.tag(), kind.tag(), phase.tag());
                        write_pgm(
                            &maps_dir.join(format!("{stem}.pgm")),
                            &first.umaps[p].values,
                            0.0,
                            kind.upper_bound(),
                        )?;
                        let errors = error_volume(&first.labels[p], reference)?;
                        write_pgm(&maps_dir.join(format!("{stem}_errors.pgm")), &errors, 0.0, 1.0)?;
                    }
                }
            }
        }
    }
    if config.analysis.render_maps {
        if let Some((_, _, case)) = references.first() {
            write_pgm(&maps_dir.join("image_ed.pgm"), &case.ed_image, 0.0, 1.0)?;
            write_pgm(&maps_dir.join("image_es.pgm"), &case.es_image, 0.0, 1.0)?;
        }
    }
    write_text(
        &out.join("loss_curve.csv"),
        &loss_curve_csv(config.analysis.loss_curve_samples),
    )?;
    let summary = AnalysisSummary { rows };
    write_text(&out.join("summary.txt"), &summary.to_text())?;
    Ok(summary)
}

/// Runs `phantom`, then `train`, `predict` (both modes) for every configured
/// loss and fold, then `analyze`.
pub fn run_all(config: &ExperimentConfig) -> Result<AnalysisSummary> {
    cmd_phantom(config)?;
    for &fold in &config.training.run_folds {
        for &loss in &config.training.losses {
            cmd_train(config, loss, fold)?;
        }
        for mode in PredictMode::ALL {
            cmd_predict(config, fold, mode)?;
        }
    }
    cmd_analyze(config)
}
