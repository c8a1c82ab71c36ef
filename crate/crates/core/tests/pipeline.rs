mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use common::TINY_CONFIG;
use uncseg::config::ExperimentConfig;
use uncseg::error::Error;
use uncseg::losses::LossKind;
use uncseg::optim::lr_at;
use uncseg::phantom::{folds_from_text, read_case};
use uncseg::pipeline::{
    cmd_analyze, cmd_phantom, cmd_predict, cmd_train, read_prediction, run_all, Layout, PredictMode,
};
use uncseg::uncertainty::UncertaintyKind;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::parse(TINY_CONFIG).unwrap();
    config.output_dir = dir.to_path_buf();
    config
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn phantom_command_is_reproducible_and_folds_cover_all_cases() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let dirs = cmd_phantom(&tiny(a.path())).unwrap();
    assert_eq!(dirs.len(), 6);
    for d in &dirs {
        let case = read_case(d).unwrap();
        assert_eq!(case.ed_image.dims(), case.es_image.dims());
    }
    cmd_phantom(&tiny(b.path())).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    // rerunning in place rewrites identical bytes
    let before = files(a.path());
    cmd_phantom(&tiny(a.path())).unwrap();
    assert_eq!(before, files(a.path()));

    let folds = folds_from_text(&fs::read_to_string(Layout::new(&tiny(a.path())).folds_file()).unwrap()).unwrap();
    assert_eq!(folds.len(), 3);
    let mut ids: Vec<usize> = folds.iter().flat_map(|f| f.test_ids.clone()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..6).collect::<Vec<_>>());
    for f in &folds {
        assert_eq!(f.train_ids.len() + f.test_ids.len(), 6);
        assert!(f.train_ids.iter().all(|id| !f.test_ids.contains(id)));
    }
}

#[test]
fn train_logs_schedule_and_keeps_last_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    cmd_phantom(&config).unwrap();
    let summary = cmd_train(&config, LossKind::Brier, 0).unwrap();
    assert_eq!(summary.log.len(), 40);
    for row in &summary.log {
        assert_eq!(row.lr, lr_at(&config.training.schedule, row.iteration));
        assert!(row.loss.is_finite());
    }
    let layout = Layout::new(&config);
    let kept: Vec<PathBuf> = [20, 30, 40]
        .iter()
        .map(|&i| layout.snapshot_dir(LossKind::Brier, 0, i))
        .collect();
    assert_eq!(summary.snapshots, kept);
    assert!(!layout.snapshot_dir(LossKind::Brier, 0, 10).exists());
    let log = fs::read_to_string(layout.train_log(LossKind::Brier, 0)).unwrap();
    assert_eq!(log.lines().next(), Some("iteration,lr,loss,wall_time"));
    assert_eq!(log.lines().count(), 41);

    let again = cmd_train(&config, LossKind::Brier, 0).unwrap();
    let strip = |rows: &[uncseg::pipeline::LogRow]| -> Vec<(usize, f64, f64)> {
        rows.iter().map(|r| (r.iteration, r.lr, r.loss)).collect()
    };
    assert_eq!(strip(&summary.log), strip(&again.log));
}

#[test]
fn predict_records_sample_count_and_single_mode_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.training.losses = vec![LossKind::CrossEntropy];
    cmd_phantom(&config).unwrap();
    cmd_train(&config, LossKind::CrossEntropy, 0).unwrap();

    let written = cmd_predict(&config, 0, PredictMode::Mc).unwrap();
    assert_eq!(written.len(), 2);
    let prov = fs::read_to_string(written[0].join("provenance.txt")).unwrap();
    assert!(prov.contains("samples = 6\n"), "{prov}");
    assert_eq!(prov.lines().filter(|l| l.starts_with("model = ")).count(), 3);

    let single = cmd_predict(&config, 0, PredictMode::Single).unwrap();
    let first = files(&single[0]);
    cmd_predict(&config, 0, PredictMode::Single).unwrap();
    assert_eq!(first, files(&single[0]));
    let prov = fs::read_to_string(single[0].join("provenance.txt")).unwrap();
    assert!(prov.contains("samples = 1\n"), "{prov}");

    let id: usize = written[0].file_name().unwrap().to_str().unwrap()[5..].parse().unwrap();
    let mc = read_prediction(&config, LossKind::CrossEntropy, PredictMode::Mc, id).unwrap();
    let case = read_case(&Layout::new(&config).case_dir(id)).unwrap();
    assert_eq!(mc.labels[0].dims(), case.ed_labels.dims());
    assert_eq!(mc.umaps[0].kind, UncertaintyKind::MaxVariance);
    assert!(mc.umaps[1]
        .values
        .data()
        .iter()
        .all(|&v| (0.0..=0.25 + 1e-6).contains(&v)));
}

#[test]
fn analyze_writes_every_table_and_referral_starts_at_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let summary = run_all(&config).unwrap();
    let out = Layout::new(&config).analysis_dir();
    for loss in LossKind::ALL {
        for kind in ["emap", "umap"] {
            for phase in ["ed", "es"] {
                let tag = format!("{}_{kind}_{phase}", loss.tag());
                let rel = fs::read_to_string(out.join(format!("reliability_{tag}.csv"))).unwrap();
                assert_eq!(rel.lines().count(), 11);
                let bins: Vec<Vec<f64>> = rel
                    .lines()
                    .skip(1)
                    .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
                    .collect();
                let total: f64 = bins.iter().map(|b| b[2]).sum();
                let ece_from_csv: f64 = bins.iter().map(|b| b[2] / total * (b[3] - b[4]).abs()).sum();
                let referral = fs::read_to_string(out.join(format!("referral_{tag}.csv"))).unwrap();
                let rows: Vec<Vec<f64>> = referral
                    .lines()
                    .skip(1)
                    .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
                    .collect();
                assert_eq!(rows.len(), config.analysis.referral_quantiles.len());
                // first threshold is the maximum: nothing is referred
                assert_eq!(rows[0][1], 0.0);
                let mode = if kind == "emap" {
                    PredictMode::Single
                } else {
                    PredictMode::Mc
                };
                let row = summary.row(loss, mode).unwrap();
                let p = if phase == "ed" { 0 } else { 1 };
                assert!((row.ece[p] - ece_from_csv).abs() < 1e-5, "{} vs {ece_from_csv}", row.ece[p]);
                for c in 0..3 {
                    assert!((rows[0][2 + c] - row.dice[p][c]).abs() <= 5e-7);
                }
            }
        }
        for mode in PredictMode::ALL {
            let row = summary.row(loss, mode).unwrap();
            assert!((0.0..=1.0).contains(&row.ece_pooled));
        }
    }
    assert!(out.join("loss_curve.csv").exists());
    assert!(out.join("maps/image_ed.pgm").exists());
    let text = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert_eq!(text, summary.to_text());
}

#[test]
fn commands_report_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    assert!(matches!(
        cmd_train(&config, LossKind::SoftDice, 0),
        Err(Error::Missing { .. })
    ));
    assert!(matches!(
        cmd_predict(&config, 0, PredictMode::Mc),
        Err(Error::Missing { .. })
    ));
    assert!(matches!(cmd_analyze(&config), Err(Error::Missing { .. })));
    cmd_phantom(&config).unwrap();
    assert!(matches!(
        cmd_predict(&config, 0, PredictMode::Single),
        Err(Error::Missing { .. })
    ));
    assert!(matches!(cmd_analyze(&config), Err(Error::Missing { .. })));
    assert!(cmd_train(&config, LossKind::SoftDice, 7).is_err());
}
