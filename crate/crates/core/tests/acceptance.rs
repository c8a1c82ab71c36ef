//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criterion 7 trains the desk experiment for five
//! seeds and dominates the runtime (about 10 min per seed on one core).
//!
//! Criterion numbers given as arguments restrict the run to those criteria.
//! `UNCSEG_ACCEPTANCE_OUT=<dir>` keeps the experiment trees for inspection;
//! `UNCSEG_SKIP_ACCEPTANCE=1` skips the whole target.

mod common;
#[allow(dead_code, unused_imports)]
#[path = "eval.rs"]
mod eval_checks;
#[allow(dead_code, unused_imports)]
#[path = "gradients.rs"]
mod gradient_checks;
#[allow(dead_code, unused_imports)]
#[path = "losses.rs"]
mod loss_checks;
#[allow(dead_code, unused_imports)]
#[path = "network.rs"]
mod network_checks;
#[allow(dead_code, unused_imports)]
#[path = "ops.rs"]
mod op_checks;
#[allow(dead_code, unused_imports)]
#[path = "optim.rs"]
mod optim_checks;
#[allow(dead_code, unused_imports)]
#[path = "uncertainty.rs"]
mod uncertainty_checks;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use uncseg::config::ExperimentConfig;
use uncseg::dcnn::{receptive_field, NetworkConfig};
use uncseg::losses::LossKind;
use uncseg::pipeline::{run_all, AnalysisSummary, PredictMode};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SEED_BUDGET_SECS: f64 = 30.0 * 60.0;

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut layer_worst: f64 = 0.0;
    for (name, f) in gradient_checks::LAYER_CHECKS {
        for seed in 0..gradient_checks::SEEDS {
            let e = f(seed);
            if e >= gradient_checks::LAYER_TOL {
                return Err(format!("{name} seed {seed}: relative error {e:.2e}"));
            }
            layer_worst = layer_worst.max(e);
        }
    }
    let (net, probed) = gradient_checks::network_spot_check(3, 2);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "layers and losses over {} seeds worst {layer_worst:.2e} (< 1e-4); default network {probed} probes worst {net:.2e} (< 1e-3); {secs:.0} s",
        gradient_checks::SEEDS
    );
    check(net < 1e-3 && secs < 120.0, detail.clone(), detail)
}

fn receptive_field_check() -> Verdict {
    let config = NetworkConfig::default();
    let rf = receptive_field(&config);
    let (leaked, missed) = network_checks::receptive_field_probe(&config, 20, 11);
    let detail = format!(
        "analytic {rf}; 20 probe sites: {leaked} beyond 65 voxels changed the output, {missed} border sites inert"
    );
    check(rf == 131 && leaked == 0, detail.clone(), detail)
}

fn oracle_equivalences() -> Verdict {
    let (conv, _) = op_checks::conv_oracle_gaps(7);
    let components = eval_checks::component_mismatches(31, 100);
    let adam = (0..10).map(optim_checks::adam_trajectory_gap).fold(0.0, f64::max);
    let variance = uncertainty_checks::variance_oracle_gap(23, 200);
    let detail = format!(
        "conv gap {conv:.1e}; components {components}/100 volumes differ; adam gap {adam:.1e} over 100 steps; variance gap {variance:.1e}"
    );
    check(
        conv < 1e-6 && components == 0 && adam < 1e-6 && variance < 1e-6,
        detail.clone(),
        detail,
    )
}

fn uncertainty_bounds() -> Verdict {
    uncertainty_checks::stack_bounds(17, 1000)
        .map(|_| "1000 stacks within [0, ln 4] and [0, 0.25]; identical samples give 0".to_string())
}

fn referral_properties() -> Verdict {
    eval_checks::referral_properties(47, 200)?;
    check(
        eval_checks::toy_referral_matches_enumeration(),
        "200 random curves monotone, full referral reaches Dice 1; 4x4 toy matches enumeration".into(),
        "4x4 toy case differs from enumeration".into(),
    )
}

fn calibration_oracle() -> Verdict {
    let (z, ece) = eval_checks::calibration_oracle(41, 100_000);
    let worst = z.iter().copied().fold(0.0, f64::max);
    let detail = format!("{} bins, worst deviation {worst:.2} binomial sd, ECE {ece:.4}", z.len());
    check(worst < 3.0 && ece < 0.01, detail.clone(), detail)
}

fn true_label_curves() -> Verdict {
    let (sd, ce) = loss_checks::true_label_curves_ok()?;
    Ok(format!(
        "all three curves non-increasing on 1000 points; at p=0.5 sd {sd:.3} < ce {ce:.3}"
    ))
}

fn experiment_root(name: &str) -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("UNCSEG_ACCEPTANCE_OUT") {
        Some(dir) => (PathBuf::from(dir).join(name), None),
        None => {
            let tmp = tempfile::tempdir().expect("temp dir");
            (tmp.path().to_path_buf(), Some(tmp))
        }
    }
}

fn end_to_end() -> Verdict {
    let mut summaries: Vec<(u64, f64, AnalysisSummary)> = Vec::new();
    for seed in SEEDS {
        let (dir, _guard) = experiment_root(&format!("seed_{seed}"));
        let config = ExperimentConfig {
            seed,
            output_dir: dir,
            ..ExperimentConfig::default()
        };
        let start = Instant::now();
        let summary = run_all(&config).map_err(|e| format!("seed {seed}: {e}"))?;
        let secs = start.elapsed().as_secs_f64();
        println!("  seed {seed}: {secs:.0} s");
        for line in summary.to_text().lines() {
            println!("    {line}");
        }
        summaries.push((seed, secs, summary));
    }

    let mut failures = Vec::new();
    let slowest = summaries.iter().map(|s| s.1).fold(0.0, f64::max);
    if slowest >= SEED_BUDGET_SECS {
        failures.push(format!("slowest seed {slowest:.0} s"));
    }
    let mut lowest_dice = f64::INFINITY;
    let mut lowest_gain = f64::INFINITY;
    for (seed, _, s) in &summaries {
        for r in &s.rows {
            lowest_dice = lowest_dice.min(r.mean_dice());
            lowest_gain = lowest_gain.min(r.referral_gain());
            if r.mean_dice() < 0.80 {
                failures.push(format!(
                    "(a) seed {seed} {} {}: Dice {:.4}",
                    r.loss,
                    r.mode.tag(),
                    r.mean_dice()
                ));
            }
            if r.referral_gain() < 0.01 {
                failures.push(format!(
                    "(c) seed {seed} {} {}: gain {:+.4}",
                    r.loss,
                    r.mode.tag(),
                    r.referral_gain()
                ));
            }
        }
    }
    let ordered = |mode: PredictMode| {
        summaries
            .iter()
            .filter(|(_, _, s)| {
                let ece = |loss| s.row(loss, mode).expect("row").ece_pooled;
                let sd = ece(LossKind::SoftDice);
                sd > ece(LossKind::Brier) && sd > ece(LossKind::CrossEntropy)
            })
            .count()
    };
    // ordering judged on the plain network output; the ensemble is reported
    let single = ordered(PredictMode::Single);
    let mc = ordered(PredictMode::Mc);
    if single < 4 {
        failures.push(format!("(b) soft-Dice ECE highest in {single}/5 seeds"));
    }
    let detail = format!(
        "(a) lowest mean Dice {lowest_dice:.4}; (b) ECE sd > bs, ce in {single}/5 seeds (ensemble: {mc}/5); (c) lowest gain at 1% {lowest_gain:+.4}; slowest seed {slowest:.0} s"
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", failures.join(", ")))
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let mut bytes = fs::read(&path).expect("readable file");
                if path.file_name().is_some_and(|n| n == "train_log.csv") {
                    bytes = strip_wall_time(&bytes);
                }
                out.insert(path.strip_prefix(root).expect("prefix").to_path_buf(), bytes);
            }
        }
    }
    out
}

fn strip_wall_time(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = String::new();
    for line in text.lines() {
        let cut = line.rfind(',').unwrap_or(line.len());
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out.into_bytes()
}

fn determinism() -> Verdict {
    let (dir_a, _ga) = experiment_root("determinism_a");
    let (dir_b, _gb) = experiment_root("determinism_b");
    let base = ExperimentConfig::parse(common::TINY_CONFIG).map_err(|e| e.to_string())?;
    let run = |dir: &Path, threads: usize| -> Result<(), String> {
        let config = ExperimentConfig {
            output_dir: dir.to_path_buf(),
            ..base.clone()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| run_all(&config)).map(|_| ()).map_err(|e| e.to_string())
    };
    run(&dir_a, 1)?;
    run(&dir_b, 3)?;
    let (a, b) = (tree(&dir_a), tree(&dir_b));
    let kinds = |ext: &str| a.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    let differing: Vec<_> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let detail = format!(
        "{} files ({} csv, {} checkpoint tensors) compared between a 1-thread and a 3-thread run",
        a.len(),
        kinds("csv"),
        a.keys().filter(|p| p.to_string_lossy().contains("snapshot_")).count()
    );
    check(
        differing.is_empty(),
        detail.clone(),
        format!("{detail}; differing: {}", differing.join(", ")),
    )
}

fn run_criterion(n: usize, name: &str, f: fn() -> Verdict) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} ({name}): {tag}: {detail} [{secs:.1} s]");
    outcome.is_ok()
}

fn main() -> ExitCode {
    if std::env::var_os("UNCSEG_SKIP_ACCEPTANCE").is_some() {
        println!("acceptance: skipped (UNCSEG_SKIP_ACCEPTANCE set)");
        return ExitCode::SUCCESS;
    }
    // the experiment budget is for one core
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient suite", gradient_suite),
        ("receptive field", receptive_field_check),
        ("oracle equivalences", oracle_equivalences),
        ("uncertainty bounds", uncertainty_bounds),
        ("referral properties", referral_properties),
        ("calibration oracle", calibration_oracle),
        ("end-to-end phantom experiment", end_to_end),
        ("determinism", determinism),
        ("loss-for-true-label curves", true_label_curves),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut ran, mut failed) = (0, 0);
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        if !run_criterion(i + 1, name, f) {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
