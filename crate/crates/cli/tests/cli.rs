use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
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
iterations = 20
cycle_length = 10
snapshots_to_keep = 2
patch_size = 16

[predict]
samples_per_model = 2

[analysis]
loss_curve_samples = 20
";

fn uncseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uncseg"))
        .args(args)
        .env_remove("UNCSEG_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("experiment.cfg");
    let text = format!(
        "[experiment]\noutput_dir = {}\n{extra}\n{TINY}",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    assert_eq!(code(&uncseg(&["--help"])), 0);
    for sub in ["phantom", "train", "predict", "analyze", "gradcheck", "config"] {
        let out = uncseg(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}: {}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&uncseg(&[])), 1);
    assert_eq!(code(&uncseg(&["frobnicate"])), 1);
    assert_eq!(code(&uncseg(&["train", "--loss", "ce"])), 1);
    assert_eq!(code(&uncseg(&["train", "--loss", "hinge", "--fold", "0"])), 1);
    assert_eq!(code(&uncseg(&["predict", "--mode", "bayes"])), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_uncseg"))
        .args(["config"])
        .env("UNCSEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn malformed_config_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "[training]\niterations = 10\nbatch_size = two\n").unwrap();
    let out = uncseg(&["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(&path, "[training]\n\nmystery = 1\n").unwrap();
    let out = uncseg(&["-c", path.to_str().unwrap(), "phantom"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let out = uncseg(&["-c", dir.path().join("absent.cfg").to_str().unwrap(), "config"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = uncseg(&["-c", &cfg, "train", "--loss", "sd", "--fold", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("phantom"), "{}", stderr(&out));
    assert_eq!(code(&uncseg(&["-c", &cfg, "predict", "--mode", "mc"])), 2);
    assert_eq!(code(&uncseg(&["-c", &cfg, "analyze"])), 2);
}

#[test]
fn config_round_trips_through_the_printer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 9");
    let out = uncseg(&["-c", &cfg, "config"]);
    assert_eq!(code(&out), 0);
    let printed = dir.path().join("printed.cfg");
    fs::write(&printed, &out.stdout).unwrap();
    let again = uncseg(&["-c", printed.to_str().unwrap(), "config"]);
    assert_eq!(out.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed = 9"));
}

#[test]
fn end_to_end_run_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let steps: Vec<Vec<&str>> = vec![
        vec!["phantom"],
        vec!["train", "--loss", "ce", "--fold", "0"],
        vec!["train", "--loss", "sd", "--fold", "0"],
        vec!["train", "--loss", "bs", "--fold", "0"],
        vec!["predict", "--mode", "single"],
        vec!["predict", "--mode", "mc", "--fold", "0"],
        vec!["analyze"],
    ];
    for step in &steps {
        let mut args = vec!["-c", cfg.as_str()];
        args.extend(step);
        let out = uncseg(&args);
        assert_eq!(code(&out), 0, "{step:?}: {}", stderr(&out));
    }
    let analysis = dir.path().join("out/analysis");
    let summary = fs::read_to_string(analysis.join("summary.txt")).unwrap();
    assert_eq!(summary.lines().count(), 7);
    for name in [
        "reliability_sd_umap_es.csv",
        "referral_bs_emap_ed.csv",
        "loss_curve.csv",
        "maps/ce_umap_ed.pgm",
    ] {
        assert!(analysis.join(name).exists(), "{name}");
    }
    let prov = fs::read_to_string(
        dir.path()
            .join("out/predictions/ce/mc")
            .read_dir()
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path()
            .join("provenance.txt"),
    )
    .unwrap();
    assert!(prov.contains("samples = 4\n"), "{prov}");
}

#[test]
fn gradcheck_passes() {
    let out = uncseg(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}
