//! End-to-end tests of the command-line surface, driving the compiled
//! binary exactly as a user would: synth -> prepare -> train -> report,
//! plus the oversample-only and generate paths, config/flag precedence,
//! and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trigan"));
    cmd.env_remove("TRIGAN_OUTPUT_ROOT");
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn ok(output: &Output) -> String {
    assert!(
        output.status.success(),
        "command failed ({:?}):\n{}\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

/// Writes a small 8x8 demo dataset once per tempdir.
fn make_dataset(root: &Path) -> PathBuf {
    let ds = root.join("ds");
    let out = bin()
        .args(["synth", "--out"])
        .arg(&ds)
        .args(["--per-class", "60", "--img-size", "8", "--seed", "1"])
        .output()
        .unwrap();
    ok(&out);
    ds
}

fn base_args_with_ratio(cmd: &mut Command, ds: &Path, exp: &Path, ratio: &str) {
    cmd.arg("--dataset")
        .arg(ds)
        .args(["--img-size", "8", "--profile", "tiny", "--classes", "3"])
        .args(["--majority-class", "0", "--minority-classes", "1,2"])
        .args(["--majority-count", "20", "--balanced-ratio", ratio])
        .arg("--output-dir")
        .arg(exp);
}

fn base_args(cmd: &mut Command, ds: &Path, exp: &Path) {
    base_args_with_ratio(cmd, ds, exp, "0.2");
}

fn prepare(ds: &Path, exp: &Path) {
    let mut cmd = bin();
    cmd.arg("prepare");
    base_args(&mut cmd, ds, exp);
    ok(&cmd.output().unwrap());
}

/// Cheap training knobs shared by the train-invoking tests.
fn fast_train_args(cmd: &mut Command) {
    cmd.args(["--p-epochs", "1", "--a-epochs", "2", "--batch-size", "10"])
        .args(["--d-steps-per-g-step", "1", "--iterations-per-epoch", "1"])
        .args(["--eval-every", "1", "--fid-samples", "4"]);
}

#[test]
fn prepare_writes_split_manifests_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    let summary = std::fs::read_to_string(exp.join("split/summary.txt")).unwrap();
    assert!(summary.contains("0\t20\t"), "majority train count missing:\n{summary}");
    assert!(summary.contains("1\t4\t"), "minority train count missing:\n{summary}");
    assert!(summary.contains("0.2000"), "realized ratio missing:\n{summary}");
    assert!(exp.join("split/train.tsv").is_file());
    assert!(exp.join("split/test.tsv").is_file());
    assert!(exp.join("config.conf").is_file());
}

#[test]
fn prepare_is_deterministic_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    prepare(&ds, &a);
    prepare(&ds, &b);
    for name in ["split/train.tsv", "split/test.tsv"] {
        let left = std::fs::read(a.join(name)).unwrap();
        let right = std::fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between reruns");
    }
}

#[test]
fn prepare_with_ratio_one_gives_equal_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    let mut cmd = bin();
    cmd.arg("prepare");
    base_args_with_ratio(&mut cmd, &ds, &exp, "1.0");
    ok(&cmd.output().unwrap());
    let summary = std::fs::read_to_string(exp.join("split/summary.txt")).unwrap();
    for class in 0..3 {
        assert!(summary.contains(&format!("{class}\t20\t")), "class {class}:\n{summary}");
    }
}

#[test]
fn train_single_repetition_mean_equals_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    let mut cmd = bin();
    cmd.arg("train");
    base_args(&mut cmd, &ds, &exp);
    fast_train_args(&mut cmd);
    cmd.args(["--method", "baseline", "--repetitions", "1", "--seed", "11"]);
    ok(&cmd.output().unwrap());
    let agg = std::fs::read_to_string(exp.join("aggregate-baseline.csv")).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines.len(), 3, "run row + mean row expected:\n{agg}");
    let run_cells: Vec<&str> = lines[1].split(',').collect();
    let mean_cells: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(run_cells[1], "11");
    assert_eq!(mean_cells[1], "mean");
    assert_eq!(run_cells[2..5], mean_cells[2..5], "mean differs from the single run");
}

#[test]
fn train_writes_a_loadable_manifest_with_live_references() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    let mut cmd = bin();
    cmd.arg("train");
    base_args(&mut cmd, &ds, &exp);
    fast_train_args(&mut cmd);
    cmd.args(["--method", "gan-v1", "--repetitions", "2", "--seed", "3"]);
    ok(&cmd.output().unwrap());
    let manifest =
        trigan::manifest::RunManifest::load(&exp.join("manifest-gan-v1.json")).unwrap();
    assert_eq!(manifest.method, "gan-v1");
    assert_eq!(manifest.seeds, vec![3, 4]);
    assert_eq!(manifest.runs.len(), 2);
    for run in &manifest.runs {
        assert!(exp.join(&run.metrics_csv).is_file());
        assert!(exp.join(&run.training_log_csv).is_file());
        assert!(exp.join(run.checkpoint.as_ref().unwrap()).is_file());
        assert!(run.duration_secs > 0.0);
    }
    let parsed = trigan::config::ExperimentConfig::parse_str(&manifest.config).unwrap();
    assert_eq!(parsed.seed, 3);
}

#[test]
fn report_merges_manifests_into_csv_summary_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    for method in ["baseline", "gan-v1"] {
        let mut cmd = bin();
        cmd.arg("train");
        base_args(&mut cmd, &ds, &exp);
        fast_train_args(&mut cmd);
        cmd.args(["--method", method, "--repetitions", "1", "--seed", "5"]);
        ok(&cmd.output().unwrap());
    }
    let report_dir = dir.path().join("report");
    let mut cmd = bin();
    cmd.arg("report").arg("--out").arg(&report_dir);
    cmd.arg(exp.join("manifest-baseline.json"));
    cmd.arg(exp.join("manifest-gan-v1.json"));
    let stdout = ok(&cmd.output().unwrap());
    assert!(stdout.contains("baseline: 1 runs"), "{stdout}");
    assert!(stdout.contains("gan-v1: 1 runs"), "{stdout}");
    let csv = std::fs::read_to_string(report_dir.join("consolidated.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 2 * 3, "rows = runs x classes");
    assert!(report_dir.join("gradient_norms.png").is_file());
    assert!(report_dir.join("metric_bars.png").is_file());
}

#[test]
fn generate_honors_count_label_and_seed_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    let mut cmd = bin();
    cmd.arg("train");
    base_args(&mut cmd, &ds, &exp);
    fast_train_args(&mut cmd);
    cmd.args(["--method", "gan-v1", "--repetitions", "1", "--seed", "2"]);
    ok(&cmd.output().unwrap());
    let ckpt = exp.join("runs/gan-v1-seed2/checkpoints/final.ckpt");

    let gen = |out: &Path, count: &str| {
        let mut cmd = bin();
        cmd.arg("generate").arg("--checkpoint").arg(&ckpt);
        cmd.args(["--class", "1", "--count", count, "--seed", "42"]);
        cmd.arg("--out").arg(out);
        ok(&cmd.output().unwrap());
    };
    let g1 = dir.path().join("g1");
    gen(&g1, "3");
    let manifest = std::fs::read_to_string(g1.join("manifest.tsv")).unwrap();
    let rows: Vec<&str> = manifest.lines().collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row.ends_with("\t1"), "label should be 1: {row}");
        let file = row.split('\t').next().unwrap();
        assert!(g1.join(file).is_file());
    }
    let g2 = dir.path().join("g2");
    gen(&g2, "3");
    assert_eq!(
        std::fs::read(g1.join("gen-c1-00000.png")).unwrap(),
        std::fs::read(g2.join("gen-c1-00000.png")).unwrap(),
        "same seed must give identical image bytes"
    );

    let empty = dir.path().join("empty");
    gen(&empty, "0");
    assert!(!empty.exists(), "count 0 must write nothing");
}

#[test]
fn baseline_subcommand_balances_the_training_split() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    let mut cmd = bin();
    cmd.arg("baseline");
    base_args(&mut cmd, &ds, &exp);
    cmd.args(["--method", "adasyn", "--seed", "6"]);
    ok(&cmd.output().unwrap());
    let manifest = std::fs::read_to_string(exp.join("augmented-adasyn/manifest.tsv")).unwrap();
    let mut counts = [0usize; 3];
    for line in manifest.lines() {
        let label: usize = line.rsplit('\t').next().unwrap().parse().unwrap();
        counts[label] += 1;
    }
    assert_eq!(counts, [20, 20, 20], "augmented set must be balanced");
    let synthetic = manifest.lines().filter(|l| l.starts_with("synth-adasyn-")).count();
    assert_eq!(synthetic, 32);
    for line in manifest.lines() {
        let file = line.split('\t').next().unwrap();
        assert!(exp.join("augmented-adasyn").join(file).is_file(), "{file} missing");
    }
}

#[test]
fn baseline_subcommand_rejects_gan_methods() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    prepare(&ds, &exp);
    let mut cmd = bin();
    cmd.arg("baseline");
    base_args(&mut cmd, &ds, &exp);
    cmd.args(["--method", "gan-v3"]);
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let exp = dir.path().join("exp");
    let conf = dir.path().join("exp.conf");
    let text = format!(
        "dataset.path = {}\ndataset.img_size = 8\nmodel.profile = tiny\n\
         split.majority_count = 20\nsplit.balanced_ratio = 0.5\nsplit.seed = 4\n\
         run.output_dir = {}\n",
        ds.display(),
        exp.display()
    );
    std::fs::write(&conf, text).unwrap();
    let mut cmd = bin();
    cmd.arg("prepare").arg("--config").arg(&conf);
    cmd.args(["--balanced-ratio", "0.2"]);
    ok(&cmd.output().unwrap());
    let summary = std::fs::read_to_string(exp.join("split/summary.txt")).unwrap();
    assert!(summary.contains("1\t4\t"), "flag ratio 0.2 should win over file 0.5:\n{summary}");
}

#[test]
fn output_root_env_var_rebases_relative_output_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(dir.path());
    let mut cmd = bin();
    cmd.arg("prepare");
    base_args(&mut cmd, &ds, Path::new("rel-exp"));
    cmd.env("TRIGAN_OUTPUT_ROOT", dir.path());
    ok(&cmd.output().unwrap());
    assert!(dir.path().join("rel-exp/split/train.tsv").is_file());
}

#[test]
fn exit_codes_distinguish_validation_and_data_failures() {
    let dir = tempfile::tempdir().unwrap();
    // unknown method name: validation
    let out = bin().args(["train", "--method", "gan-v9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // bad config key: validation
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "run.sed = 1\n").unwrap();
    let out = bin().arg("prepare").arg("--config").arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // training without a prepared split: data
    let ds = make_dataset(dir.path());
    let mut cmd = bin();
    cmd.arg("train");
    base_args(&mut cmd, &ds, &dir.path().join("never-prepared"));
    cmd.args(["--method", "baseline"]);
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    // dataset directory missing: data
    let mut cmd = bin();
    cmd.arg("prepare");
    base_args(&mut cmd, &dir.path().join("no-dataset"), &dir.path().join("exp2"));
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
