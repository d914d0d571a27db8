//! Binary-level tests: exit codes, file layout, and output determinism,
//! exercised through the real executable on a deliberately tiny dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_strabscreen"))
}

/// Fresh per-test scratch directory under the cargo temp root.
fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small enough to train in seconds while keeping both classes in both
/// splits.
const TINY: &str = "train_size=12\ntest_size=8\ntrain_strabismus=6\ntest_strabismus=4\n\
                    det_steps=25\ncls_iterations=12\n";

fn write_config(dir: &Path, content: &str) -> PathBuf {
    let path = dir.join("pipeline.cfg");
    fs::write(&path, content).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn strabscreen")
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn ppm_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    files
}

/// Rows of a CRLF CSV file, split into fields, header dropped.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.split("\r\n")
        .filter(|l| !l.is_empty())
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn argument_errors_exit_with_code_2() {
    let out = run(bin().arg("no-such-command"));
    assert_code(&out, 2);
    let out = run(bin().args(["predict", "somewhere"]));
    assert_code(&out, 2); // --models is required
    let out = run(bin().arg("learning-curve"));
    assert_code(&out, 2); // --sizes is required
}

#[test]
fn bad_config_reports_the_line_and_exits_2() {
    let dir = scratch("badcfg");
    let cfg = write_config(&dir, "det_steps=5\nnot_a_key=1\n");
    let out = run(bin().args(["--config", cfg.to_str().unwrap(), "gen-data"]));
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
    assert!(err.contains("not_a_key"), "stderr: {err}");
}

#[test]
fn resolved_config_echoes_overrides_to_stderr() {
    let dir = scratch("echo");
    let cfg = write_config(&dir, "cls_iterations=77\n");
    // missing data dir fails after the config echo, keeping the test fast
    let out = run(bin().args([
        "--config",
        cfg.to_str().unwrap(),
        "train",
        dir.join("nowhere").to_str().unwrap(),
    ]));
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cls_iterations=77"), "stderr: {err}");
}

#[test]
fn gen_data_writes_both_splits_and_is_deterministic() {
    let dir = scratch("gen");
    let cfg = write_config(&dir, TINY);
    for sub in ["a", "b"] {
        let out = run(bin().args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
            "gen-data",
        ]));
        assert_code(&out, 0);
    }
    assert_eq!(ppm_files(&dir.join("a/train")).len(), 12);
    assert_eq!(ppm_files(&dir.join("a/test")).len(), 8);
    for rel in ["train/manifest.tsv", "train/0000.ppm", "test/0007.ppm"] {
        let a = fs::read(dir.join("a").join(rel)).unwrap();
        let b = fs::read(dir.join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }

    // a different seed must change the pixels
    let out = run(bin().args([
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        dir.join("c").to_str().unwrap(),
        "gen-data",
    ]));
    assert_code(&out, 0);
    assert_ne!(
        fs::read(dir.join("a/train/0000.ppm")).unwrap(),
        fs::read(dir.join("c/train/0000.ppm")).unwrap()
    );
}

#[test]
fn learning_curve_rejects_non_ascending_sizes() {
    let out = run(bin().args(["learning-curve", "--sizes", "50,50"]));
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ascending"), "stderr: {err}");
}

#[test]
fn diverging_classifier_exits_with_code_3() {
    let dir = scratch("diverge");
    let cfg = write_config(&dir, &format!("{TINY}det_steps=6\ncls_lr=1e9\n"));
    let data = dir.join("data");
    let out = run(bin().args([
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "gen-data",
    ]));
    assert_code(&out, 0);
    let out = run(bin().args([
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
        "train",
        data.to_str().unwrap(),
    ]));
    assert_code(&out, 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diverged"), "stderr: {err}");
}

/// One pass over the whole surface: gen-data, train, eval twice (byte
/// determinism), predict with healthy, unreadable, and undetectable inputs.
#[test]
fn tiny_pipeline_end_to_end() {
    let dir = scratch("e2e");
    let cfg = write_config(&dir, TINY);
    let cfg_arg = cfg.to_str().unwrap().to_string();
    let data = dir.join("data");

    let out = run(bin().args([
        "--config",
        &cfg_arg,
        "--out",
        data.to_str().unwrap(),
        "gen-data",
    ]));
    assert_code(&out, 0);

    let models = dir.join("run");
    let out = run(bin().args([
        "--config",
        &cfg_arg,
        "--out",
        models.to_str().unwrap(),
        "train",
        data.to_str().unwrap(),
    ]));
    assert_code(&out, 0);
    for name in ["detector.rfcn", "classifier.rfcn"] {
        assert!(models.join(name).is_file(), "missing {name}");
    }
    assert_eq!(csv_rows(&models.join("detector_loss.csv")).len(), 25);
    assert_eq!(csv_rows(&models.join("classifier_loss.csv")).len(), 12);

    for sub in ["eval1", "eval2"] {
        let out = run(bin().args([
            "--config",
            &cfg_arg,
            "--out",
            dir.join(sub).to_str().unwrap(),
            "eval",
            data.to_str().unwrap(),
            "--models",
            models.to_str().unwrap(),
        ]));
        assert_code(&out, 0);
    }
    let metrics = fs::read_to_string(dir.join("eval1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("TP,TN,FP,FN,Se,Sp,Acc,AUC\r\n"), "{metrics}");
    let rows = csv_rows(&dir.join("eval1/metrics.csv"));
    assert_eq!(rows.len(), 1);
    let counts: usize = rows[0][..4].iter().map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 8, "confusion counts must cover the test split");
    assert!(fs::read_to_string(dir.join("eval1/roc.svg")).unwrap().starts_with("<svg"));
    assert!(dir.join("eval1/roc_points.csv").is_file());
    assert_eq!(
        fs::read(dir.join("eval1/metrics.csv")).unwrap(),
        fs::read(dir.join("eval2/metrics.csv")).unwrap(),
        "repeated evaluation must be byte-identical"
    );

    // prediction input: two real images, one corrupt file, one image too
    // small for the network
    let mixed = dir.join("mixed");
    fs::create_dir_all(&mixed).unwrap();
    for src in ppm_files(&data.join("test")).iter().take(2) {
        fs::copy(src, mixed.join(src.file_name().unwrap())).unwrap();
    }
    fs::write(mixed.join("zz_corrupt.ppm"), b"not a pixmap").unwrap();
    let mut tiny = b"P6\n16 16\n255\n".to_vec();
    tiny.extend(std::iter::repeat(128u8).take(16 * 16 * 3));
    fs::write(mixed.join("zz_tiny.ppm"), tiny).unwrap();

    let pred = dir.join("pred");
    let out = run(bin().args([
        "--config",
        &cfg_arg,
        "--out",
        pred.to_str().unwrap(),
        "predict",
        mixed.to_str().unwrap(),
        "--models",
        models.to_str().unwrap(),
    ]));
    assert_code(&out, 0);
    let rows = csv_rows(&pred.join("predictions.csv"));
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert_eq!(row.len(), 5, "row: {row:?}");
        assert_eq!(row[4], "1", "model_version column");
    }
    let by_name = |name: &str| rows.iter().find(|r| r[0] == name).unwrap();
    let corrupt = by_name("zz_corrupt.ppm");
    assert_eq!(corrupt[1], "READ_ERROR");
    assert!(corrupt[2].is_empty() && corrupt[3].is_empty());
    let small = by_name("zz_tiny.ppm");
    assert_eq!(small[1], "NO_DETECTION");
    assert_eq!(small[2], "0.000000");
    assert_eq!(small[3], "normal");
    let scored = &rows[0];
    assert_eq!(scored[1].split(' ').count(), 4, "detection box: {:?}", scored[1]);
    let p: f64 = scored[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(scored[3] == "strabismus" || scored[3] == "normal");
}
