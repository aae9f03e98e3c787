use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vvb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vvb"))
        .args(args)
        .output()
        .expect("vvb runs")
}

fn ok(args: &[&str]) -> String {
    let out = vvb(args);
    assert!(
        out.status.success(),
        "vvb {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = vvb(args);
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary_value(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
        .parse()
        .unwrap()
}

/// Small clean class15 set: 16×16, 4 train and 2 validation images per class.
fn small_class15(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "generate", "--task", "class15", "--per-class", "4", "--val-per-class", "2",
        "--resolution", "16", "--seed", "3", "--out", s(&out),
    ]);
    out
}

#[test]
fn generate_writes_datasets_manifest_and_config() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("nested/dir");
    let stdout = ok(&[
        "generate", "--task", "class15", "--per-class", "2", "--val-per-class", "1",
        "--resolution", "16", "--noise", "labproxy", "--seed", "7", "--out", s(&out),
    ]);
    assert!(stdout.contains("30 images"), "{stdout}");
    assert!(stdout.contains("15 images"), "{stdout}");
    for f in ["train.vvbd", "val.vvbd", "manifest.csv", "resolved.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    let resolved = std::fs::read_to_string(out.join("resolved.toml")).unwrap();
    assert!(resolved.contains("preset = \"labproxy\""));
    assert!(resolved.contains("seed = 7"));
    assert!(!out.read_dir().unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".tmp")));
}

#[test]
fn same_generate_command_gives_identical_checksums() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "generate", "--task", "sector26", "--per-class", "1", "--val-per-class", "1",
            "--resolution", "16", "--noise", "labproxy", "--seed", "11", "--out", s(&out),
        ]);
        std::fs::read_to_string(out.join("manifest.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn sphere_task_writes_a_single_file() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sp");
    ok(&["generate", "--task", "sphere", "--count", "20", "--resolution", "16", "--out", s(&out)]);
    assert!(out.join("data.vvbd").exists());
    assert!(!out.join("train.vvbd").exists());
}

#[test]
fn unwritable_output_is_a_path_error() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let (c, err) = code(&[
        "generate", "--per-class", "1", "--val-per-class", "1", "--resolution", "16",
        "--out", s(&blocker.join("sub")),
    ]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("file"), "{err}");
}

#[test]
fn unknown_config_keys_are_all_listed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[grid]\nresolution = 16\nsize = 2\n[data]\nimages = 3\n").unwrap();
    let (c, err) = code(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(c, 2);
    assert!(err.contains("grid.size") && err.contains("data.images"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn bad_values_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let o = s(tmp.path());
    assert_eq!(code(&["generate", "--task", "class99", "--out", o]).0, 2);
    assert_eq!(code(&["generate", "--noise", "loud", "--out", o]).0, 2);
    assert_eq!(code(&["render", "--m1", "1", "--m2", "1", "--out", &format!("{o}/x.ppm")]).0, 2);
}

#[test]
fn ncomp_zero_is_rejected_before_any_work() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("model");
    // the training file does not even exist: validation comes first
    let (c, err) = code(&[
        "train", "--model", "svm", "--ncomp", "0", "--train", "missing.vvbd", "--out", s(&out),
    ]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("ncomp"), "{err}");
    assert!(!out.exists());
}

#[test]
fn svm_train_and_eval() {
    let tmp = TempDir::new().unwrap();
    let data = small_class15(tmp.path());
    let model = tmp.path().join("svm");
    let stdout = ok(&[
        "train", "--model", "svm", "--ncomp", "10", "--epochs", "5",
        "--train", s(&data.join("train.vvbd")), "--val", s(&data.join("val.vvbd")),
        "--out", s(&model),
    ]);
    assert!(stdout.contains("average accuracy"), "{stdout}");
    let metrics = std::fs::read_to_string(model.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    let ev = tmp.path().join("ev");
    let table = ok(&[
        "eval", "--model", s(&model.join("model.vvbm")), "--data", s(&data.join("val.vvbd")),
        "--out", s(&ev),
    ]);
    assert!(table.contains("(-5,-3)"), "{table}");
    let csv = std::fs::read_to_string(ev.join("confusion.csv")).unwrap();
    let total: u64 = csv
        .lines()
        .skip(1)
        .flat_map(|l| {
            // class names are quoted because they contain commas
            let rest = &l[l.rfind('"').unwrap() + 2..];
            rest.split(',').map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>()
        })
        .sum();
    assert_eq!(total, 30);
    assert_eq!(summary_value(&ev.join("summary.txt"), "images"), 30.0);
}

#[test]
fn cnn_metrics_have_one_row_per_epoch() {
    let tmp = TempDir::new().unwrap();
    let data = small_class15(tmp.path());
    let model = tmp.path().join("cnn");
    ok(&[
        "train", "--model", "cnn", "--epochs", "3", "--batch-size", "8",
        "--train", s(&data.join("train.vvbd")), "--val", s(&data.join("val.vvbd")),
        "--out", s(&model),
    ]);
    let metrics = std::fs::read_to_string(model.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,val_acc");
    assert_eq!(lines.len(), 4);
    assert!(model.join("model.vvbm").exists());
}

#[test]
fn deterministic_training_reproduces_from_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let data = small_class15(tmp.path());
    let first = tmp.path().join("first");
    ok(&[
        "train", "--model", "cnn", "--epochs", "2", "--batch-size", "8", "--seed", "4",
        "--deterministic", "--train", s(&data.join("train.vvbd")),
        "--val", s(&data.join("val.vvbd")), "--out", s(&first),
    ]);
    let second = tmp.path().join("second");
    ok(&[
        "train", "--config", s(&first.join("resolved.toml")), "--out", s(&second),
    ]);
    for f in ["model.vvbm", "metrics.csv", "confusion.csv"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn generate_reproduces_from_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    ok(&[
        "generate", "--task", "class15", "--per-class", "1", "--val-per-class", "1",
        "--resolution", "16", "--noise", "labproxy", "--seed", "9", "--out", s(&first),
    ]);
    let second = tmp.path().join("second");
    ok(&["generate", "--config", s(&first.join("resolved.toml")), "--out", s(&second)]);
    assert_eq!(
        std::fs::read(first.join("train.vvbd")).unwrap(),
        std::fs::read(second.join("train.vvbd")).unwrap()
    );
}

#[test]
fn config_for_another_command_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("g");
    ok(&["generate", "--task", "sphere", "--count", "5", "--resolution", "16", "--out", s(&out)]);
    let (c, err) = code(&["render", "--config", s(&out.join("resolved.toml"))]);
    assert_eq!(c, 2, "{err}");
}

#[test]
fn shipped_reference_model_reproduces_recorded_accuracy() {
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let tmp = TempDir::new().unwrap();
    ok(&[
        "eval", "--model", s(&fx.join("reference_cnn.vvbm")), "--data", s(&fx.join("reference.vvbd")),
        "--out", s(tmp.path()),
    ]);
    let recorded = summary_value(&fx.join("reference_eval.txt"), "average_accuracy");
    let got = summary_value(&tmp.path().join("summary.txt"), "average_accuracy");
    assert!((got - recorded).abs() <= 1e-6, "{got} vs {recorded}");
}

#[test]
fn eval_rejects_mismatched_resolution_with_shape_code() {
    let tmp = TempDir::new().unwrap();
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let data = tmp.path().join("d32");
    ok(&[
        "generate", "--per-class", "1", "--val-per-class", "1", "--resolution", "32",
        "--out", s(&data),
    ]);
    let (c, err) = code(&[
        "eval", "--model", s(&fx.join("reference_cnn.vvbm")), "--data", s(&data.join("val.vvbd")),
    ]);
    assert_eq!(c, 4, "{err}");
}

#[test]
fn corrupt_model_is_a_format_error() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("bad.vvbm");
    std::fs::write(&model, b"VVBX garbage").unwrap();
    let data = tmp.path().join("d");
    ok(&["generate", "--per-class", "1", "--val-per-class", "1", "--resolution", "16", "--out", s(&data)]);
    let (c, _) = code(&["eval", "--model", s(&model), "--data", s(&data.join("val.vvbd"))]);
    assert_eq!(c, 4);
    let (c, _) = code(&["eval", "--model", s(&tmp.path().join("none.vvbm")), "--data", s(&data.join("val.vvbd"))]);
    assert_eq!(c, 3);
}

#[test]
fn pca_report_and_reconstruct_clean_sphere() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("sp");
    ok(&["generate", "--task", "sphere", "--count", "80", "--resolution", "24", "--seed", "2", "--out", s(&data)]);
    let rep = tmp.path().join("rep");
    ok(&["pca-report", "--data", s(&data.join("data.vvbd")), "--ncomp", "6", "--out", s(&rep)]);
    let table = std::fs::read_to_string(rep.join("explained_variance.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(summary_value(&rep.join("summary.txt"), "top3_share") >= 0.9);
    assert!(summary_value(&rep.join("summary.txt"), "radius_rel_spread") <= 0.15);
    assert!(rep.join("radii_hist.csv").exists());

    let test = tmp.path().join("test");
    ok(&["generate", "--task", "sphere", "--count", "40", "--resolution", "24", "--seed", "3", "--out", s(&test)]);
    let rc = tmp.path().join("rc");
    ok(&[
        "reconstruct", "--model", s(&rep.join("pca.vvbm")), "--data", s(&test.join("data.vvbd")),
        "--out", s(&rc),
    ]);
    assert!(summary_value(&rc.join("summary.txt"), "mean_fidelity") >= 0.99);
    let est = std::fs::read_to_string(rc.join("estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), 41);
    assert!(rc.join("fidelity_hist.csv").exists());
}

#[test]
fn reconstruct_needs_angle_labels() {
    let tmp = TempDir::new().unwrap();
    let sp = tmp.path().join("sp");
    ok(&["generate", "--task", "sphere", "--count", "20", "--resolution", "16", "--out", s(&sp)]);
    let rep = tmp.path().join("rep");
    ok(&["pca-report", "--data", s(&sp.join("data.vvbd")), "--out", s(&rep)]);
    let data = small_class15(tmp.path());
    let (c, err) = code(&[
        "reconstruct", "--model", s(&rep.join("pca.vvbm")), "--data", s(&data.join("val.vvbd")),
        "--out", s(&tmp.path().join("rc")),
    ]);
    assert_eq!(c, 2, "{err}");
}

fn ppm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P6");
    assert_eq!(fields[3], "255");
    (fields[1].parse().unwrap(), fields[2].parse().unwrap(), bytes[i + 1..].to_vec())
}

#[test]
fn render_writes_valid_deterministic_ppm() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.ppm");
    let b = tmp.path().join("b.ppm");
    for p in [&a, &b] {
        ok(&[
            "render", "--m1", "-1", "--m2", "1", "--theta", "1.5707963267948966", "--phi", "0",
            "--resolution", "48", "--out", s(p),
        ]);
    }
    let (w, h, px) = ppm(&a);
    assert_eq!((w, h), (48, 48));
    assert_eq!(px.len(), 48 * 48 * 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // the corner is dark, hence grey
    assert_eq!(px[0], px[1]);
    assert_eq!(px[1], px[2]);
    assert!(tmp.path().join("a.toml").exists());
}
