use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biasprobe::ablation::{mean_shift_filter, remove_color, MEAN_SHIFT_EPS, MEAN_SHIFT_MAX_ITER};
use biasprobe::imagecore::load_image;
use biasprobe::tinynn::{Checkpoint, ModelFamily, Network, OptimizerKind, Profile};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_biasprobe"));
    c.env_remove("BIASPROBE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small texture dataset: 4 classes, 6 train + 4 val each, 24 px.
fn small_dataset(root: &Path, mode: &str, seed: u64) -> PathBuf {
    let dir = root.join(format!("{mode}-{seed}"));
    ok(&[
        "generate",
        "--mode",
        mode,
        "--out",
        s(&dir),
        "--seed",
        &seed.to_string(),
        "--size",
        "24",
        "--train-per-class",
        "6",
        "--val-per-class",
        "4",
    ]);
    dir
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn pngs_under(root: &Path) -> Vec<PathBuf> {
    files_under(root).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let a = small_dataset(tmp.path(), "shape", 3);
    let b = tmp.path().join("again");
    ok(&[
        "generate", "--mode", "shape", "--out", s(&b), "--seed", "3", "--size", "24", "--train-per-class", "6",
        "--val-per-class", "4",
    ]);
    let files = pngs_under(&a);
    assert_eq!(files.len(), 4 * 10);
    assert_eq!(files, pngs_under(&b));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f:?}");
    }
    assert_eq!(manifest(&a)["config_digest"], manifest(&b)["config_digest"]);
}

#[test]
fn generate_rejects_too_many_classes() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["generate", "--mode", "texture", "--classes", "5", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("5 classes"));
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let dir = small_dataset(tmp.path(), "texture", 0);
    let args = ["generate", "--mode", "texture", "--out", s(&dir), "--size", "24", "--train-per-class", "6", "--val-per-class", "4"];
    assert_eq!(run(&args).status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn generated_images_load_at_requested_size() {
    let tmp = TempDir::new().unwrap();
    let dir = small_dataset(tmp.path(), "texture", 1);
    let img = load_image(dir.join("train/disc-hstripes/0000.png")).unwrap();
    assert_eq!((img.height(), img.width()), (24, 24));
    let mut cats: Vec<_> = fs::read_dir(dir.join("val")).unwrap().map(|e| e.unwrap().file_name()).collect();
    cats.sort();
    assert_eq!(cats, ["disc-checker", "disc-dots", "disc-hstripes", "disc-vstripes"]);
}

#[test]
fn color_ablation_is_idempotent_through_the_cli() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 2);
    let once = tmp.path().join("once");
    let twice = tmp.path().join("twice");
    ok(&["ablate", "--kind", "color", "--in", s(&data), "--out", s(&once)]);
    ok(&["ablate", "--kind", "color", "--in", s(&once), "--out", s(&twice)]);
    for f in pngs_under(&once) {
        let a = load_image(once.join(&f)).unwrap();
        let b = load_image(twice.join(&f)).unwrap();
        assert_eq!(a, b, "{f:?}");
        assert!(a.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}

#[test]
fn topology_grid_one_copies_inputs() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "shape", 4);
    let out = tmp.path().join("topo");
    ok(&["ablate", "--kind", "topology", "--grid", "1", "--in", s(&data), "--out", s(&out)]);
    for f in pngs_under(&data) {
        assert_eq!(fs::read(data.join(&f)).unwrap(), fs::read(out.join(&f)).unwrap());
    }
}

#[test]
fn texture_ablation_matches_the_library_filter() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 5);
    let out = tmp.path().join("ms");
    ok(&["ablate", "--kind", "texture", "--window", "9", "--in", s(&data), "--out", s(&out)]);
    for f in pngs_under(&data).into_iter().take(6) {
        let src = load_image(data.join(&f)).unwrap();
        let expected = mean_shift_filter(&src, 9, 0.2, MEAN_SHIFT_MAX_ITER, MEAN_SHIFT_EPS).unwrap();
        let got = load_image(out.join(&f)).unwrap();
        // The CLI output went through one 8-bit quantisation.
        let worst = expected.data().iter().zip(got.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{f:?}: {worst}");
    }
}

#[test]
fn category_filter_leaves_other_classes_untouched() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 6);
    let out = tmp.path().join("gray");
    ok(&["ablate", "--kind", "color", "--category", "disc-dots", "--in", s(&data), "--out", s(&out)]);
    for f in pngs_under(&data) {
        let before = fs::read(data.join(&f)).unwrap();
        let after = fs::read(out.join(&f)).unwrap();
        if f.parent().unwrap().ends_with("disc-dots") {
            let expected = remove_color(&load_image(data.join(&f)).unwrap());
            let got = load_image(out.join(&f)).unwrap();
            let worst = expected.data().iter().zip(got.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 0.5 / 255.0 + 1e-6, "{f:?}: {worst}");
        } else {
            assert_eq!(before, after, "{f:?}");
        }
    }
}

#[test]
fn ablate_requires_a_window_for_texture() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 7);
    let out = run(&["ablate", "--kind", "texture", "--in", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["ablate", "--kind", "texture", "--window", "4", "--in", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epoch_training_saves_the_initialisation() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 8);
    let out = tmp.path().join("m0");
    ok(&["train", "--data", s(&data), "--epochs", "0", "--seed", "11", "--out", s(&out)]);
    let ck = Checkpoint::load(out.join("model.bpck")).unwrap();
    let fresh = Network::<f32>::new(&ModelFamily::ResNet.build(4, Profile::Desk).unwrap(), 11).unwrap();
    let loaded = ck.to_network().unwrap();
    for (a, b) in loaded.store().params.iter().zip(&fresh.store().params) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let params = &manifest(&out)["parameters"];
    assert_eq!(params["train"]["optimizer"], "adam");
    assert_eq!(params["train"]["learning_rate"], 1e-3);
    assert_eq!(params["data"]["train_n"], 6);
}

#[test]
fn densenet_defaults_to_sgd_momentum() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 9);
    let out = tmp.path().join("dn");
    ok(&["train", "--data", s(&data), "--model", "densenet", "--epochs", "0", "--out", s(&out)]);
    let params = &manifest(&out)["parameters"]["train"];
    assert_eq!(params["optimizer"], serde_json::to_value(OptimizerKind::SgdMomentum).unwrap());
    assert_eq!(params["learning_rate"], 0.1);
}

#[test]
fn training_metrics_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 10);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&["train", "--data", s(&data), "--epochs", "2", "--batch", "8", "--out", s(out)]);
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    assert_eq!(fs::read(a.join("model.bpck")).unwrap(), fs::read(b.join("model.bpck")).unwrap());
}

#[test]
fn inline_sweep_writes_reports_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 12);
    let windows = "1,3,5";
    let mut outputs = Vec::new();
    for name in ["s1", "s2"] {
        let out = tmp.path().join(name);
        let status = run(&[
            "sweep", "--data", s(&data), "--target", "disc-hstripes", "--ablation", "texture", "--windows", windows,
            "--train-inline", "--repeats", "2", "--epochs", "1", "--batch", "8", "--out", s(&out),
        ])
        .status;
        // A barely trained model may score zero on the target, which yields
        // error records and exit code 5; the reports are still written.
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        let has_error_records = csv.lines().skip(1).any(|l| l.split(',').nth(8) == Some("NaN"));
        assert_eq!(status.code(), Some(if has_error_records { 5 } else { 0 }));
        outputs.push(out);
    }
    let csv = fs::read_to_string(outputs[0].join("report.csv")).unwrap();
    // header + windows x repeats
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert_eq!(csv, fs::read_to_string(outputs[1].join("report.csv")).unwrap());
    let plot = fs::read_to_string(outputs[0].join("plot_texture-12_texture_fcr.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 3);
    assert!(outputs[0].join("model_seed0.bpck").exists() && outputs[0].join("model_seed1.bpck").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outputs[0].join("report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 6);
    assert_eq!(report["experiment"]["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn checkpoint_sweep_and_compare() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 13);
    let model = tmp.path().join("m");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--batch", "8", "--out", s(&model)]);
    let sweep = tmp.path().join("sw");
    ok(&[
        "sweep", "--data", s(&data), "--target", "disc-dots", "--ablation", "shape", "--windows", "3,7",
        "--checkpoint", s(&model.join("model.bpck")), "--out", s(&sweep),
    ]);
    let report = sweep.join("report.csv");
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 3);

    let cmp = tmp.path().join("cmp");
    let out = ok(&["compare", "--a", s(&report), "--b", s(&report), "--out", s(&cmp)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict: indistinguishable"));
    assert!(cmp.join("comparison.json").exists());
}

#[test]
fn sweep_needs_a_model_source() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "texture", 14);
    let out = run(&[
        "sweep", "--data", s(&data), "--target", "disc-dots", "--ablation", "texture", "--windows", "1,3", "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_reports_the_malformed_line() {
    let tmp = TempDir::new().unwrap();
    let good = "task,model,category,ablation,window,seed,acc_o,acc_rm,fcr,overall_acc_o,overall_acc_rm\n\
                t,resnet,c,texture,1,0,0.5,0.5,1,0.5,0.5\n";
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    fs::write(&a, good).unwrap();
    fs::write(&b, format!("{good}t,resnet,c,texture,notanumber,0,0.5,0.5,1,0.5,0.5\n")).unwrap();
    let out = run(&["compare", "--a", s(&a), "--b", s(&b), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn manifest_digest_matches_its_parameters() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "shape", 15);
    let m = manifest(&data);
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 15);
    let bytes = serde_json::to_vec(&m["parameters"]).unwrap();
    let hash = <sha2::Sha256 as sha2::Digest>::digest(&bytes);
    let digest = u64::from_be_bytes(hash[..8].try_into().unwrap());
    assert_eq!(m["config_digest"].as_u64(), Some(digest));
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 40);
}

#[test]
fn thread_count_from_environment_is_validated() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .env("BIASPROBE_THREADS", "zero")
        .args(["generate", "--mode", "texture", "--out", s(&tmp.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BIASPROBE_THREADS"));

    let one = tmp.path().join("one");
    let two = tmp.path().join("two");
    for (dir, n) in [(&one, "1"), (&two, "2")] {
        let out = bin()
            .env("BIASPROBE_THREADS", n)
            .args(["generate", "--mode", "texture", "--size", "24", "--train-per-class", "3", "--val-per-class", "2"])
            .args(["--out", s(dir)])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for f in pngs_under(&one) {
        assert_eq!(fs::read(one.join(&f)).unwrap(), fs::read(two.join(&f)).unwrap());
    }
}
