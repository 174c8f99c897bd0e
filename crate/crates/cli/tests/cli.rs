use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdre_core::imageio::{read_png, write_png, LdrImage};
use hdre_core::neuralnet::checkpoint::read_manifest;
use tempfile::TempDir;

fn hdre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdre"))
        .args(args)
        .env("HDRE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four small procedural scenes.
fn scenes(root: &Path) -> PathBuf {
    let dir = root.join("hdr");
    let out = hdre(&["scenes", "--out", s(&dir), "--count", "4", "--width", "64", "--height", "48", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn train_small(hdr: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--hdr-dir", s(hdr), "--out", s(out), "--epochs", "1", "--iters", "2", "--batch", "2",
        "--width-scale", "0.125", "--patch-size", "32", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    hdre(&args)
}

#[test]
fn synth_writes_three_files_per_pair_deterministically() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = hdre(&["synth", "--hdr-dir", s(&hdr), "--out", s(&out), "--count", "8", "--seed", "1", "--size", "32"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("8 pairs"));
        sorted_files(&out)
    };
    let a = run("a");
    assert_eq!(a.len(), 24);
    assert_eq!(a, run("b"));
}

#[test]
fn synth_skips_unreadable_files_and_rejects_empty_dirs() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    std::fs::write(hdr.join("broken.hdr"), b"not a radiance file").unwrap();
    let out = tmp.path().join("o");
    let o = hdre(&["synth", "--hdr-dir", s(&hdr), "--out", s(&out), "--count", "2", "--size", "32"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.hdr"));

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = hdre(&["synth", "--hdr-dir", s(&empty), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_accounting_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = train_small(&hdr, dir, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = sorted_files(&a);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["ckpt_epoch1.nncp", "loss.csv", "train_config.json"]);
    let log = String::from_utf8(files[1].1.clone()).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert_eq!(files, sorted_files(&b));
    assert!(read_manifest(&files[0].1).unwrap().0.has_global_branch());
}

#[test]
fn ablation_checkpoint_has_no_global_layers() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    let out = tmp.path().join("ablated");
    let o = train_small(&hdr, &out, &["--no-global-encoder"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(out.join("ckpt_epoch1.nncp")).unwrap();
    assert!(!read_manifest(&bytes).unwrap().0.has_global_branch());
}

#[test]
fn invalid_flags_exit_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    assert_eq!(code(&hdre(&["train", "--epochs", "many"])), 2);
    assert_eq!(code(&train_small(&hdr, &tmp.path().join("x"), &["--batch", "0"])), 2);
    assert_eq!(code(&hdre(&["frobnicate"])), 2);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    let out = tmp.path().join("run");
    let json = serde_json::json!({
        "seed": 9,
        "hdr_dir": hdr,
        "data_dir": out,
        "train": {"epochs": 3, "iterations_per_epoch": 1, "batch_size": 2, "width_scale": 0.125, "patch_size": 32}
    });
    std::fs::write(&cfg, json.to_string()).unwrap();
    let o = hdre(&["--config", s(&cfg), "train", "--epochs", "1", "--iters", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(echo["epochs"], 1);
    assert_eq!(echo["iterations_per_epoch"], 2);
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["patch_size"], 32);

    std::fs::write(&cfg, r#"{"sead": 1}"#).unwrap();
    assert_eq!(code(&hdre(&["--config", s(&cfg), "scenes"])), 2);
}

#[test]
fn enhance_single_batch_and_corrupt_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(code(&train_small(&hdr, &run, &[])), 0);
    let ckpt = run.join("ckpt_epoch1.nncp");

    let big = LdrImage::new(512, 512, (0..512 * 512 * 3).map(|i| (i % 253) as u8).collect()).unwrap();
    let input = tmp.path().join("in.png");
    std::fs::write(&input, write_png(&big).unwrap()).unwrap();
    let out = tmp.path().join("out.png");
    let o = hdre(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let enhanced = read_png(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!((enhanced.width, enhanced.height), (512, 512));

    let batch_in = tmp.path().join("batch");
    std::fs::create_dir(&batch_in).unwrap();
    for (i, (w, h)) in [(32, 32), (40, 24), (17, 50)].iter().enumerate() {
        let img = LdrImage::filled(*w, *h, [20 * i as u8, 40, 60]);
        std::fs::write(batch_in.join(format!("im{i}.png")), write_png(&img).unwrap()).unwrap();
    }
    let batch_out = tmp.path().join("batch_out");
    let o = hdre(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&batch_in), "--out", s(&batch_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sorted_files(&batch_out).len(), 3);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 10);
    let bad = tmp.path().join("bad.nncp");
    std::fs::write(&bad, bytes).unwrap();
    let never = tmp.path().join("never.png");
    let o = hdre(&["enhance", "--checkpoint", s(&bad), "--input", s(&input), "--out", s(&never)]);
    assert_eq!(code(&o), 3);
    assert!(!never.exists());
}

#[test]
fn eval_without_checkpoint_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let hdr = scenes(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = hdre(&[
            "eval", "--hdr-dir", s(&hdr), "--methods", "input,he", "--out", s(&out), "--size", "64", "--seed", "2",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        sorted_files(&out)
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let csv = String::from_utf8(a[0].1.clone()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,method,tmqi,tmqi_s,tmqi_n,entropy");
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    // Means in the summary agree with the rows.
    let summary: serde_json::Value = serde_json::from_slice(&a[1].1).unwrap();
    for method in ["input", "he"] {
        let vals: Vec<f64> = csv
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1) == Some(method))
            .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let reported = summary["methods"][method]["entropy"].as_f64().unwrap();
        assert!((mean - reported).abs() < 1e-9);
        assert!(summary["methods"][method]["niqe"].is_null());
    }

    let o = hdre(&["eval", "--hdr-dir", s(&hdr), "--methods", "proposed", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fuse_identity_and_mismatch() {
    let tmp = TempDir::new().unwrap();
    let img = LdrImage::new(24, 20, (0..24 * 20 * 3).map(|i| (i * 11 % 256) as u8).collect()).unwrap();
    let p = tmp.path().join("a.png");
    std::fs::write(&p, write_png(&img).unwrap()).unwrap();
    let out = tmp.path().join("f.png");
    let o = hdre(&["fuse", "--inputs", s(&p), s(&p), s(&p), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_png(&std::fs::read(&out).unwrap()).unwrap(), img);

    let q = tmp.path().join("b.png");
    std::fs::write(&q, write_png(&LdrImage::filled(10, 10, [1, 2, 3])).unwrap()).unwrap();
    assert_eq!(code(&hdre(&["fuse", "--inputs", s(&p), s(&q), "--out", s(&out)])), 2);
}

#[test]
fn json_log_lines_parse() {
    let tmp = TempDir::new().unwrap();
    let o = hdre(&["--json-log", "synth", "--hdr-dir", s(&tmp.path().join("missing")), "--out", "x"]);
    assert_eq!(code(&o), 2);
    let stderr = String::from_utf8(o.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(line["level"], "error");
}
