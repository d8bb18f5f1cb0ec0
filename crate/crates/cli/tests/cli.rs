use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nicegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nicegan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[&str] = &[
    "--set",
    "image_size=32",
    "--set",
    "base_filters=2",
    "--set",
    "n_res_blocks=1",
    "--set",
    r#"scales_enabled=["c0","c1"]"#,
    "--set",
    "log_every=1",
    "--set",
    "checkpoint_every=2",
];

fn synth(root: &Path) {
    ok(&nicegan(&[
        "synth",
        "--out",
        root.to_str().unwrap(),
        "--n-train",
        "4",
        "--n-test",
        "4",
        "--size",
        "32",
    ]));
}

fn train(data: &Path, run: &Path, iterations: u64, extra: &[&str]) -> Output {
    let iters = format!("iterations={iterations}");
    let root = format!("dataset_root={}", data.display());
    let mut args = vec!["train", "--out", run.to_str().unwrap(), "--set", &iters, "--set", &root];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    nicegan(&args)
}

#[test]
fn train_translate_evaluate_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    for d in ["trainA", "trainB", "testA", "testB"] {
        assert_eq!(fs::read_dir(data.join(d)).unwrap().count(), 4, "{d}");
    }

    ok(&train(&data, &run, 3, &[]));
    assert!(run.join("config.json").is_file());
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total_g"].as_f64().unwrap().is_finite());
    }
    assert!(run.join("checkpoints/iter_00000002/manifest.json").is_file());
    let ck = run.join("checkpoints/final");
    assert!(ck.join("params.bin").is_file());

    // Resume to 5 iterations from the final checkpoint.
    let run2 = tmp.path().join("run2");
    let ck_s = ck.to_str().unwrap().to_string();
    ok(&train(&data, &run2, 5, &["--checkpoint", &ck_s]));
    let resumed = fs::read_to_string(run2.join("log.jsonl")).unwrap();
    let iters: Vec<u64> = resumed
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, vec![4, 5]);

    // A different architecture is a config-hash mismatch unless overridden.
    let out = train(&data, &run2, 5, &["--checkpoint", &ck_s, "--set", "base_filters=3"]);
    assert_eq!(out.status.code(), Some(3));

    // Translation keeps the input size.
    let input = fs::read_dir(data.join("testA")).unwrap().next().unwrap().unwrap().path();
    let output = tmp.path().join("t.png");
    ok(&nicegan(&[
        "translate",
        "--checkpoint",
        &ck_s,
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]));
    let a = image_dims(&input);
    assert_eq!(image_dims(&output), a);

    let eval_dir = tmp.path().join("eval");
    ok(&nicegan(&[
        "evaluate",
        "--checkpoint",
        &ck_s,
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]));
    let records: Vec<serde_json::Value> = fs::read_to_string(eval_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = records.iter().map(|r| r["name"].as_str().unwrap()).collect();
    for want in ["kid_x2y", "fid_x2y", "kid_y2x", "fid_y2x", "latent_mmd"] {
        assert!(names.contains(&want), "{names:?}");
    }
    assert!(records.iter().all(|r| r["value"].as_f64().unwrap().is_finite()));

    let plots = tmp.path().join("plots");
    let log_path = run.join("log.jsonl");
    ok(&nicegan(&[
        "plot",
        "--log",
        log_path.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]));
    assert!(plots.join("total_g.png").is_file());

    let interp = tmp.path().join("interp");
    let input_y = fs::read_dir(data.join("testB")).unwrap().next().unwrap().unwrap().path();
    ok(&nicegan(&[
        "interpolate",
        "--checkpoint",
        &ck_s,
        "--image-x",
        input.to_str().unwrap(),
        "--image-y",
        input_y.to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        interp.to_str().unwrap(),
    ]));
    for f in ["grid.png", "heatmap_x.png", "heatmap_y.png"] {
        assert!(interp.join(f).is_file(), "{f}");
    }

    let lat = tmp.path().join("lat");
    fs::create_dir_all(&lat).unwrap();
    ok(&nicegan(&[
        "latents",
        "--checkpoint",
        &ck_s,
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        lat.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(lat.join("latents.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}

fn image_dims(p: &Path) -> (u32, u32) {
    let out = fs::read(p).unwrap();
    // PNG IHDR: width and height are big-endian u32 at bytes 16..24.
    assert_eq!(&out[1..4], b"PNG");
    let w = u32::from_be_bytes(out[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(out[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn exit_codes() {
    // Usage errors come from clap.
    assert_eq!(nicegan(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(nicegan(&[]).status.code(), Some(2));

    // Config problems exit with 3.
    let tmp = tempfile::tempdir().unwrap();
    let bad_value = nicegan(&["train", "--set", "image_size=48", "--set", "iterations=0"]);
    assert_eq!(bad_value.status.code(), Some(3));
    let unknown = nicegan(&["train", "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(3));
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"image_size": 64, "lr": "fast"}"#).unwrap();
    let typed = nicegan(&["train", "--config", cfg.to_str().unwrap(), "--set", "iterations=0"]);
    assert_eq!(typed.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&typed.stderr).contains("lr"));

    // Missing data is a runtime failure.
    let missing = tmp.path().join("nothing");
    let root = format!("dataset_root={}", missing.display());
    let out = nicegan(&["train", "--set", &root, "--set", "iterations=1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn ablate_dry_run_writes_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    ok(&nicegan(&["ablate", "--out", out.to_str().unwrap(), "--axes", "nice,ra", "--dry-run"]));
    let cells: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert!(cells.len() >= 3, "{} cells", cells.len());
    for c in cells {
        assert!(c.path().join("config.json").is_file());
    }
}
