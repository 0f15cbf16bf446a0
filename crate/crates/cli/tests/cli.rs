use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use earballs_cli::Cli;

fn earballs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earballs"))
        .args(args)
        .env_remove("EARBALLS_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = earballs(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn last_stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or("")
        .to_string()
}

/// Small data directory: 4 clusters of 1024-sample clips.
fn tiny_data(dir: &Path) {
    ok(&[
        "synth-data",
        "--out",
        p(dir),
        "--clusters",
        "4",
        "--per-cluster",
        "6",
        "--val-per-cluster",
        "2",
        "--test-per-cluster",
        "6",
        "--dim",
        "8",
        "--clips",
        "12",
        "--clip-len",
        "1024",
        "--seed",
        "3",
    ]);
}

const TINY_CONFIG: &str =
    "steps = 3\nbatch_size = 4\nmodel_dim = 4\noutput_len = 1024\nvalidate_every = 2\n";

#[test]
fn every_flag_is_documented_in_help() {
    let root = Cli::command();
    let mut checked = 0;
    for sub in root.get_subcommands() {
        let name = sub.get_name().to_string();
        assert!(sub.get_about().is_some(), "{name} has no description");
        let out = ok(&[&name, "--help"]);
        let help = String::from_utf8_lossy(&out.stdout);
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{name}: {id} has no help text");
            let shown = match arg.get_long() {
                Some(l) => format!("--{l}"),
                None => format!("<{}>", id.to_uppercase()),
            };
            assert!(
                help.contains(&shown),
                "{name} --help does not mention {shown}"
            );
            checked += 1;
        }
    }
    assert!(checked > 40, "only {checked} flags found");
    assert_eq!(root.get_subcommands().count(), 9);
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let out = earballs(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
    assert!(last_stderr_line(&out).starts_with("earballs: error: usage:"));

    let dir = tempfile::tempdir().unwrap();
    let out = earballs(&[
        "train",
        "--data",
        p(&dir.path().join("missing")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(last_stderr_line(&out).contains("missing input"));

    // uri_p outside [0, 1] contradicts the config contract
    tiny_data(&dir.path().join("d"));
    let out = earballs(&[
        "train",
        "--data",
        p(&dir.path().join("d")),
        "--out",
        p(&dir.path().join("t")),
        "--uri-p",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", last_stderr_line(&out));

    let out = earballs(&["sonify", "--checkpoint", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = earballs(&[
        "sonify",
        "--checkpoint",
        p(&bad),
        "--vector",
        "0.1,0.2",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let line = last_stderr_line(&out);
    assert!(line.starts_with("earballs: error: checkpoint:"), "{line}");
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

fn read_manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn training_is_deterministic_and_resolves_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        format!("{TINY_CONFIG}seed = 11\nlambda_metric = 2.0\n"),
    )
    .unwrap();
    let runs: Vec<String> = ["a", "b"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            ok(&[
                "train",
                "--config",
                p(&cfg),
                "--seed",
                "7",
                "--data",
                p(&data),
                "--out",
                p(&out),
            ]);
            fs::read_to_string(out.join("train_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0].lines().count(), 4);

    let m = read_manifest(&dir.path().join("a"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["seed_source"], "flag");
    assert_eq!(m["config"]["lambda_metric"], 2.0);
    assert_eq!(m["config"]["steps"], 3);
    // built-in default survives where neither file nor flag speaks
    assert_eq!(m["config"]["lambda_gp"], 10.0);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    // the file seed applies without a flag, and beats the environment
    let out = dir.path().join("c");
    let status = Command::new(env!("CARGO_BIN_EXE_earballs"))
        .args([
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ])
        .env("EARBALLS_SEED", "99")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(read_manifest(&out)["seed_source"], "config");
    assert_eq!(read_manifest(&out)["seed"], 11);
}

#[test]
fn environment_seed_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_earballs"))
        .args([
            "synth-data",
            "--out",
            p(dir.path()),
            "--clusters",
            "3",
            "--per-cluster",
            "2",
        ])
        .args([
            "--val-per-cluster",
            "1",
            "--test-per-cluster",
            "2",
            "--clips",
            "2",
            "--clip-len",
            "1024",
        ])
        .env("EARBALLS_SEED", "42")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(out.success());
    let m = read_manifest(dir.path());
    assert_eq!(m["seed"], 42);
    assert_eq!(m["seed_source"], "env");
}

#[test]
fn resuming_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG.replace("steps = 3", "steps = 4")).unwrap();
    let full = dir.path().join("full");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&full),
    ]);
    let half = dir.path().join("half");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--steps",
        "2",
        "--data",
        p(&data),
        "--out",
        p(&half),
    ]);
    let rest = dir.path().join("rest");
    ok(&[
        "train",
        "--resume",
        p(&half.join("model.ckpt")),
        "--steps",
        "4",
        "--data",
        p(&data),
        "--out",
        p(&rest),
    ]);
    assert_eq!(
        fs::read_to_string(full.join("train_log.csv")).unwrap(),
        fs::read_to_string(rest.join("train_log.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("model.ckpt")).unwrap(),
        fs::read(rest.join("model.ckpt")).unwrap()
    );

    let out = earballs(&[
        "train",
        "--resume",
        p(&half.join("model.ckpt")),
        "--lr",
        "0.1",
        "--data",
        p(&data),
        "--out",
        p(&rest),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sonify_writes_one_wav_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG.replace("steps = 3", "steps = 0")).unwrap();
    let t = dir.path().join("t");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&t),
    ]);
    let v = dir.path().join("v.csv");
    let row = (0..8)
        .map(|i| format!("{}", 0.1 * i as f64 - 0.3))
        .collect::<Vec<_>>()
        .join(",");
    fs::write(&v, format!("{row}\n{row}\n\n{row}\n")).unwrap();
    let out = dir.path().join("out");
    ok(&[
        "sonify",
        "--checkpoint",
        p(&t.join("model.ckpt")),
        "--vector-file",
        p(&v),
        "--out",
        p(&out),
    ]);
    let wavs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .flatten()
        .filter(|e| e.path().extension().is_some_and(|x| x == "wav"))
        .collect();
    assert_eq!(wavs.len(), 3);
    let clip = earballs_core::audio::read_clip(out.join("00002.wav")).unwrap();
    assert_eq!(clip.len(), 1024);

    // a feature table works too, one clip per record
    let out2 = dir.path().join("out2");
    ok(&[
        "sonify",
        "--checkpoint",
        p(&t.join("model.ckpt")),
        "--vector-file",
        p(&data.join("val.csv")),
        "--out",
        p(&out2),
    ]);
    assert_eq!(fs::read_dir(&out2).unwrap().count(), 8 + 1);

    // wrong dimension is a runtime shape error
    let out3 = earballs(&[
        "sonify",
        "--checkpoint",
        p(&t.join("model.ckpt")),
        "--vector",
        "1,2",
        "--out",
        p(&out2),
    ]);
    assert_eq!(out3.status.code(), Some(1));
    assert!(last_stderr_line(&out3).contains("error: shape:"));
}

fn stub(dir: &Path) -> std::path::PathBuf {
    let s = dir.join("stub.json");
    fs::write(
        &s,
        r#"{"stub": "scaled-isometry", "input_dim": 8, "output_len": 1024, "scale": 0.5}"#,
    )
    .unwrap();
    s
}

#[test]
fn evaluate_on_the_isometry_stub_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let s = stub(dir.path());
    let out = dir.path().join("ev");
    let o = ok(&[
        "evaluate",
        "--checkpoint",
        p(&s),
        "--data",
        p(&data),
        "--split",
        "test",
        "--metric",
        "l2",
        "--out",
        p(&out),
    ]);
    let report =
        earballs_core::EvalReport::from_kv(&fs::read_to_string(out.join("report.txt")).unwrap())
            .unwrap();
    assert!((report.pc - 1.0).abs() < 1e-9, "pc {}", report.pc);
    assert!(report.mae < 1e-12);
    assert_eq!(report.nca, 1.0);
    assert_eq!(report.n_records, 24);
    assert!(String::from_utf8_lossy(&o.stdout).contains("pc = "));
}

#[test]
fn test_packages_are_made_checked_and_graded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let s = stub(dir.path());
    let pk = dir.path().join("pk");
    ok(&[
        "make-test",
        "--checkpoint",
        p(&s),
        "--data",
        p(&data),
        "--count",
        "3",
        "--seed",
        "5",
        "--out",
        p(&pk),
    ]);
    let chk = dir.path().join("chk");
    ok(&[
        "check-package",
        p(&pk.join("pkg-000")),
        p(&pk.join("pkg-002")),
        "--out",
        p(&chk),
    ]);

    // reproducible under the same seed
    let pk2 = dir.path().join("pk2");
    ok(&[
        "make-test",
        "--checkpoint",
        p(&s),
        "--data",
        p(&data),
        "--count",
        "3",
        "--seed",
        "5",
        "--out",
        p(&pk2),
    ]);
    for f in [
        "admin/key.json",
        "participant/3.wav",
        "participant/manifest.json",
    ] {
        assert_eq!(
            fs::read(pk.join("pkg-001").join(f)).unwrap(),
            fs::read(pk2.join("pkg-001").join(f)).unwrap()
        );
    }

    // a perfect respondent for pkg-000, an incomplete one for pkg-001
    let key: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pk.join("pkg-000/admin/key.json")).unwrap())
            .unwrap();
    let resp = dir.path().join("responses");
    fs::create_dir_all(&resp).unwrap();
    let perfect = serde_json::json!({
        "package_id": "pkg-000", "answers": key["answers"], "memorability": key["memorability"],
        "participant_id": "s1", "started_at": "2024-05-01T10:00:00Z", "submitted_at": "2024-05-01T10:09:00Z"
    });
    fs::write(resp.join("s1.json"), perfect.to_string()).unwrap();
    let partial = serde_json::json!({
        "package_id": "pkg-001", "answers": {"0": "A"}, "memorability": "A", "participant_id": "s2"
    });
    fs::write(resp.join("s2.json"), partial.to_string()).unwrap();
    let g = dir.path().join("g");
    let o = ok(&[
        "grade",
        "--packages",
        p(&pk),
        "--responses",
        p(&resp),
        "--out",
        p(&g),
    ]);
    let grades: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(g.join("grades.json")).unwrap()).unwrap();
    assert_eq!(grades["participants"][0]["hsa"], 1.0);
    assert_eq!(grades["participants"][0]["hsm"], 1.0);
    assert_eq!(grades["excluded"].as_array().unwrap().len(), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean HSA 1.000"));

    // breaking a package makes check-package fail at runtime
    fs::remove_file(pk.join("pkg-002/participant/0.wav")).unwrap();
    let out = earballs(&["check-package", p(&pk.join("pkg-002")), "--out", p(&chk)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("count rule"));
}

#[test]
fn prepare_data_splits_by_label_and_crops() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    tiny_data(&src);
    let out = dir.path().join("prep");
    ok(&[
        "prepare-data",
        "--features",
        p(&src.join("train.csv")),
        "--audio-dir",
        p(&src.join("corpus")),
        "--out",
        p(&out),
        "--val-labels",
        "1",
        "--test-labels",
        "1",
        "--clip-len",
        "512",
        "--seed",
        "2",
    ]);
    let train = earballs_core::datasets::load_feature_table(out.join("train.csv")).unwrap();
    let val = earballs_core::datasets::load_feature_table(out.join("val.csv")).unwrap();
    let test = earballs_core::datasets::load_feature_table(out.join("test.csv")).unwrap();
    assert_eq!(train.distinct_labels().len(), 2);
    assert_eq!(val.distinct_labels().len(), 1);
    assert_eq!(test.distinct_labels().len(), 1);
    assert!(train.distinct_labels().is_disjoint(&test.distinct_labels()));
    let clip = earballs_core::audio::read_clip(out.join("corpus/clip-00000.wav")).unwrap();
    assert_eq!(clip.len(), 512);
}
