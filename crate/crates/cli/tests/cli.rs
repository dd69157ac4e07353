use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use piba_cli::artifacts::{read_map, RunManifest};

fn piba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_piba"))
        .args(args)
        .env_remove("PIBA_OUT_DIR")
        .output()
        .expect("run piba")
}

fn ok(args: &[&str]) {
    let o = piba(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// Exit code and parsed stderr JSON of a failing run.
fn fails(args: &[&str]) -> (i32, serde_json::Value) {
    let o = piba(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    (o.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small patch dataset and a briefly trained model.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let (d, m) = (dir.join("d"), dir.join("m"));
    ok(&["gen-data", "--seed", "3", "--set", "n_train=60", "--set", "n_val=20", "--set", "n_test=20", "--out", s(&d)]);
    ok(&["train", "--data", s(&d), "--set", "epochs=2", "--out", s(&m)]);
    (d, m)
}

fn verify(dir: &Path, command: &str) -> RunManifest {
    let m = RunManifest::load(&dir.join(format!("manifest_{command}.json"))).unwrap();
    m.verify(dir).unwrap();
    m
}

/// Re-runs `command` from the manifest in `dir` into `again` and compares
/// every artifact byte for byte.
fn rerun_matches(dir: &Path, command: &str, again: &Path) {
    let manifest = dir.join(format!("manifest_{command}.json"));
    ok(&[command, "--manifest", s(&manifest), "--out", s(again)]);
    let m = RunManifest::load(&manifest).unwrap();
    assert!(!m.artifacts.is_empty());
    for a in &m.artifacts {
        let x = std::fs::read(dir.join(&a.path)).unwrap();
        let y = std::fs::read(again.join(&a.path)).unwrap();
        assert!(x == y, "{command}: {} differs on re-run", a.path);
    }
}

#[test]
fn image_pipeline_and_report() {
    let t = tempfile::tempdir().unwrap();
    let (d, m) = setup(t.path());
    assert!(d.join("dataset.piba").exists());
    let csv = std::fs::read_to_string(m.join("accuracy.csv")).unwrap();
    assert!(csv.starts_with("x,y\n"));
    assert_eq!(csv.lines().count(), 4);
    verify(&m, "train");

    let a = t.path().join("a");
    ok(&["attribute", "--data", s(&d), "--model", s(&m), "--method", "random", "--count", "3", "--out", s(&a)]);
    for i in 0..3 {
        let map = read_map(&a.join(format!("test_{i:05}.pibm"))).unwrap();
        assert_eq!(map.shape(), &[16, 16]);
        assert_eq!(map.provenance.method, "random");
        let pgm = std::fs::read(a.join(format!("test_{i:05}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    }
    verify(&a, "attribute");

    ok(&["eval-ehr", "--data", s(&d), "--maps", s(&a), "--out", s(&a)]);
    ok(&["eval-insdel", "--data", s(&d), "--model", s(&m), "--maps", s(&a), "--out", s(&a)]);
    ok(&[
        "eval-sensn", "--data", s(&d), "--model", s(&m), "--maps", s(&a), "--set", "k_sets=10", "--set",
        "n_values=1,4,16", "--out", s(&a),
    ]);
    ok(&["report", "--out", s(&a)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["report_version"], 1);
    let scalars = &r["scalars"]["random"];
    for k in ["ehr", "bbox_ratio", "insertion_auc", "deletion_auc"] {
        assert_eq!(scalars[k]["n"], 3, "{k}");
    }
    assert_eq!(r["curves"]["random"]["sensitivity_n"]["xs"].as_array().unwrap().len(), 3);
    // Earlier runs in the shared directory keep verifying.
    verify(&a, "attribute");
    verify(&a, "eval-ehr");
}

#[test]
fn every_command_reruns_identically() {
    let t = tempfile::tempdir().unwrap();
    let (d, m) = setup(t.path());
    let a = t.path().join("a");
    let again = t.path().join("again");
    let small_iba = [
        "--set", "gan_epochs=1", "--set", "bank_size=8", "--set", "input_steps=2", "--set", "feat_steps=2", "--set",
        "critic_warmup=2",
    ];
    let mut attr = vec!["attribute", "--data", s(&d), "--model", s(&m), "--count", "2", "--out", s(&a)];
    attr.extend(small_iba);
    ok(&attr);
    ok(&["eval-ehr", "--data", s(&d), "--maps", s(&a), "--out", s(&a)]);
    ok(&["eval-insdel", "--data", s(&d), "--model", s(&m), "--maps", s(&a), "--out", s(&a)]);
    ok(&["eval-sensn", "--data", s(&d), "--model", s(&m), "--maps", s(&a), "--set", "k_sets=5", "--out", s(&a)]);
    ok(&["report", "--out", s(&a)]);

    let r = t.path().join("r");
    ok(&["attribute", "--data", s(&d), "--model", s(&m), "--method", "random", "--count", "0", "--split", "train", "--out", s(&r)]);
    ok(&["attribute", "--data", s(&d), "--model", s(&m), "--method", "random", "--count", "0", "--split", "val", "--out", s(&r)]);
    ok(&["attribute", "--data", s(&d), "--model", s(&m), "--method", "random", "--count", "0", "--out", s(&r)]);
    ok(&["eval-roar", "--data", s(&d), "--maps", s(&r), "--set", "rates=0.5", "--set", "epochs=1", "--out", s(&r)]);

    let sc = t.path().join("sc");
    let mut sanity = vec!["sanity-check", "--data", s(&d), "--model", s(&m), "--method", "ig", "--count", "2", "--set", "ig_steps=5", "--out", s(&sc)];
    sanity.extend(["--workers", "2"]);
    ok(&sanity);

    for (dir, cmd) in [
        (&a, "attribute"),
        (&a, "eval-ehr"),
        (&a, "eval-insdel"),
        (&a, "eval-sensn"),
        (&r, "eval-roar"),
        (&sc, "sanity-check"),
        (&d, "gen-data"),
        (&m, "train"),
    ] {
        rerun_matches(dir, cmd, &again.join(cmd));
    }
    // `report` merges whatever reports sit in its output directory.
    let rep = again.join("report");
    std::fs::create_dir_all(&rep).unwrap();
    for f in ["report_eval-ehr.json", "report_eval-insdel.json", "report_eval-sensn.json"] {
        std::fs::copy(a.join(f), rep.join(f)).unwrap();
    }
    rerun_matches(&a, "report", &rep);
}

#[test]
fn token_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let (d, m, a) = (t.path().join("d"), t.path().join("m"), t.path().join("a"));
    ok(&["gen-data", "--set", "kind=token", "--set", "n_train=40", "--set", "n_val=10", "--set", "n_test=10", "--out", s(&d)]);
    ok(&["train", "--data", s(&d), "--set", "epochs=1", "--out", s(&m)]);
    ok(&["attribute", "--data", s(&d), "--model", s(&m), "--method", "ig", "--count", "2", "--out", s(&a)]);
    let map = read_map(&a.join("test_00000.pibm")).unwrap();
    assert_eq!(map.shape(), &[32]);
    assert!(!a.join("test_00000.pgm").exists());
    ok(&["eval-sensn", "--data", s(&d), "--model", s(&m), "--maps", s(&a), "--set", "k_sets=5", "--out", s(&a)]);
    ok(&["eval-insdel", "--data", s(&d), "--model", s(&m), "--maps", s(&a), "--out", s(&a)]);
    let csv = std::fs::read_to_string(a.join("sensn.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    let (code, _) = fails(&["eval-ehr", "--data", s(&d), "--maps", s(&a), "--out", s(&a)]);
    assert_eq!(code, 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("gen.cfg");
    std::fs::write(&cfg, "# small\nseed = 5\nn_train = 12\nn_val = 4\nn_test = 4\n").unwrap();
    let out = t.path().join("d");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "9", "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("config_gen-data.txt")).unwrap();
    assert!(text.contains("seed = 9\n"));
    assert!(text.contains("n_train = 12\n"));
    assert_eq!(verify(&out, "gen-data").seeds, vec![9]);
}

#[test]
fn out_dir_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_piba"))
        .args(["gen-data", "--set", "n_train=6", "--set", "n_val=3", "--set", "n_test=3"])
        .env("PIBA_OUT_DIR", t.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(t.path().join("dataset.piba").exists());
    let (code, err) = fails(&["gen-data"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
}

#[test]
fn error_classes() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x");

    let (code, err) = fails(&["train", "--set", "bogus=1", "--out", s(&out)]);
    assert_eq!((code, err["exit_code"].as_i64()), (2, Some(2)));
    assert!(err["message"].as_str().unwrap().contains("bogus"));
    assert_eq!(fails(&["train", "--no-such-flag"]).0, 2);
    assert_eq!(fails(&["train", "--set", "epochs=many", "--data", "x", "--out", s(&out)]).0, 2);
    assert_eq!(fails(&["train", "--out", s(&out)]).0, 2);

    let (code, err) = fails(&["train", "--data", s(&t.path().join("missing")), "--out", s(&out)]);
    assert_eq!(code, 3);
    assert_eq!(err["error"], "artifact");

    let (d, m) = setup(t.path());
    let mut bytes = std::fs::read(d.join("dataset.piba")).unwrap();
    bytes[0] = b'X';
    let bad = t.path().join("bad.piba");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(fails(&["train", "--data", s(&bad), "--out", s(&out)]).0, 3);

    let mut map = std::fs::read(m.join("model.pibc")).unwrap();
    map[0] = b'Q';
    let bad_model = t.path().join("bad.pibc");
    std::fs::write(&bad_model, &map).unwrap();
    let args = ["attribute", "--data", s(&d), "--model", s(&bad_model), "--method", "random", "--out", s(&out)];
    assert_eq!(fails(&args).0, 3);
    let (code, _) = fails(&["eval-ehr", "--data", s(&d), "--maps", s(&t.path().join("nomaps")), "--out", s(&out)]);
    assert_eq!(code, 3);

    let (code, err) = fails(&["train", "--data", s(&d), "--set", "lr=1e300", "--set", "epochs=2", "--out", s(&out)]);
    assert_eq!(code, 4, "{err}");
    assert_eq!(err["error"], "numeric");
}

#[test]
fn tampered_artifact_fails_verification() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--set", "n_train=6", "--set", "n_val=3", "--set", "n_test=3", "--out", s(&d)]);
    let m = verify(&d, "gen-data");
    assert!(m.artifacts.iter().any(|a| a.path == "dataset.piba"));
    std::fs::write(d.join("dataset.piba"), b"PIBA").unwrap();
    assert!(m.verify(&d).is_err());
}
