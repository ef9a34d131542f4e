use std::path::Path;
use std::process::{Command, Output};

fn gradleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradleak")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = gradleak(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let out = gradleak(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(gradleak(&[]).status.code(), Some(2));
    assert_eq!(gradleak(&["synth-data", "--gen", "plaid", "--n", "4", "--out", "x"]).status.code(), Some(2));
    assert_eq!(gradleak(&["attack", "--out", "x"]).status.code(), Some(2));
    assert_eq!(gradleak(&["--help"]).status.code(), Some(0));
}

#[test]
fn default_configs_print_as_json() {
    for cmd in ["attack", "sweep", "train-victim"] {
        let out = ok(&[cmd, "--print-default-config"]);
        let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(json.is_object(), "{cmd}");
    }
    let attack: serde_json::Value = serde_json::from_slice(&ok(&["attack", "--print-default-config"]).stdout).unwrap();
    assert_eq!(attack["iterations"], 2000);
}

#[test]
fn contract_violations_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"iterashuns": 10}"#).unwrap();
    let out = gradleak(&["attack", "--capture", "c", "--victim", "v", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterashuns"));

    let data = dir.path().join("data");
    let out = gradleak(&["synth-data", "--gen", "gaussian_blobs", "--n", "0", "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_train_capture_attack_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth-data", "--gen", "smooth_gradients", "--n", "16", "--size", "8", "--classes", "4", "--seed", "2", "--out", p(&data)]);
    assert!(data.join("labels.json").exists());

    let arch = root.join("arch.json");
    std::fs::write(
        &arch,
        r#"{"image_size":8,"channels":1,"patch_size":4,"embed_dim":8,"depth":3,"heads":2,"mlp_ratio":2,"num_classes":4}"#,
    )
    .unwrap();
    let train = root.join("train.json");
    std::fs::write(&train, r#"{"epochs":2,"batch_size":8}"#).unwrap();
    let victim = root.join("victim.gvt");
    ok(&["train-victim", "--data", p(&data), "--arch", p(&arch), "--config", p(&train), "--out", p(&victim)]);
    let prior = root.join("prior.gvt");
    ok(&["train-prior", "--data", p(&data), "--epochs", "1", "--batch-size", "8", "--out", p(&prior)]);

    let capture = root.join("capture.gvt");
    ok(&["capture", "--victim", p(&victim), "--data", p(&data), "--batch-indices", "0,1", "--out", p(&capture)]);
    assert!(root.join("capture.originals.gvt").exists());
    let out = gradleak(&["capture", "--victim", p(&victim), "--data", p(&data), "--batch-indices", "99", "--out", p(&capture)]);
    assert_eq!(out.status.code(), Some(3));

    let attack = root.join("attack.json");
    std::fs::write(&attack, r#"{"iterations": 20, "seeds": [0, 1]}"#).unwrap();
    let run = root.join("run");
    ok(&["attack", "--capture", p(&capture), "--victim", p(&victim), "--prior", p(&prior), "--config", p(&attack), "--out", p(&run)]);
    for f in ["manifest.json", "consensus.gvt", "seed_0/recon.gvt", "seed_1/ledger.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let again = root.join("again");
    ok(&["attack", "--manifest", p(&run.join("manifest.json")), "--out", p(&again)]);
    assert_eq!(std::fs::read(run.join("seed_1/recon.gvt")).unwrap(), std::fs::read(again.join("seed_1/recon.gvt")).unwrap());

    let originals = root.join("capture.originals.gvt");
    let out = ok(&["report", "--run", p(&run), "--images", p(&originals)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["batch_size"], 2);
    assert!(run.join("metrics.json").exists() && run.join("panels/pair_0.pgm").exists());
    let csv = ok(&["report", "--run", p(&run), "--images", p(&originals), "--format", "csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("run,batch_size"));

    // scored against itself the consensus is matched in order and identified
    let out = ok(&["report", "--run", p(&run), "--images", p(&run.join("consensus.gvt"))]);
    let own: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(own["metrics"]["assignment"], serde_json::json!([0, 1]));
    assert_eq!(own["metrics"]["iip"], 1.0);
    assert_eq!(own["metrics"]["psnr_mean"], 99.0);

    let sweep = root.join("sweep.json");
    std::fs::write(&sweep, r#"{"attack": {"iterations": 6}, "batch_sizes": [1, 2]}"#).unwrap();
    let sweep_out = root.join("sweep");
    ok(&[
        "sweep", "--axis", "batch_size", "--trials", "1", "--config", p(&sweep), "--victim", p(&victim), "--prior",
        p(&prior), "--data", p(&data), "--out", p(&sweep_out),
    ]);
    let csv = std::fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
