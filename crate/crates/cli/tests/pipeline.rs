use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nfad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        stderr(&o)
    );
    o
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let o = nfad(&["synth", "--out", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_1() {
    assert_eq!(nfad(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = nfad(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in [
        "synth",
        "featurize",
        "train",
        "score",
        "eval",
        "velocity",
        "report",
    ] {
        assert!(stdout(&o).contains(sub), "help lacks {sub}");
    }
}

#[test]
fn eval_without_checkpoints_lists_missing_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(nfad(&["synth", "--out", out, "--clips-per-set", "1"]));
    ok(nfad(&["featurize", "--out", out]));
    let o = nfad(&["eval", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("glow-multi-constrained.nfad"), "{err}");
    assert!(err.contains("vae.nfad"), "{err}");
}

#[test]
fn featurize_before_synth_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfad(&["featurize", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("synth"));
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"preset\": \"desk\", \"extra\": 1}").unwrap();
    let o = nfad(&[
        "synth",
        "--out",
        dir.path().to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(nfad(&["synth", "--out", out, "--clips-per-set", "1"]));
    ok(nfad(&["featurize", "--out", out]));
    let ck = dir.path().join("broken.nfad");
    fs::write(&ck, b"NFAD\x01\x00").unwrap();
    let o = nfad(&["score", "--out", out, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn produced(o: &Output) -> Vec<String> {
    let text = stdout(o);
    let last = text.lines().last().expect("manifest line");
    assert!(last.starts_with("produced: "), "{last}");
    last["produced: ".len()..]
        .split(' ')
        .map(str::to_string)
        .collect()
}

#[test]
fn full_pipeline_produces_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let root = dir.path();

    let o = ok(nfad(&[
        "synth",
        "--out",
        out,
        "--clips-per-set",
        "1",
        "--seed",
        "3",
    ]));
    assert!(produced(&o).iter().all(|p| Path::new(p).exists()));
    let manifest = fs::read(root.join("data/manifest.json")).unwrap();
    ok(nfad(&[
        "synth",
        "--out",
        out,
        "--clips-per-set",
        "1",
        "--seed",
        "3",
    ]));
    assert_eq!(manifest, fs::read(root.join("data/manifest.json")).unwrap());

    ok(nfad(&["featurize", "--out", out]));
    let o = ok(nfad(&[
        "train",
        "--out",
        out,
        "--model",
        "glow-multi",
        "--constrained",
        "--epochs",
        "1",
    ]));
    let files = produced(&o);
    assert!(files
        .iter()
        .any(|f| f.ends_with("glow-multi-constrained.nfad")));
    let first = fs::read(root.join("checkpoints/glow-multi-constrained.nfad")).unwrap();
    ok(nfad(&[
        "train",
        "--out",
        out,
        "--model",
        "glow-multi",
        "--constrained",
        "--epochs",
        "1",
    ]));
    assert_eq!(
        first,
        fs::read(root.join("checkpoints/glow-multi-constrained.nfad")).unwrap()
    );

    ok(nfad(&[
        "train",
        "--out",
        out,
        "--model",
        "glow-multi",
        "--unconstrained",
        "--epochs",
        "1",
    ]));
    ok(nfad(&[
        "train", "--out", out, "--model", "vae", "--epochs", "1",
    ]));
    ok(nfad(&[
        "train",
        "--out",
        out,
        "--model",
        "vae",
        "--constrained",
        "--epochs",
        "1",
    ]));

    let loss =
        fs::read_to_string(root.join("checkpoints/glow-multi-constrained.loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,term,value"));

    let o = ok(nfad(&["eval", "--out", out]));
    let files = produced(&o);
    assert!(files.iter().all(|p| Path::new(p).exists()));
    let table = fs::read_to_string(root.join("eval/table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 8, "{table}");
    assert!(rows[0].contains("seen") && rows[0].contains("unseen") && rows[0].contains("all"));
    assert!(root.join("config.eval.json").exists());

    let ck = root.join("checkpoints/glow-multi-constrained.nfad");
    ok(nfad(&[
        "score",
        "--out",
        out,
        "--checkpoint",
        ck.to_str().unwrap(),
    ]));
    let scores = fs::read_to_string(root.join("scores/glow-multi-constrained.scores.csv")).unwrap();
    assert!(
        scores.starts_with("clip_id,velocity,anomalous,score_invariant,score_full_nll,v_estimate")
    );
    assert_eq!(scores.lines().count(), 1 + 30);

    ok(nfad(&["velocity", "--out", out]));
    assert!(root
        .join("velocity/glow-multi-constrained.velocity.csv")
        .exists());
    let unconstrained = root.join("checkpoints/glow-multi-unconstrained.nfad");
    let o = nfad(&[
        "velocity",
        "--out",
        out,
        "--checkpoint",
        unconstrained.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = ok(nfad(&["report", "--out", out]));
    assert!(stdout(&o).contains("Pearson"));
    assert!(root.join("report.txt").exists());
}

#[test]
fn paper_preset_snapshot_has_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(nfad(&[
        "synth",
        "--out",
        out,
        "--preset",
        "paper",
        "--clips-per-set",
        "1",
    ]));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.synth.json")).unwrap())
            .unwrap();
    assert_eq!(v["preset"], "paper");
    assert_eq!(v["features"]["n_mels"], 128);
    assert_eq!(v["features"]["patch_frames"], 64);
    assert_eq!(v["train"]["blocks"], 3);
    assert_eq!(v["train"]["steps"], 5);
    assert_eq!(v["train"]["epochs"], 1000);
}
