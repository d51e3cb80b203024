// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use invprobe::report::{OutputManifest, Results};
use invprobe::store::read_json;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_invprobe"));
    c.env_remove("PROBE_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, config: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let cfg = dir.join("synth.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("bundle");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const CLEAN: &str = r#"{"d": 24, "K": 4, "n_per_class": 15, "heads": 2, "seed": 5}"#;

fn summary(o: &Output) -> Value {
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn all_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let manifest: OutputManifest = read_json(dir.join("outputs.json")).unwrap();
    manifest
        .files
        .iter()
        .map(|f| (f.clone(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn synth_then_zeroshot_then_report() {
    let t = tempfile::tempdir().unwrap();
    let bundle = synth(t.path(), CLEAN);
    let synth_outputs: OutputManifest = read_json(bundle.join("outputs.json")).unwrap();
    assert!(synth_outputs.files.contains(&"manifest.json".to_string()));
    assert!(synth_outputs.files.iter().all(|f| bundle.join(f).exists()));

    let o = run(&["validate", s(&bundle)]);
    assert_eq!(o.status.code(), Some(0));

    let out = t.path().join("zs");
    let sum = summary(&run(&["probe", "zeroshot", "--bundle", s(&bundle), "--out", s(&out)]));
    assert_eq!(sum["accuracy"], 1.0);
    assert_eq!(sum["heads"], 2);

    let manifest: OutputManifest = read_json(out.join("outputs.json")).unwrap();
    assert_eq!(manifest.command, "probe zeroshot");
    assert_eq!(manifest.files, ["scores.csv", "results.json"]);

    let csv = run(&["report", "--in", s(&out), "--format", "csv"]);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("layer,head,method,accuracy,n_correct,n_eval,class_0"));
    assert_eq!(text.lines().count(), 3);

    let json = run(&["report", "--in", s(&out), "--format", "json"]);
    let r: Results = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(r, Results::read(&out).unwrap());
}

#[test]
fn corrupted_bundle_fails_validation() {
    let t = tempfile::tempdir().unwrap();
    let bundle = synth(t.path(), CLEAN);
    fs::write(bundle.join("layer0_head1_class.actbin"), b"ACTB\x01").unwrap();
    let o = run(&["validate", s(&bundle)]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().next().unwrap().starts_with("error: {\"finding\":\"corrupt_file\""));

    let o = run(&["probe", "zeroshot", "--bundle", s(&bundle)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn usage_errors() {
    assert_eq!(run(&["probe", "zeroshot", "--bundle", "x", "--frobnicate"]).status.code(), Some(64));
    assert_eq!(run(&["nonsense"]).status.code(), Some(64));
    assert_eq!(run(&["report", "--in", "x", "--format", "xml"]).status.code(), Some(64));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn seeded_commands_are_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let bundle = synth(t.path(), r#"{"d": 16, "K": 3, "n_per_class": 12, "heads": 2, "noise_scale": 0.4, "seed": 9}"#);
    let cases: Vec<Vec<&str>> = vec![
        vec!["probe", "unsupervised", "--epochs", "30", "--seed", "4"],
        vec!["sae", "train", "--k", "4", "--epochs", "10", "--seed", "4"],
        vec!["align", "--permutations", "20", "--seed", "4"],
    ];
    for (i, case) in cases.iter().enumerate() {
        let mut outs = Vec::new();
        for (rep, jobs) in ["1", "3"].iter().enumerate() {
            let out = t.path().join(format!("case{i}_{rep}"));
            let mut args = case.clone();
            args.extend(["--bundle", s(&bundle), "--out", s(&out), "--jobs", jobs]);
            summary(&run(&args));
            outs.push(all_bytes(&out));
        }
        assert_eq!(outs[0], outs[1], "{case:?} differs between runs");
    }

    // the synth command itself
    let a = synth(&t.path().join("a"), CLEAN);
    let b = synth(&t.path().join("b"), CLEAN);
    assert_eq!(all_bytes(&a), all_bytes(&b));
}

#[test]
fn config_file_and_flag_override() {
    let t = tempfile::tempdir().unwrap();
    let bundle = synth(t.path(), CLEAN);
    let cfg = t.path().join("probe.json");
    fs::write(&cfg, r#"{"temperature": 0.5, "epochs": 7, "lr": 0.01}"#).unwrap();
    let sum = summary(&run(&[
        "probe", "unsupervised", "--bundle", s(&bundle), "--out", s(&t.path().join("u")),
        "--config", s(&cfg), "--epochs", "3",
    ]));
    assert_eq!(sum["config"]["temperature"], 0.5);
    assert_eq!(sum["config"]["epochs"], 3);
    assert_eq!(sum["config"]["lr"], 0.01);
    let models: OutputManifest = read_json(t.path().join("u/outputs.json")).unwrap();
    assert!(models.files.contains(&"models/L0_H1_W.actbin".to_string()));
}

#[test]
fn sae_train_then_reuse_models() {
    let t = tempfile::tempdir().unwrap();
    let bundle = synth(t.path(), CLEAN);
    let train = t.path().join("train");
    summary(&run(&[
        "sae", "train", "--bundle", s(&bundle), "--out", s(&train), "--m", "32", "--k", "4",
        "--epochs", "20", "--lr", "0.01",
    ]));
    let models = train.join("models");
    let classify = summary(&run(&[
        "sae", "classify", "--bundle", s(&bundle), "--models", s(&models),
        "--out", s(&t.path().join("c")),
    ]));
    assert!(classify["accuracy"].as_f64().unwrap() > 0.9);
    let c_outputs: OutputManifest = read_json(t.path().join("c/outputs.json")).unwrap();
    assert!(!c_outputs.files.iter().any(|f| f.starts_with("models/")));

    let o = run(&[
        "sae", "overlap", "--bundle", s(&bundle), "--models", s(&models), "--ktop", "4",
        "--out", s(&t.path().join("o")),
    ]);
    let sum = summary(&o);
    assert_eq!(sum["ktop"], 4);
    let r = Results::read(t.path().join("o")).unwrap();
    assert_eq!(r.rows.len(), 2 * 4);
    for row in &r.rows {
        assert!(row[4].as_u64().unwrap() <= 4);
    }

    // a model trained on another dimension is rejected
    let other = synth(&t.path().join("other"), r#"{"d": 12, "K": 4, "n_per_class": 5, "heads": 2}"#);
    let o = run(&["sae", "classify", "--bundle", s(&other), "--models", s(&models)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grok_run_writes_metrics() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("grok.json");
    fs::write(
        &cfg,
        r#"{"p": 7, "d_model": 8, "n_heads": 2, "mlp_width": 16, "max_steps": 6,
            "eval_interval": 3, "probe_epochs": 10, "train_frac": 0.6}"#,
    )
    .unwrap();
    let out = t.path().join("g");
    let sum = summary(&run(&["grok", "run", "--config", s(&cfg), "--out", s(&out), "--head", "linear_unembed"]));
    assert_eq!(sum["config"]["head_type"], "linear_unembed");
    let manifest: OutputManifest = read_json(out.join("outputs.json")).unwrap();
    assert_eq!(manifest.files, ["metrics.json", "embedding.actbin", "results.json"]);
    let r = Results::read(&out).unwrap();
    assert_eq!(r.rows.len(), 3); // steps 0, 3, 6

    let o = run(&["grok", "sweep", "--config", s(&cfg), "--seeds", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
}
