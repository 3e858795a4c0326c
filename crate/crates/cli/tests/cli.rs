use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use audiocap_cli::config::PipelineConfig;
use audiocap_cli::pipeline::{plan_hashes, stage_hash, Provenance, Stage};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_audiocap");

fn audiocap(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--log-level").arg("warn").args(args).env_remove("AC_SEED");
    if let Some(s) = seed_env {
        cmd.env("AC_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, items: usize) {
    let out = dir.join("syn");
    let o = audiocap(&["synth", "--out", out.to_str().unwrap(), "--items", &items.to_string()], None);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn pipeline_json(extra: Value) -> Value {
    let mut v = json!({
        "work_dir": "work",
        "seed": 3,
        "data": {
            "captions": "syn/captions.csv",
            "metadata": "syn/metadata.csv",
            "audio_dir": "syn/audio",
            "lemma_table": "syn/lemmas.csv",
            "valid_count": 2,
            "test_count": 2
        },
        "train": {"variant": "Model1", "profile": "desk", "max_steps": 12, "validate": false},
        "decode": {"beam": 3, "tta": 2}
    });
    audiocap_cli::config::merge(&mut v, &extra);
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn run(cfg: &Path, extra: &[&str], seed_env: Option<&str>) -> Output {
    let mut args = vec!["run", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    audiocap(&args, seed_env)
}

fn ran_and_skipped(o: &Output) -> (Vec<String>, Vec<String>) {
    let (mut ran, mut skipped) = (Vec::new(), Vec::new());
    for line in stdout(o).lines() {
        if let Some((stage, what)) = line.split_once(": ") {
            if what == "ran" {
                ran.push(stage.to_string());
            } else if what.starts_with("skipped") {
                skipped.push(stage.to_string());
            }
        }
    }
    (ran, skipped)
}

#[test]
fn pipeline_produces_report_and_rerun_skips() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 8);
    let cfg = write_config(t.path(), "pipeline.json", &pipeline_json(json!({})));

    let first = run(&cfg, &[], None);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(ran_and_skipped(&first).0.len(), 6);
    let report: Value = serde_json::from_slice(&std::fs::read(t.path().join("work/report.json")).unwrap()).unwrap();
    for key in ["bleu_1", "bleu_4", "rouge_l", "cider"] {
        let x = report[key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&x), "{key} = {x}");
    }
    let captions: Value = serde_json::from_slice(&std::fs::read(t.path().join("work/captions.json")).unwrap()).unwrap();
    assert_eq!(captions.as_array().unwrap().len(), 2);

    let second = run(&cfg, &[], None);
    assert!(second.status.success());
    let (ran, skipped) = ran_and_skipped(&second);
    assert!(ran.is_empty(), "{ran:?}");
    assert_eq!(skipped.len(), 6);

    // A decode change invalidates only caption and evaluate.
    let cfg2 = write_config(t.path(), "pipeline.json", &pipeline_json(json!({"decode": {"beam": 2}})));
    let third = run(&cfg2, &[], None);
    assert!(third.status.success(), "{}", stderr(&third));
    assert_eq!(ran_and_skipped(&third).0, ["caption", "evaluate"]);

    let forced = run(&cfg2, &["--stage", "build-vocab", "--force"], None);
    assert!(forced.status.success());
    assert_eq!(ran_and_skipped(&forced).0, ["build-vocab"]);
}

#[test]
fn frontend_change_reruns_featurize_and_downstream() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 6);
    let cfg = write_config(t.path(), "p.json", &pipeline_json(json!({"data": {"test_count": 0}})));
    assert!(run(&cfg, &[], None).status.success());
    let changed = pipeline_json(json!({"data": {"test_count": 0}, "frontend": {"hpss": {"kernel": 15}}}));
    let cfg = write_config(t.path(), "p.json", &changed);
    let o = run(&cfg, &[], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let (ran, skipped) = ran_and_skipped(&o);
    assert_eq!(skipped, ["ingest", "build-vocab"]);
    assert_eq!(ran, ["featurize", "train", "caption", "evaluate"]);
}

#[test]
fn provenance_hashes_can_be_recomputed() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 6);
    let cfg_path = write_config(t.path(), "p.json", &pipeline_json(json!({})));
    assert!(run(&cfg_path, &[], None).status.success());

    let prov = Provenance::load(&t.path().join("work")).unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let plan = plan_hashes(&cfg).unwrap();
    for stage in Stage::ALL {
        let rec = &prov.stages[stage.name()];
        assert_eq!(rec.config_hash, stage_hash(stage.name(), &rec.config, &rec.upstream));
        assert_eq!(rec.config_hash, plan[&stage].2, "{stage}");
        assert_eq!(rec.seed, 3);
        for dep in stage.deps() {
            assert_eq!(rec.upstream[dep.name()], prov.stages[dep.name()].config_hash);
        }
        assert!(rec.versions.contains_key("audiocap-model"));
    }
}

#[test]
fn seed_environment_variable_overrides_config_seed() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 6);
    let cfg = write_config(t.path(), "p.json", &pipeline_json(json!({})));
    let o = run(&cfg, &["--stage", "ingest"], Some("41"));
    assert!(o.status.success(), "{}", stderr(&o));
    let prov = Provenance::load(&t.path().join("work")).unwrap();
    assert_eq!(prov.stages["ingest"].seed, 41);
    assert_eq!(prov.stages["ingest"].config["seed"], 41);

    // Same seed from the file is a different configuration, so ingest reruns.
    let o = run(&cfg, &["--stage", "ingest"], None);
    assert_eq!(ran_and_skipped(&o).0, ["ingest"]);

    let bad = run(&cfg, &["--stage", "ingest"], Some("abc"));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn synth_output_follows_seed_environment_variable() {
    let t = tempfile::tempdir().unwrap();
    let read = |d: &str| std::fs::read_to_string(t.path().join(d).join("captions.csv")).unwrap();
    for (dir, seed, env) in [("a", "0", Some("9")), ("b", "9", None), ("c", "0", None)] {
        let o = audiocap(&["synth", "--out", t.path().join(dir).to_str().unwrap(), "--seed", seed], env);
        assert!(o.status.success());
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn stage_before_prerequisite_exits_2_with_hint() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 6);
    let cfg = write_config(t.path(), "p.json", &pipeline_json(json!({})));
    let o = run(&cfg, &["--stage", "caption"], None);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("stage `caption` needs `featurize`"), "{msg}");
    assert!(msg.contains("--stage featurize"), "{msg}");

    for stage in ["ingest", "featurize", "build-vocab"] {
        assert!(run(&cfg, &["--stage", stage], None).status.success());
    }
    let o = run(&cfg, &["--stage", "caption"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("needs `train`: it has not been run"), "{}", stderr(&o));

    let o = audiocap(
        &["caption", "--checkpoints", t.path().join("nothing").to_str().unwrap(), "--wav", t.path().join("syn/audio").to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `audiocap train` first"), "{}", stderr(&o));
}

#[test]
fn invalid_configuration_exits_2() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 4);
    let cases = [
        json!({"train": {"bogus": 1}}),
        json!({"train": {"mixup": {"alpah": 0.4}}}),
        json!({"train": {"seed": 5}}),
        json!({"train": {"lr": -1.0}}),
        json!({"frontend": {"n_mels": 40}}),
        json!({"decode": {"beam": 0}}),
        json!({"ensemble": {"recipe": "nope"}}),
        json!({"extra": true}),
    ];
    for (i, extra) in cases.iter().enumerate() {
        let cfg = write_config(t.path(), &format!("bad{i}.json"), &pipeline_json(extra.clone()));
        let o = run(&cfg, &[], None);
        assert_eq!(o.status.code(), Some(2), "{extra}: {}", stderr(&o));
        assert!(stderr(&o).contains("configuration error"), "{}", stderr(&o));
        assert!(!t.path().join("work").exists(), "{extra} created outputs");
    }
    let o = audiocap(&["run", "--config", t.path().join("missing.json").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_data_exits_3() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 4);
    let syn = t.path().join("syn");
    let bad = t.path().join("bad.csv");
    std::fs::write(&bad, "file_name,caption_1\nx.wav,a dog barks\n").unwrap();
    let o = audiocap(
        &[
            "ingest",
            "--captions",
            bad.to_str().unwrap(),
            "--metadata",
            syn.join("metadata.csv").to_str().unwrap(),
            "--audio-dir",
            syn.join("audio").to_str().unwrap(),
            "--cache",
            t.path().join("c").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("caption_2"));

    let first = std::fs::read_dir(syn.join("audio")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&first, b"not a wav").unwrap();
    let cfg = write_config(t.path(), "p.json", &pipeline_json(json!({"data": {"valid_count": 0, "test_count": 0}})));
    let o = run(&cfg, &[], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn standalone_commands_chain() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 6);
    let p = |s: &str| t.path().join(s).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let o = audiocap(args, None);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["ingest", "--captions", &p("syn/captions.csv"), "--metadata", &p("syn/metadata.csv"), "--audio-dir", &p("syn/audio"), "--cache", &p("c")]);
    ok(&["featurize", "--in", &p("c"), "--out", &p("c")]);
    ok(&["build-vocab", "--captions", &p("syn/captions.csv"), "--metadata", &p("syn/metadata.csv"), "--lemma-table", &p("syn/lemmas.csv"), "--out", &p("c/vocab"), "--profile", "desk"]);
    std::fs::write(t.path().join("tc.json"), r#"{"variant": "Model1", "profile": "desk", "max_steps": 5, "validate": false}"#).unwrap();
    ok(&["sweep", "--variants", "Model1,Model1", "--config", &p("tc.json"), "--corpus", &p("c"), "--out", &p("m")]);
    let manifest: Value = serde_json::from_slice(&std::fs::read(t.path().join("m/ensemble.json")).unwrap()).unwrap();
    assert_eq!(manifest["members"].as_array().unwrap().len(), 2);

    let wav = std::fs::read_dir(t.path().join("syn/audio")).unwrap().next().unwrap().unwrap().path();
    let one = ok(&["caption", "--checkpoints", &p("m"), "--wav", wav.to_str().unwrap(), "--tta", "2"]);
    let v: Value = serde_json::from_str(&stdout(&one)).unwrap();
    assert!(v["caption"].is_string());
    ok(&["caption", "--checkpoints", &p("m"), "--wav", &p("syn/audio"), "--tta", "2", "--out", &p("cands.json")]);
    let cands: Value = serde_json::from_slice(&std::fs::read(t.path().join("cands.json")).unwrap()).unwrap();
    assert_eq!(cands.as_array().unwrap().len(), 6);

    std::fs::write(t.path().join("spice.json"), "20").unwrap();
    let e = ok(&["evaluate", "--candidates", &p("cands.json"), "--references", &p("syn/captions.csv"), "--spice", &p("spice.json"), "--out", &p("report.json")]);
    assert!(stdout(&e).contains("CIDEr"));
    let report: Value = serde_json::from_slice(&std::fs::read(t.path().join("report.json")).unwrap()).unwrap();
    let spider = report["spider"].as_f64().unwrap();
    assert!((spider - (report["cider"].as_f64().unwrap() + 20.0) / 2.0).abs() < 1e-9, "{report}");
}

#[test]
fn show_config_echoes_full_data_settings() {
    let o = audiocap(&["show-config", "--profile", "paper", "--variant", "Model1"], None);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["train"]["lr"], 1e-4);
    assert_eq!(v["train"]["batch_size"], 48);
    assert_eq!(v["train"]["epochs"], 300);
    assert_eq!(v["split"]["valid"], 96);
    assert_eq!(v["frontend"]["n_mels"], 64);
    assert_eq!(v["decode"]["beam"], 5);
}
