use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn revoicer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revoicer"))
        .args(args)
        .env("REVOICER_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn corpus_config() -> Value {
    json!({
        "train_utts_per_speaker": 10,
        "eval_utts_per_speaker": 1,
        "duration_s": [1.0, 1.2],
        "rirs_per_split": 3,
        "speakers": [
            {"id": "a", "formant_freqs": [500, 1300, 2300], "pitch_range": [90, 150], "seed": 1},
            {"id": "b", "formant_freqs": [650, 1700, 2750], "pitch_range": [170, 260], "seed": 2}
        ]
    })
}

fn tiny_train() -> Value {
    json!({
        "steps": 20,
        "model": {"encoder_channels": [8, 8, 8, 8], "code_dim": 4, "codes": 8, "speaker_dim": 2,
                  "decoder_channels": 8, "decoder_blocks": 1}
    })
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_flag_is_a_usage_error() {
    let out = revoicer(&["synth-corpus", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let v = err_json(&out);
    assert_eq!(v["error"]["kind"], "usage");
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = revoicer(&["experiment", "--config", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let v = err_json(&out);
    assert_eq!(v["error"]["kind"], "missing_file");
    assert_eq!(v["error"]["path"], s(&missing));
}

#[test]
fn corpus_enhance_metrics_train_convert() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("corpus.json"), &corpus_config());
    let corpus = d.join("corpus");
    let v = ok_json(&revoicer(&["synth-corpus", "--config", s(&d.join("corpus.json")), "--out", s(&corpus), "--seed", "3"]));
    assert_eq!(v["utterances"], 22);
    let manifest = corpus.join("manifest.jsonl");

    // rerunning into a populated directory needs --force
    let again = revoicer(&["synth-corpus", "--config", s(&d.join("corpus.json")), "--out", s(&corpus), "--seed", "3"]);
    assert_eq!(err_json(&again)["error"]["kind"], "output_exists");

    let enh = d.join("enh");
    let k1 = ok_json(&revoicer(&["enhance", "--manifest", s(&manifest), "--chain", "dn,dr", "--out", s(&enh)]))["key"].clone();
    let k2 = ok_json(&revoicer(&["enhance", "--manifest", s(&manifest), "--chain", "dr,dn", "--out", s(&enh)]))["key"].clone();
    assert_ne!(k1, k2);
    let enh_manifest = enh.join("manifest.jsonl");
    let text = std::fs::read_to_string(&enh_manifest).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["paths"].get(k1.as_str().unwrap()).is_some());
    assert!(first["paths"].get(k2.as_str().unwrap()).is_some());

    let clean = format!("{}:clean", s(&manifest));
    let report = d.join("m.json");
    let v = ok_json(&revoicer(&["metrics", "--est", &clean, "--ref", &clean, "--metrics", "si_sdr,sd_sdr", "--out", s(&report)]));
    assert_eq!(v["means"]["si_sdr"], 100.0);
    assert_eq!(v["failures"], 0);
    let bad = revoicer(&["metrics", "--est", &clean, "--ref", &clean, "--metrics", "pesq", "--out", s(&report)]);
    assert_eq!(err_json(&bad)["error"]["kind"], "invalid_config");

    write(&d.join("train.json"), &tiny_train());
    let model = d.join("model.rvc");
    let v = ok_json(&revoicer(&[
        "train", "--manifest", s(&manifest), "--key", "clean", "--config", s(&d.join("train.json")), "--out", s(&model),
    ]));
    assert!(v["final_total_loss"].as_f64().unwrap().is_finite());
    assert!(d.join("model.loss.json").is_file());

    let source = corpus.join("clean").read_dir().unwrap().map(|e| e.unwrap().path()).find(|p| p.to_str().unwrap().ends_with(".wav")).unwrap();
    let out = d.join("conv.wav");
    let v = ok_json(&revoicer(&["convert", "--model", s(&model), "--in", s(&source), "--speaker", "b", "--out", s(&out)]));
    assert!(v["samples"].as_u64().unwrap() > 0);
    assert!(out.is_file());

    let unknown = revoicer(&["convert", "--model", s(&model), "--in", s(&source), "--speaker", "zed", "--out", s(&out)]);
    assert_eq!(err_json(&unknown)["error"]["kind"], "unknown_speaker");
    let no_model = revoicer(&["convert", "--model", s(&d.join("x.rvc")), "--in", s(&source), "--speaker", "b", "--out", s(&out)]);
    let v = err_json(&no_model);
    assert_eq!(v["error"]["kind"], "missing_file");
    std::fs::write(d.join("junk.rvc"), b"not a model").unwrap();
    let junk = revoicer(&["convert", "--model", s(&d.join("junk.rvc")), "--in", s(&source), "--speaker", "b", "--out", s(&out)]);
    assert_eq!(err_json(&junk)["error"]["kind"], "model_format");
}

fn executed(v: &Value) -> Vec<String> {
    v["executed"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect()
}

#[test]
fn experiment_resumes_and_isolates_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = json!({
        "seed": 5,
        "corpus": corpus_config(),
        "conditions": [
            {"name": "C", "input": "clean", "chain": ""},
            {"name": "NR", "input": "mixed", "chain": ""},
            {"name": "NR-dn", "input": "mixed", "chain": "dn"},
            {"name": "NR-ext", "input": "mixed", "chain": format!("ext:{}", d.join("missing").display())}
        ],
        "train": tiny_train(),
        "render": {"griffin_lim_iters": 3, "nnls_iters": 3}
    });
    write(&d.join("exp.json"), &cfg);
    let out = d.join("out");
    let first = ok_json(&revoicer(&["experiment", "--config", s(&d.join("exp.json")), "--out", s(&out)]));
    assert_eq!(first["conditions"]["C"]["status"], "ok");
    assert_eq!(first["conditions"]["NR-dn"]["status"], "ok");
    assert_eq!(first["conditions"]["NR-ext"]["status"], "failed");
    assert_eq!(first["conditions"]["NR-ext"]["stage"], "enhance");
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["body_sha256"], first["body_sha256"]);
    assert!(report["body"]["vc"]["C"]["mcd_mean"].as_f64().unwrap().is_finite());

    let refused = revoicer(&["experiment", "--config", s(&d.join("exp.json")), "--out", s(&out)]);
    assert_eq!(err_json(&refused)["error"]["kind"], "output_exists");

    let resumed = ok_json(&revoicer(&["experiment", "--config", s(&d.join("exp.json")), "--out", s(&out), "--resume"]));
    let ran = executed(&resumed);
    assert!(ran.iter().all(|s| s.starts_with("NR-ext/")), "{ran:?}");
    assert_eq!(resumed["body_sha256"], first["body_sha256"]);

    std::fs::remove_dir_all(out.join("conditions/NR-dn")).unwrap();
    let partial = ok_json(&revoicer(&["experiment", "--config", s(&d.join("exp.json")), "--out", s(&out), "--resume"]));
    let ran = executed(&partial);
    for stage in ["enhance", "metrics", "train", "convert"] {
        assert!(ran.contains(&format!("NR-dn/{stage}")), "{ran:?}");
    }
    assert!(ran.iter().all(|s| s.starts_with("NR-dn/") || s.starts_with("NR-ext/")), "{ran:?}");
    assert_eq!(partial["body_sha256"], first["body_sha256"]);

    let mut changed = cfg.clone();
    changed["seed"] = json!(6);
    write(&d.join("exp2.json"), &changed);
    let mismatch = revoicer(&["experiment", "--config", s(&d.join("exp2.json")), "--out", s(&out), "--resume"]);
    assert_eq!(err_json(&mismatch)["error"]["kind"], "invalid_config");
}
