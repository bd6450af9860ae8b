use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmgfuse_core::ingest::{serialize_sensor_log, SensorLogFile, SensorRecord};

fn mmgfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgfuse")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_synth(dir: &Path) {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, r#"{"subjects": 2, "sessions_per_subject": 2, "reps_per_class": 1}"#).unwrap();
    let out = dir.join("corpus");
    let o = mmgfuse(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn run_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    let body = format!(
        r#"{{
  "manifest": "corpus/manifest.json",
  "scheme": "cross-user",
  "seed": 1,
  "late_fusion": {{
    "sensor": {{"max_epochs": 1, "patience": 1, "restore_best": true, "batch_size": 16, "label_smoothing": 0.0, "optimizer": {{"rule": "adagrad", "learning_rate": 0.03}}}},
    "audio": {{"max_epochs": 1, "patience": 1, "restore_best": true, "batch_size": 16, "label_smoothing": 0.0, "optimizer": {{"rule": "adagrad", "learning_rate": 0.03}}}},
    "ensemble": {{"max_epochs": 2, "patience": 1, "restore_best": true, "batch_size": 16, "label_smoothing": 0.0, "optimizer": {{"rule": "adam", "learning_rate": 0.01}}}}
  }},
  "hybrid": {{
    "train": {{"max_epochs": 1, "patience": 1, "restore_best": true, "batch_size": 16, "label_smoothing": 0.1, "optimizer": {{"rule": "adadelta", "learning_rate": 0.09}}}},
    "blocks": [
      {{"f1": 4, "r3": 4, "f3": 4, "r5": 4, "f5": 4, "fp": 4}},
      {{"f1": 4, "r3": 4, "f3": 4, "r5": 4, "f5": 4, "fp": 4}},
      {{"f1": 4, "r3": 4, "f3": 4, "r5": 4, "f5": 4, "fp": 4}},
      {{"f1": 4, "r3": 4, "f3": 4, "r5": 4, "f5": 4, "fp": 4}}
    ]
  }}{extra}
}}"#
    );
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn synth_default_writes_five_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmgfuse(&["synth", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let subject = dir.path().join("subject_01");
    let logs = fs::read_dir(&subject)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(logs, 5);
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn subjects_flag_creates_subject_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, r#"{"sessions_per_subject": 2, "reps_per_class": 1}"#).unwrap();
    let out = dir.path().join("c");
    let o = mmgfuse(&["synth", "--config", cfg.to_str().unwrap(), "--subjects", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 3);
}

#[test]
fn bad_paths_and_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmgfuse(&["synth", "--config", "/nonexistent/cfg.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonexistent"));

    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"manifest": "missing.json", "scheme": "cross-user"}"#).unwrap();
    let o = mmgfuse(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&cfg, r#"{"synth": {}, "scheme": "cross-user", "colour": 1}"#).unwrap();
    let o = mmgfuse(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn one_session_per_subject_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"synth": {"sessions_per_subject": 1, "reps_per_class": 1}, "scheme": "cross-user"}"#,
    )
    .unwrap();
    let o = mmgfuse(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn segment_flat_log_and_bad_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let log = SensorLogFile {
        subject_id: "s".into(),
        session_id: "k".into(),
        sample_rate_hz: 100.0,
        records: (0..500)
            .map(|i| SensorRecord {
                t_ms: i * 10,
                fsr: [0.2, 0.2],
                pef: [0.0, 0.0],
                quat: [1.0, 0.0, 0.0, 0.0],
                acc: [0.0, 0.0, 1.0],
            })
            .collect(),
        labels: Vec::new(),
    };
    let path = dir.path().join("flat.json");
    fs::write(&path, serialize_sensor_log(&log)).unwrap();
    let o = mmgfuse(&["segment", "--log", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "[]");

    let o = mmgfuse(&["segment", "--log", path.to_str().unwrap(), "--threshold", "0"]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&path, b"{not json").unwrap();
    let o = mmgfuse(&["segment", "--log", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn segment_recovers_synthetic_gestures() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let log = dir.path().join("corpus/subject_01/session_1.json");
    let o = mmgfuse(&["segment", "--log", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let segs: Vec<[i64; 2]> = serde_json::from_slice(&o.stdout).unwrap();
    let truth = mmgfuse_core::ingest::parse_sensor_log(&fs::read(&log).unwrap()).unwrap().labels;
    assert_eq!(segs.len(), truth.len());
    for (s, l) in segs.iter().zip(&truth) {
        assert!((s[0] - l.start_ms).abs() <= 100 && (s[1] - l.end_ms).abs() <= 100);
    }
}

#[test]
fn train_and_evaluate_late_fusion_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let cfg = run_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = mmgfuse(&["--jobs", "2", "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["fsr_pef", "orientation", "acceleration", "audio", "ensemble"] {
        assert!(out.join(format!("{name}.ckpt")).is_file(), "{name}");
        assert!(out.join(format!("{name}.card.json")).is_file(), "{name}");
    }

    let o = mmgfuse(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(out.join("confusion.csv")).unwrap();
    // two subjects × two sessions × one repetition
    for line in csv.lines().skip(1) {
        let total: u64 = line.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(total, 4);
    }
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("ensemble"));
}

#[test]
fn hybrid_card_reports_six_classes() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let cfg = run_config(dir.path(), r#", "hybrid_subjects": ["subject_02"]"#);
    let out = dir.path().join("out");
    let o = mmgfuse(&["train", "--config", cfg.to_str().unwrap(), "--scheme", "hybrid", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let card: serde_json::Value = serde_json::from_slice(&fs::read(out.join("hybrid.card.json")).unwrap()).unwrap();
    assert_eq!(card["class_names"].as_array().unwrap().len(), 6);
    assert!(card["parameter_count"].as_u64().unwrap() > 0);
}
