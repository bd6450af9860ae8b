use mmgfuse_core::domain::{GestureLabel, SensorModality, SENSOR_RATE_HZ};
use mmgfuse_core::dsp::segment::detect_activity;
use mmgfuse_core::ingest::{parse_sensor_log, read_wav, slice_instances, WAV_SAMPLE_RATE};
use mmgfuse_core::synth::{export_session, generate_dataset, generate_session, Informativeness, NoiseConfig, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        reps_per_class: 1,
        ..SynthConfig::default()
    }
}

#[test]
fn default_roster_yields_180_instances_per_subject() {
    let cfg = SynthConfig {
        subjects: 1,
        ..SynthConfig::default()
    };
    let data = generate_dataset(&cfg).unwrap();
    assert_eq!(data.instance_count(), 180);
    assert_eq!(data.sessions.len(), 5);
    assert!(data.sessions.iter().all(|s| s.is_complete(4)));
    assert_eq!(data.subjects, vec!["subject_01"]);
}

#[test]
fn export_round_trips_through_ingest() {
    let s = generate_session(&small(), 0, 1).unwrap();
    let (json, wav, entry) = export_session(&s).unwrap();
    assert_eq!(entry.log, "subject_01/session_2.json");
    assert_eq!(u32::from_le_bytes(wav[24..28].try_into().unwrap()), WAV_SAMPLE_RATE);
    let log = parse_sensor_log(&json).unwrap();
    assert_eq!(log, s.log);
    let audio = read_wav(&wav).unwrap();
    assert_eq!(audio, s.audio);
    let direct = s.to_session().unwrap();
    let ingested = slice_instances(&log, &audio, 0.0).unwrap();
    assert!(ingested.rejected.is_empty());
    assert_eq!(ingested.session, direct);
}

#[test]
fn noiseless_templates_differ_between_groups() {
    let cfg = SynthConfig {
        noise: NoiseConfig {
            fsr_pef: 0.0,
            orientation: 0.0,
            acceleration: 0.0,
            audio: 0.0,
        },
        jitter: 0.0,
        informativeness: Informativeness::full(),
        ..small()
    };
    let session = generate_session(&cfg, 0, 0).unwrap().to_session().unwrap();
    let pick = |l: GestureLabel| session.instances.iter().find(|i| i.label == l).unwrap();
    let a = pick(GestureLabel::Joy).stream(SensorModality::Acceleration).unwrap().clone();
    let b = pick(GestureLabel::Anger).stream(SensorModality::Acceleration).unwrap().clone();
    let peak = |s: &mmgfuse_core::domain::Series| s.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!((peak(&a) - peak(&b)).abs() > 1e-3 || a.rows() != b.rows());
}

#[test]
fn segmentation_recovers_synthetic_boundaries() {
    let mut hits = 0;
    let mut total = 0;
    for session in 0..2 {
        let s = generate_session(&small(), 0, session).unwrap();
        let segments = detect_activity(&s.fsr_stream(), SENSOR_RATE_HZ, 6.0, 100.0).unwrap();
        for l in &s.log.labels {
            total += 2;
            hits += segments.iter().any(|g| (g.start_ms - l.start_ms).abs() <= 100) as usize;
            hits += segments.iter().any(|g| (g.end_ms - l.end_ms).abs() <= 100) as usize;
        }
        assert_eq!(segments.len(), s.log.labels.len());
    }
    assert_eq!(hits, total);
}
