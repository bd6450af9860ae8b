//! Sensor-log and audio ingestion.
//!
//! A session is recorded as one JSON sensor log plus one stereo WAV. The log
//! schema (unknown keys are ignored):
//!
//! ```json
//! {
//!   "subject_id": "subject_01",
//!   "session_id": "session_1",
//!   "sample_rate_hz": 100.0,
//!   "records": [
//!     {"t_ms": 0, "fsr": [f, f], "pef": [f, f], "quat": [w, x, y, z], "acc": [x, y, z]}
//!   ],
//!   "labels": [{"label": "joy", "start_ms": 1000, "end_ms": 2200}]
//! }
//! ```
//!
//! `t_ms` is an integer and strictly increasing. Label names are the
//! snake_case gesture names (`neutral`, `joy`, ..., `taking_pill`). The WAV
//! starts `audio_offset_ms` after `t_ms = 0`, as listed in the manifest.

pub mod wav;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, GestureInstance, GestureLabel, SensorModality, Series, Session, AUDIO_RATE_HZ};
use crate::error::{Error, Result};

pub use wav::{quantize_pcm16, read_wav, write_wav, WAV_SAMPLE_RATE};

/// Sensor rows missing for this long or longer invalidate an instance.
pub const MAX_INTERPOLATED_GAP_MS: i64 = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub t_ms: i64,
    pub fsr: [f64; 2],
    pub pef: [f64; 2],
    pub quat: [f64; 4],
    pub acc: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelInterval {
    pub label: GestureLabel,
    pub start_ms: i64,
    pub end_ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorLogFile {
    pub subject_id: String,
    pub session_id: String,
    pub sample_rate_hz: f64,
    pub records: Vec<SensorRecord>,
    pub labels: Vec<LabelInterval>,
}

pub fn parse_sensor_log(bytes: &[u8]) -> Result<SensorLogFile> {
    let log: SensorLogFile = serde_json::from_slice(bytes).map_err(|e| Error::Schema(e.to_string()))?;
    if !(log.sample_rate_hz > 0.0) {
        return Err(Error::Schema(format!("sample_rate_hz {} must be positive", log.sample_rate_hz)));
    }
    for (i, w) in log.records.windows(2).enumerate() {
        if w[1].t_ms <= w[0].t_ms {
            return Err(Error::Monotonicity {
                index: i + 1,
                prev_ms: w[0].t_ms,
                next_ms: w[1].t_ms,
            });
        }
    }
    for l in &log.labels {
        if l.end_ms <= l.start_ms {
            return Err(Error::Schema(format!(
                "label {} has end_ms {} not after start_ms {}",
                l.label, l.end_ms, l.start_ms
            )));
        }
    }
    Ok(log)
}

/// Compact JSON; parsing the output yields an equal log.
pub fn serialize_sensor_log(log: &SensorLogFile) -> Vec<u8> {
    serde_json::to_vec(log).expect("log serialises")
}

/// An interval that could not become an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedInterval {
    pub label: GestureLabel,
    pub start_ms: i64,
    pub end_ms: i64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceOutcome {
    pub session: Session,
    pub rejected: Vec<RejectedInterval>,
}

/// Audio sample index of time `t_ms` on the sensor clock.
pub fn audio_index(t_ms: i64, audio_offset_ms: f64) -> i64 {
    ((t_ms as f64 - audio_offset_ms) * AUDIO_RATE_HZ / 1000.0).round() as i64
}

fn record_row(r: &SensorRecord, modality: SensorModality) -> Vec<f64> {
    match modality {
        SensorModality::FsrPef => vec![r.fsr[0], r.fsr[1], r.pef[0], r.pef[1]],
        SensorModality::Orientation => r.quat.to_vec(),
        SensorModality::Acceleration => r.acc.to_vec(),
        SensorModality::Audio => unreachable!("audio is not in the sensor log"),
    }
}

/// Records inside `[start, end]` with short dropouts filled by linear
/// interpolation on the nominal grid. Returns `Err(reason)` for a long gap.
fn interval_rows(log: &SensorLogFile, start_ms: i64, end_ms: i64) -> std::result::Result<Vec<SensorRecord>, String> {
    let step = 1000.0 / log.sample_rate_hz;
    let first = log.records.partition_point(|r| r.t_ms < start_ms);
    let last = log.records.partition_point(|r| r.t_ms <= end_ms);
    let picked = &log.records[first..last];
    if picked.is_empty() {
        return Err("no sensor rows inside the interval".into());
    }
    let mut out: Vec<SensorRecord> = Vec::with_capacity(picked.len());
    // the boundaries count as gaps too, measured from the neighbouring rows
    let head_gap = picked[0].t_ms - start_ms;
    let tail_gap = end_ms - picked[picked.len() - 1].t_ms;
    if head_gap >= MAX_INTERPOLATED_GAP_MS || tail_gap >= MAX_INTERPOLATED_GAP_MS {
        return Err(format!("sensor gap of {} ms at interval edge", head_gap.max(tail_gap)));
    }
    for (i, r) in picked.iter().enumerate() {
        if i > 0 {
            let prev = &picked[i - 1];
            let gap = r.t_ms - prev.t_ms;
            if gap >= MAX_INTERPOLATED_GAP_MS {
                return Err(format!("sensor gap of {gap} ms at {} ms", prev.t_ms));
            }
            let missing = ((gap as f64 / step).round() as i64 - 1).max(0);
            for k in 1..=missing {
                let a = k as f64 / (missing + 1) as f64;
                let lerp = |x: f64, y: f64| x + a * (y - x);
                let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(x, y)| lerp(*x, *y)).collect() };
                out.push(SensorRecord {
                    t_ms: prev.t_ms + (a * gap as f64).round() as i64,
                    fsr: mix(&prev.fsr, &r.fsr).try_into().expect("2"),
                    pef: mix(&prev.pef, &r.pef).try_into().expect("2"),
                    quat: mix(&prev.quat, &r.quat).try_into().expect("4"),
                    acc: mix(&prev.acc, &r.acc).try_into().expect("3"),
                });
            }
        }
        out.push(r.clone());
    }
    Ok(out)
}

/// Cuts one instance per label from the log and the session audio.
pub fn slice_instances(log: &SensorLogFile, audio: &Series, audio_offset_ms: f64) -> Result<SliceOutcome> {
    if audio.channels() != 2 {
        return Err(Error::Shape(format!("audio has {} channels, expected 2", audio.channels())));
    }
    let span = match (log.records.first(), log.records.last()) {
        (Some(a), Some(b)) => Some((a.t_ms, b.t_ms)),
        _ => None,
    };
    let mut session = Session {
        subject_id: log.subject_id.clone(),
        session_id: log.session_id.clone(),
        instances: Vec::with_capacity(log.labels.len()),
    };
    let mut rejected = Vec::new();
    for l in &log.labels {
        match span {
            Some((lo, hi)) if l.start_ms >= lo && l.end_ms <= hi => {}
            _ => {
                return Err(Error::Coverage(format!(
                    "label {} [{}, {}] ms outside the sensor records",
                    l.label, l.start_ms, l.end_ms
                )))
            }
        }
        let a0 = audio_index(l.start_ms, audio_offset_ms);
        let a1 = audio_index(l.end_ms, audio_offset_ms);
        if a0 < 0 || a1 > audio.rows() as i64 {
            return Err(Error::Coverage(format!(
                "label {} [{}, {}] ms needs audio samples {a0}..{a1}, file has {}",
                l.label,
                l.start_ms,
                l.end_ms,
                audio.rows()
            )));
        }
        let rows = match interval_rows(log, l.start_ms, l.end_ms) {
            Ok(rows) => rows,
            Err(reason) => {
                rejected.push(RejectedInterval {
                    label: l.label,
                    start_ms: l.start_ms,
                    end_ms: l.end_ms,
                    reason,
                });
                continue;
            }
        };
        let mut series = BTreeMap::new();
        for m in [SensorModality::FsrPef, SensorModality::Orientation, SensorModality::Acceleration] {
            let data: Vec<Vec<f64>> = rows.iter().map(|r| record_row(r, m)).collect();
            series.insert(m, Series::from_rows(m.channel_count(), &data)?);
        }
        session.instances.push(GestureInstance {
            subject_id: log.subject_id.clone(),
            session_id: log.session_id.clone(),
            label: l.label,
            start_ms: l.start_ms,
            end_ms: l.end_ms,
            series,
            audio: audio.slice_rows(a0 as usize, a1 as usize),
        });
    }
    Ok(SliceOutcome { session, rejected })
}

/// One recorded session: paths relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub log: String,
    pub wav: String,
    pub audio_offset_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sessions: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serialises")
    }
}

/// Reads and slices one manifest entry.
pub fn load_session(entry: &ManifestEntry, base: &Path) -> Result<SliceOutcome> {
    let log_path = base.join(&entry.log);
    let wav_path = base.join(&entry.wav);
    let log = parse_sensor_log(&std::fs::read(&log_path).map_err(|e| Error::io(&log_path, e))?)?;
    let audio = read_wav(&std::fs::read(&wav_path).map_err(|e| Error::io(&wav_path, e))?)?;
    slice_instances(&log, &audio, entry.audio_offset_ms)
}

/// Loads every session in the manifest, keeping rejected intervals aside.
pub fn load_dataset(manifest_path: &Path) -> Result<(Dataset, Vec<RejectedInterval>)> {
    let (manifest, base) = DatasetManifest::load(manifest_path)?;
    let mut sessions = Vec::new();
    let mut rejected = Vec::new();
    for entry in &manifest.sessions {
        let out = load_session(entry, &base)?;
        sessions.push(out.session);
        rejected.extend(out.rejected);
    }
    Ok((Dataset::from_sessions(sessions), rejected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: i64, v: f64) -> SensorRecord {
        SensorRecord {
            t_ms: t,
            fsr: [v, v],
            pef: [0.0, 0.0],
            quat: [1.0, 0.0, 0.0, 0.0],
            acc: [0.0, 0.0, 1.0],
        }
    }

    fn log(times: &[i64], labels: Vec<LabelInterval>) -> SensorLogFile {
        SensorLogFile {
            subject_id: "s".into(),
            session_id: "1".into(),
            sample_rate_hz: 100.0,
            records: times.iter().map(|&t| record(t, t as f64)).collect(),
            labels,
        }
    }

    #[test]
    fn minimal_log_parses() {
        let json = br#"{"subject_id":"a","session_id":"1","sample_rate_hz":100,"extra":true,
            "records":[{"t_ms":0,"fsr":[0,0],"pef":[0,0],"quat":[1,0,0,0],"acc":[0,0,1]},
                       {"t_ms":10,"fsr":[0,0],"pef":[0,0],"quat":[1,0,0,0],"acc":[0,0,1]}],
            "labels":[{"label":"joy","start_ms":0,"end_ms":10}]}"#;
        let log = parse_sensor_log(json).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.labels[0].label, GestureLabel::Joy);
    }

    #[test]
    fn short_quaternion_is_a_schema_error() {
        let json = br#"{"subject_id":"a","session_id":"1","sample_rate_hz":100,
            "records":[{"t_ms":0,"fsr":[0,0],"pef":[0,0],"quat":[1,0,0],"acc":[0,0,1]}],"labels":[]}"#;
        assert!(matches!(parse_sensor_log(json), Err(Error::Schema(_))));
    }

    #[test]
    fn repeated_timestamp_is_a_monotonicity_error() {
        let bytes = serialize_sensor_log(&log(&[0, 10, 10], vec![]));
        assert!(matches!(parse_sensor_log(&bytes), Err(Error::Monotonicity { index: 2, .. })));
    }

    #[test]
    fn one_second_label_cuts_rows_and_audio() {
        let times: Vec<i64> = (0..300).map(|i| i * 10).collect();
        let l = log(&times, vec![LabelInterval { label: GestureLabel::Fear, start_ms: 1000, end_ms: 2000 }]);
        let audio = Series::zeros(3 * 44_100, 2);
        let out = slice_instances(&l, &audio, 0.0).unwrap();
        let inst = &out.session.instances[0];
        assert_eq!(inst.series[&SensorModality::FsrPef].rows(), 101);
        assert_eq!(inst.audio.rows(), 44_100);
    }

    #[test]
    fn audio_too_short_is_a_coverage_error() {
        let times: Vec<i64> = (0..300).map(|i| i * 10).collect();
        let l = log(&times, vec![LabelInterval { label: GestureLabel::Fear, start_ms: 1000, end_ms: 2500 }]);
        let audio = Series::zeros(2 * 44_100, 2);
        assert!(matches!(slice_instances(&l, &audio, 0.0), Err(Error::Coverage(_))));
    }

    #[test]
    fn short_gaps_interpolate_and_long_gaps_reject() {
        let mut times: Vec<i64> = (0..100).map(|i| i * 10).collect();
        times.retain(|t| !(310..=330).contains(t) && !(610..=660).contains(t));
        let labels = vec![
            LabelInterval { label: GestureLabel::Joy, start_ms: 200, end_ms: 400 },
            LabelInterval { label: GestureLabel::Anger, start_ms: 500, end_ms: 800 },
        ];
        let out = slice_instances(&log(&times, labels), &Series::zeros(44_100, 2), 0.0).unwrap();
        assert_eq!(out.session.instances.len(), 1);
        let fsr = &out.session.instances[0].series[&SensorModality::FsrPef];
        assert_eq!(fsr.rows(), 21);
        assert!((fsr.get(12, 0) - 320.0).abs() < 1e-9);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].label, GestureLabel::Anger);
    }

    #[test]
    fn empty_labels_give_empty_session() {
        let out = slice_instances(&log(&[0, 10], vec![]), &Series::zeros(10, 2), 0.0).unwrap();
        assert!(out.session.instances.is_empty());
    }
}
