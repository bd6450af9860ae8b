//! Domain types shared by every stage: the gesture taxonomy, sensing
//! modalities, recorded instances and the datasets built from them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The nine facial activities of the recording dictionary.
///
/// Integer codes are stable; `Neutral` is always code 0 so the null class
/// occupies the first row of every confusion matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureLabel {
    Neutral = 0,
    Joy = 1,
    Surprise = 2,
    Anger = 3,
    Disgust = 4,
    Sadness = 5,
    Fear = 6,
    Winking = 7,
    TakingPill = 8,
}

impl GestureLabel {
    pub const COUNT: usize = 9;
    pub const ALL: [GestureLabel; 9] = [
        GestureLabel::Neutral,
        GestureLabel::Joy,
        GestureLabel::Surprise,
        GestureLabel::Anger,
        GestureLabel::Disgust,
        GestureLabel::Sadness,
        GestureLabel::Fear,
        GestureLabel::Winking,
        GestureLabel::TakingPill,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureLabel::Neutral => "neutral",
            GestureLabel::Joy => "joy",
            GestureLabel::Surprise => "surprise",
            GestureLabel::Anger => "anger",
            GestureLabel::Disgust => "disgust",
            GestureLabel::Sadness => "sadness",
            GestureLabel::Fear => "fear",
            GestureLabel::Winking => "winking",
            GestureLabel::TakingPill => "taking_pill",
        }
    }
}

impl fmt::Display for GestureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GestureLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown gesture label {s:?}")))
    }
}

/// Six-way taxonomy used by the hybrid model, where visually confusable
/// expressions are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergedLabel {
    Neutral = 0,
    JoySurprise = 1,
    AngerDisgustSadness = 2,
    Winking = 3,
    Fear = 4,
    TakingPill = 5,
}

impl MergedLabel {
    pub const COUNT: usize = 6;
    pub const ALL: [MergedLabel; 6] = [
        MergedLabel::Neutral,
        MergedLabel::JoySurprise,
        MergedLabel::AngerDisgustSadness,
        MergedLabel::Winking,
        MergedLabel::Fear,
        MergedLabel::TakingPill,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MergedLabel::Neutral => "neutral",
            MergedLabel::JoySurprise => "joy+surprise",
            MergedLabel::AngerDisgustSadness => "anger+disgust+sadness",
            MergedLabel::Winking => "winking",
            MergedLabel::Fear => "fear",
            MergedLabel::TakingPill => "taking_pill",
        }
    }
}

impl fmt::Display for MergedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn merge_label(label: GestureLabel) -> MergedLabel {
    match label {
        GestureLabel::Neutral => MergedLabel::Neutral,
        GestureLabel::Joy | GestureLabel::Surprise => MergedLabel::JoySurprise,
        GestureLabel::Anger | GestureLabel::Disgust | GestureLabel::Sadness => {
            MergedLabel::AngerDisgustSadness
        }
        GestureLabel::Winking => MergedLabel::Winking,
        GestureLabel::Fear => MergedLabel::Fear,
        GestureLabel::TakingPill => MergedLabel::TakingPill,
    }
}

/// A sensing modality of the cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorModality {
    /// Two force-sensitive resistors and two piezoelectric films, treated as one 4-channel stream.
    FsrPef,
    /// Orientation quaternion (w, x, y, z).
    Orientation,
    /// Linear acceleration (x, y, z).
    Acceleration,
    /// Stereo microphone pair.
    Audio,
}

impl SensorModality {
    pub const ALL: [SensorModality; 4] = [
        SensorModality::FsrPef,
        SensorModality::Orientation,
        SensorModality::Acceleration,
        SensorModality::Audio,
    ];

    pub fn channel_count(self) -> usize {
        match self {
            SensorModality::FsrPef => 4,
            SensorModality::Orientation => 4,
            SensorModality::Acceleration => 3,
            SensorModality::Audio => 2,
        }
    }

    pub fn nominal_rate_hz(self) -> f64 {
        match self {
            SensorModality::Audio => AUDIO_RATE_HZ,
            _ => SENSOR_RATE_HZ,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            SensorModality::FsrPef => 0,
            SensorModality::Orientation => 1,
            SensorModality::Acceleration => 2,
            SensorModality::Audio => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SensorModality::FsrPef => "fsr_pef",
            SensorModality::Orientation => "orientation",
            SensorModality::Acceleration => "acceleration",
            SensorModality::Audio => "audio",
        }
    }
}

impl fmt::Display for SensorModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const SENSOR_RATE_HZ: f64 = 100.0;
pub const AUDIO_RATE_HZ: f64 = 44_100.0;
/// Allowed deviation of a raw quaternion row from unit norm.
pub const QUATERNION_NORM_TOLERANCE: f64 = 0.05;

/// A 2-D row-major array of samples × channels.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Series {
    rows: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn new(rows: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * channels {
            return Err(Error::Shape(format!(
                "series data length {} != {rows} x {channels}",
                data.len()
            )));
        }
        Ok(Series {
            rows,
            channels,
            data,
        })
    }

    pub fn zeros(rows: usize, channels: usize) -> Self {
        Series {
            rows,
            channels,
            data: vec![0.0; rows * channels],
        }
    }

    /// Builds a series from per-row slices; every row must have `channels` entries.
    pub fn from_rows<R: AsRef<[f64]>>(channels: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * channels);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != channels {
                return Err(Error::Shape(format!(
                    "row {i} has {} channels, expected {channels}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Series {
            rows: rows.len(),
            channels,
            data,
        })
    }

    /// Builds a series from per-channel columns of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let channels = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Shape("columns differ in length".into()));
        }
        let mut data = vec![0.0; rows * channels];
        for (c, col) in columns.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                data[r * channels + c] = *v;
            }
        }
        Ok(Series {
            rows,
            channels,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.data[row * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, channel: usize, value: f64) {
        self.data[row * self.channels + channel] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.channels..(row + 1) * self.channels]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, channel)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.column(c)).collect()
    }

    /// Rows `start..end` as a new series.
    pub fn slice_rows(&self, start: usize, end: usize) -> Series {
        Series {
            rows: end - start,
            channels: self.channels,
            data: self.data[start * self.channels..end * self.channels].to_vec(),
        }
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Series {
        let mut data = Vec::with_capacity(self.rows * channels.len());
        for r in 0..self.rows {
            for &c in channels {
                data.push(self.get(r, c));
            }
        }
        Series {
            rows: self.rows,
            channels: channels.len(),
            data,
        }
    }
}

/// One labelled gesture recorded across all four modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GestureInstance {
    pub subject_id: String,
    pub session_id: String,
    pub label: GestureLabel,
    pub start_ms: i64,
    pub end_ms: i64,
    /// Sensor streams at the nominal 100 Hz rate, keyed by modality (audio excluded).
    pub series: BTreeMap<SensorModality, Series>,
    /// Stereo PCM normalised to [-1, 1].
    pub audio: Series,
}

impl GestureInstance {
    /// The stream for a modality; `Audio` returns the PCM samples.
    pub fn stream(&self, modality: SensorModality) -> Option<&Series> {
        match modality {
            SensorModality::Audio => Some(&self.audio),
            m => self.series.get(&m),
        }
    }

    pub fn duration_ms(&self) -> i64 {
        self.end_ms - self.start_ms
    }
}

/// A broken instance invariant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.rule)
    }
}

/// Checks every instance invariant and lists the ones that fail.
pub fn validate_instance(instance: &GestureInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &str, rule: String| {
        out.push(Violation {
            field: field.to_string(),
            rule,
        })
    };
    if instance.end_ms <= instance.start_ms {
        push("end_ms", "must exceed start_ms".into());
    }
    for modality in SensorModality::ALL {
        let name = format!("{modality:?}");
        let Some(series) = instance.stream(modality) else {
            push(&name, "series missing".into());
            continue;
        };
        let expected = modality.channel_count();
        if series.channels() != expected {
            push(&name, format!("channel_count ≠ {expected}"));
            continue;
        }
        if series.rows() == 0 {
            push(&name, "series is empty".into());
        }
        if series.data().iter().any(|v| !v.is_finite()) {
            push(&name, "contains non-finite values".into());
        }
        match modality {
            SensorModality::Orientation => {
                let bad = (0..series.rows()).find(|&r| {
                    let norm = series.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE
                });
                if let Some(r) = bad {
                    push(&name, format!("quaternion norm out of tolerance at row {r}"));
                }
            }
            SensorModality::Audio => {
                if series.data().iter().any(|v| v.abs() > 1.0) {
                    push(&name, "PCM sample outside [-1, 1]".into());
                }
            }
            _ => {}
        }
    }
    out
}

/// The ordered gestures of one recording session of one subject.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Session {
    pub subject_id: String,
    pub session_id: String,
    pub instances: Vec<GestureInstance>,
}

impl Session {
    /// Instances per gesture class, indexed by label code.
    pub fn class_counts(&self) -> [usize; GestureLabel::COUNT] {
        let mut counts = [0; GestureLabel::COUNT];
        for i in &self.instances {
            counts[i.label.code()] += 1;
        }
        counts
    }

    /// A complete session repeats every class `reps` times.
    pub fn is_complete(&self, reps: usize) -> bool {
        self.class_counts().iter().all(|&c| c == reps)
    }
}

/// Sessions plus the roster of subjects that recorded them.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<String>,
    pub sessions: Vec<Session>,
}

impl Dataset {
    /// Assembles a dataset; the roster lists subjects in first-appearance order.
    pub fn from_sessions(sessions: Vec<Session>) -> Self {
        let mut subjects: Vec<String> = Vec::new();
        for s in &sessions {
            if !subjects.contains(&s.subject_id) {
                subjects.push(s.subject_id.clone());
            }
        }
        Dataset { subjects, sessions }
    }

    pub fn instance_count(&self) -> usize {
        self.sessions.iter().map(|s| s.instances.len()).sum()
    }

    /// All instances in session order; the position is the global instance id.
    pub fn instances(&self) -> impl Iterator<Item = &GestureInstance> {
        self.sessions.iter().flat_map(|s| s.instances.iter())
    }
}

/// Per-class probabilities emitted by a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    probs: Vec<f64>,
}

impl ConfidenceVector {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("empty confidence vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Range("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Range(format!("probabilities sum to {sum}")));
        }
        Ok(ConfidenceVector { probs })
    }

    pub fn uniform(class_count: usize) -> Self {
        ConfidenceVector {
            probs: vec![1.0 / class_count as f64; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the most probable class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}
