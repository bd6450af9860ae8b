//! Deterministic synthetic sessions with controllable, complementary class
//! information across modalities.
//!
//! Each modality sees the nine gestures only through a partition into three
//! groups, so a single modality can at best tell its groups apart. The four
//! default partitions are the four parallel classes of the 3 × 3 affine
//! plane: any two gestures share a group in exactly one modality, so any two
//! modalities together separate all nine.
//!
//! Every gesture also drives a class-independent pressure oscillation that
//! makes onsets and offsets visible to slope-based segmentation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, GestureLabel, SensorModality, Series, Session, AUDIO_RATE_HZ, SENSOR_RATE_HZ};
use crate::error::{Error, Result};
use crate::ingest::{
    quantize_pcm16, serialize_sensor_log, slice_instances, write_wav, LabelInterval, ManifestEntry, SensorLogFile,
    SensorRecord,
};
use crate::seed::{derive_seed, derive_seed_str};

const SENSOR_STEP_MS: i64 = 10;
const BUMPS_PER_CHANNEL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub fsr_pef: f64,
    pub orientation: f64,
    pub acceleration: f64,
    pub audio: f64,
}

impl NoiseConfig {
    pub fn sigma(&self, modality: SensorModality) -> f64 {
        match modality {
            SensorModality::FsrPef => self.fsr_pef,
            SensorModality::Orientation => self.orientation,
            SensorModality::Acceleration => self.acceleration,
            SensorModality::Audio => self.audio,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            fsr_pef: 0.02,
            orientation: 0.01,
            acceleration: 0.05,
            audio: 0.05,
        }
    }
}

/// Group index (0..groups) of every gesture code, per modality, in
/// `SensorModality::ALL` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Informativeness {
    pub groups: [[usize; GestureLabel::COUNT]; 4],
}

impl Default for Informativeness {
    fn default() -> Self {
        let part = |f: fn(usize, usize) -> usize| {
            let mut g = [0; GestureLabel::COUNT];
            for (code, slot) in g.iter_mut().enumerate() {
                *slot = f(code / 3, code % 3);
            }
            g
        };
        Informativeness {
            groups: [
                part(|row, _| row),
                part(|_, col| col),
                part(|row, col| (row + 2 * col) % 3),
                part(|row, col| (row + col) % 3),
            ],
        }
    }
}

impl Informativeness {
    /// Every gesture in its own group for every modality.
    pub fn full() -> Self {
        let mut g = [0; GestureLabel::COUNT];
        for (code, slot) in g.iter_mut().enumerate() {
            *slot = code;
        }
        Informativeness { groups: [g; 4] }
    }

    pub fn group(&self, modality: SensorModality, label: GestureLabel) -> usize {
        self.groups[modality.tag() as usize][label.code()]
    }

    pub fn group_count(&self, modality: SensorModality) -> usize {
        self.groups[modality.tag() as usize].iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub subjects: usize,
    pub sessions_per_subject: usize,
    pub reps_per_class: usize,
    pub noise: NoiseConfig,
    /// Relative per-instance perturbation of template amplitudes and widths.
    pub jitter: f64,
    /// Relative per-subject gain spread.
    pub subject_spread: f64,
    pub min_duration_ms: i64,
    pub max_duration_ms: i64,
    pub rest_min_ms: i64,
    pub rest_max_ms: i64,
    /// Tone band of the acoustic templates.
    pub audio_band_hz: [f64; 2],
    /// Amplitude of the class-independent pressure oscillation.
    pub activity_amplitude: f64,
    pub activity_hz: f64,
    pub informativeness: Informativeness,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            subjects: 1,
            sessions_per_subject: 5,
            reps_per_class: 4,
            noise: NoiseConfig::default(),
            jitter: 0.1,
            subject_spread: 0.1,
            min_duration_ms: 800,
            max_duration_ms: 2000,
            rest_min_ms: 1000,
            rest_max_ms: 1500,
            audio_band_hz: [30.0, 150.0],
            activity_amplitude: 0.5,
            activity_hz: 4.0,
            informativeness: Informativeness::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.subjects == 0 || self.sessions_per_subject == 0 || self.reps_per_class == 0 {
            return err("subjects, sessions_per_subject and reps_per_class must be at least 1");
        }
        let n = &self.noise;
        if [n.fsr_pef, n.orientation, n.acceleration, n.audio, self.jitter, self.subject_spread]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return err("noise, jitter and spread must be non-negative");
        }
        if self.min_duration_ms < 100 || self.max_duration_ms < self.min_duration_ms {
            return err("durations must satisfy 100 <= min_duration_ms <= max_duration_ms");
        }
        if self.rest_min_ms < 0 || self.rest_max_ms < self.rest_min_ms {
            return err("rest durations must satisfy 0 <= rest_min_ms <= rest_max_ms");
        }
        let [lo, hi] = self.audio_band_hz;
        if !(2.0..=200.0).contains(&lo) || !(2.0..=200.0).contains(&hi) || lo > hi {
            return err("audio band must lie within 2-200 Hz");
        }
        for g in &self.informativeness.groups {
            if g.iter().any(|&v| v >= GestureLabel::COUNT) {
                return err("informativeness group index out of range");
            }
        }
        Ok(())
    }

    pub fn subject_id(index: usize) -> String {
        format!("subject_{:02}", index + 1)
    }

    pub fn session_id(index: usize) -> String {
        format!("session_{}", index + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Bump {
    amplitude: f64,
    center: f64,
    width: f64,
}

impl Bump {
    fn at(&self, tau: f64) -> f64 {
        let z = (tau - self.center) / self.width;
        self.amplitude * (-0.5 * z * z).exp()
    }

    fn jittered(&self, rng: &mut ChaCha8Rng, jitter: f64) -> Bump {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Bump {
            amplitude: self.amplitude * (1.0 + jitter * n.sample(rng)),
            center: (self.center + 0.3 * jitter * n.sample(rng)).clamp(0.2, 0.8),
            width: self.width * (1.0 + jitter * n.sample(rng)).clamp(0.5, 1.5),
        }
    }
}

#[derive(Clone, Debug)]
struct ChannelTemplate {
    bumps: Vec<Bump>,
    /// Tone frequency; used by audio channels only.
    tone_hz: f64,
}

/// `templates[modality][group][channel]`.
#[derive(Clone, Debug)]
struct TemplateBank {
    templates: Vec<Vec<Vec<ChannelTemplate>>>,
}

impl TemplateBank {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(cfg.seed, "templates"));
        let templates = SensorModality::ALL
            .iter()
            .map(|&m| {
                let (lo, hi) = match m {
                    SensorModality::FsrPef | SensorModality::Acceleration => (0.5, 1.5),
                    // rotation vector, radians
                    SensorModality::Orientation => (0.15, 0.45),
                    SensorModality::Audio => (0.1, 0.3),
                };
                let groups = cfg.informativeness.group_count(m);
                (0..groups)
                    .map(|_| {
                        (0..m.channel_count().min(3))
                            .map(|_| ChannelTemplate {
                                bumps: (0..BUMPS_PER_CHANNEL)
                                    .map(|_| {
                                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                                        Bump {
                                            amplitude: sign * rng.random_range(lo..hi),
                                            center: rng.random_range(0.25..0.75),
                                            width: rng.random_range(0.04..0.10),
                                        }
                                    })
                                    .collect(),
                                tone_hz: rng.random_range(cfg.audio_band_hz[0]..=cfg.audio_band_hz[1]),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        TemplateBank { templates }
    }

    fn channels(&self, m: SensorModality, group: usize) -> &[ChannelTemplate] {
        &self.templates[m.tag() as usize][group]
    }
}

/// Hamilton product `a ⊗ b` of `[w, x, y, z]` quaternions.
fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Unit quaternion of rotation vector `r` (axis × angle).
fn quat_exp(r: [f64; 3]) -> [f64; 4] {
    let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if angle < 1e-12 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let s = (angle / 2.0).sin() / angle;
    [(angle / 2.0).cos(), r[0] * s, r[1] * s, r[2] * s]
}

/// A whole recorded session: the continuous streams and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSession {
    pub log: SensorLogFile,
    /// Stereo audio on the PCM16 grid, starting at `t_ms = 0`.
    pub audio: Series,
}

impl SynthSession {
    /// Slices the streams into gesture instances.
    pub fn to_session(&self) -> Result<Session> {
        Ok(slice_instances(&self.log, &self.audio, 0.0)?.session)
    }

    /// The FSR columns of the log as a `samples × 2` series.
    pub fn fsr_stream(&self) -> Series {
        let rows: Vec<[f64; 2]> = self.log.records.iter().map(|r| r.fsr).collect();
        Series::from_rows(2, &rows).expect("two columns")
    }
}

/// One gesture as scheduled in the session timeline.
struct Scheduled {
    label: GestureLabel,
    start_ms: i64,
    end_ms: i64,
    /// Per-modality, per-channel jittered bumps.
    bumps: Vec<Vec<Vec<Bump>>>,
    activity_amp: f64,
    half_cycles: f64,
    tone_phase: [f64; 2],
}

struct SubjectTraits {
    gain: Vec<Vec<f64>>,
    tilt: [f64; 4],
}

fn subject_traits(cfg: &SynthConfig, subject: usize) -> SubjectTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed_str(cfg.seed, "subject"), subject as u64));
    let s = cfg.subject_spread;
    let gain = SensorModality::ALL
        .iter()
        .map(|m| (0..m.channel_count()).map(|_| 1.0 + rng.random_range(-s..=s)).collect())
        .collect();
    let tilt = quat_exp([
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    ]);
    SubjectTraits { gain, tilt }
}

/// Generates one session of one subject.
pub fn generate_session(cfg: &SynthConfig, subject: usize, session: usize) -> Result<SynthSession> {
    cfg.validate()?;
    let bank = TemplateBank::new(cfg);
    let traits = subject_traits(cfg, subject);
    let seed = derive_seed(derive_seed(derive_seed_str(cfg.seed, "session"), subject as u64), session as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut order: Vec<GestureLabel> = GestureLabel::ALL
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, cfg.reps_per_class))
        .collect();
    order.shuffle(&mut rng);

    let grid = |ms: i64| ms / SENSOR_STEP_MS * SENSOR_STEP_MS;
    let mut t = grid(rng.random_range(cfg.rest_min_ms..=cfg.rest_max_ms));
    let mut schedule = Vec::with_capacity(order.len());
    for label in order {
        let duration = grid(rng.random_range(cfg.min_duration_ms..=cfg.max_duration_ms));
        let bumps = SensorModality::ALL
            .iter()
            .map(|&m| {
                let group = cfg.informativeness.group(m, label);
                bank.channels(m, group)
                    .iter()
                    .map(|ch| ch.bumps.iter().map(|b| b.jittered(&mut rng, cfg.jitter)).collect())
                    .collect()
            })
            .collect();
        let dur_s = duration as f64 / 1000.0;
        schedule.push(Scheduled {
            label,
            start_ms: t,
            end_ms: t + duration,
            bumps,
            activity_amp: cfg.activity_amplitude * (1.0 + 0.2 * rng.random_range(-1.0..1.0)),
            half_cycles: (2.0 * cfg.activity_hz * dur_s).round().max(1.0),
            tone_phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
        });
        t += duration + grid(rng.random_range(cfg.rest_min_ms..=cfg.rest_max_ms));
    }
    let total_ms = t;

    // baseline offsets change with every re-wear
    let offset: Vec<f64> = (0..7).map(|_| rng.random_range(-0.2..0.2)).collect();
    let sigma = &cfg.noise;
    let channel_value = |g: &Scheduled, m: SensorModality, ch: usize, tau: f64| -> f64 {
        let bumps: &Vec<Vec<Bump>> = &g.bumps[m.tag() as usize];
        let template_ch = ch % bumps.len();
        let sign = if ch >= bumps.len() { -1.0 } else { 1.0 };
        let v: f64 = bumps[template_ch].iter().map(|b| b.at(tau)).sum();
        sign * v * traits.gain[m.tag() as usize][ch]
    };

    let mut records = Vec::with_capacity((total_ms / SENSOR_STEP_MS + 1) as usize);
    let mut current = 0;
    for k in 0..=total_ms / SENSOR_STEP_MS {
        let t_ms = k * SENSOR_STEP_MS;
        while current < schedule.len() && schedule[current].end_ms < t_ms {
            current += 1;
        }
        let active = schedule.get(current).filter(|g| g.start_ms <= t_ms && t_ms <= g.end_ms);
        let mut fsr_pef = [0.0; 4];
        let mut rot = [0.0; 3];
        let mut acc = [0.0; 3];
        if let Some(g) = active {
            let tau = (t_ms - g.start_ms) as f64 / (g.end_ms - g.start_ms) as f64;
            let carrier = g.activity_amp * (PI * g.half_cycles * tau).sin();
            for (ch, v) in fsr_pef.iter_mut().enumerate() {
                *v = channel_value(g, SensorModality::FsrPef, ch, tau) + if ch < 2 { carrier } else { 0.0 };
            }
            for (ch, v) in rot.iter_mut().enumerate() {
                *v = channel_value(g, SensorModality::Orientation, ch, tau);
            }
            for (ch, v) in acc.iter_mut().enumerate() {
                *v = channel_value(g, SensorModality::Acceleration, ch, tau);
            }
        }
        let q = quat_mul(traits.tilt, quat_exp(rot));
        let mut noise = |s: f64| s * normal.sample(&mut rng);
        records.push(SensorRecord {
            t_ms,
            fsr: [
                fsr_pef[0] + offset[0] + noise(sigma.fsr_pef),
                fsr_pef[1] + offset[1] + noise(sigma.fsr_pef),
            ],
            pef: [fsr_pef[2] + noise(sigma.fsr_pef), fsr_pef[3] + noise(sigma.fsr_pef)],
            quat: [
                q[0] + noise(sigma.orientation),
                q[1] + noise(sigma.orientation),
                q[2] + noise(sigma.orientation),
                q[3] + noise(sigma.orientation),
            ],
            acc: [
                acc[0] + offset[2] + noise(sigma.acceleration),
                acc[1] + offset[3] + noise(sigma.acceleration),
                acc[2] + 1.0 + offset[4] + noise(sigma.acceleration),
            ],
        });
    }

    let samples = (total_ms as f64 * AUDIO_RATE_HZ / 1000.0).round() as usize + 1;
    let mut audio = vec![0.0; samples * 2];
    let mut current = 0;
    for i in 0..samples {
        let t_ms = i as f64 * 1000.0 / AUDIO_RATE_HZ;
        while current < schedule.len() && (schedule[current].end_ms as f64) < t_ms {
            current += 1;
        }
        let active = schedule
            .get(current)
            .filter(|g| g.start_ms as f64 <= t_ms && t_ms <= g.end_ms as f64);
        for c in 0..2 {
            let mut v = sigma.audio * normal.sample(&mut rng);
            if let Some(g) = active {
                let tau = (t_ms - g.start_ms as f64) / (g.end_ms - g.start_ms) as f64;
                let group = cfg.informativeness.group(SensorModality::Audio, g.label);
                let tone = bank.channels(SensorModality::Audio, group)[c].tone_hz;
                let env = channel_value(g, SensorModality::Audio, c, tau).abs();
                let phase = 2.0 * PI * tone * (t_ms - g.start_ms as f64) / 1000.0 + g.tone_phase[c];
                v += env * phase.sin();
            }
            audio[i * 2 + c] = quantize_pcm16(v.clamp(-1.0, 1.0));
        }
    }

    let log = SensorLogFile {
        subject_id: SynthConfig::subject_id(subject),
        session_id: SynthConfig::session_id(session),
        sample_rate_hz: SENSOR_RATE_HZ,
        records,
        labels: schedule
            .iter()
            .map(|g| LabelInterval {
                label: g.label,
                start_ms: g.start_ms,
                end_ms: g.end_ms,
            })
            .collect(),
    };
    Ok(SynthSession {
        log,
        audio: Series::new(samples, 2, audio)?,
    })
}

/// Every session of every subject, sliced into instances. Holds all audio in
/// memory; prefer [`generate_session`] for large rosters.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut sessions = Vec::new();
    for subject in 0..cfg.subjects {
        for session in 0..cfg.sessions_per_subject {
            sessions.push(generate_session(cfg, subject, session)?.to_session()?);
        }
    }
    Ok(Dataset::from_sessions(sessions))
}

/// Sensor-log JSON, WAV bytes and a manifest entry naming
/// `<subject>/<session>.json` and `.wav`.
pub fn export_session(session: &SynthSession) -> Result<(Vec<u8>, Vec<u8>, ManifestEntry)> {
    let stem = format!("{}/{}", session.log.subject_id, session.log.session_id);
    Ok((
        serialize_sensor_log(&session.log),
        write_wav(&session.audio)?,
        ManifestEntry {
            log: format!("{stem}.json"),
            wav: format!("{stem}.wav"),
            audio_offset_ms: 0.0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            reps_per_class: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_partitions_pairwise_share_exactly_one_group() {
        let inf = Informativeness::default();
        for a in GestureLabel::ALL {
            for b in GestureLabel::ALL {
                if a == b {
                    continue;
                }
                let shared = SensorModality::ALL
                    .iter()
                    .filter(|&&m| inf.group(m, a) == inf.group(m, b))
                    .count();
                assert_eq!(shared, 1, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn session_has_one_instance_per_rep_and_grid_times() {
        let s = generate_session(&small(), 0, 0).unwrap();
        assert_eq!(s.log.labels.len(), 9);
        assert!(s.log.records.windows(2).all(|w| w[1].t_ms - w[0].t_ms == 10));
        let session = s.to_session().unwrap();
        assert!(session.is_complete(1));
    }

    #[test]
    fn same_seed_same_session() {
        let a = generate_session(&small(), 1, 2).unwrap();
        let b = generate_session(&small(), 1, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_session(&SynthConfig { seed: 8, ..small() }, 1, 2).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SynthConfig {
            audio_band_hz: [1.0, 300.0],
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
