//! Commands behind the `mmgfuse` binary: synthesize a corpus, train the
//! late-fusion stack or the hybrid net, cross-validate, and segment logs.
//!
//! A run is described by a JSON [`RunConfig`]; every output lands under one
//! directory and is byte-identical for an unchanged config and seed.

use std::fs;
use std::path::{Path, PathBuf};

use mmgfuse_core::domain::{GestureLabel, MergedLabel, SensorModality, SENSOR_RATE_HZ};
use mmgfuse_core::dsp::{detect_activity, featurize, ActivitySegment, InstanceFeatures, MfccConfig, MfccExtractor};
use mmgfuse_core::eval::{
    run_hybrid_eval, run_late_fusion_eval, train_hybrid, train_late_fusion, EvalReport, HybridConfig,
    LateFusionConfig, Scheme, TrainedNet,
};
use mmgfuse_core::ingest::{load_session, parse_sensor_log, DatasetManifest, ManifestEntry, RejectedInterval};
use mmgfuse_core::models::{ModelCard, ModelKind};
use mmgfuse_core::nnet::{encode_checkpoint, Precision};
use mmgfuse_core::seed::derive_seed_str;
use mmgfuse_core::synth::{export_session, generate_session, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Exit code for bad flags, configs or unreadable inputs.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for data and runtime failures.
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<mmgfuse_core::Error> for CliError {
    fn from(e: mmgfuse_core::Error) -> Self {
        match e {
            mmgfuse_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_config_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunScheme {
    PerUser,
    CrossUser,
    Hybrid,
}

impl std::str::FromStr for RunScheme {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "per-user" => Ok(RunScheme::PerUser),
            "cross-user" => Ok(RunScheme::CrossUser),
            "hybrid" => Ok(RunScheme::Hybrid),
            _ => Err(CliError::Usage(format!("unknown scheme {s:?}; use per-user, cross-user or hybrid"))),
        }
    }
}

/// A training/evaluation run. Exactly one of `manifest` and `synth` names the
/// data; a relative `manifest` is resolved against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub scheme: RunScheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub late_fusion: LateFusionConfig,
    #[serde(default)]
    pub hybrid: HybridConfig,
    /// Restricts hybrid training and evaluation to these subject ids.
    #[serde(default)]
    pub hybrid_subjects: Option<Vec<String>>,
    #[serde(default)]
    pub mfcc: MfccConfig,
    #[serde(default = "default_precision")]
    pub checkpoint_precision: Precision,
    /// Used when no `--out` flag is given; not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

fn default_precision() -> Precision {
    Precision::F32
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> CliResult<Self> {
        serde_json::from_slice(bytes).map_err(|e| CliError::Usage(format!("run config: {e}")))
    }

    /// Reads a config and resolves `manifest` against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg = Self::from_json(&read_config_bytes(path)?)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.manifest = Some(base.join(m));
            }
        }
        if let Some(out) = &cfg.output_dir {
            if out.is_relative() {
                cfg.output_dir = Some(path.parent().unwrap_or(Path::new("")).join(out));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        match (&self.manifest, &self.synth) {
            (Some(m), None) => {
                if !m.is_file() {
                    return Err(CliError::Usage(format!("manifest {} does not exist", m.display())));
                }
            }
            (None, Some(s)) => s.validate()?,
            _ => return Err(CliError::Usage("give exactly one of manifest and synth".into())),
        }
        self.late_fusion.validate()?;
        self.hybrid.validate()?;
        self.mfcc.validate()?;
        Ok(())
    }

    /// The config as echoed into reports; the output directory is left out.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

/// Featurizes every instance of the run's data, one session at a time.
/// Features are rounded to `f32` so cached and fresh runs agree.
pub fn load_features(cfg: &RunConfig) -> CliResult<(Vec<InstanceFeatures>, Vec<RejectedInterval>)> {
    let extractor = MfccExtractor::new(cfg.mfcc.clone())?;
    let mut features = Vec::new();
    let mut rejected = Vec::new();
    let mut add = |session: mmgfuse_core::domain::Session| -> CliResult<()> {
        let mut batch = session
            .instances
            .par_iter()
            .map(|i| {
                let mut f = featurize(i, &extractor)?;
                f.quantize_f32();
                Ok(f)
            })
            .collect::<mmgfuse_core::Result<Vec<_>>>()?;
        features.append(&mut batch);
        Ok(())
    };
    if let Some(path) = &cfg.manifest {
        let (manifest, base) = DatasetManifest::load(path)?;
        for entry in &manifest.sessions {
            let outcome = load_session(entry, &base)?;
            rejected.extend(outcome.rejected);
            add(outcome.session)?;
        }
    } else if let Some(synth) = &cfg.synth {
        for subject in 0..synth.subjects {
            for session in 0..synth.sessions_per_subject {
                add(generate_session(synth, subject, session)?.to_session()?)?;
            }
        }
    }
    if features.is_empty() {
        return Err(CliError::Data("the dataset has no valid instances".into()));
    }
    Ok((features, rejected))
}

/// Writes JSON logs, WAVs and `manifest.json` under `out`.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut written = Vec::new();
    for subject in 0..cfg.subjects {
        for session in 0..cfg.sessions_per_subject {
            let (json, wav, entry) = export_session(&generate_session(cfg, subject, session)?)?;
            for (name, bytes) in [(&entry.log, &json), (&entry.wav, &wav)] {
                let path = out.join(name);
                write_file(&path, bytes)?;
                written.push(path);
            }
            entries.push(entry);
        }
    }
    let manifest = out.join("manifest.json");
    write_file(&manifest, &DatasetManifest { sessions: entries }.to_json())?;
    written.push(manifest);
    Ok(written)
}

fn class_names(classes: usize) -> Vec<String> {
    if classes == MergedLabel::COUNT {
        MergedLabel::ALL.iter().map(|l| l.name().to_string()).collect()
    } else {
        GestureLabel::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

fn write_model(out: &Path, name: &str, kind: ModelKind, modality: Option<SensorModality>, net: &TrainedNet, train: &mmgfuse_core::nnet::TrainConfig, precision: Precision) -> CliResult<()> {
    write_file(&out.join(format!("{name}.ckpt")), &encode_checkpoint(&net.network, precision))?;
    let card = ModelCard {
        kind,
        modality,
        input_shapes: net.network.input_shapes(),
        class_names: class_names(net.network.output_shape()[0]),
        parameter_count: net.network.parameter_count(),
        train_config: train.clone(),
        best_epoch: net.history.best_epoch,
        epochs_run: net.history.epochs.len(),
    };
    let mut bytes = serde_json::to_vec_pretty(&card).expect("card serializes");
    bytes.push(b'\n');
    write_file(&out.join(format!("{name}.card.json")), &bytes)
}

fn hybrid_subset<'a>(cfg: &RunConfig, features: &'a [InstanceFeatures]) -> Vec<&'a InstanceFeatures> {
    features
        .iter()
        .filter(|f| cfg.hybrid_subjects.as_ref().is_none_or(|s| s.contains(&f.subject_id)))
        .collect()
}

/// Trains the final models on all data: four sensor checkpoints and the
/// ensemble for the late-fusion schemes, one hybrid checkpoint otherwise.
/// Returns the written checkpoint paths.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let (features, rejected) = load_features(cfg)?;
    report_rejected(&rejected);
    let seed = derive_seed_str(cfg.seed, "final");
    let mut written = Vec::new();
    match cfg.scheme {
        RunScheme::PerUser | RunScheme::CrossUser => {
            let all: Vec<&InstanceFeatures> = features.iter().collect();
            let models = train_late_fusion(&all, &cfg.late_fusion, seed)?;
            for (m, net) in SensorModality::ALL.iter().zip(&models.sensors) {
                let train = if *m == SensorModality::Audio { &cfg.late_fusion.audio } else { &cfg.late_fusion.sensor };
                write_model(out, m.name(), ModelKind::for_modality(*m), Some(*m), net, train, cfg.checkpoint_precision)?;
                written.push(out.join(format!("{}.ckpt", m.name())));
            }
            write_model(out, "ensemble", ModelKind::EnsembleHead, None, &models.ensemble, &cfg.late_fusion.ensemble, cfg.checkpoint_precision)?;
            written.push(out.join("ensemble.ckpt"));
        }
        RunScheme::Hybrid => {
            let subset = hybrid_subset(cfg, &features);
            if subset.is_empty() {
                return Err(CliError::Data("no instances of the selected hybrid subjects".into()));
            }
            let net = train_hybrid(&subset, &cfg.hybrid, seed)?;
            write_model(out, "hybrid", ModelKind::HybridNet, None, &net, &cfg.hybrid.train, cfg.checkpoint_precision)?;
            written.push(out.join("hybrid.ckpt"));
        }
    }
    Ok(written)
}

fn report_rejected(rejected: &[RejectedInterval]) {
    for r in rejected {
        eprintln!("skipped {} at {}-{} ms: {}", r.label, r.start_ms, r.end_ms, r.reason);
    }
}

/// Leave-one-session-out evaluation; writes `report.json`, `confusion.csv`
/// and `report.txt` under `out`.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let (features, rejected) = load_features(cfg)?;
    report_rejected(&rejected);
    let report = match cfg.scheme {
        RunScheme::PerUser => run_late_fusion_eval(&features, Scheme::PerUser, &cfg.late_fusion, cfg.seed, cfg.echo())?,
        RunScheme::CrossUser => {
            run_late_fusion_eval(&features, Scheme::CrossUser, &cfg.late_fusion, cfg.seed, cfg.echo())?
        }
        RunScheme::Hybrid => {
            run_hybrid_eval(&features, cfg.hybrid_subjects.as_deref(), &cfg.hybrid, cfg.seed, cfg.echo())?
        }
    };
    write_file(&out.join("report.json"), &report.to_json())?;
    write_file(&out.join("confusion.csv"), report.confusion_csv().as_bytes())?;
    write_file(&out.join("report.txt"), report.render_text().as_bytes())?;
    Ok(report)
}

/// Activity segments of the FSR channels of a sensor log.
pub fn cmd_segment(log_path: &Path, threshold: f64, min_duration_ms: f64) -> CliResult<Vec<ActivitySegment>> {
    let bytes = read_config_bytes(log_path)?;
    let log = parse_sensor_log(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", log_path.display())))?;
    let rows: Vec<[f64; 2]> = log.records.iter().map(|r| r.fsr).collect();
    let fsr = mmgfuse_core::domain::Series::from_rows(2, &rows)?;
    let rate = if log.sample_rate_hz > 0.0 { log.sample_rate_hz } else { SENSOR_RATE_HZ };
    let t0 = log.records.first().map_or(0, |r| r.t_ms);
    let segments = detect_activity(&fsr, rate, threshold, min_duration_ms)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(segments
        .into_iter()
        .map(|s| ActivitySegment {
            start_ms: s.start_ms + t0,
            end_ms: s.end_ms + t0,
        })
        .collect())
}

/// `[[start_ms, end_ms], ...]`.
pub fn segments_json(segments: &[ActivitySegment]) -> String {
    let pairs: Vec<[i64; 2]> = segments.iter().map(|s| [s.start_ms, s.end_ms]).collect();
    serde_json::to_string(&pairs).expect("pairs serialize")
}
