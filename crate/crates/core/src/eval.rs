//! Leave-one-session-out cross-validation, metrics and reports for the
//! late-fusion ensemble and the hybrid net.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{merge_label, Dataset, GestureLabel, MergedLabel, SensorModality};
use crate::dsp::InstanceFeatures;
use crate::error::{Error, Result};
use crate::models::{
    build_ammg_net, build_ensemble_head, build_hybrid_net, build_mmg_net, InceptionBlockSpec, ModelKind,
};
use crate::nnet::{fit, predict, History, LabeledSet, Network, TrainConfig};
use crate::seed::{derive_seed, derive_seed_str};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Each subject on its own: train on the other sessions of that subject.
    PerUser,
    /// The k-th session of every subject is held out at once.
    CrossUser,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::PerUser => "per-user",
            Scheme::CrossUser => "cross-user",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-user" => Ok(Scheme::PerUser),
            "cross-user" => Ok(Scheme::CrossUser),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Held-out sessions as `subject/session`.
    pub held_out: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub scheme: Scheme,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Checks that every fold's train and test are disjoint and in range and
    /// that the tests partition `0..instances`.
    pub fn check(&self, instances: usize) -> Result<()> {
        let mut seen = vec![false; instances];
        for (k, fold) in self.folds.iter().enumerate() {
            let mut in_test = vec![false; instances];
            for &i in &fold.test {
                if i >= instances || seen[i] {
                    return Err(Error::Data(format!("fold {k}: test instance {i} repeated or out of range")));
                }
                seen[i] = true;
                in_test[i] = true;
            }
            if fold.train.iter().any(|&i| i >= instances || in_test[i]) {
                return Err(Error::Data(format!("fold {k}: train overlaps test")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("instance {i} is never tested")));
        }
        Ok(())
    }
}

/// Folds over instances given as `(subject, session)` keys in dataset order.
/// Sessions are indexed per subject by first appearance.
pub fn make_folds_for_keys<S: AsRef<str>>(keys: &[(S, S)], scheme: Scheme) -> Result<FoldPlan> {
    // subject -> sessions in appearance order
    let mut subjects: Vec<(&str, Vec<&str>)> = Vec::new();
    for (subject, session) in keys {
        let (subject, session) = (subject.as_ref(), session.as_ref());
        let pos = match subjects.iter().position(|(s, _)| *s == subject) {
            Some(p) => p,
            None => {
                subjects.push((subject, Vec::new()));
                subjects.len() - 1
            }
        };
        if !subjects[pos].1.contains(&session) {
            subjects[pos].1.push(session);
        }
    }
    if let Some((s, sessions)) = subjects.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Data(format!(
            "subject {s} has {} session(s); leave-one-session-out needs at least 2",
            sessions.len()
        )));
    }
    let session_index = |subject: &str, session: &str| -> (usize, usize) {
        let s = subjects.iter().position(|(n, _)| *n == subject).expect("known subject");
        let k = subjects[s].1.iter().position(|n| *n == session).expect("known session");
        (s, k)
    };
    let coords: Vec<(usize, usize)> = keys.iter().map(|(a, b)| session_index(a.as_ref(), b.as_ref())).collect();

    let mut folds = Vec::new();
    match scheme {
        Scheme::PerUser => {
            for (s, (subject, sessions)) in subjects.iter().enumerate() {
                for (k, session) in sessions.iter().enumerate() {
                    let test = (0..keys.len()).filter(|&i| coords[i] == (s, k)).collect();
                    let train = (0..keys.len()).filter(|&i| coords[i].0 == s && coords[i].1 != k).collect();
                    folds.push(Fold {
                        held_out: vec![format!("{subject}/{session}")],
                        train,
                        test,
                    });
                }
            }
        }
        Scheme::CrossUser => {
            let max_sessions = subjects.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
            for k in 0..max_sessions {
                let held_out = subjects
                    .iter()
                    .filter_map(|(subject, sessions)| sessions.get(k).map(|s| format!("{subject}/{s}")))
                    .collect();
                let test = (0..keys.len()).filter(|&i| coords[i].1 == k).collect();
                let train = (0..keys.len()).filter(|&i| coords[i].1 != k).collect();
                folds.push(Fold { held_out, train, test });
            }
        }
    }
    Ok(FoldPlan { scheme, folds })
}

pub fn make_folds(dataset: &Dataset, scheme: Scheme) -> Result<FoldPlan> {
    let keys: Vec<(&str, &str)> = dataset
        .instances()
        .map(|i| (i.subject_id.as_str(), i.session_id.as_str()))
        .collect();
    make_folds_for_keys(&keys, scheme)
}

pub fn make_folds_for_features(features: &[InstanceFeatures], scheme: Scheme) -> Result<FoldPlan> {
    let keys: Vec<(&str, &str)> = features
        .iter()
        .map(|f| (f.subject_id.as_str(), f.session_id.as_str()))
        .collect();
    make_folds_for_keys(&keys, scheme)
}

/// Counts with rows = truth, columns = prediction.
pub type ConfusionMatrix = Vec<Vec<u64>>;

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Length(format!(
            "{} truth labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Range(format!("label {} outside {classes} classes", t.max(p))));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `diag / row`, zero for classes with no instances.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<f64> {
    cm.iter().enumerate().map(|(k, row)| ratio(row[k], row.iter().sum())).collect()
}

/// `diag / column`, zero for classes never predicted.
pub fn per_class_precision(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.len())
        .map(|k| ratio(cm[k][k], cm.iter().map(|row| row[k]).sum()))
        .collect()
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    per_class_recall(cm)
        .into_iter()
        .zip(per_class_precision(cm))
        .map(|(r, p)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .collect()
}

/// Unweighted mean of per-class F1; classes that are never seen nor
/// predicted count as zero.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    if cm.is_empty() {
        return 0.0;
    }
    per_class_f1(cm).iter().sum::<f64>() / cm.len() as f64
}

/// Budgets of the late-fusion stack. The `seed` of each train config is
/// ignored: every model's seed is derived from the run seed and fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LateFusionConfig {
    /// The three 1-D sensor nets.
    pub sensor: TrainConfig,
    /// The MFCC net.
    pub audio: TrainConfig,
    pub ensemble: TrainConfig,
    /// Share of each class held out of the training split for early stopping.
    pub validation_fraction: f64,
}

impl Default for LateFusionConfig {
    fn default() -> Self {
        LateFusionConfig {
            sensor: ModelKind::MmgNet { channels: 4 }.default_train_config(0),
            audio: ModelKind::AmmgNet.default_train_config(0),
            ensemble: ModelKind::EnsembleHead.default_train_config(0),
            validation_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub train: TrainConfig,
    /// Inception widths per modality in `SensorModality::ALL` order.
    pub blocks: [InceptionBlockSpec; 4],
    pub validation_fraction: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            train: ModelKind::HybridNet.default_train_config(0),
            blocks: [InceptionBlockSpec::default(); 4],
            validation_fraction: 0.2,
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0 < f && f < 1.0) {
        return Err(Error::Config(format!("validation_fraction must lie in (0, 1), got {f}")));
    }
    Ok(())
}

impl LateFusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.audio.validate()?;
        self.ensemble.validate()?;
        check_fraction(self.validation_fraction)
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for b in &self.blocks {
            b.validate()?;
        }
        check_fraction(self.validation_fraction)
    }
}

/// Splits positions `0..labels.len()` into (train, validation), taking
/// `fraction` of every class (at least one when the class has two or more).
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let mut take = (members.len() as f64 * fraction).round() as usize;
        if members.len() >= 2 {
            take = take.clamp(1, members.len() - 1);
        } else {
            take = 0;
        }
        val.extend_from_slice(&members[..take]);
    }
    val.sort_unstable();
    let train = (0..labels.len()).filter(|i| val.binary_search(i).is_err()).collect();
    (train, val)
}

fn sensor_input(f: &InstanceFeatures, modality: SensorModality) -> &[f64] {
    match modality {
        SensorModality::Audio => f.mfcc.data(),
        m => f.steps(m).data(),
    }
}

fn sensor_set(data: &[&InstanceFeatures], modality: SensorModality, classes: usize, label: &dyn Fn(&InstanceFeatures) -> usize) -> Result<LabeledSet> {
    let Some(first) = data.first() else {
        return Err(Error::Data("empty training split".into()));
    };
    let shape = match modality {
        SensorModality::Audio => first.mfcc.shape().to_vec(),
        m => first.steps(m).shape().to_vec(),
    };
    let mut set = LabeledSet::new(vec![shape], classes);
    for f in data {
        set.push(&[sensor_input(f, modality)], label(f))?;
    }
    Ok(set)
}

fn hybrid_set(data: &[&InstanceFeatures], classes: usize) -> Result<LabeledSet> {
    let Some(first) = data.first() else {
        return Err(Error::Data("empty training split".into()));
    };
    let shapes = SensorModality::ALL.iter().map(|&m| first.steps(m).shape().to_vec()).collect();
    let mut set = LabeledSet::new(shapes, classes);
    for f in data {
        let streams: Vec<&[f64]> = SensorModality::ALL.iter().map(|&m| f.steps(m).data()).collect();
        set.push(&streams, merge_label(f.label).code())?;
    }
    Ok(set)
}

fn confidence_set(confidences: &[Vec<Vec<f64>>], labels: &[usize], classes: usize) -> Result<LabeledSet> {
    let mut set = LabeledSet::new(vec![vec![classes]; confidences.len()], classes);
    for (i, &label) in labels.iter().enumerate() {
        let streams: Vec<&[f64]> = confidences.iter().map(|c| c[i].as_slice()).collect();
        set.push(&streams, label)?;
    }
    Ok(set)
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

fn argmax(p: &[f64]) -> usize {
    // first maximum wins, like ConfidenceVector::argmax
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TrainedNet {
    pub network: Network,
    pub history: History,
}

/// Four frozen sensor nets in `SensorModality::ALL` order plus the ensemble
/// head trained on their confidences.
#[derive(Clone, Debug)]
pub struct LateFusionModels {
    pub sensors: Vec<TrainedNet>,
    pub ensemble: TrainedNet,
}

impl LateFusionModels {
    /// Per-sensor confidences and the ensemble confidences for every instance.
    pub fn predict(&self, data: &[&InstanceFeatures]) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
        let classes = GestureLabel::COUNT;
        let per_sensor = SensorModality::ALL
            .par_iter()
            .zip(&self.sensors)
            .map(|(&m, net)| predict(&net.network, &sensor_set(data, m, classes, &|f| f.label.code())?))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = data.iter().map(|f| f.label.code()).collect();
        let ensemble = predict(&self.ensemble.network, &confidence_set(&per_sensor, &labels, classes)?)?;
        Ok((per_sensor, ensemble))
    }
}

/// Trains the late-fusion stack on `data`. `seed` selects the initial
/// weights, the validation split and the batch order of every model.
pub fn train_late_fusion(data: &[&InstanceFeatures], cfg: &LateFusionConfig, seed: u64) -> Result<LateFusionModels> {
    cfg.validate()?;
    let classes = GestureLabel::COUNT;
    let labels: Vec<usize> = data.iter().map(|f| f.label.code()).collect();
    let (train_idx, val_idx) = stratified_split(&labels, cfg.validation_fraction, derive_seed_str(seed, "split"));
    let train: Vec<&InstanceFeatures> = train_idx.iter().map(|&i| data[i]).collect();
    let val: Vec<&InstanceFeatures> = val_idx.iter().map(|&i| data[i]).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "{} instances are too few for a train/validation split",
            data.len()
        )));
    }

    let sensors = SensorModality::ALL
        .par_iter()
        .map(|&m| {
            let tag = derive_seed_str(seed, m.name());
            let (mut network, tcfg) = match m {
                SensorModality::Audio => (build_ammg_net(classes, derive_seed(tag, 0))?, &cfg.audio),
                m => (build_mmg_net(m.channel_count(), classes, derive_seed(tag, 0))?, &cfg.sensor),
            };
            let label = |f: &InstanceFeatures| f.label.code();
            let history = fit(
                &mut network,
                &sensor_set(&train, m, classes, &label)?,
                &sensor_set(&val, m, classes, &label)?,
                &with_seed(tcfg, derive_seed(tag, 1)),
            )?;
            Ok(TrainedNet { network, history })
        })
        .collect::<Result<Vec<_>>>()?;

    let confidences = |part: &[&InstanceFeatures]| -> Result<Vec<Vec<Vec<f64>>>> {
        SensorModality::ALL
            .iter()
            .zip(&sensors)
            .map(|(&m, net)| predict(&net.network, &sensor_set(part, m, classes, &|f| f.label.code())?))
            .collect()
    };
    let train_labels: Vec<usize> = train.iter().map(|f| f.label.code()).collect();
    let val_labels: Vec<usize> = val.iter().map(|f| f.label.code()).collect();
    let ens_train = confidence_set(&confidences(&train)?, &train_labels, classes)?;
    let ens_val = confidence_set(&confidences(&val)?, &val_labels, classes)?;
    let tag = derive_seed_str(seed, "ensemble");
    let mut network = build_ensemble_head(SensorModality::ALL.len(), classes, derive_seed(tag, 0))?;
    let history = fit(&mut network, &ens_train, &ens_val, &with_seed(&cfg.ensemble, derive_seed(tag, 1)))?;
    Ok(LateFusionModels {
        sensors,
        ensemble: TrainedNet { network, history },
    })
}

/// Trains the hybrid net on `data` with merged six-class labels.
pub fn train_hybrid(data: &[&InstanceFeatures], cfg: &HybridConfig, seed: u64) -> Result<TrainedNet> {
    cfg.validate()?;
    let classes = MergedLabel::COUNT;
    let labels: Vec<usize> = data.iter().map(|f| merge_label(f.label).code()).collect();
    let (train_idx, val_idx) = stratified_split(&labels, cfg.validation_fraction, derive_seed_str(seed, "split"));
    let pick = |idx: &[usize]| -> Vec<&InstanceFeatures> { idx.iter().map(|&i| data[i]).collect() };
    let (train, val) = (pick(&train_idx), pick(&val_idx));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "{} instances are too few for a train/validation split",
            data.len()
        )));
    }
    let tag = derive_seed_str(seed, "hybrid");
    let mut network = build_hybrid_net(&cfg.blocks, classes, derive_seed(tag, 0))?;
    let history = fit(
        &mut network,
        &hybrid_set(&train, classes)?,
        &hybrid_set(&val, classes)?,
        &with_seed(&cfg.train, derive_seed(tag, 1)),
    )?;
    Ok(TrainedNet { network, history })
}

pub fn predict_hybrid(network: &Network, data: &[&InstanceFeatures]) -> Result<Vec<Vec<f64>>> {
    predict(network, &hybrid_set(data, MergedLabel::COUNT)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub confusion: ConfusionMatrix,
    pub support: Vec<u64>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
}

impl ModelReport {
    pub fn from_confusion(model: &str, confusion: ConfusionMatrix) -> Self {
        ModelReport {
            model: model.to_string(),
            support: confusion.iter().map(|r| r.iter().sum()).collect(),
            recall: per_class_recall(&confusion),
            precision: per_class_precision(&confusion),
            f1: per_class_f1(&confusion),
            macro_f1: macro_f1(&confusion),
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldModelScore {
    pub model: String,
    pub macro_f1: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub held_out: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    pub scores: Vec<FoldModelScore>,
}

/// Confusions between one class and a merged group, both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostic {
    pub name: String,
    pub first_as_second: u64,
    pub second_as_first: u64,
    /// Both directions over the two classes' combined support.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: String,
    pub class_names: Vec<String>,
    /// Name of the model whose confusion matrix is the headline result.
    pub primary: String,
    pub models: Vec<ModelReport>,
    pub folds: Vec<FoldReport>,
    /// Ensemble macro F1 minus the best single-sensor macro F1.
    pub fusion_gain: Option<f64>,
    pub diagnostics: Vec<PairDiagnostic>,
    pub config_hash: String,
    pub config: serde_json::Value,
}

/// SHA-256 of the compact JSON form (object keys sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    hex::encode(Sha256::digest(bytes))
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == name)
    }

    pub fn primary_model(&self) -> &ModelReport {
        self.model(&self.primary).expect("primary model is always reported")
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    /// The primary confusion matrix with a header row and truth labels.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in &self.class_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.primary_model().confusion) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scheme {}  config {}", self.scheme, &self.config_hash[..12.min(self.config_hash.len())]);
        let _ = writeln!(out, "\nmacro F1");
        for m in &self.models {
            let _ = writeln!(out, "  {:<14}{:.4}", m.model, m.macro_f1);
        }
        if let Some(g) = self.fusion_gain {
            let _ = writeln!(out, "  fusion gain over best sensor {:+.4}", g);
        }
        let primary = self.primary_model();
        let _ = writeln!(out, "\n{} per class", primary.model);
        let _ = writeln!(out, "  {:<26}{:>8}{:>10}{:>10}{:>8}", "class", "support", "recall", "precision", "f1");
        for (k, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {:<26}{:>8}{:>10.4}{:>10.4}{:>8.4}",
                name, primary.support[k], primary.recall[k], primary.precision[k], primary.f1[k]
            );
        }
        let _ = writeln!(out, "\nconfusion (rows truth)");
        for (name, row) in self.class_names.iter().zip(&primary.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            let _ = writeln!(out, "  {:<26}{}", name, cells.join(""));
        }
        for d in &self.diagnostics {
            let _ = writeln!(
                out,
                "\n{}: {} + {} confusions, rate {:.4}",
                d.name, d.first_as_second, d.second_as_first, d.rate
            );
        }
        let _ = writeln!(out, "\nfolds");
        for f in &self.folds {
            let scores: Vec<String> = f.scores.iter().map(|s| format!("{} {:.3}", s.model, s.macro_f1)).collect();
            let _ = writeln!(out, "  {} [{}] {}", f.index, f.held_out.join(" "), scores.join("  "));
        }
        out
    }
}

struct FoldOutcome {
    /// Predicted class per model, aligned with the fold's test list.
    predictions: Vec<Vec<usize>>,
    histories: Vec<(usize, usize)>,
}

fn pooled_reports(
    names: &[String],
    plan: &FoldPlan,
    truth: &[usize],
    outcomes: &[FoldOutcome],
    classes: usize,
) -> Result<(Vec<ModelReport>, Vec<FoldReport>)> {
    let mut pooled_truth = Vec::new();
    let mut pooled_pred = vec![Vec::new(); names.len()];
    let mut folds = Vec::new();
    for (index, (fold, out)) in plan.folds.iter().zip(outcomes).enumerate() {
        let fold_truth: Vec<usize> = fold.test.iter().map(|&i| truth[i]).collect();
        let mut scores = Vec::new();
        for (m, name) in names.iter().enumerate() {
            let cm = confusion_matrix(&fold_truth, &out.predictions[m], classes)?;
            scores.push(FoldModelScore {
                model: name.clone(),
                macro_f1: macro_f1(&cm),
                best_epoch: out.histories[m].0,
                epochs_run: out.histories[m].1,
            });
            pooled_pred[m].extend_from_slice(&out.predictions[m]);
        }
        pooled_truth.extend(fold_truth);
        folds.push(FoldReport {
            index,
            held_out: fold.held_out.clone(),
            train_count: fold.train.len(),
            test_count: fold.test.len(),
            scores,
        });
    }
    let models = names
        .iter()
        .zip(&pooled_pred)
        .map(|(name, pred)| Ok(ModelReport::from_confusion(name, confusion_matrix(&pooled_truth, pred, classes)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((models, folds))
}

fn history_summary(h: &History) -> (usize, usize) {
    (h.best_epoch, h.epochs.len())
}

fn fold_seed(base: u64, scheme: &str, fold: usize) -> u64 {
    derive_seed(derive_seed_str(base, scheme), fold as u64)
}

/// Leave-one-session-out evaluation of the four sensor nets and the
/// ensemble over nine classes. Folds train independently (in parallel on
/// the current rayon pool) and are merged in fold order.
pub fn run_late_fusion_eval(
    features: &[InstanceFeatures],
    scheme: Scheme,
    cfg: &LateFusionConfig,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    cfg.validate()?;
    let plan = make_folds_for_features(features, scheme)?;
    plan.check(features.len())?;
    let outcomes = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let train: Vec<&InstanceFeatures> = fold.train.iter().map(|&i| &features[i]).collect();
            let test: Vec<&InstanceFeatures> = fold.test.iter().map(|&i| &features[i]).collect();
            let models = train_late_fusion(&train, cfg, fold_seed(seed, &scheme.to_string(), k))?;
            let (per_sensor, ensemble) = models.predict(&test)?;
            let mut predictions: Vec<Vec<usize>> =
                per_sensor.iter().map(|p| p.iter().map(|v| argmax(v)).collect()).collect();
            predictions.push(ensemble.iter().map(|v| argmax(v)).collect());
            let mut histories: Vec<(usize, usize)> = models.sensors.iter().map(|n| history_summary(&n.history)).collect();
            histories.push(history_summary(&models.ensemble.history));
            Ok(FoldOutcome { predictions, histories })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut names: Vec<String> = SensorModality::ALL.iter().map(|m| m.name().to_string()).collect();
    names.push("ensemble".into());
    let truth: Vec<usize> = features.iter().map(|f| f.label.code()).collect();
    let (models, folds) = pooled_reports(&names, &plan, &truth, &outcomes, GestureLabel::COUNT)?;
    let best_single = models[..SensorModality::ALL.len()]
        .iter()
        .map(|m| m.macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    let fusion_gain = Some(models[SensorModality::ALL.len()].macro_f1 - best_single);
    Ok(EvalReport {
        scheme: scheme.to_string(),
        class_names: GestureLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        primary: "ensemble".into(),
        models,
        folds,
        fusion_gain,
        diagnostics: Vec::new(),
        config_hash: config_hash(&config_echo),
        config: config_echo,
    })
}

fn pair_diagnostic(cm: &ConfusionMatrix, name: &str, a: MergedLabel, b: MergedLabel) -> PairDiagnostic {
    let (a, b) = (a.code(), b.code());
    let ab = cm[a][b];
    let ba = cm[b][a];
    let support: u64 = cm[a].iter().sum::<u64>() + cm[b].iter().sum::<u64>();
    PairDiagnostic {
        name: name.into(),
        first_as_second: ab,
        second_as_first: ba,
        rate: ratio(ab + ba, support),
    }
}

/// Cross-user leave-one-session-out evaluation of the hybrid net over the
/// six merged classes, optionally restricted to `subjects`.
pub fn run_hybrid_eval(
    features: &[InstanceFeatures],
    subjects: Option<&[String]>,
    cfg: &HybridConfig,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    cfg.validate()?;
    let selected: Vec<InstanceFeatures> = match subjects {
        Some(list) => {
            if let Some(missing) = list.iter().find(|s| !features.iter().any(|f| &f.subject_id == *s)) {
                return Err(Error::Data(format!("subject {missing} has no instances")));
            }
            features.iter().filter(|f| list.contains(&f.subject_id)).cloned().collect()
        }
        None => features.to_vec(),
    };
    let plan = make_folds_for_features(&selected, Scheme::CrossUser)?;
    plan.check(selected.len())?;
    let outcomes = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let train: Vec<&InstanceFeatures> = fold.train.iter().map(|&i| &selected[i]).collect();
            let test: Vec<&InstanceFeatures> = fold.test.iter().map(|&i| &selected[i]).collect();
            let net = train_hybrid(&train, cfg, fold_seed(seed, "hybrid", k))?;
            let pred = predict_hybrid(&net.network, &test)?;
            Ok(FoldOutcome {
                predictions: vec![pred.iter().map(|v| argmax(v)).collect()],
                histories: vec![history_summary(&net.history)],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = selected.iter().map(|f| merge_label(f.label).code()).collect();
    let (models, folds) = pooled_reports(&["hybrid".to_string()], &plan, &truth, &outcomes, MergedLabel::COUNT)?;
    let cm = &models[0].confusion;
    let diagnostics = vec![
        pair_diagnostic(cm, "fear vs joy+surprise", MergedLabel::Fear, MergedLabel::JoySurprise),
        pair_diagnostic(
            cm,
            "winking vs anger+disgust+sadness",
            MergedLabel::Winking,
            MergedLabel::AngerDisgustSadness,
        ),
    ];
    Ok(EvalReport {
        scheme: "hybrid".into(),
        class_names: MergedLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        primary: "hybrid".into(),
        models,
        folds,
        fusion_gain: None,
        diagnostics,
        config_hash: config_hash(&config_echo),
        config: config_echo,
    })
}

/// Merged-label counts of a list of gestures.
pub fn merged_counts(labels: &[GestureLabel]) -> BTreeMap<MergedLabel, usize> {
    let mut out = BTreeMap::new();
    for &l in labels {
        *out.entry(merge_label(l)).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion_and_f1() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm, vec![vec![1, 1], vec![0, 1]]);
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(matches!(confusion_matrix(&[0], &[], 2), Err(Error::Length(_))));
        assert_eq!(confusion_matrix(&[], &[], 3).unwrap(), vec![vec![0; 3]; 3]);
    }

    #[test]
    fn stratified_split_takes_each_class() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let (train, val) = stratified_split(&labels, 0.2, 3);
        assert_eq!(train.len() + val.len(), 40);
        for c in 0..4 {
            assert_eq!(val.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
    }

    #[test]
    fn one_session_subject_is_rejected() {
        let keys = [("a", "s1"), ("a", "s2"), ("b", "s1")];
        assert!(matches!(make_folds_for_keys(&keys, Scheme::CrossUser), Err(Error::Data(_))));
    }
}
