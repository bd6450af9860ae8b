//! Model-ready feature tensors and the per-modality preprocessing chains.

use serde::{Deserialize, Serialize};

use crate::domain::{GestureInstance, GestureLabel, SensorModality, Series, SENSOR_RATE_HZ};
use crate::dsp::filter::butterworth_lowpass;
use crate::dsp::mfcc::MfccExtractor;
use crate::dsp::resample::{endpoint_normalize, resample_antialiased};
use crate::error::{Error, Result};

/// Time steps every 1-D model input is resampled to.
pub const MODEL_STEPS: usize = 400;
/// Audio length fed to the MFCC stage.
pub const MFCC_INPUT_SAMPLES: usize = 52_000;
/// Low-pass cutoff applied after resampling, designed at the native sensor rate.
pub const SMOOTHING_CUTOFF_HZ: f64 = 5.0;

const CACHE_MAGIC: &[u8; 4] = b"MMGF";
const CACHE_VERSION: u8 = 1;

/// A shaped row-major array of model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    modality: SensorModality,
}

impl FeatureTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, modality: SensorModality) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "feature data length {} != product of {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature tensor contains non-finite values".into()));
        }
        Ok(FeatureTensor {
            shape,
            data,
            modality,
        })
    }

    pub fn from_series(series: Series, modality: SensorModality) -> Result<Self> {
        let shape = vec![series.rows(), series.channels()];
        FeatureTensor::new(shape, series.into_data(), modality)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn modality(&self) -> SensorModality {
        self.modality
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {i} out of range");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Rounds every value to the nearest `f32`, the precision of the cache file.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Serialises to the cache layout: `"MMGF"`, version byte, modality tag,
    /// `u16` rank, `u32` dims, then `f32` values, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.push(CACHE_VERSION);
        out.push(self.modality.tag());
        out.extend_from_slice(&(self.shape.len() as u16).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(format!("feature cache: {m}"));
        if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
            return Err(fail("bad magic"));
        }
        if bytes[4] != CACHE_VERSION {
            return Err(fail(&format!("unsupported version {}", bytes[4])));
        }
        let modality = SensorModality::from_tag(bytes[5]).ok_or_else(|| fail("bad modality tag"))?;
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let mut pos = 8;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| fail("truncated shape"))?;
            shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
            pos += 4;
        }
        let count: usize = shape.iter().product();
        let body = &bytes[pos..];
        if body.len() != 4 * count {
            return Err(fail("payload length does not match shape"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        FeatureTensor::new(shape, data, modality)
    }
}

/// Unit-normalises quaternion rows and flips signs so consecutive rows stay
/// in the same hemisphere.
pub fn renormalize_quaternions(series: &Series) -> Series {
    let mut out = series.clone();
    let mut prev: Option<[f64; 4]> = None;
    for r in 0..series.rows() {
        let row = series.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut q = [0.0; 4];
        if norm > 0.0 {
            for (dst, v) in q.iter_mut().zip(row) {
                *dst = v / norm;
            }
        } else {
            q[0] = 1.0;
        }
        if let Some(p) = prev {
            if p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                q.iter_mut().for_each(|v| *v = -*v);
            }
        }
        for (c, v) in q.iter().enumerate() {
            out.set(r, c, *v);
        }
        prev = Some(q);
    }
    out
}

/// normalise → resample to 400 → 5 Hz low-pass, for a 100 Hz sensor stream.
pub fn preprocess_series(series: &Series) -> Result<Series> {
    let normalized = endpoint_normalize(series)?;
    let resampled = resample_antialiased(&normalized, MODEL_STEPS)?;
    let lowpass = butterworth_lowpass(SMOOTHING_CUTOFF_HZ, SENSOR_RATE_HZ)?;
    Ok(lowpass.apply(&resampled))
}

/// `(400, channels)` input for one of the three 1-D sensor networks.
pub fn preprocess_mmg(instance: &GestureInstance, modality: SensorModality) -> Result<FeatureTensor> {
    if modality == SensorModality::Audio {
        return Err(Error::Config("audio is not an MMG modality".into()));
    }
    let raw = instance
        .stream(modality)
        .ok_or_else(|| Error::Data(format!("instance lacks {modality} series")))?;
    if raw.channels() != modality.channel_count() {
        return Err(Error::Shape(format!(
            "{modality} series has {} channels, expected {}",
            raw.channels(),
            modality.channel_count()
        )));
    }
    let series = if modality == SensorModality::Orientation {
        renormalize_quaternions(raw)
    } else {
        raw.clone()
    };
    FeatureTensor::from_series(preprocess_series(&series)?, modality)
}

/// `(39, 51, 2)` MFCC input of the acoustic network.
pub fn preprocess_ammg(instance: &GestureInstance, extractor: &MfccExtractor) -> Result<FeatureTensor> {
    let audio = resample_antialiased(&instance.audio, MFCC_INPUT_SAMPLES)?;
    extractor.features(&audio)
}

/// `(400, 2)` raw-waveform audio input of the hybrid network.
pub fn preprocess_hybrid_audio(instance: &GestureInstance) -> Result<FeatureTensor> {
    FeatureTensor::from_series(
        resample_antialiased(&instance.audio, MODEL_STEPS)?,
        SensorModality::Audio,
    )
}

/// Every model input derived from one gesture instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFeatures {
    pub subject_id: String,
    pub session_id: String,
    pub label: GestureLabel,
    pub fsr_pef: FeatureTensor,
    pub orientation: FeatureTensor,
    pub acceleration: FeatureTensor,
    pub mfcc: FeatureTensor,
    pub audio_steps: FeatureTensor,
}

impl InstanceFeatures {
    /// The 1-D sensor input for an MMG modality, or the 400-step audio for `Audio`.
    pub fn steps(&self, modality: SensorModality) -> &FeatureTensor {
        match modality {
            SensorModality::FsrPef => &self.fsr_pef,
            SensorModality::Orientation => &self.orientation,
            SensorModality::Acceleration => &self.acceleration,
            SensorModality::Audio => &self.audio_steps,
        }
    }

    pub fn quantize_f32(&mut self) {
        for t in [
            &mut self.fsr_pef,
            &mut self.orientation,
            &mut self.acceleration,
            &mut self.mfcc,
            &mut self.audio_steps,
        ] {
            t.quantize_f32();
        }
    }
}

pub fn featurize(instance: &GestureInstance, extractor: &MfccExtractor) -> Result<InstanceFeatures> {
    Ok(InstanceFeatures {
        subject_id: instance.subject_id.clone(),
        session_id: instance.session_id.clone(),
        label: instance.label,
        fsr_pef: preprocess_mmg(instance, SensorModality::FsrPef)?,
        orientation: preprocess_mmg(instance, SensorModality::Orientation)?,
        acceleration: preprocess_mmg(instance, SensorModality::Acceleration)?,
        mfcc: preprocess_ammg(instance, extractor)?,
        audio_steps: preprocess_hybrid_audio(instance)?,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::dsp::mfcc::MfccConfig;

    fn instance(rows: usize, constant: bool) -> GestureInstance {
        let wave = |r: usize, c: usize| {
            if constant {
                0.25 * (c + 1) as f64
            } else {
                (r as f64 * 0.07 + c as f64).sin()
            }
        };
        let make = |channels: usize| {
            let data = (0..rows * channels).map(|i| wave(i / channels, i % channels)).collect();
            Series::new(rows, channels, data).unwrap()
        };
        let mut series = BTreeMap::new();
        series.insert(SensorModality::FsrPef, make(4));
        series.insert(
            SensorModality::Orientation,
            Series::from_rows(4, &vec![[0.5, 0.5, 0.5, 0.5]; rows]).unwrap(),
        );
        series.insert(SensorModality::Acceleration, make(3));
        let audio_rows = rows * 441;
        let audio = Series::new(
            audio_rows,
            2,
            (0..audio_rows * 2).map(|i| 0.1 * ((i / 2) as f64 * 0.01).sin()).collect(),
        )
        .unwrap();
        GestureInstance {
            subject_id: "a".into(),
            session_id: "a-1".into(),
            label: GestureLabel::Fear,
            start_ms: 0,
            end_ms: (rows as i64 - 1) * 10,
            series,
            audio,
        }
    }

    #[test]
    fn mmg_shapes() {
        let inst = instance(137, false);
        assert_eq!(preprocess_mmg(&inst, SensorModality::FsrPef).unwrap().shape(), &[400, 4]);
        assert_eq!(preprocess_mmg(&inst, SensorModality::Acceleration).unwrap().shape(), &[400, 3]);
        assert!(preprocess_mmg(&inst, SensorModality::Audio).is_err());
    }

    #[test]
    fn constant_instance_is_all_zero() {
        let inst = instance(90, true);
        for m in [SensorModality::FsrPef, SensorModality::Orientation, SensorModality::Acceleration] {
            let t = preprocess_mmg(&inst, m).unwrap();
            assert!(t.data().iter().all(|v| *v == 0.0), "{m}");
        }
    }

    #[test]
    fn full_featurisation() {
        let inst = instance(120, false);
        let ex = MfccExtractor::new(MfccConfig::default()).unwrap();
        let f = featurize(&inst, &ex).unwrap();
        assert_eq!(f.mfcc.shape(), &[39, 51, 2]);
        assert_eq!(f.audio_steps.shape(), &[400, 2]);
        assert_eq!(f.label, GestureLabel::Fear);
    }

    #[test]
    fn quaternion_renormalisation() {
        let s = Series::from_rows(4, &[[2.0, 0.0, 0.0, 0.0], [-0.9, 0.1, 0.0, 0.0]]).unwrap();
        let q = renormalize_quaternions(&s);
        assert_eq!(q.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(q.get(1, 0) > 0.0);
        let n: f64 = q.row(1).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_round_trip_at_f32_precision() {
        let mut t = FeatureTensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-3, 7.0, -0.0], SensorModality::Orientation)
            .unwrap();
        let decoded = FeatureTensor::decode(&t.encode()).unwrap();
        t.quantize_f32();
        assert_eq!(decoded, t);
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"MMGF");
        assert_eq!(bytes.len(), 8 + 2 * 4 + 6 * 4);
        assert!(FeatureTensor::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureTensor::new(vec![1], vec![f64::NAN], SensorModality::Audio).is_err());
    }
}
