//! MFCC + Δ + ΔΔ features over a centred STFT.
//!
//! Per channel: reflect-padded STFT (periodic Hamming window) → power
//! spectrum → triangular HTK-mel filterbank → natural log with a 1e-10
//! floor → orthonormal DCT-II → regression deltas of width 9 with edge
//! replication. Output layout is `(3·n_mfcc, frames, channels)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::domain::{SensorModality, Series};
use crate::dsp::features::FeatureTensor;
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: f64,
    /// Window and FFT length in samples.
    pub window_length: usize,
    pub hop_length: usize,
    pub mel_filters: usize,
    pub mfcc_count: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Reflect-pad by half a window on each side so frame t is centred on sample t·hop.
    pub center: bool,
    pub delta_width: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 44_100.0,
            window_length: 4096,
            hop_length: 1024,
            mel_filters: 13,
            mfcc_count: 13,
            fmin_hz: 0.0,
            fmax_hz: 22_050.0,
            center: true,
            delta_width: 9,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length <= self.hop_length || self.hop_length == 0 {
            return Err(Error::Config("window length must exceed hop length".into()));
        }
        if self.mfcc_count == 0 || self.mfcc_count > self.mel_filters {
            return Err(Error::Config("mfcc_count must be in 1..=mel_filters".into()));
        }
        if self.delta_width < 3 || self.delta_width % 2 == 0 {
            return Err(Error::Config("delta width must be odd and >= 3".into()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= self.sample_rate / 2.0) {
            return Err(Error::Config("mel band must satisfy 0 <= fmin < fmax <= Nyquist".into()));
        }
        Ok(())
    }

    /// Number of STFT frames for a signal of `samples` samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        if self.center {
            1 + samples / self.hop_length
        } else if samples < self.window_length {
            0
        } else {
            1 + (samples - self.window_length) / self.hop_length
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Triangular filters with unit peaks, `mel_filters × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bins = cfg.window_length / 2 + 1;
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.mel_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_filters + 1) as f64))
        .collect();
    (0..cfg.mel_filters)
        .map(|j| {
            let (left, centre, right) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * cfg.sample_rate / cfg.window_length as f64;
                    let up = (f - left) / (centre - left);
                    let down = (right - f) / (right - centre);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, keeping the first `keep` coefficients.
pub fn dct2_ortho(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum();
            scale * s
        })
        .collect()
}

/// Regression deltas along time with edge replication; `rows[c][t]`.
pub fn delta(rows: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    let half = (width / 2) as isize;
    let denom: f64 = 2.0 * (1..=half).map(|n| (n * n) as f64).sum::<f64>();
    rows.iter()
        .map(|row| {
            let len = row.len() as isize;
            let at = |t: isize| row[t.clamp(0, len - 1) as usize];
            (0..len)
                .map(|t| {
                    (1..=half)
                        .map(|n| n as f64 * (at(t + n) - at(t - n)))
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Reusable extractor holding the window, filterbank and FFT plan.
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.window_length);
        Ok(MfccExtractor {
            window: hamming(cfg.window_length),
            bank: mel_filterbank(&cfg),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Static MFCCs of one channel, `[coefficient][frame]`.
    pub fn cepstrum(&self, signal: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n_fft = self.cfg.window_length;
        let pad = n_fft / 2;
        let padded: Vec<f64> = if self.cfg.center {
            if signal.len() <= pad {
                return Err(Error::Length(format!(
                    "reflect padding needs more than {pad} samples, got {}",
                    signal.len()
                )));
            }
            let n = signal.len();
            let mut p = Vec::with_capacity(n + 2 * pad);
            p.extend((0..pad).map(|i| signal[pad - i]));
            p.extend_from_slice(signal);
            p.extend((0..pad).map(|j| signal[n - 2 - j]));
            p
        } else {
            if signal.len() < n_fft {
                return Err(Error::Length(format!("need at least {n_fft} samples")));
            }
            signal.to_vec()
        };
        let frames = self.cfg.frame_count(signal.len());
        let bins = n_fft / 2 + 1;
        let mut coeffs = vec![vec![0.0; frames]; self.cfg.mfcc_count];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; bins];
        let mut log_mel = vec![0.0; self.cfg.mel_filters];
        for t in 0..frames {
            let start = t * self.cfg.hop_length;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf[..bins]) {
                *p = b.norm_sqr();
            }
            for (m, filt) in log_mel.iter_mut().zip(&self.bank) {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                *m = e.max(LOG_FLOOR).ln();
            }
            for (k, c) in dct2_ortho(&log_mel, self.cfg.mfcc_count).into_iter().enumerate() {
                coeffs[k][t] = c;
            }
        }
        Ok(coeffs)
    }

    /// `(3·n_mfcc, frames, channels)` tensor of MFCC, Δ and ΔΔ.
    pub fn features(&self, audio: &Series) -> Result<FeatureTensor> {
        let channels = audio.channels();
        let frames = self.cfg.frame_count(audio.rows());
        let n = self.cfg.mfcc_count;
        let mut data = vec![0.0; 3 * n * frames * channels];
        for c in 0..channels {
            let stat = self.cepstrum(&audio.column(c))?;
            let d1 = delta(&stat, self.cfg.delta_width);
            let d2 = delta(&d1, self.cfg.delta_width);
            for (block, rows) in [stat, d1, d2].iter().enumerate() {
                for (k, row) in rows.iter().enumerate() {
                    for (t, v) in row.iter().enumerate() {
                        data[((block * n + k) * frames + t) * channels + c] = *v;
                    }
                }
            }
        }
        FeatureTensor::new(vec![3 * n, frames, channels], data, SensorModality::Audio)
    }
}

/// One-shot MFCC feature extraction; see [`MfccExtractor`].
pub fn mfcc_features(audio: &Series, cfg: &MfccConfig) -> Result<FeatureTensor> {
    MfccExtractor::new(cfg.clone())?.features(audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_of_1000_hz() {
        // 2595 · log10(1 + 1000/700) = 999.985...
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn frame_count_for_52000_samples() {
        assert_eq!(MfccConfig::default().frame_count(52_000), 51);
    }

    #[test]
    fn dct_matches_naive_orthonormal_definition() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let c = dct2_ortho(&x, 4);
        // energy preserving
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = c.iter().map(|v| v * v).sum();
        assert!((ex - ec).abs() < 1e-12);
        assert!((c[0] - x.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn delta_of_ramp_is_slope_away_from_edges() {
        let row: Vec<f64> = (0..20).map(|t| 3.0 * t as f64).collect();
        let d = delta(&[row], 9);
        for t in 4..16 {
            assert!((d[0][t] - 3.0).abs() < 1e-12);
        }
        // replicated edge dampens the first value
        assert!(d[0][0] < 3.0);
    }

    #[test]
    fn filterbank_triangles_peak_at_one() {
        let bank = mel_filterbank(&MfccConfig::default());
        assert_eq!(bank.len(), 13);
        for f in &bank {
            let peak = f.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.9 && peak <= 1.0);
        }
    }

    #[test]
    fn silence_gives_flat_static_and_zero_deltas() {
        let audio = Series::zeros(52_000, 2);
        let t = mfcc_features(&audio, &MfccConfig::default()).unwrap();
        assert_eq!(t.shape(), &[39, 51, 2]);
        for k in 0..13 {
            for c in 0..2 {
                let first = t.at(&[k, 0, c]);
                for f in 0..51 {
                    assert_eq!(t.at(&[k, f, c]), first);
                    assert_eq!(t.at(&[13 + k, f, c]), 0.0);
                    assert_eq!(t.at(&[26 + k, f, c]), 0.0);
                }
            }
        }
    }

    #[test]
    fn too_short_for_padding() {
        let audio = Series::zeros(1000, 2);
        assert!(matches!(
            mfcc_features(&audio, &MfccConfig::default()),
            Err(Error::Length(_))
        ));
    }
}
