//! Endpoint normalisation and fixed-length resampling of variable-length gestures.

use crate::domain::Series;
use crate::dsp::filter::butterworth_lowpass;
use crate::error::{Error, Result};

fn require_two_rows(series: &Series, what: &str) -> Result<()> {
    if series.rows() < 2 {
        return Err(Error::Length(format!(
            "{what} needs at least 2 samples, got {}",
            series.rows()
        )));
    }
    Ok(())
}

/// Subtracts, per channel, the mean of the first and last sample.
pub fn endpoint_normalize(series: &Series) -> Result<Series> {
    require_two_rows(series, "endpoint normalisation")?;
    let last = series.rows() - 1;
    let offsets: Vec<f64> = (0..series.channels())
        .map(|c| (series.get(0, c) + series.get(last, c)) / 2.0)
        .collect();
    let mut out = series.clone();
    for r in 0..series.rows() {
        for (c, off) in offsets.iter().enumerate() {
            out.set(r, c, series.get(r, c) - off);
        }
    }
    Ok(out)
}

/// Linear interpolation onto `target` points spanning the input exactly:
/// output k samples the input at `k·(N-1)/(target-1)`.
pub fn resample_to(series: &Series, target: usize) -> Result<Series> {
    require_two_rows(series, "resampling")?;
    if target < 2 {
        return Err(Error::Length(format!("resample target {target} < 2")));
    }
    let n = series.rows();
    if n == target {
        return Ok(series.clone());
    }
    let channels = series.channels();
    let scale = (n - 1) as f64;
    let denom = (target - 1) as f64;
    let mut out = Series::zeros(target, channels);
    for k in 0..target {
        let pos = k as f64 * scale / denom;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        for c in 0..channels {
            let v = if i >= n - 1 {
                series.get(n - 1, c)
            } else if frac == 0.0 {
                series.get(i, c)
            } else {
                let a = series.get(i, c);
                a + frac * (series.get(i + 1, c) - a)
            };
            out.set(k, c, v);
        }
    }
    Ok(out)
}

/// `resample_to` preceded, when downsampling, by a first-order low-pass
/// whose cutoff sits at the Nyquist frequency of the output grid.
pub fn resample_antialiased(series: &Series, target: usize) -> Result<Series> {
    require_two_rows(series, "resampling")?;
    if target < series.rows() {
        let ratio = target as f64 / series.rows() as f64;
        let lowpass = butterworth_lowpass(ratio / 2.0, 1.0)?;
        resample_to(&lowpass.apply(series), target)
    } else {
        resample_to(series, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalises_to_zero() {
        let s = Series::new(5, 1, vec![3.5; 5]).unwrap();
        assert!(endpoint_normalize(&s).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn three_point_ramp() {
        let s = Series::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(endpoint_normalize(&s).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalise_matches_loop_oracle() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let data: Vec<f64> = (0..200).map(|_| next()).collect();
        let s = Series::new(50, 4, data.clone()).unwrap();
        let out = endpoint_normalize(&s).unwrap();
        for c in 0..4 {
            let off = (data[c] + data[49 * 4 + c]) / 2.0;
            for r in 0..50 {
                assert_eq!(out.get(r, c), data[r * 4 + c] - off);
            }
        }
    }

    #[test]
    fn short_inputs_are_rejected() {
        let s = Series::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(endpoint_normalize(&s), Err(Error::Length(_))));
        assert!(matches!(resample_to(&s, 400), Err(Error::Length(_))));
    }

    #[test]
    fn resample_identity_on_target_length() {
        let data: Vec<f64> = (0..400).map(|i| (i as f64 * 0.1).sin()).collect();
        let s = Series::new(400, 1, data).unwrap();
        assert_eq!(resample_to(&s, 400).unwrap(), s);
    }

    #[test]
    fn resample_constant() {
        let s = Series::new(37, 2, vec![-2.25; 74]).unwrap();
        let out = resample_to(&s, 400).unwrap();
        assert_eq!(out.rows(), 400);
        assert!(out.data().iter().all(|v| *v == -2.25));
    }

    #[test]
    fn resample_ramp_closed_form() {
        let s = Series::new(100, 1, (0..100).map(|i| i as f64).collect()).unwrap();
        let out = resample_to(&s, 400).unwrap();
        for k in 0..400 {
            let expected = k as f64 * 99.0 / 399.0;
            assert!((out.get(k, 0) - expected).abs() < 1e-12, "k={k}");
        }
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(399, 0), 99.0);
    }

    #[test]
    fn antialiasing_only_when_downsampling() {
        let s = Series::new(100, 1, (0..100).map(|i| i as f64).collect()).unwrap();
        assert_eq!(resample_antialiased(&s, 400).unwrap(), resample_to(&s, 400).unwrap());
        let alt = Series::new(
            1000,
            1,
            (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let plain = resample_to(&alt, 400).unwrap();
        let smooth = resample_antialiased(&alt, 400).unwrap();
        let energy = |s: &Series| s.data()[10..].iter().map(|v| v * v).sum::<f64>();
        assert!(energy(&smooth) < energy(&plain));
    }
}
