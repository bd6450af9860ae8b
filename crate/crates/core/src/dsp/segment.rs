//! Gesture onset/offset detection from the slope of the pressure channels.

use serde::{Deserialize, Serialize};

use crate::domain::Series;
use crate::error::{Error, Result};

/// A detected activity interval, in milliseconds from the first sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySegment {
    pub start_ms: i64,
    pub end_ms: i64,
}

/// Central-difference gradient per channel, in units per second.
/// The first and last samples use one-sided differences.
pub fn gradient(series: &Series, rate_hz: f64) -> Series {
    let n = series.rows();
    let mut out = Series::zeros(n, series.channels());
    if n < 2 {
        return out;
    }
    for c in 0..series.channels() {
        for r in 0..n {
            let g = if r == 0 {
                series.get(1, c) - series.get(0, c)
            } else if r == n - 1 {
                series.get(n - 1, c) - series.get(n - 2, c)
            } else {
                (series.get(r + 1, c) - series.get(r - 1, c)) / 2.0
            };
            out.set(r, c, g * rate_hz);
        }
    }
    out
}

/// Opens a segment when the steepest channel's |gradient| reaches `slope_threshold`
/// and closes it once the gradient has stayed below threshold for `min_duration_ms`.
/// Segments shorter than `min_duration_ms` are dropped.
pub fn detect_activity(
    fsr: &Series,
    rate_hz: f64,
    slope_threshold: f64,
    min_duration_ms: f64,
) -> Result<Vec<ActivitySegment>> {
    if !(slope_threshold > 0.0) {
        return Err(Error::Range(format!("slope threshold must be > 0, got {slope_threshold}")));
    }
    if !(rate_hz > 0.0) || min_duration_ms < 0.0 {
        return Err(Error::Range("rate must be > 0 and min duration >= 0".into()));
    }
    let grad = gradient(fsr, rate_hz);
    let active: Vec<bool> = (0..grad.rows())
        .map(|r| grad.row(r).iter().any(|g| g.abs() >= slope_threshold))
        .collect();
    let hold = ((min_duration_ms * rate_hz / 1000.0).ceil() as usize).max(1);
    let to_ms = |idx: usize| (idx as f64 * 1000.0 / rate_hz).round() as i64;

    let mut segments = Vec::new();
    let mut emit = |open: usize, last: usize| {
        let seg = ActivitySegment {
            start_ms: to_ms(open),
            end_ms: to_ms(last),
        };
        if (seg.end_ms - seg.start_ms) as f64 >= min_duration_ms {
            segments.push(seg);
        }
    };
    let mut open: Option<(usize, usize)> = None;
    for (n, &on) in active.iter().enumerate() {
        open = match (open, on) {
            (None, true) => Some((n, n)),
            (None, false) => None,
            (Some((start, _)), true) => Some((start, n)),
            (Some((start, last)), false) => {
                if n - last >= hold {
                    emit(start, last);
                    None
                } else {
                    Some((start, last))
                }
            }
        };
    }
    if let Some((start, last)) = open {
        emit(start, last);
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(values: Vec<f64>) -> Series {
        let rows = values.len();
        let data = values.iter().flat_map(|v| [*v, 0.0]).collect();
        Series::new(rows, 2, data).unwrap()
    }

    #[test]
    fn flat_stream_has_no_segments() {
        let s = stream(vec![0.7; 500]);
        assert!(detect_activity(&s, 100.0, 1.0, 100.0).unwrap().is_empty());
    }

    #[test]
    fn ramp_is_one_segment() {
        // slope 2·thr per second for 500 ms starting at sample 100
        let thr = 3.0;
        let slope = 2.0 * thr;
        let values: Vec<f64> = (0..400)
            .map(|n| {
                let t = (n as f64 - 100.0).clamp(0.0, 50.0) / 100.0;
                slope * t
            })
            .collect();
        let segs = detect_activity(&stream(values), 100.0, thr, 100.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert!((segs[0].start_ms - 1000).abs() <= 10);
        assert!((segs[0].end_ms - 1500).abs() <= 10);
    }

    #[test]
    fn short_blip_is_dropped() {
        // 50 ms triangle wobble well above threshold
        let mut values = vec![0.0; 300];
        for (i, v) in values.iter_mut().enumerate().skip(100).take(5) {
            *v = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let segs = detect_activity(&stream(values), 100.0, 1.0, 100.0).unwrap();
        assert!(segs.is_empty(), "{segs:?}");
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(matches!(
            detect_activity(&stream(vec![0.0; 10]), 100.0, 0.0, 100.0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn steepest_channel_triggers() {
        let rows: Vec<[f64; 2]> = (0..300)
            .map(|n| [0.0, if (100..200).contains(&n) { (n - 100) as f64 * 0.1 } else if n >= 200 { 10.0 } else { 0.0 }])
            .collect();
        let s = Series::from_rows(2, &rows).unwrap();
        let segs = detect_activity(&s, 100.0, 5.0, 100.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert!((segs[0].start_ms - 1000).abs() <= 10 && (segs[0].end_ms - 2000).abs() <= 10);
    }
}
