//! First-order Butterworth low-pass via the bilinear transform.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::domain::Series;
use crate::error::{Error, Result};

/// Transfer function `(b0 + b1 z^-1) / (1 + a1 z^-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderIIR {
    pub b0: f64,
    pub b1: f64,
    pub a1: f64,
}

impl FirstOrderIIR {
    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1) / (1.0 + self.a1)
    }

    pub fn is_stable(&self) -> bool {
        self.a1.abs() < 1.0
    }

    /// |H(e^{jω})| at `freq_hz` for sampling rate `fs_hz`.
    pub fn magnitude(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / fs_hz;
        let (s, c) = w.sin_cos();
        // e^{-jω} = cos ω - j sin ω
        let num_re = self.b0 + self.b1 * c;
        let num_im = -self.b1 * s;
        let den_re = 1.0 + self.a1 * c;
        let den_im = -self.a1 * s;
        ((num_re * num_re + num_im * num_im) / (den_re * den_re + den_im * den_im)).sqrt()
    }

    /// Causal single pass of `y[n] = b0 x[n] + b1 x[n-1] - a1 y[n-1]` per channel,
    /// starting from zero state.
    pub fn apply(&self, series: &Series) -> Series {
        let mut out = Series::zeros(series.rows(), series.channels());
        for c in 0..series.channels() {
            let (mut x_prev, mut y_prev) = (0.0, 0.0);
            for r in 0..series.rows() {
                let x = series.get(r, c);
                let y = self.b0 * x + self.b1 * x_prev - self.a1 * y_prev;
                out.set(r, c, y);
                x_prev = x;
                y_prev = y;
            }
        }
        out
    }
}

/// Designs the prewarped first-order Butterworth low-pass with cutoff `fc_hz`.
pub fn butterworth_lowpass(fc_hz: f64, fs_hz: f64) -> Result<FirstOrderIIR> {
    if !(fc_hz > 0.0 && fc_hz < fs_hz / 2.0) {
        return Err(Error::Range(format!(
            "cutoff {fc_hz} Hz outside (0, {}) Hz",
            fs_hz / 2.0
        )));
    }
    let k = (PI * fc_hz / fs_hz).tan();
    let b = k / (1.0 + k);
    Ok(FirstOrderIIR {
        b0: b,
        b1: b,
        a1: (k - 1.0) / (1.0 + k),
    })
}

pub fn filter_forward(filter: &FirstOrderIIR, series: &Series) -> Series {
    filter.apply(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_at_five_hz() {
        let f = butterworth_lowpass(5.0, 100.0).unwrap();
        // K = tan(0.05π) = 0.15838444032453627
        let k: f64 = 0.158_384_440_324_536_27;
        assert!((f.b0 - k / (1.0 + k)).abs() < 1e-15);
        assert!((f.b0 - 0.136_729).abs() < 1e-6);
        assert!((f.a1 + 0.726_543).abs() < 1e-6);
        assert_eq!(f.b0, f.b1);
        assert!(f.is_stable());
    }

    #[test]
    fn dc_gain_and_cutoff() {
        let f = butterworth_lowpass(5.0, 100.0).unwrap();
        assert!((f.dc_gain() - 1.0).abs() < 1e-12);
        assert!((f.magnitude(5.0, 100.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(f.magnitude(50.0, 100.0) < 1e-12);
    }

    #[test]
    fn rejects_bad_cutoff() {
        assert!(butterworth_lowpass(0.0, 100.0).is_err());
        assert!(butterworth_lowpass(50.0, 100.0).is_err());
        assert!(butterworth_lowpass(-1.0, 100.0).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let f = butterworth_lowpass(5.0, 100.0).unwrap();
        let y = f.apply(&Series::zeros(50, 3));
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_converges_to_one() {
        let f = butterworth_lowpass(5.0, 100.0).unwrap();
        let step = Series::new(400, 1, vec![1.0; 400]).unwrap();
        let y = f.apply(&step);
        assert!((y.get(399, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impulse_matches_hand_recurrence() {
        let f = butterworth_lowpass(5.0, 100.0).unwrap();
        let mut x = vec![0.0; 5];
        x[0] = 1.0;
        let y = f.apply(&Series::new(5, 1, x).unwrap());
        // h0 = b0; h1 = b1 - a1 b0; h_n = -a1 h_{n-1} for n >= 2
        let h0 = f.b0;
        let h1 = f.b1 - f.a1 * h0;
        let h2 = -f.a1 * h1;
        let h3 = -f.a1 * h2;
        let h4 = -f.a1 * h3;
        for (n, h) in [h0, h1, h2, h3, h4].iter().enumerate() {
            assert!((y.get(n, 0) - h).abs() < 1e-15, "tap {n}");
        }
    }
}
