//! Arrhenius fits: ordinary least squares of ln k against 1/(k_B T), so the
//! slope is -E_a and the intercept ln A. Residuals are returned because a
//! curved residual pattern is the signal for non-Arrhenius kinetics.

use crate::error::{ItoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ArrheniusFit {
    pub ln_a: f64,
    pub e_a: f64,
    /// ln k_i minus the fitted line, in input order.
    pub residuals: Vec<f64>,
}

impl ArrheniusFit {
    /// Fitted rate at temperature `t`.
    pub fn rate(&self, t: f64, k_b: f64) -> f64 {
        (self.ln_a - self.e_a / (k_b * t)).exp()
    }
}

pub fn arrhenius_fit(temperatures: &[f64], rates: &[f64], k_b: f64) -> Result<ArrheniusFit> {
    let n = temperatures.len();
    if n != rates.len() {
        return Err(ItoError::ShapeMismatch {
            what: "arrhenius inputs".to_string(),
            expected: format!("{n} rates"),
            got: format!("{}", rates.len()),
        });
    }
    if n < 2 {
        return Err(ItoError::EmptyInput(
            "need at least two (T, k) points to fit a line".to_string(),
        ));
    }
    if !(k_b > 0.0 && k_b.is_finite()) {
        return Err(ItoError::InvalidInput(format!(
            "k_b must be positive and finite, got {k_b}"
        )));
    }
    for (i, (&t, &k)) in temperatures.iter().zip(rates).enumerate() {
        if !(t > 0.0 && t.is_finite()) || !(k > 0.0 && k.is_finite()) {
            return Err(ItoError::InvalidInput(format!(
                "point {i}: T = {t} and k = {k} must both be positive and finite"
            )));
        }
    }

    let xs: Vec<f64> = temperatures.iter().map(|t| 1.0 / (k_b * t)).collect();
    let ys: Vec<f64> = rates.iter().map(|k| k.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / n as f64;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += (xs[i] - x_mean) * (xs[i] - x_mean);
        sxy += (xs[i] - x_mean) * (ys[i] - y_mean);
    }
    if sxx <= 0.0 {
        return Err(ItoError::IllConditioned(
            "all temperatures coincide; the slope is undetermined".to_string(),
        ));
    }
    let slope = sxy / sxx;
    let ln_a = y_mean - slope * x_mean;
    let residuals = (0..n).map(|i| ys[i] - (ln_a + slope * xs[i])).collect();
    Ok(ArrheniusFit {
        ln_a,
        e_a: -slope,
        residuals,
    })
}
