//! Small descriptive-statistics helpers shared across modules.
//!
//! Standard deviations are population (divide-by-n) throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    // shifted by the first value so constant inputs are reproduced exactly
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (two-pass).
pub fn pop_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Median of a non-empty sample; the mean of the two middle values for even counts.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile (Hyndman-Fan type 7) of a non-empty sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Pearson correlation. Fails with [`Error::ZeroVariance`] when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length vectors of length >= 2"));
    }
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(Error::ZeroVariance("first vector"));
    }
    if sbb == 0.0 {
        return Err(Error::ZeroVariance("second vector"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Bias, accuracy and goodness-of-fit of a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean error, mean(pred - obs).
    pub me: f64,
    pub rmse: f64,
    /// Pearson correlation; `None` when either vector has zero variance.
    pub r: Option<f64>,
    pub n: usize,
}

/// ME, RMSE and Pearson R of `predicted` against `observed`.
pub fn compute_metrics(predicted: &[f64], observed: &[f64]) -> Result<Metrics> {
    if predicted.len() != observed.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions vs {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(Error::InsufficientData("metrics need at least 2 pairs".into()));
    }
    if predicted.iter().chain(observed).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    let n = predicted.len() as f64;
    let me = predicted.iter().zip(observed).map(|(p, o)| p - o).sum::<f64>() / n;
    let mse = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / n;
    let r = match pearson(predicted, observed) {
        Ok(r) => Some(r),
        Err(Error::ZeroVariance(_)) => None,
        Err(e) => return Err(e),
    };
    // sqrt(mean(d^2)) >= |mean(d)| holds exactly; guard the last ulp.
    let rmse = mse.sqrt().max(me.abs());
    Ok(Metrics {
        me,
        rmse,
        r,
        n: predicted.len(),
    })
}
