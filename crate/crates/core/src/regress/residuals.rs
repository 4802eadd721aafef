use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::trait_table::{PftClass, N_PFT};

/// PFT with the largest abundance; ties go to the lowest code.
pub fn dominant_pft(abundance: &[f64; N_PFT]) -> PftClass {
    let mut best = 0;
    for i in 1..N_PFT {
        if abundance[i] > abundance[best] {
            best = i;
        }
    }
    PftClass::from_index(best).expect("index below N_PFT")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualGroup {
    pub pft: PftClass,
    pub n: usize,
    pub me: f64,
    pub rmse: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

/// Residual (prediction minus observation) summaries per dominant PFT, in
/// PFT code order; absent PFTs are omitted.
pub fn residuals_by_pft(predictions: &[f64], observations: &[f64], dominant: &[PftClass]) -> Result<Vec<ResidualGroup>> {
    if predictions.len() != observations.len() || predictions.len() != dominant.len() {
        return Err(Error::invalid(format!(
            "{} predictions, {} observations, {} PFT labels",
            predictions.len(),
            observations.len(),
            dominant.len()
        )));
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); N_PFT];
    for ((p, o), c) in predictions.iter().zip(observations).zip(dominant) {
        groups[c.index()].push(p - o);
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(i, g)| ResidualGroup {
            pft: PftClass::from_index(i).expect("index below N_PFT"),
            n: g.len(),
            me: g.iter().sum::<f64>() / g.len() as f64,
            rmse: (g.iter().map(|r| r * r).sum::<f64>() / g.len() as f64).sqrt(),
            q25: stats::quantile(&g, 0.25),
            q50: stats::quantile(&g, 0.5),
            q75: stats::quantile(&g, 0.75),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatBin {
    pub lat_min: f64,
    pub lat_max: f64,
    pub mean: f64,
    pub count: usize,
}

/// Mean of finite `values` in latitude bins `[k·bin, (k+1)·bin)`, for the
/// non-empty bins in ascending order.
pub fn latitudinal_profile(values: &[f64], lats: &[f64], bin_deg: f64) -> Result<Vec<LatBin>> {
    if !(bin_deg > 0.0 && bin_deg.is_finite()) {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_deg}")));
    }
    if values.len() != lats.len() {
        return Err(Error::invalid(format!("{} values for {} latitudes", values.len(), lats.len())));
    }
    let mut bins: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
    for (v, lat) in values.iter().zip(lats) {
        if v.is_finite() && lat.is_finite() {
            bins.entry((lat / bin_deg).floor() as i64).or_default().push(*v);
        }
    }
    Ok(bins
        .into_iter()
        .map(|(k, v)| LatBin {
            lat_min: k as f64 * bin_deg,
            lat_max: (k + 1) as f64 * bin_deg,
            mean: stats::mean(&v),
            count: v.len(),
        })
        .collect())
}
