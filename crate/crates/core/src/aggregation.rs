//! Population-weighted trends and risk classification from fitted risks.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::models::CountsPanel;
use crate::partition::PartitionedFit;

/// Which populations weight the trend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendWeights {
    PerYear,
    /// Populations of one panel year index for every year.
    FixedYear(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendPoint {
    pub group: String,
    pub year: i32,
    /// `None` for a group with no member or zero total weight.
    pub weighted_risk: Option<f64>,
}

/// Population-weighted mean of the posterior median risks per group and
/// year. Areas with no group, or excluded by `include`, are skipped.
pub fn weighted_trend(
    fit: &PartitionedFit,
    panel: &CountsPanel,
    groups: &[Option<String>],
    weights: TrendWeights,
    include: impl Fn(usize) -> bool,
) -> Result<Vec<TrendPoint>> {
    let s = panel.n_areas();
    if groups.len() != s || fit.n_cells() != panel.n_cells() {
        return Err(Error::input("grouping, fit and panel disagree on the number of areas"));
    }
    if let TrendWeights::FixedYear(t) = weights {
        if t >= panel.n_years() {
            return Err(Error::input(format!("weight year index {t} outside the panel")));
        }
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        if let Some(g) = g {
            let entry = members.entry(g.as_str()).or_default();
            if include(i) {
                entry.push(i);
            }
        }
    }
    let mut out = Vec::new();
    for (g, areas) in &members {
        for t in 0..panel.n_years() {
            let wt = match weights {
                TrendWeights::PerYear => t,
                TrendWeights::FixedYear(r) => r,
            };
            let (mut num, mut den) = (0.0, 0.0);
            for &i in areas {
                let w = panel.population[panel.cell(i, wt)];
                num += w * fit.median_risk(panel.cell(i, t));
                den += w;
            }
            out.push(TrendPoint {
                group: g.to_string(),
                year: panel.years[t],
                weighted_risk: (den > 0.0).then(|| num / den),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RiskClass {
    High,
    Low,
    Uncertain,
}

impl fmt::Display for RiskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskClass::High => "High",
            RiskClass::Low => "Low",
            RiskClass::Uncertain => "Uncertain",
        })
    }
}

/// High when the lower interval bound exceeds 1, Low when the upper bound
/// is below 1.
pub fn classify_interval(lo: f64, hi: f64) -> RiskClass {
    if lo > 1.0 {
        RiskClass::High
    } else if hi < 1.0 {
        RiskClass::Low
    } else {
        RiskClass::Uncertain
    }
}

/// Class of every area in panel year index `year`, from the outermost
/// quantile levels of the fit.
pub fn risk_classification(fit: &PartitionedFit, year: usize) -> Result<Vec<RiskClass>> {
    if year >= fit.years.len() {
        return Err(Error::input(format!("year index {year} outside the fit")));
    }
    let levels = fit.quantile_levels();
    let lo = levels.iter().position(|&l| (l - 0.025).abs() < 1e-12);
    let hi = levels.iter().position(|&l| (l - 0.975).abs() < 1e-12);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::input("classification needs the 0.025 and 0.975 quantile levels"));
    };
    Ok((0..fit.n_areas)
        .map(|i| {
            let q = fit.risk_quantiles(year * fit.n_areas + i);
            classify_interval(q[lo], q[hi])
        })
        .collect())
}

/// Whether `P(r > threshold) >= prob` for every cell.
pub fn exceedance_flag(fit: &PartitionedFit, threshold: f64, prob: f64) -> Vec<bool> {
    (0..fit.n_cells())
        .map(|c| fit.exceedance_probability(c, threshold) >= prob)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_classes() {
        assert_eq!(classify_interval(1.05, 1.30), RiskClass::High);
        assert_eq!(classify_interval(0.80, 0.95), RiskClass::Low);
        assert_eq!(classify_interval(0.95, 1.05), RiskClass::Uncertain);
    }
}
