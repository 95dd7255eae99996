//! Replacement of suppressed counts by per-year spatial model predictions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::inference::{fit, SummaryOptions};
use crate::models::{build_spatial_model, expected_counts, BuildOptions, CountsPanel, ExpectedMode, SpatialPrior};

/// Largest value an imputed count may take when truncation is on.
pub const TRUNCATION_LIMIT: u64 = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ImputeOptions {
    pub prior: SpatialPrior,
    pub truncate: bool,
    pub build: BuildOptions,
    pub summary: SummaryOptions,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            prior: SpatialPrior::Bym2,
            truncate: true,
            build: BuildOptions::default(),
            summary: SummaryOptions {
                n_draws: 0,
                ..SummaryOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedCell {
    pub area_id: String,
    pub year: i32,
    pub expected: f64,
    pub median_risk: f64,
    pub raw_pred: u64,
    pub final_count: u64,
}

impl ImputedCell {
    pub fn truncated(&self) -> bool {
        self.final_count != self.raw_pred
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationReport {
    pub cells: Vec<ImputedCell>,
    /// Share of raw predictions above the truncation limit.
    pub exceed_fraction: f64,
    pub warnings: Vec<String>,
}

pub const REPORT_HEADER: [&str; 7] = [
    "area_id",
    "year",
    "expected",
    "median_risk",
    "raw_pred",
    "final_count",
    "truncated",
];

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> u64 {
    x.round().max(0.0) as u64
}

/// Prediction for one cell from its expected count and median risk.
pub fn predict_count(expected: f64, median_risk: f64, truncate: bool) -> (u64, u64) {
    let raw = round_half_away(expected * median_risk);
    let fin = if truncate { raw.min(TRUNCATION_LIMIT) } else { raw };
    (raw, fin)
}

/// Fits one spatial model per year with missing cells and fills those
/// cells with rounded predictions. Reported cells are left untouched.
pub fn impute_panel(
    panel: &CountsPanel,
    graph: &AreaGraph,
    options: &ImputeOptions,
) -> Result<(CountsPanel, ImputationReport)> {
    let with_e = expected_counts(panel, ExpectedMode::PerYear)?;
    let s = panel.n_areas();
    let years: Vec<usize> = (0..panel.n_years())
        .filter(|&t| (0..s).any(|i| panel.count(i, t).is_none()))
        .collect();
    let per_year: Vec<(Vec<ImputedCell>, Vec<String>)> = years
        .par_iter()
        .map(|&t| -> Result<_> {
            let wrap = |e: Error| e.in_stage(format!("imputation for {}", panel.years[t]));
            let built = build_spatial_model(&with_e, t, options.prior, graph, &options.build).map_err(wrap)?;
            let fitted = fit(&built.model, &options.summary).map_err(wrap)?;
            let mid = fitted
                .level_index(0.5)
                .ok_or_else(|| Error::input("quantile levels must include the median"))?;
            let mut cells = Vec::new();
            for i in 0..s {
                if panel.count(i, t).is_some() {
                    continue;
                }
                let c = panel.cell(i, t);
                let median_risk = fitted.risk_quantiles[i][mid];
                let (raw_pred, final_count) = predict_count(with_e.expected[c], median_risk, options.truncate);
                cells.push(ImputedCell {
                    area_id: panel.area_ids[i].clone(),
                    year: panel.years[t],
                    expected: with_e.expected[c],
                    median_risk,
                    raw_pred,
                    final_count,
                });
            }
            let warnings = fitted
                .warnings
                .iter()
                .map(|w| format!("imputation for {}: {w}", panel.years[t]))
                .collect();
            Ok((cells, warnings))
        })
        .collect::<Result<_>>()?;

    let mut out = panel.clone();
    let mut cells = Vec::new();
    let mut warnings = Vec::new();
    for ((year_cells, w), &t) in per_year.into_iter().zip(&years) {
        for cell in year_cells {
            let i = panel.area_ids.iter().position(|a| *a == cell.area_id).expect("panel area");
            let c = panel.cell(i, t);
            out.counts[c] = Some(cell.final_count);
            out.imputed[c] = true;
            cells.push(cell);
        }
        warnings.extend(w);
    }
    let exceed = cells.iter().filter(|c| c.raw_pred > TRUNCATION_LIMIT).count();
    let exceed_fraction = if cells.is_empty() { 0.0 } else { exceed as f64 / cells.len() as f64 };
    Ok((
        out,
        ImputationReport {
            cells,
            exceed_fraction,
            warnings,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_and_truncation() {
        assert_eq!(predict_count(5.0, 2.5, true), (13, 9));
        assert_eq!(predict_count(5.0, 2.5, false), (13, 13));
        assert_eq!(predict_count(3.2, 1.0, true), (3, 3));
        assert_eq!(predict_count(2.5, 1.0, true), (3, 3));
        assert_eq!(round_half_away(0.49), 0);
    }
}
