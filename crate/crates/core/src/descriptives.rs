//! Standardized mortality ratios and their dispersion.

use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::models::CountsPanel;

/// Ratio, Poisson plug-in variance and coefficient of variation of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub smr: f64,
    pub var: f64,
    /// `None` when the count is zero.
    pub cv: Option<f64>,
}

pub fn cell_stats(y: u64, e: f64) -> CellStats {
    let y = y as f64;
    let smr = y / e;
    let var = y / (e * e);
    CellStats {
        smr,
        var,
        cv: (y > 0.0).then(|| var.sqrt() / smr),
    }
}

fn require_expected(panel: &CountsPanel) -> Result<()> {
    if panel.has_expected() {
        Ok(())
    } else {
        Err(Error::input("expected counts have not been computed"))
    }
}

/// Per-cell statistics for cells that carry a count (`None` otherwise).
pub fn smr_cell_stats(panel: &CountsPanel) -> Result<Vec<Option<CellStats>>> {
    require_expected(panel)?;
    Ok((0..panel.n_cells())
        .map(|c| panel.counts[c].map(|y| cell_stats(y, panel.expected[c])))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaSmr {
    pub area_id: String,
    /// `None` when no cell of the area carries expected deaths.
    pub smr: Option<f64>,
    /// False when every year of the area was suppressed.
    pub displayable: bool,
}

/// Ratio of total observed (including imputed) to total expected deaths
/// over the period, per area.
pub fn smr_space(panel: &CountsPanel) -> Result<Vec<AreaSmr>> {
    require_expected(panel)?;
    Ok((0..panel.n_areas())
        .map(|i| {
            let (mut y, mut e) = (0.0, 0.0);
            let mut reported = false;
            for t in 0..panel.n_years() {
                let c = panel.cell(i, t);
                if let Some(v) = panel.counts[c] {
                    y += v as f64;
                    e += panel.expected[c];
                }
                reported |= panel.observed(c).is_some();
            }
            AreaSmr {
                area_id: panel.area_ids[i].clone(),
                smr: (e > 0.0).then(|| y / e),
                displayable: reported,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YearSmr {
    pub year: i32,
    pub smr: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

/// Quantile of the unit-rate Gamma(shape) distribution by bisection.
fn gamma_quantile(shape: f64, p: f64) -> f64 {
    let mut hi = shape.max(1.0);
    while gamma_lr(shape, hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_lr(shape, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Exact 95% interval for a Poisson mean given `y` events.
pub fn poisson_exact_interval(y: u64) -> (f64, f64) {
    let lo = if y == 0 { 0.0 } else { gamma_quantile(y as f64, 0.025) };
    (lo, gamma_quantile(y as f64 + 1.0, 0.975))
}

/// Ratio of total observed to total expected deaths per year, with an
/// exact Poisson interval on the numerator.
pub fn smr_time(panel: &CountsPanel) -> Result<Vec<YearSmr>> {
    require_expected(panel)?;
    Ok((0..panel.n_years())
        .map(|t| {
            let (mut y, mut e) = (0u64, 0.0);
            for i in 0..panel.n_areas() {
                let c = panel.cell(i, t);
                if let Some(v) = panel.counts[c] {
                    y += v;
                    e += panel.expected[c];
                }
            }
            if e > 0.0 {
                let (lo, hi) = poisson_exact_interval(y);
                YearSmr {
                    year: panel.years[t],
                    smr: Some(y as f64 / e),
                    lo: Some(lo / e),
                    hi: Some(hi / e),
                }
            } else {
                YearSmr {
                    year: panel.years[t],
                    smr: None,
                    lo: None,
                    hi: None,
                }
            }
        })
        .collect())
}

/// Sample quantile with linear interpolation between order statistics
/// (type 7). `sorted` must be ascending and nonempty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSummary {
    pub year: i32,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Values beyond 1.5 IQR from the quartiles, ascending.
    pub outliers: Vec<f64>,
}

/// Five-number summaries of the cell ratios per year over reported cells.
pub fn boxplot_export(panel: &CountsPanel) -> Result<Vec<BoxSummary>> {
    let stats = smr_cell_stats(panel)?;
    Ok((0..panel.n_years())
        .filter_map(|t| {
            let mut v: Vec<f64> = (0..panel.n_areas())
                .map(|i| panel.cell(i, t))
                .filter(|&c| panel.observed(c).is_some())
                .filter_map(|c| stats[c].map(|s| s.smr))
                .collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (q1, q3) = (quantile_type7(&v, 0.25), quantile_type7(&v, 0.75));
            let fence = 1.5 * (q3 - q1);
            Some(BoxSummary {
                year: panel.years[t],
                n: v.len(),
                min: v[0],
                q1,
                median: quantile_type7(&v, 0.5),
                q3,
                max: v[v.len() - 1],
                outliers: v.iter().copied().filter(|&x| x < q1 - fence || x > q3 + fence).collect(),
            })
        })
        .collect())
}
