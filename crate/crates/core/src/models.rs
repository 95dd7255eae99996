//! Count panels, expected counts and assembly of the per-year spatial and
//! the spatio-temporal latent models.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::inference::{BlockSpec, LatentBlock, LatentModel, Likelihood, ModelOptions};
use crate::structures::{
    bym2_effect_spec, icar_precision, interaction_precision, rw1_precision, scale_precision, InteractionType,
};

/// Area-by-year counts with populations and expected counts. Cell `(i, t)`
/// is stored at `t * n_areas + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountsPanel {
    pub area_ids: Vec<String>,
    pub years: Vec<i32>,
    /// `None` marks a missing (suppressed) count.
    pub counts: Vec<Option<u64>>,
    pub population: Vec<f64>,
    /// Empty until [`expected_counts`] fills it.
    pub expected: Vec<f64>,
    /// Cells whose count came from imputation.
    pub imputed: Vec<bool>,
    /// Set when counts below the disclosure threshold were withheld.
    pub suppressed: bool,
}

impl CountsPanel {
    pub fn new(area_ids: Vec<String>, years: Vec<i32>, counts: Vec<Option<u64>>, population: Vec<f64>) -> Result<Self> {
        let n = area_ids.len() * years.len();
        if area_ids.is_empty() || years.is_empty() {
            return Err(Error::input("panel needs at least one area and one year"));
        }
        if counts.len() != n || population.len() != n {
            return Err(Error::input(format!(
                "panel of {} areas and {} years needs {n} cells, got {} counts and {} populations",
                area_ids.len(),
                years.len(),
                counts.len(),
                population.len()
            )));
        }
        if let Some(c) = population.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::input(format!(
                "population of area {} in {} must be positive",
                area_ids[c % area_ids.len()],
                years[c / area_ids.len()]
            )));
        }
        Ok(Self {
            area_ids,
            years,
            counts,
            population,
            expected: Vec::new(),
            imputed: vec![false; n],
            suppressed: false,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn cell(&self, area: usize, year: usize) -> usize {
        year * self.n_areas() + area
    }

    pub fn count(&self, area: usize, year: usize) -> Option<u64> {
        self.counts[self.cell(area, year)]
    }

    pub fn has_expected(&self) -> bool {
        self.expected.len() == self.n_cells()
    }

    /// Count of a cell if it was reported rather than imputed.
    pub fn observed(&self, cell: usize) -> Option<u64> {
        if self.imputed[cell] {
            None
        } else {
            self.counts[cell]
        }
    }

    /// Fraction of cells without a reported count.
    pub fn missing_fraction(&self) -> f64 {
        let missing = (0..self.n_cells()).filter(|&c| self.observed(c).is_none()).count();
        missing as f64 / self.n_cells() as f64
    }

    /// Reported counts below 10 in a panel flagged as suppressed.
    pub fn suppression_warnings(&self) -> Vec<String> {
        if !self.suppressed {
            return Vec::new();
        }
        (0..self.n_cells())
            .filter(|&c| self.observed(c).is_some_and(|y| y < 10))
            .map(|c| {
                format!(
                    "area {} in {} reports {} below the suppression threshold",
                    self.area_ids[c % self.n_areas()],
                    self.years[c / self.n_areas()],
                    self.counts[c].unwrap()
                )
            })
            .collect()
    }

    /// Panel restricted to the given areas, in the given order.
    pub fn subset_areas(&self, areas: &[usize]) -> Self {
        let s = self.n_areas();
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..self.n_years())
                .flat_map(|t| areas.iter().map(move |&i| v[t * s + i]))
                .collect()
        };
        let cells: Vec<usize> = (0..self.n_years())
            .flat_map(|t| areas.iter().map(move |&i| t * s + i))
            .collect();
        Self {
            area_ids: areas.iter().map(|&i| self.area_ids[i].clone()).collect(),
            years: self.years.clone(),
            counts: cells.iter().map(|&c| self.counts[c]).collect(),
            population: pick(&self.population),
            expected: if self.has_expected() { pick(&self.expected) } else { Vec::new() },
            imputed: cells.iter().map(|&c| self.imputed[c]).collect(),
            suppressed: self.suppressed,
        }
    }
}

/// Reference rate used for expected counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectedMode {
    /// One rate per year.
    PerYear,
    /// One rate over the whole period.
    Global,
}

impl fmt::Display for ExpectedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpectedMode::PerYear => "per_year",
            ExpectedMode::Global => "global",
        })
    }
}

/// Fills expected counts `N * m` where `m` is the rate over reported cells
/// (imputed and missing cells are ignored).
pub fn expected_counts(panel: &CountsPanel, mode: ExpectedMode) -> Result<CountsPanel> {
    let s = panel.n_areas();
    let rate_over = |cells: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let (mut y, mut n) = (0.0, 0.0);
        for c in cells {
            if let Some(v) = panel.observed(c) {
                y += v as f64;
                n += panel.population[c];
            }
        }
        (y > 0.0).then(|| y / n)
    };
    let mut out = panel.clone();
    out.expected = vec![0.0; panel.n_cells()];
    match mode {
        ExpectedMode::PerYear => {
            for t in 0..panel.n_years() {
                let m = rate_over(&mut (t * s..(t + 1) * s)).ok_or_else(|| {
                    Error::input(format!("no reported deaths in {}; the yearly rate is undefined", panel.years[t]))
                })?;
                for c in t * s..(t + 1) * s {
                    out.expected[c] = panel.population[c] * m;
                }
            }
        }
        ExpectedMode::Global => {
            let m = rate_over(&mut (0..panel.n_cells()))
                .ok_or_else(|| Error::input("no reported deaths; the overall rate is undefined"))?;
            for c in 0..panel.n_cells() {
                out.expected[c] = panel.population[c] * m;
            }
        }
    }
    Ok(out)
}

/// Spatial prior family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpatialPrior {
    Icar,
    Bym2,
}

impl SpatialPrior {
    pub const ALL: [SpatialPrior; 2] = [SpatialPrior::Icar, SpatialPrior::Bym2];
}

impl fmt::Display for SpatialPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialPrior::Icar => "ICAR",
            SpatialPrior::Bym2 => "BYM2",
        })
    }
}

impl FromStr for SpatialPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "icar" => Ok(SpatialPrior::Icar),
            "bym2" => Ok(SpatialPrior::Bym2),
            _ => Err(Error::input(format!("unknown spatial prior '{s}' (expected icar or bym2)"))),
        }
    }
}

/// Which latent entries hold each effect and which panel cell each model
/// cell stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub n_areas: usize,
    /// Panel year index of each modelled year.
    pub years: Vec<usize>,
    pub intercept: usize,
    /// Combined spatial effect (the first half of a BYM2 block).
    pub spatial: Range<usize>,
    pub temporal: Option<Range<usize>>,
    pub interaction: Option<Range<usize>>,
}

impl ModelLayout {
    /// Panel cell of model cell `c`.
    pub fn panel_cell(&self, c: usize) -> usize {
        let (i, k) = (c % self.n_areas, c / self.n_areas);
        self.years[k] * self.n_areas + i
    }
}

#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub model: LatentModel,
    pub layout: ModelLayout,
    pub warnings: Vec<String>,
}

/// Settings shared by the model builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub model: ModelOptions,
    pub intercept_precision: f64,
    pub scale_temporal: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            model: ModelOptions::default(),
            intercept_precision: 1e-5,
            scale_temporal: true,
        }
    }
}

fn spatial_block(prior: SpatialPrior, graph: &AreaGraph) -> Result<BlockSpec> {
    let isolated = graph.isolated();
    if prior == SpatialPrior::Icar && !isolated.is_empty() {
        return Err(Error::structure(format!(
            "area {} has no neighbours; the ICAR prior is improper on it (use BYM2)",
            graph.id(isolated[0])
        )));
    }
    let q = scale_precision(&icar_precision(graph)?)?;
    Ok(match prior {
        SpatialPrior::Icar => BlockSpec {
            size: q.dim(),
            block: LatentBlock::structured("spatial", q),
        },
        SpatialPrior::Bym2 => BlockSpec {
            size: 2 * q.dim(),
            block: LatentBlock::bym2("spatial", bym2_effect_spec(&q)?),
        },
    })
}

fn check_panel(panel: &CountsPanel, graph: &AreaGraph) -> Result<()> {
    if graph.ids() != panel.area_ids.as_slice() {
        return Err(Error::input("graph areas and panel areas differ in identity or order"));
    }
    if !panel.has_expected() {
        return Err(Error::input("expected counts have not been computed"));
    }
    Ok(())
}

/// One-year model with an intercept and a spatial effect.
pub fn build_spatial_model(
    panel: &CountsPanel,
    year: usize,
    prior: SpatialPrior,
    graph: &AreaGraph,
    options: &BuildOptions,
) -> Result<BuiltModel> {
    if year >= panel.n_years() {
        return Err(Error::input(format!("year index {year} outside a panel of {} years", panel.n_years())));
    }
    check_panel(panel, graph)?;
    let s = panel.n_areas();
    let spatial = spatial_block(prior, graph)?;
    let cells: Vec<usize> = (0..s).map(|i| panel.cell(i, year)).collect();
    let model = LatentModel::new(
        Likelihood::Poisson,
        cells.iter().map(|&c| panel.expected[c]).collect(),
        cells.iter().map(|&c| panel.counts[c].map(|y| y as f64)).collect(),
        (0..s).map(|i| vec![0, 1 + i]).collect(),
        vec![
            BlockSpec {
                block: LatentBlock::fixed_iid("intercept", options.intercept_precision),
                size: 1,
            },
            spatial,
        ],
        options.model,
    )?;
    Ok(BuiltModel {
        model,
        layout: ModelLayout {
            n_areas: s,
            years: vec![year],
            intercept: 0,
            spatial: 1..1 + s,
            temporal: None,
            interaction: None,
        },
        warnings: Vec::new(),
    })
}

/// Model with intercept, spatial, random-walk temporal and interaction
/// effects over every panel year.
pub fn build_st_model(
    panel: &CountsPanel,
    prior: SpatialPrior,
    interaction: InteractionType,
    graph: &AreaGraph,
    options: &BuildOptions,
) -> Result<BuiltModel> {
    check_panel(panel, graph)?;
    let (s, t) = (panel.n_areas(), panel.n_years());
    if t == 1 {
        let mut built = build_spatial_model(panel, 0, prior, graph, options)?;
        built
            .warnings
            .push("a single year was supplied; fitted the spatial model without temporal terms".into());
        return Ok(built);
    }
    let spatial = spatial_block(prior, graph)?;
    let q_spatial = scale_precision(&icar_precision(graph)?)?;
    let mut q_temporal = rw1_precision(t)?;
    if options.scale_temporal {
        q_temporal = scale_precision(&q_temporal)?;
    }
    let q_int = interaction_precision(interaction, &q_spatial, &q_temporal)?;

    let off_s = 1;
    let off_t = off_s + spatial.size;
    let off_d = off_t + t;
    let incidence: Vec<Vec<usize>> = (0..s * t)
        .map(|c| {
            let (i, k) = (c % s, c / s);
            vec![0, off_s + i, off_t + k, off_d + c]
        })
        .collect();
    let model = LatentModel::new(
        Likelihood::Poisson,
        panel.expected.clone(),
        panel.counts.iter().map(|y| y.map(|v| v as f64)).collect(),
        incidence,
        vec![
            BlockSpec {
                block: LatentBlock::fixed_iid("intercept", options.intercept_precision),
                size: 1,
            },
            spatial,
            BlockSpec {
                block: LatentBlock::structured("temporal", q_temporal),
                size: t,
            },
            BlockSpec {
                block: LatentBlock::structured("interaction", q_int),
                size: s * t,
            },
        ],
        options.model,
    )?;
    Ok(BuiltModel {
        model,
        layout: ModelLayout {
            n_areas: s,
            years: (0..t).collect(),
            intercept: 0,
            spatial: off_s..off_s + s,
            temporal: Some(off_t..off_t + t),
            interaction: Some(off_d..off_d + s * t),
        },
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_graph;

    fn path3() -> AreaGraph {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let e = vec![("a".into(), "b".into()), ("b".into(), "c".into())];
        load_graph(&e, &ids).unwrap()
    }

    fn panel(s: usize, t: usize) -> CountsPanel {
        let ids = (0..s).map(|i| ["a", "b", "c", "d"][i].to_string()).collect();
        let counts = (0..s * t).map(|c| Some(10 + c as u64)).collect();
        CountsPanel::new(ids, (0..t as i32).map(|y| 2000 + y).collect(), counts, vec![1000.0; s * t]).unwrap()
    }

    #[test]
    fn per_year_rates() {
        let p = CountsPanel::new(
            vec!["a".into(), "b".into()],
            vec![2000],
            vec![Some(10), Some(20)],
            vec![1000.0, 1000.0],
        )
        .unwrap();
        let e = expected_counts(&p, ExpectedMode::PerYear).unwrap();
        assert!((e.expected[0] - 15.0).abs() < 1e-12 && (e.expected[1] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn empty_year_is_rejected() {
        let p = CountsPanel::new(vec!["a".into()], vec![2000, 2001], vec![Some(3), None], vec![10.0, 10.0]).unwrap();
        assert!(matches!(expected_counts(&p, ExpectedMode::PerYear), Err(Error::Input(_))));
        assert!(expected_counts(&p, ExpectedMode::Global).is_ok());
    }

    #[test]
    fn global_rate_ignores_missing() {
        let p = CountsPanel::new(
            vec!["a".into(), "b".into()],
            vec![1, 2],
            vec![Some(10), Some(20), None, Some(30)],
            vec![1000.0; 4],
        )
        .unwrap();
        let e = expected_counts(&p, ExpectedMode::Global).unwrap();
        assert!(e.expected.iter().all(|&v| (v - 20.0).abs() < 1e-12));
    }

    #[test]
    fn block_sizes() {
        let p = expected_counts(&panel(3, 2), ExpectedMode::PerYear).unwrap();
        let g = path3();
        let o = BuildOptions::default();
        let icar = build_spatial_model(&p, 0, SpatialPrior::Icar, &g, &o).unwrap();
        assert_eq!(icar.model.n_latent, 4);
        let bym2 = build_spatial_model(&p, 0, SpatialPrior::Bym2, &g, &o).unwrap();
        assert_eq!(bym2.model.n_latent, 7);
        assert!(build_spatial_model(&p, 2, SpatialPrior::Icar, &g, &o).is_err());
    }

    #[test]
    fn st_dimensions_and_constraints() {
        let p = expected_counts(&panel(3, 3), ExpectedMode::Global).unwrap();
        let g = path3();
        let o = BuildOptions::default();
        let m = build_st_model(&p, SpatialPrior::Icar, InteractionType::I, &g, &o).unwrap();
        assert_eq!(m.model.n_latent, 16);
        let m2 = build_st_model(&p, SpatialPrior::Icar, InteractionType::II, &g, &o).unwrap();
        // spatial + temporal + one per area
        assert_eq!(m2.model.n_constraints(), 2 + 3);
    }

    #[test]
    fn single_year_degrades() {
        let p = expected_counts(&panel(3, 1), ExpectedMode::Global).unwrap();
        let m = build_st_model(&p, SpatialPrior::Icar, InteractionType::IV, &path3(), &BuildOptions::default()).unwrap();
        assert_eq!(m.model.n_latent, 4);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn missing_cells_have_no_likelihood() {
        let mut p = panel(3, 1);
        p.counts[1] = None;
        let p = expected_counts(&p, ExpectedMode::PerYear).unwrap();
        let m = build_spatial_model(&p, 0, SpatialPrior::Icar, &path3(), &BuildOptions::default()).unwrap();
        assert_eq!(m.model.observations[1], None);
    }

    #[test]
    fn icar_rejects_isolated_area() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let g = load_graph(&[("a".into(), "b".into())], &ids).unwrap();
        let p = expected_counts(&panel(3, 1), ExpectedMode::PerYear).unwrap();
        let o = BuildOptions::default();
        assert!(matches!(
            build_spatial_model(&p, 0, SpatialPrior::Icar, &g, &o),
            Err(Error::Structure(_))
        ));
        assert!(build_spatial_model(&p, 0, SpatialPrior::Bym2, &g, &o).is_ok());
    }
}
