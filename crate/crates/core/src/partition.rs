//! Divide-and-conquer fitting over subdomains extended by border neighbours.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::criteria::{criteria, Criteria};
use crate::error::{Error, Result};
use crate::graph::{AreaGraph, AreaMeta};
use crate::inference::{fit, DrawMatrix, FitResult, SummaryOptions};
use crate::models::{build_st_model, BuildOptions, CountsPanel, SpatialPrior};
use crate::structures::InteractionType;

/// One subdomain; area sets hold graph indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Subdomain {
    pub name: String,
    pub owned: BTreeSet<usize>,
    pub extended: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Sorted by name.
    pub subdomains: Vec<Subdomain>,
    pub k: usize,
    pub merge_map: BTreeMap<String, String>,
}

impl PartitionPlan {
    /// A single subdomain covering the whole map.
    pub fn whole(graph: &AreaGraph) -> Self {
        let all: BTreeSet<usize> = (0..graph.n_areas()).collect();
        Self {
            subdomains: vec![Subdomain {
                name: "all".into(),
                owned: all.clone(),
                extended: all,
            }],
            k: 0,
            merge_map: BTreeMap::new(),
        }
    }

    /// Owning subdomain of each area.
    pub fn owners(&self, n_areas: usize) -> Vec<usize> {
        let mut owner = vec![usize::MAX; n_areas];
        for (s, sub) in self.subdomains.iter().enumerate() {
            for &i in &sub.owned {
                owner[i] = s;
            }
        }
        owner
    }
}

fn resolve_label<'a>(label: &'a str, merge_map: &'a BTreeMap<String, String>) -> Result<&'a str> {
    let mut cur = label;
    for _ in 0..=merge_map.len() {
        match merge_map.get(cur) {
            Some(next) if next != cur => cur = next,
            _ => return Ok(cur),
        }
    }
    Err(Error::Plan(format!("merge map contains a cycle through '{label}'")))
}

/// Groups areas by label after applying `merge_map` (followed transitively)
/// and extends each group by its `k`-order neighbours.
pub fn make_plan(
    labels: &[String],
    graph: &AreaGraph,
    merge_map: &BTreeMap<String, String>,
    k: usize,
) -> Result<PartitionPlan> {
    if labels.len() != graph.n_areas() {
        return Err(Error::Plan(format!(
            "{} subdomain labels for {} areas",
            labels.len(),
            graph.n_areas()
        )));
    }
    let present: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    for (from, to) in merge_map {
        if !present.contains(to.as_str()) && !merge_map.contains_key(to) {
            return Err(Error::Plan(format!("merge map target '{to}' (from '{from}') is not a label")));
        }
        if !present.contains(from.as_str()) {
            return Err(Error::Plan(format!("merge map source '{from}' labels no area")));
        }
    }
    let mut groups: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(resolve_label(l, merge_map)?.to_string()).or_default().insert(i);
    }
    if groups.is_empty() {
        return Err(Error::Plan("the plan has no areas".into()));
    }
    let subdomains = groups
        .into_iter()
        .map(|(name, owned)| Subdomain {
            extended: graph.k_order_closure(&owned, k),
            name,
            owned,
        })
        .collect();
    Ok(PartitionPlan {
        subdomains,
        k,
        merge_map: merge_map.clone(),
    })
}

/// [`make_plan`] with the state code of each area as its label.
pub fn plan_from_meta(
    meta: &[AreaMeta],
    graph: &AreaGraph,
    merge_map: &BTreeMap<String, String>,
    k: usize,
) -> Result<PartitionPlan> {
    let by_id: BTreeMap<&str, &str> = meta.iter().map(|m| (m.area_id.as_str(), m.state_code.as_str())).collect();
    let labels = graph
        .ids()
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Plan(format!("area '{id}' has no subdomain label")))
        })
        .collect::<Result<Vec<_>>>()?;
    make_plan(&labels, graph, merge_map, k)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartitionOptions {
    pub build: BuildOptions,
    pub summary: SummaryOptions,
    /// Size of a dedicated worker pool; 0 runs on the current pool.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct SubdomainFit {
    pub name: String,
    /// Graph indices of the modelled areas, ascending.
    pub areas: Vec<usize>,
    pub n_owned: usize,
    pub fit: FitResult,
    /// Local model cell and panel cell of every owned cell.
    pub owned_cells: Vec<(usize, usize)>,
    /// `-2` times the log-likelihood of the owned observed cells at the
    /// posterior mean of the linear predictor.
    pub owned_deviance_at_mean: f64,
    pub warnings: Vec<String>,
}

impl SubdomainFit {
    /// Posterior mean of a reported hyperparameter by name.
    pub fn hyper_mean(&self, name: &str) -> Option<f64> {
        self.fit.hyper.iter().find(|h| h.name == name).map(|h| h.mean)
    }
}

/// Per-cell estimates taken from the owning subdomain.
#[derive(Debug, Clone)]
pub struct PartitionedFit {
    pub prior: SpatialPrior,
    pub interaction: InteractionType,
    pub n_areas: usize,
    pub years: Vec<i32>,
    pub subdomains: Vec<SubdomainFit>,
    /// Subdomain and local model cell for each panel cell.
    pub source: Vec<(usize, usize)>,
}

impl PartitionedFit {
    pub fn n_cells(&self) -> usize {
        self.source.len()
    }

    pub fn quantile_levels(&self) -> &[f64] {
        &self.subdomains[0].fit.quantile_levels
    }

    fn at(&self, cell: usize) -> (&FitResult, usize) {
        let (s, local) = self.source[cell];
        (&self.subdomains[s].fit, local)
    }

    pub fn risk_quantiles(&self, cell: usize) -> &[f64] {
        let (f, l) = self.at(cell);
        &f.risk_quantiles[l]
    }

    pub fn eta_mean(&self, cell: usize) -> f64 {
        let (f, l) = self.at(cell);
        f.eta_mean[l]
    }

    pub fn median_risk(&self, cell: usize) -> f64 {
        let (f, l) = self.at(cell);
        f.median_risk(l)
    }

    pub fn exceedance_probability(&self, cell: usize, threshold: f64) -> f64 {
        let (f, l) = self.at(cell);
        f.exceedance_probability(l, threshold)
    }

    /// Name of the subdomain owning `area`.
    pub fn owner_name(&self, area: usize) -> &str {
        &self.subdomains[self.source[area].0].name
    }

    pub fn warnings(&self) -> Vec<String> {
        self.subdomains.iter().flat_map(|s| s.warnings.iter().cloned()).collect()
    }
}

fn fit_subdomain(
    panel: &CountsPanel,
    graph: &AreaGraph,
    sub: &Subdomain,
    prior: SpatialPrior,
    interaction: InteractionType,
    options: &PartitionOptions,
) -> Result<SubdomainFit> {
    let areas: Vec<usize> = sub.extended.iter().copied().collect();
    let sub_panel = panel.subset_areas(&areas);
    let sub_graph = graph.induced(&sub.extended);
    let built = build_st_model(&sub_panel, prior, interaction, &sub_graph, &options.build)?;
    let fit = fit(&built.model, &options.summary)?;
    let s_local = areas.len();
    let s_global = panel.n_areas();
    let mut owned_cells = Vec::new();
    let mut dev = 0.0;
    for c in 0..built.model.n_cells() {
        let pc = built.layout.panel_cell(c);
        let (li, t) = (pc % s_local, pc / s_local);
        let gi = areas[li];
        if sub.owned.contains(&gi) {
            owned_cells.push((c, t * s_global + gi));
            if let Some(y) = built.model.observations[c] {
                dev -= 2.0 * built.model.likelihood.log_density(y, built.model.offsets[c], fit.eta_mean[c]);
            }
        }
    }
    let mut warnings = built.warnings;
    warnings.extend(fit.warnings.iter().cloned());
    Ok(SubdomainFit {
        name: sub.name.clone(),
        n_owned: sub.owned.len(),
        areas,
        fit,
        owned_cells,
        owned_deviance_at_mean: dev,
        warnings: warnings.into_iter().map(|w| format!("subdomain {}: {w}", sub.name)).collect(),
    })
}

/// Fits every subdomain on its extended area set and resolves each cell to
/// its owning subdomain. Requires expected counts on `panel`.
pub fn fit_partitioned(
    panel: &CountsPanel,
    graph: &AreaGraph,
    plan: &PartitionPlan,
    prior: SpatialPrior,
    interaction: InteractionType,
    options: &PartitionOptions,
) -> Result<PartitionedFit> {
    if graph.ids() != panel.area_ids.as_slice() {
        return Err(Error::input("graph areas and panel areas differ in identity or order"));
    }
    let owners = plan.owners(graph.n_areas());
    if let Some(i) = owners.iter().position(|&o| o == usize::MAX) {
        return Err(Error::Plan(format!("area '{}' is not owned by any subdomain", graph.id(i))));
    }
    let run = || {
        plan.subdomains
            .par_iter()
            .map(|sub| {
                fit_subdomain(panel, graph, sub, prior, interaction, options).map_err(|e| Error::Partition {
                    subdomain: sub.name.clone(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<SubdomainFit>>>()
    };
    let subdomains = if options.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::Internal(format!("worker pool: {e}")))?
            .install(run)?
    };
    let mut source = vec![(usize::MAX, 0); panel.n_cells()];
    for (s, sub) in subdomains.iter().enumerate() {
        for &(local, pc) in &sub.owned_cells {
            source[pc] = (s, local);
        }
    }
    Ok(PartitionedFit {
        prior,
        interaction,
        n_areas: panel.n_areas(),
        years: panel.years.clone(),
        subdomains,
        source,
    })
}

/// Criteria over owned cells only, pooled across subdomains.
pub fn merged_criteria(result: &PartitionedFit) -> Result<Criteria> {
    let parts: Vec<DrawMatrix> = result
        .subdomains
        .iter()
        .map(|s| {
            let owned: BTreeMap<usize, usize> = s.owned_cells.iter().copied().collect();
            s.fit.loglik_draws.select(|c| owned.get(&c).copied())
        })
        .collect();
    let draws = DrawMatrix::hstack(&parts)?;
    let dev: f64 = result.subdomains.iter().map(|s| s.owned_deviance_at_mean).sum();
    criteria(&draws, dev)
}

pub const REPORT_HEADER: [&str; 6] = ["subdomain", "n_owned", "n_extended", "sd_spatial", "sd_temporal", "sd_interaction"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subdomain: String,
    pub n_owned: usize,
    pub n_extended: usize,
    pub sd_spatial: Option<f64>,
    pub sd_temporal: Option<f64>,
    pub sd_interaction: Option<f64>,
}

/// One row per subdomain with posterior mean standard deviations.
pub fn partition_report(result: &PartitionedFit) -> Vec<ReportRow> {
    result
        .subdomains
        .iter()
        .map(|s| ReportRow {
            subdomain: s.name.clone(),
            n_owned: s.n_owned,
            n_extended: s.areas.len(),
            sd_spatial: s.hyper_mean("sd_spatial"),
            sd_temporal: s.hyper_mean("sd_temporal"),
            sd_interaction: s.hyper_mean("sd_interaction"),
        })
        .collect()
}
