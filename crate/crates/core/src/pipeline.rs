//! Configuration and orchestration of the impute, fit, compare, trends and
//! classify stages, with staged output writing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{exceedance_flag, risk_classification, weighted_trend, TrendWeights};
use crate::criteria::{delta_table, CriteriaRow, DELTA_HEADER};
use crate::descriptives::{boxplot_export, smr_space, smr_time};
use crate::error::{Error, Result};
use crate::graph::{load_graph, read_area_meta, read_edge_list, AreaGraph, AreaMeta};
use crate::imputation::{impute_panel, ImputeOptions, REPORT_HEADER};
use crate::inference::{ModelOptions, PrecisionPrior, SummaryOptions};
use crate::io::{counts_csv, finish, load_panel, opt, read_pairs, LABELS_HEADER, MERGE_MAP_HEADER};
use crate::models::{expected_counts, BuildOptions, CountsPanel, ExpectedMode, SpatialPrior};
use crate::partition::{fit_partitioned, make_plan, merged_criteria, partition_report, PartitionOptions, PartitionPlan, PartitionedFit};
use crate::structures::InteractionType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Impute,
    Describe,
    Fit,
    Compare,
    Trends,
    Classify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Impute => "impute",
            Stage::Describe => "describe",
            Stage::Fit => "fit",
            Stage::Compare => "compare",
            Stage::Trends => "trends",
            Stage::Classify => "classify",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "impute" => Ok(Stage::Impute),
            "describe" => Ok(Stage::Describe),
            "fit" => Ok(Stage::Fit),
            "compare" => Ok(Stage::Compare),
            "trends" => Ok(Stage::Trends),
            "classify" => Ok(Stage::Classify),
            _ => Err(Error::input(format!("unknown stage '{s}'"))),
        }
    }
}

/// Every setting that affects the numbers. Read from a flat `key = value`
/// file; command line flags override individual keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub counts: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub area_meta: Option<PathBuf>,
    pub partition_labels: Option<PathBuf>,
    pub merge_map: Option<PathBuf>,
    pub output: PathBuf,
    pub stages: Vec<Stage>,
    pub prior: String,
    pub interaction: String,
    pub k: usize,
    pub truncate: bool,
    pub imputation_prior: String,
    pub seed: u64,
    pub workers: usize,
    pub n_draws: usize,
    pub expected_mode: String,
    pub scale_temporal: bool,
    pub intercept_precision: f64,
    pub precision_prior_shape: f64,
    pub precision_prior_rate: f64,
    pub jitter: f64,
    /// Panel year reported by `classify`; the last year when absent.
    pub classify_year: Option<i32>,
    pub exceed_threshold: f64,
    pub exceed_prob: f64,
    /// Weight every trend year by this year's population when set.
    pub trend_weight_year: Option<i32>,
    /// Keep areas suppressed in every year in the trends.
    pub trends_include_suppressed: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelOptions::default();
        let build = BuildOptions::default();
        Self {
            counts: None,
            population: None,
            graph: None,
            area_meta: None,
            partition_labels: None,
            merge_map: None,
            output: PathBuf::from("out"),
            stages: vec![Stage::Impute, Stage::Describe, Stage::Fit, Stage::Trends],
            prior: "icar".into(),
            interaction: "2".into(),
            k: 1,
            truncate: true,
            imputation_prior: "bym2".into(),
            seed: 1,
            workers: 0,
            n_draws: SummaryOptions::default().n_draws,
            expected_mode: ExpectedMode::Global.to_string(),
            scale_temporal: build.scale_temporal,
            intercept_precision: build.intercept_precision,
            precision_prior_shape: model.precision_prior.shape,
            precision_prior_rate: model.precision_prior.rate,
            jitter: model.jitter,
            classify_year: None,
            exceed_threshold: 1.0,
            exceed_prob: 0.95,
            trend_weight_year: None,
            trends_include_suppressed: false,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::input(format!("config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn spatial_prior(&self) -> Result<SpatialPrior> {
        self.prior.parse()
    }

    pub fn interaction_type(&self) -> Result<InteractionType> {
        self.interaction.parse()
    }

    fn expected(&self) -> Result<ExpectedMode> {
        match self.expected_mode.as_str() {
            "global" => Ok(ExpectedMode::Global),
            "per_year" => Ok(ExpectedMode::PerYear),
            other => Err(Error::input(format!("unknown expected_mode '{other}' (global or per_year)"))),
        }
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions {
            model: ModelOptions {
                precision_prior: PrecisionPrior {
                    shape: self.precision_prior_shape,
                    rate: self.precision_prior_rate,
                },
                jitter: self.jitter,
            },
            intercept_precision: self.intercept_precision,
            scale_temporal: self.scale_temporal,
        }
    }

    fn summary_options(&self) -> SummaryOptions {
        SummaryOptions {
            n_draws: self.n_draws,
            seed: self.seed,
            ..SummaryOptions::default()
        }
    }

    fn required<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::input(format!("configuration key '{key}' is required")))
    }

    fn validate(&self) -> Result<()> {
        self.spatial_prior()?;
        self.interaction_type()?;
        self.imputation_prior.parse::<SpatialPrior>()?;
        self.expected()?;
        let positive = [
            ("intercept_precision", self.intercept_precision),
            ("precision_prior_shape", self.precision_prior_shape),
            ("precision_prior_rate", self.precision_prior_rate),
            ("exceed_threshold", self.exceed_threshold),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::input(format!("jitter must be non-negative, got {}", self.jitter)));
        }
        if !(0.0..=1.0).contains(&self.exceed_prob) {
            return Err(Error::input(format!("exceed_prob must lie in [0, 1], got {}", self.exceed_prob)));
        }
        let needs_draws = self.stages.iter().any(|s| matches!(s, Stage::Fit | Stage::Compare));
        if needs_draws && self.n_draws < 2 {
            return Err(Error::input("n_draws must be at least 2 for model criteria"));
        }
        Ok(())
    }
}

/// Record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub conventions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub missing_fraction: f64,
    pub imputation_exceed_fraction: Option<f64>,
    pub subdomain_sd_spatial: BTreeMap<String, Option<f64>>,
    pub warnings: Vec<String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn conventions(config: &PipelineConfig) -> BTreeMap<String, String> {
    let mut c = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        c.insert(k.to_string(), v);
    };
    put("imputation_rounding", "nearest integer, ties away from zero".into());
    put("imputation_truncation", if config.truncate { "min(count, 9)" } else { "none" }.into());
    put("imputation_model", format!("{} spatial model per year, posterior median risk", config.imputation_prior));
    put("imputed_cells", "treated as observed in later fits; excluded from expected-count rates".into());
    put("expected_counts", format!("{} rate over reported cells", config.expected_mode));
    put(
        "hyperprior",
        format!(
            "Gamma(shape {}, rate {}) on each precision; uniform on the BYM2 mixing proportion",
            config.precision_prior_shape, config.precision_prior_rate
        ),
    );
    put("structure_scaling", "geometric mean of constrained marginal variances equal to 1".into());
    put("ownership", "estimates and criteria from the subdomain owning each area".into());
    put("criteria_cells", "owned observed cells only".into());
    put("deviance_plug_in", "posterior mean of the linear predictor".into());
    put("p_waic", "sum of per-cell sample variances of the log-likelihood".into());
    put("smr_interval", "Poisson exact (gamma quantiles) on the yearly total".into());
    put("boxplot_quantiles", "linear interpolation between order statistics (type 7)".into());
    put("trend_weights", match config.trend_weight_year {
        Some(y) => format!("population of {y}, posterior median risks"),
        None => "population of each year, posterior median risks".into(),
    });
    put("mode_tolerance", "max Newton step below 1e-8, at most 50 iterations".into());
    put("hyper_search", "Nelder-Mead from 0, 500 evaluations, f range 1e-5 and x range 1e-2".into());
    put("integration_grid", "full product grid in standardized coordinates: 5 levels per axis up to 3 dimensions, 3 levels (0, +-1.5) above".into());
    put("marginal_variances", "Richardson extrapolation over the solver jitter".into());
    c
}

struct Outputs {
    dir: tempfile::TempDir,
    names: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.path().join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.names.push(name.to_string());
        Ok(())
    }

    /// Moves every staged file into `target`.
    fn commit(self, target: &Path) -> Result<()> {
        std::fs::create_dir_all(target).map_err(|e| Error::io(target.display().to_string(), e))?;
        for name in &self.names {
            let to = target.join(name);
            std::fs::rename(self.dir.path().join(name), &to).map_err(|e| Error::io(to.display().to_string(), e))?;
        }
        Ok(())
    }
}

fn timed<T>(times: &mut BTreeMap<String, f64>, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(format!("stage {stage}")))?;
    *times.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
    Ok(out)
}

fn year_index(panel: &CountsPanel, year: i32) -> Result<usize> {
    panel
        .years
        .iter()
        .position(|&y| y == year)
        .ok_or_else(|| Error::input(format!("year {year} is not in the panel")))
}

fn read_plan(config: &PipelineConfig, graph: &AreaGraph) -> Result<PartitionPlan> {
    let Some(path) = &config.partition_labels else {
        if config.merge_map.is_some() {
            return Err(Error::input("merge_map needs partition_labels"));
        }
        return Ok(PartitionPlan::whole(graph));
    };
    let labels = read_pairs(path, "partition labels", LABELS_HEADER)?;
    let merge = match &config.merge_map {
        Some(p) => read_pairs(p, "merge map", MERGE_MAP_HEADER)?,
        None => BTreeMap::new(),
    };
    if let Some(extra) = labels.keys().find(|id| graph.index_of(id).is_none()) {
        return Err(Error::input(format!("partition labels name unknown area '{extra}'")));
    }
    let per_area = graph
        .ids()
        .iter()
        .map(|id| {
            labels
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Plan(format!("area '{id}' has no partition label")))
        })
        .collect::<Result<Vec<_>>>()?;
    make_plan(&per_area, graph, &merge, config.k)
}

fn risks_csv(fit: &PartitionedFit, panel: &CountsPanel, threshold: f64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "year", "q025", "q50", "q975", "exceed_prob", "owner"])?;
    for t in 0..panel.n_years() {
        for i in 0..panel.n_areas() {
            let c = panel.cell(i, t);
            let q = fit.risk_quantiles(c);
            w.write_record([
                panel.area_ids[i].clone(),
                panel.years[t].to_string(),
                q[0].to_string(),
                q[1].to_string(),
                q[2].to_string(),
                fit.exceedance_probability(c, threshold).to_string(),
                fit.owner_name(i).to_string(),
            ])?;
        }
    }
    finish(w)
}

fn hyper_csv(fit: &PartitionedFit) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subdomain", "name", "fixed", "mean", "sd", "q025", "q50", "q975"])?;
    for s in &fit.subdomains {
        for h in &s.fit.hyper {
            let mut row = vec![s.name.clone(), h.name.clone(), h.fixed.to_string(), h.mean.to_string(), h.sd.to_string()];
            row.extend(h.quantiles.iter().map(f64::to_string));
            w.write_record(row)?;
        }
    }
    finish(w)
}

fn partition_csv(fit: &PartitionedFit) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(crate::partition::REPORT_HEADER)?;
    for r in partition_report(fit) {
        w.write_record([
            r.subdomain,
            r.n_owned.to_string(),
            r.n_extended.to_string(),
            opt(r.sd_spatial),
            opt(r.sd_temporal),
            opt(r.sd_interaction),
        ])?;
    }
    finish(w)
}

fn criteria_csv(rows: &[CriteriaRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["prior", "interaction", "Dbar", "pD", "DIC", "lppd", "pWAIC", "WAIC"])?;
    for r in rows {
        let c = &r.criteria;
        w.write_record([
            r.prior.clone(),
            r.interaction.clone(),
            c.dic.dbar.to_string(),
            c.dic.pd.to_string(),
            c.dic.dic.to_string(),
            c.waic.lppd.to_string(),
            c.waic.p_waic.to_string(),
            c.waic.waic.to_string(),
        ])?;
    }
    finish(w)
}

fn delta_csv(rows: &[CriteriaRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DELTA_HEADER)?;
    for r in delta_table(rows) {
        w.write_record([
            r.prior,
            r.interaction,
            r.dbar.to_string(),
            r.pd.to_string(),
            r.d_dic.to_string(),
            r.d_waic.to_string(),
        ])?;
    }
    finish(w)
}

fn interaction_label(t: InteractionType) -> String {
    (InteractionType::ALL.iter().position(|&x| x == t).unwrap_or(0) + 1).to_string()
}

fn criteria_row(fit: &PartitionedFit, warnings: &mut Vec<String>) -> Result<CriteriaRow> {
    let c = merged_criteria(fit)?;
    let row = CriteriaRow {
        prior: fit.prior.to_string(),
        interaction: interaction_label(fit.interaction),
        criteria: c,
    };
    if c.pd_negative() {
        warnings.push(format!(
            "{} type {}: negative effective number of parameters ({})",
            row.prior, row.interaction, c.dic.pd
        ));
    }
    Ok(row)
}

fn imputation_csv(report: &crate::imputation::ImputationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for c in &report.cells {
        w.write_record([
            c.area_id.clone(),
            c.year.to_string(),
            c.expected.to_string(),
            c.median_risk.to_string(),
            c.raw_pred.to_string(),
            c.final_count.to_string(),
            c.truncated().to_string(),
        ])?;
    }
    finish(w)
}

fn describe(panel: &CountsPanel, out: &mut Outputs) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "smr", "displayable"])?;
    for a in smr_space(panel)? {
        w.write_record([a.area_id, opt(a.smr), a.displayable.to_string()])?;
    }
    out.write("smr_space.csv", &finish(w)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["year", "smr", "lo", "hi"])?;
    for y in smr_time(panel)? {
        w.write_record([y.year.to_string(), opt(y.smr), opt(y.lo), opt(y.hi)])?;
    }
    out.write("smr_time.csv", &finish(w)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["year", "n", "min", "q1", "median", "q3", "max", "outliers"])?;
    for b in boxplot_export(panel)? {
        let outliers: Vec<String> = b.outliers.iter().map(f64::to_string).collect();
        w.write_record([
            b.year.to_string(),
            b.n.to_string(),
            b.min.to_string(),
            b.q1.to_string(),
            b.median.to_string(),
            b.q3.to_string(),
            b.max.to_string(),
            outliers.join(";"),
        ])?;
    }
    out.write("smr_boxplot.csv", &finish(w)?)
}

fn trends(
    fit: &PartitionedFit,
    panel: &CountsPanel,
    original: &CountsPanel,
    meta: &[AreaMeta],
    config: &PipelineConfig,
    out: &mut Outputs,
) -> Result<()> {
    let by_id: BTreeMap<&str, &AreaMeta> = meta.iter().map(|m| (m.area_id.as_str(), m)).collect();
    let weights = match config.trend_weight_year {
        Some(y) => TrendWeights::FixedYear(year_index(panel, y)?),
        None => TrendWeights::PerYear,
    };
    let fully_suppressed =
        |i: usize| (0..original.n_years()).all(|t| original.count(i, t).is_none());
    let include = |i: usize| config.trends_include_suppressed || !fully_suppressed(i);
    let groupings: [(&str, Box<dyn Fn(&AreaMeta) -> String>); 2] = [
        ("trends_by_region.csv", Box::new(|m: &AreaMeta| m.region.to_string())),
        ("trends_by_urbanicity.csv", Box::new(|m: &AreaMeta| m.urbanicity.to_string())),
    ];
    for (file, key) in groupings {
        let groups: Vec<Option<String>> = panel
            .area_ids
            .iter()
            .map(|id| by_id.get(id.as_str()).map(|m| key(m)))
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "year", "weighted_risk"])?;
        for p in weighted_trend(fit, panel, &groups, weights, include)? {
            w.write_record([p.group, p.year.to_string(), opt(p.weighted_risk)])?;
        }
        out.write(file, &finish(w)?)?;
    }
    Ok(())
}

fn classify(fit: &PartitionedFit, panel: &CountsPanel, config: &PipelineConfig, out: &mut Outputs) -> Result<()> {
    let t = match config.classify_year {
        Some(y) => year_index(panel, y)?,
        None => panel.n_years() - 1,
    };
    let classes = risk_classification(fit, t)?;
    let flags = exceedance_flag(fit, config.exceed_threshold, config.exceed_prob);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "year", "q025", "q975", "class", "exceed_prob", "exceeds"])?;
    for (i, class) in classes.iter().enumerate() {
        let c = panel.cell(i, t);
        let q = fit.risk_quantiles(c);
        w.write_record([
            panel.area_ids[i].clone(),
            panel.years[t].to_string(),
            q[0].to_string(),
            q[2].to_string(),
            class.to_string(),
            fit.exceedance_probability(c, config.exceed_threshold).to_string(),
            flags[c].to_string(),
        ])?;
    }
    out.write("risk_classes.csv", &finish(w)?)
}

/// Runs the configured stages. Outputs are written to a staging directory
/// next to the output directory and moved into place only on success.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    pool.install(|| run_stages(config))
}

fn run_stages(config: &PipelineConfig) -> Result<Manifest> {
    let counts = config.required(&config.counts, "counts")?;
    let population = config.required(&config.population, "population")?;
    let graph_path = config.required(&config.graph, "graph")?;
    let original = load_panel(counts, population)?;
    let graph = load_graph(&read_edge_list(graph_path)?, &original.area_ids)?;
    let meta = match &config.area_meta {
        Some(p) => Some(read_area_meta(p)?),
        None => None,
    };

    let parent = match config.output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    let dir = tempfile::Builder::new()
        .prefix(".dcmap-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(parent.display().to_string(), e))?;
    let mut out = Outputs { dir, names: Vec::new() };
    let mut times = BTreeMap::new();
    let mut warnings = original.suppression_warnings();
    let has = |s: Stage| config.stages.contains(&s);

    let mut panel = original.clone();
    let mut exceed_fraction = None;
    if has(Stage::Impute) && original.counts.iter().any(Option::is_none) {
        let options = ImputeOptions {
            prior: config.imputation_prior.parse()?,
            truncate: config.truncate,
            build: config.build_options(),
            summary: SummaryOptions {
                n_draws: 0,
                ..config.summary_options()
            },
        };
        let (completed, report) = timed(&mut times, Stage::Impute, || impute_panel(&original, &graph, &options))?;
        out.write("imputation_report.csv", &imputation_csv(&report)?)?;
        out.write("imputed_counts.csv", &counts_csv(&completed)?)?;
        exceed_fraction = Some(report.exceed_fraction);
        warnings.extend(report.warnings);
        panel = completed;
    }
    let panel = expected_counts(&panel, config.expected()?)?;

    if has(Stage::Describe) {
        timed(&mut times, Stage::Describe, || describe(&panel, &mut out))?;
    }

    let options = PartitionOptions {
        build: config.build_options(),
        summary: config.summary_options(),
        workers: 0,
    };
    let plan = read_plan(config, &graph)?;
    let mut sd_spatial = BTreeMap::new();
    let needs_fit = has(Stage::Fit) || has(Stage::Trends) || has(Stage::Classify);
    if needs_fit {
        let (prior, interaction) = (config.spatial_prior()?, config.interaction_type()?);
        let fit = timed(&mut times, Stage::Fit, || {
            fit_partitioned(&panel, &graph, &plan, prior, interaction, &options)
        })?;
        warnings.extend(fit.warnings());
        for r in partition_report(&fit) {
            sd_spatial.insert(r.subdomain, r.sd_spatial);
        }
        if has(Stage::Fit) {
            timed(&mut times, Stage::Fit, || {
                out.write("risks.csv", &risks_csv(&fit, &panel, config.exceed_threshold)?)?;
                out.write("hyperparameters.csv", &hyper_csv(&fit)?)?;
                out.write("partition_report.csv", &partition_csv(&fit)?)?;
                let row = criteria_row(&fit, &mut warnings)?;
                out.write("criteria.csv", &criteria_csv(&[row])?)
            })?;
        }
        if has(Stage::Trends) {
            match &meta {
                Some(meta) => timed(&mut times, Stage::Trends, || {
                    trends(&fit, &panel, &original, meta, config, &mut out)
                })?,
                None => warnings.push("trends skipped: no area metadata configured".into()),
            }
        }
        if has(Stage::Classify) {
            timed(&mut times, Stage::Classify, || classify(&fit, &panel, config, &mut out))?;
        }
    }

    if has(Stage::Compare) {
        let rows = timed(&mut times, Stage::Compare, || {
            let mut rows = Vec::new();
            for prior in SpatialPrior::ALL {
                for interaction in InteractionType::ALL {
                    log::info!("comparison fit: {prior} type {interaction}");
                    let fit = fit_partitioned(&panel, &graph, &plan, prior, interaction, &options)?;
                    warnings.extend(fit.warnings());
                    rows.push(criteria_row(&fit, &mut warnings)?);
                }
            }
            Ok(rows)
        })?;
        out.write("criteria_table.csv", &delta_csv(&rows)?)?;
        out.write("criteria_raw.csv", &criteria_csv(&rows)?)?;
    }

    let mut outputs = out.names.clone();
    outputs.push(MANIFEST_FILE.into());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config: config.clone(),
        conventions: conventions(config),
        outputs,
        missing_fraction: original.missing_fraction(),
        imputation_exceed_fraction: exceed_fraction,
        subdomain_sd_spatial: sd_spatial,
        warnings,
        stage_seconds: times,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(format!("manifest: {e}")))?;
    out.write(MANIFEST_FILE, &json)?;
    out.commit(&config.output)?;
    Ok(manifest)
}
