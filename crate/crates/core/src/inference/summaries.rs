//! Posterior marginals of the latent field, linear predictor and risks.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::inference::explore::HyperGrid;
use crate::inference::model::{HyperSetting, LatentModel};
use crate::inference::newton::Laplace;

/// Settings for marginal summaries and posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryOptions {
    pub quantiles: Vec<f64>,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            quantiles: vec![0.025, 0.5, 0.975],
            n_draws: 1000,
            seed: 1,
        }
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Per-entry Gaussian mixtures sharing one set of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    /// `means[k][i]` is the mean of entry `i` under component `k`.
    pub means: Vec<Vec<f64>>,
    pub sds: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn len(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m[i]).sum()
    }

    pub fn sd(&self, i: usize) -> f64 {
        let mu = self.mean(i);
        let second: f64 = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| w * (s[i] * s[i] + m[i] * m[i]))
            .sum();
        (second - mu * mu).max(0.0).sqrt()
    }

    pub fn cdf(&self, i: usize, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| {
                let p = if s[i] > 0.0 {
                    normal_cdf((x - m[i]) / s[i])
                } else if x >= m[i] {
                    1.0
                } else {
                    0.0
                };
                w * p
            })
            .sum()
    }

    /// Quantile by bisection on the mixture CDF.
    pub fn quantile(&self, i: usize, p: f64) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (m, s) in self.means.iter().zip(&self.sds) {
            lo = lo.min(m[i] - 12.0 * s[i]);
            hi = hi.max(m[i] + 12.0 * s[i]);
        }
        if hi - lo <= 0.0 {
            return lo;
        }
        let tol = 1e-10 * (1.0 + lo.abs().max(hi.abs()));
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(i, mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Posterior draws of per-cell log-likelihood contributions, one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    pub n_draws: usize,
    /// Model cell index of each column.
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
}

impl DrawMatrix {
    pub fn new(n_draws: usize, cells: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_draws * cells.len() {
            return Err(Error::Criteria(format!(
                "draw matrix holds {} values for {n_draws} draws of {} cells",
                values.len(),
                cells.len()
            )));
        }
        Ok(Self {
            n_draws,
            cells,
            values,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, draw: usize, col: usize) -> f64 {
        self.values[draw * self.cells.len() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_draws).map(|d| self.get(d, col)).collect()
    }

    /// Keeps the columns whose cell satisfies `keep`, relabelled by `relabel`.
    pub fn select(&self, keep: impl Fn(usize) -> Option<usize>) -> Self {
        let picked: Vec<(usize, usize)> = self
            .cells
            .iter()
            .enumerate()
            .filter_map(|(col, &c)| keep(c).map(|new| (col, new)))
            .collect();
        let mut values = Vec::with_capacity(self.n_draws * picked.len());
        for d in 0..self.n_draws {
            values.extend(picked.iter().map(|&(col, _)| self.get(d, col)));
        }
        Self {
            n_draws: self.n_draws,
            cells: picked.into_iter().map(|p| p.1).collect(),
            values,
        }
    }

    /// Concatenates column blocks with the same number of draws.
    pub fn hstack(parts: &[DrawMatrix]) -> Result<Self> {
        let n_draws = parts.first().map_or(0, |p| p.n_draws);
        if parts.iter().any(|p| p.n_draws != n_draws) {
            return Err(Error::Criteria("draw counts differ across parts".into()));
        }
        let cells: Vec<usize> = parts.iter().flat_map(|p| p.cells.iter().copied()).collect();
        let mut values = Vec::with_capacity(n_draws * cells.len());
        for d in 0..n_draws {
            for p in parts {
                values.extend_from_slice(&p.values[d * p.n_cells()..(d + 1) * p.n_cells()]);
            }
        }
        Ok(Self {
            n_draws,
            cells,
            values,
        })
    }
}

/// Posterior summary of one hyperparameter on its reporting scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSummary {
    pub name: String,
    pub fixed: bool,
    pub mean: f64,
    pub sd: f64,
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub quantile_levels: Vec<f64>,
    pub effect_mean: Vec<f64>,
    pub effect_sd: Vec<f64>,
    /// Per latent entry, one value per quantile level.
    pub effect_quantiles: Vec<Vec<f64>>,
    pub eta_mean: Vec<f64>,
    pub eta_quantiles: Vec<Vec<f64>>,
    /// `exp` of the linear-predictor quantiles.
    pub risk_quantiles: Vec<Vec<f64>>,
    pub latent_mixture: Mixture,
    pub eta_mixture: Mixture,
    pub hyper: Vec<HyperSummary>,
    pub grid: HyperGrid,
    pub loglik_draws: DrawMatrix,
    pub deviance_at_mean: f64,
    pub warnings: Vec<String>,
    pub runtime_secs: f64,
}

impl FitResult {
    /// Index of `level` among the quantile levels.
    pub fn level_index(&self, level: f64) -> Option<usize> {
        self.quantile_levels.iter().position(|&l| (l - level).abs() < 1e-12)
    }

    pub fn median_risk(&self, cell: usize) -> f64 {
        (self.eta_mixture.quantile(cell, 0.5)).exp()
    }

    /// `P(exp(eta) > threshold)` for one cell.
    pub fn exceedance_probability(&self, cell: usize, threshold: f64) -> f64 {
        1.0 - self.eta_mixture.cdf(cell, threshold.ln())
    }
}

struct PointSummary {
    latent_mean: Vec<f64>,
    latent_sd: Vec<f64>,
    eta_mean: Vec<f64>,
    eta_sd: Vec<f64>,
    /// Rows of draws, each over the observed cells.
    draws: Vec<f64>,
}

/// Marginal variances of the latent entries and the linear predictor under
/// the constrained approximation `lap`.
fn constrained_variances(model: &LatentModel, lap: &Laplace<'_>) -> (Vec<f64>, Vec<f64>) {
    let inv = lap.factor.selected_inverse();
    let z = lap.correction_factor();
    let corr = |j: usize, k: usize| -> f64 { z.column(j).dot(&z.column(k)) };
    let mut latent = inv.diag();
    for (j, v) in latent.iter_mut().enumerate() {
        *v -= corr(j, j);
    }
    let eta = model
        .incidence
        .iter()
        .map(|inc| {
            let mut v = 0.0;
            for &j in inc {
                for &k in inc {
                    let s = inv.get(j, k).expect("incidence pairs lie on the factor pattern");
                    v += s - corr(j, k);
                }
            }
            v
        })
        .collect();
    (latent, eta)
}

fn summarize_point(
    model: &LatentModel,
    theta: &[f64],
    mode: &[f64],
    n_draws: usize,
    seed: u64,
    stream: u64,
    observed: &[usize],
) -> Result<PointSummary> {
    let full = model.full_theta(theta);
    let lap1 = Laplace::at(model, &full, mode.to_vec(), 1.0)?;
    let lap2 = Laplace::at(model, &full, mode.to_vec(), 2.0)?;
    let (l1, e1) = constrained_variances(model, &lap1);
    let (l2, e2) = constrained_variances(model, &lap2);
    // Richardson step removes the first-order jitter bias.
    let extrapolate = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| (2.0 * x - y).max(0.0).sqrt()).collect()
    };
    let latent_sd = extrapolate(&l1, &l2);
    let eta_sd = extrapolate(&e1, &e2);
    let eta_mean = model.linear_predictor(mode);

    let mut draws = Vec::with_capacity(n_draws * observed.len());
    if n_draws > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        for _ in 0..n_draws {
            let z: Vec<f64> = (0..model.n_latent).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut dx = lap1.factor.sample_transform(&z);
            lap1.condition(model, &mut dx);
            let x: Vec<f64> = mode.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let eta = model.linear_predictor(&x);
            for &c in observed {
                let y = model.observations[c].expect("observed cell");
                draws.push(model.likelihood.log_density(y, model.offsets[c], eta[c]));
            }
        }
    }
    Ok(PointSummary {
        latent_mean: mode.to_vec(),
        latent_sd,
        eta_mean,
        eta_sd,
        draws,
    })
}

fn hyper_summaries(model: &LatentModel, grid: &HyperGrid, levels: &[f64]) -> Vec<HyperSummary> {
    let mut free_index = 0;
    model
        .slots
        .iter()
        .map(|slot| match slot.setting {
            HyperSetting::Fixed(v) => HyperSummary {
                name: slot.name.clone(),
                fixed: true,
                mean: slot.user_value(v),
                sd: 0.0,
                quantiles: vec![slot.user_value(v); levels.len()],
            },
            HyperSetting::Estimated => {
                let k = free_index;
                free_index += 1;
                let wsum = |f: &dyn Fn(f64) -> f64| -> f64 {
                    grid.points.iter().map(|p| p.weight * f(p.theta[k])).sum()
                };
                let mean = wsum(&|t| slot.user_value(t));
                let second = wsum(&|t| slot.user_value(t).powi(2));
                let t_mean = wsum(&|t| t);
                let t_sd = (wsum(&|t| t * t) - t_mean * t_mean).max(0.0).sqrt();
                let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
                let mut quantiles: Vec<f64> = levels
                    .iter()
                    .map(|&p| {
                        use statrs::distribution::ContinuousCDF;
                        slot.user_value(t_mean + t_sd * normal.inverse_cdf(p))
                    })
                    .collect();
                quantiles.sort_by(|a, b| a.partial_cmp(b).unwrap());
                HyperSummary {
                    name: slot.name.clone(),
                    fixed: false,
                    mean,
                    sd: (second - mean * mean).max(0.0).sqrt(),
                    quantiles,
                }
            }
        })
        .collect()
}

/// Mixes the Gaussian approximations over the grid into marginal summaries
/// and draws pointwise log-likelihood samples.
pub fn latent_marginals(model: &LatentModel, grid: HyperGrid, options: &SummaryOptions) -> Result<FitResult> {
    if grid.points.is_empty() {
        return Err(Error::fit("empty hyperparameter grid"));
    }
    let weights: Vec<f64> = grid.points.iter().map(|p| p.weight).collect();
    let observed: Vec<usize> = (0..model.n_cells())
        .filter(|&c| model.observations[c].is_some())
        .collect();

    let mut counts = vec![0usize; weights.len()];
    if options.n_draws > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Internal(format!("grid weights: {e}")))?;
        for _ in 0..options.n_draws {
            counts[pick.sample(&mut rng)] += 1;
        }
    }
    let summaries: Vec<PointSummary> = grid
        .points
        .par_iter()
        .zip(counts.par_iter())
        .enumerate()
        .map(|(k, (p, &c))| summarize_point(model, &p.theta, &p.mode, c, options.seed, k as u64 + 1, &observed))
        .collect::<Result<_>>()?;

    let latent_mixture = Mixture {
        weights: weights.clone(),
        means: summaries.iter().map(|s| s.latent_mean.clone()).collect(),
        sds: summaries.iter().map(|s| s.latent_sd.clone()).collect(),
    };
    let eta_mixture = Mixture {
        weights,
        means: summaries.iter().map(|s| s.eta_mean.clone()).collect(),
        sds: summaries.iter().map(|s| s.eta_sd.clone()).collect(),
    };
    let levels = &options.quantiles;
    let effect_quantiles: Vec<Vec<f64>> = (0..model.n_latent)
        .into_par_iter()
        .map(|i| levels.iter().map(|&p| latent_mixture.quantile(i, p)).collect())
        .collect();
    let eta_quantiles: Vec<Vec<f64>> = (0..model.n_cells())
        .into_par_iter()
        .map(|i| levels.iter().map(|&p| eta_mixture.quantile(i, p)).collect())
        .collect();
    let risk_quantiles = eta_quantiles
        .iter()
        .map(|q| q.iter().map(|v| v.exp()).collect())
        .collect();
    let eta_mean: Vec<f64> = (0..model.n_cells()).map(|i| eta_mixture.mean(i)).collect();
    let deviance_at_mean = -2.0 * model.log_likelihood(&eta_mean);

    let mut values = Vec::with_capacity(options.n_draws * observed.len());
    for s in &summaries {
        values.extend_from_slice(&s.draws);
    }
    let loglik_draws = DrawMatrix::new(options.n_draws, observed, values)?;

    let hyper = hyper_summaries(model, &grid, levels);
    let warnings = grid.warnings.clone();
    Ok(FitResult {
        quantile_levels: levels.clone(),
        effect_mean: (0..model.n_latent).map(|i| latent_mixture.mean(i)).collect(),
        effect_sd: (0..model.n_latent).map(|i| latent_mixture.sd(i)).collect(),
        effect_quantiles,
        eta_mean,
        eta_quantiles,
        risk_quantiles,
        latent_mixture,
        eta_mixture,
        hyper,
        grid,
        loglik_draws,
        deviance_at_mean,
        warnings,
        runtime_secs: 0.0,
    })
}
