//! Dense oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use dcmap_core::graph::AreaGraph;
use dcmap_core::inference::{BlockSpec, HyperSetting, LatentBlock, LatentModel, Likelihood, ModelOptions};
use dcmap_core::structures::{icar_precision, interaction_precision, rw1_precision, scale_precision, InteractionType};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Orthonormal basis (as columns) of the null space of `c`.
pub fn null_basis(c: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if c.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let eig = SymmetricEigen::new(c.transpose() * c);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] < 1e-9 * top).collect();
    let mut v = DMatrix::zeros(n, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        v.set_column(j, &eig.eigenvectors.column(k));
    }
    v
}

/// Numerical rank of a symmetric matrix.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    eig.eigenvalues.iter().filter(|&&l| l.abs() > 1e-9 * top).count()
}

/// Gaussian-likelihood model with fixed hyperparameters, plus the dense
/// prior precision, design and constraints describing the same posterior.
pub struct GaussianCase {
    pub model: LatentModel,
    pub prior: DMatrix<f64>,
    pub design: DMatrix<f64>,
    pub constraints: DMatrix<f64>,
    pub y: Vec<f64>,
    pub noise: f64,
}

fn place(target: &mut DMatrix<f64>, block: &DMatrix<f64>, off: usize, scale: f64) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            target[(off + i, off + j)] += scale * block[(i, j)];
        }
    }
}

/// Dense prior precision and stacked constraints of the intercept,
/// scaled ICAR, scaled RW1 and interaction blocks, in that order.
pub fn dense_st_prior(
    graph: &AreaGraph,
    t: usize,
    kind: InteractionType,
    theta: [f64; 3],
    intercept_precision: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = graph.n_areas();
    let qs = scale_precision(&icar_precision(graph).unwrap()).unwrap();
    let qt = scale_precision(&rw1_precision(t).unwrap()).unwrap();
    let qd = interaction_precision(kind, &qs, &qt).unwrap();
    let (off_s, off_t, off_d) = (1, 1 + s, 1 + s + t);
    let n = off_d + s * t;
    let mut prior = DMatrix::zeros(n, n);
    prior[(0, 0)] = intercept_precision;
    place(&mut prior, &qs.matrix.to_dense(), off_s, theta[0].exp());
    place(&mut prior, &qt.matrix.to_dense(), off_t, theta[1].exp());
    place(&mut prior, &qd.matrix.to_dense(), off_d, theta[2].exp());
    let blocks = [(&qs, off_s), (&qt, off_t), (&qd, off_d)];
    let m: usize = blocks.iter().map(|(q, _)| q.n_constraints()).sum();
    let mut constraints = DMatrix::zeros(m, n);
    let mut r = 0;
    for (q, off) in blocks {
        let c = q.constraints.to_dense();
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                constraints[(r + i, off + j)] = c[(i, j)];
            }
        }
        r += c.nrows();
    }
    (prior, constraints)
}

/// Intercept, spatial, temporal and interaction effects with log
/// precisions `theta` and Gaussian observations of their sum.
pub fn gaussian_st_case(graph: &AreaGraph, t: usize, kind: InteractionType, theta: [f64; 3], seed: u64) -> GaussianCase {
    let s = graph.n_areas();
    let qs = scale_precision(&icar_precision(graph).unwrap()).unwrap();
    let qt = scale_precision(&rw1_precision(t).unwrap()).unwrap();
    let qd = interaction_precision(kind, &qs, &qt).unwrap();
    let (off_s, off_t, off_d) = (1, 1 + s, 1 + s + t);
    let n = off_d + s * t;
    let intercept_precision = 0.01;
    let noise = 3.0;

    let (prior, constraints) = dense_st_prior(graph, t, kind, theta, intercept_precision);

    let mut design = DMatrix::zeros(s * t, n);
    let incidence: Vec<Vec<usize>> = (0..s * t)
        .map(|c| {
            let (i, k) = (c % s, c / s);
            vec![0, off_s + i, off_t + k, off_d + c]
        })
        .collect();
    for (c, inc) in incidence.iter().enumerate() {
        for &j in inc {
            design[(c, j)] = 1.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..s * t).map(|_| rng.random_range(-1.0..1.0)).collect();

    let fixed = |v: f64| vec![HyperSetting::Fixed(v)];
    let model = LatentModel::new(
        Likelihood::Gaussian { noise_precision: noise },
        vec![1.0; s * t],
        y.iter().map(|&v| Some(v)).collect(),
        incidence,
        vec![
            BlockSpec { block: LatentBlock::fixed_iid("intercept", intercept_precision), size: 1 },
            BlockSpec { block: LatentBlock::structured("spatial", qs.clone()).with_hyper(fixed(theta[0])), size: s },
            BlockSpec { block: LatentBlock::structured("temporal", qt.clone()).with_hyper(fixed(theta[1])), size: t },
            BlockSpec {
                block: LatentBlock::structured("interaction", qd.clone()).with_hyper(fixed(theta[2])),
                size: s * t,
            },
        ],
        ModelOptions::default(),
    )
    .unwrap();
    GaussianCase { model, prior, design, constraints, y, noise }
}

/// Exact constrained posterior mean and marginal variances.
pub fn gaussian_posterior(case: &GaussianCase) -> (Vec<f64>, Vec<f64>) {
    let n = case.prior.nrows();
    let v = null_basis(&case.constraints, n);
    let h = &case.prior + case.design.transpose() * &case.design * case.noise;
    let b = case.design.transpose() * DVector::from_vec(case.y.clone()) * case.noise;
    let hz = v.transpose() * &h * &v;
    let hz_inv = hz.try_inverse().expect("reduced precision is invertible");
    let mean = &v * (&hz_inv * (v.transpose() * b));
    let cov = &v * hz_inv * v.transpose();
    (mean.iter().copied().collect(), cov.diagonal().iter().copied().collect())
}

/// Log of the Gaussian-likelihood marginal `p(y | theta)` on the constraint
/// subspace, with the improper directions removed.
pub fn gaussian_log_evidence(case: &GaussianCase) -> f64 {
    let n = case.prior.nrows();
    let v = null_basis(&case.constraints, n);
    let qz = v.transpose() * &case.prior * &v;
    let az = &case.design * &v;
    let k = case.y.len();
    let cov = &az * qz.try_inverse().unwrap() * az.transpose() + DMatrix::identity(k, k) / case.noise;
    let chol = cov.cholesky().unwrap();
    let y = DVector::from_vec(case.y.clone());
    let quad = y.dot(&chol.solve(&y));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad
}

/// Poisson counts observing one log rate, with a gamma prior on the rate
/// written as the pseudo-observation `(shape, rate)`.
pub struct ConjugateCase {
    pub shape: f64,
    pub rate: f64,
    pub counts: Vec<u64>,
    pub exposure: Vec<f64>,
}

impl ConjugateCase {
    pub fn posterior_shape(&self) -> f64 {
        self.shape + self.counts.iter().sum::<u64>() as f64
    }

    pub fn posterior_rate(&self) -> f64 {
        self.rate + self.exposure.iter().sum::<f64>()
    }

    /// Latent model whose first cell is the prior pseudo-observation; the
    /// log rate has a nearly flat Gaussian prior.
    pub fn model(&self) -> LatentModel {
        let mut obs = vec![Some(self.shape)];
        obs.extend(self.counts.iter().map(|&y| Some(y as f64)));
        let mut off = vec![self.rate];
        off.extend(self.exposure.iter().copied());
        let k = obs.len();
        LatentModel::new(
            Likelihood::Poisson,
            off,
            obs,
            vec![vec![0]; k],
            vec![BlockSpec { block: LatentBlock::fixed_iid("log_rate", 1e-10), size: 1 }],
            ModelOptions::default(),
        )
        .unwrap()
    }

    pub fn log_lik(&self, i: usize, lambda: f64) -> f64 {
        let y = self.counts[i] as f64;
        let mu = self.exposure[i] * lambda;
        y * mu.ln() - mu - statrs::function::gamma::ln_gamma(y + 1.0)
    }

    /// Posterior mean of the rate by trapezoidal quadrature on the log rate.
    pub fn quadrature_mean(&self) -> f64 {
        let (a, b) = (self.posterior_shape(), self.posterior_rate());
        let centre = (a / b).ln();
        let sd = 1.0 / a.sqrt();
        let (lo, hi, n) = (centre - 12.0 * sd, centre + 12.0 * sd, 20_000);
        let h = (hi - lo) / n as f64;
        let logp = |x: f64| a * x - b * x.exp();
        let top = logp(centre);
        let (mut z, mut m) = (0.0, 0.0);
        for k in 0..=n {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            let p = (logp(x) - top).exp() * w;
            z += p;
            m += p * x.exp();
        }
        m / z
    }

    /// DIC and WAIC of the fitted model with the prior cell dropped.
    pub fn fitted_criteria(&self, n_draws: usize, seed: u64) -> (f64, f64) {
        use dcmap_core::inference::{fit, SummaryOptions};
        let model = self.model();
        let r = fit(&model, &SummaryOptions { n_draws, seed, ..SummaryOptions::default() }).unwrap();
        let draws = r.loglik_draws.select(|c| (c > 0).then(|| c - 1));
        let prior_cell = model.likelihood.log_density(self.shape, self.rate, r.eta_mean[0]);
        let c = dcmap_core::criteria::criteria(&draws, r.deviance_at_mean + 2.0 * prior_cell).unwrap();
        (c.dic.dic, c.waic.waic)
    }

    /// DIC and WAIC from `n` exact posterior draws, with the deviance
    /// plugged in at the exact posterior mean of the log rate.
    pub fn exact_criteria(&self, n: usize, seed: u64) -> (f64, f64) {
        use rand_distr::{Distribution, Gamma};
        let (a, b) = (self.posterior_shape(), self.posterior_rate());
        let gamma = Gamma::new(a, 1.0 / b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.counts.len();
        let mut values = Vec::with_capacity(n * k);
        for _ in 0..n {
            let lambda: f64 = gamma.sample(&mut rng);
            values.extend((0..k).map(|i| self.log_lik(i, lambda)));
        }
        let draws = dcmap_core::inference::DrawMatrix::new(n, (0..k).collect(), values).unwrap();
        let log_mean = statrs::function::gamma::digamma(a) - b.ln();
        let dev: f64 = -2.0 * (0..k).map(|i| self.log_lik(i, log_mean.exp())).sum::<f64>();
        let c = dcmap_core::criteria::criteria(&draws, dev).unwrap();
        (c.dic.dic, c.waic.waic)
    }
}

/// Simulated Type II lattice panel with default effect sizes.
pub fn lattice_panel(
    rows: usize,
    cols: usize,
    t: usize,
    seed: u64,
) -> (dcmap_core::graph::AreaGraph, dcmap_core::models::CountsPanel, dcmap_core::simulator::SimulationTruth) {
    use dcmap_core::simulator::{log_uniform_expected, make_lattice, simulate_panel, SimulationSpec};
    use dcmap_core::structures::{HyperParams, InteractionType};
    let graph = make_lattice(rows, cols).unwrap();
    let spec = SimulationSpec {
        t,
        hyper: HyperParams {
            sigma2_spatial: 0.09,
            sigma2_temporal: 0.04,
            sigma2_interaction: 0.0225,
            lambda: 1.0,
        },
        interaction: InteractionType::II,
        base_expected: log_uniform_expected(rows * cols, 6.0, 200.0, seed ^ 0x5eed),
        alpha0: 0.0,
        seed,
    };
    let (panel, truth) = simulate_panel(&graph, &spec).unwrap();
    (graph, panel, truth)
}

/// Writes a simulated, suppressed lattice scenario (counts, population,
/// graph, metadata and quadrant labels) into `dir` and returns a config
/// pointing at it.
pub fn write_scenario(
    dir: &std::path::Path,
    rows: usize,
    cols: usize,
    t: usize,
    seed: u64,
) -> dcmap_core::pipeline::PipelineConfig {
    use dcmap_core::graph::write_edge_list;
    use dcmap_core::io::{counts_csv, population_csv};
    use dcmap_core::simulator::{labels_csv, meta_csv, quadrant_labels, suppress};
    let (graph, full, _) = lattice_panel(rows, cols, t, seed);
    let (panel, _) = suppress(&full, 10);
    let labels = quadrant_labels(rows, cols);
    let files = [
        ("counts.csv", counts_csv(&panel).unwrap()),
        ("population.csv", population_csv(&panel).unwrap()),
        ("graph.tsv", write_edge_list(&graph)),
        ("area_meta.csv", meta_csv(&panel, &labels).unwrap()),
        ("labels.csv", labels_csv(&panel, &labels).unwrap()),
    ];
    for (name, body) in files {
        std::fs::write(dir.join(name), body).unwrap();
    }
    dcmap_core::pipeline::PipelineConfig {
        counts: Some(dir.join("counts.csv")),
        population: Some(dir.join("population.csv")),
        graph: Some(dir.join("graph.tsv")),
        area_meta: Some(dir.join("area_meta.csv")),
        partition_labels: Some(dir.join("labels.csv")),
        output: dir.join("out"),
        ..Default::default()
    }
}

/// Contents of every file in `dir`, with run timings removed from the
/// manifest.
pub fn output_snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    let mut out = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let mut body = std::fs::read_to_string(&path).unwrap();
        if name == dcmap_core::pipeline::MANIFEST_FILE {
            let mut v: serde_json::Value = serde_json::from_str(&body).unwrap();
            v.as_object_mut().unwrap().remove("stage_seconds");
            body = v.to_string();
        }
        out.insert(name, body);
    }
    out
}
