mod common;

use common::{dense_st_prior, gaussian_log_evidence, gaussian_posterior, gaussian_st_case, null_basis, ConjugateCase};
use dcmap_core::inference::{fit, log_marginal_theta, newton_mode, SummaryOptions};
use dcmap_core::models::{build_st_model, expected_counts, BuildOptions, ExpectedMode, SpatialPrior};
use dcmap_core::simulator::{log_uniform_expected, make_lattice, simulate_panel, SimulationSpec};
use dcmap_core::structures::{HyperParams, InteractionType};
use nalgebra::{DMatrix, DVector};

fn no_draws() -> SummaryOptions {
    SummaryOptions { n_draws: 0, ..SummaryOptions::default() }
}

#[test]
fn gaussian_posterior_matches_closed_form() {
    let g = make_lattice(3, 3).unwrap();
    for (k, kind) in InteractionType::ALL.into_iter().enumerate() {
        let case = gaussian_st_case(&g, 4, kind, [0.5, 1.0, -0.3], k as u64);
        let (mean, var) = gaussian_posterior(&case);
        let r = fit(&case.model, &no_draws()).unwrap();
        for j in 0..mean.len() {
            assert!((r.effect_mean[j] - mean[j]).abs() < 1e-8, "{kind} mean {j}");
            assert!((r.effect_sd[j].powi(2) - var[j]).abs() < 1e-6, "{kind} variance {j}");
        }
    }
}

#[test]
fn gaussian_laplace_marginal_is_exact() {
    let g = make_lattice(2, 3).unwrap();
    for theta in [[-1.0, 0.0, 0.5], [0.0, 0.0, 0.0], [1.5, 0.5, 2.0]] {
        let case = gaussian_st_case(&g, 3, InteractionType::II, theta, 3);
        // Estimate the same model with free precisions to evaluate the marginal.
        let mut model = case.model.clone();
        for slot in &mut model.slots {
            slot.setting = dcmap_core::inference::HyperSetting::Estimated;
        }
        let lm = log_marginal_theta(&model, &theta).unwrap() - model.log_hyperprior(&theta);
        let exact = gaussian_log_evidence(&case);
        assert!((lm - exact).abs() < 1e-5, "theta {theta:?}: {lm} vs {exact}");
    }
}

/// Newton iterations on the constraint subspace with dense linear algebra.
fn dense_poisson_mode(prior: &DMatrix<f64>, design: &DMatrix<f64>, c: &DMatrix<f64>, y: &[f64], e: &[f64]) -> DVector<f64> {
    let n = prior.nrows();
    let v = null_basis(c, n);
    let mut z = DVector::zeros(v.ncols());
    for _ in 0..100 {
        let x = &v * &z;
        let eta = design * &x;
        let mu: DVector<f64> = DVector::from_iterator(y.len(), (0..y.len()).map(|i| e[i] * eta[i].exp()));
        let resid = DVector::from_iterator(y.len(), (0..y.len()).map(|i| y[i] - mu[i]));
        let grad = v.transpose() * (design.transpose() * resid - prior * &x);
        let h = v.transpose() * (prior + design.transpose() * DMatrix::from_diagonal(&mu) * design) * &v;
        let step = h.cholesky().unwrap().solve(&grad);
        z += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    &v * z
}

#[test]
fn poisson_mode_matches_dense_newton() {
    let g = make_lattice(3, 3).unwrap();
    let spec = SimulationSpec {
        t: 4,
        hyper: HyperParams { sigma2_spatial: 0.09, sigma2_temporal: 0.04, sigma2_interaction: 0.0225, lambda: 1.0 },
        interaction: InteractionType::II,
        base_expected: log_uniform_expected(9, 5.0, 50.0, 2),
        alpha0: 0.0,
        seed: 5,
    };
    let (panel, _) = simulate_panel(&g, &spec).unwrap();
    let panel = expected_counts(&panel, ExpectedMode::Global).unwrap();
    for kind in InteractionType::ALL {
        let built = build_st_model(&panel, SpatialPrior::Icar, kind, &g, &BuildOptions::default()).unwrap();
        let m = &built.model;
        let theta = [0.3, 1.2, 2.0];
        let lap = newton_mode(m, &theta, None).unwrap();
        let (prior, constraints) = dense_st_prior(&g, 4, kind, theta, 1e-5);
        let mut design = DMatrix::zeros(m.n_cells(), m.n_latent);
        for (c, inc) in m.incidence.iter().enumerate() {
            for &j in inc {
                design[(c, j)] = 1.0;
            }
        }
        let y: Vec<f64> = m.observations.iter().map(|v| v.unwrap()).collect();
        let oracle = dense_poisson_mode(&prior, &design, &constraints, &y, &m.offsets);
        for j in 0..m.n_latent {
            assert!((lap.mode[j] - oracle[j]).abs() < 1e-8, "{kind} entry {j}: {} vs {}", lap.mode[j], oracle[j]);
        }
    }
}

#[test]
fn conjugate_rate_mean_matches_quadrature() {
    let case = ConjugateCase { shape: 2.0, rate: 0.5, counts: vec![12, 7, 20, 15, 9], exposure: vec![4.0, 3.0, 6.0, 5.0, 2.5] };
    let r = fit(&case.model(), &no_draws()).unwrap();
    let mix = &r.latent_mixture;
    let mean: f64 = mix
        .weights
        .iter()
        .zip(&mix.means)
        .zip(&mix.sds)
        .map(|((w, m), s)| w * (m[0] + 0.5 * s[0] * s[0]).exp())
        .sum();
    let exact = case.posterior_shape() / case.posterior_rate();
    assert!((case.quadrature_mean() - exact).abs() < 1e-8 * exact);
    assert!((mean / exact - 1.0).abs() < 0.02, "{mean} vs {exact}");
}
