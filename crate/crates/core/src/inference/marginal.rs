//! Laplace approximation of the hyperparameter log posterior.

use crate::error::Result;
use crate::inference::model::LatentModel;
use crate::inference::newton::{newton_mode, Laplace};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Unnormalised log posterior of `theta` given the Gaussian approximation
/// `lap` at the conditional mode.
pub fn log_marginal_at(model: &LatentModel, theta: &[f64], lap: &Laplace<'_>) -> f64 {
    let full = model.full_theta(theta);
    let x = &lap.mode;
    let eta = model.linear_predictor(x);
    let n_free = (model.n_latent - model.n_constraints()) as f64;
    let log_gauss =
        -0.5 * n_free * LN_2PI + 0.5 * lap.factor.log_det() + 0.5 * lap.log_det_ccov() - 0.5 * model.log_det_cct();
    model.log_likelihood(&eta) + model.log_prior_density(&full, x) + model.log_hyperprior(theta) - log_gauss
}

/// Locates the conditional mode at `theta` and returns the Laplace
/// approximation of `log pi(theta | y)` up to a constant.
pub fn log_marginal_theta(model: &LatentModel, theta: &[f64]) -> Result<f64> {
    let lap = newton_mode(model, theta, None)?;
    Ok(log_marginal_at(model, theta, &lap))
}
