//! Laplace-approximate inference for Poisson latent Gaussian models.

mod explore;
mod marginal;
mod model;
mod newton;
mod summaries;

use std::time::Instant;

pub use explore::{explore_hyperparameters, explore_with, grid_design, Explored, HyperGrid, ThetaPoint};
pub use marginal::{log_marginal_at, log_marginal_theta};
pub use model::{
    logistic, BlockPrior, BlockSpec, HyperKind, HyperSetting, HyperSlot, LatentBlock, LatentModel, Likelihood,
    ModelOptions, PrecisionPrior,
};
pub use newton::{newton_mode, Laplace};
pub use summaries::{latent_marginals, normal_cdf, DrawMatrix, FitResult, HyperSummary, Mixture, SummaryOptions};

use crate::error::Result;

/// Full fit: hyperparameter search, integration grid and marginal summaries.
pub fn fit(model: &LatentModel, options: &SummaryOptions) -> Result<FitResult> {
    let start = Instant::now();
    let grid = explore_hyperparameters(model)?;
    log::debug!(
        "hyperparameter search: {} evaluations in {:.2}s",
        grid.evaluations,
        start.elapsed().as_secs_f64()
    );
    let mut result = latent_marginals(model, grid, options)?;
    result.runtime_secs = start.elapsed().as_secs_f64();
    for w in &result.warnings {
        log::warn!("{w}");
    }
    Ok(result)
}
