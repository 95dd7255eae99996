//! Constrained Newton iteration for the conditional mode of the latent field.

use nalgebra::{DMatrix, DVector};

use crate::cholesky::CholeskyFactor;
use crate::error::{Error, Result};
use crate::inference::model::LatentModel;

const MAX_ITERATIONS: usize = 50;
const STEP_TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 40;

/// Gaussian approximation of the latent field at a point: factor of the
/// posterior precision plus the constraint correction terms.
pub struct Laplace<'a> {
    pub mode: Vec<f64>,
    pub factor: CholeskyFactor<'a>,
    /// `H^{-1} C'`, one column per constraint.
    pub w: DMatrix<f64>,
    /// Cholesky factor of `C H^{-1} C'`.
    pub ccov_l: DMatrix<f64>,
    pub iterations: usize,
}

impl<'a> Laplace<'a> {
    /// Builds the approximation at `x` for the hyperparameters `full`, with
    /// the model jitter multiplied by `jitter_scale`.
    pub(crate) fn at(model: &'a LatentModel, full: &[f64], x: Vec<f64>, jitter_scale: f64) -> Result<Self> {
        let eta = model.linear_predictor(&x);
        let (_, curvature) = model.gradient_curvature(&eta);
        let mut vals = model.prior_values(full, jitter_scale);
        model.add_curvature(&mut vals, &curvature);
        let factor = model.symbolic().factor(&vals)?;
        let (w, ccov_l) = constraint_terms(model, &factor)?;
        Ok(Self {
            mode: x,
            factor,
            w,
            ccov_l,
            iterations: 0,
        })
    }

    /// Removes from `v` its component along the constraints: `v - W (C W)^{-1} C v`.
    pub fn condition(&self, model: &LatentModel, v: &mut [f64]) {
        if self.w.ncols() == 0 {
            return;
        }
        let cv = DVector::from_vec(model.constraints.mul_vec(v));
        let coef = chol_solve(&self.ccov_l, cv);
        let shift = &self.w * coef;
        for (vi, s) in v.iter_mut().zip(shift.iter()) {
            *vi -= s;
        }
    }

    /// `log |C H^{-1} C'|`.
    pub fn log_det_ccov(&self) -> f64 {
        2.0 * self.ccov_l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Rows of `R^{-1} W'` where `R R' = C H^{-1} C'`; the constrained
    /// covariance is `H^{-1} - Z' Z` with `Z` the returned `m x n` matrix.
    pub fn correction_factor(&self) -> DMatrix<f64> {
        if self.w.ncols() == 0 {
            return DMatrix::zeros(0, self.mode.len());
        }
        let wt = self.w.transpose();
        self.ccov_l
            .clone()
            .solve_lower_triangular(&wt)
            .expect("constraint covariance factor is non-singular")
    }
}

fn chol_solve(l: &DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(&b).expect("non-singular factor");
    l.transpose().solve_upper_triangular(&y).expect("non-singular factor")
}

fn constraint_terms(model: &LatentModel, factor: &CholeskyFactor<'_>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = model.n_constraints();
    let n = model.n_latent;
    if m == 0 {
        return Ok((DMatrix::zeros(n, 0), DMatrix::zeros(0, 0)));
    }
    let mut rhs = vec![0.0; n * m];
    for r in 0..m {
        let (cols, vals) = model.constraints.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            rhs[c * m + r] = v;
        }
    }
    let w = DMatrix::from_row_slice(n, m, &factor.solve_many(&rhs, m));
    let mut ccov = DMatrix::zeros(m, m);
    for r in 0..m {
        let (cols, vals) = model.constraints.row(r);
        for k in 0..m {
            ccov[(r, k)] = cols.iter().zip(vals).map(|(&c, &v)| v * w[(c, k)]).sum();
        }
    }
    let sym = (&ccov + ccov.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::fit("constraint covariance is not positive definite"))?;
    Ok((w, chol.l()))
}

/// Finds the mode of the latent field subject to the constraints for the
/// estimated hyperparameters `theta`, starting from `warm` when given.
pub fn newton_mode<'a>(model: &'a LatentModel, theta: &[f64], warm: Option<&[f64]>) -> Result<Laplace<'a>> {
    let full = model.full_theta(theta);
    if full.iter().any(|t| !t.is_finite()) {
        return Err(Error::fit("hyperparameters must be finite"));
    }
    let mut x = match warm {
        Some(w) if w.len() == model.n_latent => w.to_vec(),
        _ => vec![0.0; model.n_latent],
    };
    let mut objective = model.objective(&full, &x);
    if !objective.is_finite() {
        x = vec![0.0; model.n_latent];
        objective = model.objective(&full, &x);
    }
    let mut last_step = f64::INFINITY;
    let mut grad_norm = f64::INFINITY;
    for iter in 0..MAX_ITERATIONS {
        let lap = Laplace::at(model, &full, x, 1.0)?;
        x = lap.mode.clone();
        let eta = model.linear_predictor(&x);
        let (g_lik, _) = model.gradient_curvature(&eta);
        let mut grad = model.scatter(&g_lik);
        let qx = model.prior_precision_times(&full, &x);
        for (g, q) in grad.iter_mut().zip(&qx) {
            *g -= q;
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut step = lap.factor.solve(&grad);
        lap.condition(model, &mut step);
        last_step = step.iter().fold(0.0, |m, v| m.max(v.abs()));
        if last_step < STEP_TOLERANCE {
            // Refactor at the final point: log-determinants are first-order
            // sensitive to the mode.
            for (xi, s) in x.iter_mut().zip(&step) {
                *xi += s;
            }
            let mut out = Laplace::at(model, &full, x, 1.0)?;
            out.iterations = iter + 1;
            return Ok(out);
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
            let value = model.objective(&full, &trial);
            if value.is_finite() && value >= objective - 1e-10 * (1.0 + objective.abs()) {
                x = trial;
                objective = value.max(objective);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::fit(format!(
                "mode search stalled: no ascent along the Newton direction (step {last_step:.3e})"
            )));
        }
    }
    Err(Error::fit(format!(
        "mode search did not converge in {MAX_ITERATIONS} iterations (gradient norm {grad_norm:.3e}, last step {last_step:.3e})"
    )))
}
