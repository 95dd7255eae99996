//! Precision structures for the latent prior components.
//!
//! Every structure carries its rank deficiency and a set of linear
//! constraints whose rows span the null space of the matrix. Kronecker
//! products use the space-fastest layout: entry `(area i, period t)` sits at
//! `t * S + i`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::sparse::SparseMatrix;

/// Sparse symmetric non-negative-definite matrix with declared null space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionStructure {
    pub matrix: SparseMatrix,
    pub rank_deficiency: usize,
    /// Rows are linear functionals constrained to zero.
    pub constraints: SparseMatrix,
    pub scaled: bool,
    /// Multiplier applied by [`scale_precision`] (1 when unscaled).
    pub scale_factor: f64,
    /// Log of the product of non-zero eigenvalues.
    pub log_pdet: f64,
}

impl PrecisionStructure {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.rank_deficiency
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.nrows()
    }

    /// Constrained generalized inverse `(Q + V V')^{-1} - V V'`, where `V`
    /// is an orthonormal basis of the constraint row space. Dense.
    pub fn constrained_inverse(&self) -> Result<DMatrix<f64>> {
        let v = orthonormal_rows(&self.constraints);
        let vvt = v.transpose() * &v;
        let aug = self.matrix.to_dense() + &vvt;
        let n = aug.nrows();
        let chol = aug
            .cholesky()
            .ok_or_else(|| Error::structure("matrix is singular beyond its declared rank deficiency"))?;
        let l = chol.l();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = l[(i, i)] * l[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if n > 0 && lo < 1e-12 * hi {
            return Err(Error::structure(
                "matrix is numerically singular beyond its declared rank deficiency",
            ));
        }
        Ok(chol.inverse() - vvt)
    }
}

/// Gram-Schmidt orthonormalisation of the (dense) constraint rows.
fn orthonormal_rows(c: &SparseMatrix) -> DMatrix<f64> {
    let dense = c.to_dense();
    let mut rows: Vec<nalgebra::RowDVector<f64>> = Vec::new();
    for r in 0..dense.nrows() {
        let mut v = dense.row(r).into_owned();
        for _ in 0..2 {
            for u in &rows {
                let proj = v.dot(u);
                v -= u * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-10 {
            rows.push(v / norm);
        }
    }
    let mut out = DMatrix::zeros(rows.len(), c.ncols());
    for (i, r) in rows.iter().enumerate() {
        out.set_row(i, r);
    }
    out
}

/// Variance and mixing hyperparameters on the user scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub sigma2_spatial: f64,
    pub sigma2_temporal: f64,
    pub sigma2_interaction: f64,
    /// Share of spatial variance carried by the structured part (BYM2).
    pub lambda: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_spatial", self.sigma2_spatial),
            ("sigma2_temporal", self.sigma2_temporal),
            ("sigma2_interaction", self.sigma2_interaction),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::input(format!("{name} must be a positive variance, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::input(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Intrinsic CAR precision: degree diagonal minus adjacency, one
/// sum-to-zero constraint per connected component.
pub fn icar_precision(graph: &AreaGraph) -> Result<PrecisionStructure> {
    let n = graph.n_areas();
    if n == 0 {
        return Err(Error::structure("ICAR precision needs a non-empty graph"));
    }
    let mut t = Vec::with_capacity(n + 2 * graph.n_edges());
    for (i, d) in graph.degree().into_iter().enumerate() {
        t.push((i, i, d as f64));
    }
    for (a, b) in graph.edges() {
        t.push((a, b, -1.0));
        t.push((b, a, -1.0));
    }
    let matrix = SparseMatrix::from_triplets(n, n, &t);
    let comps = graph.components();
    let ct: Vec<_> = comps
        .iter()
        .enumerate()
        .flat_map(|(k, members)| members.iter().map(move |&i| (k, i, 1.0)))
        .collect();
    let constraints = SparseMatrix::from_triplets(comps.len(), n, &ct);
    let mut q = PrecisionStructure {
        matrix,
        rank_deficiency: comps.len(),
        constraints,
        scaled: false,
        scale_factor: 1.0,
        log_pdet: 0.0,
    };
    q.log_pdet = log_pdet_dense(&q)?;
    Ok(q)
}

/// First-order random walk precision over `t` periods.
pub fn rw1_precision(t: usize) -> Result<PrecisionStructure> {
    if t < 2 {
        return Err(Error::input(format!("RW1 needs at least 2 periods, got {t}")));
    }
    let mut trip = Vec::with_capacity(3 * t);
    for i in 0..t - 1 {
        trip.push((i, i, 1.0));
        trip.push((i + 1, i + 1, 1.0));
        trip.push((i, i + 1, -1.0));
        trip.push((i + 1, i, -1.0));
    }
    let matrix = SparseMatrix::from_triplets(t, t, &trip);
    let ct: Vec<_> = (0..t).map(|i| (0, i, 1.0)).collect();
    let mut q = PrecisionStructure {
        matrix,
        rank_deficiency: 1,
        constraints: SparseMatrix::from_triplets(1, t, &ct),
        scaled: false,
        scale_factor: 1.0,
        log_pdet: 0.0,
    };
    q.log_pdet = log_pdet_dense(&q)?;
    Ok(q)
}

fn log_pdet_dense(q: &PrecisionStructure) -> Result<f64> {
    // det(Q + V V') equals the pseudo-determinant when V spans the null space.
    let v = orthonormal_rows(&q.constraints);
    let aug = q.matrix.to_dense() + v.transpose() * &v;
    let chol = aug
        .cholesky()
        .ok_or_else(|| Error::structure("matrix is singular beyond its declared rank deficiency"))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Rescales `q` so the geometric mean of the constrained generalized-inverse
/// diagonal is one. Areas whose marginal variance is zero (singleton
/// components) are left out of the mean.
pub fn scale_precision(q: &PrecisionStructure) -> Result<PrecisionStructure> {
    let sigma = q.constrained_inverse()?;
    let diag = sigma.diagonal();
    let max = diag.iter().fold(0.0f64, |m, &v| m.max(v));
    let logs: Vec<f64> = diag.iter().filter(|&&v| v > 1e-12 * max).map(|v| v.ln()).collect();
    if logs.is_empty() {
        return Err(Error::structure("cannot scale a structure with no variable entries"));
    }
    let factor = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    Ok(PrecisionStructure {
        matrix: q.matrix.scaled(factor),
        rank_deficiency: q.rank_deficiency,
        constraints: q.constraints.clone(),
        scaled: true,
        scale_factor: q.scale_factor * factor,
        log_pdet: q.log_pdet + q.rank() as f64 * factor.ln(),
    })
}

/// Reparameterized convolution prior: `xi = sigma (sqrt(lambda) u + sqrt(1-lambda) v)`
/// with `u` a scaled ICAR field and `v` iid standard normal.
///
/// In a latent model the block is stored as `(xi, u)`, so it takes `2 S`
/// entries; the sum-to-zero constraints act on `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bym2Spec {
    pub structure: PrecisionStructure,
}

impl Bym2Spec {
    pub fn n_areas(&self) -> usize {
        self.structure.dim()
    }

    /// Dense marginal covariance of `xi`: `sigma2 (lambda Sigma* + (1 - lambda) I)`.
    pub fn marginal_covariance(&self, sigma2: f64, lambda: f64) -> Result<DMatrix<f64>> {
        let n = self.n_areas();
        let sigma = self.structure.constrained_inverse()?;
        Ok((sigma * lambda + DMatrix::identity(n, n) * (1.0 - lambda)) * sigma2)
    }

    /// Joint precision blocks of `(xi, u)` for precision `tau = 1/sigma2`
    /// and `0 < lambda < 1`: returns `(xi-xi diag, xi-u diag, u-u extra diag)`;
    /// the `u-u` block is `Q* + extra * I`.
    pub fn joint_coefficients(tau: f64, lambda: f64) -> (f64, f64, f64) {
        let one_minus = 1.0 - lambda;
        (
            tau / one_minus,
            -(tau * lambda).sqrt() / one_minus,
            lambda / one_minus,
        )
    }
}

/// Builds the convolution prior from a scaled spatial structure.
pub fn bym2_effect_spec(q_scaled: &PrecisionStructure) -> Result<Bym2Spec> {
    if !q_scaled.scaled {
        return Err(Error::structure("BYM2 requires a scaled spatial structure"));
    }
    Ok(Bym2Spec {
        structure: q_scaled.clone(),
    })
}

/// Space-time interaction classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InteractionType {
    /// Unstructured.
    I,
    /// Structured in time, independent across areas.
    II,
    /// Structured in space, independent across periods.
    III,
    /// Structured in space and time.
    IV,
}

impl InteractionType {
    pub const ALL: [InteractionType; 4] = [
        InteractionType::I,
        InteractionType::II,
        InteractionType::III,
        InteractionType::IV,
    ];

    pub fn number(self) -> u8 {
        match self {
            InteractionType::I => 1,
            InteractionType::II => 2,
            InteractionType::III => 3,
            InteractionType::IV => 4,
        }
    }
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InteractionType::I => "TypeI",
            InteractionType::II => "TypeII",
            InteractionType::III => "TypeIII",
            InteractionType::IV => "TypeIV",
        };
        f.write_str(s)
    }
}

impl FromStr for InteractionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let t = t.strip_prefix("TYPE").unwrap_or(&t).trim();
        match t {
            "1" | "I" => Ok(InteractionType::I),
            "2" | "II" => Ok(InteractionType::II),
            "3" | "III" => Ok(InteractionType::III),
            "4" | "IV" => Ok(InteractionType::IV),
            _ => Err(Error::input(format!("unknown interaction type '{s}' (expected 1-4)"))),
        }
    }
}

/// Kronecker interaction structure over `S` areas and `T` periods.
///
/// Disconnected spatial structures get per-(component, period) constraints
/// for Types III and IV; Type IV drops the last-period row of every
/// component, which is implied by the per-area rows.
pub fn interaction_precision(
    kind: InteractionType,
    q_spatial: &PrecisionStructure,
    q_temporal: &PrecisionStructure,
) -> Result<PrecisionStructure> {
    let s = q_spatial.dim();
    let t = q_temporal.dim();
    let eye_s = SparseMatrix::identity(s);
    let eye_t = SparseMatrix::identity(t);
    let temporal_rows = || q_temporal.constraints.kron(&eye_s);
    let spatial_rows = || eye_t.kron(&q_spatial.constraints);
    let scaled = q_spatial.scaled && q_temporal.scaled;

    let (matrix, constraints, deficiency, log_pdet) = match kind {
        InteractionType::I => (
            SparseMatrix::identity(s * t),
            SparseMatrix::zeros(0, s * t),
            0,
            0.0,
        ),
        InteractionType::II => (
            q_temporal.matrix.kron(&eye_s),
            temporal_rows(),
            s * q_temporal.rank_deficiency,
            s as f64 * q_temporal.log_pdet,
        ),
        InteractionType::III => (
            eye_t.kron(&q_spatial.matrix),
            spatial_rows(),
            t * q_spatial.rank_deficiency,
            t as f64 * q_spatial.log_pdet,
        ),
        InteractionType::IV => {
            let k = q_spatial.rank_deficiency;
            let per_area = temporal_rows();
            let per_period = spatial_rows();
            let mut trip = per_area.triplets();
            let base = per_area.nrows();
            // Keep rows for periods 0..t-1; the last period is redundant.
            trip.extend(
                per_period
                    .triplets()
                    .into_iter()
                    .filter(|&(r, _, _)| r < (t - 1) * k)
                    .map(|(r, c, v)| (base + r, c, v)),
            );
            let m = base + (t - 1) * k;
            let rank = q_spatial.rank() * q_temporal.rank();
            (
                q_temporal.matrix.kron(&q_spatial.matrix),
                SparseMatrix::from_triplets(m, s * t, &trip),
                s * t - rank,
                q_spatial.rank() as f64 * q_temporal.log_pdet + q_temporal.rank() as f64 * q_spatial.log_pdet,
            )
        }
    };
    if matches!(kind, InteractionType::II | InteractionType::IV) && q_temporal.rank_deficiency != 1 {
        return Err(Error::structure("temporal structure must have a single null direction"));
    }
    Ok(PrecisionStructure {
        matrix,
        rank_deficiency: deficiency,
        constraints,
        scaled: scaled || kind == InteractionType::I,
        scale_factor: 1.0,
        log_pdet,
    })
}
