//! Latent Gaussian model description and the per-hyperparameter assembly of
//! its prior and posterior precision matrices.

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::cholesky::SymbolicCholesky;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::structures::{Bym2Spec, PrecisionStructure};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observation model for each cell, conditional on its linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// `y ~ Poisson(e * exp(eta))`.
    Poisson,
    /// `y ~ N(eta, 1 / noise_precision)`; offsets are ignored.
    Gaussian { noise_precision: f64 },
}

impl Likelihood {
    pub fn log_density(&self, y: f64, offset: f64, eta: f64) -> f64 {
        match *self {
            Likelihood::Poisson => {
                let mu = offset * eta.exp();
                if y == 0.0 {
                    -mu
                } else {
                    y * mu.ln() - mu - ln_gamma(y + 1.0)
                }
            }
            Likelihood::Gaussian { noise_precision } => {
                let r = y - eta;
                0.5 * (noise_precision.ln() - LN_2PI) - 0.5 * noise_precision * r * r
            }
        }
    }

    /// First derivative and negative second derivative in `eta`.
    pub fn gradient_curvature(&self, y: f64, offset: f64, eta: f64) -> (f64, f64) {
        match *self {
            Likelihood::Poisson => {
                let mu = offset * eta.exp();
                (y - mu, mu)
            }
            Likelihood::Gaussian { noise_precision } => (noise_precision * (y - eta), noise_precision),
        }
    }
}

/// Gamma(shape, rate) prior on every estimated block precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for PrecisionPrior {
    fn default() -> Self {
        Self { shape: 1.0, rate: 5e-5 }
    }
}

impl PrecisionPrior {
    /// Log density of `theta = log(tau)`, Jacobian included.
    pub fn log_density_log_precision(&self, theta: f64) -> f64 {
        let (a, b) = (self.shape, self.rate);
        a * b.ln() - ln_gamma(a) + a * theta - b * theta.exp()
    }
}

/// How a hyperparameter slot is treated by the search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperSetting {
    Estimated,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperKind {
    /// `theta = log(tau)`; reported as the standard deviation `exp(-theta/2)`.
    LogPrecision,
    /// `theta = logit(lambda)` with a uniform prior on `lambda`.
    LogitMixing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperSlot {
    pub name: String,
    pub kind: HyperKind,
    pub setting: HyperSetting,
}

impl HyperSlot {
    /// Value on the reporting scale (standard deviation or mixing share).
    pub fn user_value(&self, theta: f64) -> f64 {
        match self.kind {
            HyperKind::LogPrecision => (-0.5 * theta).exp(),
            HyperKind::LogitMixing => logistic(theta),
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Prior of one latent block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockPrior {
    /// `N(0, I / precision)` with known precision.
    FixedIid { precision: f64 },
    /// `N(0, (tau Q)^-)` subject to the structure's constraints.
    Structured(PrecisionStructure),
    /// Convolution prior stored as `(xi, u)`.
    Bym2(Bym2Spec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub name: String,
    pub prior: BlockPrior,
    /// Settings for the block's hyperparameters: none for `FixedIid`, the
    /// log-precision for `Structured`, log-precision then logit-mixing for `Bym2`.
    pub hyper: Vec<HyperSetting>,
}

impl LatentBlock {
    pub fn fixed_iid(name: &str, precision: f64) -> Self {
        Self {
            name: name.into(),
            prior: BlockPrior::FixedIid { precision },
            hyper: vec![],
        }
    }

    pub fn structured(name: &str, q: PrecisionStructure) -> Self {
        Self {
            name: name.into(),
            prior: BlockPrior::Structured(q),
            hyper: vec![HyperSetting::Estimated],
        }
    }

    pub fn bym2(name: &str, spec: Bym2Spec) -> Self {
        Self {
            name: name.into(),
            prior: BlockPrior::Bym2(spec),
            hyper: vec![HyperSetting::Estimated, HyperSetting::Estimated],
        }
    }

    pub fn with_hyper(mut self, hyper: Vec<HyperSetting>) -> Self {
        self.hyper = hyper;
        self
    }
}

/// Block sizes are implied by the priors; `FixedIid` blocks take their size
/// from the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub block: LatentBlock,
    pub size: usize,
}

/// Model-wide settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    pub precision_prior: PrecisionPrior,
    /// Diagonal regularization of rank-deficient blocks, relative to the
    /// block precision.
    pub jitter: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            precision_prior: PrecisionPrior::default(),
            jitter: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Coef {
    /// `tau * value`.
    Scaled(f64),
    /// Fixed value.
    Constant(f64),
    Bym2XiXi,
    Bym2XiU,
    /// `Q*` entry plus `extra` on the diagonal when `diag`.
    Bym2Uu { q: f64, diag: bool },
    /// `tau * jitter` on rank-deficient diagonals.
    Jitter,
}

#[derive(Debug, Clone, Copy)]
struct PriorTerm {
    slot: usize,
    block: usize,
    coef: Coef,
}

/// Poisson or Gaussian latent Gaussian model with sum-to-zero constraints.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub likelihood: Likelihood,
    pub offsets: Vec<f64>,
    pub observations: Vec<Option<f64>>,
    /// Latent entries summed into each cell's linear predictor.
    pub incidence: Vec<Vec<usize>>,
    pub blocks: Vec<LatentBlock>,
    pub block_offsets: Vec<usize>,
    pub block_sizes: Vec<usize>,
    pub n_latent: usize,
    /// Global constraint rows (`m x n_latent`).
    pub constraints: SparseMatrix,
    pub options: ModelOptions,
    pub slots: Vec<HyperSlot>,
    /// Index of the first slot of each block.
    slot_start: Vec<usize>,
    log_det_cct: f64,
    symbolic: SymbolicCholesky,
    prior_terms: Vec<PriorTerm>,
    /// `(value slot, cell)` for each incidence pair of each cell.
    lik_terms: Vec<(usize, usize)>,
}

impl LatentModel {
    pub fn new(
        likelihood: Likelihood,
        offsets: Vec<f64>,
        observations: Vec<Option<f64>>,
        incidence: Vec<Vec<usize>>,
        blocks: Vec<BlockSpec>,
        options: ModelOptions,
    ) -> Result<Self> {
        let n_cells = incidence.len();
        if offsets.len() != n_cells || observations.len() != n_cells {
            return Err(Error::input("offsets, observations and incidence differ in length"));
        }
        if matches!(likelihood, Likelihood::Poisson) {
            if let Some(bad) = offsets.iter().position(|&e| !(e > 0.0) || !e.is_finite()) {
                return Err(Error::input(format!("offset of cell {bad} must be positive, got {}", offsets[bad])));
            }
            if let Some(bad) = observations
                .iter()
                .position(|y| y.is_some_and(|y| y < 0.0 || y.fract() != 0.0))
            {
                return Err(Error::input(format!("cell {bad} has a non-count observation")));
            }
        }

        let mut block_offsets = Vec::with_capacity(blocks.len());
        let mut block_sizes = Vec::with_capacity(blocks.len());
        let mut n_latent = 0;
        for spec in &blocks {
            let size = match &spec.block.prior {
                BlockPrior::FixedIid { .. } => spec.size,
                BlockPrior::Structured(q) => q.dim(),
                BlockPrior::Bym2(b) => 2 * b.n_areas(),
            };
            if size != spec.size {
                return Err(Error::input(format!(
                    "block '{}' declares size {} but its prior has {size}",
                    spec.block.name, spec.size
                )));
            }
            block_offsets.push(n_latent);
            block_sizes.push(size);
            n_latent += size;
        }
        for (c, inc) in incidence.iter().enumerate() {
            let mut sorted = inc.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != inc.len() {
                return Err(Error::input(format!("cell {c} repeats a latent entry")));
            }
            if let Some(&bad) = inc.iter().find(|&&j| j >= n_latent) {
                return Err(Error::input(format!("cell {c} references latent entry {bad} of {n_latent}")));
            }
        }

        let blocks: Vec<LatentBlock> = blocks.into_iter().map(|b| b.block).collect();
        let mut slots = Vec::new();
        let mut slot_start = Vec::with_capacity(blocks.len());
        for b in &blocks {
            slot_start.push(slots.len());
            let kinds: &[HyperKind] = match b.prior {
                BlockPrior::FixedIid { .. } => &[],
                BlockPrior::Structured(_) => &[HyperKind::LogPrecision],
                BlockPrior::Bym2(_) => &[HyperKind::LogPrecision, HyperKind::LogitMixing],
            };
            if b.hyper.len() != kinds.len() {
                return Err(Error::input(format!(
                    "block '{}' needs {} hyperparameter settings",
                    b.name,
                    kinds.len()
                )));
            }
            for (k, &kind) in kinds.iter().enumerate() {
                let suffix = match kind {
                    HyperKind::LogPrecision => "sd",
                    HyperKind::LogitMixing => "lambda",
                };
                slots.push(HyperSlot {
                    name: format!("{suffix}_{}", b.name),
                    kind,
                    setting: b.hyper[k],
                });
            }
        }

        // Constraint rows, block by block.
        let mut ct = Vec::new();
        let mut m = 0;
        for (bi, b) in blocks.iter().enumerate() {
            let (rows, shift) = match &b.prior {
                BlockPrior::FixedIid { .. } => continue,
                BlockPrior::Structured(q) => (&q.constraints, block_offsets[bi]),
                BlockPrior::Bym2(s) => (&s.structure.constraints, block_offsets[bi] + s.n_areas()),
            };
            for (r, c, v) in rows.triplets() {
                ct.push((m + r, shift + c, v));
            }
            m += rows.nrows();
        }
        let constraints = SparseMatrix::from_triplets(m, n_latent, &ct);
        let log_det_cct = if m == 0 {
            0.0
        } else {
            let c = constraints.to_dense();
            let cct = &c * c.transpose();
            let chol = cct
                .cholesky()
                .ok_or_else(|| Error::structure("constraint rows are linearly dependent"))?;
            2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
        };

        // Pattern: every diagonal, every prior entry, every incidence pair.
        let mut entries: Vec<(usize, usize)> = (0..n_latent).map(|i| (i, i)).collect();
        let mut pending: Vec<(usize, usize, usize, Coef)> = Vec::new();
        for (bi, b) in blocks.iter().enumerate() {
            let off = block_offsets[bi];
            match &b.prior {
                BlockPrior::FixedIid { precision } => {
                    for i in 0..block_sizes[bi] {
                        pending.push((off + i, off + i, bi, Coef::Constant(*precision)));
                    }
                }
                BlockPrior::Structured(q) => {
                    for (r, c, v) in q.matrix.triplets() {
                        if r <= c {
                            pending.push((off + r, off + c, bi, Coef::Scaled(v)));
                        }
                    }
                    if q.rank_deficiency > 0 {
                        for i in 0..q.dim() {
                            pending.push((off + i, off + i, bi, Coef::Jitter));
                        }
                    }
                }
                BlockPrior::Bym2(s) => {
                    let n = s.n_areas();
                    let u = off + n;
                    for i in 0..n {
                        pending.push((off + i, off + i, bi, Coef::Bym2XiXi));
                        pending.push((off + i, u + i, bi, Coef::Bym2XiU));
                        pending.push((u + i, u + i, bi, Coef::Bym2Uu { q: 0.0, diag: true }));
                    }
                    for (r, c, v) in s.structure.matrix.triplets() {
                        if r <= c {
                            pending.push((u + r, u + c, bi, Coef::Bym2Uu { q: v, diag: false }));
                        }
                    }
                }
            }
        }
        let prior_start = entries.len();
        entries.extend(pending.iter().map(|&(r, c, _, _)| (r, c)));
        let lik_start = entries.len();
        let mut lik_cells = Vec::new();
        for (cell, inc) in incidence.iter().enumerate() {
            for (a, &j) in inc.iter().enumerate() {
                for &k in &inc[a..] {
                    entries.push((j, k));
                    lik_cells.push(cell);
                }
            }
        }
        let symbolic = SymbolicCholesky::analyze(n_latent, &entries);
        let prior_terms = pending
            .iter()
            .enumerate()
            .map(|(k, &(_, _, block, coef))| PriorTerm {
                slot: symbolic.slot(prior_start + k),
                block,
                coef,
            })
            .collect();
        let lik_terms = lik_cells
            .iter()
            .enumerate()
            .map(|(k, &cell)| (symbolic.slot(lik_start + k), cell))
            .collect();

        Ok(Self {
            likelihood,
            offsets,
            observations,
            incidence,
            blocks,
            block_offsets,
            block_sizes,
            n_latent,
            constraints,
            options,
            slots,
            slot_start,
            log_det_cct,
            symbolic,
            prior_terms,
            lik_terms,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.incidence.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.nrows()
    }

    pub fn symbolic(&self) -> &SymbolicCholesky {
        &self.symbolic
    }

    pub fn log_det_cct(&self) -> f64 {
        self.log_det_cct
    }

    /// Number of estimated hyperparameters.
    pub fn n_free(&self) -> usize {
        self.slots.iter().filter(|s| s.setting == HyperSetting::Estimated).count()
    }

    /// Starting point of the search: zero on every estimated slot.
    pub fn initial_theta(&self) -> Vec<f64> {
        vec![0.0; self.n_free()]
    }

    /// Expands the estimated hyperparameters into a value for every slot.
    pub fn full_theta(&self, free: &[f64]) -> Vec<f64> {
        assert_eq!(free.len(), self.n_free(), "hyperparameter vector length");
        let mut it = free.iter();
        self.slots
            .iter()
            .map(|s| match s.setting {
                HyperSetting::Estimated => *it.next().unwrap(),
                HyperSetting::Fixed(v) => v,
            })
            .collect()
    }

    fn block_theta<'a>(&self, full: &'a [f64], block: usize) -> &'a [f64] {
        let start = self.slot_start[block];
        let end = self.slot_start.get(block + 1).copied().unwrap_or(self.slots.len());
        &full[start..end]
    }

    /// Log hyperprior density of the estimated slots.
    pub fn log_hyperprior(&self, free: &[f64]) -> f64 {
        let mut it = free.iter();
        let mut total = 0.0;
        for s in &self.slots {
            if s.setting != HyperSetting::Estimated {
                continue;
            }
            let th = *it.next().unwrap();
            total += match s.kind {
                HyperKind::LogPrecision => self.options.precision_prior.log_density_log_precision(th),
                HyperKind::LogitMixing => {
                    let l = logistic(th);
                    l.ln() + (1.0 - l).ln()
                }
            };
        }
        total
    }

    /// Prior-precision values in slot order, with the jitter multiplied by
    /// `jitter_scale`.
    pub(crate) fn prior_values(&self, full: &[f64], jitter_scale: f64) -> Vec<f64> {
        let params: Vec<(f64, f64)> = (0..self.blocks.len())
            .map(|b| {
                let th = self.block_theta(full, b);
                let tau = th.first().map(|t| t.exp()).unwrap_or(1.0);
                let lambda = th.get(1).map(|&t| logistic(t)).unwrap_or(0.0);
                (tau, lambda)
            })
            .collect();
        let mut vals = vec![0.0; self.symbolic.n_values()];
        for term in &self.prior_terms {
            let (tau, lambda) = params[term.block];
            let (xx, xu, extra) = Bym2Spec::joint_coefficients(tau, lambda);
            vals[term.slot] += match term.coef {
                Coef::Scaled(v) => tau * v,
                Coef::Constant(v) => v,
                Coef::Jitter => tau * self.options.jitter * jitter_scale,
                Coef::Bym2XiXi => xx,
                Coef::Bym2XiU => xu,
                Coef::Bym2Uu { q, diag } => q + if diag { extra } else { 0.0 },
            };
        }
        vals
    }

    /// Adds likelihood curvature to prior-precision values.
    pub(crate) fn add_curvature(&self, vals: &mut [f64], curvature: &[f64]) {
        for &(slot, cell) in &self.lik_terms {
            vals[slot] += curvature[cell];
        }
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        self.incidence
            .iter()
            .map(|inc| inc.iter().map(|&j| x[j]).sum())
            .collect()
    }

    /// `A' v` for a per-cell vector `v`.
    pub(crate) fn scatter(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_latent];
        for (inc, &vc) in self.incidence.iter().zip(v) {
            for &j in inc {
                out[j] += vc;
            }
        }
        out
    }

    pub fn log_likelihood(&self, eta: &[f64]) -> f64 {
        self.observations
            .iter()
            .zip(&self.offsets)
            .zip(eta)
            .filter_map(|((y, &e), &h)| y.map(|y| self.likelihood.log_density(y, e, h)))
            .sum()
    }

    /// Per-cell gradient and curvature; zero for missing cells.
    pub(crate) fn gradient_curvature(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; eta.len()];
        let mut d = vec![0.0; eta.len()];
        for (c, &h) in eta.iter().enumerate() {
            if let Some(y) = self.observations[c] {
                let (gc, dc) = self.likelihood.gradient_curvature(y, self.offsets[c], h);
                g[c] = gc;
                d[c] = dc;
            }
        }
        (g, d)
    }

    /// `Q(theta) x` with the exact (unjittered) prior precision.
    pub(crate) fn prior_precision_times(&self, full: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_latent];
        for (bi, b) in self.blocks.iter().enumerate() {
            let off = self.block_offsets[bi];
            let th = self.block_theta(full, bi);
            match &b.prior {
                BlockPrior::FixedIid { precision } => {
                    for i in 0..self.block_sizes[bi] {
                        out[off + i] = precision * x[off + i];
                    }
                }
                BlockPrior::Structured(q) => {
                    let tau = th[0].exp();
                    let qx = q.matrix.mul_vec(&x[off..off + q.dim()]);
                    for (i, v) in qx.into_iter().enumerate() {
                        out[off + i] = tau * v;
                    }
                }
                BlockPrior::Bym2(s) => {
                    let n = s.n_areas();
                    let (xx, xu, extra) = Bym2Spec::joint_coefficients(th[0].exp(), logistic(th[1]));
                    let xi = &x[off..off + n];
                    let u = &x[off + n..off + 2 * n];
                    let qu = s.structure.matrix.mul_vec(u);
                    for i in 0..n {
                        out[off + i] = xx * xi[i] + xu * u[i];
                        out[off + n + i] = xu * xi[i] + qu[i] + extra * u[i];
                    }
                }
            }
        }
        out
    }

    /// Log prior density of `x` on the constraint subspace (Lebesgue measure
    /// on the subspace, improper blocks normalised by their pseudo-determinant).
    pub fn log_prior_density(&self, full: &[f64], x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (bi, b) in self.blocks.iter().enumerate() {
            let off = self.block_offsets[bi];
            let th = self.block_theta(full, bi);
            total += match &b.prior {
                BlockPrior::FixedIid { precision } => {
                    let n = self.block_sizes[bi] as f64;
                    let ss: f64 = x[off..off + self.block_sizes[bi]].iter().map(|v| v * v).sum();
                    0.5 * n * (precision.ln() - LN_2PI) - 0.5 * precision * ss
                }
                BlockPrior::Structured(q) => {
                    let tau = th[0].exp();
                    let r = q.rank() as f64;
                    let xb = &x[off..off + q.dim()];
                    0.5 * r * (th[0] - LN_2PI) + 0.5 * q.log_pdet - 0.5 * tau * q.matrix.quad_form(xb)
                }
                BlockPrior::Bym2(s) => {
                    let n = s.n_areas();
                    let tau = th[0].exp();
                    let lambda = logistic(th[1]);
                    let sigma = tau.powf(-0.5);
                    let var = sigma * sigma * (1.0 - lambda);
                    let xi = &x[off..off + n];
                    let u = &x[off + n..off + 2 * n];
                    let ss: f64 = xi
                        .iter()
                        .zip(u)
                        .map(|(a, b)| {
                            let r = a - sigma * lambda.sqrt() * b;
                            r * r
                        })
                        .sum();
                    let cond = -0.5 * n as f64 * (LN_2PI + var.ln()) - 0.5 * ss / var;
                    let q = &s.structure;
                    let r = q.rank() as f64;
                    cond + 0.5 * q.log_pdet - 0.5 * r * LN_2PI - 0.5 * q.matrix.quad_form(u)
                }
            };
        }
        total
    }

    /// Penalised log-likelihood maximised by the mode search.
    pub(crate) fn objective(&self, full: &[f64], x: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        let qx = self.prior_precision_times(full, x);
        self.log_likelihood(&eta) - 0.5 * qx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Dense posterior precision at `x` without jitter (for tests and oracles).
    pub fn dense_posterior_precision(&self, free: &[f64], x: &[f64]) -> DMatrix<f64> {
        let full = self.full_theta(free);
        let n = self.n_latent;
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.prior_precision_times(&full, &e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        let eta = self.linear_predictor(x);
        let (_, d) = self.gradient_curvature(&eta);
        for (inc, &dc) in self.incidence.iter().zip(&d) {
            for &a in inc {
                for &b in inc {
                    m[(a, b)] += dc;
                }
            }
        }
        m
    }
}
