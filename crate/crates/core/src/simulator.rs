//! Synthetic panels with known risks.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{AreaGraph, Region};
use crate::models::CountsPanel;
use crate::structures::{icar_precision, rw1_precision, scale_precision, HyperParams, InteractionType};

/// Reference rate turning expected counts into populations.
pub const SIMULATION_RATE: f64 = 1e-3;

/// Rook-contiguity lattice; area `r * cols + c` is named `a{index:04}`.
pub fn make_lattice(rows: usize, cols: usize) -> Result<AreaGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::input("lattice needs at least one row and one column"));
    }
    let ids = (0..rows * cols).map(|k| format!("a{k:04}")).collect();
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            if c + 1 < cols {
                edges.push((k, k + 1));
            }
            if r + 1 < rows {
                edges.push((k, k + cols));
            }
        }
    }
    AreaGraph::from_index_edges(ids, &edges)
}

/// Generating effects and resulting risks of a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub alpha0: f64,
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
    /// Space-fastest over `S * T` cells.
    pub interaction: Vec<f64>,
    pub risk: Vec<f64>,
    /// Expected counts used to draw the data (`e * risk` is the Poisson mean).
    pub expected: Vec<f64>,
}

impl SimulationTruth {
    pub fn mean(&self, cell: usize) -> f64 {
        self.expected[cell] * self.risk[cell]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub t: usize,
    pub hyper: HyperParams,
    pub interaction: InteractionType,
    /// Expected count per area, constant over time.
    pub base_expected: Vec<f64>,
    pub alpha0: f64,
    pub seed: u64,
}

/// `V+ diag(1/sqrt(lambda+))` for a symmetric non-negative-definite matrix,
/// so that `A z` with standard normal `z` has covariance equal to the
/// Moore-Penrose inverse.
fn pseudo_inverse_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let keep: Vec<usize> = (0..m.nrows()).filter(|&k| eig.eigenvalues[k] > 1e-8 * top).collect();
    let mut out = DMatrix::zeros(m.nrows(), keep.len());
    for (j, &k) in keep.iter().enumerate() {
        let s = 1.0 / eig.eigenvalues[k].sqrt();
        out.set_column(j, &(eig.eigenvectors.column(k) * s));
    }
    out
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws latent effects from the spatial, random-walk and interaction
/// priors and Poisson counts around `e * exp(eta)`.
pub fn simulate_panel(graph: &AreaGraph, spec: &SimulationSpec) -> Result<(CountsPanel, SimulationTruth)> {
    let (s, t) = (graph.n_areas(), spec.t);
    if spec.base_expected.len() != s {
        return Err(Error::input("one base expected count per area is required"));
    }
    if spec.base_expected.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::input("base expected counts must be positive"));
    }
    if t < 2 {
        return Err(Error::input("simulation needs at least two periods"));
    }
    let h = spec.hyper;
    for v in [h.sigma2_spatial, h.sigma2_temporal, h.sigma2_interaction] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::input("simulation variances must be non-negative"));
        }
    }
    if !(0.0..=1.0).contains(&h.lambda) {
        return Err(Error::input("lambda must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let qs = scale_precision(&icar_precision(graph)?)?.matrix.to_dense();
    let qt = scale_precision(&rw1_precision(t)?)?.matrix.to_dense();
    let root_s = pseudo_inverse_root(&qs);
    let root_t = pseudo_inverse_root(&qt);

    let u = &root_s * nalgebra::DVector::from_vec(normals(&mut rng, root_s.ncols()));
    let v = normals(&mut rng, s);
    let sd_s = h.sigma2_spatial.sqrt();
    let spatial: Vec<f64> = (0..s)
        .map(|i| sd_s * (h.lambda.sqrt() * u[i] + (1.0 - h.lambda).sqrt() * v[i]))
        .collect();
    let g = &root_t * nalgebra::DVector::from_vec(normals(&mut rng, root_t.ncols()));
    let temporal: Vec<f64> = g.iter().map(|x| h.sigma2_temporal.sqrt() * x).collect();

    // Interaction as an S x T matrix: A_s Z A_t' for the Kronecker root.
    let (left, right) = match spec.interaction {
        InteractionType::I => (DMatrix::identity(s, s), DMatrix::identity(t, t)),
        InteractionType::II => (DMatrix::identity(s, s), root_t.clone()),
        InteractionType::III => (root_s.clone(), DMatrix::identity(t, t)),
        InteractionType::IV => (root_s.clone(), root_t.clone()),
    };
    let z = DMatrix::from_vec(left.ncols(), right.ncols(), normals(&mut rng, left.ncols() * right.ncols()));
    let d = &left * z * right.transpose() * h.sigma2_interaction.sqrt();
    let interaction: Vec<f64> = (0..s * t).map(|c| d[(c % s, c / s)]).collect();

    let mut risk = Vec::with_capacity(s * t);
    let mut expected = Vec::with_capacity(s * t);
    let mut counts = Vec::with_capacity(s * t);
    for c in 0..s * t {
        let (i, k) = (c % s, c / s);
        let r = (spec.alpha0 + spatial[i] + temporal[k] + interaction[c]).exp();
        let e = spec.base_expected[i];
        let mu = e * r;
        let y = if mu > 0.0 {
            Poisson::new(mu)
                .map_err(|err| Error::Internal(format!("poisson mean {mu}: {err}")))?
                .sample(&mut rng) as u64
        } else {
            0
        };
        risk.push(r);
        expected.push(e);
        counts.push(Some(y));
    }
    let population = expected.iter().map(|e| e / SIMULATION_RATE).collect();
    let panel = CountsPanel::new(
        graph.ids().to_vec(),
        (0..t as i32).map(|k| 2000 + k).collect(),
        counts,
        population,
    )?;
    Ok((
        panel,
        SimulationTruth {
            alpha0: spec.alpha0,
            spatial,
            temporal,
            interaction,
            risk,
            expected,
        },
    ))
}

/// Withholds counts below `threshold`; returns the masked panel and the
/// masked fraction.
pub fn suppress(panel: &CountsPanel, threshold: u64) -> (CountsPanel, f64) {
    let mut out = panel.clone();
    let mut masked = 0;
    for c in out.counts.iter_mut() {
        if c.is_some_and(|y| y < threshold) {
            *c = None;
            masked += 1;
        }
    }
    out.suppressed = true;
    (out, masked as f64 / panel.n_cells() as f64)
}

/// Base expected counts log-uniform on `[lo, hi]`, deterministic in `seed`.
pub fn log_uniform_expected(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp())
        .collect()
}

/// Quadrant of each lattice cell, labelled `q1` (top left) to `q4`
/// (bottom right).
pub fn quadrant_labels(rows: usize, cols: usize) -> Vec<String> {
    (0..rows * cols)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            let q = 1 + usize::from(c >= cols.div_ceil(2)) + 2 * usize::from(r >= rows.div_ceil(2));
            format!("q{q}")
        })
        .collect()
}

/// `area_id,year,expected,risk` rows of the generating truth.
pub fn truth_csv(panel: &CountsPanel, truth: &SimulationTruth) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "year", "expected", "risk"])?;
    for t in 0..panel.n_years() {
        for i in 0..panel.n_areas() {
            let c = panel.cell(i, t);
            w.write_record([
                panel.area_ids[i].clone(),
                panel.years[t].to_string(),
                truth.expected[c].to_string(),
                truth.risk[c].to_string(),
            ])?;
        }
    }
    crate::io::finish(w)
}

/// Area metadata with each label as the state code, regions assigned to
/// labels in sorted order, and first-year populations.
pub fn meta_csv(panel: &CountsPanel, labels: &[String]) -> Result<String> {
    let mut distinct: Vec<&String> = labels.iter().collect();
    distinct.sort();
    distinct.dedup();
    let regions = [Region::West, Region::Midwest, Region::South, Region::Northeast];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "state", "region", "urbanicity_pop"])?;
    for (i, label) in labels.iter().enumerate() {
        let r = distinct.iter().position(|d| *d == label).unwrap_or(0) % regions.len();
        w.write_record([
            panel.area_ids[i].clone(),
            label.clone(),
            regions[r].to_string(),
            panel.population[panel.cell(i, 0)].to_string(),
        ])?;
    }
    crate::io::finish(w)
}

/// `area_id,label` rows for a partition plan.
pub fn labels_csv(panel: &CountsPanel, labels: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(crate::io::LABELS_HEADER)?;
    for (id, l) in panel.area_ids.iter().zip(labels) {
        w.write_record([id, l])?;
    }
    crate::io::finish(w)
}
