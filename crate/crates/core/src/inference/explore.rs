//! Hyperparameter search and integration grid.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::marginal::log_marginal_at;
use crate::inference::model::LatentModel;
use crate::inference::newton::newton_mode;

const MAX_EVALUATIONS: usize = 500;
const HESSIAN_STEP: f64 = 0.01;
const RESTART_SHIFT: f64 = 0.5;

/// One integration point of the hyperparameter posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPoint {
    /// Estimated hyperparameters on the internal scale.
    pub theta: Vec<f64>,
    pub log_posterior: f64,
    pub weight: f64,
    /// Conditional mode of the latent field.
    pub mode: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub theta_star: Vec<f64>,
    /// Negative Hessian of the log posterior at `theta_star`.
    pub curvature: DMatrix<f64>,
    pub points: Vec<ThetaPoint>,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

pub struct Explored<T> {
    pub theta_star: Vec<f64>,
    pub curvature: DMatrix<f64>,
    /// `(theta, log posterior, normalised weight, payload)`.
    pub points: Vec<(Vec<f64>, f64, f64, T)>,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

struct Vertex<T> {
    x: Vec<f64>,
    f: f64,
    payload: Option<T>,
}

enum Search<T> {
    Converged(Vertex<T>),
    /// Budget exhausted; carries the best point seen.
    Exhausted(Vec<f64>),
    /// The starting point could not be evaluated.
    Failed,
}

/// Nelder-Mead maximisation. Failed evaluations count as `-inf`.
fn nelder_mead<T, F>(start: &[f64], f: &F, evaluations: &mut usize) -> Search<T>
where
    F: Fn(&[f64], Option<&T>) -> Result<(f64, T)>,
{
    let d = start.len();
    let eval = |x: &[f64], warm: Option<&T>, count: &mut usize| -> Vertex<T> {
        *count += 1;
        let r = f(x, warm);
        log::trace!("theta {x:?} -> {:?}", r.as_ref().map(|v| v.0).map_err(|e| e.to_string()));
        match r {
            Ok((v, p)) if v.is_finite() => Vertex {
                x: x.to_vec(),
                f: v,
                payload: Some(p),
            },
            _ => Vertex {
                x: x.to_vec(),
                f: f64::NEG_INFINITY,
                payload: None,
            },
        }
    };
    let first = eval(start, None, evaluations);
    if first.payload.is_none() {
        return Search::Failed;
    }
    let mut simplex = vec![first];
    for i in 0..d {
        let mut x = start.to_vec();
        x[i] += 1.0;
        let v = eval(&x, simplex[0].payload.as_ref(), evaluations);
        simplex.push(v);
    }
    let budget = *evaluations + MAX_EVALUATIONS;
    loop {
        // Best first; ties keep insertion order.
        simplex.sort_by(|a, b| b.f.partial_cmp(&a.f).unwrap_or(std::cmp::Ordering::Equal));
        let f_range = simplex[0].f - simplex[d].f;
        let x_range = (0..d)
            .map(|k| {
                let (lo, hi) = simplex
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.x[k]), hi.max(v.x[k])));
                hi - lo
            })
            .fold(0.0, f64::max);
        if f_range.is_finite() && ((f_range < 1e-5 && x_range < 1e-2) || f_range < 1e-9 || x_range < 1e-8) {
            return Search::Converged(simplex.swap_remove(0));
        }
        if *evaluations >= budget {
            return Search::Exhausted(simplex.swap_remove(0).x);
        }
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|v| v.x[k]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d].x)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let warm = simplex[0].payload.as_ref();
        let reflected = eval(&along(1.0), warm, evaluations);
        if reflected.f > simplex[0].f {
            let expanded = eval(&along(2.0), warm, evaluations);
            simplex[d] = if expanded.f > reflected.f { expanded } else { reflected };
            continue;
        }
        if reflected.f > simplex[d - 1].f {
            simplex[d] = reflected;
            continue;
        }
        let contracted = if reflected.f > simplex[d].f {
            eval(&along(0.5), warm, evaluations)
        } else {
            eval(&along(-0.5), warm, evaluations)
        };
        if contracted.f > simplex[d].f.max(reflected.f) {
            simplex[d] = contracted;
            continue;
        }
        if reflected.f > simplex[d].f {
            simplex[d] = reflected;
            continue;
        }
        // Shrink towards the best vertex.
        let best = simplex[0].x.clone();
        for i in 1..=d {
            let x: Vec<f64> = best.iter().zip(&simplex[i].x).map(|(b, v)| b + 0.5 * (v - b)).collect();
            let v = eval(&x, simplex[0].payload.as_ref(), evaluations);
            simplex[i] = v;
        }
    }
}

/// Offsets of the integration design in standardised coordinates: a full
/// product grid, five levels per axis up to three dimensions and three
/// levels (0 and +-1.5) above.
pub fn grid_design(d: usize) -> Vec<Vec<f64>> {
    const FINE: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
    const COARSE: [f64; 3] = [-1.5, 0.0, 1.5];
    let levels: &[f64] = if d <= 3 { &FINE } else { &COARSE };
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                levels.iter().map(move |&l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out
}

/// Maximises `f`, measures its curvature at the maximum and evaluates it on
/// the standardised grid. `f` receives the payload of a nearby point as a
/// warm start.
pub fn explore_with<T, F>(dim: usize, f: F) -> Result<Explored<T>>
where
    T: Send + Sync,
    F: Fn(&[f64], Option<&T>) -> Result<(f64, T)> + Sync,
{
    if dim == 0 {
        let (v, p) = f(&[], None)?;
        if !v.is_finite() {
            return Err(Error::fit("log posterior is not finite"));
        }
        return Ok(Explored {
            theta_star: Vec::new(),
            curvature: DMatrix::zeros(0, 0),
            points: vec![(Vec::new(), v, 1.0, p)],
            evaluations: 1,
            warnings: Vec::new(),
        });
    }
    let mut evaluations = 0;
    let mut warnings = Vec::new();
    let start = vec![0.0; dim];
    let first = match nelder_mead(&start, &f, &mut evaluations) {
        Search::Converged(v) => Some(v),
        Search::Exhausted(best) => {
            let restart: Vec<f64> = best.iter().map(|v| v + RESTART_SHIFT).collect();
            warnings.push("simplex search restarted once".to_string());
            match nelder_mead(&restart, &f, &mut evaluations) {
                Search::Converged(v) => Some(v),
                _ => None,
            }
        }
        Search::Failed => {
            let lp = f(&start, None).err();
            return Err(lp.unwrap_or_else(|| Error::fit("log posterior is not finite at the starting point")));
        }
    };
    let best = first.ok_or_else(|| {
        Error::fit(format!("hyperparameter search did not converge after {evaluations} evaluations"))
    })?;
    let theta_star = best.x;
    let f0 = best.f;
    let payload = best.payload.expect("converged vertex carries its payload");

    // Finite-difference Hessian, evaluated in parallel from the optimum.
    let h = HESSIAN_STEP;
    let mut offsets: Vec<(usize, usize, f64, f64)> = Vec::new();
    for i in 0..dim {
        offsets.push((i, i, h, 0.0));
        offsets.push((i, i, -h, 0.0));
        for j in i + 1..dim {
            for (a, b) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                offsets.push((i, j, a, b));
            }
        }
    }
    let values: Vec<Option<f64>> = offsets
        .par_iter()
        .map(|&(i, j, a, b)| {
            let mut x = theta_star.clone();
            x[i] += a;
            if i != j {
                x[j] += b;
            }
            f(&x, Some(&payload)).ok().map(|r| r.0).filter(|v| v.is_finite())
        })
        .collect();
    evaluations += offsets.len();
    let mut hess = DMatrix::zeros(dim, dim);
    let mut hessian_ok = values.iter().all(Option::is_some);
    if hessian_ok {
        let mut k = 0;
        for i in 0..dim {
            let (fp, fm) = (values[k].unwrap(), values[k + 1].unwrap());
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
            k += 2;
            for j in i + 1..dim {
                let v: Vec<f64> = values[k..k + 4].iter().map(|v| v.unwrap()).collect();
                let hij = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h * h);
                hess[(i, j)] = hij;
                hess[(j, i)] = hij;
                k += 4;
            }
        }
    }
    let mut curvature = -hess;
    let eig = SymmetricEigen::new(curvature.clone());
    if !hessian_ok || eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        hessian_ok = false;
    }
    let (vectors, scales) = if hessian_ok {
        let s: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()).collect();
        (eig.eigenvectors, s)
    } else {
        warnings.push("hessian of the hyperparameter posterior is not negative definite; using identity".into());
        curvature = DMatrix::identity(dim, dim);
        (DMatrix::identity(dim, dim), vec![1.0; dim])
    };

    let design = grid_design(dim);
    let evaluated: Vec<(Vec<f64>, Option<(f64, T)>)> = design
        .par_iter()
        .map(|z| {
            let zs = DVector::from_iterator(dim, z.iter().zip(&scales).map(|(a, s)| a * s));
            let step = &vectors * zs;
            let theta: Vec<f64> = theta_star.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r = f(&theta, Some(&payload)).ok().filter(|r| r.0.is_finite());
            (theta, r)
        })
        .collect();
    evaluations += design.len();
    let dropped = evaluated.iter().filter(|e| e.1.is_none()).count();
    if dropped > 0 {
        warnings.push(format!("{dropped} integration points failed and were dropped"));
    }
    let kept: Vec<(Vec<f64>, f64, T)> = evaluated
        .into_iter()
        .filter_map(|(t, r)| r.map(|(v, p)| (t, v, p)))
        .collect();
    if kept.is_empty() {
        return Err(Error::fit("no integration point could be evaluated"));
    }
    let top = kept.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = kept.iter().map(|k| (k.1 - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    let points = kept
        .into_iter()
        .zip(raw)
        .map(|((t, v, p), w)| (t, v, w / total, p))
        .collect();
    Ok(Explored {
        theta_star,
        curvature,
        points,
        evaluations,
        warnings,
    })
}

/// Searches the hyperparameter posterior of `model` and returns the
/// weighted integration grid.
pub fn explore_hyperparameters(model: &LatentModel) -> Result<HyperGrid> {
    let explored = explore_with(model.n_free(), |theta, warm: Option<&Vec<f64>>| {
        let lap = newton_mode(model, theta, warm.map(|w| w.as_slice()))?;
        let lp = log_marginal_at(model, theta, &lap);
        Ok((lp, lap.mode))
    })?;
    Ok(HyperGrid {
        theta_star: explored.theta_star,
        curvature: explored.curvature,
        points: explored
            .points
            .into_iter()
            .map(|(theta, log_posterior, weight, mode)| ThetaPoint {
                theta,
                log_posterior,
                weight,
                mode,
            })
            .collect(),
        evaluations: explored.evaluations,
        warnings: explored.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_sizes() {
        assert_eq!(grid_design(0).len(), 1);
        assert_eq!(grid_design(1).len(), 5);
        assert_eq!(grid_design(3).len(), 125);
        assert_eq!(grid_design(4).len(), 81);
        assert!(grid_design(4).iter().all(|p| p.iter().all(|v| [-1.5, 0.0, 1.5].contains(v))));
    }

    #[test]
    fn gaussian_target_is_recovered() {
        // log density of N((1, -2), diag(0.25, 4)) up to a constant
        let f = |x: &[f64], _: Option<&()>| -> Result<(f64, ())> {
            Ok((-0.5 * ((x[0] - 1.0).powi(2) / 0.25 + (x[1] + 2.0).powi(2) / 4.0), ()))
        };
        let e = explore_with(2, f).unwrap();
        assert!((e.theta_star[0] - 1.0).abs() < 1e-2);
        assert!((e.theta_star[1] + 2.0).abs() < 1e-2);
        let total: f64 = e.points.iter().map(|p| p.2).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((e.curvature[(0, 0)] - 4.0).abs() < 1e-3);
        assert!((e.curvature[(1, 1)] - 0.25).abs() < 1e-3);
        assert!(e.warnings.is_empty());
    }

    #[test]
    fn weights_follow_target_density() {
        let target = |x: f64| -(x - 0.3).powi(2);
        let f = |x: &[f64], _: Option<&()>| -> Result<(f64, ())> { Ok((target(x[0]), ())) };
        let e = explore_with(1, f).unwrap();
        assert!((e.theta_star[0] - 0.3).abs() < 1e-2);
        let z: f64 = e.points.iter().map(|p| target(p.0[0]).exp()).sum();
        for p in &e.points {
            assert!((p.2 - target(p.0[0]).exp() / z).abs() < 1e-12);
        }
        let mut offsets: Vec<f64> = e.points.iter().map(|p| p.0[0] - e.theta_star[0]).collect();
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for k in 0..2 {
            assert!((offsets[k] + offsets[4 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_concave_target_falls_back() {
        let f = |x: &[f64], _: Option<&()>| -> Result<(f64, ())> { Ok((-(x[0] - 1.0).powi(2), ())) };
        let e = explore_with(2, f).unwrap();
        assert_eq!(e.warnings.len(), 1);
        assert_eq!(e.curvature, DMatrix::identity(2, 2));
    }
}
