//! Deviance and WAIC model-comparison criteria.

use crate::error::{Error, Result};
use crate::inference::DrawMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dic {
    pub dbar: f64,
    pub pd: f64,
    pub dic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waic {
    pub lppd: f64,
    /// Sum over cells of the sample variance of the log-likelihood.
    pub p_waic: f64,
    pub waic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Criteria {
    pub dic: Dic,
    pub waic: Waic,
}

impl Criteria {
    /// Negative effective parameters signal a poor plug-in estimate.
    pub fn pd_negative(&self) -> bool {
        self.dic.pd < 0.0
    }
}

fn check(draws: &DrawMatrix) -> Result<()> {
    if draws.n_draws < 2 {
        return Err(Error::Criteria(format!("at least two draws are needed, got {}", draws.n_draws)));
    }
    if let Some(p) = draws.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Criteria(format!(
            "non-finite log-likelihood in draw {} for cell {}",
            p / draws.n_cells(),
            draws.cells[p % draws.n_cells()]
        )));
    }
    Ok(())
}

pub fn dic(draws: &DrawMatrix, deviance_at_mean: f64) -> Result<Dic> {
    check(draws)?;
    if !deviance_at_mean.is_finite() {
        return Err(Error::Criteria("deviance at the posterior mean is not finite".into()));
    }
    let k = draws.n_cells();
    let total: f64 = (0..draws.n_draws)
        .map(|d| -2.0 * draws.values[d * k..(d + 1) * k].iter().sum::<f64>())
        .sum();
    let dbar = total / draws.n_draws as f64;
    let pd = dbar - deviance_at_mean;
    Ok(Dic { dbar, pd, dic: dbar + pd })
}

/// `log(mean(exp(v)))` without overflow.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + (v.iter().map(|x| (x - top).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

pub fn waic(draws: &DrawMatrix) -> Result<Waic> {
    check(draws)?;
    let (mut lppd, mut p_waic) = (0.0, 0.0);
    for col in 0..draws.n_cells() {
        let v = draws.column(col);
        lppd += log_mean_exp(&v);
        p_waic += sample_variance(&v);
    }
    Ok(Waic {
        lppd,
        p_waic,
        waic: -2.0 * (lppd - p_waic),
    })
}

pub fn criteria(draws: &DrawMatrix, deviance_at_mean: f64) -> Result<Criteria> {
    Ok(Criteria {
        dic: dic(draws, deviance_at_mean)?,
        waic: waic(draws)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriteriaRow {
    pub prior: String,
    pub interaction: String,
    pub criteria: Criteria,
}

/// Comparison row: raw mean deviance and effective parameters, DIC and
/// WAIC as differences from the best model.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub prior: String,
    pub interaction: String,
    pub dbar: f64,
    pub pd: f64,
    pub d_dic: f64,
    pub d_waic: f64,
}

pub fn delta_table(rows: &[CriteriaRow]) -> Vec<DeltaRow> {
    let best_dic = rows.iter().map(|r| r.criteria.dic.dic).fold(f64::INFINITY, f64::min);
    let best_waic = rows.iter().map(|r| r.criteria.waic.waic).fold(f64::INFINITY, f64::min);
    rows.iter()
        .map(|r| DeltaRow {
            prior: r.prior.clone(),
            interaction: r.interaction.clone(),
            dbar: r.criteria.dic.dbar,
            pd: r.criteria.dic.pd,
            d_dic: r.criteria.dic.dic - best_dic,
            d_waic: r.criteria.waic.waic - best_waic,
        })
        .collect()
}

pub const DELTA_HEADER: [&str; 6] = ["prior", "interaction", "Dbar", "pD", "dDIC", "dWAIC"];

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(rows: &[&[f64]]) -> DrawMatrix {
        let k = rows[0].len();
        DrawMatrix::new(rows.len(), (0..k).collect(), rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn identical_draws_have_no_spread() {
        let d = draws(&[&[-1.0, -2.0], &[-1.0, -2.0], &[-1.0, -2.0]]);
        let c = criteria(&d, 6.0).unwrap();
        assert_eq!(c.dic.dbar, 6.0);
        assert_eq!(c.dic.pd, 0.0);
        assert_eq!(c.dic.dic, 6.0);
        assert_eq!(c.waic.p_waic, 0.0);
        assert!((c.waic.waic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicating_cells_doubles_mean_deviance() {
        let a = draws(&[&[-1.0], &[-3.0]]);
        let b = draws(&[&[-1.0, -1.0], &[-3.0, -3.0]]);
        assert_eq!(dic(&b, 0.0).unwrap().dbar, 2.0 * dic(&a, 0.0).unwrap().dbar);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(dic(&draws(&[&[-1.0]]), 0.0).is_err());
        assert!(waic(&draws(&[&[-1.0], &[f64::NAN]])).is_err());
    }

    #[test]
    fn deltas_from_minimum() {
        let mk = |v: f64| Criteria {
            dic: Dic { dbar: v, pd: 1.0, dic: v },
            waic: Waic { lppd: 0.0, p_waic: 0.0, waic: v + 1.0 },
        };
        let rows = vec![
            CriteriaRow { prior: "ICAR".into(), interaction: "1".into(), criteria: mk(100.0) },
            CriteriaRow { prior: "ICAR".into(), interaction: "2".into(), criteria: mk(103.5) },
        ];
        let t = delta_table(&rows);
        assert_eq!(t[0].d_dic, 0.0);
        assert_eq!(t[1].d_dic, 3.5);
        assert_eq!(t[1].dbar, 103.5);
        assert_eq!(delta_table(&rows[..1])[0].d_waic, 0.0);
    }
}
