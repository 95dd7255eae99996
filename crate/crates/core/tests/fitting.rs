mod common;

use std::collections::BTreeMap;

use common::lattice_panel;
use dcmap_core::aggregation::{exceedance_flag, risk_classification, weighted_trend, RiskClass, TrendWeights};
use dcmap_core::criteria::criteria;
use dcmap_core::descriptives::{boxplot_export, smr_space, smr_time};
use dcmap_core::imputation::{impute_panel, ImputeOptions, TRUNCATION_LIMIT};
use dcmap_core::inference::{fit, SummaryOptions};
use dcmap_core::io::{counts_csv, parse_panel, population_csv};
use dcmap_core::models::{build_st_model, expected_counts, ExpectedMode, SpatialPrior};
use dcmap_core::partition::{fit_partitioned, make_plan, merged_criteria, PartitionOptions, PartitionPlan};
use dcmap_core::simulator::{quadrant_labels, suppress};
use dcmap_core::structures::InteractionType;

fn options(n_draws: usize) -> PartitionOptions {
    PartitionOptions {
        summary: SummaryOptions {
            n_draws,
            ..SummaryOptions::default()
        },
        ..PartitionOptions::default()
    }
}

#[test]
fn single_subdomain_matches_global_fit() {
    let (graph, panel, _) = lattice_panel(4, 4, 4, 3);
    let panel = expected_counts(&panel, ExpectedMode::Global).unwrap();
    let opts = options(200);
    let whole = PartitionPlan::whole(&graph);
    let part = fit_partitioned(&panel, &graph, &whole, SpatialPrior::Icar, InteractionType::II, &opts).unwrap();
    let built = build_st_model(&panel, SpatialPrior::Icar, InteractionType::II, &graph, &opts.build).unwrap();
    let global = fit(&built.model, &opts.summary).unwrap();
    for c in 0..panel.n_cells() {
        assert_eq!(part.risk_quantiles(c), global.risk_quantiles[c].as_slice());
    }
    let merged = merged_criteria(&part).unwrap();
    let direct = criteria(&global.loglik_draws, global.deviance_at_mean).unwrap();
    assert_eq!(merged, direct);
}

#[test]
fn disjoint_subdomains_add_criteria() {
    let (graph, panel, _) = lattice_panel(4, 4, 3, 5);
    let panel = expected_counts(&panel, ExpectedMode::Global).unwrap();
    let labels = quadrant_labels(4, 4);
    let plan = make_plan(&labels, &graph, &BTreeMap::new(), 0).unwrap();
    assert_eq!(plan.subdomains.len(), 4);
    let opts = options(300);
    let part = fit_partitioned(&panel, &graph, &plan, SpatialPrior::Bym2, InteractionType::I, &opts).unwrap();
    let merged = merged_criteria(&part).unwrap();
    let mut dic = 0.0;
    let mut waic = 0.0;
    for sub in &part.subdomains {
        assert_eq!(sub.areas.len(), sub.n_owned);
        let c = criteria(&sub.fit.loglik_draws, sub.fit.deviance_at_mean).unwrap();
        dic += c.dic.dic;
        waic += c.waic.waic;
    }
    assert!((merged.dic.dic - dic).abs() < 1e-8 * dic.abs(), "{} vs {dic}", merged.dic.dic);
    assert!((merged.waic.waic - waic).abs() < 1e-8 * waic.abs());
    for i in 0..16 {
        assert_eq!(part.owner_name(i), labels[i]);
    }
}

#[test]
fn extended_subdomains_own_each_cell_once() {
    let (graph, panel, _) = lattice_panel(4, 4, 3, 8);
    let panel = expected_counts(&panel, ExpectedMode::Global).unwrap();
    let merge: BTreeMap<String, String> = [("q4".to_string(), "q3".to_string())].into();
    let plan = make_plan(&quadrant_labels(4, 4), &graph, &merge, 1).unwrap();
    assert_eq!(plan.subdomains.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["q1", "q2", "q3"]);
    let part = fit_partitioned(&panel, &graph, &plan, SpatialPrior::Bym2, InteractionType::I, &options(0)).unwrap();
    let owned: usize = part.subdomains.iter().map(|s| s.owned_cells.len()).sum();
    assert_eq!(owned, panel.n_cells());
    assert!(part.source.iter().all(|&(s, _)| s < 3));
    assert!(part.subdomains.iter().all(|s| s.areas.len() > s.n_owned));
}

#[test]
fn imputation_fills_only_missing_cells() {
    let (graph, full, _) = lattice_panel(5, 5, 3, 9);
    let (panel, fraction) = suppress(&full, 10);
    assert!(fraction > 0.0);
    let (imputed, report) = impute_panel(&panel, &graph, &ImputeOptions::default()).unwrap();
    let missing = panel.counts.iter().filter(|c| c.is_none()).count();
    assert_eq!(report.cells.len(), missing);
    for c in 0..panel.n_cells() {
        match panel.counts[c] {
            Some(y) => assert_eq!(imputed.counts[c], Some(y)),
            None => {
                let v = imputed.counts[c].unwrap();
                assert!(v <= TRUNCATION_LIMIT);
                assert!(imputed.observed(c).is_none());
            }
        }
    }
    for cell in &report.cells {
        assert_eq!(cell.final_count, cell.raw_pred.min(TRUNCATION_LIMIT));
    }
    let (again, report2) = impute_panel(&panel, &graph, &ImputeOptions::default()).unwrap();
    assert_eq!(again, imputed);
    assert_eq!(report2, report);

    let untruncated = ImputeOptions {
        truncate: false,
        ..ImputeOptions::default()
    };
    let (_, raw) = impute_panel(&panel, &graph, &untruncated).unwrap();
    assert!(raw.cells.iter().all(|c| c.final_count == c.raw_pred));
}

#[test]
fn descriptives_are_consistent() {
    let (_, full, _) = lattice_panel(5, 5, 4, 2);
    let panel = expected_counts(&full, ExpectedMode::PerYear).unwrap();
    // Per-year expected counts reproduce the yearly totals exactly.
    for y in smr_time(&panel).unwrap() {
        let smr = y.smr.unwrap();
        assert!((smr - 1.0).abs() < 1e-12);
        assert!(y.lo.unwrap() < smr && smr < y.hi.unwrap());
    }
    let total_y: f64 = panel.counts.iter().map(|c| c.unwrap() as f64).sum();
    let total_e: f64 = panel.expected.iter().sum();
    assert!((total_y - total_e).abs() < 1e-6 * total_e);
    let areas = smr_space(&panel).unwrap();
    assert!(areas.iter().all(|a| a.displayable && a.smr.unwrap() >= 0.0));
    for b in boxplot_export(&panel).unwrap() {
        assert_eq!(b.n, 25);
        assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
    }
}

#[test]
fn trends_and_classes_follow_the_fit() {
    let (graph, panel, _) = lattice_panel(4, 4, 3, 4);
    let panel = expected_counts(&panel, ExpectedMode::Global).unwrap();
    let part = fit_partitioned(
        &panel,
        &graph,
        &PartitionPlan::whole(&graph),
        SpatialPrior::Bym2,
        InteractionType::I,
        &options(0),
    )
    .unwrap();
    let groups: Vec<Option<String>> = (0..16).map(|i| (i != 0).then(|| format!("g{}", i % 2))).collect();
    let trend = weighted_trend(&part, &panel, &groups, TrendWeights::PerYear, |_| true).unwrap();
    assert_eq!(trend.len(), 2 * 3);
    for p in &trend {
        let t = (p.year - panel.years[0]) as usize;
        let members: Vec<usize> = (0..16).filter(|&i| groups[i].as_deref() == Some(&p.group)).collect();
        let num: f64 = members.iter().map(|&i| panel.population[t * 16 + i] * part.median_risk(t * 16 + i)).sum();
        let den: f64 = members.iter().map(|&i| panel.population[t * 16 + i]).sum();
        assert!((p.weighted_risk.unwrap() - num / den).abs() < 1e-12);
    }
    let none = weighted_trend(&part, &panel, &groups, TrendWeights::FixedYear(0), |_| false).unwrap();
    assert!(none.iter().all(|p| p.weighted_risk.is_none()));

    let classes = risk_classification(&part, 1).unwrap();
    let flags = exceedance_flag(&part, 1.0, 0.975);
    for i in 0..16 {
        let c = 16 + i;
        let q = part.risk_quantiles(c);
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
        if classes[i] == RiskClass::High {
            assert!(part.exceedance_probability(c, 1.0) > 0.97);
        }
        if flags[c] {
            assert_ne!(classes[i], RiskClass::Low);
        }
    }
}

#[test]
fn simulated_panel_round_trips_through_csv() {
    let (_, full, truth) = lattice_panel(3, 3, 4, 1);
    let (masked, _) = suppress(&full, 10);
    let back = parse_panel(counts_csv(&masked).unwrap().as_bytes(), population_csv(&masked).unwrap().as_bytes()).unwrap();
    assert_eq!(back.counts, masked.counts);
    assert_eq!(back.population, masked.population);
    assert_eq!(back.area_ids, masked.area_ids);
    assert!(truth.risk.iter().all(|r| *r > 0.0));
}
