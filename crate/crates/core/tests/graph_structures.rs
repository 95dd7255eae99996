mod common;

use std::collections::BTreeSet;

use common::numerical_rank;
use dcmap_core::graph::{load_graph, AreaGraph};
use dcmap_core::simulator::make_lattice;
use dcmap_core::structures::{icar_precision, interaction_precision, rw1_precision, scale_precision, InteractionType};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn random_graph() -> impl Strategy<Value = AreaGraph> {
    (1usize..12).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 0..2 * n).prop_map(move |pairs| {
            let edges: Vec<(usize, usize)> = pairs.into_iter().filter(|(a, b)| a != b).collect();
            AreaGraph::from_index_edges((0..n).map(|i| format!("v{i}")).collect(), &edges).unwrap()
        })
    })
}

/// Components by union-find, independent of the graph's own labelling.
fn union_find_components(g: &AreaGraph) -> usize {
    let n = g.n_areas();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for (a, b) in g.edges() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    (0..n).filter(|&x| find(&mut parent, x) == x).count()
}

/// All-pairs hop distances by Floyd-Warshall.
fn distances(g: &AreaGraph) -> Vec<Vec<usize>> {
    let n = g.n_areas();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
    }
    for (a, b) in g.edges() {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    d
}

/// Moore-Penrose pseudo-inverse by eigendecomposition.
fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..m.nrows() {
        let l = eig.eigenvalues[k];
        if l.abs() > 1e-9 * top {
            let v = eig.eigenvectors.column(k);
            out += v * v.transpose() / l;
        }
    }
    out
}

fn log_pdet(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    eig.eigenvalues.iter().filter(|l| l.abs() > 1e-9 * top).map(|l| l.ln()).sum()
}

fn geometric_mean_variance(m: &DMatrix<f64>) -> f64 {
    let p = pinv(m);
    let n = m.nrows() as f64;
    (p.diagonal().iter().map(|v| v.ln()).sum::<f64>() / n).exp()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn closure_is_monotone_and_idempotent(g in random_graph(), k in 0usize..4, pick in 0usize..1000) {
        let seed: BTreeSet<usize> = [pick % g.n_areas()].into();
        let a = g.k_order_closure(&seed, k);
        let b = g.k_order_closure(&seed, k + 1);
        prop_assert!(a.is_subset(&b));
        prop_assert_eq!(g.k_order_closure(&a, 0), a.clone());
        let d = distances(&g);
        let s = pick % g.n_areas();
        let oracle: BTreeSet<usize> = (0..g.n_areas()).filter(|&j| d[s][j] <= k).collect();
        prop_assert_eq!(a, oracle);
    }

    #[test]
    fn components_and_degrees(g in random_graph()) {
        prop_assert_eq!(g.n_components(), union_find_components(&g));
        prop_assert_eq!(g.degree().iter().sum::<usize>(), 2 * g.n_edges());
        for (a, b) in g.edges() {
            prop_assert!(a != b);
            prop_assert!(g.neighbors(b).contains(&a));
            prop_assert_eq!(g.component_labels()[a], g.component_labels()[b]);
        }
    }

    #[test]
    fn icar_rank_matches_components(g in random_graph()) {
        let q = icar_precision(&g).unwrap();
        prop_assert_eq!(q.rank_deficiency, g.n_components());
        prop_assert_eq!(numerical_rank(&q.matrix.to_dense()), g.n_areas() - g.n_components());
        let c = q.constraints.to_dense();
        prop_assert!((q.matrix.to_dense() * c.transpose()).amax() < 1e-12);
    }

    #[test]
    fn structure_ranks_and_scaling(rows in 1usize..7, cols in 1usize..7, t in 2usize..7) {
        prop_assume!(rows * cols >= 2);
        let g = make_lattice(rows, cols).unwrap();
        let s = rows * cols;
        let qs = scale_precision(&icar_precision(&g).unwrap()).unwrap();
        let qt = scale_precision(&rw1_precision(t).unwrap()).unwrap();
        prop_assert_eq!(numerical_rank(&qs.matrix.to_dense()), s - 1);
        prop_assert_eq!(numerical_rank(&qt.matrix.to_dense()), t - 1);
        for q in [&qs, &qt] {
            let dense = q.matrix.to_dense();
            prop_assert!((geometric_mean_variance(&dense) - 1.0).abs() < 1e-8);
            prop_assert!((q.log_pdet - log_pdet(&dense)).abs() < 1e-8 * (1.0 + q.log_pdet.abs()));
        }
        let expected = [0, s, t, 1 + (s - 1) + (t - 1)];
        for (kind, deficiency) in InteractionType::ALL.into_iter().zip(expected) {
            let q = interaction_precision(kind, &qs, &qt).unwrap();
            let dense = q.matrix.to_dense();
            let n = s * t;
            let declared = match kind {
                InteractionType::I => 0,
                InteractionType::II => s,
                InteractionType::III => t,
                InteractionType::IV => deficiency,
            };
            prop_assert_eq!(q.rank_deficiency, declared);
            prop_assert_eq!(numerical_rank(&dense), n - declared);
            let c = q.constraints.to_dense();
            if c.nrows() > 0 {
                prop_assert!((&dense * c.transpose()).amax() < 1e-10);
                prop_assert_eq!(numerical_rank(&(c.transpose() * &c)), declared);
            }
            prop_assert!((geometric_mean_variance(&dense) - 1.0).abs() < 1e-8, "{kind}");
        }
    }
}

#[test]
fn spec_examples() {
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let e = |a: &str, b: &str| (a.to_string(), b.to_string());
    let path = load_graph(&[e("a", "b"), e("b", "c")], &ids).unwrap();
    assert_eq!(path.n_components(), 1);
    assert_eq!(path.degree(), vec![1, 2, 1]);
    assert_eq!(path.k_order_closure_ids(&["a"], 1).unwrap(), ["a", "b"].iter().map(|s| s.to_string()).collect());
    let ids4: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    assert_eq!(load_graph(&[e("a", "b"), e("c", "d")], &ids4).unwrap().n_components(), 2);
    assert!(load_graph(&[e("a", "a")], &ids).is_err());
    assert!(load_graph(&[e("a", "z")], &ids).unwrap_err().to_string().contains("'z'"));

    let lattice = make_lattice(4, 4).unwrap();
    let left: BTreeSet<usize> = (0..4).map(|r| r * 4).collect();
    let three: BTreeSet<usize> = (0..16).filter(|k| k % 4 < 3).collect();
    assert_eq!(lattice.k_order_closure(&left, 2), three);
    assert_eq!(make_lattice(10, 10).unwrap().n_edges(), 180);
    assert_eq!(make_lattice(3, 3).unwrap().degree()[4], 4);
}
