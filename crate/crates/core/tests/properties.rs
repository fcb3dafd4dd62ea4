//! Property tests over the numeric kernels and the dictionary.

use proptest::prelude::*;

use koopgrid::graph::CommGraph;
use koopgrid::koopman::lift;
use koopgrid::numerics::{
    eigenvalues, least_squares, penrose_residual, pseudo_inverse, Lu, Matrix,
};

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penrose_identities_hold(m in small_matrix(5, 3)) {
        let p = pseudo_inverse(&m, 1e-10).unwrap();
        // the identity is only claimed below a condition-number bound
        let svd = koopgrid::numerics::thin_svd(&m);
        let cond = svd.sigma[0] / svd.sigma.last().copied().unwrap_or(0.0).max(1e-300);
        prop_assume!(cond < 1e6);
        prop_assert!(penrose_residual(&m, &p) < 1e-8);
    }

    #[test]
    fn eigenvalue_trace_and_determinant(m in small_matrix(4, 4)) {
        let eig = eigenvalues(&m).unwrap();
        let sum: num_complex::Complex64 = eig.values.iter().sum();
        let prod: num_complex::Complex64 = eig.values.iter().product();
        let det = Lu::factor(&m).map(|f| f.determinant()).unwrap_or(0.0);
        let scale = m.max_abs().max(1.0).powi(4);
        prop_assert!((sum.re - m.trace()).abs() < 1e-8 * scale);
        prop_assert!(sum.im.abs() < 1e-8 * scale);
        prop_assert!((prod.re - det).abs() < 1e-8 * scale);
        prop_assert!(prod.im.abs() < 1e-8 * scale);
    }

    #[test]
    fn least_squares_residual_orthogonality(
        a in small_matrix(8, 3),
        b in small_matrix(8, 2),
    ) {
        let x = least_squares(&a, &b).unwrap();
        let r = &(&a * &x) - &b;
        let at_r = &a.transpose() * &r;
        prop_assert!(at_r.max_abs() < 1e-8);
    }

    #[test]
    fn lift_dictionary_consistency(v_i in -200.0f64..200.0, v_j in -200.0f64..200.0) {
        let psi = lift(v_i, v_j);
        prop_assert_eq!(psi[2], psi[0] - psi[1]);
        prop_assert_eq!(psi[3], psi[2] * psi[2]);
    }

    #[test]
    fn laplacian_construction_is_edge_order_independent(
        perm in proptest::sample::subsequence(vec![0usize, 1, 2, 3, 4], 5)
    ) {
        prop_assume!(perm.len() == 5);
        let edges = [(1usize, 2usize), (2, 3), (3, 4), (3, 5), (1, 4)];
        let reordered: Vec<(usize, usize)> = perm.iter().map(|&i| edges[i]).collect();
        let base = CommGraph::from_edges(5, &edges).unwrap();
        let shuffled = CommGraph::from_edges(5, &reordered).unwrap();
        prop_assert_eq!(base.laplacian(), shuffled.laplacian());
    }

    #[test]
    fn total_reactive_flow_is_nonnegative(
        v in proptest::collection::vec(0.0f64..200.0, 4),
        b01 in 0.0f64..5.0,
        b12 in 0.0f64..5.0,
        b23 in 0.0f64..5.0,
    ) {
        let mut susceptance = Matrix::zeros(4, 4);
        for (i, j, b) in [(0usize, 1usize, b01), (1, 2, b12), (2, 3, b23)] {
            susceptance[(i, j)] = b;
            susceptance[(j, i)] = b;
        }
        let topo = koopgrid::grid::NetworkTopology {
            n: 4,
            susceptance,
            line_inductances: Default::default(),
        };
        let total: f64 = (0..4)
            .map(|i| koopgrid::grid::reactive_power_simplified(&v, &topo, i))
            .sum();
        prop_assert!(total >= -1e-9 * (1.0 + total.abs()));
    }
}
