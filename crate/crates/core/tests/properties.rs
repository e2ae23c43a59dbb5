use proptest::prelude::*;
use upcycle_core::analysis::{expert_weight_similarity, relative_compactness, routing_entropy};
use upcycle_core::clustering::{assign_cluster, normalize_columns, normalize_rows, spherical_kmeans};
use upcycle_core::linalg::{
    cholesky_lower, dot, effective_rank, norm, pca_fit_transform, svd_full, DenseMatrix,
};
use upcycle_core::moe::{expert_capacity, route, router_probs, top_k_gates, DenseFfn, MoeLayer};
use upcycle_core::upcycle::{cluster_aware_init, LayerLayout};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| DenseMatrix::new(rows, cols, v).unwrap())
}

fn any_matrix(max: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| matrix(r, c))
}

/// Orthogonal matrix from Gram-Schmidt on a random square matrix.
fn orthogonal(n: usize) -> impl Strategy<Value = DenseMatrix> {
    matrix(n, n).prop_filter_map("rank deficient", |a| {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for c in a.to_columns() {
            let mut v = c;
            for q in &cols {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-3 {
                return None;
            }
            cols.push(v.iter().map(|x| x / n).collect());
        }
        DenseMatrix::from_columns(&cols).ok()
    })
}

fn ffn_from(w1: DenseMatrix, w2: DenseMatrix) -> DenseFfn {
    let (h, d) = w1.shape();
    DenseFfn::new(w1, vec![0.1; h], w2, vec![-0.1; d]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_preserves_energy(a in any_matrix(7)) {
        let f = svd_full(&a).unwrap();
        let r = f.sigma.len();
        prop_assert_eq!(r, a.rows().min(a.cols()));
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.sigma.iter().all(|&s| s >= 0.0));
        let energy: f64 = f.sigma.iter().map(|s| s * s).sum();
        prop_assert!((energy - a.frobenius_sq()).abs() <= 1e-10 * a.frobenius_sq().max(1.0));
        prop_assert!(f.reconstruct(r).max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn effective_rank_is_monotone_in_tau(
        sigma in prop::collection::vec(0.0f64..5.0, 1..12),
        t1 in 0.01f64..1.0,
        t2 in 0.01f64..1.0,
    ) {
        let mut sigma = sigma;
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sigma[0] > 0.0);
        let n = sigma.len();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = effective_rank(&sigma, lo, n).unwrap();
        let b = effective_rank(&sigma, hi, n).unwrap();
        prop_assert!(a.chosen_rank <= b.chosen_rank);
        prop_assert!(b.chosen_rank <= n && a.chosen_rank >= 1);
        prop_assert_eq!(effective_rank(&sigma, 1.0, n).unwrap().chosen_rank, n);
        prop_assert!(b.retained_energy >= hi - 1e-12);
    }

    #[test]
    fn cholesky_recovers_lower_factor(
        n in 1usize..7,
        seed in prop::collection::vec(-1.0f64..1.0, 49),
        diag in prop::collection::vec(0.5f64..2.0, 7),
    ) {
        let l = DenseMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => seed[i * 7 + j],
            std::cmp::Ordering::Equal => diag[i],
            std::cmp::Ordering::Less => 0.0,
        });
        let g = l.matmul_t(&l).unwrap();
        let got = cholesky_lower(&g, 0.0).unwrap();
        prop_assert!(got.max_abs_diff(&l) < 1e-9);
    }

    #[test]
    fn pca_distances_are_rotation_invariant(
        (x, q) in (2usize..6).prop_flat_map(|d| (matrix(d, 12), orthogonal(d))),
    ) {
        let d = x.rows();
        let p = (d / 2).max(1);
        // a unique leading subspace needs a spectral gap
        let mean = x.column_mean();
        let mut c = x.clone();
        c.add_column_vector(&mean.iter().map(|m| -m).collect::<Vec<_>>());
        let s = svd_full(&c).unwrap().sigma;
        prop_assume!(s[0] > 1e-3);
        prop_assume!(p == s.len() || s[p - 1] - s[p] > 1e-2 * s[0]);
        let a = pca_fit_transform(&x, p).unwrap().projected;
        let b = pca_fit_transform(&q.matmul(&x).unwrap(), p).unwrap().projected;
        let ga = a.t_matmul(&a).unwrap();
        let gb = b.t_matmul(&b).unwrap();
        prop_assert!(ga.max_abs_diff(&gb) < 1e-6 * ga.max_abs().max(1.0));
    }

    #[test]
    fn assignment_ignores_point_scale(
        c in matrix(4, 3),
        x in prop::collection::vec(-1.0f64..1.0, 3),
        scale in 1e-3f64..1e3,
    ) {
        let (centroids, zeros) = normalize_rows(&c);
        prop_assume!(zeros == 0);
        // skip near-ties that rounding could reorder
        let mut scores: Vec<f64> = (0..4).map(|i| dot(centroids.row(i), &x)).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(scores[0] - scores[1] > 1e-9);
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        prop_assert_eq!(assign_cluster(&centroids, &x), assign_cluster(&centroids, &scaled));
    }

    #[test]
    fn kmeans_objective_rises_and_partition_is_complete(
        x in matrix(3, 15),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let (x, zeros) = normalize_columns(&x);
        prop_assume!(zeros == 0);
        let m = spherical_kmeans(&x, k, 50, seed).unwrap();
        prop_assert!(m.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        prop_assert_eq!(m.assignments.len(), 15);
        prop_assert!(m.cluster_sizes().iter().all(|&s| s > 0));
        for i in 0..k {
            prop_assert!((norm(m.centroids.row(i)) - 1.0).abs() < 1e-8);
        }
        prop_assert_eq!(spherical_kmeans(&x, k, 50, seed).unwrap(), m);
    }

    #[test]
    fn compactness_is_rotation_and_scale_invariant(
        (groups, q) in (2usize..5).prop_flat_map(|d| {
            (prop::collection::vec(matrix(d, 6), 2..5), orthogonal(d))
        }),
        scale in 0.1f64..10.0,
    ) {
        let base = relative_compactness(&groups).unwrap();
        let rotated: Vec<DenseMatrix> = groups
            .iter()
            .map(|g| q.matmul(g).unwrap().scale(scale))
            .collect();
        let moved = relative_compactness(&rotated).unwrap();
        match (base, moved) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0)),
            (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
        }
    }

    #[test]
    fn similarity_ignores_expert_scale(
        (w1s, w2s) in (2usize..5).prop_flat_map(|n| {
            (prop::collection::vec(matrix(5, 4), n), prop::collection::vec(matrix(4, 5), n))
        }),
        scales in prop::collection::vec(0.1f64..10.0, 4),
    ) {
        let n = w1s.len();
        let experts: Vec<DenseFfn> = w1s.iter().cloned().zip(w2s.iter().cloned()).map(|(a, b)| ffn_from(a, b)).collect();
        let scaled: Vec<DenseFfn> = experts
            .iter()
            .zip(&scales)
            .map(|(e, &s)| {
                DenseFfn::new(
                    e.w1.scale(s),
                    e.b1.iter().map(|v| v * s).collect(),
                    e.w2.scale(s),
                    e.b2.iter().map(|v| v * s).collect(),
                )
                .unwrap()
            })
            .collect();
        let a = MoeLayer::new(experts, DenseMatrix::zeros(n, 4), 1, f64::INFINITY).unwrap();
        let b = MoeLayer::new(scaled, DenseMatrix::zeros(n, 4), 1, f64::INFINITY).unwrap();
        let sa = expert_weight_similarity(&a).unwrap();
        let sb = expert_weight_similarity(&b).unwrap();
        prop_assert!(sa.max_abs_diff(&sb) < 1e-12);
        for i in 0..n {
            prop_assert!((sa.row(i)[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_entropy_is_bounded(
        (router, x) in (1usize..9).prop_flat_map(|n| (matrix(n, 4), matrix(4, 10))),
        gain in 0.0f64..50.0,
    ) {
        let n = router.rows();
        let probs = router_probs(&router.scale(gain), &x).unwrap();
        let h = routing_entropy(&probs);
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (n as f64).ln() + 1e-12);
    }

    #[test]
    fn gates_are_normalized_and_capacity_holds(
        (router, x, k) in (1usize..7).prop_flat_map(|n| (matrix(n, 3), matrix(3, 20), 1..=n)),
        factor in 0.25f64..3.0,
    ) {
        let n = router.rows();
        let probs = router_probs(&router, &x).unwrap();
        for t in 0..x.cols() {
            let (idx, gates) = top_k_gates(probs.row(t), k);
            prop_assert_eq!(idx.len(), k);
            prop_assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let experts = vec![ffn_from(DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 2)); n];
        let layer = MoeLayer::new(experts, router, k, factor).unwrap();
        let r = route(&layer, &x).unwrap();
        let cap = expert_capacity(factor, x.cols(), k, n);
        let kept: Vec<usize> = r
            .selected_counts()
            .iter()
            .zip(r.dropped_counts())
            .map(|(s, d)| s - d)
            .collect();
        prop_assert!(kept.iter().all(|&c| c <= cap));
    }

    #[test]
    fn truncation_error_matches_discarded_energy(
        (w1, x) in (2usize..6).prop_flat_map(|d| (matrix(4, d), matrix(d, 3 * d))),
        tau in 0.3f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (h, d) = w1.shape();
        let ffn = ffn_from(w1, DenseMatrix::zeros(d, h));
        let (layer, _, report) = cluster_aware_init(&ffn, &x, LayerLayout::new(1), tau, seed).unwrap();
        prop_assume!(report.per_expert_jitter[0] == 0.0);
        let lhs = ffn.w1.sub(&layer.experts[0].w1).unwrap().matmul(&x).unwrap().frobenius_sq();
        let sigma = &report.per_expert_sigma[0];
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let tail: f64 = sigma[report.per_expert_rank[0]..].iter().map(|s| s * s).sum();
        prop_assert!((lhs - tail).abs() <= 1e-8 * total.max(1e-12));
    }
}
