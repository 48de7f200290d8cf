use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sparse_prs::evaluate::{r_squared, support_similarity};
use sparse_prs::genotype::{stabilized_sxx, ColumnSummary, GenotypeMatrix};
use sparse_prs::pipeline::{split, Composition, FittedModel, Method, ModelMetadata, SplitSpec};
use sparse_prs::solver::{fit_path, fit_single, Constraint, LambdaPath, PenalizedProblem, SolverConfig};
use sparse_prs::univariate::{centered_sxx, fit_univariate_binomial};
use sparse_prs::Family;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn matrix(n: usize, p: usize, codes: &[u8]) -> GenotypeMatrix {
    let ids = (0..p).map(|j| format!("v{j}")).collect();
    GenotypeMatrix::from_codes(n, ids, codes).unwrap()
}

fn constrained_problem(seed: u64, family: Family) -> PenalizedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(30..80);
    let m = rng.random_range(3..25);
    let x = Array2::from_shape_fn((n, m), |_| normal(&mut rng));
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let eta = x[[i, 0]] - 0.5 * x[[i, 1]] + 0.3 * normal(&mut rng);
            match family {
                Family::Gaussian => eta,
                Family::Binomial => (rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())) as u8 as f64,
            }
        })
        .collect();
    let constraint = (0..m)
        .map(|j| [Constraint::Free, Constraint::NonNegative, Constraint::NonPositive][j % 3])
        .collect();
    let weights = (0..m).map(|_| rng.random_range(0.2..3.0)).collect();
    PenalizedProblem::new(x, y, family, weights, constraint, 1.0).unwrap()
}

fn model(ids: &[String]) -> FittedModel {
    FittedModel {
        method: Method::Lasso,
        family: Family::Gaussian,
        intercept: 0.0,
        coefficients: ids.iter().map(|id| (id.clone(), 1.0)).collect(),
        covariate_names: vec![],
        covariate_coefficients: vec![],
        chosen_lambda: 0.1,
        composition: Composition::Direct,
        metadata: ModelMetadata::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn maf_filter_is_monotone(
        n in 4usize..40,
        p in 1usize..10,
        seed in any::<u64>(),
        t1 in 0.0f64..0.5,
        t2 in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<u8> = (0..n * p).map(|_| rng.random_range(0..4)).collect();
        let g = matrix(n, p, &codes);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let loose: BTreeSet<usize> = g.maf_filter(lo).into_iter().collect();
        let strict: BTreeSet<usize> = g.maf_filter(hi).into_iter().collect();
        prop_assert!(strict.is_subset(&loose));
    }

    #[test]
    fn stabilized_sxx_positive_with_a_varying_column(
        columns in prop::collection::vec(prop::collection::vec(0u8..4, 6), 1..30),
    ) {
        let summaries: Vec<ColumnSummary> =
            columns.iter().map(|c| ColumnSummary::from_codes(c.iter().copied())).collect();
        prop_assume!(summaries.iter().any(|s| s.s_xx > 0.0));
        let st = stabilized_sxx(&summaries).unwrap();
        prop_assert!(st.shift > 0.0);
        prop_assert!(st.values.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn irls_weights_stay_in_quarter_interval(seed in any::<u64>(), n in 8usize..120, effect in -4.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let mut y: Vec<f64> = x
            .iter()
            .map(|v| (rng.random::<f64>() < 1.0 / (1.0 + (-(effect * (v - 1.0))).exp())) as u8 as f64)
            .collect();
        y[0] = 0.0;
        y[1] = 1.0;
        prop_assume!(centered_sxx(&x) > 0.0);
        let (_, state) = fit_univariate_binomial(&x, &y, centered_sxx(&x)).unwrap();
        prop_assert!(state.weights.iter().all(|&w| w > 0.0 && w <= 0.25));
    }

    #[test]
    fn gaussian_objective_never_increases(seed in any::<u64>()) {
        let problem = constrained_problem(seed, Family::Gaussian);
        let config = SolverConfig { record_objective: true, ..SolverConfig::default() };
        let path = LambdaPath::default_for(&problem).unwrap();
        let fit = fit_path(&problem, &path, &config).unwrap();
        for pt in &fit.points {
            for w in pt.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn coefficients_respect_their_orthant(seed in any::<u64>(), binomial in any::<bool>()) {
        let family = if binomial { Family::Binomial } else { Family::Gaussian };
        let problem = constrained_problem(seed, family);
        let path = LambdaPath::default_for(&problem).unwrap();
        let fit = fit_path(&problem, &path, &SolverConfig::default()).unwrap();
        for pt in &fit.points {
            for &(j, b) in &pt.coefficients {
                prop_assert!(problem.constraint()[j].admits(b), "feature {j} = {b}");
            }
        }
    }

    #[test]
    fn column_scaling_with_matching_weight_leaves_predictions(seed in any::<u64>(), c in 0.2f64..5.0) {
        let problem = constrained_problem(seed, Family::Gaussian);
        let mut x = problem.features().clone();
        x.column_mut(0).mapv_inplace(|v| v * c);
        let mut weights = problem.penalty_weight().to_vec();
        weights[0] *= c;
        let scaled = PenalizedProblem::new(
            x,
            problem.response().to_vec(),
            Family::Gaussian,
            weights,
            problem.constraint().to_vec(),
            1.0,
        )
        .unwrap();
        let config = SolverConfig { tol: 1e-14, kkt_tol: Some(1e-11), ..SolverConfig::default() };
        let lambda = 0.05 * sparse_prs::solver::lambda_max(&problem).unwrap();
        let a = fit_single(&problem, lambda, &config).unwrap();
        let b = fit_single(&scaled, lambda, &config).unwrap();
        let m = problem.n_features();
        let ea = problem.linear_predictor(a.intercept, &a.beta(m));
        let eb = scaled.linear_predictor(b.intercept, &b.beta(m));
        for (u, v) in ea.iter().zip(&eb) {
            prop_assert!((u - v).abs() <= 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn ridge_limit_matches_normal_equations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (60, 4);
        let x = Array2::from_shape_fn((n, m), |_| normal(&mut rng));
        let y: Vec<f64> = (0..n).map(|i| 1.0 + x[[i, 0]] + normal(&mut rng)).collect();
        let problem = PenalizedProblem::new(
            x.clone(),
            y.clone(),
            Family::Gaussian,
            vec![1.0; m],
            vec![Constraint::Free; m],
            0.0,
        )
        .unwrap();
        let lambda = 0.3;
        let config = SolverConfig { tol: 1e-16, max_iter: 1_000_000, kkt_tol: Some(1e-12), ..SolverConfig::default() };
        let pt = fit_single(&problem, lambda, &config).unwrap();
        let xm: Vec<f64> = (0..m).map(|j| x.column(j).sum() / n as f64).collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let mut a = vec![vec![0.0; m]; m];
        let mut b = vec![0.0; m];
        for i in 0..n {
            for r in 0..m {
                b[r] += (x[[i, r]] - xm[r]) * (y[i] - ym) / n as f64;
                for c in 0..m {
                    a[r][c] += (x[[i, r]] - xm[r]) * (x[[i, c]] - xm[c]) / n as f64;
                }
            }
        }
        for (r, row) in a.iter_mut().enumerate() {
            row[r] += lambda;
        }
        for c in 0..m {
            for r in c + 1..m {
                let f = a[r][c] / a[c][c];
                for k in c..m {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut ridge = vec![0.0; m];
        for r in (0..m).rev() {
            let s: f64 = (r + 1..m).map(|k| a[r][k] * ridge[k]).sum();
            ridge[r] = (b[r] - s) / a[r][r];
        }
        let beta = pt.beta(m);
        for j in 0..m {
            prop_assert!((beta[j] - ridge[j]).abs() < 1e-8, "{} vs {}", beta[j], ridge[j]);
        }
    }

    #[test]
    fn r_squared_invariant_under_joint_permutation(seed in any::<u64>(), n in 3usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let eta: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let ep: Vec<f64> = order.iter().map(|&i| eta[i]).collect();
        let a = r_squared(&y, &eta, 0.1).unwrap();
        let b = r_squared(&yp, &ep, 0.1).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal(
        sets in prop::collection::vec(prop::collection::btree_set(0usize..20, 1..10), 2..5),
    ) {
        let models: Vec<FittedModel> = sets
            .iter()
            .map(|s| model(&s.iter().map(|j| format!("v{j}")).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<String> = (0..models.len()).map(|k| format!("m{k}")).collect();
        let refs: Vec<&FittedModel> = models.iter().collect();
        let table = support_similarity(&labels, &refs).unwrap();
        for a in 0..models.len() {
            prop_assert_eq!(table.get(a, a), 1.0);
            for b in 0..models.len() {
                prop_assert_eq!(table.get(a, b), table.get(b, a));
                prop_assert!((0.0..=1.0).contains(&table.get(a, b)));
            }
        }
    }

    #[test]
    fn split_partitions_rows(n in 10usize..500, seed in any::<u64>()) {
        let s = split(n, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
        prop_assert_eq!(s.validation.len(), n / 10);
        prop_assert_eq!(s.test.len(), n / 5);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
