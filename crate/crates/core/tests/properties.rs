//! Randomized invariants. Each property states something that must hold
//! for every input in its domain, not just the seeds we happened to try.

use casemix::{
    bias_rmse, build_dataset, estimate, fit_transform, percent, quintile_edges,
    quintile_transition, ranks_of, solve_sbw, split_key_value, system_profile, ColumnSpec,
    Dataset, EstimateOptions, Method, PatientRecord, SbwProblem, TransformMode,
};
use ndarray::Array2;
use proptest::prelude::*;

const SUM_TOL: f64 = 1e-10;
const BAND_TOL: f64 = 1e-8;

fn small_dataset(
    practice_sizes: Vec<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
) -> Dataset {
    let mut records = Vec::new();
    let mut cursor = 0;
    for (p, &size) in practice_sizes.iter().enumerate() {
        for i in 0..size {
            records.push(PatientRecord {
                patient_id: format!("p{p}i{i}"),
                practice: format!("p{p}"),
                outcome: Some(ys[cursor]),
                covariates: vec![xs[2 * cursor], xs[2 * cursor + 1]],
            });
            cursor += 1;
        }
    }
    build_dataset(
        vec![ColumnSpec::continuous("x1"), ColumnSpec::continuous("x2")],
        records,
    )
    .unwrap()
}

/// Strategy: 2-3 practices of 4-7 patients each, bounded covariates and
/// outcomes. Bounded so band feasibility and conditioning stay sane.
fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (2usize..=3, 4usize..=7)
        .prop_flat_map(|(p, s)| {
            let n = p * s;
            (
                Just(vec![s; p]),
                proptest::collection::vec(-3.0..3.0f64, 2 * n),
                proptest::collection::vec(-5.0..5.0f64, n),
            )
        })
        .prop_map(|(sizes, xs, ys)| small_dataset(sizes, xs, ys))
}

fn problem_strategy() -> impl Strategy<Value = SbwProblem> {
    (4usize..=9, 1usize..=2, any::<bool>(), 0.0..0.3f64)
        .prop_flat_map(|(i, l, nonneg, band)| {
            (
                proptest::collection::vec(-2.0..2.0f64, i * l),
                proptest::collection::vec(0.05..1.0f64, i),
                Just((i, l, nonneg, band)),
            )
        })
        .prop_map(|(vals, mix, (i, l, nonneg, band))| {
            let balance = Array2::from_shape_vec((i, l), vals).unwrap();
            // target at a strict convex combination of the rows, so the
            // nonneg problem is feasible by construction
            let total: f64 = mix.iter().sum();
            let w: Vec<f64> = mix.iter().map(|v| v / total).collect();
            let target: Vec<f64> = (0..l)
                .map(|j| (0..i).map(|r| w[r] * balance[[r, j]]).sum())
                .collect();
            SbwProblem {
                balance,
                target,
                delta: vec![band; l],
                nonneg,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solver_weights_satisfy_declared_constraints(prob in problem_strategy()) {
        let sol = solve_sbw(&prob).unwrap();
        let w = sol.weights.expect("feasible by construction");
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() <= SUM_TOL, "sum {sum}");
        for j in 0..prob.balance.ncols() {
            let have: f64 = (0..w.len()).map(|r| w[r] * prob.balance[[r, j]]).sum();
            prop_assert!(
                (have - prob.target[j]).abs() <= prob.delta[j] + BAND_TOL,
                "function {j}: residual {} exceeds band {}",
                (have - prob.target[j]).abs(),
                prob.delta[j]
            );
        }
        if prob.nonneg {
            prop_assert!(w.iter().all(|&v| v >= -1e-12));
            prop_assert_eq!(sol.status, casemix::ExtrapolationStatus::Interpolated);
        } else {
            let has_negative = w.iter().any(|&v| v < 0.0);
            let expect = if has_negative {
                casemix::ExtrapolationStatus::Extrapolated
            } else {
                casemix::ExtrapolationStatus::Interpolated
            };
            prop_assert_eq!(sol.status, expect);
        }
    }

    #[test]
    fn exact_balance_is_invariant_to_function_rescaling(
        prob in problem_strategy(),
        scale in prop::sample::select(vec![0.01f64, 0.5, 3.0, 40.0])
    ) {
        // with zero bands, rescaling a balance function rescales its
        // constraint by the same factor and must not move the solution
        let mut exact = prob.clone();
        exact.delta = vec![0.0; prob.balance.ncols()];
        let base = match solve_sbw(&exact).unwrap().weights {
            Some(w) => w,
            None => return Ok(()), // nonneg + zero bands can be infeasible
        };
        let mut scaled = exact.clone();
        for r in 0..scaled.balance.nrows() {
            scaled.balance[[r, 0]] *= scale;
        }
        scaled.target[0] *= scale;
        let w2 = solve_sbw(&scaled).unwrap().weights.expect("same feasible set");
        for r in 0..base.len() {
            prop_assert!(
                (base[r] - w2[r]).abs() <= 1e-7,
                "row {r}: {} vs {}", base[r], w2[r]
            );
        }
    }

    #[test]
    fn estimates_shift_with_the_outcome(d in dataset_strategy()) {
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        let opts = EstimateOptions::default();
        let shifted = {
            let mut records = Vec::new();
            for i in 0..d.n() {
                records.push(PatientRecord {
                    patient_id: d.patient_ids[i].clone(),
                    practice: d.practice_labels[d.assignment[i]].clone(),
                    outcome: Some(d.outcome_ref().unwrap()[i] + 7.0),
                    covariates: (0..2).map(|j| d.covariates[[i, j]]).collect(),
                });
            }
            build_dataset(d.columns.clone(), records).unwrap()
        };
        for m in [Method::Fe, Method::SbwUnrestricted, Method::SbwWr] {
            let a = estimate(&d, &profile, &t, m, &opts).unwrap();
            let b = estimate(&shifted, &profile, &t, m, &opts).unwrap();
            for (ca, cb) in a.practices.iter().zip(b.practices.iter()) {
                let (ea, eb) = (ca.estimate.unwrap(), cb.estimate.unwrap());
                prop_assert!(
                    (eb - ea - 7.0).abs() <= 1e-6,
                    "{m}: {ea} shifted to {eb}"
                );
            }
        }
    }

    #[test]
    fn ranks_are_a_permutation_and_order_preserving(
        values in proptest::collection::vec(-100.0..100.0f64, 1..30)
    ) {
        let ranks = ranks_of(&values);
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        let want: Vec<usize> = (1..=values.len()).collect();
        prop_assert_eq!(sorted, want);
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(ranks[i] < ranks[j]);
                }
            }
        }
    }

    #[test]
    fn quintile_edges_partition_evenly(total in 5usize..2000, bins in 2usize..=10) {
        prop_assume!(total >= bins);
        let edges = quintile_edges(total, bins);
        prop_assert_eq!(edges.len(), bins);
        prop_assert_eq!(*edges.last().unwrap(), total);
        let mut prev = 0;
        let mut sizes = Vec::new();
        for &e in &edges {
            prop_assert!(e > prev, "edges must strictly increase");
            sizes.push(e - prev);
            prev = e;
        }
        if !(total == 600 && bins == 5) {
            let lo = sizes.iter().min().unwrap();
            let hi = sizes.iter().max().unwrap();
            prop_assert!(hi - lo <= 1, "bin sizes {sizes:?} not balanced");
            // the oversized bins come first
            let first_small = sizes.iter().position(|&s| s == *lo).unwrap_or(sizes.len());
            prop_assert!(sizes[first_small..].iter().all(|&s| s == *lo));
        }
    }

    #[test]
    fn transition_churn_partitions_the_table(n in 2usize..200, seed in 0u64..500) {
        use rand::prelude::*;
        use rand::seq::SliceRandom;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (1..=n).collect();
        let mut b = a.clone();
        b.shuffle(&mut rng);
        let bins = 5.min(n);
        let (m, churn) = quintile_transition(&a, &b, bins).unwrap();
        prop_assert_eq!(m.total(), n);
        prop_assert_eq!(churn.same + churn.one_bin + churn.two_plus, n);
        let corner_pool = if bins > 2 { churn.two_plus } else { n };
        prop_assert!(churn.corner <= corner_pool);
        // row sums equal bin widths under the first ranking
        let edges = quintile_edges(n, bins);
        let mut prev = 0;
        for (i, row) in m.counts.iter().enumerate() {
            let width = edges[i] - prev;
            prop_assert_eq!(row.iter().sum::<usize>(), width);
            prev = edges[i];
        }
    }

    #[test]
    fn identical_rankings_show_no_churn(n in 2usize..300) {
        let a: Vec<usize> = (1..=n).collect();
        let bins = 5.min(n);
        let (_, churn) = quintile_transition(&a, &a, bins).unwrap();
        prop_assert_eq!(churn.same, n);
        prop_assert_eq!(churn.one_bin, 0);
        prop_assert_eq!(churn.two_plus, 0);
        prop_assert_eq!(churn.corner, 0);
    }

    #[test]
    fn rmse_dominates_bias(
        errs in proptest::collection::vec(
            proptest::collection::vec(proptest::option::weighted(0.9, -2.0..2.0f64), 4),
            1..12
        )
    ) {
        match bias_rmse(&errs) {
            Ok(s) => {
                prop_assert!(s.rmse >= s.bias - 1e-12, "rmse {} < bias {}", s.rmse, s.bias);
                prop_assert!(s.bias >= 0.0);
            }
            Err(_) => {
                // only legal when every practice is empty
                for p in 0..4 {
                    prop_assert!(errs.iter().all(|rep| rep[p].is_none()));
                }
            }
        }
    }

    #[test]
    fn key_value_lines_split_at_last_equals(
        key in "[a-zA-Z0-9_.*^+ -]{1,12}",
        value in "[a-zA-Z0-9_. -]{0,12}"
    ) {
        prop_assume!(!key.trim().is_empty());
        prop_assume!(!key.starts_with('#'));
        let line = format!("{key}={value}");
        let (k, v) = split_key_value(&line).expect("has an equals sign");
        prop_assert_eq!(k, key.trim());
        prop_assert_eq!(v, value.trim());
        // keys may themselves contain '=' if re-joined: the last one wins
        let nested = format!("{key}={key}={value}");
        let (k2, v2) = split_key_value(&nested).unwrap();
        let joined = format!("{key}={key}");
        prop_assert_eq!(k2, joined.trim());
        prop_assert_eq!(v2, value.trim());
    }

    #[test]
    fn comments_and_blanks_are_skipped(pad in "[ \t]{0,4}", rest in "[a-z=]{0,10}") {
        let blank = pad.clone();
        let comment = format!("{pad}#{rest}");
        prop_assert_eq!(split_key_value(&blank), None);
        prop_assert_eq!(split_key_value(&comment), None);
    }

    #[test]
    fn percent_formats_one_decimal(n in 0usize..1000, total in 1usize..1000) {
        prop_assume!(n <= total);
        let s = percent(n, total);
        prop_assert!(s.ends_with('%'));
        let v: f64 = s.trim_end_matches('%').parse().unwrap();
        let want = 100.0 * n as f64 / total as f64;
        prop_assert!((v - want).abs() <= 0.05 + 1e-9, "{s} vs {want}");
    }
}

#[test]
fn reference_table_size_keeps_its_published_edges() {
    assert_eq!(quintile_edges(600, 5), vec![120, 240, 361, 480, 600]);
    // neighbours use the generic equal-frequency rule
    assert_eq!(quintile_edges(599, 5), vec![120, 240, 360, 480, 599]);
    assert_eq!(quintile_edges(601, 5), vec![121, 241, 361, 481, 601]);
}
