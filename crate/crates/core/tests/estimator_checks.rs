//! Regression and layered estimators checked against from-scratch
//! reimplementations on top of nalgebra. The production code goes through
//! ndarray and its own column-dropping QR path, so agreement here is a
//! genuine cross-check, not the same code called twice.

use casemix::{
    balance_functions, basis_for, build_dataset, detect_null_covariates, estimate, fit_transform,
    hajek_se, linear_se, system_profile, transformed_profile, ColumnKind, ColumnSpec, Dataset,
    EstimateOptions, ExtrapolationStatus, Method, PatientRecord, PredictionMode, Profile,
    TransformMode,
};
use nalgebra::{DMatrix, DVector};
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-8;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Random continuous-covariate dataset with practice labels "p0".."p{P-1}".
fn random_dataset(rng: &mut ChaCha8Rng, practices: usize, k: usize) -> Dataset {
    let beta: Vec<f64> = (0..k).map(|_| standard_normal(rng)).collect();
    let mut records = Vec::new();
    for p in 0..practices {
        let size = rng.gen_range(8..=16);
        for i in 0..size {
            let x: Vec<f64> = (0..k).map(|_| standard_normal(rng)).collect();
            let lin: f64 = beta.iter().zip(&x).map(|(b, v)| b * v).sum();
            let y = 0.5 * (p as f64 + 1.0) + lin + 0.3 * standard_normal(rng);
            records.push(PatientRecord {
                patient_id: format!("p{p}i{i}"),
                practice: format!("p{p}"),
                outcome: Some(y),
                covariates: x,
            });
        }
    }
    let columns: Vec<ColumnSpec> = (0..k)
        .map(|j| ColumnSpec::continuous(&format!("x{}", j + 1)))
        .collect();
    build_dataset(columns, records).unwrap()
}

/// Dataset where the binary column "flag" is constant zero inside the
/// first practice but present elsewhere, so it is a null function for that
/// practice against the pooled profile.
fn dataset_with_null_flag(rng: &mut ChaCha8Rng, practices: usize) -> Dataset {
    let mut records = Vec::new();
    for p in 0..practices {
        let size = rng.gen_range(9..=14);
        for i in 0..size {
            let x1 = standard_normal(rng);
            let x2 = standard_normal(rng);
            let flag = if p == 0 {
                0.0
            } else {
                f64::from(rng.gen_bool(0.4))
            };
            let y = 0.4 * (p as f64) + 0.8 * x1 - 0.5 * x2 + 1.3 * flag
                + 0.3 * standard_normal(rng);
            records.push(PatientRecord {
                patient_id: format!("p{p}i{i}"),
                practice: format!("p{p}"),
                outcome: Some(y),
                covariates: vec![x1, x2, flag],
            });
        }
    }
    let columns = vec![
        ColumnSpec::continuous("x1"),
        ColumnSpec::continuous("x2"),
        ColumnSpec::binary("flag"),
    ];
    build_dataset(columns, records).unwrap()
}

/// Minimum-norm least squares via SVD.
fn svd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone().svd(true, true).solve(b, 1e-12).unwrap()
}

/// Pooled design [functions | practice indicators] as nalgebra.
fn pooled_design(d: &Dataset, funcs: &ndarray::Array2<f64>) -> DMatrix<f64> {
    let n = d.n();
    let l = funcs.ncols();
    let pc = d.practice_count();
    let mut m = DMatrix::zeros(n, l + pc);
    for i in 0..n {
        for j in 0..l {
            m[(i, j)] = funcs[[i, j]];
        }
    }
    for p in 0..pc {
        for &r in d.practice_rows(p) {
            m[(r, l + p)] = 1.0;
        }
    }
    m
}

/// Exact-balance projection weights for one practice: the minimum-distance
/// adjustment of uniform weights meeting the sum and mean constraints.
fn projection_weights(
    d: &Dataset,
    p: usize,
    funcs: &ndarray::Array2<f64>,
    keep: &[usize],
    target: &[f64],
) -> DVector<f64> {
    let rows = d.practice_rows(p);
    let ip = rows.len();
    let mut a = DMatrix::zeros(keep.len() + 1, ip);
    let mut b = DVector::zeros(keep.len() + 1);
    for c in 0..ip {
        a[(0, c)] = 1.0;
    }
    b[0] = 1.0;
    for (jj, &j) in keep.iter().enumerate() {
        for (c, &r) in rows.iter().enumerate() {
            a[(jj + 1, c)] = funcs[[r, j]];
        }
        b[jj + 1] = target[j];
    }
    let u = DVector::from_element(ip, 1.0 / ip as f64);
    let gram = &a * a.transpose();
    let rhs = &b - &a * &u;
    let lam = gram.lu().solve(&rhs).expect("practice system solvable");
    u + a.transpose() * lam
}

#[test]
fn fe_matches_pooled_least_squares_on_raw_basis() {
    let mut rng = rng_for(11);
    let opts = EstimateOptions::default();
    for _ in 0..25 {
        let pc = rng.gen_range(2..=5);
        let k = rng.gen_range(1..=3);
        let d = random_dataset(&mut rng, pc, k);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        let table = estimate(&d, &profile, &t, Method::Fe, &opts).unwrap();

        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let x = pooled_design(&d, &bm.values);
        let y = DVector::from_iterator(d.n(), d.outcome_ref().unwrap().iter().cloned());
        let coef = svd_solve(&x, &y);
        for p in 0..pc {
            let mut row = DVector::zeros(x.ncols());
            for (j, &v) in target.iter().enumerate() {
                row[j] = v;
            }
            row[bm.l() + p] = 1.0;
            let want = row.dot(&coef);
            let got = table.practices[p].estimate.expect("FE always estimates");
            assert!(
                (got - want).abs() <= TOL,
                "FE practice {p}: {got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn fe_predictions_survive_collinear_basis() {
    // The second-moment basis repeats the raw covariates up to an affine
    // map, so the pooled design is singular by construction. The fit drops
    // columns; the minimum-norm SVD solution must still agree at the
    // profile row because that row satisfies the same dependencies.
    let mut rng = rng_for(12);
    let opts = EstimateOptions::default();
    for _ in 0..10 {
        let pc = rng.gen_range(2..=4);
        let d = random_dataset(&mut rng, pc, 3);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::PcSecondMoment, 0.8).unwrap();
        let table = estimate(&d, &profile, &t, Method::Fe, &opts).unwrap();

        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let x = pooled_design(&d, &bm.values);
        let y = DVector::from_iterator(d.n(), d.outcome_ref().unwrap().iter().cloned());
        let coef = svd_solve(&x, &y);
        for p in 0..pc {
            let mut row = DVector::zeros(x.ncols());
            for (j, &v) in target.iter().enumerate() {
                row[j] = v;
            }
            row[bm.l() + p] = 1.0;
            let want = row.dot(&coef);
            let got = table.practices[p].estimate.unwrap();
            assert!(
                (got - want).abs() <= 1e-6,
                "FE on expanded basis, practice {p}: {got} vs min-norm {want}"
            );
        }
    }
}

#[test]
fn mr_matches_per_practice_least_squares() {
    let mut rng = rng_for(13);
    let opts = EstimateOptions::default();
    for _ in 0..25 {
        let pc = rng.gen_range(2..=4);
        let k = rng.gen_range(1..=2);
        let d = random_dataset(&mut rng, pc, k);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        let table = estimate(&d, &profile, &t, Method::Mr, &opts).unwrap();

        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let y = d.outcome_ref().unwrap();
        for p in 0..pc {
            let rows = d.practice_rows(p);
            let mut x = DMatrix::zeros(rows.len(), bm.l() + 1);
            let mut yp = DVector::zeros(rows.len());
            for (i, &r) in rows.iter().enumerate() {
                x[(i, 0)] = 1.0;
                for j in 0..bm.l() {
                    x[(i, j + 1)] = bm.values[[r, j]];
                }
                yp[i] = y[r];
            }
            let coef = svd_solve(&x, &yp);
            let mut row = DVector::zeros(bm.l() + 1);
            row[0] = 1.0;
            for (j, &v) in target.iter().enumerate() {
                row[j + 1] = v;
            }
            let want = row.dot(&coef);
            let got = table.practices[p].estimate.unwrap();
            assert!(
                (got - want).abs() <= TOL,
                "MR practice {p}: {got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn layered_fe_matches_hand_built_correction() {
    let mut rng = rng_for(14);
    let opts = EstimateOptions::default();
    for rep in 0..15 {
        let pc = rng.gen_range(3..=4);
        let d = dataset_with_null_flag(&mut rng, pc);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        let table = estimate(&d, &profile, &t, Method::SbwFe, &opts).unwrap();

        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let np = detect_null_covariates(&d, &profile).unwrap();
        // the flag column (index 2) must be null for practice 0 and only
        // there, otherwise this test is not exercising the layered path
        assert!(np.per_practice[0].is_null(2), "rep {rep}: flag not null");
        assert_eq!(np.null_union(), vec![2]);

        // step 1: per practice, exact balance on its non-null functions
        let n = d.n();
        let mut what = DVector::zeros(n);
        for p in 0..pc {
            let keep: Vec<usize> =
                (0..bm.l()).filter(|&j| !np.per_practice[p].is_null(j)).collect();
            let w = projection_weights(&d, p, &bm.values, &keep, &target);
            for (k, &r) in d.practice_rows(p).iter().enumerate() {
                what[r] = w[k];
            }
        }

        // step 2: pooled regression on [null-union columns, weights,
        // indicators]
        let union = np.null_union();
        let width = union.len() + 1 + pc;
        let mut x = DMatrix::zeros(n, width);
        for i in 0..n {
            for (jj, &j) in union.iter().enumerate() {
                x[(i, jj)] = bm.values[[i, j]];
            }
            x[(i, union.len())] = what[i];
        }
        for p in 0..pc {
            for &r in d.practice_rows(p) {
                x[(r, union.len() + 1 + p)] = 1.0;
            }
        }
        let yv = DVector::from_iterator(n, d.outcome_ref().unwrap().iter().cloned());
        let coef = svd_solve(&x, &yv);

        for p in 0..pc {
            let rows = d.practice_rows(p);
            let hajek: f64 = rows.iter().map(|&r| what[r] * yv[r]).sum();
            let mut gap_row = DVector::zeros(width);
            for (jj, &j) in union.iter().enumerate() {
                let m_pj: f64 = rows.iter().map(|&r| what[r] * bm.values[[r, j]]).sum();
                gap_row[jj] = target[j] - m_pj;
            }
            let want = hajek + gap_row.dot(&coef);
            let got = table.practices[p].estimate.unwrap();
            assert!(
                (got - want).abs() <= 1e-7,
                "rep {rep}, practice {p}: layered FE {got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn layered_fe_without_nulls_reduces_to_weighted_mean() {
    // With no null functions there is nothing to correct, so the estimate
    // is the step-1 weighted outcome mean.
    let mut rng = rng_for(15);
    let opts = EstimateOptions::default();
    for _ in 0..10 {
        let pc = rng.gen_range(2..=4);
        let d = random_dataset(&mut rng, pc, 2);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        let table = estimate(&d, &profile, &t, Method::SbwFe, &opts).unwrap();

        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let y = d.outcome_ref().unwrap();
        let keep: Vec<usize> = (0..bm.l()).collect();
        for p in 0..pc {
            let w = projection_weights(&d, p, &bm.values, &keep, &target);
            let want: f64 = d
                .practice_rows(p)
                .iter()
                .enumerate()
                .map(|(k, &r)| w[k] * y[r])
                .sum();
            let got = table.practices[p].estimate.unwrap();
            assert!(
                (got - want).abs() <= 1e-7,
                "practice {p}: {got} vs weighted mean {want}"
            );
        }
    }
}

#[test]
fn layered_wr_matches_weighted_least_squares() {
    let mut rng = rng_for(16);
    let opts = EstimateOptions::default();
    for rep in 0..15 {
        let pc = rng.gen_range(3..=4);
        let d = dataset_with_null_flag(&mut rng, pc);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        let table = estimate(&d, &profile, &t, Method::SbwWr, &opts).unwrap();

        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let np = detect_null_covariates(&d, &profile).unwrap();
        let n = d.n();
        let mut omega = DVector::zeros(n);
        for p in 0..pc {
            let keep: Vec<usize> =
                (0..bm.l()).filter(|&j| !np.per_practice[p].is_null(j)).collect();
            let w = projection_weights(&d, p, &bm.values, &keep, &target);
            let rows = d.practice_rows(p);
            let truncated: Vec<f64> = (0..rows.len()).map(|k| w[k].max(0.0)).collect();
            let all_zero = truncated.iter().all(|&v| v == 0.0);
            for (k, &r) in rows.iter().enumerate() {
                omega[r] = if all_zero {
                    1.0 / rows.len() as f64
                } else {
                    truncated[k]
                };
            }
        }

        let x = pooled_design(&d, &bm.values);
        let yv = DVector::from_iterator(n, d.outcome_ref().unwrap().iter().cloned());
        // weighted normal equations, solved through the sqrt-weight trick
        let sw = omega.map(|v| v.sqrt());
        let mut xw = x.clone();
        let mut yw = yv.clone();
        for i in 0..n {
            for j in 0..x.ncols() {
                xw[(i, j)] *= sw[i];
            }
            yw[i] *= sw[i];
        }
        let coef = svd_solve(&xw, &yw);
        for p in 0..pc {
            let mut row = DVector::zeros(x.ncols());
            for (j, &v) in target.iter().enumerate() {
                row[j] = v;
            }
            row[bm.l() + p] = 1.0;
            let want = row.dot(&coef);
            let got = table.practices[p].estimate.unwrap();
            assert!(
                (got - want).abs() <= 1e-7,
                "rep {rep}, practice {p}: layered WR {got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn literal_layered_mode_averages_fitted_values() {
    // The literal prediction mode evaluates the pooled fit at the practice
    // mean row instead of correcting the weighted mean. Averaging fitted
    // values over the practice gives the same number because the fit is
    // linear.
    let mut rng = rng_for(17);
    let opts = EstimateOptions {
        layered_mode: PredictionMode::Literal,
        ..EstimateOptions::default()
    };
    let d = dataset_with_null_flag(&mut rng, 3);
    let profile = system_profile(&d);
    let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
    let table = estimate(&d, &profile, &t, Method::SbwFe, &opts).unwrap();

    let (bm, target) = basis_for(&d, &t, &profile).unwrap();
    let np = detect_null_covariates(&d, &profile).unwrap();
    let union = np.null_union();
    let n = d.n();
    let mut what = DVector::zeros(n);
    for p in 0..3 {
        let keep: Vec<usize> =
            (0..bm.l()).filter(|&j| !np.per_practice[p].is_null(j)).collect();
        let w = projection_weights(&d, p, &bm.values, &keep, &target);
        for (k, &r) in d.practice_rows(p).iter().enumerate() {
            what[r] = w[k];
        }
    }
    let width = union.len() + 1 + 3;
    let mut x = DMatrix::zeros(n, width);
    for i in 0..n {
        for (jj, &j) in union.iter().enumerate() {
            x[(i, jj)] = bm.values[[i, j]];
        }
        x[(i, union.len())] = what[i];
    }
    for p in 0..3 {
        for &r in d.practice_rows(p) {
            x[(r, union.len() + 1 + p)] = 1.0;
        }
    }
    let yv = DVector::from_iterator(n, d.outcome_ref().unwrap().iter().cloned());
    let coef = svd_solve(&x, &yv);
    let fitted = &x * &coef;
    for p in 0..3 {
        let rows = d.practice_rows(p);
        let want: f64 = rows.iter().map(|&r| fitted[r]).sum::<f64>() / rows.len() as f64;
        let got = table.practices[p].estimate.unwrap();
        assert!(
            (got - want).abs() <= 1e-7,
            "practice {p}: literal mode {got} vs mean fitted {want}"
        );
    }
}

#[test]
fn se_helpers_match_direct_formulas() {
    let w = Array1::from(vec![0.5, 0.3, 0.2]);
    let y = [1.0, 2.0, 4.0];
    let mu = 0.5 * 1.0 + 0.3 * 2.0 + 0.2 * 4.0;
    let want = (0.25_f64 * (1.0 - mu) * (1.0 - mu)
        + 0.09 * (2.0 - mu) * (2.0 - mu)
        + 0.04 * (4.0 - mu) * (4.0 - mu))
        .sqrt();
    let got = hajek_se(&w, &y, mu).unwrap();
    assert!((got - want).abs() <= 1e-12);

    // single supported patient: no spread to estimate from
    let point = Array1::from(vec![1.0, 0.0]);
    assert!(hajek_se(&point, &[3.0, 5.0], 3.0).is_none());

    let c = Array1::from(vec![0.2, -0.1, 0.4]);
    let r = Array1::from(vec![1.0, 2.0, -0.5]);
    let want = (0.04_f64 * 1.0 + 0.01 * 4.0 + 0.16 * 0.25).sqrt();
    assert!((linear_se(&c, &r) - want).abs() <= 1e-12);
}

#[test]
fn uniform_weights_hajek_se_matches_classical_formula() {
    let mut rng = rng_for(18);
    let n = 40;
    let y: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let w = Array1::from_elem(n, 1.0 / n as f64);
    let mu = y.iter().sum::<f64>() / n as f64;
    let var: f64 = y.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
    let classical = (var / n as f64).sqrt();
    let got = hajek_se(&w, &y, mu).unwrap();
    let expected = classical * ((n - 1) as f64 / n as f64).sqrt();
    assert!(
        (got - expected).abs() <= 1e-12,
        "{got} vs {expected}"
    );
}

#[test]
fn bootstrap_se_is_deterministic_and_tracks_analytic() {
    let mut rng = rng_for(19);
    let d = random_dataset(&mut rng, 2, 1);
    let profile = system_profile(&d);
    let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
    let boot = EstimateOptions {
        bootstrap: Some(casemix::BootstrapConfig { draws: 200, seed: 7 }),
        ..EstimateOptions::default()
    };
    let a = estimate(&d, &profile, &t, Method::SbwUnrestricted, &boot).unwrap();
    let b = estimate(&d, &profile, &t, Method::SbwUnrestricted, &boot).unwrap();
    let plain = estimate(
        &d,
        &profile,
        &t,
        Method::SbwUnrestricted,
        &EstimateOptions::default(),
    )
    .unwrap();
    for p in 0..d.practice_count() {
        let sa = a.practices[p].se.expect("bootstrap SE");
        let sb = b.practices[p].se.unwrap();
        assert_eq!(sa, sb, "bootstrap must be reproducible for a fixed seed");
        // point estimates are untouched by the SE engine
        assert_eq!(a.practices[p].estimate, plain.practices[p].estimate);
        let analytic = plain.practices[p].se.unwrap();
        assert!(
            sa / analytic > 0.3 && sa / analytic < 3.0,
            "practice {p}: bootstrap {sa} vs analytic {analytic}"
        );
    }
}

#[test]
fn all_methods_agree_on_single_practice_at_own_mean() {
    // One practice whose profile is its own covariate mean: every method
    // reduces to the plain outcome mean.
    let mut rng = rng_for(20);
    let d = random_dataset(&mut rng, 1, 2);
    let profile = system_profile(&d);
    let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
    let y = d.outcome_ref().unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let opts = EstimateOptions::default();
    for m in Method::ALL {
        let table = estimate(&d, &profile, &t, m, &opts).unwrap();
        let got = table.practices[0].estimate.unwrap();
        assert!(
            (got - mean).abs() <= TOL,
            "{m}: {got} vs outcome mean {mean}"
        );
        assert_eq!(table.practices[0].status, ExtrapolationStatus::Interpolated);
    }
}

#[test]
fn tables_have_valid_intervals_ranks_and_statuses() {
    let mut rng = rng_for(21);
    let opts = EstimateOptions::default();
    for _ in 0..10 {
        let pc = rng.gen_range(2..=5);
        let d = random_dataset(&mut rng, pc, 2);
        let profile = system_profile(&d);
        let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
        for m in Method::ALL {
            let table = estimate(&d, &profile, &t, m, &opts).unwrap();
            assert_eq!(table.practices.len(), pc);
            let mut ranks = Vec::new();
            for cell in &table.practices {
                if let Some(est) = cell.estimate {
                    let (lo, hi) = cell.ci.expect("estimate implies interval");
                    assert!(lo <= est && est <= hi, "{m}: {lo} <= {est} <= {hi}");
                    ranks.push(cell.rank.expect("estimate implies rank"));
                } else {
                    assert!(cell.rank.is_none());
                    assert!(
                        !m.model_extrapolating(),
                        "{m} must estimate every practice"
                    );
                }
            }
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
            let want: Vec<usize> = (1..=ranks.len()).collect();
            assert_eq!(sorted, want, "{m}: ranks must be a permutation");
        }
    }
}

#[test]
fn nonneg_sbw_abstains_outside_the_hull_and_unrestricted_does_not() {
    // Two practices far apart; the pooled profile is outside each
    // practice's own covariate hull only when a practice sits entirely on
    // one side. Build that directly: practice a at x in [0,1], practice b
    // at x in [4,5], profile at the pooled mean ~2.5.
    let mut records = Vec::new();
    let mut rng = rng_for(22);
    for i in 0..12 {
        records.push(PatientRecord {
            patient_id: format!("a{i}"),
            practice: "a".to_string(),
            outcome: Some(1.0 + 0.1 * standard_normal(&mut rng)),
            covariates: vec![rng.gen_range(0.0..1.0)],
        });
        records.push(PatientRecord {
            patient_id: format!("b{i}"),
            practice: "b".to_string(),
            outcome: Some(2.0 + 0.1 * standard_normal(&mut rng)),
            covariates: vec![rng.gen_range(4.0..5.0)],
        });
    }
    let d = build_dataset(vec![ColumnSpec::continuous("x")], records).unwrap();
    let profile = system_profile(&d);
    let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
    let opts = EstimateOptions::default();

    let nn = estimate(&d, &profile, &t, Method::SbwNonneg, &opts).unwrap();
    for cell in &nn.practices {
        assert_eq!(cell.status, ExtrapolationStatus::Infeasible);
        assert!(cell.estimate.is_none());
        assert!(cell.note.is_some());
    }

    let un = estimate(&d, &profile, &t, Method::SbwUnrestricted, &opts).unwrap();
    for cell in &un.practices {
        assert_eq!(cell.status, ExtrapolationStatus::Extrapolated);
        let est = cell.estimate.expect("unrestricted weights always exist");
        assert!(est.is_finite());
    }
}

#[test]
fn mr_abstains_on_singular_practice_design_unless_told_otherwise() {
    // Make practice "a" rank deficient: its second covariate is an exact
    // copy of the first. The other practice stays full rank.
    let mut records = Vec::new();
    let mut rng = rng_for(23);
    for i in 0..10 {
        let x = standard_normal(&mut rng);
        records.push(PatientRecord {
            patient_id: format!("a{i}"),
            practice: "a".to_string(),
            outcome: Some(x + 0.1 * standard_normal(&mut rng)),
            covariates: vec![x, x],
        });
        let (u, v) = (standard_normal(&mut rng), standard_normal(&mut rng));
        records.push(PatientRecord {
            patient_id: format!("b{i}"),
            practice: "b".to_string(),
            outcome: Some(u - v + 0.1 * standard_normal(&mut rng)),
            covariates: vec![u, v],
        });
    }
    let d = build_dataset(
        vec![ColumnSpec::continuous("x1"), ColumnSpec::continuous("x2")],
        records,
    )
    .unwrap();
    let profile = system_profile(&d);
    let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();

    let strict = estimate(&d, &profile, &t, Method::Mr, &EstimateOptions::default()).unwrap();
    assert!(strict.practices[0].estimate.is_none());
    assert_eq!(strict.practices[0].status, ExtrapolationStatus::Infeasible);
    assert!(strict.practices[0]
        .note
        .as_deref()
        .unwrap()
        .contains("singular"));
    assert!(strict.practices[1].estimate.is_some());

    let lenient = estimate(
        &d,
        &profile,
        &t,
        Method::Mr,
        &EstimateOptions {
            mr_pseudoinverse: true,
            ..EstimateOptions::default()
        },
    )
    .unwrap();
    assert!(lenient.practices[0].estimate.is_some());
    // practice b is unaffected by the fallback switch
    let a = strict.practices[1].estimate.unwrap();
    let b = lenient.practices[1].estimate.unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn profile_source_changes_targets_but_not_machinery() {
    // Estimating against an external profile that matches one practice's
    // mean exactly: SBW for that practice returns (near) uniform weights,
    // so the estimate is (near) that practice's outcome mean.
    let mut rng = rng_for(24);
    let d = random_dataset(&mut rng, 3, 2);
    let t = fit_transform(&d, TransformMode::Raw, 0.8).unwrap();
    let rows = d.practice_rows(1);
    let vals: Vec<f64> = (0..2)
        .map(|j| rows.iter().map(|&r| d.covariates[[r, j]]).sum::<f64>() / rows.len() as f64)
        .collect();
    let profile = Profile::custom("practice-1-mean", d.column_names(), vals);
    let table = estimate(&d, &profile, &t, Method::SbwUnrestricted, &EstimateOptions::default())
        .unwrap();
    let y = d.outcome_ref().unwrap();
    let mean: f64 = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
    let got = table.practices[1].estimate.unwrap();
    assert!(
        (got - mean).abs() <= TOL,
        "own-mean profile: {got} vs {mean}"
    );
}

#[test]
fn balance_functions_and_transformed_profile_stay_aligned() {
    // basis_for must be the same as calling the two halves separately.
    let mut rng = rng_for(25);
    let d = random_dataset(&mut rng, 3, 3);
    let profile = system_profile(&d);
    for mode in [TransformMode::Raw, TransformMode::PcAugmented, TransformMode::PcSecondMoment] {
        let t = fit_transform(&d, mode, 0.8).unwrap();
        let (bm, target) = basis_for(&d, &t, &profile).unwrap();
        let bm2 = balance_functions(&d, &t).unwrap();
        let tp = transformed_profile(&t, &d, &profile).unwrap();
        assert_eq!(bm.names, bm2.names);
        assert_eq!(target, tp.values);
        assert_eq!(bm.values, bm2.values);
        assert_eq!(bm.names.len(), target.len());
        for (j, k) in bm.kinds.iter().enumerate() {
            if *k == ColumnKind::Binary {
                assert!(
                    bm.values.column(j).iter().all(|&v| v == 0.0 || v == 1.0),
                    "{mode:?}: binary column {j} left the 0/1 lattice"
                );
            }
        }
    }
}
