use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::design::LevelEffects;

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Trapezoid rule on [-12σ, 12σ] for `∫ f(u) φ(u; 0, σ²) du`.
fn trapezoid(sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 200_000;
    let (a, b) = (-12.0 * sigma, 12.0 * sigma);
    let h = (b - a) / n as f64;
    let dens = |u: f64| (-0.5 * (u / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut s = 0.0;
    for i in 0..=n {
        let u = a + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        s += w * f(u) * dens(u);
    }
    s * h
}

fn intercept_only(sd: f64, p: usize) -> ModelParams {
    ModelParams {
        beta: vec![0.0; p],
        vc: VarianceComponents {
            level2: Some(LevelCovariance::independent(vec!["_cons".into()], &[sd])),
            level3: None,
        },
    }
}

/// Two-level data: `clusters` clusters of `size` rows with covariate x.
fn two_level(clusters: usize, size: usize, beta: [f64; 2], sd: f64, seed: u64) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    let mut x = Vec::new();
    for j in 0..clusters {
        let u = sd * normal.sample(&mut rng);
        for _ in 0..size {
            let xv: f64 = rng.random_range(-2.0..2.0);
            let p = logistic(beta[0] + beta[1] * xv + u);
            y.push(u8::from(rng.random::<f64>() < p));
            ids.push(j);
            x.push(xv);
        }
    }
    ClusteredDataset::from_indexed(y, None, ids, vec![("x".into(), x)]).unwrap()
}

/// Three-level data with a level-3 intercept and a level-2 intercept plus slope on x.
fn three_level(families: usize, subjects: usize, size: usize, seed: u64) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut y, mut l3, mut l2, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for f in 0..families {
        let v = 0.6 * normal.sample(&mut rng);
        for s in 0..subjects {
            let u0 = 0.7 * normal.sample(&mut rng);
            let u1 = 0.4 * normal.sample(&mut rng);
            for _ in 0..size {
                let xv: f64 = rng.random_range(-1.5..1.5);
                let p = logistic(-0.5 + 0.8 * xv + v + u0 + u1 * xv);
                y.push(u8::from(rng.random::<f64>() < p));
                l3.push(f);
                l2.push(f * subjects + s);
                x.push(xv);
            }
        }
    }
    ClusteredDataset::from_indexed(y, Some(l3), l2, vec![("x".into(), x)]).unwrap()
}

fn three_level_spec() -> ModelSpec {
    ModelSpec::new(["x"])
        .level2(LevelEffects::intercept().with_slope("x"))
        .level3(LevelEffects::intercept())
}

fn three_level_params() -> ModelParams {
    ModelParams {
        beta: vec![-0.4, 0.7],
        vc: VarianceComponents {
            level2: Some(LevelCovariance::independent(
                vec!["_cons".into(), "x".into()],
                &[0.8, 0.3],
            )),
            level3: Some(LevelCovariance::independent(vec!["_cons".into()], &[0.5])),
        },
    }
}

#[test]
fn zero_variance_is_plain_bernoulli() {
    let ds = two_level(6, 5, [0.3, -0.8], 1.0, 1);
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let mut params = intercept_only(0.0, 2);
    params.beta = vec![0.3, -0.8];
    let ll = marginal_loglik(&params, &design, ds.outcomes(), &gh_rule(7).unwrap()).unwrap();
    let x = ds.column("x").unwrap();
    let expect: f64 = ds
        .outcomes()
        .iter()
        .zip(x)
        .map(|(&y, &xv)| {
            let p = logistic(0.3 - 0.8 * xv);
            if y == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    assert!((ll - expect).abs() < 1e-12, "{ll} vs {expect}");
}

#[test]
fn single_success_integrates_to_one_half() {
    // Two clusters are required; the second has y = 0 and contributes log 0.5 too.
    let ds = ClusteredDataset::from_indexed(vec![1, 0], None, vec![0, 1], vec![]).unwrap();
    let spec = ModelSpec::new(Vec::<String>::new()).level2(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let params = intercept_only(1.0, 1);
    for k in [7, 15, 30] {
        let ll = marginal_loglik(&params, &design, ds.outcomes(), &gh_rule(k).unwrap()).unwrap();
        assert!((ll - 2.0 * 0.5f64.ln()).abs() < 1e-6, "k={k}: {ll}");
    }
}

#[test]
fn two_observation_cluster_matches_trapezoid() {
    let ds = ClusteredDataset::from_indexed(
        vec![1, 0, 1, 1],
        None,
        vec![0, 0, 1, 1],
        vec![("x".into(), vec![0.4, -1.1, 2.0, 0.3])],
    )
    .unwrap();
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let mut params = intercept_only(0.7, 2);
    params.beta = vec![0.25, -0.6];
    let ll = marginal_loglik(&params, &design, ds.outcomes(), &gh_rule(15).unwrap()).unwrap();
    let eta = |x: f64| 0.25 - 0.6 * x;
    let c1 = trapezoid(0.7, |u| logistic(eta(0.4) + u) * (1.0 - logistic(eta(-1.1) + u)));
    let c2 = trapezoid(0.7, |u| logistic(eta(2.0) + u) * logistic(eta(0.3) + u));
    let expect = c1.ln() + c2.ln();
    assert!((ll - expect).abs() < 1e-6, "{ll} vs {expect}");
}

#[test]
fn three_level_matches_brute_force_nesting() {
    // Family 0 has two subjects, family 1 one subject; random intercepts at both levels.
    let ds = ClusteredDataset::from_indexed(
        vec![1, 0, 1, 0, 0, 1],
        Some(vec![0, 0, 0, 0, 0, 1]),
        vec![0, 0, 1, 1, 1, 2],
        vec![("x".into(), vec![0.5, -0.2, 1.0, 0.0, -1.5, 0.0])],
    )
    .unwrap();
    let spec = ModelSpec::new(["x"])
        .level2(LevelEffects::intercept())
        .level3(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let params = ModelParams {
        beta: vec![0.1, 0.9],
        vc: VarianceComponents {
            level2: Some(LevelCovariance::independent(vec!["_cons".into()], &[0.8])),
            level3: Some(LevelCovariance::independent(vec!["_cons".into()], &[0.6])),
        },
    };
    let ll = marginal_loglik(&params, &design, ds.outcomes(), &gh_rule(20).unwrap()).unwrap();
    let eta = |x: f64| 0.1 + 0.9 * x;
    let bern = |y: u8, e: f64| if y == 1 { logistic(e) } else { 1.0 - logistic(e) };
    let family0 = trapezoid_coarse(0.6, |v| {
        let s1 = trapezoid_coarse(0.8, |u| bern(1, eta(0.5) + v + u) * bern(0, eta(-0.2) + v + u));
        let s2 = trapezoid_coarse(0.8, |u| {
            bern(1, eta(1.0) + v + u) * bern(0, eta(0.0) + v + u) * bern(0, eta(-1.5) + v + u)
        });
        s1 * s2
    });
    let family1 = trapezoid_coarse(0.6, |v| trapezoid_coarse(0.8, |u| bern(1, eta(0.0) + v + u)));
    let expect = family0.ln() + family1.ln();
    assert!((ll - expect).abs() < 1e-6, "{ll} vs {expect}");
}

fn trapezoid_coarse(sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 1200;
    let (a, b) = (-10.0 * sigma, 10.0 * sigma);
    let h = (b - a) / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let u = a + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        s += w * f(u) * (-0.5 * (u / sigma).powi(2)).exp();
    }
    s * h / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn perturb(params: &ModelParams, i: usize, h: f64) -> ModelParams {
    let mut p = params.clone();
    p.beta[i] += h;
    p
}

#[test]
fn beta_score_matches_central_differences() {
    let ds = three_level(4, 3, 4, 7);
    let design = build_design(&ds, &three_level_spec()).unwrap();
    let rule = gh_rule(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let mut params = three_level_params();
        params.beta = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let sc = marginal_score(&params, &design, ds.outcomes(), &rule).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let up = marginal_loglik(&perturb(&params, i, h), &design, ds.outcomes(), &rule).unwrap();
            let dn = marginal_loglik(&perturb(&params, i, -h), &design, ds.outcomes(), &rule).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let rel = (sc.beta[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "beta[{i}]: {} vs {fd}", sc.beta[i]);
        }
    }
}

#[test]
fn factor_score_matches_central_differences() {
    let ds = three_level(4, 3, 4, 8);
    let spec = ModelSpec::new(["x"])
        .level2(LevelEffects::intercept().with_slope("x").unstructured())
        .level3(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let rule = gh_rule(9).unwrap();
    let mut params = three_level_params();
    let l2 = params.vc.level2.as_mut().unwrap();
    l2.structure = crate::design::CovStructure::Unstructured;
    l2.factor[(1, 0)] = 0.2;
    let sc = marginal_score(&params, &design, ds.outcomes(), &rule).unwrap();
    let h = 1e-5;
    let entries = [(2usize, 0usize, 0usize), (2, 1, 0), (2, 1, 1), (3, 0, 0)];
    for (level, i, j) in entries {
        let bump = |d: f64| {
            let mut p = params.clone();
            let lc = if level == 2 {
                p.vc.level2.as_mut()
            } else {
                p.vc.level3.as_mut()
            };
            lc.unwrap().factor[(i, j)] += d;
            marginal_loglik(&p, &design, ds.outcomes(), &rule).unwrap()
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let an = if level == 2 {
            sc.level2_factor[(i, j)]
        } else {
            sc.level3_factor[(i, j)]
        };
        assert!(
            (an - fd).abs() / fd.abs().max(1e-3) < 1e-4,
            "L{level}[{i},{j}]: {an} vs {fd}"
        );
    }
}

/// The adaptive centres and scales move with the parameters; the score must
/// include that dependence even when the quadrature is coarse.
#[test]
fn score_is_exact_with_coarse_rules() {
    let two = ModelSpec::new(["x"]).level2(LevelEffects::intercept().with_slope("x").unstructured());
    let three = ModelSpec::new(["x"])
        .level2(LevelEffects::intercept().with_slope("x").unstructured())
        .level3(LevelEffects::intercept().with_slope("x"));
    for (spec, nodes) in [(two, 2), (three.clone(), 3), (three, 4)] {
        let ds = three_level(3, 3, 6, 21);
        let design = build_design(&ds, &spec).unwrap();
        let rule = gh_rule(nodes).unwrap();
        let mut params = three_level_params();
        let l2 = params.vc.level2.as_mut().unwrap();
        l2.structure = crate::design::CovStructure::Unstructured;
        l2.factor[(1, 0)] = -0.3;
        params.vc.level3 = spec
            .random
            .level3
            .as_ref()
            .map(|_| LevelCovariance::independent(vec!["_cons".into(), "x".into()], &[0.6, 0.35]));
        let sc = marginal_score(&params, &design, ds.outcomes(), &rule).unwrap();
        let ll = |p: &ModelParams| marginal_loglik(p, &design, ds.outcomes(), &rule).unwrap();
        let h = 1e-5;
        let check = |an: f64, bump: &dyn Fn(&mut ModelParams, f64)| {
            let (mut up, mut dn) = (params.clone(), params.clone());
            bump(&mut up, h);
            bump(&mut dn, -h);
            let fd = (ll(&up) - ll(&dn)) / (2.0 * h);
            assert!((an - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{nodes} nodes: {an} vs {fd}");
        };
        for i in 0..2 {
            check(sc.beta[i], &|p, d| p.beta[i] += d);
        }
        for (i, j) in [(0, 0), (1, 0), (1, 1)] {
            check(sc.level2_factor[(i, j)], &|p, d| {
                p.vc.level2.as_mut().unwrap().factor[(i, j)] += d
            });
            if params.vc.level3.is_some() && i == j {
                check(sc.level3_factor[(i, j)], &|p, d| {
                    p.vc.level3.as_mut().unwrap().factor[(i, j)] += d
                });
            }
        }
    }
}

#[test]
fn loglik_is_permutation_invariant() {
    let ds = three_level(3, 3, 4, 11);
    let spec = three_level_spec();
    let design = build_design(&ds, &spec).unwrap();
    let params = three_level_params();
    let rule = gh_rule(7).unwrap();
    let base = marginal_loglik(&params, &design, ds.outcomes(), &rule).unwrap();

    let n = ds.n_rows();
    let mut perm: Vec<usize> = (0..n).rev().collect();
    perm.rotate_left(5);
    let x = ds.column("x").unwrap();
    let shuffled = ClusteredDataset::from_indexed(
        perm.iter().map(|&i| ds.outcomes()[i]).collect(),
        Some(perm.iter().map(|&i| ds.level3_ids()[i]).collect()),
        perm.iter().map(|&i| ds.level2_ids()[i]).collect(),
        vec![("x".into(), perm.iter().map(|&i| x[i]).collect())],
    )
    .unwrap();
    let design2 = build_design(&shuffled, &spec).unwrap();
    let ll = marginal_loglik(&params, &design2, shuffled.outcomes(), &rule).unwrap();
    assert!((ll - base).abs() < 1e-9, "{ll} vs {base}");
}

#[test]
fn mode_matches_grid_search() {
    let ds = ClusteredDataset::from_indexed(
        vec![1, 1, 0, 1, 0],
        None,
        vec![0, 0, 0, 0, 1],
        vec![("x".into(), vec![0.3, -0.5, 1.2, 0.0, 0.0])],
    )
    .unwrap();
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let sigma = 1.3;
    let mut params = intercept_only(sigma, 2);
    params.beta = vec![-0.2, 0.4];
    let modes = eb_modes(&params, &design, ds.outcomes()).unwrap();
    let x = ds.column("x").unwrap();
    let logpost = |u: f64| {
        let mut s = -0.5 * (u / sigma).powi(2);
        for i in 0..4 {
            let p = logistic(-0.2 + 0.4 * x[i] + u);
            s += if ds.outcomes()[i] == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        s
    };
    let steps = 1_200_000;
    let (lo, hi) = (-6.0 * sigma, 6.0 * sigma);
    let best = (0..=steps)
        .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
        .max_by(|a, b| logpost(*a).total_cmp(&logpost(*b)))
        .unwrap();
    assert!(
        (modes.level2[0][0] - best).abs() < 1e-4,
        "{} vs {best}",
        modes.level2[0][0]
    );
}

#[test]
fn degenerate_and_symmetric_modes_are_zero() {
    let ds = two_level(5, 6, [0.0, 0.5], 1.0, 3);
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept());
    let design = build_design(&ds, &spec).unwrap();
    let mut params = intercept_only(0.0, 2);
    params.beta = vec![0.1, 0.5];
    let modes = eb_modes(&params, &design, ds.outcomes()).unwrap();
    assert!(modes.level2.iter().all(|m| m[0] == 0.0));

    let sym = ClusteredDataset::from_indexed(vec![1, 0, 1, 0, 1, 1], None, vec![0, 0, 0, 0, 1, 1], vec![]).unwrap();
    let spec = ModelSpec::new(Vec::<String>::new()).level2(LevelEffects::intercept());
    let design = build_design(&sym, &spec).unwrap();
    let modes = eb_modes(&intercept_only(1.0, 1), &design, sym.outcomes()).unwrap();
    assert!(modes.level2[0][0].abs() < 1e-10);
}

fn fitted(beta: Vec<f64>, eb2: Vec<Vec<f64>>) -> FittedModel {
    FittedModel {
        fixed_names: vec![],
        beta: beta.clone(),
        vc: VarianceComponents::default(),
        loglik: 0.0,
        fixed_cov: None,
        param_cov: None,
        eb: EbModes {
            level2: eb2.into_iter().map(DVector::from_vec).collect(),
            level3: vec![],
        },
        converged: true,
        iterations: 0,
        loglik_trace: vec![],
        nodes: 7,
        theta: beta,
    }
}

#[test]
fn conditional_predictions() {
    let ds = ClusteredDataset::from_indexed(
        vec![1, 0, 1],
        None,
        vec![0, 1, 1],
        vec![("x1".into(), vec![0.0, 0.0, 0.0]), ("x2".into(), vec![0.0, 0.0, 1.0])],
    )
    .unwrap();
    let spec = ModelSpec::new(["x1", "x2"]).level2(LevelEffects::intercept().with_slope("x2"));

    let zero = fitted(vec![0.0; 3], vec![vec![0.0, 0.0]; 2]);
    let p = predict_conditional(&zero, &ds, &spec).unwrap();
    assert!(p.iter().all(|&v| v == 0.5));

    let fm = fitted(vec![-1.0, 0.5, 0.3], vec![vec![0.0, 0.0], vec![0.1, 0.2]]);
    let p = predict_conditional(&fm, &ds, &spec).unwrap();
    assert!((p[0] - 0.26894).abs() < 5e-6);
    assert!((p[2] - 0.40131).abs() < 5e-6);
}

#[test]
fn node_refinement_shrinks_changes() {
    let ds = two_level(30, 8, [-0.5, 0.7], 1.5, 21);
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept().with_slope("x"));
    let ll: Vec<f64> = [5, 9, 15]
        .iter()
        .map(|&k| {
            let opts = FitOptions {
                nodes: k,
                covariance: false,
                ..FitOptions::default()
            };
            fit(&ds, &spec, &opts).unwrap().loglik
        })
        .collect();
    assert!((ll[2] - ll[1]).abs() < (ll[1] - ll[0]).abs(), "{ll:?}");
}

#[test]
fn fit_reports_valid_covariance_and_monotone_trace() {
    let ds = three_level(10, 5, 6, 5);
    let fm = fit(&ds, &three_level_spec(), &FitOptions::default())
        .map_err(|e| format!("{e:?}"))
        .unwrap();
    assert!(fm.converged && fm.loglik.is_finite());
    assert!(fm.loglik_trace.windows(2).all(|w| w[1] >= w[0]));
    let c = fm.fixed_cov.as_ref().unwrap();
    for i in 0..c.nrows() {
        assert!(c[(i, i)] > 0.0);
        for j in 0..c.ncols() {
            assert!((c[(i, j)] - c[(j, i)]).abs() < 1e-8);
        }
    }
    assert_eq!(fm.eb.level2[0].len(), 2);
    assert_eq!(fm.eb.level3[0].len(), 1);
    let lc = fm.vc.level2.as_ref().unwrap();
    assert_eq!(lc.correlations()[(0, 1)], 0.0);
}

#[test]
fn symmetric_data_gives_zero_intercept() {
    // Each row (x1, x2, y) is paired with (-x1, x2, 1 - y) in the same cluster.
    let base = two_level(20, 5, [0.0, 1.0], 1.0, 17);
    let x = base.column("x").unwrap();
    let (mut y, mut ids, mut x1, mut x2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..base.n_rows() {
        let k = base.level2_ids()[i];
        let z = (i % 2) as f64;
        y.extend([base.outcomes()[i], 1 - base.outcomes()[i]]);
        ids.extend([k, k]);
        x1.extend([x[i], -x[i]]);
        x2.extend([z, z]);
    }
    let ds = ClusteredDataset::from_indexed(y, None, ids, vec![("x1".into(), x1), ("x2".into(), x2)]).unwrap();
    let spec = ModelSpec::new(["x1", "x2"]).level2(LevelEffects::intercept());
    let fm = fit(&ds, &spec, &FitOptions::default()).unwrap();
    assert!(fm.beta[0].abs() < 1e-4, "{:?}", fm.beta);
    assert!(fm.beta[2].abs() < 1e-4, "{:?}", fm.beta);
}

#[test]
fn no_random_effects_is_logistic_regression() {
    let ds = two_level(10, 10, [0.4, -1.2], 0.0, 2);
    let fm = fit(&ds, &ModelSpec::new(["x"]), &FitOptions::default()).unwrap();
    assert!((fm.beta[0] - 0.4).abs() < 0.5 && (fm.beta[1] + 1.2).abs() < 0.5);
    assert!(fm.vc.level2.is_none() && fm.vc.level3.is_none());
}

#[test]
fn rejects_bad_node_count_and_dimensions() {
    let ds = two_level(3, 3, [0.0, 0.0], 0.0, 1);
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept());
    let opts = FitOptions {
        nodes: 0,
        ..FitOptions::default()
    };
    assert!(matches!(fit(&ds, &spec, &opts), Err(FitError::BadNodeCount(0))));
    let design = build_design(&ds, &spec).unwrap();
    let bad = intercept_only(1.0, 3);
    assert!(matches!(
        marginal_loglik(&bad, &design, ds.outcomes(), &gh_rule(5).unwrap()),
        Err(FitError::DimensionMismatch)
    ));
}

#[test]
fn separation_is_reported() {
    let n = 40;
    let x: Vec<f64> = (0..n).map(|i| i as f64 - 19.5).collect();
    let y: Vec<u8> = x.iter().map(|&v| u8::from(v > 0.0)).collect();
    let ids: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let ds = ClusteredDataset::from_indexed(y, None, ids, vec![("x".into(), x)]).unwrap();
    let spec = ModelSpec::new(["x"]).level2(LevelEffects::intercept());
    assert!(matches!(
        fit(&ds, &spec, &FitOptions::default()),
        Err(FitError::SeparationDetected { .. })
    ));
}

#[test]
fn random_sd_delta_method() {
    // Unstructured 2x2 level-2 factor [[a, 0], [c, d]] after an intercept
    // level-3 factor [[s]]; theta = [β | ln a, c, ln d | ln s].
    let (a, c, d, s) = (0.8, 0.3, 0.4, 1.5);
    let mut m = fitted(vec![0.1], vec![]);
    m.vc.level2 = Some(LevelCovariance {
        names: vec!["_cons".into(), "x".into()],
        structure: crate::design::CovStructure::Unstructured,
        factor: DMatrix::from_row_slice(2, 2, &[a, 0.0, c, d]),
    });
    m.vc.level3 = Some(LevelCovariance::independent(vec!["_cons".into()], &[s]));
    let theta = [0.1, f64::ln(a), c, f64::ln(d), f64::ln(s)];
    let cov = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.01 * (i + 1) as f64 } else { 0.001 });
    m.param_cov = Some(cov.clone());

    // Numerical Jacobian of the log standard deviations.
    let log_sds = |t: &[f64]| {
        let (a, c, d) = (t[1].exp(), t[2], t[3].exp());
        [t[4], a.ln(), (c * c + d * d).sqrt().ln()]
    };
    let h = 1e-6;
    let mut jac = DMatrix::zeros(3, 5);
    for k in 0..5 {
        let mut up = theta;
        let mut dn = theta;
        up[k] += h;
        dn[k] -= h;
        let (fu, fd) = (log_sds(&up), log_sds(&dn));
        for r in 0..3 {
            jac[(r, k)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    let expected = &jac * cov * jac.transpose();

    let sds = m.random_sds();
    assert_eq!(sds.len(), 3);
    assert_eq!((sds[0].level, sds[1].level), (Level::Level3, Level::Level2));
    assert_eq!(sds[2].name, "x");
    let want_sd = [s, a, (c * c + d * d).sqrt()];
    for (r, sd) in sds.iter().enumerate() {
        assert!((sd.sd - want_sd[r]).abs() < 1e-12);
        assert!((sd.log_se.unwrap() - expected[(r, r)].sqrt()).abs() < 1e-8, "{r}");
        assert!(!sd.at_boundary);
    }

    m.param_cov = None;
    assert!(m.random_sds().iter().all(|s| s.log_se.is_none()));
}

#[test]
fn random_correlation_delta_method() {
    // Factor [[a, 0], [c, d]]: r = c / sqrt(c² + d²), independent of a.
    let (a, c, d) = (0.8, -0.3, 0.4);
    let mut m = fitted(vec![0.1], vec![]);
    m.vc.level2 = Some(LevelCovariance {
        names: vec!["_cons".into(), "x".into()],
        structure: crate::design::CovStructure::Unstructured,
        factor: DMatrix::from_row_slice(2, 2, &[a, 0.0, c, d]),
    });
    let cov = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.02 * (i + 1) as f64 } else { 0.003 });
    m.param_cov = Some(cov.clone());
    let r2 = c * c + d * d;
    // Gradient with respect to (β, ln a, c, ln d).
    let g = [0.0, 0.0, d * d / r2.powf(1.5), -c * d * d / r2.powf(1.5)];
    let var: f64 = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| g[i] * g[j] * cov[(i, j)])
        .sum();

    let rc = m.random_correlations();
    assert_eq!(rc.len(), 1);
    assert_eq!(rc[0].names, ("_cons".to_string(), "x".to_string()));
    assert!((rc[0].corr - c / r2.sqrt()).abs() < 1e-12);
    assert!((rc[0].se.unwrap() - var.sqrt()).abs() < 1e-7);

    m.vc.level2.as_mut().unwrap().structure = crate::design::CovStructure::Independent;
    assert!(m.random_correlations().is_empty());
}
