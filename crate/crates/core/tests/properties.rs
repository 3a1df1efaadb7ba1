use nalgebra::DMatrix;
use proptest::prelude::*;

use mlmgof::data::SYNTHETIC_LEVEL3;
use mlmgof::design::build_design;
use mlmgof::estimator::LevelCovariance;
use mlmgof::gof::{chi2_survival, select_group_count, wald_statistic};
use mlmgof::{
    gh_rule, marginal_loglik, ClusteredDataset, CovStructure, DataError, GroupRule, Level, LevelEffects, ModelParams,
    ModelSpec, RawRow, RawTable, VarianceComponents,
};

/// Three-level rows: (family, subject, x, y).
fn nested_rows() -> impl Strategy<Value = Vec<(usize, usize, f64, u8)>> {
    prop::collection::vec(prop::collection::vec(1usize..6, 1..4), 2..5).prop_flat_map(|fams| {
        let ids: Vec<(usize, usize)> = fams
            .iter()
            .enumerate()
            .flat_map(|(f, subs)| {
                let base = f * 10;
                subs.iter()
                    .enumerate()
                    .flat_map(move |(s, &n)| std::iter::repeat_n((f, base + s), n))
            })
            .collect();
        let n = ids.len();
        (
            Just(ids),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_map(|(ids, x, y)| {
                ids.into_iter()
                    .zip(x)
                    .zip(y)
                    .map(|(((f, s), x), y)| (f, s, x, y))
                    .collect()
            })
    })
}

fn dataset(rows: &[(usize, usize, f64, u8)]) -> ClusteredDataset {
    ClusteredDataset::from_indexed(
        rows.iter().map(|r| r.3).collect(),
        Some(rows.iter().map(|r| r.0).collect()),
        rows.iter().map(|r| r.1).collect(),
        vec![("x".into(), rows.iter().map(|r| r.2).collect())],
    )
    .unwrap()
}

fn loglik(ds: &ClusteredDataset, sds: (f64, f64, f64)) -> f64 {
    let spec = ModelSpec::new(["x"])
        .level2(LevelEffects::intercept().with_slope("x"))
        .level3(LevelEffects::intercept());
    let design = build_design(ds, &spec).unwrap();
    let params = ModelParams {
        beta: vec![-0.3, 0.7],
        vc: VarianceComponents {
            level2: Some(LevelCovariance::independent(
                vec!["(Intercept)".into(), "x".into()],
                &[sds.0, sds.1],
            )),
            level3: Some(LevelCovariance::independent(vec!["(Intercept)".into()], &[sds.2])),
        },
    };
    marginal_loglik(&params, &design, ds.outcomes(), &gh_rule(4).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gh_rule_is_a_symmetric_probability_rule(k in 1usize..=50) {
        let r = gh_rule(k).unwrap();
        prop_assert_eq!(r.len(), k);
        prop_assert!(r.weights.iter().all(|&w| w > 0.0));
        prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
        for i in 0..k {
            prop_assert_eq!(r.nodes[i], -r.nodes[k - 1 - i]);
            prop_assert_eq!(r.weights[i], r.weights[k - 1 - i]);
        }
        if k >= 2 {
            prop_assert!((r.integrate(|x| x * x) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn chi2_tail_is_a_decreasing_probability(x in 0.0f64..200.0, dx in 0.0f64..20.0, df in 1usize..40) {
        let a = chi2_survival(x, df);
        let b = chi2_survival(x + dx, df);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a + 1e-15);
    }

    #[test]
    fn chi2_tail_grows_with_df(x in 0.1f64..100.0, df in 1usize..40) {
        prop_assert!(chi2_survival(x, df) <= chi2_survival(x, df + 1) + 1e-15);
    }

    #[test]
    fn wald_is_nonnegative_and_quadratic(
        g in prop::collection::vec(-3.0f64..3.0, 1..8),
        seed in prop::collection::vec(-1.0f64..1.0, 64),
        c in 0.1f64..10.0,
    ) {
        let q = g.len();
        let a = DMatrix::from_fn(q, q, |i, j| seed[i * 8 + j]);
        let v = &a * a.transpose() + DMatrix::identity(q, q) * 0.5;
        let (w, df) = wald_statistic(&g, &v).unwrap();
        prop_assert_eq!(df, q);
        prop_assert!(w >= 0.0);
        let scaled: Vec<f64> = g.iter().map(|x| c * x).collect();
        let (ws, _) = wald_statistic(&scaled, &v).unwrap();
        prop_assert!((ws - c * c * w).abs() <= 1e-9 * (1.0 + ws));
    }

    #[test]
    fn correlations_are_bounded(entries in prop::collection::vec(-2.0f64..2.0, 10), q in 1usize..=4) {
        let factor = DMatrix::from_fn(q, q, |i, j| if j <= i { entries[i * (i + 1) / 2 + j] } else { 0.0 });
        let cov = LevelCovariance { names: vec![String::new(); q], structure: CovStructure::Unstructured, factor };
        let r = cov.correlations();
        for i in 0..q {
            prop_assert_eq!(r[(i, i)], 1.0);
            for j in 0..q {
                prop_assert!((-1.0..=1.0).contains(&r[(i, j)]));
                prop_assert_eq!(r[(i, j)], r[(j, i)]);
            }
        }
    }

    #[test]
    fn independent_effects_are_uncorrelated(sds in prop::collection::vec(0.0f64..3.0, 1..=4)) {
        let cov = LevelCovariance::independent(vec![String::new(); sds.len()], &sds);
        let r = cov.correlations();
        for i in 0..sds.len() {
            for j in 0..sds.len() {
                if i != j {
                    prop_assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
        prop_assert_eq!(cov.std_devs(), sds);
    }

    #[test]
    fn loglik_ignores_row_order(
        rows in nested_rows(),
        keys in prop::collection::vec(any::<u32>(), 60),
        sds in (0.1f64..1.5, 0.1f64..1.0, 0.1f64..1.5),
    ) {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| keys[i % keys.len()].wrapping_mul(i as u32 + 1));
        let shuffled: Vec<_> = order.iter().map(|&i| rows[i]).collect();
        let a = loglik(&dataset(&rows), sds);
        let b = loglik(&dataset(&shuffled), sds);
        prop_assert!(a < 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn data_driven_group_count(rows in nested_rows()) {
        let ds = dataset(&rows);
        let sizes = ds.cluster_sizes(Level::Level2);
        prop_assert_eq!(sizes.total(), rows.len());
        let n_min = sizes.min().unwrap();
        match select_group_count(&sizes, GroupRule::DataDriven) {
            Ok(g) => prop_assert_eq!(g, n_min.min(10)),
            Err(_) => prop_assert!(n_min < 2),
        }
    }

    #[test]
    fn non_binary_outcomes_are_rejected(y in prop::collection::vec(0u8..=1, 4..20), bad in 0usize..20, v in 2.0f64..9.0) {
        let bad = bad % y.len();
        let rows: Vec<RawRow> = y
            .iter()
            .enumerate()
            .map(|(i, &o)| RawRow {
                outcome: if i == bad { v } else { f64::from(o) },
                level3_id: None,
                level2_id: format!("c{}", i % 2),
                covariates: vec![Some(i as f64)],
            })
            .collect();
        let err = ClusteredDataset::validate(RawTable { covariate_names: vec!["x".into()], rows }).unwrap_err();
        let ok = matches!(err, DataError::NonBinaryOutcome { row, .. } if row == bad + 1);
        prop_assert!(ok, "{err}");
    }

    #[test]
    fn two_level_input_gets_one_synthetic_family(y in prop::collection::vec(0u8..=1, 4..30), k in 2usize..5) {
        let rows: Vec<RawRow> = y
            .iter()
            .enumerate()
            .map(|(i, &o)| RawRow {
                outcome: f64::from(o),
                level3_id: None,
                level2_id: format!("c{}", i % k),
                covariates: vec![],
            })
            .collect();
        let ds = ClusteredDataset::validate(RawTable { covariate_names: vec![], rows }).unwrap();
        prop_assert!(!ds.has_level3());
        prop_assert_eq!(ds.n_level3(), 1);
        prop_assert_eq!(ds.level3_labels(), &[SYNTHETIC_LEVEL3.to_string()][..]);
        prop_assert_eq!(ds.n_level2(), k.min(y.len()));
    }
}
