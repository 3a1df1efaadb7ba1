//! Grouping-based Wald goodness-of-fit test.
//!
//! The baseline model is fitted, rows are ranked by their conditional
//! predicted probability within each level-2 cluster and cut into `G`
//! near-equal groups, pooled indicators for groups `2..G` are appended as
//! fixed effects, and the augmented model is refitted. Under a well-fitting
//! model the indicator coefficients are jointly zero, which a Wald test with
//! `G − 1` degrees of freedom assesses.

mod grouping;
mod wald;

use std::fmt;

use nalgebra::DMatrix;

use crate::data::{ClusteredDataset, Level};
use crate::design::ModelSpec;
use crate::error::{FitError, GofError};
use crate::estimator::{fit, predict_conditional, FitOptions, FittedModel};

pub use grouping::{assign_groups, build_indicators, select_group_count, GroupAssignment, GroupRule, INDICATOR_PREFIX};
pub use wald::{chi2_survival, wald_statistic};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GofOptions {
    pub rule: GroupRule,
    pub fit: FitOptions,
}

/// Why a test produced no p-value.
#[derive(Debug, Clone, PartialEq)]
pub enum FailureReason {
    TooFewObservations {
        n_min: usize,
    },
    BadGroupCount(usize),
    /// A pooled indicator column is identically zero.
    DegenerateIndicator {
        group: usize,
    },
    BaselineFit(FitError),
    AugmentedFit(FitError),
    SingularCovariance,
}

impl FailureReason {
    /// Failures caused by the choice of `G` rather than by estimation.
    pub fn is_grouping(&self) -> bool {
        matches!(
            self,
            FailureReason::TooFewObservations { .. }
                | FailureReason::BadGroupCount(_)
                | FailureReason::DegenerateIndicator { .. }
        )
    }

    fn from_gof(e: GofError) -> Self {
        match e {
            GofError::TooFewObservations { n_min } => FailureReason::TooFewObservations { n_min },
            GofError::BadGroupCount(g) => FailureReason::BadGroupCount(g),
            GofError::SingularCovariance | GofError::DimensionMismatch { .. } => FailureReason::SingularCovariance,
        }
    }

    /// Short machine-readable tag.
    pub fn tag(&self) -> String {
        match self {
            FailureReason::TooFewObservations { .. } => "too_few_observations".into(),
            FailureReason::BadGroupCount(_) => "bad_group_count".into(),
            FailureReason::DegenerateIndicator { group } => format!("degenerate_indicator_I{group}"),
            FailureReason::BaselineFit(e) => format!("baseline_fit:{}", fit_tag(e)),
            FailureReason::AugmentedFit(e) => format!("augmented_fit:{}", fit_tag(e)),
            FailureReason::SingularCovariance => "singular_covariance".into(),
        }
    }
}

fn fit_tag(e: &FitError) -> &'static str {
    match e {
        FitError::BadNodeCount(_) => "bad_node_count",
        FitError::NonFiniteLikelihood => "non_finite_likelihood",
        FitError::SeparationDetected { .. } => "separation",
        FitError::SingularInformation => "singular_information",
        FitError::NoConvergence(_) => "no_convergence",
        FitError::ModeSearchFailure => "mode_search_failure",
        FitError::DimensionMismatch => "dimension_mismatch",
        FitError::Data(_) => "data",
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::TooFewObservations { n_min } => {
                write!(f, "smallest level-2 cluster has {n_min} rows; at least 2 are needed")
            }
            FailureReason::BadGroupCount(g) => write!(f, "group count must be at least 2, got {g}"),
            FailureReason::DegenerateIndicator { group } => {
                write!(f, "indicator for group {group} is zero in every row (empty cells)")
            }
            FailureReason::BaselineFit(e) => write!(f, "baseline fit failed: {e}"),
            FailureReason::AugmentedFit(e) => write!(f, "augmented fit failed: {e}"),
            FailureReason::SingularCovariance => write!(f, "covariance of the indicator coefficients is singular"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GofStatus {
    Ok,
    Failed(FailureReason),
}

impl fmt::Display for GofStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GofStatus::Ok => write!(f, "ok"),
            GofStatus::Failed(r) => write!(f, "failed({})", r.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GofResult {
    /// `None` when the test failed before a group count was chosen.
    pub g_used: Option<usize>,
    pub rule: GroupRule,
    pub w: Option<f64>,
    pub df: Option<usize>,
    pub p_value: Option<f64>,
    pub status: GofStatus,
    pub gamma_hat: Vec<f64>,
    pub gamma_cov: Option<DMatrix<f64>>,
    pub baseline_loglik: Option<f64>,
    pub augmented_loglik: Option<f64>,
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, ToString::to_string)
}

impl GofResult {
    pub const CSV_HEADER: &'static str = "G_used,rule,W,df,p_value,status,baseline_loglik,augmented_loglik";

    fn failed(rule: GroupRule, g_used: Option<usize>, reason: FailureReason) -> Self {
        Self {
            g_used,
            rule,
            w: None,
            df: None,
            p_value: None,
            status: GofStatus::Failed(reason),
            gamma_hat: Vec::new(),
            gamma_cov: None,
            baseline_loglik: None,
            augmented_loglik: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == GofStatus::Ok
    }

    pub fn failure(&self) -> Option<&FailureReason> {
        match &self.status {
            GofStatus::Ok => None,
            GofStatus::Failed(r) => Some(r),
        }
    }

    /// One CSV record matching [`Self::CSV_HEADER`]; missing values are empty.
    pub fn csv_record(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{},{},{}",
            opt(&self.g_used),
            self.rule,
            num(self.w),
            opt(&self.df),
            num(self.p_value),
            self.status,
            num(self.baseline_loglik),
            num(self.augmented_loglik),
        )
    }
}

/// Runs the full test. Estimation problems and degenerate groupings are
/// reported through [`GofStatus::Failed`] rather than as errors.
pub fn run_test(ds: &ClusteredDataset, spec: &ModelSpec, opts: &GofOptions) -> GofResult {
    let rule = opts.rule;
    let baseline_opts = FitOptions {
        covariance: false,
        ..opts.fit.clone()
    };
    let baseline = match fit(ds, spec, &baseline_opts) {
        Ok(m) => m,
        Err(e) => return GofResult::failed(rule, None, FailureReason::BaselineFit(e)),
    };
    let with_baseline = |mut r: GofResult| {
        r.baseline_loglik = Some(baseline.loglik);
        r
    };

    let g = match select_group_count(&ds.cluster_sizes(Level::Level2), rule) {
        Ok(g) => g,
        Err(e) => return with_baseline(GofResult::failed(rule, None, FailureReason::from_gof(e))),
    };
    let p_hat = match predict_conditional(&baseline, ds, spec) {
        Ok(p) => p,
        Err(e) => return with_baseline(GofResult::failed(rule, Some(g), FailureReason::BaselineFit(e))),
    };
    let ga = assign_groups(&p_hat, ds.level2_ids(), g);
    if rule == GroupRule::DataDriven {
        assert!(!ga.has_empty_cell(), "data-driven grouping left an empty cell");
    }
    let indicators = build_indicators(&ga);
    if let Some(pos) = indicators.iter().position(|(_, c)| c.iter().all(|&v| v == 0.0)) {
        return with_baseline(GofResult::failed(
            rule,
            Some(g),
            FailureReason::DegenerateIndicator { group: pos + 2 },
        ));
    }

    let names: Vec<String> = indicators.iter().map(|(n, _)| n.clone()).collect();
    let augmented = ds.with_columns(indicators).map_err(FitError::from).and_then(|aug_ds| {
        fit(
            &aug_ds,
            &spec.with_extra(names),
            &augmented_options(&opts.fit, &baseline),
        )
    });
    let augmented = match augmented {
        Ok(m) => m,
        Err(e) => return with_baseline(GofResult::failed(rule, Some(g), FailureReason::AugmentedFit(e))),
    };

    let p0 = baseline.beta.len();
    let q = g - 1;
    let gamma_hat = augmented.beta[p0..].to_vec();
    let cov = augmented.fixed_cov.as_ref().expect("covariance requested");
    let gamma_cov = cov.view((p0, p0), (q, q)).into_owned();
    let mut result = GofResult {
        g_used: Some(g),
        rule,
        w: None,
        df: None,
        p_value: None,
        status: GofStatus::Ok,
        gamma_hat,
        gamma_cov: Some(gamma_cov),
        baseline_loglik: Some(baseline.loglik),
        augmented_loglik: Some(augmented.loglik),
    };
    match wald_statistic(&result.gamma_hat, result.gamma_cov.as_ref().unwrap()) {
        Ok((w, df)) => {
            result.w = Some(w);
            result.df = Some(df);
            result.p_value = Some(chi2_survival(w, df));
        }
        Err(e) => result.status = GofStatus::Failed(FailureReason::from_gof(e)),
    }
    result
}

fn augmented_options(base: &FitOptions, baseline: &FittedModel) -> FitOptions {
    FitOptions {
        covariance: true,
        start: Some(baseline.params()),
        ..base.clone()
    }
}
