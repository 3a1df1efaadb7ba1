//! Mixed-effects logistic regression with random intercepts and slopes,
//! fitted by maximum likelihood with adaptive Gauss–Hermite quadrature, and a
//! grouping-based Wald goodness-of-fit test with a data-driven group count.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: clustered binary datasets, validation and CSV ingestion.
//! - [`design`]: model specifications and design-matrix construction.
//! - [`estimator`]: quadrature rules, the marginal likelihood, the
//!   quasi-Newton fit, empirical Bayes modes and conditional predictions.
//! - [`gof`]: group selection, within-cluster ranking, indicator pooling,
//!   the Wald statistic and the chi-squared tail.
//! - [`simlab`]: the data-generating process, the scenario catalog and the
//!   Monte Carlo runner.

#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod design;
pub mod error;
pub mod estimator;
pub mod gof;
mod linalg;
pub mod simlab;

pub use data::{ClusterSizes, ClusteredDataset, CsvLayout, Level, RawRow, RawTable};
pub use design::{CovStructure, DesignMatrices, LevelEffects, ModelSpec, RandomEffectsSpec};
pub use error::{DataError, FitError, GofError, SimError};
pub use estimator::{
    fit, gh_rule, marginal_loglik, predict_conditional, FitOptions, FittedModel, ModelParams, QuadratureRule,
    RandomCorr, RandomSd, VarianceComponents,
};

pub use gof::{run_test, GofOptions, GofResult, GofStatus, GroupRule};
pub use simlab::{run_scenario, scenario_catalog, Scenario, ScenarioSummary};
