//! Monte Carlo studies of the goodness-of-fit test: the data-generating
//! process, the scenario catalog and a reproducible replication runner.

mod catalog;
mod dgp;
mod runner;

pub use catalog::{scenario_catalog, Design, FittedLevels, Misspec, Scenario, DEFAULT_SLOPE_SD, TRUE_BETA};
pub use dgp::{generate_dataset, icc_to_variance};
pub use runner::{monte_carlo_bounds, rep_seed, run_scenario, RepOutcome, RunOptions, ScenarioSummary};
