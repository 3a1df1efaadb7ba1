use rayon::prelude::*;

use crate::error::SimError;
use crate::estimator::FitOptions;
use crate::gof::{run_test, GofOptions, GofResult};

use super::catalog::{Design, Scenario};
use super::dgp::generate_dataset;

/// Normal-approximation 95% band for an empirical rejection rate at
/// nominal level `alpha` over `reps` replications, clipped to `[0, 1]`.
pub fn monte_carlo_bounds(alpha: f64, reps: usize) -> (f64, f64) {
    assert!(alpha > 0.0 && alpha < 1.0 && reps >= 1);
    let half = 1.96 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
    ((alpha - half).max(0.0), (alpha + half).min(1.0))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed of replication `rep`, derived from the master seed and scenario id
/// so that every replication can be generated independently.
pub fn rep_seed(master_seed: u64, scenario_id: &str, rep: usize) -> u64 {
    let stream = splitmix64(master_seed ^ fnv1a(scenario_id));
    splitmix64(stream.wrapping_add(rep as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Rejection threshold for the p-value.
    pub alpha: f64,
    pub fit: FitOptions,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            fit: FitOptions {
                nodes: 5,
                ..FitOptions::default()
            },
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub result: GofResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub replications: usize,
    pub rejections: usize,
    pub failures: usize,
    /// Failures caused by the group count (empty cells, too few rows).
    pub grouping_failures: usize,
    /// Failures of the baseline or augmented fit, or a singular covariance.
    pub estimation_failures: usize,
    /// Rejections over valid replications; `None` when none were valid.
    pub rejection_rate: Option<f64>,
    pub failure_rate: f64,
    pub mc_lower: Option<f64>,
    pub mc_upper: Option<f64>,
    pub alpha: f64,
    pub master_seed: u64,
    /// Per-replication results in replication order.
    pub outcomes: Vec<RepOutcome>,
}

impl ScenarioSummary {
    pub const CSV_HEADER: &'static str = "scenario_id,part,J,K,n,icc,misspec,param,rule,reps,rejections,failures,rejection_rate,failure_rate,mc_lower,mc_upper,master_seed";

    pub fn valid(&self) -> usize {
        self.replications - self.failures
    }

    /// One CSV record matching [`Self::CSV_HEADER`]. Two-level designs report
    /// `J = 1`, `K` = number of subjects and `n` = smallest subject size.
    pub fn csv_record(&self) -> String {
        let sc = &self.scenario;
        let (j, k, n) = match &sc.design {
            Design::Nested { j, k, n } => (*j, *k, *n),
            Design::Sizes(s) => (1, s.len(), s.iter().copied().min().unwrap_or(0)),
        };
        let rate = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        format!(
            "{},{},{},{},{},{:.2},{},{},{},{},{},{},{},{:.4},{},{},{}",
            sc.id,
            sc.part,
            j,
            k,
            n,
            sc.icc,
            sc.misspec.name(),
            sc.misspec.param().map_or_else(String::new, |p| p.to_string()),
            sc.gof_rule,
            self.replications,
            self.rejections,
            self.failures,
            rate(self.rejection_rate),
            self.failure_rate,
            rate(self.mc_lower),
            rate(self.mc_upper),
            self.master_seed,
        )
    }
}

fn run_one(sc: &Scenario, rep: usize, master_seed: u64, gof: &GofOptions) -> RepOutcome {
    let seed = rep_seed(master_seed, &sc.id, rep);
    let ds = generate_dataset(sc, seed);
    RepOutcome {
        rep,
        seed,
        result: run_test(&ds, &sc.fitted_spec(), gof),
    }
}

/// Runs `reps` replications of a scenario. Replications run concurrently;
/// the summary depends only on `(sc, reps, master_seed, opts)`.
pub fn run_scenario(
    sc: &Scenario,
    reps: usize,
    master_seed: u64,
    opts: &RunOptions,
) -> Result<ScenarioSummary, SimError> {
    if reps == 0 {
        return Err(SimError::NoReplications);
    }
    sc.validate()?;
    let gof = GofOptions {
        rule: sc.gof_rule,
        fit: opts.fit.clone(),
    };
    let work = || -> Vec<RepOutcome> {
        (0..reps)
            .into_par_iter()
            .map(|r| run_one(sc, r, master_seed, &gof))
            .collect()
    };
    let outcomes = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SimError::BadScenario(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(summarize(sc.clone(), outcomes, master_seed, opts.alpha))
}

fn summarize(scenario: Scenario, outcomes: Vec<RepOutcome>, master_seed: u64, alpha: f64) -> ScenarioSummary {
    let replications = outcomes.len();
    let mut rejections = 0;
    let mut grouping_failures = 0;
    let mut estimation_failures = 0;
    for o in &outcomes {
        match (o.result.p_value, o.result.failure()) {
            (_, Some(r)) if r.is_grouping() => grouping_failures += 1,
            (_, Some(_)) => estimation_failures += 1,
            (Some(p), None) if p < alpha => rejections += 1,
            _ => {}
        }
    }
    let failures = grouping_failures + estimation_failures;
    let valid = replications - failures;
    let (mc_lower, mc_upper) = if valid > 0 {
        let (lo, hi) = monte_carlo_bounds(alpha, valid);
        (Some(lo), Some(hi))
    } else {
        (None, None)
    };
    ScenarioSummary {
        scenario,
        replications,
        rejections,
        failures,
        grouping_failures,
        estimation_failures,
        rejection_rate: (valid > 0).then(|| rejections as f64 / valid as f64),
        failure_rate: failures as f64 / replications as f64,
        mc_lower,
        mc_upper,
        alpha,
        master_seed,
        outcomes,
    }
}
