use crate::design::{LevelEffects, ModelSpec};
use crate::error::SimError;
use crate::gof::GroupRule;

use super::dgp::icc_to_variance;

/// Fixed effects `(β0, β1, β2)` of the data-generating model.
pub const TRUE_BETA: [f64; 3] = [-1.0, 0.5, 0.3];
/// Default standard deviation of the subject-level random slope on x2.
pub const DEFAULT_SLOPE_SD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    /// `j` families of `k` subjects with `n` observations each.
    Nested { j: usize, k: usize, n: usize },
    /// Two-level data: one subject per entry with that many observations.
    Sizes(Vec<usize>),
}

impl Design {
    pub fn n_rows(&self) -> usize {
        match self {
            Design::Nested { j, k, n } => j * k * n,
            Design::Sizes(s) => s.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Misspec {
    #[default]
    None,
    /// Adds `β3·x1²` to the true linear predictor.
    Quadratic(f64),
    /// Adds `β3·x1·x2`.
    Interaction(f64),
    /// Family intercept with this standard deviation; the fitted model
    /// ignores the family level.
    OmittedLevel(f64),
}

impl Misspec {
    pub fn name(&self) -> &'static str {
        match self {
            Misspec::None => "none",
            Misspec::Quadratic(_) => "quadratic",
            Misspec::Interaction(_) => "interaction",
            Misspec::OmittedLevel(_) => "omitted_level",
        }
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            Misspec::None => None,
            Misspec::Quadratic(b) | Misspec::Interaction(b) | Misspec::OmittedLevel(b) => Some(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FittedLevels {
    Two,
    Three,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub part: u8,
    pub design: Design,
    pub icc: f64,
    pub beta: [f64; 3],
    pub slope_sd: f64,
    /// Family intercept variance; half the ICC-implied variance by default.
    pub family_var: f64,
    /// Subject intercept variance.
    pub subject_var: f64,
    pub misspec: Misspec,
    pub gof_rule: GroupRule,
    pub fitted_levels: FittedLevels,
}

impl Scenario {
    /// Three-level scenario with the ICC-implied variance split evenly
    /// between the family and subject intercepts.
    pub fn nested(id: impl Into<String>, part: u8, j: usize, k: usize, n: usize, icc: f64) -> Result<Self, SimError> {
        let var = icc_to_variance(icc)?;
        Ok(Self {
            id: id.into(),
            part,
            design: Design::Nested { j, k, n },
            icc,
            beta: TRUE_BETA,
            slope_sd: DEFAULT_SLOPE_SD,
            family_var: var / 2.0,
            subject_var: var / 2.0,
            misspec: Misspec::None,
            gof_rule: GroupRule::DataDriven,
            fitted_levels: FittedLevels::Three,
        })
    }

    /// Two-level scenario with the whole ICC-implied variance on the
    /// subject intercept.
    pub fn two_level(id: impl Into<String>, part: u8, sizes: Vec<usize>, icc: f64) -> Result<Self, SimError> {
        let var = icc_to_variance(icc)?;
        Ok(Self {
            id: id.into(),
            part,
            design: Design::Sizes(sizes),
            icc,
            beta: TRUE_BETA,
            slope_sd: DEFAULT_SLOPE_SD,
            family_var: 0.0,
            subject_var: var,
            misspec: Misspec::None,
            gof_rule: GroupRule::DataDriven,
            fitted_levels: FittedLevels::Two,
        })
    }

    pub fn with_misspec(mut self, m: Misspec) -> Self {
        self.misspec = m;
        if let Misspec::OmittedLevel(sd) = m {
            self.family_var = sd * sd;
            self.fitted_levels = FittedLevels::Two;
        }
        self
    }

    pub fn with_rule(mut self, rule: GroupRule) -> Self {
        self.gof_rule = rule;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        icc_to_variance(self.icc)?;
        let counts_ok = match &self.design {
            Design::Nested { j, k, n } => *j >= 1 && *k >= 1 && *n >= 1,
            Design::Sizes(s) => !s.is_empty() && s.iter().all(|&n| n >= 1),
        };
        if !counts_ok {
            return Err(SimError::BadScenario(format!(
                "{}: cluster counts must be at least 1",
                self.id
            )));
        }
        if matches!(self.misspec, Misspec::OmittedLevel(_)) && self.fitted_levels != FittedLevels::Two {
            return Err(SimError::BadScenario(format!(
                "{}: an omitted level requires a two-level fit",
                self.id
            )));
        }
        if self.family_var < 0.0 || self.subject_var < 0.0 || self.slope_sd < 0.0 {
            return Err(SimError::BadScenario(format!("{}: negative variance", self.id)));
        }
        Ok(())
    }

    /// The model fitted to each replication: fixed x1 and x2, a subject
    /// intercept and slope on x2, and a family intercept for three-level fits.
    pub fn fitted_spec(&self) -> ModelSpec {
        let spec = ModelSpec::new(["x1", "x2"]).level2(LevelEffects::intercept().with_slope("x2"));
        match (self.fitted_levels, &self.design) {
            (FittedLevels::Three, Design::Nested { .. }) => spec.level3(LevelEffects::intercept()),
            _ => spec,
        }
    }
}

fn nested(id: String, part: u8, j: usize, k: usize, n: usize, icc: f64) -> Scenario {
    Scenario::nested(id, part, j, k, n, icc).expect("catalog ICC values are valid")
}

fn part3_sizes(balanced: bool, n_small: usize) -> Vec<usize> {
    if balanced {
        vec![n_small; 50]
    } else {
        let mut v = vec![n_small; 10];
        v.extend(std::iter::repeat_n(20, 40));
        v
    }
}

/// All scenarios: 24 null designs, 10 misspecified designs, and the
/// group-count sensitivity grid under both rules.
pub fn scenario_catalog() -> Vec<Scenario> {
    let mut out = Vec::new();
    for icc in [0.10, 0.30] {
        for j in [15, 30, 50] {
            for k in [5, 10] {
                for n in [10, 20] {
                    out.push(nested(format!("p1-J{j}-K{k}-n{n}-icc{icc:.2}"), 1, j, k, n, icc));
                }
            }
        }
    }
    let p2 = |tag: &str, v: f64, m: Misspec| nested(format!("p2-{tag}-{v}"), 2, 30, 5, 20, 0.20).with_misspec(m);
    for b in [0.02, 0.05, 0.10, 0.15] {
        out.push(p2("quad", b, Misspec::Quadratic(b)));
    }
    for b in [0.3, 0.6, 0.9] {
        out.push(p2("inter", b, Misspec::Interaction(b)));
    }
    for s in [0.5, 1.0, 1.5] {
        out.push(p2("omit", s, Misspec::OmittedLevel(s)));
    }
    for balanced in [false, true] {
        for n_small in [3, 5, 6, 8, 10] {
            let tag = if balanced { "bal" } else { "unbal" };
            for (rule, rtag) in [(GroupRule::DataDriven, "auto"), (GroupRule::Forced(10), "g10")] {
                let id = format!("p3-{tag}-n{n_small}-{rtag}");
                let sc = Scenario::two_level(id, 3, part3_sizes(balanced, n_small), 0.20).expect("valid ICC");
                out.push(sc.with_rule(rule));
            }
        }
    }
    out
}
