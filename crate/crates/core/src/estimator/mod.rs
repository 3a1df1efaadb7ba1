//! Maximum-likelihood estimation of mixed-effects logistic models.

mod likelihood;
mod optimize;
mod params;
mod quadrature;

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusteredDataset, Level};
use crate::design::{build_design, CovStructure, DesignMatrices, ModelSpec};
use crate::error::FitError;
use crate::linalg::Vector;

use likelihood::{Problem, Rules};
use optimize::{maximize, BfgsOptions};
use params::{factor_entries, ParamLayout};
use quadrature::TensorRule;

pub use params::{LevelCovariance, ModelParams, VarianceComponents, LOG_SD_FLOOR};
pub use quadrature::{gh_rule, QuadratureRule};

/// Fixed effects larger than this in absolute value signal separation.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Step of the central differences of the score used for the Hessian.
const HESSIAN_STEP: f64 = 1e-4;
const DELTA_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Quadrature nodes per random-effect dimension.
    pub nodes: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change for convergence; the projected
    /// gradient must also be small (see the optimizer's stopping rule).
    pub tol: f64,
    /// Compute the observed-information covariance.
    pub covariance: bool,
    /// Warm start. A shorter `beta` is padded with zeros.
    pub start: Option<ModelParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nodes: 7,
            max_iter: 300,
            tol: 1e-7,
            covariance: true,
            start: None,
        }
    }
}

/// Empirical Bayes (posterior mode) predictions of the random effects on
/// their natural scale, indexed by dense cluster id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EbModes {
    pub level2: Vec<DVector<f64>>,
    pub level3: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub fixed_names: Vec<String>,
    pub beta: Vec<f64>,
    pub vc: VarianceComponents,
    pub loglik: f64,
    /// Covariance of `beta`: the fixed-effect block of the inverse observed
    /// information. `None` when not requested.
    pub fixed_cov: Option<DMatrix<f64>>,
    /// Covariance of the unconstrained parameters `[β | factor params]`, with
    /// NaN rows and columns for parameters left out of the information
    /// matrix (variance components on the boundary).
    pub param_cov: Option<DMatrix<f64>>,
    pub eb: EbModes,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after each accepted optimizer step.
    pub loglik_trace: Vec<f64>,
    pub nodes: usize,
    /// Unconstrained parameters at the optimum.
    pub theta: Vec<f64>,
}

impl FittedModel {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            beta: self.beta.clone(),
            vc: self.vc.clone(),
        }
    }

    /// Standard errors of `beta`, when the covariance was computed.
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.fixed_cov
            .as_ref()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect())
    }

    /// Random-effect standard deviations, level 3 first, each with the
    /// delta-method standard error of its log.
    pub fn random_sds(&self) -> Vec<RandomSd> {
        let p = self.beta.len();
        let off3 = p + self
            .vc
            .level2
            .as_ref()
            .map_or(0, |c| factor_entries(c.structure, c.dim()).len());
        let mut out = Vec::new();
        for (level, lc, offset) in [
            (Level::Level3, &self.vc.level3, off3),
            (Level::Level2, &self.vc.level2, p),
        ] {
            let Some(lc) = lc else { continue };
            let entries = factor_entries(lc.structure, lc.dim());
            let sds = lc.std_devs();
            let boundary = lc.at_boundary();
            for (r, name) in lc.names.iter().enumerate() {
                // d log sd / d theta_k for the entries in row r of the factor.
                let grad: Vec<(usize, f64)> = entries
                    .iter()
                    .enumerate()
                    .filter(|(_, (i, _))| *i == r)
                    .map(|(k, &(i, j))| {
                        let l = lc.factor[(i, j)];
                        let d = l / (sds[r] * sds[r]);
                        (offset + k, if i == j { d * l } else { d })
                    })
                    .collect();
                let log_se = self.param_cov.as_ref().and_then(|c| {
                    let var: f64 = grad
                        .iter()
                        .flat_map(|&(a, ga)| grad.iter().map(move |&(b, gb)| ga * gb * c[(a, b)]))
                        .sum();
                    (var.is_finite() && var >= 0.0).then(|| var.sqrt())
                });
                out.push(RandomSd {
                    level,
                    name: name.clone(),
                    sd: sds[r],
                    log_se,
                    at_boundary: boundary[r],
                });
            }
        }
        out
    }

    /// Correlations between random effects of unstructured levels, level 3
    /// first, with delta-method standard errors.
    pub fn random_correlations(&self) -> Vec<RandomCorr> {
        let p = self.beta.len();
        let off3 = p + self
            .vc
            .level2
            .as_ref()
            .map_or(0, |c| factor_entries(c.structure, c.dim()).len());
        let mut out = Vec::new();
        for (level, lc, offset) in [
            (Level::Level3, &self.vc.level3, off3),
            (Level::Level2, &self.vc.level2, p),
        ] {
            let Some(lc) = lc.as_ref().filter(|c| c.structure == CovStructure::Unstructured) else {
                continue;
            };
            let entries = factor_entries(lc.structure, lc.dim());
            let t0: Vec<f64> = entries
                .iter()
                .map(|&(i, j)| {
                    if i == j {
                        lc.factor[(i, j)].ln()
                    } else {
                        lc.factor[(i, j)]
                    }
                })
                .collect();
            let corr_at = |t: &[f64], a: usize, b: usize| {
                let mut f = DMatrix::zeros(lc.dim(), lc.dim());
                for (k, &(i, j)) in entries.iter().enumerate() {
                    f[(i, j)] = if i == j { t[k].exp() } else { t[k] };
                }
                let c = &f * f.transpose();
                c[(a, b)] / (c[(a, a)] * c[(b, b)]).sqrt()
            };
            let corr = lc.correlations();
            for a in 1..lc.dim() {
                for b in 0..a {
                    let grad: Vec<f64> = (0..t0.len())
                        .map(|k| {
                            let (mut up, mut dn) = (t0.clone(), t0.clone());
                            up[k] += DELTA_STEP;
                            dn[k] -= DELTA_STEP;
                            (corr_at(&up, a, b) - corr_at(&dn, a, b)) / (2.0 * DELTA_STEP)
                        })
                        .collect();
                    let se = self.param_cov.as_ref().and_then(|c| {
                        let mut var = 0.0;
                        for (k, gk) in grad.iter().enumerate() {
                            for (l, gl) in grad.iter().enumerate() {
                                var += gk * gl * c[(offset + k, offset + l)];
                            }
                        }
                        (var.is_finite() && var >= 0.0).then(|| var.sqrt())
                    });
                    out.push(RandomCorr {
                        level,
                        names: (lc.names[b].clone(), lc.names[a].clone()),
                        corr: corr[(a, b)],
                        se,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomCorr {
    pub level: Level,
    pub names: (String, String),
    pub corr: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSd {
    pub level: Level,
    /// `_cons` for an intercept, else the slope column.
    pub name: String,
    pub sd: f64,
    /// Standard error of `ln sd`; `None` without a covariance or when the
    /// component was left out of the information matrix.
    pub log_se: Option<f64>,
    pub at_boundary: bool,
}

fn rules_for(design: &DesignMatrices, rule: &QuadratureRule) -> Rules {
    Rules {
        inner: TensorRule::new(rule, design.q2()),
        outer: TensorRule::new(rule, design.q3()),
    }
}

fn check_params(params: &ModelParams, design: &DesignMatrices) -> Result<(), FitError> {
    let dim = |c: &Option<LevelCovariance>| c.as_ref().map_or(0, |c| c.dim());
    if params.beta.len() != design.n_fixed()
        || dim(&params.vc.level2) != design.q2()
        || dim(&params.vc.level3) != design.q3()
    {
        return Err(FitError::DimensionMismatch);
    }
    Ok(())
}

/// Marginal log-likelihood at `params`, integrating the random effects with
/// the adaptive version of `rule`.
pub fn marginal_loglik(
    params: &ModelParams,
    design: &DesignMatrices,
    outcomes: &[u8],
    rule: &QuadratureRule,
) -> Result<f64, FitError> {
    check_params(params, design)?;
    let problem = Problem::new(design, outcomes)?;
    let (ll, _) = problem.evaluate(&params.beta, &params.vc.factors(), &rules_for(design, rule), false)?;
    Ok(ll)
}

/// Marginal log-likelihood and its score with respect to β and to the lower
/// triangle of each covariance factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalScore {
    pub loglik: f64,
    pub beta: Vec<f64>,
    pub level2_factor: DMatrix<f64>,
    pub level3_factor: DMatrix<f64>,
}

pub fn marginal_score(
    params: &ModelParams,
    design: &DesignMatrices,
    outcomes: &[u8],
    rule: &QuadratureRule,
) -> Result<MarginalScore, FitError> {
    check_params(params, design)?;
    let problem = Problem::new(design, outcomes)?;
    let (ll, score) = problem.evaluate(&params.beta, &params.vc.factors(), &rules_for(design, rule), true)?;
    let score = score.expect("score requested");
    let to_dm = |m: &crate::linalg::SmallMat| DMatrix::from_fn(m.n, m.n, |i, j| if j <= i { m.get(i, j) } else { 0.0 });
    Ok(MarginalScore {
        loglik: ll,
        beta: score.beta.clone(),
        level2_factor: to_dm(&score.l2),
        level3_factor: to_dm(&score.l3),
    })
}

fn natural_modes(problem: &Problem, params: &ModelParams) -> Result<EbModes, FitError> {
    let modes = problem.modes(&params.beta, &params.vc.factors())?;
    let scale = |lc: &Option<LevelCovariance>, e: &[Vector]| match lc {
        Some(c) => e
            .iter()
            .map(|v| &c.factor * DVector::from_column_slice(&v[..c.dim()]))
            .collect(),
        None => vec![DVector::zeros(0); e.len()],
    };
    Ok(EbModes {
        level2: scale(&params.vc.level2, &modes.level2),
        level3: scale(&params.vc.level3, &modes.level3),
    })
}

/// Posterior modes of the random effects at `params`. With level-3
/// effects, each level-3 cluster and its level-2 clusters are maximized
/// jointly.
pub fn eb_modes(params: &ModelParams, design: &DesignMatrices, outcomes: &[u8]) -> Result<EbModes, FitError> {
    check_params(params, design)?;
    let problem = Problem::new(design, outcomes)?;
    natural_modes(&problem, params)
}

/// Plain logistic regression by Newton's method for start values. Returns
/// the estimate and the inverse information, or `None` if it diverges.
fn logistic_start(problem: &Problem) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let p = problem.p;
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let mut info = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for (x, y) in problem.x_rows() {
            let xv = DVector::from_column_slice(x);
            let (_, pr) = likelihood::bernoulli(y, xv.dot(&beta));
            score += &xv * (y - pr);
            info += &xv * xv.transpose() * (pr * (1.0 - pr));
        }
        let chol = info.clone().cholesky()?;
        let step = chol.solve(&score);
        beta += &step;
        if beta.amax() > SEPARATION_BOUND {
            return None;
        }
        if step.amax() < 1e-10 {
            return Some((beta.iter().copied().collect(), chol.inverse()));
        }
    }
    None
}

/// Fits the model by maximizing the marginal likelihood.
pub fn fit(ds: &ClusteredDataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FittedModel, FitError> {
    let design = build_design(ds, spec)?;
    fit_design(&design, ds.outcomes(), opts)
}

pub(crate) fn fit_design(design: &DesignMatrices, outcomes: &[u8], opts: &FitOptions) -> Result<FittedModel, FitError> {
    let rule = gh_rule(opts.nodes)?;
    let rules = rules_for(design, &rule);
    let problem = Problem::new(design, outcomes)?;
    let layout = ParamLayout::new(design);
    let n = layout.len();
    let p = layout.n_beta();

    let start_fit = logistic_start(&problem);
    let x0 = match &opts.start {
        Some(s) => {
            let mut s = s.clone();
            s.beta.resize(p, 0.0);
            layout.pack(&s)
        }
        None => {
            let mut s = ModelParams {
                beta: vec![0.0; p],
                vc: VarianceComponents::start_for(design),
            };
            if let Some((b, _)) = &start_fit {
                s.beta = b.clone();
            }
            layout.pack(&s)
        }
    };
    let mut h0 = DMatrix::zeros(n, n);
    match &start_fit {
        Some((_, cov)) => h0.view_mut((0, 0), (p, p)).copy_from(cov),
        None => {
            let scale = 4.0 / problem.n_rows().max(1) as f64;
            h0.view_mut((0, 0), (p, p)).fill_with_identity();
            h0.view_mut((0, 0), (p, p)).scale_mut(scale);
        }
    }
    let n2 = design.level2_rows.len().max(1) as f64;
    let n3 = design.level3_members.len().max(1) as f64;
    for i in p..n {
        let clusters = if layout.is_level3_param(i) { n3 } else { n2 };
        h0[(i, i)] = 2.0 / clusters;
    }

    let lower = layout.lower_bounds();
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>), FitError> {
        let (ll, score) = problem.evaluate(&theta[..p], &layout.factors(theta), &rules, true)?;
        Ok((ll, layout.chain(theta, &score.expect("score requested"))))
    };
    let result = maximize(
        objective,
        x0,
        &lower,
        h0,
        &BfgsOptions {
            max_iter: opts.max_iter,
            tol: opts.tol,
            n_bounded: p,
            bound: SEPARATION_BOUND,
        },
    )?;
    if !result.converged {
        return Err(FitError::NoConvergence(result.iterations));
    }
    let theta = result.x;
    let params = layout.unpack(&theta);

    let (fixed_cov, param_cov) = if opts.covariance {
        let (f, c) = information_inverse(&theta, &layout, &lower, |t| objective(t).map(|(_, g)| g))?;
        (Some(f), Some(c))
    } else {
        (None, None)
    };
    let eb = natural_modes(&problem, &params)?;
    Ok(FittedModel {
        fixed_names: design.x_names.clone(),
        beta: params.beta.clone(),
        vc: params.vc,
        loglik: result.value,
        fixed_cov,
        param_cov,
        eb,
        converged: true,
        iterations: result.iterations,
        loglik_trace: result.trace,
        nodes: opts.nodes,
        theta,
    })
}

/// Inverse of the observed information from central differences of the
/// score. Variance parameters on the lower bound are left out; if the
/// remaining information is still not positive definite, variance
/// parameters are dropped in order of increasing curvature.
fn information_inverse<G>(
    theta: &[f64],
    layout: &ParamLayout,
    lower: &[f64],
    mut score: G,
) -> Result<(DMatrix<f64>, DMatrix<f64>), FitError>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>, FitError>,
{
    let n = theta.len();
    let p = layout.n_beta();
    let diag = layout.diagonal_indices();
    let mut keep: Vec<usize> = (0..n)
        .filter(|&i| !(diag.contains(&i) && theta[i] <= lower[i] + 1e-6))
        .collect();

    let mut hess = DMatrix::zeros(n, n);
    for &j in &keep {
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[j] += HESSIAN_STEP;
        dn[j] -= HESSIAN_STEP;
        let gu = score(&up)?;
        let gd = score(&dn)?;
        for i in 0..n {
            hess[(i, j)] = (gu[i] - gd[i]) / (2.0 * HESSIAN_STEP);
        }
    }
    let info = -(&hess + hess.transpose()) * 0.5;

    loop {
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| info[(keep[a], keep[b])]);
        if let Some(chol) = sub.cholesky() {
            let inv = chol.inverse();
            let mut full = DMatrix::from_element(n, n, f64::NAN);
            for (a, &i) in keep.iter().enumerate() {
                for (b, &j) in keep.iter().enumerate() {
                    full[(i, j)] = inv[(a, b)];
                }
            }
            let fixed = full.view((0, 0), (p, p)).into_owned();
            return Ok((fixed, full));
        }
        let drop = keep
            .iter()
            .enumerate()
            .filter(|(_, &i)| i >= p)
            .min_by(|(_, &a), (_, &b)| info[(a, a)].total_cmp(&info[(b, b)]))
            .map(|(pos, _)| pos);
        match drop {
            Some(pos) => {
                keep.remove(pos);
            }
            None => return Err(FitError::SingularInformation),
        }
    }
}

/// Conditional predicted probabilities `logit⁻¹(xᵀβ̂ + zᵀũ)` using each
/// row's empirical Bayes modes.
pub fn predict_conditional(fm: &FittedModel, ds: &ClusteredDataset, spec: &ModelSpec) -> Result<Vec<f64>, FitError> {
    let design = build_design(ds, spec)?;
    if design.n_fixed() != fm.beta.len() || fm.eb.level2.len() != ds.n_level2() {
        return Err(FitError::DimensionMismatch);
    }
    let level3_ok = design.level3.is_none() || fm.eb.level3.len() == ds.n_level3();
    if !level3_ok {
        return Err(FitError::DimensionMismatch);
    }
    let mut out = Vec::with_capacity(ds.n_rows());
    for i in 0..ds.n_rows() {
        let mut eta: f64 = design.x.row(i).iter().zip(&fm.beta).map(|(a, b)| a * b).sum();
        if let Some(d) = &design.level2 {
            let u = &fm.eb.level2[ds.level2_ids()[i]];
            eta += d.z.row(i).iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(d) = &design.level3 {
            let u = &fm.eb.level3[ds.level3_ids()[i]];
            eta += d.z.row(i).iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        let p = 1.0 / (1.0 + (-eta).exp());
        out.push(p.clamp(1e-15, 1.0 - 1e-15));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
