//! Bound-constrained BFGS maximizer with a backtracking (Armijo) line search.
//! Coordinates at their lower bound whose gradient points outward are held
//! fixed for the iteration.
//!
//! Iteration stops once the relative change in value is below `tol` and
//! the projected gradient is below `10 tol`, or below `10 sqrt(tol)` with a
//! scaled length g' H g under `SCALED_TOL`.
//!
//! The supplied gradient may be approximate. When no ascent can be found
//! along it, a central-difference gradient is taken. If that gradient is
//! negligible, or its scaled length g' H g is below `SCALED_TOL`, the point is
//! accepted; otherwise the remaining iterations use difference gradients.

use nalgebra::{DMatrix, DVector};

use crate::error::FitError;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;
const MAX_STEP: f64 = 3.0;
/// Trial steps shorter than this, relative to the iterate, are not tried.
const MIN_STEP: f64 = 1e-10;
const NOISE: f64 = 1e-14;
const FD_STEP: f64 = 1e-5;
/// Bound on g' H g, the predicted gain of a quasi-Newton step.
const SCALED_TOL: f64 = 1e-5;

pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// The first `n_bounded` coordinates must stay within `±bound`.
    pub n_bounded: usize,
    pub bound: f64,
}

pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn is_active(x: f64, lb: f64, g: f64) -> bool {
    x <= lb + 1e-10 && g <= 0.0
}

/// Gradient of the objective by central differences, one-sided at a bound.
fn fd_gradient<F>(f: &mut F, x: &[f64], val: f64, lower: &[f64]) -> Result<Vec<f64>, FitError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), FitError>,
{
    let mut g = vec![0.0; x.len()];
    let mut t = x.to_vec();
    for i in 0..x.len() {
        let h = FD_STEP * (1.0 + x[i].abs());
        t[i] = x[i] + h;
        let up = f(&t)?.0;
        if x[i] - h >= lower[i] {
            t[i] = x[i] - h;
            g[i] = (up - f(&t)?.0) / (2.0 * h);
        } else {
            g[i] = (up - val) / h;
        }
        t[i] = x[i];
    }
    Ok(g)
}

/// g' H g over the free coordinates.
fn scaled_gradient(h: &DMatrix<f64>, x: &[f64], g: &[f64], lower: &[f64]) -> f64 {
    let free: Vec<usize> = (0..x.len()).filter(|&i| !is_active(x[i], lower[i], g[i])).collect();
    free.iter()
        .map(|&i| g[i] * free.iter().map(|&j| h[(i, j)] * g[j]).sum::<f64>())
        .sum()
}

/// Maximizes `f`, which returns the value and gradient at a point.
pub(crate) fn maximize<F>(
    mut f: F,
    x0: Vec<f64>,
    lower: &[f64],
    h0: DMatrix<f64>,
    opts: &BfgsOptions,
) -> Result<BfgsResult, FitError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), FitError>,
{
    let n = x0.len();
    let mut x: Vec<f64> = x0.iter().zip(lower).map(|(v, lb)| v.max(*lb)).collect();
    let (mut val, mut g) = f(&x)?;
    let mut h = h0.clone();
    let mut trace = vec![val];
    let proj_norm = |x: &[f64], g: &[f64]| {
        (0..n)
            .filter(|&i| !is_active(x[i], lower[i], g[i]))
            .map(|i| g[i].abs())
            .fold(0.0, f64::max)
    };

    let mut numeric = false;
    let mut h_curv: Option<DMatrix<f64>> = None;
    for iter in 1..=opts.max_iter {
        let mut reset = false;
        let (x_new, val_new, g_new) = loop {
            let free: Vec<usize> = (0..n).filter(|&i| !is_active(x[i], lower[i], g[i])).collect();
            let mut d = vec![0.0; n];
            for &i in &free {
                d[i] = free.iter().map(|&j| h[(i, j)] * g[j]).sum();
            }
            let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope.is_nan() || slope <= 0.0 {
                h = h0.clone();
                for &i in &free {
                    d[i] = free.iter().map(|&j| h[(i, j)] * g[j]).sum();
                }
                slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
                reset = true;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > MAX_STEP {
                for v in &mut d {
                    *v *= MAX_STEP / dmax;
                }
                slope *= MAX_STEP / dmax;
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for _ in 0..MAX_BACKTRACK {
                // Below these the objective cannot register an increase.
                if alpha * dmax.min(MAX_STEP) < MIN_STEP * scale || alpha * slope < NOISE * (1.0 + val.abs()) {
                    break;
                }
                let trial: Vec<f64> = (0..n).map(|i| (x[i] + alpha * d[i]).max(lower[i])).collect();
                if let Ok((v, mut gt)) = f(&trial) {
                    let moved: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
                    if v >= val + ARMIJO * moved.min(alpha * slope) && v > val {
                        if numeric {
                            gt = fd_gradient(&mut f, &trial, v, lower)?;
                        }
                        accepted = Some((trial, v, gt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match accepted {
                Some(a) => break a,
                None if !reset && proj_norm(&x, &g) >= 10.0 * opts.tol.sqrt() => {
                    h_curv = Some(std::mem::replace(&mut h, h0.clone()));
                    reset = true;
                }
                None if !numeric => {
                    numeric = true;
                    g = fd_gradient(&mut f, &x, val, lower)?;
                    let curv = h_curv.take().unwrap_or_else(|| h.clone());
                    if proj_norm(&x, &g) < 10.0 * opts.tol.sqrt() || scaled_gradient(&curv, &x, &g, lower) < SCALED_TOL
                    {
                        return Ok(BfgsResult {
                            x,
                            value: val,
                            iterations: iter,
                            converged: true,
                            trace,
                        });
                    }
                    h = h0.clone();
                    reset = false;
                }
                None => {
                    // No ascent along the gradient: stationary up to the
                    // accuracy of the objective.
                    let converged = proj_norm(&x, &g) < 10.0 * opts.tol.sqrt();
                    return Ok(BfgsResult {
                        x,
                        value: val,
                        iterations: iter,
                        converged,
                        trace,
                    });
                }
            }
        };

        for (i, v) in x_new.iter().enumerate().take(opts.n_bounded) {
            if v.abs() > opts.bound {
                return Err(FitError::SeparationDetected { index: i, value: *v });
            }
        }

        let rel = (val_new - val).abs() / val_new.abs().max(1.0);
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g.iter().zip(&g_new).map(|(a, b)| a - b));
        x = x_new;
        val = val_new;
        g = g_new;
        trace.push(val);

        if rel < opts.tol
            && (proj_norm(&x, &g) < 10.0 * opts.tol
                || (proj_norm(&x, &g) < 10.0 * opts.tol.sqrt() && scaled_gradient(&h, &x, &g, lower) < SCALED_TOL))
        {
            return Ok(BfgsResult {
                x,
                value: val,
                iterations: iter,
                converged: true,
                trace,
            });
        }

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }
    Ok(BfgsResult {
        x,
        value: val,
        iterations: opts.max_iter,
        converged: false,
        trace,
    })
}
