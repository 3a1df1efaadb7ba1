use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::FitError;

/// Gauss–Hermite rule for the standard normal density: `Σ w f(x) ≈ E f(X)`,
/// `X ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Orthonormal Hermite values `(ψ_k(x), ψ_{k-1}(x))` for the standard normal weight.
fn hermite_pair(k: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for n in 0..k {
        let next = (x * cur - (n as f64).sqrt() * prev) / ((n + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Probabilists' Gauss–Hermite rule with `k` nodes, `1 <= k <= 50`.
///
/// Eigenvalues of the Jacobi matrix seed a Newton polish on the orthonormal
/// recurrence; weights come from `w = 1 / (k ψ_{k-1}(x)²)`, which stays
/// accurate for the tiny outer weights. Nodes and weights are then made
/// exactly symmetric.
pub fn gh_rule(k: usize) -> Result<QuadratureRule, FitError> {
    if !(1..=50).contains(&k) {
        return Err(FitError::BadNodeCount(k));
    }
    if k == 1 {
        return Ok(QuadratureRule {
            nodes: vec![0.0],
            weights: vec![1.0],
        });
    }
    let jacobi = DMatrix::from_fn(k, k, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);

    let kf = k as f64;
    let mut weights = Vec::with_capacity(k);
    for x in &mut nodes {
        for _ in 0..100 {
            let (pk, pk1) = hermite_pair(k, *x);
            let step = pk / (kf.sqrt() * pk1);
            *x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, pk1) = hermite_pair(k, *x);
        weights.push(1.0 / (kf * pk1 * pk1));
    }

    for i in 0..k / 2 {
        let j = k - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Tensor product of a 1-D rule over `dim` standardized dimensions, stored
/// with the log weights already adjusted by `+|t|²/2` so that the adaptive
/// sum is `Σ exp(lw + g(t))` for a log-integrand `g` on the unscaled space.
#[derive(Debug, Clone)]
pub(crate) struct TensorRule {
    pub dim: usize,
    pub points: Vec<f64>,
    pub lw: Vec<f64>,
}

impl TensorRule {
    pub fn new(rule: &QuadratureRule, dim: usize) -> Self {
        let k = rule.len();
        let count = k.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut lw = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            let mut l = 0.0;
            for &i in &idx {
                let t = rule.nodes[i];
                points.push(t);
                l += rule.weights[i].ln() + 0.5 * t * t;
            }
            lw.push(l);
            for d in (0..dim).rev() {
                idx[d] += 1;
                if idx[d] < k {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { dim, points, lw }
    }

    pub fn len(&self) -> usize {
        self.lw.len()
    }

    #[inline]
    pub fn point(&self, m: usize) -> &[f64] {
        &self.points[m * self.dim..(m + 1) * self.dim]
    }
}
