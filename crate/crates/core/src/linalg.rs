//! Stack-allocated linear algebra for random-effects blocks (dimension at
//! most `MAX_RANDOM_DIM`). These run in the innermost loops of the
//! likelihood, where heap allocation would dominate.

use crate::design::MAX_RANDOM_DIM;

pub(crate) const MQ: usize = MAX_RANDOM_DIM;

pub(crate) type Vector = [f64; MQ];

/// Square matrix of dimension `n <= MQ`, row-major with stride `MQ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SmallMat {
    pub n: usize,
    pub a: [f64; MQ * MQ],
}

impl SmallMat {
    pub fn zeros(n: usize) -> Self {
        debug_assert!(n <= MQ);
        Self { n, a: [0.0; MQ * MQ] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * MQ + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * MQ + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * MQ + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * MQ + j] += v;
    }

    /// Adds `w * v vᵀ` to the lower triangle.
    #[inline]
    pub fn rank1_lower(&mut self, w: f64, v: &[f64]) {
        for i in 0..self.n {
            let wi = w * v[i];
            for j in 0..=i {
                self.a[i * MQ + j] += wi * v[j];
            }
        }
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix, reading
    /// only the lower triangle.
    pub fn cholesky(&self) -> Option<SmallChol> {
        let n = self.n;
        let mut l = SmallMat::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s.is_nan() || s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l.set(i, i, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Some(SmallChol { l })
    }
}

/// `A = L Lᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SmallChol {
    pub l: SmallMat,
}

impl SmallChol {
    pub fn n(&self) -> usize {
        self.l.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vector {
        let y = self.solve_lower(b);
        self.solve_upper(&y)
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vector {
        let n = self.n();
        let mut y = [0.0; MQ];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }

    /// Solves `Lᵀ x = b`. With `A` a precision matrix this maps standard
    /// normal draws to draws with covariance `A⁻¹`.
    pub fn solve_upper(&self, b: &[f64]) -> Vector {
        let n = self.n();
        let mut x = [0.0; MQ];
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l.get(k, i) * x[k];
            }
            x[i] = s / self.l.get(i, i);
        }
        x
    }

    /// `ln det L = ½ ln det A`.
    pub fn half_logdet(&self) -> f64 {
        (0..self.n()).map(|i| self.l.get(i, i).ln()).sum()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `ln Σ exp(v)`, stable.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
