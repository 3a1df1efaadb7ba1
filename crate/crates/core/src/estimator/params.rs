use nalgebra::DMatrix;

use crate::design::{CovStructure, DesignMatrices};
use crate::linalg::SmallMat;

use super::likelihood::{Factors, Score};

/// Lower bound on the log of each diagonal entry of a covariance factor.
pub const LOG_SD_FLOOR: f64 = -8.0;

/// Covariance of the random effects at one level, held as its lower
/// Cholesky factor `L` (`Ω = L Lᵀ`).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCovariance {
    pub names: Vec<String>,
    pub structure: CovStructure,
    pub factor: DMatrix<f64>,
}

impl LevelCovariance {
    /// Independent effects with the given standard deviations.
    pub fn independent(names: Vec<String>, sds: &[f64]) -> Self {
        let q = sds.len();
        Self {
            names,
            structure: CovStructure::Independent,
            factor: DMatrix::from_fn(q, q, |i, j| if i == j { sds[i] } else { 0.0 }),
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn std_devs(&self) -> Vec<f64> {
        let c = self.covariance();
        (0..self.dim()).map(|i| c[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Correlation matrix; entries involving a zero-variance effect are 0.
    pub fn correlations(&self) -> DMatrix<f64> {
        let c = self.covariance();
        let sd = self.std_devs();
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            if i == j {
                1.0
            } else if sd[i] > 0.0 && sd[j] > 0.0 {
                (c[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
    }

    /// Diagonal factor entries sitting on the lower bound.
    pub fn at_boundary(&self) -> Vec<bool> {
        (0..self.dim())
            .map(|i| self.factor[(i, i)].abs() <= LOG_SD_FLOOR.exp() * (1.0 + 1e-6))
            .collect()
    }

    fn small(&self) -> SmallMat {
        let mut m = SmallMat::zeros(self.dim());
        for i in 0..self.dim() {
            for j in 0..=i {
                m.set(i, j, self.factor[(i, j)]);
            }
        }
        m
    }
}

/// Random-effects covariances per level; `None` where a level has no
/// random effects.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VarianceComponents {
    pub level2: Option<LevelCovariance>,
    pub level3: Option<LevelCovariance>,
}

impl VarianceComponents {
    pub(crate) fn factors(&self) -> Factors {
        Factors {
            l2: self.level2.as_ref().map_or(SmallMat::zeros(0), LevelCovariance::small),
            l3: self.level3.as_ref().map_or(SmallMat::zeros(0), LevelCovariance::small),
        }
    }

    /// Default start: independent effects with standard deviation 0.5.
    pub(crate) fn start_for(design: &DesignMatrices) -> Self {
        let level = |d: &Option<crate::design::RandomDesign>| {
            d.as_ref().map(|d| {
                let mut lc = LevelCovariance::independent(d.names.clone(), &vec![0.5; d.dim()]);
                lc.structure = d.covariance;
                lc
            })
        };
        Self {
            level2: level(&design.level2),
            level3: level(&design.level3),
        }
    }
}

/// Fixed effects plus variance components.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub vc: VarianceComponents,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LevelLayout {
    q: usize,
    structure: CovStructure,
    offset: usize,
}

impl LevelLayout {
    fn len(&self) -> usize {
        match self.structure {
            CovStructure::Independent => self.q,
            CovStructure::Unstructured => self.q * (self.q + 1) / 2,
        }
    }

    fn entries(&self) -> Vec<(usize, usize)> {
        factor_entries(self.structure, self.q)
    }
}

/// `(row, col)` of each factor parameter in packing order; diagonals are logged.
pub(crate) fn factor_entries(structure: CovStructure, q: usize) -> Vec<(usize, usize)> {
    match structure {
        CovStructure::Independent => (0..q).map(|i| (i, i)).collect(),
        CovStructure::Unstructured => (0..q).flat_map(|i| (0..=i).map(move |j| (i, j))).collect(),
    }
}

/// Unconstrained parameter vector `[β | level-2 factor | level-3 factor]`.
/// Factor diagonals enter as logs, off-diagonals as-is; independent
/// structures carry only the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamLayout {
    p: usize,
    level2: Option<LevelLayout>,
    level3: Option<LevelLayout>,
    names2: Vec<String>,
    names3: Vec<String>,
}

impl ParamLayout {
    pub fn new(design: &DesignMatrices) -> Self {
        let p = design.n_fixed();
        let level2 = design.level2.as_ref().map(|d| LevelLayout {
            q: d.dim(),
            structure: d.covariance,
            offset: p,
        });
        let off3 = p + level2.map_or(0, |l| l.len());
        let level3 = design.level3.as_ref().map(|d| LevelLayout {
            q: d.dim(),
            structure: d.covariance,
            offset: off3,
        });
        Self {
            p,
            level2,
            level3,
            names2: design.level2.as_ref().map_or_else(Vec::new, |d| d.names.clone()),
            names3: design.level3.as_ref().map_or_else(Vec::new, |d| d.names.clone()),
        }
    }

    pub fn n_beta(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.p + self.level2.map_or(0, |l| l.len()) + self.level3.map_or(0, |l| l.len())
    }

    pub fn is_level3_param(&self, i: usize) -> bool {
        self.level3.is_some_and(|l| i >= l.offset)
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut lb = vec![f64::NEG_INFINITY; self.len()];
        for l in [self.level2, self.level3].into_iter().flatten() {
            for (k, (i, j)) in l.entries().into_iter().enumerate() {
                if i == j {
                    lb[l.offset + k] = LOG_SD_FLOOR;
                }
            }
        }
        lb
    }

    /// Indices of diagonal (log-SD) parameters.
    pub fn diagonal_indices(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for l in [self.level2, self.level3].into_iter().flatten() {
            for (k, (i, j)) in l.entries().into_iter().enumerate() {
                if i == j {
                    v.push(l.offset + k);
                }
            }
        }
        v
    }

    pub fn pack(&self, params: &ModelParams) -> Vec<f64> {
        let mut theta = params.beta.clone();
        theta.resize(self.p, 0.0);
        for (layout, lc) in [(self.level2, &params.vc.level2), (self.level3, &params.vc.level3)] {
            if let Some(l) = layout {
                for (i, j) in l.entries() {
                    let v = lc.as_ref().map_or(if i == j { 0.5 } else { 0.0 }, |c| c.factor[(i, j)]);
                    theta.push(if i == j { v.abs().ln().max(LOG_SD_FLOOR) } else { v });
                }
            }
        }
        theta
    }

    fn level_factor(&self, l: &LevelLayout, theta: &[f64]) -> DMatrix<f64> {
        let mut f = DMatrix::zeros(l.q, l.q);
        for (k, (i, j)) in l.entries().into_iter().enumerate() {
            let v = theta[l.offset + k];
            f[(i, j)] = if i == j { v.exp() } else { v };
        }
        f
    }

    pub fn unpack(&self, theta: &[f64]) -> ModelParams {
        let make = |l: &Option<LevelLayout>, names: &Vec<String>| {
            l.as_ref().map(|l| LevelCovariance {
                names: names.clone(),
                structure: l.structure,
                factor: self.level_factor(l, theta),
            })
        };
        ModelParams {
            beta: theta[..self.p].to_vec(),
            vc: VarianceComponents {
                level2: make(&self.level2, &self.names2),
                level3: make(&self.level3, &self.names3),
            },
        }
    }

    pub fn factors(&self, theta: &[f64]) -> Factors {
        self.unpack(theta).vc.factors()
    }

    /// Chain rule from the factor-entry score to the parameter vector.
    pub fn chain(&self, theta: &[f64], score: &Score) -> Vec<f64> {
        let mut g = score.beta.clone();
        for (layout, s) in [(self.level2, &score.l2), (self.level3, &score.l3)] {
            if let Some(l) = layout {
                for (k, (i, j)) in l.entries().into_iter().enumerate() {
                    let d = s.get(i, j);
                    g.push(if i == j { d * theta[l.offset + k].exp() } else { d });
                }
            }
        }
        g
    }
}
