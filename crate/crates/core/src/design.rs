//! Model specifications and design matrices.

use crate::data::ClusteredDataset;
use crate::error::DataError;

/// Largest random-effects dimension supported at one level. The tensor
/// quadrature grows as `nodes^dim`, so larger blocks are impractical anyway.
pub const MAX_RANDOM_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovStructure {
    #[default]
    Independent,
    Unstructured,
}

/// Random effects at one level: an optional intercept plus slopes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LevelEffects {
    pub intercept: bool,
    pub slopes: Vec<String>,
    pub covariance: CovStructure,
}

impl LevelEffects {
    pub fn intercept() -> Self {
        Self {
            intercept: true,
            ..Self::default()
        }
    }

    pub fn with_slope(mut self, column: impl Into<String>) -> Self {
        self.slopes.push(column.into());
        self
    }

    pub fn unstructured(mut self) -> Self {
        self.covariance = CovStructure::Unstructured;
        self
    }

    pub fn dim(&self) -> usize {
        usize::from(self.intercept) + self.slopes.len()
    }

    fn names(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.dim());
        if self.intercept {
            v.push("_cons".to_string());
        }
        v.extend(self.slopes.iter().cloned());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RandomEffectsSpec {
    pub level2: Option<LevelEffects>,
    pub level3: Option<LevelEffects>,
}

impl RandomEffectsSpec {
    pub fn total_dim(&self) -> usize {
        self.level2.as_ref().map_or(0, LevelEffects::dim) + self.level3.as_ref().map_or(0, LevelEffects::dim)
    }
}

/// Fixed-effect columns (the intercept is implicit and always first), the
/// random-effects structure, and extra fixed columns appended after the
/// regular ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub fixed: Vec<String>,
    pub random: RandomEffectsSpec,
    pub extra_fixed: Vec<String>,
}

impl ModelSpec {
    pub fn new<S: Into<String>>(fixed: impl IntoIterator<Item = S>) -> Self {
        Self {
            fixed: fixed.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn level2(mut self, effects: LevelEffects) -> Self {
        self.random.level2 = Some(effects);
        self
    }

    pub fn level3(mut self, effects: LevelEffects) -> Self {
        self.random.level3 = Some(effects);
        self
    }

    pub fn with_extra(&self, extra: Vec<String>) -> Self {
        let mut s = self.clone();
        s.extra_fixed = extra;
        s
    }

    /// Names of the columns of X: `_cons`, fixed, extras.
    pub fn fixed_names(&self) -> Vec<String> {
        std::iter::once("_cons".to_string())
            .chain(self.fixed.iter().cloned())
            .chain(self.extra_fixed.iter().cloned())
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen: Vec<&str> = Vec::new();
        for name in self.fixed.iter().chain(&self.extra_fixed) {
            if name == "_cons" || seen.contains(&name.as_str()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
            seen.push(name);
        }
        for eff in [&self.random.level2, &self.random.level3].into_iter().flatten() {
            for (i, s) in eff.slopes.iter().enumerate() {
                if eff.slopes[..i].contains(s) {
                    return Err(DataError::DuplicateColumn(s.clone()));
                }
            }
            if eff.dim() > MAX_RANDOM_DIM {
                return Err(DataError::TooManyRandomEffects {
                    got: eff.dim(),
                    max: MAX_RANDOM_DIM,
                });
            }
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.nrows).map(move |i| self.data[i * self.ncols + j])
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.ncols + j] = v;
    }
}

/// Design of one random-effects level.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomDesign {
    pub z: RowMatrix,
    pub names: Vec<String>,
    pub covariance: CovStructure,
}

impl RandomDesign {
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Fixed and random-effects designs with cluster index maps. Rows are in
/// dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub x: RowMatrix,
    pub x_names: Vec<String>,
    pub level2: Option<RandomDesign>,
    pub level3: Option<RandomDesign>,
    /// Rows of each level-2 cluster in dataset order.
    pub level2_rows: Vec<Vec<usize>>,
    /// Level-2 clusters of each level-3 cluster in first-appearance order.
    pub level3_members: Vec<Vec<usize>>,
}

impl DesignMatrices {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn q2(&self) -> usize {
        self.level2.as_ref().map_or(0, RandomDesign::dim)
    }

    pub fn q3(&self) -> usize {
        self.level3.as_ref().map_or(0, RandomDesign::dim)
    }

    /// Random-effects design rows of one level-2 cluster.
    pub fn z2_block(&self, cluster: usize) -> Vec<&[f64]> {
        match &self.level2 {
            Some(d) => self.level2_rows[cluster].iter().map(|&i| d.z.row(i)).collect(),
            None => Vec::new(),
        }
    }
}

fn random_design(ds: &ClusteredDataset, eff: &LevelEffects) -> Result<RandomDesign, DataError> {
    let n = ds.n_rows();
    let names = eff.names();
    let mut z = RowMatrix::zeros(n, names.len());
    let mut col = 0;
    if eff.intercept {
        for i in 0..n {
            z.set(i, 0, 1.0);
        }
        col = 1;
    }
    for s in &eff.slopes {
        let v = ds.column(s).ok_or_else(|| DataError::UnknownColumn(s.clone()))?;
        for (i, &x) in v.iter().enumerate() {
            z.set(i, col, x);
        }
        col += 1;
    }
    Ok(RandomDesign {
        z,
        names,
        covariance: eff.covariance,
    })
}

/// Builds X = [1, fixed..., extras...] and the per-level Z designs. Level-3
/// random effects on data with a single level-3 cluster are not identifiable
/// and are dropped, so two-level data fits as a two-level model.
pub fn build_design(ds: &ClusteredDataset, spec: &ModelSpec) -> Result<DesignMatrices, DataError> {
    spec.validate()?;
    let n = ds.n_rows();
    let x_names = spec.fixed_names();
    let mut x = RowMatrix::zeros(n, x_names.len());
    for i in 0..n {
        x.set(i, 0, 1.0);
    }
    for (c, name) in x_names.iter().enumerate().skip(1) {
        let v = ds.column(name).ok_or_else(|| DataError::UnknownColumn(name.clone()))?;
        for (i, &val) in v.iter().enumerate() {
            x.set(i, c, val);
        }
    }
    let level2 = match &spec.random.level2 {
        Some(e) if e.dim() > 0 => Some(random_design(ds, e)?),
        _ => None,
    };
    let level3 = match &spec.random.level3 {
        Some(e) if e.dim() > 0 => {
            let d = random_design(ds, e)?;
            (ds.n_level3() > 1).then_some(d)
        }
        _ => None,
    };

    let mut level2_rows = vec![Vec::new(); ds.n_level2()];
    for (i, &k) in ds.level2_ids().iter().enumerate() {
        level2_rows[k].push(i);
    }
    let mut level3_members = vec![Vec::new(); ds.n_level3()];
    for (k, &j) in ds.level2_parent().iter().enumerate() {
        level3_members[j].push(k);
    }
    Ok(DesignMatrices {
        x,
        x_names,
        level2,
        level3,
        level2_rows,
        level3_members,
    })
}
