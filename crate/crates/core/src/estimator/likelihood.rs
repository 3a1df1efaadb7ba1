//! Marginal likelihood of the two/three-level logistic model by nested
//! adaptive Gauss–Hermite quadrature, with its score.
//!
//! Random effects are written on the standardized scale, `b = L e` with
//! `e ~ N(0, I)` and `L` the lower-triangular covariance factor, so the linear
//! predictor is `xᵀβ + (L₃ᵀz₃)ᵀe₃ + (L₂ᵀz₂)ᵀe₂`. For each level-3 cluster the
//! joint posterior mode of `(e₃, e₂₁, …, e₂ₖ)` fixes the outer centre and,
//! through the Schur complement, the outer scale. At every outer node each
//! level-2 cluster is recentred at its conditional mode and integrated with
//! the inner rule.
//!
//! The score is the exact gradient of this approximation: the quadrature of
//! the complete-data score `Σ (y − p) ∂η/∂θ` under the normalized node
//! weights, plus the terms from the dependence of every adaptive centre and
//! scale on the parameters, obtained by implicit differentiation of the modes
//! and an adjoint of the Cholesky factor.

use std::ops::Range;

use crate::design::DesignMatrices;
use crate::error::FitError;
use crate::linalg::{dot, log_sum_exp, norm_sq, SmallChol, SmallMat, Vector, MQ};

use super::quadrature::TensorRule;

const MODE_TOL: f64 = 1e-8;
const MODE_MAX_ITER: usize = 60;

/// Bernoulli log-likelihood and success probability at linear predictor `eta`.
#[inline]
pub(crate) fn bernoulli(y: f64, eta: f64) -> (f64, f64) {
    if eta >= 0.0 {
        let e = (-eta).exp();
        let l1p = e.ln_1p();
        let p = 1.0 / (1.0 + e);
        (if y > 0.5 { -l1p } else { -eta - l1p }, p)
    } else {
        let e = eta.exp();
        let l1p = e.ln_1p();
        let p = e / (1.0 + e);
        (if y > 0.5 { eta - l1p } else { -l1p }, p)
    }
}

/// Rows sorted contiguously by level-3 then level-2 cluster.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub p: usize,
    pub q2: usize,
    pub q3: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    z2: Vec<f64>,
    z3: Vec<f64>,
    subjects: Vec<Range<usize>>,
    /// Sorted subject -> dense level-2 id.
    pub subject_id: Vec<usize>,
    families: Vec<Range<usize>>,
    /// Sorted family -> dense level-3 id.
    pub family_id: Vec<usize>,
}

/// Lower-triangular covariance factors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Factors {
    pub l2: SmallMat,
    pub l3: SmallMat,
}

#[derive(Debug, Clone)]
pub(crate) struct Rules {
    pub inner: TensorRule,
    pub outer: TensorRule,
}

/// Score with respect to β and the entries of each covariance factor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Score {
    pub beta: Vec<f64>,
    pub l2: SmallMat,
    pub l3: SmallMat,
}

/// Posterior modes on the standardized scale.
#[derive(Debug, Clone)]
pub(crate) struct Modes {
    /// Indexed by dense level-3 id.
    pub level3: Vec<Vector>,
    /// Indexed by dense level-2 id.
    pub level2: Vec<Vector>,
}

/// Per-evaluation quantities that depend on the parameters but not on the
/// random effects.
struct Pre {
    off: Vec<f64>,
    a2: Vec<f64>,
    a3: Vec<f64>,
}

struct JointMode {
    e3: Vector,
    e2: Vec<Vector>,
    schur: SmallChol,
    /// `A_kk⁻¹ A_k3`, q2 × q3 with stride MQ, per subject.
    shift: Vec<[f64; MQ * MQ]>,
    /// Cholesky factors of the `A_kk` blocks.
    blocks: Vec<SmallChol>,
}

/// Sensitivity of an adaptive quadrature sum to its centre and scale.
///
/// The sum is `Q = −ln|B| + ln Σ_r exp(f(ê + B⁻ᵀ t_r))` with `BBᵀ = M`.
/// Fed the normalized weight, displacement `B⁻ᵀ t_r` and gradient of `f`
/// at every node, it yields `∂Q/∂ê` and the symmetric `Γ` with
/// `dQ = tr(Γ dM)` at a fixed centre.
struct Adaptation {
    q: usize,
    centre: Vector,
    /// `Σ_r π_r (B⁻¹ g_r) u_rᵀ`.
    n: SmallMat,
}

impl Adaptation {
    fn new(q: usize) -> Self {
        Self {
            q,
            centre: [0.0; MQ],
            n: SmallMat::zeros(q),
        }
    }

    fn add(&mut self, chol: &SmallChol, weight: f64, u: &[f64], g: &[f64]) {
        let v = chol.solve_lower(g);
        for a in 0..self.q {
            self.centre[a] += weight * g[a];
            for b in 0..self.q {
                self.n.add(a, b, weight * v[a] * u[b]);
            }
        }
    }

    fn gamma(&self, chol: &SmallChol) -> SmallMat {
        let q = self.q;
        let mut inv = SmallMat::zeros(q);
        for j in 0..q {
            let mut unit = [0.0; MQ];
            unit[j] = 1.0;
            let col = chol.solve_lower(&unit);
            for i in 0..q {
                inv.set(i, j, col[i]);
            }
        }
        // W = (B⁻¹ + N) B, then T = strict upper part of W plus half its diagonal.
        let mut t = SmallMat::zeros(q);
        for i in 0..q {
            for j in i..q {
                let w: f64 = (j..q)
                    .map(|k| (inv.get(i, k) + self.n.get(i, k)) * chol.l.get(k, j))
                    .sum();
                t.set(i, j, if i == j { 0.5 * w } else { w });
            }
        }
        // Γ = −B⁻ᵀ sym(T) B⁻¹
        let mut y = SmallMat::zeros(q);
        for i in 0..q {
            for j in 0..q {
                let v: f64 = (0..q).map(|k| 0.5 * (t.get(i, k) + t.get(k, i)) * inv.get(k, j)).sum();
                y.set(i, j, v);
            }
        }
        let mut gamma = SmallMat::zeros(q);
        for j in 0..q {
            let col: Vector = std::array::from_fn(|i| if i < q { y.get(i, j) } else { 0.0 });
            let x = chol.solve_upper(&col);
            for i in 0..q {
                gamma.set(i, j, -x[i]);
            }
        }
        gamma
    }
}

/// `vᵀ Γ v`.
fn quad_form(gamma: &SmallMat, v: &[f64]) -> f64 {
    let q = gamma.n;
    (0..q)
        .map(|a| v[a] * (0..q).map(|b| gamma.get(a, b) * v[b]).sum::<f64>())
        .sum()
}

fn mat_vec(m: &SmallMat, v: &[f64]) -> Vector {
    std::array::from_fn(|a| {
        if a < m.n {
            (0..m.n).map(|b| m.get(a, b) * v[b]).sum()
        } else {
            0.0
        }
    })
}

impl Problem {
    pub fn new(design: &DesignMatrices, outcomes: &[u8]) -> Result<Self, FitError> {
        if outcomes.len() != design.n_rows() {
            return Err(FitError::DimensionMismatch);
        }
        let p = design.n_fixed();
        let q2 = design.q2();
        let q3 = design.q3();
        let n = design.n_rows();
        let mut order = Vec::with_capacity(n);
        let mut subjects = Vec::with_capacity(design.level2_rows.len());
        let mut subject_id = Vec::with_capacity(design.level2_rows.len());
        let mut families = Vec::with_capacity(design.level3_members.len());
        let mut family_id = Vec::with_capacity(design.level3_members.len());
        for (j, members) in design.level3_members.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let s0 = subjects.len();
            for &k in members {
                let r0 = order.len();
                order.extend_from_slice(&design.level2_rows[k]);
                subjects.push(r0..order.len());
                subject_id.push(k);
            }
            families.push(s0..subjects.len());
            family_id.push(j);
        }
        if order.len() != n {
            return Err(FitError::DimensionMismatch);
        }
        let mut x = Vec::with_capacity(n * p);
        let mut z2 = Vec::with_capacity(n * q2);
        let mut z3 = Vec::with_capacity(n * q3);
        let mut y = Vec::with_capacity(n);
        for &i in &order {
            x.extend_from_slice(design.x.row(i));
            if let Some(d) = &design.level2 {
                z2.extend_from_slice(d.z.row(i));
            }
            if let Some(d) = &design.level3 {
                z3.extend_from_slice(d.z.row(i));
            }
            y.push(f64::from(outcomes[i]));
        }
        Ok(Self {
            p,
            q2,
            q3,
            y,
            x,
            z2,
            z3,
            subjects,
            subject_id,
            families,
            family_id,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Sorted-order fixed design and outcome, for start values.
    pub fn x_rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.x.chunks_exact(self.p.max(1)).zip(self.y.iter().copied())
    }

    fn precompute(&self, beta: &[f64], f: &Factors) -> Pre {
        let n = self.n_rows();
        let off = self.x.chunks_exact(self.p).map(|r| dot(r, beta)).collect();
        let transform = |z: &[f64], q: usize, l: &SmallMat| {
            let mut a = Vec::with_capacity(n * q);
            for zr in z.chunks_exact(q.max(1)).take(if q == 0 { 0 } else { n }) {
                // a_b = Σ_a L_ab z_a
                for b in 0..q {
                    a.push((b..q).map(|c| l.get(c, b) * zr[c]).sum());
                }
            }
            a
        };
        Pre {
            off,
            a2: transform(&self.z2, self.q2, &f.l2),
            a3: transform(&self.z3, self.q3, &f.l3),
        }
    }

    /// Conditional posterior mode of one subject's standardized effects given
    /// per-row offsets `base` (indexed from `base_start`). Returns the Cholesky
    /// factor of the negative Hessian at the mode.
    fn subject_mode(
        &self,
        rows: Range<usize>,
        base: &[f64],
        base_start: usize,
        pre: &Pre,
        e: &mut Vector,
    ) -> Result<(SmallChol, f64), FitError> {
        let q = self.q2;
        let eval = |e: &Vector| {
            let mut h = -0.5 * norm_sq(&e[..q]);
            let mut g = [0.0; MQ];
            let mut a_mat = SmallMat::identity(q);
            for i in rows.clone() {
                let a = &pre.a2[i * q..(i + 1) * q];
                let eta = base[i - base_start] + dot(a, &e[..q]);
                let (l, p) = bernoulli(self.y[i], eta);
                h += l;
                let r = self.y[i] - p;
                for b in 0..q {
                    g[b] += r * a[b];
                }
                a_mat.rank1_lower(p * (1.0 - p), a);
            }
            for b in 0..q {
                g[b] -= e[b];
            }
            (h, g, a_mat)
        };
        if q == 0 {
            let unit = SmallMat::identity(0).cholesky().ok_or(FitError::ModeSearchFailure)?;
            return Ok((unit, 0.0));
        }
        let (mut h, mut g, mut a) = eval(e);
        for _ in 0..MODE_MAX_ITER {
            let chol = a.cholesky().ok_or(FitError::ModeSearchFailure)?;
            let step = chol.solve(&g);
            if step[..q].iter().all(|s| s.abs() < MODE_TOL) {
                return Ok((chol, h));
            }
            let mut t = 1.0;
            loop {
                let mut trial = *e;
                for b in 0..q {
                    trial[b] += t * step[b];
                }
                let (h2, g2, a2) = eval(&trial);
                if h2 >= h - 1e-10 * (1.0 + h.abs()) {
                    *e = trial;
                    h = h2;
                    g = g2;
                    a = a2;
                    break;
                }
                t *= 0.5;
                if t < 1e-10 {
                    return Err(FitError::ModeSearchFailure);
                }
            }
        }
        Err(FitError::ModeSearchFailure)
    }

    /// Joint posterior mode over a level-3 cluster and all of its level-2
    /// clusters by block-eliminated Newton steps.
    fn joint_mode(&self, fam: usize, pre: &Pre) -> Result<JointMode, FitError> {
        let (q2, q3) = (self.q2, self.q3);
        let subs = self.families[fam].clone();
        let ns = subs.len();

        struct Pass {
            h: f64,
            g3: Vector,
            a33: SmallMat,
            g2: Vec<Vector>,
            akk: Vec<SmallMat>,
            /// A_k3, q2 × q3 with stride MQ.
            ak3: Vec<[f64; MQ * MQ]>,
        }
        let eval = |e3: &Vector, e2: &[Vector]| {
            let mut pass = Pass {
                h: -0.5 * norm_sq(&e3[..q3]),
                g3: [0.0; MQ],
                a33: SmallMat::identity(q3),
                g2: vec![[0.0; MQ]; ns],
                akk: vec![SmallMat::identity(q2); ns],
                ak3: vec![[0.0; MQ * MQ]; ns],
            };
            for (s, k) in subs.clone().enumerate() {
                pass.h -= 0.5 * norm_sq(&e2[s][..q2]);
                for i in self.subjects[k].clone() {
                    let a2 = &pre.a2[i * q2..(i + 1) * q2];
                    let a3 = &pre.a3[i * q3..(i + 1) * q3];
                    let eta = pre.off[i] + dot(a3, &e3[..q3]) + dot(a2, &e2[s][..q2]);
                    let (l, p) = bernoulli(self.y[i], eta);
                    pass.h += l;
                    let r = self.y[i] - p;
                    let w = p * (1.0 - p);
                    for b in 0..q3 {
                        pass.g3[b] += r * a3[b];
                    }
                    for b in 0..q2 {
                        pass.g2[s][b] += r * a2[b];
                        for c in 0..q3 {
                            pass.ak3[s][b * MQ + c] += w * a2[b] * a3[c];
                        }
                    }
                    pass.a33.rank1_lower(w, a3);
                    pass.akk[s].rank1_lower(w, a2);
                }
                for b in 0..q2 {
                    pass.g2[s][b] -= e2[s][b];
                }
            }
            for b in 0..q3 {
                pass.g3[b] -= e3[b];
            }
            pass
        };

        let mut e3 = [0.0; MQ];
        let mut e2 = vec![[0.0; MQ]; ns];
        let mut pass = eval(&e3, &e2);
        for _ in 0..MODE_MAX_ITER {
            // Block elimination of the level-2 effects.
            let mut schur = pass.a33;
            let mut rhs = pass.g3;
            let mut chols = Vec::with_capacity(ns);
            let mut shift = vec![[0.0; MQ * MQ]; ns];
            let mut u = vec![[0.0; MQ]; ns];
            for s in 0..ns {
                let c = pass.akk[s].cholesky().ok_or(FitError::ModeSearchFailure)?;
                u[s] = c.solve(&pass.g2[s]);
                for col in 0..q3 {
                    let v: Vector = std::array::from_fn(|b| if b < q2 { pass.ak3[s][b * MQ + col] } else { 0.0 });
                    let d = c.solve(&v);
                    for b in 0..q2 {
                        shift[s][b * MQ + col] = d[b];
                    }
                }
                // S -= A_3k D_k ; rhs -= A_3k u_k
                for r in 0..q3 {
                    for col in 0..=r {
                        let mut acc = 0.0;
                        for b in 0..q2 {
                            acc += pass.ak3[s][b * MQ + r] * shift[s][b * MQ + col];
                        }
                        schur.add(r, col, -acc);
                    }
                    rhs[r] -= (0..q2).map(|b| pass.ak3[s][b * MQ + r] * u[s][b]).sum::<f64>();
                }
                chols.push(c);
            }
            let schur_chol = schur.cholesky().ok_or(FitError::ModeSearchFailure)?;
            let d3 = schur_chol.solve(&rhs);
            let d2: Vec<Vector> = (0..ns)
                .map(|s| {
                    std::array::from_fn(|b| {
                        if b < q2 {
                            u[s][b] - (0..q3).map(|c| shift[s][b * MQ + c] * d3[c]).sum::<f64>()
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let converged = d3[..q3]
                .iter()
                .chain(d2.iter().flat_map(|d| d[..q2].iter()))
                .all(|v| v.abs() < MODE_TOL);
            if converged {
                return Ok(JointMode {
                    e3,
                    e2,
                    schur: schur_chol,
                    shift,
                    blocks: chols,
                });
            }
            let mut t = 1.0;
            loop {
                let mut t3 = e3;
                for b in 0..q3 {
                    t3[b] += t * d3[b];
                }
                let t2: Vec<Vector> = e2
                    .iter()
                    .zip(&d2)
                    .map(|(e, d)| std::array::from_fn(|b| e[b] + t * d[b]))
                    .collect();
                let next = eval(&t3, &t2);
                if next.h >= pass.h - 1e-10 * (1.0 + pass.h.abs()) {
                    e3 = t3;
                    e2 = t2;
                    pass = next;
                    break;
                }
                t *= 0.5;
                if t < 1e-10 {
                    return Err(FitError::ModeSearchFailure);
                }
            }
        }
        Err(FitError::ModeSearchFailure)
    }

    /// Log-likelihood contribution of one level-3 cluster, and optionally its
    /// score laid out as `[β | L₂ (q2×q2 row-major) | L₃ (q3×q3 row-major)]`.
    fn family(&self, fam: usize, pre: &Pre, rules: &Rules, want_grad: bool) -> Result<(f64, Vec<f64>), FitError> {
        let (p, q2, q3) = (self.p, self.q2, self.q3);
        let subs = self.families[fam].clone();
        let rows = self.subjects[subs.start].start..self.subjects[subs.end - 1].end;
        let row0 = rows.start;
        let gdim = p + q2 * q2 + q3 * q3;

        let joint = if q3 > 0 { Some(self.joint_mode(fam, pre)?) } else { None };
        let (e3_hat, outer_logdet) = match &joint {
            Some(j) => (j.e3, -j.schur.half_logdet()),
            None => ([0.0; MQ], 0.0),
        };

        let n_outer = rules.outer.len();
        let n_inner = rules.inner.len();
        let mut outer_log = Vec::with_capacity(n_outer);
        let mut outer_grad = if want_grad {
            vec![0.0; n_outer * gdim]
        } else {
            Vec::new()
        };
        let mut base = vec![0.0; rows.len()];
        let mut inner_log = vec![0.0; n_inner];
        let mut resid = Vec::new();
        let mut mode_rows: Vec<(f64, f64, f64)> = Vec::new();
        // Total derivative of each outer log-integrand with respect to e₃.
        let mut outer_de3 = if want_grad {
            vec![[0.0; MQ]; n_outer]
        } else {
            Vec::new()
        };
        let mut outer_nodes: Vec<Vector> = Vec::with_capacity(if want_grad { n_outer } else { 0 });

        for m in 0..n_outer {
            let t = rules.outer.point(m);
            let e3: Vector = match &joint {
                Some(j) => {
                    let d = j.schur.solve_upper(t);
                    std::array::from_fn(|b| e3_hat[b] + d[b])
                }
                None => [0.0; MQ],
            };
            for i in rows.clone() {
                base[i - row0] = pre.off[i] + dot(&pre.a3[i * q3..(i + 1) * q3], &e3[..q3]);
            }
            let mut fm = rules.outer.lw[m] - 0.5 * norm_sq(&e3[..q3]);
            let gm_start = m * gdim;

            for (s, k) in subs.clone().enumerate() {
                let srows = self.subjects[k].clone();
                let mut e2: Vector = match &joint {
                    Some(j) => std::array::from_fn(|b| {
                        if b < q2 {
                            j.e2[s][b]
                                - (0..q3)
                                    .map(|c| j.shift[s][b * MQ + c] * (e3[c] - e3_hat[c]))
                                    .sum::<f64>()
                        } else {
                            0.0
                        }
                    }),
                    None => [0.0; MQ],
                };
                let (chol, _) = self.subject_mode(srows.clone(), &base, row0, pre, &mut e2)?;
                let inner_logdet = -chol.half_logdet();
                let nr = srows.len();
                if want_grad {
                    resid.clear();
                    resid.resize(nr * n_inner, 0.0);
                }
                let mut nodes = Vec::with_capacity(n_inner);
                for r in 0..n_inner {
                    let d = chol.solve_upper(rules.inner.point(r));
                    let er: Vector = std::array::from_fn(|b| e2[b] + d[b]);
                    let mut ll = rules.inner.lw[r] - 0.5 * norm_sq(&er[..q2]);
                    for (ii, i) in srows.clone().enumerate() {
                        let eta = base[i - row0] + dot(&pre.a2[i * q2..(i + 1) * q2], &er[..q2]);
                        let (l, pr) = bernoulli(self.y[i], eta);
                        ll += l;
                        if want_grad {
                            resid[ii * n_inner + r] = self.y[i] - pr;
                        }
                    }
                    inner_log[r] = ll;
                    nodes.push(er);
                }
                let lse = log_sum_exp(&inner_log);
                fm += inner_logdet + lse;

                if want_grad {
                    let weights: Vec<f64> = inner_log.iter().map(|l| (l - lse).exp()).collect();
                    let gm = &mut outer_grad[gm_start..gm_start + gdim];
                    let de3 = &mut outer_de3[m];
                    let mut adapt = Adaptation::new(q2);
                    for r in 0..n_inner {
                        let mut g: Vector = std::array::from_fn(|b| if b < q2 { -nodes[r][b] } else { 0.0 });
                        for (ii, i) in srows.clone().enumerate() {
                            let res = resid[ii * n_inner + r];
                            for b in 0..q2 {
                                g[b] += res * pre.a2[i * q2 + b];
                            }
                        }
                        let u: Vector = std::array::from_fn(|b| nodes[r][b] - e2[b]);
                        adapt.add(&chol, weights[r], &u, &g);
                    }
                    let gamma = adapt.gamma(&chol);

                    // Curvature of each row at the mode, and the adjoint of the mode.
                    mode_rows.clear();
                    let mut rhs = adapt.centre;
                    for i in srows.clone() {
                        let a2 = &pre.a2[i * q2..(i + 1) * q2];
                        let (_, pr) = bernoulli(self.y[i], base[i - row0] + dot(a2, &e2[..q2]));
                        let w = pr * (1.0 - pr);
                        let c = w * (1.0 - 2.0 * pr) * quad_form(&gamma, a2);
                        for b in 0..q2 {
                            rhs[b] += c * a2[b];
                        }
                        mode_rows.push((pr, w, c));
                    }
                    let lambda = if q2 > 0 { chol.solve(&rhs) } else { [0.0; MQ] };

                    for (ii, i) in srows.clone().enumerate() {
                        let res = &resid[ii * n_inner..(ii + 1) * n_inner];
                        let r0: f64 = dot(&weights, res);
                        let a2 = &pre.a2[i * q2..(i + 1) * q2];
                        let a3 = &pre.a3[i * q3..(i + 1) * q3];
                        let (pr, w, c) = mode_rows[ii];
                        // Multiplies ∂η/∂θ at the mode; `alpha` multiplies ∂a₂/∂θ.
                        let coef = c - w * dot(&lambda[..q2], a2);
                        let ga2 = mat_vec(&gamma, a2);
                        let alpha: Vector = std::array::from_fn(|b| (self.y[i] - pr) * lambda[b] + 2.0 * w * ga2[b]);
                        let x = &self.x[i * p..(i + 1) * p];
                        for col in 0..p {
                            gm[col] += x[col] * (r0 + coef);
                        }
                        if q2 > 0 {
                            let z = &self.z2[i * q2..(i + 1) * q2];
                            for b in 0..q2 {
                                let rb: f64 = (0..n_inner).map(|r| weights[r] * res[r] * nodes[r][b]).sum();
                                let total = rb + coef * e2[b] + alpha[b];
                                for a in b..q2 {
                                    gm[p + a * q2 + b] += z[a] * total;
                                }
                            }
                        }
                        if q3 > 0 {
                            let z = &self.z3[i * q3..(i + 1) * q3];
                            for b in 0..q3 {
                                de3[b] += (r0 + coef) * a3[b];
                                for a in b..q3 {
                                    gm[p + q2 * q2 + a * q3 + b] += z[a] * (r0 + coef) * e3[b];
                                }
                            }
                        }
                    }
                }
            }
            if want_grad {
                for b in 0..q3 {
                    outer_de3[m][b] -= e3[b];
                }
                outer_nodes.push(e3);
            }
            outer_log.push(fm);
        }

        let lse = log_sum_exp(&outer_log);
        let ll = outer_logdet + lse;
        let mut grad = Vec::new();
        if want_grad {
            grad = vec![0.0; gdim];
            let mut adapt = Adaptation::new(q3);
            for m in 0..n_outer {
                let w = (outer_log[m] - lse).exp();
                for (g, v) in grad.iter_mut().zip(&outer_grad[m * gdim..(m + 1) * gdim]) {
                    *g += w * v;
                }
                if let Some(j) = &joint {
                    let u: Vector = std::array::from_fn(|b| outer_nodes[m][b] - e3_hat[b]);
                    adapt.add(&j.schur, w, &u, &outer_de3[m]);
                }
            }
            if let Some(j) = &joint {
                self.outer_adaptation(fam, pre, j, &adapt, &mut grad);
            }
        }
        Ok((ll, grad))
    }

    /// Adds the dependence of a level-3 cluster's log-likelihood on the joint
    /// mode and the Schur complement to `grad`.
    fn outer_adaptation(&self, fam: usize, pre: &Pre, j: &JointMode, adapt: &Adaptation, grad: &mut [f64]) {
        let (p, q2, q3) = (self.p, self.q2, self.q3);
        let gamma = adapt.gamma(&j.schur);
        let subs = self.families[fam].clone();
        // Per row: p, w, s = w' cᵀΓc and Γc, where c = a₃ − Dᵀa₂.
        let mut rows = Vec::new();
        let mut r3 = adapt.centre;
        let mut r2 = vec![[0.0; MQ]; subs.len()];
        for (s, k) in subs.clone().enumerate() {
            let d = &j.shift[s];
            for i in self.subjects[k].clone() {
                let a2 = &pre.a2[i * q2..(i + 1) * q2];
                let a3 = &pre.a3[i * q3..(i + 1) * q3];
                let eta = pre.off[i] + dot(a3, &j.e3[..q3]) + dot(a2, &j.e2[s][..q2]);
                let (_, pr) = bernoulli(self.y[i], eta);
                let w = pr * (1.0 - pr);
                let c: Vector = std::array::from_fn(|col| {
                    if col < q3 {
                        a3[col] - (0..q2).map(|b| d[b * MQ + col] * a2[b]).sum::<f64>()
                    } else {
                        0.0
                    }
                });
                let sv = w * (1.0 - 2.0 * pr) * quad_form(&gamma, &c);
                for b in 0..q3 {
                    r3[b] += sv * a3[b];
                }
                for b in 0..q2 {
                    r2[s][b] += sv * a2[b];
                }
                rows.push((pr, w, sv, mat_vec(&gamma, &c)));
            }
        }
        // Solve the joint system by block elimination.
        let mut rhs3 = r3;
        for (s, r) in r2.iter().enumerate() {
            for col in 0..q3 {
                rhs3[col] -= (0..q2).map(|b| j.shift[s][b * MQ + col] * r[b]).sum::<f64>();
            }
        }
        let l3 = j.schur.solve(&rhs3);
        let l2: Vec<Vector> = r2
            .iter()
            .enumerate()
            .map(|(s, r)| {
                let base = if q2 > 0 { j.blocks[s].solve(r) } else { [0.0; MQ] };
                std::array::from_fn(|b| {
                    if b < q2 {
                        base[b] - (0..q3).map(|col| j.shift[s][b * MQ + col] * l3[col]).sum::<f64>()
                    } else {
                        0.0
                    }
                })
            })
            .collect();

        let mut row = 0;
        for (s, k) in subs.enumerate() {
            let d = &j.shift[s];
            for i in self.subjects[k].clone() {
                let (pr, w, sv, gc) = rows[row];
                row += 1;
                let a2 = &pre.a2[i * q2..(i + 1) * q2];
                let a3 = &pre.a3[i * q3..(i + 1) * q3];
                let coef = sv - w * (dot(&l3[..q3], a3) + dot(&l2[s][..q2], a2));
                let res = self.y[i] - pr;
                let x = &self.x[i * p..(i + 1) * p];
                for col in 0..p {
                    grad[col] += coef * x[col];
                }
                let z2 = &self.z2[i * q2..(i + 1) * q2];
                for b in 0..q2 {
                    let dg: f64 = (0..q3).map(|col| d[b * MQ + col] * gc[col]).sum();
                    let total = coef * j.e2[s][b] + res * l2[s][b] - 2.0 * w * dg;
                    for a in b..q2 {
                        grad[p + a * q2 + b] += z2[a] * total;
                    }
                }
                let z3 = &self.z3[i * q3..(i + 1) * q3];
                for b in 0..q3 {
                    let total = coef * j.e3[b] + res * l3[b] + 2.0 * w * gc[b];
                    for a in b..q3 {
                        grad[p + q2 * q2 + a * q3 + b] += z3[a] * total;
                    }
                }
            }
        }
    }

    /// Marginal log-likelihood and, when requested, its score.
    pub fn evaluate(
        &self,
        beta: &[f64],
        factors: &Factors,
        rules: &Rules,
        want_grad: bool,
    ) -> Result<(f64, Option<Score>), FitError> {
        if beta.len() != self.p {
            return Err(FitError::DimensionMismatch);
        }
        let pre = self.precompute(beta, factors);
        let (p, q2, q3) = (self.p, self.q2, self.q3);
        let mut total = 0.0;
        let mut grad = vec![0.0; p + q2 * q2 + q3 * q3];
        for fam in 0..self.families.len() {
            let (ll, g) = self.family(fam, &pre, rules, want_grad)?;
            total += ll;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !total.is_finite() {
            return Err(FitError::NonFiniteLikelihood);
        }
        let score = want_grad.then(|| {
            let mut l2 = SmallMat::zeros(q2);
            for a in 0..q2 {
                for b in 0..=a {
                    l2.set(a, b, grad[p + a * q2 + b]);
                }
            }
            let mut l3 = SmallMat::zeros(q3);
            for a in 0..q3 {
                for b in 0..=a {
                    l3.set(a, b, grad[p + q2 * q2 + a * q3 + b]);
                }
            }
            Score {
                beta: grad[..p].to_vec(),
                l2,
                l3,
            }
        });
        Ok((total, score))
    }

    /// Posterior modes of the standardized effects: joint per level-3
    /// cluster, or per level-2 cluster when there is no level-3 effect.
    pub fn modes(&self, beta: &[f64], factors: &Factors) -> Result<Modes, FitError> {
        let pre = self.precompute(beta, factors);
        let n3 = self.family_id.iter().copied().max().map_or(0, |m| m + 1);
        let n2 = self.subject_id.iter().copied().max().map_or(0, |m| m + 1);
        let mut out = Modes {
            level3: vec![[0.0; MQ]; n3],
            level2: vec![[0.0; MQ]; n2],
        };
        for fam in 0..self.families.len() {
            if self.q3 > 0 {
                let j = self.joint_mode(fam, &pre)?;
                out.level3[self.family_id[fam]] = j.e3;
                for (s, k) in self.families[fam].clone().enumerate() {
                    out.level2[self.subject_id[k]] = j.e2[s];
                }
            } else {
                for k in self.families[fam].clone() {
                    let rows = self.subjects[k].clone();
                    let mut e = [0.0; MQ];
                    self.subject_mode(rows.clone(), &pre.off[rows.clone()], rows.start, &pre, &mut e)?;
                    out.level2[self.subject_id[k]] = e;
                }
            }
        }
        Ok(out)
    }
}
