use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ClusteredDataset;
use crate::error::SimError;

use super::catalog::{Design, Misspec, Scenario};

/// Latent-scale variance giving intraclass correlation `icc` under the
/// logistic model: `σ² = icc · (π²/3) / (1 − icc)`.
pub fn icc_to_variance(icc: f64) -> Result<f64, SimError> {
    if !(icc > 0.0 && icc < 1.0) {
        return Err(SimError::BadIcc(icc));
    }
    Ok(icc * std::f64::consts::PI.powi(2) / 3.0 / (1.0 - icc))
}

/// Draws one dataset. Per family: `v`; per subject: `u`, `w`; per row:
/// `x1 ~ U(−3, 3)`, `x2 ~ Bernoulli(0.5)`, `y`. The draw order is fixed, so
/// the result depends only on the scenario and `seed`.
pub fn generate_dataset(sc: &Scenario, seed: u64) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout: Vec<Vec<usize>> = match &sc.design {
        Design::Nested { j, k, n } => vec![vec![*n; *k]; *j],
        Design::Sizes(sizes) => vec![sizes.clone()],
    };
    let n_rows = sc.design.n_rows();
    let (sd_v, sd_u, sd_w) = (sc.family_var.sqrt(), sc.subject_var.sqrt(), sc.slope_sd);
    let [b0, b1, b2] = sc.beta;

    let mut y = Vec::with_capacity(n_rows);
    let mut id3 = Vec::with_capacity(n_rows);
    let mut id2 = Vec::with_capacity(n_rows);
    let mut x1 = Vec::with_capacity(n_rows);
    let mut x2 = Vec::with_capacity(n_rows);
    let mut subject = 0;
    for (family, subjects) in layout.iter().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = sd_v * z;
        for &n in subjects {
            let zu: f64 = StandardNormal.sample(&mut rng);
            let zw: f64 = StandardNormal.sample(&mut rng);
            let (u, w) = (sd_u * zu, sd_w * zw);
            for _ in 0..n {
                let a = rng.random_range(-3.0..3.0);
                let b = f64::from(u8::from(rng.random_bool(0.5)));
                let mut eta = b0 + b1 * a + b2 * b + v + u + w * b;
                match sc.misspec {
                    Misspec::Quadratic(b3) => eta += b3 * a * a,
                    Misspec::Interaction(b3) => eta += b3 * a * b,
                    Misspec::None | Misspec::OmittedLevel(_) => {}
                }
                let p = 1.0 / (1.0 + (-eta).exp());
                y.push(u8::from(rng.random::<f64>() < p));
                id3.push(family);
                id2.push(subject);
                x1.push(a);
                x2.push(b);
            }
            subject += 1;
        }
    }
    let level3 = matches!(sc.design, Design::Nested { .. }).then_some(id3);
    ClusteredDataset::from_indexed(y, level3, id2, vec![("x1".into(), x1), ("x2".into(), x2)])
        .expect("simulated data are valid")
}
