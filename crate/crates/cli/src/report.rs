//! Plain-text reports for `fit` and `gof`.

use std::fmt::Write;

use mlmgof::gof::chi2_survival;
use mlmgof::{ClusteredDataset, FittedModel, GofResult, Level};

const Z95: f64 = 1.959_963_984_540_054;

fn p_text(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

fn two_sided(z: f64) -> f64 {
    chi2_survival(z * z, 1)
}

struct Row {
    label: String,
    est: String,
    se: String,
    ci: String,
    p: String,
}

fn row(label: String, est: f64, se: Option<f64>, ci: Option<(f64, f64)>, p: Option<f64>) -> Row {
    Row {
        label,
        est: format!("{est:.3}"),
        se: se.map_or_else(|| "---".into(), |s| format!("{s:.3}")),
        ci: ci.map_or_else(|| "---".into(), |(lo, hi)| format!("({lo:.3}, {hi:.3})")),
        p: p.map_or_else(|| "---".into(), p_text),
    }
}

fn level_name(level: Level, ids: (&str, Option<&str>)) -> String {
    match level {
        Level::Level2 => ids.0.to_string(),
        Level::Level3 => ids.1.unwrap_or("level 3").to_string(),
    }
}

fn term(name: &str) -> &str {
    if name == "_cons" {
        "intercept"
    } else {
        name
    }
}

/// Coefficient table: odds ratios for the fixed effects (intercept last)
/// and standard deviations and correlations of the random effects.
pub fn fit_report(fm: &FittedModel, ds: &ClusteredDataset, ids: (&str, Option<&str>)) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Mixed-effects logistic regression");
    let _ = writeln!(out, "  Observations         {}", ds.n_rows());
    if let Some(id3) = ids.1 {
        let _ = writeln!(out, "  Level-3 clusters     {} ({id3})", ds.n_level3());
    }
    let _ = writeln!(out, "  Level-2 clusters     {} ({})", ds.n_level2(), ids.0);
    let _ = writeln!(out, "  Integration          adaptive Gauss-Hermite, {} nodes", fm.nodes);
    let _ = writeln!(out, "  Log likelihood       {:.4}", fm.loglik);
    let _ = writeln!(out, "  Iterations           {}", fm.iterations);
    let _ = writeln!(out);

    let ses = fm.std_errors();
    let mut rows = Vec::new();
    let order: Vec<usize> = (1..fm.beta.len()).chain(std::iter::once(0)).collect();
    for &i in &order {
        let b = fm.beta[i];
        let or = b.exp();
        let se = ses.as_ref().map(|s| s[i]);
        let label = if i == 0 {
            "Intercept (baseline odds)".to_string()
        } else {
            fm.fixed_names[i].clone()
        };
        rows.push(row(
            label,
            or,
            se.map(|s| or * s),
            se.map(|s| ((b - Z95 * s).exp(), (b + Z95 * s).exp())),
            se.map(|s| two_sided(b / s)),
        ));
    }
    let n_fixed = rows.len();

    let corrs = fm.random_correlations();
    let sds = fm.random_sds();
    for level in [Level::Level3, Level::Level2] {
        for sd in sds.iter().filter(|s| s.level == level) {
            let mut label = format!("{}: {}", level_name(sd.level, ids), term(&sd.name));
            let se = sd.log_se.filter(|_| !sd.at_boundary);
            if sd.at_boundary {
                label.push_str(" (boundary)");
            }
            let ci = se.map(|s| (sd.sd * (-Z95 * s).exp(), sd.sd * (Z95 * s).exp()));
            rows.push(row(label, sd.sd, se.map(|s| sd.sd * s), ci, None));
        }
        for rc in corrs.iter().filter(|c| c.level == level) {
            let label = format!(
                "{}: {}-{} corr.",
                level_name(rc.level, ids),
                term(&rc.names.0),
                term(&rc.names.1)
            );
            let se = rc.se.filter(|s| *s > 0.0 && rc.corr.abs() < 1.0);
            let ci = se.map(|s| {
                let z = rc.corr.atanh();
                let sz = s / (1.0 - rc.corr * rc.corr);
                ((z - Z95 * sz).tanh(), (z + Z95 * sz).tanh())
            });
            rows.push(row(label, rc.corr, se, ci, se.map(|s| two_sided(rc.corr / s))));
        }
    }

    let width = rows.iter().map(|r| r.label.len() + 2).max().unwrap_or(0).max(16);
    let line = |out: &mut String, r: &Row| {
        let _ = writeln!(
            out,
            "  {:<width$} {:>9} {:>9}  {:<20} {:>7}",
            r.label,
            r.est,
            r.se,
            r.ci,
            r.p,
            width = width - 2
        );
    };
    let _ = writeln!(
        out,
        "{:<width$} {:>9} {:>9}  {:<20} {:>7}",
        "Parameter", "Estimate", "SE", "95% CI", "p"
    );
    let _ = writeln!(out, "Fixed effects (OR)");
    for r in &rows[..n_fixed] {
        line(&mut out, r);
    }
    if rows.len() > n_fixed {
        let _ = writeln!(out, "Random effects (SD)");
        for r in &rows[n_fixed..] {
            line(&mut out, r);
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Intervals are Wald: exp(b +/- 1.96 SE) for odds ratios, on the log scale for SDs\nand on the Fisher-z scale for correlations. Odds-ratio SEs are OR * SE(b)."
    );
    out
}

/// The result record followed by the augmented-model footer.
pub fn gof_report(r: &GofResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", GofResult::CSV_HEADER);
    let _ = writeln!(out, "{}", r.csv_record());
    let _ = writeln!(out);
    let _ = writeln!(out, "Goodness of fit (augmented model)");
    let g = r.g_used.map_or_else(|| "---".into(), |g| g.to_string());
    let _ = writeln!(out, "  Groups used (G)      {g}");
    match (r.w, r.df, r.p_value) {
        (Some(w), Some(df), Some(p)) => {
            let _ = writeln!(out, "  {:<21}{w:.3}", format!("Wald χ² (df={df})"));
            let _ = writeln!(out, "  p                    {p:.4}");
            let _ = writeln!(out, "G={g}, df={df}, W={w:.3}, p={p:.4}");
        }
        _ => {
            let reason = r.failure().map_or_else(String::new, ToString::to_string);
            let _ = writeln!(out, "  Test failed          {reason}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlmgof::GroupRule;

    #[test]
    fn p_formatting() {
        assert_eq!(p_text(0.0004), "<0.001");
        assert_eq!(p_text(0.152), "0.152");
        assert!((two_sided(1.959_963_984_540_054) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn gof_footer() {
        let r = GofResult {
            g_used: Some(5),
            rule: GroupRule::DataDriven,
            w: Some(2.922),
            df: Some(4),
            p_value: Some(chi2_survival(2.922, 4)),
            status: mlmgof::GofStatus::Ok,
            gamma_hat: vec![],
            gamma_cov: None,
            baseline_loglik: Some(-10.0),
            augmented_loglik: Some(-8.5),
        };
        let text = gof_report(&r);
        assert!(text.starts_with(
            "G_used,rule,W,df,p_value,status,baseline_loglik,augmented_loglik\n5,data_driven,2.922000,4,0.570962,ok,"
        ));
        assert!(text.contains("Groups used (G)      5"));
        assert!(text.contains("Wald χ² (df=4)       2.922"));
        assert!(text.contains("G=5, df=4, W=2.922, p=0.5710"));
    }
}
