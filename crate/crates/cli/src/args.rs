use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mlmgof::{CsvLayout, GroupRule, LevelEffects, ModelSpec};

#[derive(Debug, Parser)]
#[command(
    name = "mlmgof",
    version,
    about = "Mixed-effects logistic models and a grouping-based Wald goodness-of-fit test"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and print odds ratios and random-effect SDs.
    Fit(FitArgs),
    /// Fit a model and run the goodness-of-fit test.
    Gof(GofArgs),
    /// Run simulation scenarios and write one CSV row per scenario.
    Simulate(SimulateArgs),
    /// List the simulation scenarios.
    Catalog,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Binary outcome column.
    #[arg(long, default_value = "y")]
    pub outcome: String,
    /// Level-2 (subject) id column.
    #[arg(long, default_value = "id2")]
    pub id2: String,
    /// Level-3 (family) id column. Inferred from `--re` when omitted.
    #[arg(long)]
    pub id3: Option<String>,
    /// Comma-separated fixed-effect columns; the intercept is implicit.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Vec<String>,
    /// Random effects as `ID:TERMS[:unstructured]`, TERMS joined by `+`,
    /// e.g. `id2:intercept+x2`. Repeat once per level.
    #[arg(long = "re", value_name = "CLAUSE")]
    pub re: Vec<String>,
    /// Quadrature nodes per random-effect dimension.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u16).range(1..=50))]
    pub nodes: u16,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GofArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `auto` for G = min(10, smallest cluster size), or a fixed G in 2..=50.
    #[arg(long, default_value = "auto", value_parser = parse_groups)]
    pub groups: GroupRule,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Run every scenario of this part (1, 2 or 3).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub part: Vec<u8>,
    /// Run the scenario with this id; repeatable.
    #[arg(long)]
    pub scenario: Vec<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[arg(long, env = "MLMGOF_SEED")]
    pub seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores when omitted.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u16).range(1..=50))]
    pub nodes: u16,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

pub fn parse_groups(s: &str) -> Result<GroupRule, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(GroupRule::DataDriven);
    }
    match s.parse::<usize>() {
        Ok(g) if (2..=50).contains(&g) => Ok(GroupRule::Forced(g)),
        _ => Err(format!("expected `auto` or an integer in 2..=50, got `{s}`")),
    }
}

/// One parsed `--re` clause.
#[derive(Debug, Clone, PartialEq)]
pub struct ReClause {
    pub id: String,
    pub effects: LevelEffects,
}

pub fn parse_re(clause: &str) -> Result<ReClause, String> {
    let parts: Vec<&str> = clause.split(':').map(str::trim).collect();
    let bad = || format!("random-effects clause `{clause}` is not ID:TERMS[:unstructured]");
    let (id, terms, structure) = match parts.as_slice() {
        [id, terms] => (*id, *terms, None),
        [id, terms, s] => (*id, *terms, Some(*s)),
        _ => return Err(bad()),
    };
    if id.is_empty() || terms.is_empty() {
        return Err(bad());
    }
    let mut effects = LevelEffects::default();
    for term in terms.split('+').map(str::trim) {
        match term {
            "" => return Err(bad()),
            "intercept" | "_cons" if !effects.intercept => effects.intercept = true,
            "intercept" | "_cons" => return Err(format!("`{clause}` lists the intercept twice")),
            col => effects = effects.with_slope(col),
        }
    }
    match structure {
        None | Some("independent") => {}
        Some("unstructured") => effects = effects.unstructured(),
        Some(other) => return Err(format!("unknown covariance structure `{other}` in `{clause}`")),
    }
    Ok(ReClause {
        id: id.to_string(),
        effects,
    })
}

/// Model specification plus the CSV columns it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSetup {
    pub spec: ModelSpec,
    pub layout: CsvLayout,
}

impl ModelArgs {
    pub fn setup(&self) -> Result<ModelSetup, String> {
        let clauses = self.re.iter().map(|c| parse_re(c)).collect::<Result<Vec<_>, _>>()?;
        let mut id3 = self.id3.clone();
        let mut spec = ModelSpec::new(self.fixed.iter().map(|s| s.trim().to_string()));
        let mut seen2 = false;
        for c in clauses {
            if c.id == self.id2 {
                if seen2 {
                    return Err(format!("more than one --re clause for `{}`", c.id));
                }
                seen2 = true;
                spec = spec.level2(c.effects);
                continue;
            }
            match &id3 {
                Some(name) if *name != c.id => {
                    return Err(format!(
                        "--re names `{}`, which is neither the level-2 id `{}` nor the level-3 id `{name}`",
                        c.id, self.id2
                    ))
                }
                _ if spec.random.level3.is_some() => return Err(format!("more than one --re clause for `{}`", c.id)),
                _ => {
                    id3 = Some(c.id.clone());
                    spec = spec.level3(c.effects);
                }
            }
        }
        let mut covariates: Vec<String> = spec.fixed.clone();
        for eff in [&spec.random.level2, &spec.random.level3].into_iter().flatten() {
            for s in &eff.slopes {
                if !covariates.contains(s) {
                    covariates.push(s.clone());
                }
            }
        }
        Ok(ModelSetup {
            layout: CsvLayout {
                outcome: self.outcome.clone(),
                level2: self.id2.clone(),
                level3: id3,
                covariates: Some(covariates),
            },
            spec,
        })
    }
}
