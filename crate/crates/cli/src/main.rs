//! `mlmgof` command-line front end.
//!
//! Exit codes: 0 success, 1 failed test or fit, 2 usage error, 3 data error.
//! Every error exit writes a single `error:` line to standard error.

mod args;
mod report;

use std::fs::File;
use std::io::{self, Write};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use mlmgof::simlab::{Design, FittedLevels, RunOptions};
use mlmgof::{
    fit, run_scenario, run_test, scenario_catalog, ClusteredDataset, FitError, FitOptions, GofOptions, RawTable,
    Scenario, ScenarioSummary,
};

use args::{Cli, Command, FitArgs, GofArgs, ModelArgs, ModelSetup, SimulateArgs};

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Estimation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Estimation(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Estimation(m) => m,
        }
    }
}

fn from_fit(stage: &str, e: FitError) -> Failure {
    match e {
        FitError::Data(d) => Failure::Data(format!("{stage}: {d}")),
        other => Failure::Estimation(format!("{stage}: {other}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // First paragraph of clap's message, on one line.
            let text = e.to_string();
            let para: Vec<&str> = text
                .lines()
                .skip_while(|l| l.trim().is_empty())
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect();
            let msg = para.join(" ");
            let msg = msg.strip_prefix("error: ").unwrap_or(&msg);
            eprintln!("error: usage: {msg}");
            return ExitCode::from(2);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let _ = out.flush();
            eprintln!("error: {}", f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}

fn execute(cmd: Command, out: &mut impl Write) -> Result<u8, Failure> {
    match cmd {
        Command::Fit(a) => run_fit(&a, out),
        Command::Gof(a) => run_gof(&a, out),
        Command::Simulate(a) => run_simulate(&a, out),
        Command::Catalog => run_catalog(out),
    }
}

fn emit(out: &mut impl Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| Failure::Data(format!("writing output: {e}")))
}

fn load(m: &ModelArgs) -> Result<(ModelSetup, ClusteredDataset), Failure> {
    let setup = m.setup().map_err(Failure::Usage)?;
    let file = File::open(&m.data).map_err(|e| Failure::Data(format!("reading {}: {e}", m.data.display())))?;
    let raw = RawTable::from_csv(io::BufReader::new(file), &setup.layout)
        .map_err(|e| Failure::Data(format!("reading {}: {e}", m.data.display())))?;
    let ds =
        ClusteredDataset::validate(raw).map_err(|e| Failure::Data(format!("validating {}: {e}", m.data.display())))?;
    Ok((setup, ds))
}

fn fit_options(m: &ModelArgs) -> Result<FitOptions, Failure> {
    if !(m.tol > 0.0 && m.tol < 1.0) {
        return Err(Failure::Usage(format!("--tol must lie in (0, 1), got {}", m.tol)));
    }
    if m.max_iter == 0 {
        return Err(Failure::Usage("--max-iter must be at least 1".into()));
    }
    Ok(FitOptions {
        nodes: usize::from(m.nodes),
        max_iter: m.max_iter,
        tol: m.tol,
        ..FitOptions::default()
    })
}

fn run_fit(a: &FitArgs, out: &mut impl Write) -> Result<u8, Failure> {
    let opts = fit_options(&a.model)?;
    let (setup, ds) = load(&a.model)?;
    let fm = fit(&ds, &setup.spec, &opts).map_err(|e| from_fit("fit", e))?;
    let ids = (setup.layout.level2.as_str(), setup.layout.level3.as_deref());
    emit(out, &report::fit_report(&fm, &ds, ids))?;
    Ok(0)
}

fn run_gof(a: &GofArgs, out: &mut impl Write) -> Result<u8, Failure> {
    let fit = fit_options(&a.model)?;
    let (setup, ds) = load(&a.model)?;
    let result = run_test(&ds, &setup.spec, &GofOptions { rule: a.groups, fit });
    emit(out, &report::gof_report(&result))?;
    match result.failure() {
        None => Ok(0),
        Some(reason) => Err(Failure::Estimation(format!("gof: test failed: {reason}"))),
    }
}

fn select_scenarios(a: &SimulateArgs) -> Result<Vec<Scenario>, Failure> {
    let catalog = scenario_catalog();
    for id in &a.scenario {
        if !catalog.iter().any(|s| &s.id == id) {
            return Err(Failure::Usage(format!("unknown scenario `{id}`; see `mlmgof catalog`")));
        }
    }
    let everything = a.part.is_empty() && a.scenario.is_empty();
    Ok(catalog
        .into_iter()
        .filter(|s| everything || a.part.contains(&s.part) || a.scenario.contains(&s.id))
        .collect())
}

fn run_simulate(a: &SimulateArgs, out: &mut impl Write) -> Result<u8, Failure> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::Usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let reps = usize::try_from(a.reps).map_err(|_| Failure::Usage("--reps is too large".into()))?;
    let scenarios = select_scenarios(a)?;
    let opts = RunOptions {
        alpha: a.alpha,
        fit: FitOptions {
            nodes: usize::from(a.nodes),
            ..FitOptions::default()
        },
        jobs: a.jobs.map(usize::from),
    };
    let mut csv = String::new();
    csv.push_str(ScenarioSummary::CSV_HEADER);
    csv.push('\n');
    for sc in &scenarios {
        let s =
            run_scenario(sc, reps, a.seed, &opts).map_err(|e| Failure::Usage(format!("simulate {}: {e}", sc.id)))?;
        eprintln!(
            "{}: {} of {} valid replications rejected, {} failed",
            sc.id,
            s.rejections,
            s.valid(),
            s.failures
        );
        csv.push_str(&s.csv_record());
        csv.push('\n');
    }
    match &a.out {
        Some(path) => {
            std::fs::write(path, csv).map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))?
        }
        None => emit(out, &csv)?,
    }
    Ok(0)
}

fn design_text(d: &Design) -> String {
    match d {
        Design::Nested { j, k, n } => format!("J={j} K={k} n={n}"),
        Design::Sizes(sizes) => {
            let mut runs: Vec<(usize, usize)> = Vec::new();
            for &s in sizes {
                match runs.last_mut() {
                    Some((count, size)) if *size == s => *count += 1,
                    _ => runs.push((1, s)),
                }
            }
            runs.iter()
                .map(|(c, s)| format!("{c}x{s}"))
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

fn run_catalog(out: &mut impl Write) -> Result<u8, Failure> {
    let mut text = String::from("scenario_id,part,design,icc,misspec,param,rule,fitted_levels\n");
    for s in scenario_catalog() {
        let levels = match s.fitted_levels {
            FittedLevels::Two => 2,
            FittedLevels::Three => 3,
        };
        text.push_str(&format!(
            "{},{},{},{:.2},{},{},{},{}\n",
            s.id,
            s.part,
            design_text(&s.design),
            s.icc,
            s.misspec.name(),
            s.misspec.param().map_or_else(String::new, |p| p.to_string()),
            s.gof_rule,
            levels
        ));
    }
    emit(out, &text)?;
    Ok(0)
}
