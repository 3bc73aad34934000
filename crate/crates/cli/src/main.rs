//! `gbl`: command-line front end for the generalized Buckley-Leverett lab.
//!
//! Settings resolve as flag > config file > environment (`GBL_SEED`,
//! `GBL_OUT`) > built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gbl_core::harness::{self, Budget, CaseReport, DEFAULT_SEED};
use gbl_core::{CaseConfig, Form, Method};
use log::info;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "gbl", version, about = "Exact, WENO5 and cPINN solvers for the generalized Buckley-Leverett problem")]
struct Cli {
    /// TOML config file; a `[case]` table overrides registry fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; each invocation writes a fresh run directory inside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (consecutive seeds are used for multi-seed budgets).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the exact Riemann solution.
    Exact { case: String },
    /// Run the WENO5 reference solver (conservative cases only).
    Weno { case: String },
    /// Train the cPINN.
    Train {
        case: String,
        #[arg(long, value_enum)]
        budget: Option<BudgetArg>,
    },
    /// Run several methods and compare them against the exact solution.
    Eval {
        case: String,
        /// Comma-separated list of exact, weno5, cpinn.
        #[arg(long, value_delimiter = ',', default_value = "exact,weno5")]
        methods: Vec<String>,
        #[arg(long, value_enum)]
        budget: Option<BudgetArg>,
    },
    /// Run every registry case and print the comparison table.
    Tables {
        #[arg(long, value_enum)]
        budget: Option<BudgetArg>,
    },
    /// List the registry.
    ListCases,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BudgetArg {
    Desk,
    Full,
}

impl From<BudgetArg> for Budget {
    fn from(b: BudgetArg) -> Self {
        match b {
            BudgetArg::Desk => Budget::Desk,
            BudgetArg::Full => Budget::Full,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    budget: Option<BudgetArg>,
    /// Partial `CaseConfig`, deep-merged onto the registry entry.
    case: Option<toml::Table>,
}

struct Settings {
    seed: u64,
    /// Seed came from the command line and beats any `[case].seeds`.
    seed_flag: bool,
    out: PathBuf,
    budget: Budget,
    overrides: Option<toml::Table>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("GBL_SEED") {
        Ok(s) if !s.trim().is_empty() => Ok(Some(
            s.trim().parse().with_context(|| format!("GBL_SEED={s:?} is not an integer"))?,
        )),
        _ => Ok(None),
    }
}

fn resolve(cli: &Cli, budget_flag: Option<BudgetArg>) -> Result<Settings> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FileConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let seed = match (cli.seed, file.seed) {
        (Some(s), _) | (None, Some(s)) => s,
        _ => env_seed()?.unwrap_or(DEFAULT_SEED),
    };
    let out = cli
        .out
        .clone()
        .or(file.out)
        .or_else(|| std::env::var_os("GBL_OUT").filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let budget = budget_flag.or(file.budget).map(Budget::from).unwrap_or(Budget::Desk);
    Ok(Settings {
        seed,
        seed_flag: cli.seed.is_some(),
        out,
        budget,
        overrides: file.case,
    })
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn effective_case(name: &str, s: &Settings) -> Result<CaseConfig> {
    let mut case = harness::find_case(name)?.with_budget(s.budget, s.seed);
    if let Some(over) = &s.overrides {
        if let Some(n) = over.get("name").and_then(|v| v.as_str()) {
            if n != name {
                bail!("config [case] is for {n:?} but the command names {name:?}");
            }
        }
        let mut table = toml::Table::try_from(&case).context("serializing case config")?;
        merge(&mut table, over);
        case = toml::Value::Table(table)
            .try_into()
            .context("invalid [case] override in config file")?;
    }
    if s.seed_flag {
        let n = case.seeds.len().max(1) as u64;
        case.seeds = (0..n).map(|k| s.seed + k).collect();
    }
    Ok(case)
}

fn prepare_run(s: &Settings, case: Option<&CaseConfig>) -> Result<PathBuf> {
    let dir = harness::new_run_dir(&s.out).with_context(|| format!("creating run directory under {}", s.out.display()))?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        budget: Budget,
        #[serde(skip_serializing_if = "Option::is_none")]
        case: Option<&'a CaseConfig>,
    }
    let text = toml::to_string_pretty(&Manifest {
        seed: s.seed,
        budget: s.budget,
        case,
    })?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(dir)
}

fn print_report(case: &CaseConfig, budget: Budget, report: &CaseReport, dir: &Path) -> Result<()> {
    for row in &report.rows {
        let verdict = match harness::expectation(case, row.method, budget) {
            Some(e) if e.holds(row.l2) => format!("pass ({})", e.describe()),
            Some(e) => format!("FAIL ({})", e.describe()),
            None => "-".to_string(),
        };
        println!(
            "{:<11} {:<7} {:<17} rescaled={:<5} l2={:.3e} seeds={} {verdict}",
            row.case,
            row.method.as_str(),
            row.form.as_str(),
            row.rescaled,
            row.l2,
            row.seeds
        );
    }
    println!("artifacts: {}", dir.display());
    if !report.failures.is_empty() {
        for (m, e) in &report.failures {
            eprintln!("{}: {} failed: {e}", case.name, m.as_str());
        }
        bail!("{} method(s) failed", report.failures.len());
    }
    Ok(())
}

fn run_methods(cli: &Cli, name: &str, methods: &[Method], budget: Option<BudgetArg>) -> Result<()> {
    let s = resolve(cli, budget)?;
    let case = effective_case(name, &s)?;
    if case.form == Form::NonConservative && methods.contains(&Method::Weno5) {
        bail!("{name} is in non-conservative form; WENO5 only runs on conservative cases");
    }
    let dir = prepare_run(&s, Some(&case))?;
    info!("{name}: writing to {}", dir.display());
    let report = harness::run_case(&case, methods, Some(&dir))?;
    print_report(&case, s.budget, &report, &dir)
}

fn list_cases() {
    println!("{:<11} {:<17} {:<22} {:<8}", "case", "form", "rescale (d1, d2, sd)", "domain");
    for c in harness::case_registry() {
        let rescale = match c.rescale {
            Some(r) if r.enabled => format!("{:e}, {:e}, {:?}", r.delta1, r.delta2, r.subdomain),
            _ => "-".to_string(),
        };
        println!(
            "{:<11} {:<17} {:<22} [{}, {}] x [0, {}]",
            c.name,
            c.form.as_str(),
            rescale,
            c.domain.0,
            c.domain.1,
            c.domain.2
        );
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match &cli.command {
        Command::Exact { case } => run_methods(&cli, case, &[Method::Exact], None),
        Command::Weno { case } => run_methods(&cli, case, &[Method::Weno5], None),
        Command::Train { case, budget } => run_methods(&cli, case, &[Method::Cpinn], *budget),
        Command::Eval { case, methods, budget } => {
            let ms = methods
                .iter()
                .map(|m| Method::parse(m.trim()).with_context(|| format!("unknown method {m:?}")))
                .collect::<Result<Vec<_>>>()?;
            if ms.is_empty() {
                bail!("no methods given");
            }
            run_methods(&cli, case, &ms, *budget)
        }
        Command::Tables { budget } => {
            let s = resolve(&cli, *budget)?;
            if s.overrides.is_some() {
                log::warn!("[case] overrides are ignored by `tables`");
            }
            let dir = prepare_run(&s, None)?;
            let report = harness::reproduce_tables(s.budget, s.seed, Some(&dir))?;
            print!("{}", report.render());
            println!("artifacts: {}", dir.display());
            Ok(())
        }
        Command::ListCases => {
            list_cases();
            Ok(())
        }
    }
}
