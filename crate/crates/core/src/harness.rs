//! Case registry, shared evaluation set, error metrics and artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpinn::{self, CpinnError, LossWeights, PointCounts, RescaleParams, SubdomainId, TrainOptions};
use crate::flux::Mobility;
use crate::riemann::{self, RiemannData, RiemannError};
use crate::weno::{self, WenoError};
use crate::State;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("sample coordinates differ between fields")]
    GridMismatch,
    #[error("fields use different forms")]
    FormMismatch,
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error(transparent)]
    Riemann(#[from] RiemannError),
    #[error(transparent)]
    Weno(#[from] WenoError),
    #[error(transparent)]
    Cpinn(#[from] CpinnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    Conservative,
    NonConservative,
}

impl Form {
    pub fn as_str(self) -> &'static str {
        match self {
            Form::Conservative => "conservative",
            Form::NonConservative => "non-conservative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Weno5,
    Cpinn,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Weno5 => "weno5",
            Method::Cpinn => "cpinn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Some(Method::Exact),
            "weno" | "weno5" => Some(Method::Weno5),
            "cpinn" | "pinn" => Some(Method::Cpinn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Desk,
    Full,
}

impl Budget {
    pub fn as_str(self) -> &'static str {
        match self {
            Budget::Desk => "desk",
            Budget::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBudget {
    pub budget: Budget,
    pub epochs: usize,
    pub counts: PointCounts,
    pub lr0: f64,
}

impl TrainingBudget {
    pub fn new(budget: Budget, long_domain: bool) -> Self {
        let full = PointCounts::full(long_domain);
        match budget {
            Budget::Desk => Self {
                budget,
                epochs: 20_000,
                counts: full.reduced(4),
                lr0: 1e-3,
            },
            Budget::Full => Self {
                budget,
                epochs: 100_000,
                counts: full,
                lr0: 1e-3,
            },
        }
    }

    pub fn seed_count(&self) -> usize {
        match self.budget {
            Budget::Desk => 1,
            Budget::Full => 3,
        }
    }
}

/// Shared space-time evaluation set: `n_x` uniform points including both
/// ends of the spatial domain, at each of `times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub n_x: usize,
    pub times: Vec<f64>,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            n_x: 512,
            times: vec![0.75, 1.5, 2.25, 3.0],
        }
    }
}

impl EvalGrid {
    pub fn xs(&self, domain: (f64, f64, f64)) -> Vec<f64> {
        let (a, b, _) = domain;
        let n = self.n_x.max(2);
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    /// Time-major list of `(x, t)`.
    pub fn points(&self, domain: (f64, f64, f64)) -> Vec<(f64, f64)> {
        let xs = self.xs(domain);
        self.times
            .iter()
            .flat_map(|&t| xs.iter().map(move |&x| (x, t)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WenoSettings {
    pub cfl: f64,
    pub cells_per_unit: f64,
}

impl Default for WenoSettings {
    fn default() -> Self {
        Self {
            cfl: 0.4,
            cells_per_unit: 200.0,
        }
    }
}

impl WenoSettings {
    pub fn cells_for(&self, length: f64) -> usize {
        (length * self.cells_per_unit).round().max(1.0) as usize
    }
}

/// Published relative L2 values for a case, used only for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub cpinn: Option<f64>,
    pub weno: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseConfig {
    pub name: String,
    pub form: Form,
    /// Left and right data in form variables (`ũ = u/φ` for the
    /// non-conservative form).
    pub u_l: f64,
    pub phi_l: f64,
    pub u_r: f64,
    pub phi_r: f64,
    pub mobility: Mobility,
    /// `(x_min, x_max, t_max)`.
    pub domain: (f64, f64, f64),
    pub rescale: Option<RescaleParams>,
    pub budget: TrainingBudget,
    pub eval: EvalGrid,
    pub weno: WenoSettings,
    pub seeds: Vec<u64>,
    pub interface_x: f64,
    pub weights: LossWeights,
    #[serde(default)]
    pub reference: ReferenceValues,
}

pub const DEFAULT_SEED: u64 = 1234;
const SHORT_DOMAIN: (f64, f64, f64) = (-1.0, 10.0, 3.0);
const LONG_DOMAIN: (f64, f64, f64) = (-1.0, 25.0, 3.0);

impl CaseConfig {
    fn base(name: &str, form: Form, data: [f64; 4], long: bool) -> Self {
        let [u_l, phi_l, u_r, phi_r] = data;
        Self {
            name: name.to_string(),
            form,
            u_l,
            phi_l,
            u_r,
            phi_r,
            mobility: Mobility::default(),
            domain: if long { LONG_DOMAIN } else { SHORT_DOMAIN },
            rescale: None,
            budget: TrainingBudget::new(Budget::Desk, long),
            eval: EvalGrid::default(),
            weno: WenoSettings::default(),
            seeds: vec![DEFAULT_SEED],
            interface_x: cpinn::INTERFACE_X,
            weights: LossWeights::default(),
            reference: ReferenceValues::default(),
        }
    }

    fn rescaled(mut self, delta1: f64, delta2: f64, sd: SubdomainId) -> Self {
        self.rescale = Some(RescaleParams::new(delta1, delta2, sd));
        self
    }

    fn reference(mut self, cpinn: f64, weno: Option<f64>) -> Self {
        self.reference = ReferenceValues {
            cpinn: Some(cpinn),
            weno,
        };
        self
    }

    pub fn is_long_domain(&self) -> bool {
        self.domain.1 - self.domain.0 > 20.0
    }

    /// Switches training budget and seed list (`seed_base`, `seed_base+1`, ...).
    pub fn with_budget(mut self, budget: Budget, seed_base: u64) -> Self {
        self.budget = TrainingBudget::new(budget, self.is_long_domain());
        self.seeds = (0..self.budget.seed_count() as u64).map(|k| seed_base + k).collect();
        self
    }

    /// Riemann data in physical conservative variables.
    pub fn riemann_data(&self) -> Result<RiemannData, RiemannError> {
        let (ul, ur) = match self.form {
            Form::Conservative => (self.u_l, self.u_r),
            Form::NonConservative => (self.u_l * self.phi_l, self.u_r * self.phi_r),
        };
        RiemannData::new(
            State::new(ul, self.phi_l),
            State::new(ur, self.phi_r),
            self.mobility.clone(),
        )
    }

    pub fn train_options(&self, out_dir: Option<PathBuf>) -> TrainOptions {
        TrainOptions {
            epochs: self.budget.epochs,
            counts: self.budget.counts,
            lr0: self.budget.lr0,
            eval_every: (self.budget.epochs / 50).max(1),
            checkpoint_every: (self.budget.epochs / 10).max(1),
            out_dir,
        }
    }
}

/// The eight case labels in both forms.
pub fn case_registry() -> Vec<CaseConfig> {
    use Form::{Conservative as C, NonConservative as N};
    use SubdomainId::{Sd1, Sd2};
    let c1 = [0.6, 0.7, 0.3, 0.6];
    let c2 = [0.45, 0.8, 0.3, 0.6];
    let c3 = [2e-4, 0.1, 0.35, 0.5];
    let c4 = [0.6, 0.7, 4e-4, 0.2];
    let c5 = [0.49, 0.7, 4e-4, 0.2];
    let nc = |d: [f64; 4]| [d[0] / d[1], d[1], d[2] / d[3], d[3]];
    vec![
        CaseConfig::base("case1", C, c1, false).reference(8.96e-3, Some(1.85e-3)),
        CaseConfig::base("case2", C, c2, false).reference(1.11e-2, Some(2.9e-3)),
        CaseConfig::base("case3a", C, c3, false).reference(3.33e-1, Some(6.93e-3)),
        CaseConfig::base("case3b", C, c3, false)
            .rescaled(1e-2, 1e-4, Sd1)
            .reference(1.73e-2, Some(6.93e-3)),
        CaseConfig::base("case4a", C, c4, true).reference(7.2e-2, Some(1.61e-1)),
        CaseConfig::base("case4b", C, c4, true)
            .rescaled(1.0, 0.8, Sd2)
            .reference(8.82e-2, Some(2.53e-1)),
        CaseConfig::base("case5a", C, c5, true).reference(7.87e-2, Some(2.25e-1)),
        CaseConfig::base("case5b", C, c5, true)
            .rescaled(1.0, 0.8, Sd2)
            .reference(7.91e-2, Some(3.16e-1)),
        CaseConfig::base("case1-nc", N, nc(c1), false).reference(6.05e-3, None),
        CaseConfig::base("case2-nc", N, nc(c2), false).reference(8.82e-3, None),
        CaseConfig::base("case3a-nc", N, nc(c3), false).reference(1.54e-2, None),
        CaseConfig::base("case3b-nc", N, nc(c3), false)
            .rescaled(1e-2, 1e-3, Sd1)
            .reference(2.21e-2, None),
        CaseConfig::base("case4a-nc", N, nc(c4), true).reference(6.09e-2, None),
        CaseConfig::base("case4b-nc", N, nc(c4), true)
            .rescaled(1.0, 0.8, Sd2)
            .reference(5.99e-2, None),
        CaseConfig::base("case5a-nc", N, nc(c5), true).reference(8.94e-2, None),
        CaseConfig::base("case5b-nc", N, nc(c5), true)
            .rescaled(1.0, 0.4, Sd2)
            .reference(6.57e-2, None),
    ]
}

pub fn find_case(name: &str) -> Result<CaseConfig, HarnessError> {
    case_registry()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| HarnessError::UnknownCase(name.to_string()))
}

// ---------------------------------------------------------------------------
// Solution fields

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: f64,
    pub t: f64,
    /// Physical conservative saturation.
    pub u: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionField {
    pub case: String,
    pub method: Method,
    pub seed: Option<u64>,
    pub form: Form,
    pub samples: Vec<Sample>,
}

impl SolutionField {
    pub fn new(case: &str, method: Method, seed: Option<u64>, samples: Vec<Sample>) -> Self {
        Self {
            case: case.to_string(),
            method,
            seed,
            form: Form::Conservative,
            samples,
        }
    }

    pub fn with_form(mut self, form: Form) -> Self {
        self.form = form;
        self
    }

    /// The compared variable: `u`, or `ũ = u/φ` in non-conservative form.
    pub fn compared(&self) -> impl Iterator<Item = f64> + '_ {
        let form = self.form;
        self.samples.iter().map(move |s| match form {
            Form::Conservative => s.u,
            Form::NonConservative => s.u / s.phi,
        })
    }

    pub fn at_time(&self, t: f64) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.t == t).copied().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "t", "u", "phi", "method", "case", "seed"])?;
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        for s in &self.samples {
            w.write_record([
                s.x.to_string(),
                s.t.to_string(),
                s.u.to_string(),
                s.phi.to_string(),
                self.method.as_str().to_string(),
                self.case.clone(),
                seed.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact solution on the case's evaluation set.
pub fn exact_field(case: &CaseConfig) -> Result<SolutionField, RiemannError> {
    let fan = riemann::solve_riemann(&case.riemann_data()?)?;
    let samples = case
        .eval
        .points(case.domain)
        .into_iter()
        .map(|(x, t)| {
            let s = fan.evaluate(x, t);
            Sample { x, t, u: s.u, phi: s.phi }
        })
        .collect();
    Ok(SolutionField::new(&case.name, Method::Exact, None, samples).with_form(case.form))
}

fn check_grid(pred: &SolutionField, exact: &SolutionField) -> Result<(), HarnessError> {
    if pred.form != exact.form {
        return Err(HarnessError::FormMismatch);
    }
    if pred.samples.len() != exact.samples.len()
        || pred
            .samples
            .iter()
            .zip(&exact.samples)
            .any(|(a, b)| a.x != b.x || a.t != b.t)
    {
        return Err(HarnessError::GridMismatch);
    }
    Ok(())
}

/// `‖pred − exact‖₂ / ‖exact‖₂` over the shared samples.
pub fn relative_l2(pred: &SolutionField, exact: &SolutionField) -> Result<f64, HarnessError> {
    check_grid(pred, exact)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, e) in pred.compared().zip(exact.compared()) {
        num += (p - e) * (p - e);
        den += e * e;
    }
    Ok((num / den).sqrt())
}

/// Relative L2 restricted to the last evaluation time.
pub fn relative_l2_final_time(pred: &SolutionField, exact: &SolutionField) -> Result<f64, HarnessError> {
    check_grid(pred, exact)?;
    let t_end = exact.samples.iter().map(|s| s.t).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, e), s) in pred.compared().zip(exact.compared()).zip(&exact.samples) {
        if s.t == t_end {
            num += (p - e) * (p - e);
            den += e * e;
        }
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case: String,
    pub method: Method,
    pub form: Form,
    pub rescaled: bool,
    pub l2: f64,
    pub seeds: usize,
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    case: &'a str,
    method: &'static str,
    form: &'static str,
    rescaled: bool,
    l2: f64,
    seeds: usize,
}

/// Appends rows to a metrics CSV, writing the header for a new file.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(MetricsRecord {
            case: &r.case,
            method: r.method.as_str(),
            form: r.form.as_str(),
            rescaled: r.rescaled,
            l2: r.l2,
            seeds: r.seeds,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Threshold a result is checked against in a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Expectation {
    Below(f64),
    Above(f64),
}

impl Expectation {
    pub fn holds(self, value: f64) -> bool {
        match self {
            Expectation::Below(b) => value < b,
            Expectation::Above(b) => value > b,
        }
    }

    pub fn describe(self) -> String {
        match self {
            Expectation::Below(b) => format!("< {b:.3e}"),
            Expectation::Above(b) => format!("> {b:.3e}"),
        }
    }
}

/// Pass/fail bound for a (case, method, budget) triple, if one is defined.
pub fn expectation(case: &CaseConfig, method: Method, budget: Budget) -> Option<Expectation> {
    match method {
        Method::Exact => Some(Expectation::Below(1e-14)),
        Method::Weno5 => match case.name.as_str() {
            "case4a" | "case5a" | "case4b" | "case5b" => Some(Expectation::Above(5e-2)),
            _ => case.reference.weno.map(|v| Expectation::Below(3.0 * v)),
        },
        Method::Cpinn => match (case.name.as_str(), budget) {
            ("case3a", _) => Some(Expectation::Above(1e-1)),
            ("case1", Budget::Desk) => Some(Expectation::Below(5e-2)),
            ("case2", Budget::Desk) => Some(Expectation::Below(6e-2)),
            ("case3b", Budget::Desk) => Some(Expectation::Below(1e-1)),
            ("case3b", Budget::Full) => Some(Expectation::Below(5e-2)),
            (_, Budget::Full) => case.reference.cpinn.map(|v| Expectation::Below(3.0 * v)),
            _ => None,
        },
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub rows: Vec<MetricsRow>,
    pub fields: Vec<SolutionField>,
    /// Methods that failed, with the error message; other rows are kept.
    pub failures: Vec<(Method, String)>,
}

/// Creates `root/run-<unix seconds>` (with a numeric suffix on collision).
pub fn new_run_dir(root: &Path) -> Result<PathBuf, HarnessError> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut dir = root.join(format!("run-{secs}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("run-{secs}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn method_field(case: &CaseConfig, method: Method, out: Option<&Path>) -> Result<(SolutionField, usize), HarnessError> {
    match method {
        Method::Exact => Ok((exact_field(case)?, 1)),
        Method::Weno5 => Ok((weno::solve_weno(case)?.field, 1)),
        Method::Cpinn => {
            let dir = out.map(|d| d.join(format!("{}-cpinn", case.name)));
            let opts = case.train_options(dir.clone());
            let (outs, mean) = cpinn::train_seeds(case, &case.seeds, &opts)?;
            if let Some(d) = &dir {
                cpinn::write_manifest(
                    d,
                    &cpinn::RunManifest {
                        case: case.clone(),
                        options: opts.clone(),
                        seeds: case.seeds.clone(),
                        l2: outs.iter().map(|o| o.l2).collect(),
                    },
                )?;
            }
            info!("{}: cPINN mean L2 over {} seeds = {mean:.3e}", case.name, outs.len());
            // the reported field is the first seed's; the row carries the mean
            let mut field = outs[0].field.clone().with_form(case.form);
            field.seed = Some(outs[0].seed);
            Ok((field, outs.len()))
        }
    }
}

/// Runs the requested methods on one case; solver errors are recorded and
/// the remaining methods still run.
pub fn run_case(case: &CaseConfig, methods: &[Method], out: Option<&Path>) -> Result<CaseReport, HarnessError> {
    let exact = exact_field(case)?;
    let mut report = CaseReport {
        rows: Vec::new(),
        fields: Vec::new(),
        failures: Vec::new(),
    };
    for &method in methods {
        let result = method_field(case, method, out).and_then(|(field, seeds)| {
            let field = field.with_form(case.form);
            let l2 = if method == Method::Cpinn && seeds > 1 {
                mean_cpinn_l2(case, out)?.unwrap_or(relative_l2(&field, &exact)?)
            } else {
                relative_l2(&field, &exact)?
            };
            Ok((field, seeds, l2))
        });
        match result {
            Ok((field, seeds, l2)) => {
                report.rows.push(MetricsRow {
                    case: case.name.clone(),
                    method,
                    form: case.form,
                    rescaled: case.rescale.is_some_and(|r| r.enabled),
                    l2,
                    seeds,
                });
                report.fields.push(field);
            }
            Err(e) => {
                warn!("{}: {} failed: {e}", case.name, method.as_str());
                report.failures.push((method, e.to_string()));
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for f in &report.fields {
            f.write_csv(&dir.join(format!("{}-{}.csv", case.name, f.method.as_str())))?;
        }
        append_metrics(&dir.join("metrics.csv"), &report.rows)?;
        let mut all = vec![exact.clone()];
        all.extend(report.fields.iter().filter(|f| f.method != Method::Exact).cloned());
        plot_profiles(case, &all, dir)?;
    }
    Ok(report)
}

fn mean_cpinn_l2(case: &CaseConfig, out: Option<&Path>) -> Result<Option<f64>, HarnessError> {
    let Some(dir) = out else { return Ok(None) };
    let path = dir.join(format!("{}-cpinn", case.name)).join("manifest.json");
    let Ok(text) = fs::read_to_string(path) else { return Ok(None) };
    let m: cpinn::RunManifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(_) => return Ok(None),
    };
    Ok(Some(m.l2.iter().sum::<f64>() / m.l2.len().max(1) as f64))
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableEntry {
    pub row: MetricsRow,
    pub reference: Option<f64>,
    pub expectation: Option<Expectation>,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableReport {
    pub budget: Budget,
    pub entries: Vec<TableEntry>,
    pub failures: Vec<(String, String)>,
}

impl TableReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<11} {:<7} {:<17} {:<9} {:>11} {:>11} {:<6} {:<12} {:<7}",
            "case", "method", "form", "rescaled", "l2", "reference", "budget", "bound", "verdict"
        );
        for e in &self.entries {
            let reference = e.reference.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
            let bound = e.expectation.map(|x| x.describe()).unwrap_or_else(|| "-".into());
            let verdict = match e.pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "-",
            };
            let _ = writeln!(
                s,
                "{:<11} {:<7} {:<17} {:<9} {:>11.3e} {:>11} {:<6} {:<12} {:<7}",
                e.row.case,
                e.row.method.as_str(),
                e.row.form.as_str(),
                e.row.rescaled,
                e.row.l2,
                reference,
                self.budget.as_str(),
                bound,
                verdict
            );
        }
        for (case, err) in &self.failures {
            let _ = writeln!(s, "{case}: error: {err}");
        }
        s
    }
}

/// Runs every registry case (WENO5 on conservative cases only, cPINN on
/// all) and compares against the published tables.
pub fn reproduce_tables(budget: Budget, seed_base: u64, out: Option<&Path>) -> Result<TableReport, HarnessError> {
    let mut report = TableReport {
        budget,
        entries: Vec::new(),
        failures: Vec::new(),
    };
    for case in case_registry() {
        let case = case.with_budget(budget, seed_base);
        let mut methods = vec![Method::Cpinn];
        if case.form == Form::Conservative {
            methods.insert(0, Method::Weno5);
        }
        let r = run_case(&case, &methods, out)?;
        for row in r.rows {
            let reference = match row.method {
                Method::Weno5 => case.reference.weno,
                Method::Cpinn => case.reference.cpinn,
                Method::Exact => None,
            };
            let exp = expectation(&case, row.method, budget);
            report.entries.push(TableEntry {
                pass: exp.map(|x| x.holds(row.l2)),
                row,
                reference,
                expectation: exp,
            });
        }
        for (m, e) in r.failures {
            report.failures.push((format!("{}/{}", case.name, m.as_str()), e));
        }
    }
    if let Some(dir) = out {
        fs::write(dir.join("tables.txt"), report.render())?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Plots

/// One SVG per evaluation time plus an overlay of all times.
pub fn plot_profiles(case: &CaseConfig, fields: &[SolutionField], dir: &Path) -> Result<(), HarnessError> {
    use plotters::prelude::*;
    let perr = |e: &dyn std::fmt::Display| HarnessError::Plot(e.to_string());
    let (x0, x1, _) = case.domain;
    let y_of = |f: &SolutionField, s: &Sample| match f.form {
        Form::Conservative => s.u,
        Form::NonConservative => s.u / s.phi,
    };
    let y_max = fields
        .iter()
        .flat_map(|f| f.samples.iter().map(move |s| y_of(f, s)))
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-3)
        * 1.1;
    let palette = [BLACK, RED, BLUE, GREEN, MAGENTA];

    let draw = |path: PathBuf, times: &[f64], title: String| -> Result<(), HarnessError> {
        let root = SVGBackend::new(&path, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| perr(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(x0..x1, 0.0..y_max)
            .map_err(|e| perr(&e))?;
        chart.configure_mesh().draw().map_err(|e| perr(&e))?;
        for (k, f) in fields.iter().enumerate() {
            let color = palette[k % palette.len()];
            for (n, &t) in times.iter().enumerate() {
                let pts: Vec<(f64, f64)> = f.at_time(t).iter().map(|s| (s.x, y_of(f, s))).collect();
                let series = chart
                    .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                    .map_err(|e| perr(&e))?;
                if n == 0 {
                    series
                        .label(f.method.as_str())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
                }
            }
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| perr(&e))?;
        root.present().map_err(|e| perr(&e))?;
        Ok(())
    };

    for &t in &case.eval.times {
        draw(
            dir.join(format!("{}-t{t}.svg", case.name)),
            &[t],
            format!("{} at t = {t}", case.name),
        )?;
    }
    draw(
        dir.join(format!("{}-overlay.svg", case.name)),
        &case.eval.times,
        format!("{} profiles", case.name),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
        bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    #[test]
    fn registry_checksum() {
        // any edit to the numeric registry data changes this value
        let mut bytes = Vec::new();
        for c in case_registry() {
            bytes.extend(c.name.bytes());
            let mut vals = vec![c.u_l, c.phi_l, c.u_r, c.phi_r, c.mobility.value(), c.domain.0, c.domain.1, c.domain.2];
            if let Some(r) = c.rescale {
                vals.extend([r.delta1, r.delta2]);
            }
            for v in vals {
                bytes.extend(v.to_bits().to_le_bytes());
            }
        }
        assert_eq!(case_registry().len(), 16);
        let h = fnv1a(bytes);
        assert_eq!(h, REGISTRY_HASH, "registry drifted: {h:#x}");
    }

    const REGISTRY_HASH: u64 = 0xffda_d938_ffba_46a5;

    #[test]
    fn registry_examples() {
        let c3b = find_case("case3b").unwrap();
        let r = c3b.rescale.unwrap();
        assert_eq!((r.delta1, r.delta2, r.subdomain), (1e-2, 1e-4, SubdomainId::Sd1));
        let c5b = find_case("case5b-nc").unwrap();
        let r = c5b.rescale.unwrap();
        assert_eq!((r.delta1, r.delta2, r.subdomain), (1.0, 0.4, SubdomainId::Sd2));
        let c1 = find_case("case1-nc").unwrap();
        assert!((c1.u_l - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(find_case("case4a").unwrap().domain, (-1.0, 25.0, 3.0));
        assert_eq!(find_case("case2").unwrap().domain, (-1.0, 10.0, 3.0));
        for c in case_registry() {
            c.riemann_data().unwrap();
        }
    }

    #[test]
    fn eval_grid_layout() {
        let g = EvalGrid::default();
        let xs = g.xs((-1.0, 10.0, 3.0));
        assert_eq!(xs.len(), 512);
        assert_eq!((xs[0], xs[511]), (-1.0, 10.0));
        let pts = g.points((-1.0, 10.0, 3.0));
        assert_eq!(pts.len(), 2048);
        assert_eq!(pts[512], (-1.0, 1.5));
        assert_eq!(WenoSettings::default().cells_for(11.0), 2200);
        assert_eq!(WenoSettings::default().cells_for(26.0), 5200);
    }

    fn scaled(f: &SolutionField, k: f64) -> SolutionField {
        let mut g = f.clone();
        g.samples.iter_mut().for_each(|s| s.u *= k);
        g
    }

    #[test]
    fn relative_l2_identities() {
        let exact = exact_field(&find_case("case1").unwrap()).unwrap();
        assert_eq!(relative_l2(&exact, &exact).unwrap(), 0.0);
        assert!((relative_l2(&scaled(&exact, 2.0), &exact).unwrap() - 1.0).abs() < 1e-14);
        assert!((relative_l2(&scaled(&exact, 0.75), &exact).unwrap() - 0.25).abs() < 1e-14);
        // triangle inequality through an intermediate field
        let a = scaled(&exact, 1.1);
        let mut b = exact.clone();
        b.samples.iter_mut().enumerate().for_each(|(i, s)| s.u += 0.01 * (i as f64).sin());
        let d = |p: &SolutionField, q: &SolutionField| relative_l2(p, q).unwrap() * l2_norm(q);
        assert!(d(&a, &exact) <= d(&a, &b) + d(&b, &exact) + 1e-15);
    }

    fn l2_norm(f: &SolutionField) -> f64 {
        f.compared().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let exact = exact_field(&find_case("case1").unwrap()).unwrap();
        let mut moved = exact.clone();
        moved.samples[3].x += 1e-9;
        assert!(matches!(relative_l2(&moved, &exact), Err(HarnessError::GridMismatch)));
        let short = SolutionField {
            samples: exact.samples[1..].to_vec(),
            ..exact.clone()
        };
        assert!(matches!(relative_l2(&short, &exact), Err(HarnessError::GridMismatch)));
    }

    #[test]
    fn nonconservative_fields_compare_u_tilde() {
        let c = find_case("case1-nc").unwrap();
        let exact = exact_field(&c).unwrap();
        assert_eq!(exact.form, Form::NonConservative);
        // scaling φ alone changes ũ but not u
        let mut g = exact.clone();
        g.samples.iter_mut().for_each(|s| s.phi *= 2.0);
        assert!((relative_l2(&g, &exact).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn exact_vs_exact_row_is_zero() {
        let c = find_case("case2").unwrap();
        let r = run_case(&c, &[Method::Exact], None).unwrap();
        assert_eq!(r.rows[0].l2, 0.0);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn weno_is_refused_for_nonconservative_but_other_rows_survive() {
        let c = find_case("case1-nc").unwrap();
        let r = run_case(&c, &[Method::Weno5, Method::Exact], None).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].0, Method::Weno5);
    }

    #[test]
    fn artifacts_are_written() {
        let dir = std::env::temp_dir().join(format!("gbl-harness-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let c = find_case("case2").unwrap();
        run_case(&c, &[Method::Exact], Some(&dir)).unwrap();
        run_case(&c, &[Method::Exact], Some(&dir)).unwrap();
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], "case,method,form,rescaled,l2,seeds");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("case2,exact,conservative,false,0"));
        let profile = fs::read_to_string(dir.join("case2-exact.csv")).unwrap();
        assert!(profile.starts_with("x,t,u,phi,method,case,seed\n"));
        assert!(dir.join("case2-overlay.svg").exists());
        assert!(dir.join("case2-t3.svg").exists());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn expectations_follow_thresholds() {
        let c1 = find_case("case1").unwrap();
        assert_eq!(expectation(&c1, Method::Cpinn, Budget::Desk), Some(Expectation::Below(5e-2)));
        let c3a = find_case("case3a").unwrap();
        assert!(expectation(&c3a, Method::Cpinn, Budget::Full).unwrap().holds(0.333));
        let c4a = find_case("case4a").unwrap();
        assert!(!expectation(&c4a, Method::Weno5, Budget::Desk).unwrap().holds(0.01));
    }

    #[test]
    fn budgets() {
        let c = find_case("case4a").unwrap().with_budget(Budget::Full, 10);
        assert_eq!(c.budget.epochs, 100_000);
        assert_eq!(c.budget.counts.n_f2, 17500);
        assert_eq!(c.seeds, vec![10, 11, 12]);
        let d = find_case("case1").unwrap();
        assert_eq!(d.budget.epochs, 20_000);
        assert_eq!((d.budget.counts.n_f1, d.budget.counts.n_f2), (750, 3125));
        assert_eq!(d.seeds.len(), 1);
    }
}
