//! `bfnet` subcommands as thin wrappers over the library.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::presets::{self, Scale};
use super::run::{self, coarse_net, RunManifest, RunOptions};
use super::scenario::{NetKind, ProbeSection, Scenario};
use crate::analysis::{
    empirical_norm, rate_slope, residual_exponent, spline_error, variation, y_increment_exponent, z_blowup_exponent,
    Z_CLAMP,
};
use crate::bsde::solve;
use crate::error::{Error, Result};
use crate::forward::simulate;
use crate::gaussian_oracle::{cond_residual_norm, expand, heat_kernel_f, z_norm, TerminalFunction1D};
use crate::io::{self, csv_error, csv_string};
use crate::timenets::{refine_net, SmoothnessSpec, TimeNet};

#[derive(Debug, Parser)]
#[command(name = "bfnet", version, about = "Smoothness-adapted time nets and regression solvers for BSDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed for simulations.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Output file (directory for `run`); stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a theta-adapted or uniform time net.
    Nets(NetArgs),
    /// Gaussian oracle quantities for X = W.
    Oracle {
        #[command(subcommand)]
        op: OracleOp,
    },
    /// Simulate forward paths for a scenario's model.
    Simulate(SimulateArgs),
    /// Simulate (or load) paths and solve the BSDE.
    Solve(SolveArgs),
    /// Analyze stored solutions or tables.
    Analyze {
        #[command(subcommand)]
        op: AnalyzeOp,
    },
    /// Run a scenario file, a named preset, or rerun a manifest.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct NetSpecArgs {
    /// Breakpoints starting at 0, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    pub breakpoints: Vec<f64>,
    /// One exponent per breakpoint interval.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub theta: Vec<f64>,
    /// Knots per breakpoint interval.
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = NetKindArg::Theta)]
    pub kind: NetKindArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NetKindArg {
    Theta,
    Uniform,
}

impl From<NetKindArg> for NetKind {
    fn from(k: NetKindArg) -> Self {
        match k {
            NetKindArg::Theta => NetKind::Theta,
            NetKindArg::Uniform => NetKind::Uniform,
        }
    }
}

impl NetSpecArgs {
    fn build(&self) -> Result<TimeNet> {
        let spec = SmoothnessSpec::new(self.breakpoints.clone(), self.theta.clone())?;
        coarse_net(self.kind.into(), &spec, self.n)
    }
}

#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    #[command(flatten)]
    pub net: NetSpecArgs,
}

#[derive(Debug, Subcommand)]
pub enum OracleOp {
    /// Hermite coefficients of g.
    Expand {
        #[arg(long)]
        g: String,
        #[arg(long, default_value_t = crate::gaussian_oracle::DEFAULT_ORDER)]
        order: usize,
        #[arg(long, default_value_t = crate::gaussian_oracle::DEFAULT_NODES)]
        nodes: usize,
    },
    /// ‖g(W_1) − E(g(W_1)|F_t)‖_p by quadrature, with an error estimate.
    Residual {
        #[arg(long)]
        g: String,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long)]
        t: f64,
    },
    /// ‖Z_t‖_p by quadrature.
    Znorm {
        #[arg(long)]
        g: String,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long)]
        t: f64,
    },
    /// ‖Z_t − Z_s‖_2 from the Hermite series.
    Zinc {
        #[arg(long)]
        g: String,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        t: f64,
    },
    /// F(t, x) = E g(x + W_{1−t}) and its first two x-derivatives.
    Kernel {
        #[arg(long)]
        g: String,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        x: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Scenario file supplying model, terminal condition and smoothness.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = NetKindArg::Theta)]
    pub net: NetKindArg,
    /// Net size; the simulation grid is this net refined by the scenario's factor.
    #[arg(long)]
    pub n: usize,
    /// Path count overriding the scenario's.
    #[arg(long)]
    pub paths: Option<usize>,
}

impl GridArgs {
    fn load(&self) -> Result<(Scenario, SmoothnessSpec, TimeNet, TimeNet)> {
        let mut s = Scenario::from_file(&self.scenario)?;
        if let Some(p) = self.paths {
            s.paths = p;
            s.validate()?;
        }
        let spec = s
            .declared_spec()?
            .ok_or_else(|| Error::validation("smoothness.theta", "subcommands need declared exponents"))?;
        let coarse = coarse_net(self.net.into(), &s.net_spec(&spec)?, self.n)?;
        let fine = refine_net(&coarse, s.refine)?;
        Ok((s, spec, coarse, fine))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Store the ensemble in the binary columnar format.
    #[arg(long)]
    pub save_paths: Option<PathBuf>,
    /// Also simulate the first-variation flow.
    #[arg(long)]
    pub flow: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Solve on a stored ensemble instead of simulating.
    #[arg(long)]
    pub load_paths: Option<PathBuf>,
    #[arg(long)]
    pub save_paths: Option<PathBuf>,
    /// Store the solution (binary file plus JSON sidecar).
    #[arg(long)]
    pub save_solution: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeOp {
    /// Rate slope of `value` against `n` from a CSV table.
    Slope {
        #[arg(long = "in")]
        input: PathBuf,
        /// Value column; defaults to `value`, else the second column.
        #[arg(long)]
        column: Option<String>,
    },
    /// var_p of a stored solution relative to a coarse net.
    Variation {
        #[arg(long)]
        solution: PathBuf,
        #[command(flatten)]
        net: NetSpecArgs,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// Adapted-spline error of a stored solution on a coarse net.
    Spline {
        #[arg(long)]
        solution: PathBuf,
        #[command(flatten)]
        net: NetSpecArgs,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// Exponent probes at breakpoint `l` of a stored solution.
    Probes {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long, default_value_t = 1)]
        l: usize,
        /// Window exponents `j_min,j_max`.
        #[arg(long, value_delimiter = ',', default_value = "2,8")]
        window: Vec<i32>,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario TOML file.
    #[arg(long, conflicts_with_all = ["preset", "manifest"])]
    pub scenario: Option<PathBuf>,
    /// Named preset; `--list` shows them.
    #[arg(long, conflicts_with = "manifest")]
    pub preset: Option<String>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
    pub scale: ScaleArg,
    /// Rerun the scenario or preset recorded in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Reuse completed cells recorded in the output directory's manifest.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Full,
    Smoke,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Full => Scale::Full,
            ScaleArg::Smoke => Scale::Smoke,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let threads = run::thread_count();
    match run::with_threads(threads, || execute(&cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) | Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn emit_text(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_rows<T: Serialize>(common: &Common, rows: &[T]) -> Result<()> {
    let text = match common.format {
        Format::Csv => csv_string(rows)?,
        Format::Json => serde_json::to_string_pretty(rows)? + "\n",
    };
    emit_text(common, &text)
}

fn emit_value<T: Serialize>(common: &Common, value: &T) -> Result<()> {
    match common.format {
        Format::Csv => emit_rows(common, std::slice::from_ref(value)),
        Format::Json => emit_text(common, &(serde_json::to_string_pretty(value)? + "\n")),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Nets(a) => nets(common, a),
        Command::Oracle { op } => oracle(common, op),
        Command::Simulate(a) => simulate_cmd(common, a),
        Command::Solve(a) => solve_cmd(common, a),
        Command::Analyze { op } => analyze(common, op),
        Command::Run(a) => run_cmd(common, a),
    }
}

#[derive(Serialize)]
struct KnotRow {
    k: usize,
    t: String,
}

fn nets(common: &Common, a: &NetArgs) -> Result<()> {
    let net = a.net.build()?;
    match common.format {
        Format::Json => emit_text(common, &(net.to_json() + "\n")),
        Format::Csv => {
            let rows: Vec<KnotRow> = net
                .knots()
                .iter()
                .enumerate()
                .map(|(k, t)| KnotRow { k, t: t.to_string() })
                .collect();
            emit_rows(common, &rows)
        }
    }
}

#[derive(Serialize)]
struct QuadRow {
    g: String,
    p: f64,
    t: f64,
    value: f64,
    error: f64,
}

#[derive(Serialize)]
struct NormRow {
    g: String,
    p: f64,
    t: f64,
    value: f64,
}

#[derive(Serialize)]
struct ValueRow {
    g: String,
    s: f64,
    t: f64,
    value: f64,
}

#[derive(Serialize)]
struct KernelRow {
    g: String,
    t: f64,
    x: f64,
    f: f64,
    df: f64,
    d2f: f64,
}

#[derive(Serialize)]
struct CoefRow {
    n: usize,
    alpha: f64,
}

fn oracle(common: &Common, op: &OracleOp) -> Result<()> {
    match op {
        OracleOp::Expand { g, order, nodes } => {
            let e = expand(&g.parse()?, *order, *nodes)?;
            match common.format {
                Format::Json => emit_value(common, &e),
                Format::Csv => {
                    let rows: Vec<CoefRow> = e
                        .coefficients
                        .iter()
                        .enumerate()
                        .map(|(n, &alpha)| CoefRow { n, alpha })
                        .collect();
                    emit_rows(common, &rows)
                }
            }
        }
        OracleOp::Residual { g, p, t } => {
            let f: TerminalFunction1D = g.parse()?;
            let q = cond_residual_norm(&f, *t, *p)?;
            emit_value(
                common,
                &QuadRow {
                    g: f.to_string(),
                    p: *p,
                    t: *t,
                    value: q.value,
                    error: q.error,
                },
            )
        }
        OracleOp::Znorm { g, p, t } => {
            let f: TerminalFunction1D = g.parse()?;
            emit_value(
                common,
                &NormRow {
                    g: f.to_string(),
                    p: *p,
                    t: *t,
                    value: z_norm(&f, *t, *p)?,
                },
            )
        }
        OracleOp::Zinc { g, s, t } => {
            let f: TerminalFunction1D = g.parse()?;
            let e = expand(&f, crate::gaussian_oracle::DEFAULT_ORDER, crate::gaussian_oracle::DEFAULT_NODES)?;
            emit_value(
                common,
                &ValueRow {
                    g: f.to_string(),
                    s: *s,
                    t: *t,
                    value: e.z_increment_l2(*s, *t)?,
                },
            )
        }
        OracleOp::Kernel { g, t, x } => {
            let f: TerminalFunction1D = g.parse()?;
            let k = heat_kernel_f(&f, *t, *x)?;
            emit_value(
                common,
                &KernelRow {
                    g: f.to_string(),
                    t: *t,
                    x: *x,
                    f: k.f,
                    df: k.df,
                    d2f: k.d2f,
                },
            )
        }
    }
}

#[derive(Serialize)]
struct StateRow {
    k: usize,
    t: f64,
    dim: usize,
    mean: f64,
    l2: f64,
}

fn simulate_cmd(common: &Common, a: &SimulateArgs) -> Result<()> {
    let (s, _, _, fine) = a.grid.load()?;
    let model = s.model.build()?;
    let ens = simulate(&model, &fine, s.paths, common.seed, a.flow)?;
    if let Some(p) = &a.save_paths {
        io::write_ensemble(p, &ens)?;
    }
    let mut rows = Vec::new();
    for (k, &t) in fine.knots().iter().enumerate() {
        for j in 0..ens.dim() {
            let col = ens.column(k, j);
            rows.push(StateRow {
                k,
                t,
                dim: j,
                mean: col.iter().sum::<f64>() / col.len() as f64,
                l2: empirical_norm(&col, 2.0).value,
            });
        }
    }
    emit_rows(common, &rows)
}

#[derive(Serialize)]
struct SolutionRow {
    k: usize,
    t: f64,
    y_mean: f64,
    y_norm: f64,
    z_norm: Option<f64>,
    y_residual_rms: Option<f64>,
    z_residual_rms: Option<f64>,
    condition: Option<f64>,
}

fn solve_cmd(common: &Common, a: &SolveArgs) -> Result<()> {
    let (s, spec, _, fine) = a.grid.load()?;
    let model = s.model.build()?;
    let ens = match &a.load_paths {
        Some(p) => io::read_ensemble(p, &model)?,
        None => simulate(&model, &fine, s.paths, common.seed, false)?,
    };
    if let Some(p) = &a.save_paths {
        io::write_ensemble(p, &ens)?;
    }
    let gen = s.generator.build(model.dim())?;
    let term = s.terminal.build(&spec, s.p)?;
    let grid = ens.grid().clone();
    let sol = solve(&model, &gen, &term, &grid, &ens, &s.regression, s.scheme)?;
    if let Some(p) = &a.save_solution {
        io::write_solution(p, &sol, ens.master_seed())?;
    }
    let d = sol.dim();
    let rows: Vec<SolutionRow> = grid
        .knots()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let y = sol.y(k);
            let diag = sol.diagnostics().iter().find(|g| g.knot == k);
            SolutionRow {
                k,
                t,
                y_mean: y.iter().sum::<f64>() / y.len() as f64,
                y_norm: empirical_norm(y, s.p).value,
                z_norm: sol.z_at_knot(k).map(|z| {
                    let norms: Vec<f64> = z.chunks(d).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                    empirical_norm(&norms, s.p).value
                }),
                y_residual_rms: diag.map(|g| g.y_residual_rms),
                z_residual_rms: diag.map(|g| g.z_residual_rms),
                condition: diag.map(|g| g.condition),
            }
        })
        .collect();
    emit_rows(common, &rows)
}

#[derive(Serialize)]
struct SlopeRow {
    rows: usize,
    slope: f64,
    se: f64,
}

/// Reads `(n, value)` pairs from a CSV file with a header row.
pub fn read_table(path: &Path, column: Option<&str>) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let n_col = headers.iter().position(|h| h.trim() == "n").unwrap_or(0);
    let v_col = match column {
        Some(c) => headers
            .iter()
            .position(|h| h.trim() == c)
            .ok_or_else(|| Error::Argument(format!("no column `{}` in {}", c, path.display())))?,
        None => headers
            .iter()
            .position(|h| h.trim() == "value")
            .unwrap_or(if n_col == 0 { 1 } else { 0 }),
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Argument(format!("cannot read column {} of row {:?}", i, rec)))
        };
        out.push((get(n_col)?, get(v_col)?));
    }
    Ok(out)
}

fn coarse_for(sol: &crate::bsde::BsdeSolution, net: &NetSpecArgs) -> Result<TimeNet> {
    let coarse = net.build()?;
    if sol.grid().embedding_of(&coarse).is_none() {
        return Err(Error::Argument("the solution grid does not contain the requested net".into()));
    }
    Ok(coarse)
}

fn analyze(common: &Common, op: &AnalyzeOp) -> Result<()> {
    match op {
        AnalyzeOp::Slope { input, column } => {
            let table = read_table(input, column.as_deref())?;
            let (slope, se) = rate_slope(&table)?;
            emit_value(
                common,
                &SlopeRow {
                    rows: table.len(),
                    slope,
                    se,
                },
            )
        }
        AnalyzeOp::Variation { solution, net, p } => {
            let (sol, _) = io::read_solution(solution)?;
            let coarse = coarse_for(&sol, net)?;
            let rep = variation(&sol, &coarse, *p)?;
            match common.format {
                Format::Json => emit_value(common, &rep),
                Format::Csv => emit_rows(common, &rep.intervals),
            }
        }
        AnalyzeOp::Spline { solution, net, p } => {
            let (sol, _) = io::read_solution(solution)?;
            let coarse = coarse_for(&sol, net)?;
            let rep = spline_error(&sol, &coarse, *p)?;
            match common.format {
                Format::Json => emit_value(common, &rep),
                Format::Csv => {
                    #[derive(Serialize)]
                    struct Row {
                        t: f64,
                        error: f64,
                    }
                    let rows: Vec<Row> = rep.profile.iter().map(|&(t, error)| Row { t, error }).collect();
                    emit_rows(common, &rows)
                }
            }
        }
        AnalyzeOp::Probes { solution, l, window, p } => {
            if window.len() != 2 {
                return Err(Error::validation("window", "expected j_min,j_max"));
            }
            let (sol, _) = io::read_solution(solution)?;
            let bps: Vec<f64> = std::iter::once(0.0).chain(sol.grid().breakpoints()).collect();
            if *l == 0 || *l >= bps.len() {
                return Err(Error::validation("l", format!("breakpoint index must lie in 1..={}", bps.len() - 1)));
            }
            let section = ProbeSection {
                window: [window[0], window[1]],
                n: 1,
            };
            let w = crate::analysis::geometric_window(bps[l - 1], bps[*l], section.window[0]..=section.window[1]);
            let zw: Vec<f64> = w.iter().copied().filter(|s| bps[*l] - s >= Z_CLAMP).collect();
            let ests = vec![
                z_blowup_exponent(&sol, *l, &zw, *p)?,
                y_increment_exponent(&sol, *l, &w, *p)?,
                residual_exponent(&sol, *l, &w, *p)?,
            ];
            match common.format {
                Format::Json => emit_value(common, &ests),
                Format::Csv => {
                    #[derive(Serialize)]
                    struct Row {
                        probe: String,
                        l: usize,
                        theta_hat: f64,
                        theta_se: f64,
                        slope: f64,
                        constant: f64,
                        unreliable: bool,
                    }
                    let rows: Vec<Row> = ests
                        .iter()
                        .map(|e| Row {
                            probe: serde_json::to_value(e.probe)
                                .ok()
                                .and_then(|v| v.as_str().map(String::from))
                                .unwrap_or_default(),
                            l: e.l,
                            theta_hat: e.theta_hat,
                            theta_se: e.theta_se,
                            slope: e.slope,
                            constant: e.constant,
                            unreliable: e.unreliable,
                        })
                        .collect();
                    emit_rows(common, &rows)
                }
            }
        }
    }
}

#[derive(Serialize)]
struct PresetRow {
    name: &'static str,
    criteria: String,
    title: &'static str,
}

fn run_cmd(common: &Common, a: &RunArgs) -> Result<()> {
    if a.list {
        let rows: Vec<PresetRow> = presets::PRESETS
            .iter()
            .map(|p| PresetRow {
                name: p.name,
                criteria: p.criteria.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
                title: p.title,
            })
            .collect();
        return emit_rows(&Common { out: None, ..common.clone() }, &rows);
    }
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::validation("out", "`run` needs --out DIR"))?;
    if let Some(m) = &a.manifest {
        return rerun_manifest(m, &out);
    }
    if let Some(name) = &a.preset {
        let (report, _) = presets::run_preset_to(name, a.scale.into(), &out)?;
        for c in &report.checks {
            eprintln!("{} [{}] {} = {} (target {})", if c.pass { "PASS" } else { "FAIL" }, c.criterion, c.name, c.value, c.target);
        }
        return Ok(());
    }
    let path = a
        .scenario
        .as_ref()
        .ok_or_else(|| Error::validation("scenario", "give --scenario FILE, --preset NAME or --manifest FILE"))?;
    let scenario = Scenario::from_file(path)?;
    run::run(
        &scenario,
        &out,
        &RunOptions {
            resume: a.resume,
            log: true,
        },
    )?;
    Ok(())
}

/// Reruns the scenario or preset recorded in `manifest` into `out`.
pub fn rerun_manifest(manifest: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("preset").is_some() {
        let m: presets::PresetManifest = serde_json::from_value(value)?;
        presets::run_preset_to(&m.preset, m.scale, out)?;
    } else {
        let m: RunManifest = serde_json::from_value(value)?;
        run::run(&m.scenario()?, out, &RunOptions::default())?;
    }
    Ok(())
}
