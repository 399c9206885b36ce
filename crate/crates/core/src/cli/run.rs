//! Scenario execution: simulate, solve and analyze every (net, n, seed) cell.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::scenario::{NetKind, ProbeSection, Scenario};
use crate::analysis::{
    geometric_window, log_log_fit, residual_exponent, spline_error, variation, y_increment_exponent,
    z_blowup_exponent, SmoothnessEstimate, SplineError, VariationReport, Z_CLAMP,
};
use crate::bsde::{solve, BsdeSolution};
use crate::error::{Error, Result};
use crate::forward::simulate;
use crate::io::write_csv;
use crate::timenets::{build_theta_net, build_uniform_net, refine_net, SmoothnessSpec, TimeNet};

/// Version string carried by every output row.
pub const VERSION: &str = concat!("bfnet-v", env!("CARGO_PKG_VERSION"));

/// Exponents estimated by a pilot run are kept inside this range.
const ESTIMATE_RANGE: (f64, f64) = (0.05, 1.0);

/// Worker count from `BFNET_THREADS`, defaulting to the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("BFNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {}", e)))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: String,
    pub scenario_hash: String,
    pub version: String,
    pub net: NetKind,
    pub n: usize,
    pub seed: u64,
    pub paths: usize,
    #[serde(with = "crate::timenets::decimal_strings")]
    pub coarse_knots: Vec<f64>,
    pub fine_knots: usize,
    pub variation: VariationReport,
    pub spline: SplineError,
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub scenario_hash: String,
    pub version: String,
    pub net: NetKind,
    pub n: usize,
    pub seed: u64,
    pub paths: usize,
    pub p: f64,
    pub y_component: f64,
    pub z_component: f64,
    pub total: f64,
    pub total_se: f64,
    pub sqrt_n_total: f64,
    pub spline_sup: f64,
    pub spline_se: f64,
    pub sqrt_n_spline: f64,
}

impl From<&CellResult> for ReportRow {
    fn from(c: &CellResult) -> Self {
        let rn = (c.n as f64).sqrt();
        ReportRow {
            scenario: c.scenario.clone(),
            scenario_hash: c.scenario_hash.clone(),
            version: c.version.clone(),
            net: c.net,
            n: c.n,
            seed: c.seed,
            paths: c.paths,
            p: c.variation.p,
            y_component: c.variation.y_component,
            z_component: c.variation.z_component,
            total: c.variation.total,
            total_se: c.variation.total_se,
            sqrt_n_total: rn * c.variation.total,
            spline_sup: c.spline.sup_error,
            spline_se: c.spline.se,
            sqrt_n_spline: rn * c.spline.sup_error,
        }
    }
}

/// Rate slopes over `n` for one (net, seed); `NaN` standard errors with two sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub scenario_hash: String,
    pub version: String,
    pub net: NetKind,
    pub seed: u64,
    pub sizes: usize,
    pub var_slope: f64,
    pub var_slope_se: f64,
    pub y_slope: f64,
    pub y_slope_se: f64,
    pub z_slope: f64,
    pub z_slope_se: f64,
    pub spline_slope: f64,
    pub spline_slope_se: f64,
    /// `max / min` of `√n · var_p` over the sizes.
    pub sqrt_n_var_band: f64,
    pub sqrt_n_spline_band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub scenario: String,
    pub scenario_hash: String,
    pub version: String,
    pub seed: u64,
    pub l: usize,
    pub probe: String,
    pub theta_hat: f64,
    pub theta_se: f64,
    pub slope: f64,
    pub constant: f64,
    pub unreliable: bool,
}

/// Exponents actually used for the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessUsed {
    pub breakpoints: Vec<f64>,
    pub theta: Vec<f64>,
    pub net_theta: Vec<f64>,
    pub estimated: bool,
    /// Pilot fits when `theta = "estimate"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pilot: Vec<SmoothnessEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub net: NetKind,
    pub n: usize,
    pub seed: u64,
    pub file: String,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub scenario_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub complete: bool,
    pub smoothness: Option<SmoothnessUsed>,
    pub cells: Vec<CellRecord>,
    pub files: Vec<String>,
    pub wall_clock_s: f64,
    /// Canonical TOML of the scenario; rerunning it reproduces every output file.
    pub config: String,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::from_toml(&self.config)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Reuse cells recorded in an existing manifest with the same scenario hash.
    pub resume: bool,
    /// Print one line per cell to stderr.
    pub log: bool,
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub probes: Vec<ProbeRow>,
}

pub fn coarse_net(kind: NetKind, net_spec: &SmoothnessSpec, n: usize) -> Result<TimeNet> {
    match kind {
        NetKind::Theta => build_theta_net(net_spec, n),
        NetKind::Uniform => build_uniform_net(net_spec, n),
    }
}

/// Simulates and solves on `grid` with the scenario's model, generator and terminal.
pub fn solve_on(scenario: &Scenario, spec: &SmoothnessSpec, grid: &TimeNet, seed: u64) -> Result<BsdeSolution> {
    let model = scenario.model.build()?;
    let gen = scenario.generator.build(model.dim())?;
    let term = scenario.terminal.build(spec, scenario.p)?;
    let ens = simulate(&model, grid, scenario.paths, seed, false)?;
    solve(&model, &gen, &term, grid, &ens, &scenario.regression, scenario.scheme)
}

/// Variation and spline error for one grid cell.
pub fn run_cell(
    scenario: &Scenario,
    spec: &SmoothnessSpec,
    net_spec: &SmoothnessSpec,
    net: NetKind,
    n: usize,
    seed: u64,
) -> Result<CellResult> {
    let coarse = coarse_net(net, net_spec, n)?;
    let fine = refine_net(&coarse, scenario.refine)?;
    let sol = solve_on(scenario, spec, &fine, seed)?;
    Ok(CellResult {
        scenario: scenario.name.clone(),
        scenario_hash: scenario.hash(),
        version: VERSION.into(),
        net,
        n,
        seed,
        paths: scenario.paths,
        coarse_knots: coarse.knots().to_vec(),
        fine_knots: fine.len(),
        variation: variation(&sol, &coarse, scenario.p)?,
        spline: spline_error(&sol, &coarse, scenario.p)?,
    })
}

/// Window for breakpoint `l` (1-based), trimmed to respect the `Z` clamp.
pub fn probe_window(spec: &SmoothnessSpec, l: usize, probes: &ProbeSection) -> Vec<f64> {
    let bps = spec.breakpoints();
    geometric_window(bps[l - 1], bps[l], probes.window[0]..=probes.window[1])
}

/// Probe grid: a theta net of size `probes.n` with every window inserted.
pub fn probe_grid(spec: &SmoothnessSpec, probes: &ProbeSection) -> Result<TimeNet> {
    let windows: Vec<f64> = (1..=spec.intervals())
        .flat_map(|l| probe_window(spec, l, probes))
        .collect();
    build_theta_net(spec, probes.n)?.with_inserted(&windows)
}

/// The three exponent probes at every breakpoint of one solution.
pub fn probe_solution(sol: &BsdeSolution, spec: &SmoothnessSpec, probes: &ProbeSection, p: f64) -> Result<Vec<SmoothnessEstimate>> {
    let mut out = Vec::new();
    for l in 1..=spec.intervals() {
        let w = probe_window(spec, l, probes);
        let r_l = spec.breakpoints()[l];
        let zw: Vec<f64> = w.iter().copied().filter(|s| r_l - s >= Z_CLAMP).collect();
        out.push(z_blowup_exponent(sol, l, &zw, p)?);
        out.push(y_increment_exponent(sol, l, &w, p)?);
        out.push(residual_exponent(sol, l, &w, p)?);
    }
    Ok(out)
}

/// Pilot estimate of `θ` from residual decay on a smooth-spec probe grid.
pub fn estimate_smoothness(scenario: &Scenario) -> Result<(SmoothnessSpec, Vec<SmoothnessEstimate>)> {
    let uniform = scenario.uniform_spec()?;
    let probes = scenario.probes.clone().unwrap_or_default();
    let grid = probe_grid(&uniform, &probes)?;
    let sol = solve_on(scenario, &uniform, &grid, scenario.seeds[0])?;
    let mut fits = Vec::new();
    for l in 1..=uniform.intervals() {
        fits.push(residual_exponent(&sol, l, &probe_window(&uniform, l, &probes), scenario.p)?);
    }
    let theta = fits
        .iter()
        .map(|f| f.theta_hat.clamp(ESTIMATE_RANGE.0, ESTIMATE_RANGE.1))
        .collect();
    Ok((uniform.with_theta(theta)?, fits))
}

fn slope_of(ns: &[f64], vs: &[f64]) -> (f64, f64) {
    match log_log_fit(ns, vs) {
        Ok(v) => v,
        Err(_) => (f64::NAN, f64::NAN),
    }
}

fn band(vs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = vs.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi / lo
}

/// Slopes per (net, seed) over the scenario's sizes.
pub fn summarize(scenario: &Scenario, cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &net in &scenario.nets {
        for &seed in &scenario.seeds {
            let mut cs: Vec<&CellResult> = cells.iter().filter(|c| c.net == net && c.seed == seed).collect();
            cs.sort_by_key(|c| c.n);
            if cs.len() < 2 {
                continue;
            }
            let ns: Vec<f64> = cs.iter().map(|c| c.n as f64).collect();
            let col = |f: &dyn Fn(&CellResult) -> f64| -> Vec<f64> { cs.iter().map(|c| f(c)).collect() };
            let (var_slope, var_slope_se) = slope_of(&ns, &col(&|c| c.variation.total));
            let (y_slope, y_slope_se) = slope_of(&ns, &col(&|c| c.variation.y_component));
            let (z_slope, z_slope_se) = slope_of(&ns, &col(&|c| c.variation.z_component));
            let (spline_slope, spline_slope_se) = slope_of(&ns, &col(&|c| c.spline.sup_error));
            rows.push(SummaryRow {
                scenario: scenario.name.clone(),
                scenario_hash: scenario.hash(),
                version: VERSION.into(),
                net,
                seed,
                sizes: cs.len(),
                var_slope,
                var_slope_se,
                y_slope,
                y_slope_se,
                z_slope,
                z_slope_se,
                spline_slope,
                spline_slope_se,
                sqrt_n_var_band: band(cs.iter().map(|c| (c.n as f64).sqrt() * c.variation.total)),
                sqrt_n_spline_band: band(cs.iter().map(|c| (c.n as f64).sqrt() * c.spline.sup_error)),
            });
        }
    }
    rows
}

fn cell_file(net: NetKind, n: usize, seed: u64) -> String {
    format!("cells/{}_n{}_s{}.json", net, n, seed)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Runs every cell of `scenario` and writes the outputs under `out`.
///
/// Outputs: `cells/*.json`, `report.csv`, `report.json`, `summary.csv`,
/// `probes.csv` (when probes are configured) and `manifest.json`.
pub fn run(scenario: &Scenario, out: &Path, opts: &RunOptions) -> Result<RunOutput> {
    scenario.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out.join("cells"))?;
    let manifest_path = out.join("manifest.json");
    let hash = scenario.hash();

    let previous = if opts.resume && manifest_path.exists() {
        let m = RunManifest::load(&manifest_path)?;
        if m.scenario_hash != hash {
            return Err(Error::Argument(format!(
                "manifest in {} belongs to scenario {}, not {}",
                out.display(),
                m.scenario_hash,
                hash
            )));
        }
        Some(m)
    } else {
        None
    };

    let (spec, pilot, estimated) = match (&previous, scenario.declared_spec()?) {
        (_, Some(s)) => (s, Vec::new(), false),
        (Some(RunManifest { smoothness: Some(sm), .. }), None) => {
            let s = SmoothnessSpec::new(sm.breakpoints.clone(), sm.theta.clone())?;
            (s, sm.pilot.clone(), true)
        }
        (_, None) => {
            let (s, fits) = estimate_smoothness(scenario)?;
            (s, fits, true)
        }
    };
    if estimated && opts.log {
        eprintln!("[{}] estimated theta = {:?}", scenario.name, spec.theta());
    }
    let net_spec = scenario.net_spec(&spec)?;
    let smoothness = SmoothnessUsed {
        breakpoints: spec.breakpoints().to_vec(),
        theta: spec.theta().to_vec(),
        net_theta: net_spec.theta().to_vec(),
        estimated,
        pilot,
    };

    let mut manifest = RunManifest {
        scenario: scenario.name.clone(),
        scenario_hash: hash.clone(),
        version: VERSION.into(),
        seeds: scenario.seeds.clone(),
        threads: rayon::current_num_threads(),
        complete: false,
        smoothness: Some(smoothness),
        cells: Vec::new(),
        files: Vec::new(),
        wall_clock_s: 0.0,
        config: scenario.to_toml(),
    };

    let mut cells = Vec::new();
    for &net in &scenario.nets {
        for &n in &scenario.n {
            for &seed in &scenario.seeds {
                let file = cell_file(net, n, seed);
                let done = previous
                    .as_ref()
                    .and_then(|m| m.cells.iter().find(|c| c.file == file))
                    .cloned();
                if let Some(rec) = done {
                    let cell: CellResult = serde_json::from_str(&fs::read_to_string(out.join(&file))?)?;
                    if opts.log {
                        eprintln!("[{}] {} n={} seed={} resumed", scenario.name, net, n, seed);
                    }
                    cells.push(cell);
                    manifest.cells.push(rec);
                    continue;
                }
                let t0 = Instant::now();
                let cell = run_cell(scenario, &spec, &net_spec, net, n, seed)?;
                let secs = t0.elapsed().as_secs_f64();
                write_json(&out.join(&file), &cell)?;
                if opts.log {
                    eprintln!(
                        "[{}] {} n={} seed={} var={:.6} spline={:.6} ({:.1}s)",
                        scenario.name, net, n, seed, cell.variation.total, cell.spline.sup_error, secs
                    );
                }
                cells.push(cell);
                manifest.cells.push(CellRecord {
                    net,
                    n,
                    seed,
                    file,
                    wall_clock_s: secs,
                });
                write_json(&manifest_path, &manifest)?;
            }
        }
    }

    let mut probes = Vec::new();
    if let Some(section) = &scenario.probes {
        let grid = probe_grid(&spec, section)?;
        for &seed in &scenario.seeds {
            let sol = solve_on(scenario, &spec, &grid, seed)?;
            for e in probe_solution(&sol, &spec, section, scenario.p)? {
                probes.push(ProbeRow {
                    scenario: scenario.name.clone(),
                    scenario_hash: hash.clone(),
                    version: VERSION.into(),
                    seed,
                    l: e.l,
                    probe: serde_json::to_value(e.probe)?.as_str().unwrap_or_default().to_string(),
                    theta_hat: e.theta_hat,
                    theta_se: e.theta_se,
                    slope: e.slope,
                    constant: e.constant,
                    unreliable: e.unreliable,
                });
            }
        }
    }

    let rows: Vec<ReportRow> = cells.iter().map(ReportRow::from).collect();
    let summary = summarize(scenario, &cells);
    write_csv(out.join("report.csv"), &rows)?;
    write_json(&out.join("report.json"), &cells)?;
    write_csv(out.join("summary.csv"), &summary)?;
    let mut files = vec!["report.csv".to_string(), "report.json".into(), "summary.csv".into()];
    if scenario.probes.is_some() {
        write_csv(out.join("probes.csv"), &probes)?;
        files.push("probes.csv".into());
    }
    files.extend(manifest.cells.iter().map(|c| c.file.clone()));
    manifest.files = files;
    manifest.complete = true;
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    write_json(&manifest_path, &manifest)?;
    Ok(RunOutput {
        manifest,
        cells,
        summary,
        probes,
    })
}

/// Output files of a manifest's run, relative to `out`.
pub fn output_paths(manifest: &RunManifest, out: &Path) -> Vec<PathBuf> {
    manifest.files.iter().map(|f| out.join(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"
paths = 4096
seeds = [1, 2]
n = [4, 8]
refine = 4

[model]
kind = "brownian"

[terminal]
kind = "linear"

[smoothness]
breakpoints = [0.0, 1.0]
theta = [1.0]
"#;

    #[test]
    fn minimal_scenario_runs() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::from_toml(MINIMAL).unwrap();
        let out = run(&s, dir.path(), &RunOptions::default()).unwrap();
        assert_eq!(out.cells.len(), 4);
        assert!(out.manifest.complete);
        let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 5);
        assert!(report.lines().skip(1).all(|l| l.contains(&s.hash()) && l.contains(VERSION)));
        assert!(!report.contains('\r'));
        // Y-component of X = W scales as √Δ_max.
        for row in &out.summary {
            assert!((row.y_slope + 0.5).abs() < 0.1, "{:?}", row);
            assert!(row.var_slope_se.is_nan());
        }
        for f in output_paths(&out.manifest, dir.path()) {
            assert!(f.exists(), "{}", f.display());
        }
    }

    #[test]
    fn resume_reuses_cells_and_reproduces_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::from_toml(MINIMAL).unwrap();
        run(&s, dir.path(), &RunOptions::default()).unwrap();
        let before = fs::read(dir.path().join("report.csv")).unwrap();
        // Drop one cell from the manifest to simulate an interrupted run.
        let mut m = RunManifest::load(dir.path().join("manifest.json")).unwrap();
        m.cells.pop();
        m.complete = false;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        let out = run(&s, dir.path(), &RunOptions { resume: true, log: false }).unwrap();
        assert_eq!(out.manifest.cells.len(), 4);
        assert_eq!(fs::read(dir.path().join("report.csv")).unwrap(), before);

        let other = Scenario::from_toml(&MINIMAL.replace("seeds = [1, 2]", "seeds = [5, 6]")).unwrap();
        assert!(run(&other, dir.path(), &RunOptions { resume: true, log: false }).is_err());
    }

    #[test]
    fn thread_count_does_not_change_outputs() {
        let s = Scenario::from_toml(&MINIMAL.replace("seeds = [1, 2]", "seeds = [7]")).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        with_threads(1, || run(&s, a.path(), &RunOptions::default()).unwrap()).unwrap();
        with_threads(4, || run(&s, b.path(), &RunOptions::default()).unwrap()).unwrap();
        for f in ["report.csv", "report.json", "summary.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f);
        }
    }
}
