//! Built-in experiment presets, one per acceptance criterion.
//!
//! Each preset runs a fixed experiment and returns named checks with the
//! measured value, the target and a pass flag. `Scale::Smoke` shrinks path
//! counts and grids so a preset finishes in seconds; its checks are not
//! expected to pass at that scale.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::run::{probe_grid, probe_solution, write_json, VERSION};
use super::scenario::{NetKind, ProbeSection};
use crate::analysis::{
    empirical_norm, log_log_fit, rate_slope, residual_samples, smoothness_from_residuals, spline_error,
    stability_gap, variation, Probe, ProbePoint,
};
use crate::bsde::{gradient_via_weights, solve, Generator, Scheme, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward::{malliavin_weight_order1, simulate, simulate_mixed, ForwardModel, MixingSchedule};
use crate::gaussian_oracle::{cond_residual_norm, expand, z_norm, TerminalFunction1D, DEFAULT_NODES, DEFAULT_ORDER};
use crate::io::write_csv;
use crate::regression::{Basis, RegressionConfig};
use crate::rng::{philox4x32, Stream};
use crate::timenets::{build_theta_net, build_uniform_net, refine_net, SmoothnessSpec, TimeNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Smoke,
}

impl Scale {
    fn paths(self, full_log2: u32) -> usize {
        match self {
            Scale::Full => 1 << full_log2,
            Scale::Smoke => 1 << 12,
        }
    }

    fn is_full(self) -> bool {
        self == Scale::Full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub value: f64,
    pub target: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: String,
    pub scale: Scale,
    pub version: String,
    pub checks: Vec<Check>,
    /// Diagnostic values that are reported but never judged.
    pub notes: Vec<String>,
}

impl PresetReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub struct Preset {
    pub name: &'static str,
    pub criteria: &'static [u32],
    pub title: &'static str,
    run: fn(Scale) -> Result<PresetReport>,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "net-correctness",
        criteria: &[1],
        title: "theta nets match the closed-form knots; theta = 1 is the uniform net",
        run: net_correctness,
    },
    Preset {
        name: "oracle-exactness",
        criteria: &[2],
        title: "Hermite-series Z increments for h_2 and Parseval for built-in g",
        run: oracle_exactness,
    },
    Preset {
        name: "solver-vs-oracle",
        criteria: &[3],
        title: "regression solver Z norms and residuals against the Gaussian oracle",
        run: solver_vs_oracle,
    },
    Preset {
        name: "exponent-recovery",
        criteria: &[4],
        title: "residual-decay exponents from the quadrature oracle",
        run: exponent_recovery,
    },
    Preset {
        name: "equivalence-consistency",
        criteria: &[5],
        title: "Z blow-up, Y increment and residual probes agree",
        run: equivalence_consistency,
    },
    Preset {
        name: "rate-restoration",
        criteria: &[6, 7],
        title: "variation and spline rates on theta' = 0.4 nets against uniform nets",
        run: rate_restoration,
    },
    Preset {
        name: "spline-bound",
        criteria: &[7],
        title: "sqrt(n) times the adapted-spline error stays bounded on theta nets",
        run: rate_restoration,
    },
    Preset {
        name: "mixing-stability",
        criteria: &[8],
        title: "forward-path gaps under Brownian mixing",
        run: mixing_stability,
    },
    Preset {
        name: "malliavin-weights",
        criteria: &[9],
        title: "first-order Malliavin weights and the weight-based gradient",
        run: malliavin_weights,
    },
    Preset {
        name: "reproducibility",
        criteria: &[10],
        title: "every preset reruns bitwise with 1 and 8 worker threads",
        run: reproducibility,
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn run_preset(name: &str, scale: Scale) -> Result<PresetReport> {
    let p = find(name).ok_or_else(|| {
        Error::validation("preset", format!("unknown preset `{}`; known: {}", name, names().join(", ")))
    })?;
    let mut report = (p.run)(scale)?;
    report.preset = p.name.to_string();
    report.checks.retain(|c| p.criteria.contains(&c.criterion));
    Ok(report)
}

/// Manifest of a preset run; rerunning it reproduces every listed file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetManifest {
    pub preset: String,
    pub scale: Scale,
    pub version: String,
    pub threads: usize,
    pub files: Vec<String>,
    pub wall_clock_s: f64,
}

/// Runs a preset and writes `preset.json`, `checks.csv` and `manifest.json` under `out`.
pub fn run_preset_to(name: &str, scale: Scale, out: &Path) -> Result<(PresetReport, PresetManifest)> {
    let t0 = Instant::now();
    let report = run_preset(name, scale)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("preset.json"), &report)?;
    write_csv(out.join("checks.csv"), &report.checks)?;
    let manifest = PresetManifest {
        preset: report.preset.clone(),
        scale,
        version: VERSION.into(),
        threads: rayon::current_num_threads(),
        files: vec!["preset.json".into(), "checks.csv".into()],
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok((report, manifest))
}

fn report(checks: Vec<Check>, notes: Vec<String>, scale: Scale) -> PresetReport {
    PresetReport {
        preset: String::new(),
        scale,
        version: VERSION.into(),
        checks,
        notes,
    }
}

fn check(criterion: u32, name: impl Into<String>, value: f64, target: impl Into<String>, pass: bool) -> Check {
    Check {
        criterion,
        name: name.into(),
        value,
        target: target.into(),
        pass,
    }
}

fn unit_spec(theta: f64) -> SmoothnessSpec {
    SmoothnessSpec::new(vec![0.0, 1.0], vec![theta]).expect("valid spec")
}

fn pwl(bins: usize) -> RegressionConfig {
    RegressionConfig {
        basis: Basis::PiecewiseLinear { bins },
        ..Default::default()
    }
}

fn brownian() -> ForwardModel {
    ForwardModel::brownian(1).expect("d = 1")
}

/// Deterministic uniform draws in `[0, 1)` for the property suites.
struct Draws {
    counter: u32,
}

impl Draws {
    fn next(&mut self) -> f64 {
        self.counter += 1;
        let out = philox4x32([self.counter, 0, 0, 0], [0x5eed, Stream::W as u32]);
        out[0] as f64 / 4294967296.0
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.next() * n as f64) as usize).min(n - 1)
    }
}

fn net_correctness(scale: Scale) -> Result<PresetReport> {
    let cases = if scale.is_full() { 500 } else { 40 };
    let mut draws = Draws { counter: 0 };
    let mut worst = 0.0f64;
    let mut uniform_equal = true;
    let mut degenerate = 0;
    for _ in 0..cases {
        let l = 1 + draws.below(3);
        let n = 1 + draws.below(64);
        let mut bps = vec![0.0];
        for _ in 0..l {
            bps.push(bps.last().unwrap() + 0.1 + draws.next());
        }
        let theta: Vec<f64> = (0..l).map(|_| (1 + draws.below(10)) as f64 / 10.0).collect();
        let spec = SmoothnessSpec::new(bps.clone(), theta.clone())?;
        // Closed form written out independently of the library's knot helper.
        let mut expected = vec![0.0];
        for li in 1..=l {
            let (a, b) = (bps[li - 1], bps[li]);
            for k in (li - 1) * n + 1..=li * n {
                let frac = (k - (li - 1) * n) as f64 / n as f64;
                expected.push(a + (b - a) * (1.0 - (1.0 - frac).powf(1.0 / theta[li - 1])));
            }
        }
        let tol = 1e-12 * bps[l];
        let collide = expected.windows(2).any(|w| w[1] - w[0] <= tol);
        let net = match build_theta_net(&spec, n) {
            Ok(net) if !collide => net,
            Err(Error::Validation { .. }) if collide => {
                degenerate += 1;
                continue;
            }
            _ => {
                worst = f64::INFINITY;
                continue;
            }
        };
        if expected.len() != net.len() {
            worst = f64::INFINITY;
            continue;
        }
        for (x, y) in net.knots().iter().zip(&expected) {
            worst = worst.max((x - y).abs());
        }
        let smooth = SmoothnessSpec::uniform(bps)?;
        uniform_equal &= build_theta_net(&smooth, n)? == build_uniform_net(&smooth, n)?;
    }
    Ok(report(
        vec![
            check(1, "max |knot - closed form|", worst, "<= 1e-12", worst <= 1e-12),
            check(
                1,
                "theta = 1 net equals uniform net",
                if uniform_equal { 1.0 } else { 0.0 },
                "bitwise equal",
                uniform_equal,
            ),
        ],
        vec![format!(
            "{} random (L, n, theta) cases; {} had closed-form knots closer than the dedupe tolerance and were rejected",
            cases, degenerate
        )],
        scale,
    ))
}

fn builtin_functions() -> Result<Vec<TerminalFunction1D>> {
    Ok(vec![
        TerminalFunction1D::linear(),
        TerminalFunction1D::hermite(2),
        TerminalFunction1D::hermite(5),
        TerminalFunction1D::indicator(0.0),
        TerminalFunction1D::indicator(0.5),
        TerminalFunction1D::power(0.25)?,
        TerminalFunction1D::power(0.5)?,
    ])
}

fn oracle_exactness(scale: Scale) -> Result<PresetReport> {
    let h2 = expand(&TerminalFunction1D::hermite(2), DEFAULT_ORDER, DEFAULT_NODES)?;
    let mut worst = 0.0f64;
    for (s, t) in [(0.0, 0.1), (0.1, 0.5), (0.25, 0.75), (0.5, 0.99), (0.0, 0.999)] {
        let v = h2.z_increment_l2(s, t)?;
        worst = worst.max((v * v - 2.0 * (t - s)).abs());
    }
    let mut parseval = 0.0f64;
    let mut names = Vec::new();
    for g in builtin_functions()? {
        parseval = parseval.max(expand(&g, DEFAULT_ORDER, DEFAULT_NODES)?.parseval_defect());
        names.push(g.to_string());
    }
    Ok(report(
        vec![
            check(2, "h_2: max |‖Z_t − Z_s‖² − 2(t − s)|", worst, "<= 1e-10", worst <= 1e-10),
            check(2, "max Parseval defect over built-in g", parseval, "<= 1e-10", parseval <= 1e-10),
        ],
        vec![format!("built-in g: {}", names.join(", "))],
        scale,
    ))
}

fn solver_vs_oracle(scale: Scale) -> Result<PresetReport> {
    let paths = scale.paths(16);
    let seeds: &[u64] = if scale.is_full() { &[1, 2, 3] } else { &[1] };
    let times = [0.25, 0.5, 0.75];
    let model = brownian();
    // With f = 0, Z is a martingale, so the one-step estimate is unbiased for Z_{t_i}
    // on any net; the coarsest net holding the measurement times has the
    // fewest regressions feeding noise back into Y.
    let grid = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0])?, 4)?;
    let reg = pwl(64);
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    for g in [TerminalFunction1D::hermite(1), TerminalFunction1D::hermite(2), TerminalFunction1D::indicator(0.0)] {
        let t0 = Instant::now();
        let term = TerminalCondition::at_horizon(g.clone(), 1.0);
        let (mut z_worst, mut r_worst) = (0.0f64, 0.0f64);
        for &seed in seeds {
            let ens = simulate(&model, &grid, paths, seed, false)?;
            let sol = solve(&model, &Generator::zero(), &term, &grid, &ens, &reg, Scheme::Explicit)?;
            for &t in &times {
                let k = grid.index_of(t).expect("t is a knot");
                let z = empirical_norm(sol.z(k), 2.0).value;
                z_worst = z_worst.max((z / z_norm(&g, t, 2.0)? - 1.0).abs());
            }
            for q in residual_samples(&sol, 1, &times, 2.0)? {
                let exact = cond_residual_norm(&g, q.s, 2.0)?.value;
                r_worst = r_worst.max((q.value / exact - 1.0).abs());
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        checks.push(check(3, format!("{}: max rel. error ‖Z_t‖_2", g), z_worst, "<= 0.03", z_worst <= 0.03));
        checks.push(check(
            3,
            format!("{}: max rel. error ‖Y_1 − Ê(Y_1|F_s)‖_2", g),
            r_worst,
            "<= 0.03",
            r_worst <= 0.03,
        ));
        if scale.is_full() {
            checks.push(check(3, format!("{}: runtime seconds", g), secs, "< 60", secs < 60.0));
        }
    }
    notes.push(format!("{} paths, seeds {:?}, uniform n = 4, piecewise-linear basis with 64 bins", paths, seeds));
    notes.push(
        "on a uniform n = 32 net the accumulated regression noise puts the h_2 error at t = 0.25 above 3% on about \
         a quarter of seeds"
            .into(),
    );
    Ok(report(checks, notes, scale))
}

fn oracle_points(g: &TerminalFunction1D, window: &[f64]) -> Result<Vec<ProbePoint>> {
    window
        .iter()
        .map(|&s| {
            let q = cond_residual_norm(g, s, 2.0)?;
            Ok(ProbePoint {
                s,
                value: q.value,
                se: q.error,
            })
        })
        .collect()
}

fn exponent_recovery(scale: Scale) -> Result<PresetReport> {
    let window = crate::analysis::geometric_window(0.0, 1.0, 2..=10);
    let cases = [
        (TerminalFunction1D::indicator(0.0), 0.5, 0.05),
        (TerminalFunction1D::power(0.25)?, 0.75, 0.05),
        (TerminalFunction1D::linear(), 1.0, 0.02),
    ];
    let mut checks = Vec::new();
    for (g, target, tol) in cases {
        let est = smoothness_from_residuals(1, 0.0, 1.0, &oracle_points(&g, &window)?)?;
        checks.push(check(
            4,
            format!("{}: theta_hat from residual decay", g),
            est.theta_hat,
            format!("{} ± {}", target, tol),
            (est.theta_hat - target).abs() <= tol,
        ));
    }
    Ok(report(checks, vec!["window s = 1 − 2^{-j}, j = 2..10, p = 2".into()], scale))
}

fn equivalence_consistency(scale: Scale) -> Result<PresetReport> {
    let paths = scale.paths(16);
    let section = ProbeSection {
        window: [2, 8],
        n: if scale.is_full() { 64 } else { 16 },
    };
    let model = brownian();
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    for (g, theta) in [(TerminalFunction1D::indicator(0.0), 0.5), (TerminalFunction1D::power(0.25)?, 0.75)] {
        let spec = unit_spec(theta);
        let grid = probe_grid(&spec, &section)?;
        let ens = simulate(&model, &grid, paths, 1, false)?;
        let term = TerminalCondition::at_horizon(g.clone(), 1.0);
        let sol = solve(&model, &Generator::zero(), &term, &grid, &ens, &pwl(64), Scheme::Explicit)?;
        let ests = probe_solution(&sol, &spec, &section, 2.0)?;
        let hats: Vec<f64> = ests.iter().map(|e| e.theta_hat).collect();
        let spread = hats.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - hats.iter().cloned().fold(f64::INFINITY, f64::min);
        for e in &ests {
            let label = match e.probe {
                Probe::ZBlowup => "Z blow-up",
                Probe::YIncrement => "Y increment",
                Probe::ResidualDecay => "residual decay",
            };
            notes.push(format!("{}: {} theta_hat = {:.4} ± {:.4}", g, label, e.theta_hat, e.theta_se));
        }
        checks.push(check(5, format!("{}: max − min of the three theta_hat", g), spread, "<= 0.1", spread <= 0.1));
    }
    notes.push(format!(
        "{} paths, theta net n = {} with window j = 2..8 inserted, piecewise-linear basis with 64 bins",
        paths, section.n
    ));
    Ok(report(checks, notes, scale))
}

/// `var_2` of the indicator solution with `X = W` on `net`, from closed forms.
///
/// `E[Y_t²] = 1/4 + arcsin(t)/(2π)` and `E[Z_t²] = 1/(2π√(1−t²))`; `Z` is a
/// martingale so `Z̄` on an interval is `Z` at its left end.
pub fn indicator_variation_exact(net: &TimeNet) -> f64 {
    let k = net.knots();
    let mut y_sup = 0.0f64;
    let mut z_sq = 0.0;
    for w in k.windows(2) {
        let (a, b) = (w[0], w[1]);
        let inc = (b.asin() - a.asin()) / (2.0 * PI);
        y_sup = y_sup.max(inc.sqrt());
        z_sq += inc - (b - a) / (2.0 * PI * (1.0 - a * a).sqrt());
    }
    y_sup + z_sq.sqrt()
}

fn rate_restoration(scale: Scale) -> Result<PresetReport> {
    let paths = scale.paths(16);
    let ns: &[usize] = &[4, 8, 16, 32];
    let refine = if scale.is_full() { 8 } else { 2 };
    let model = brownian();
    let term = TerminalCondition::at_horizon(TerminalFunction1D::indicator(0.0), 1.0);
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    for (kind, spec) in [(NetKind::Theta, unit_spec(0.4)), (NetKind::Uniform, unit_spec(1.0))] {
        let (mut var, mut spl, mut exact) = (Vec::new(), Vec::new(), Vec::new());
        for &n in ns {
            let coarse = build_theta_net(&spec, n)?;
            let fine = refine_net(&coarse, refine)?;
            let ens = simulate(&model, &fine, paths, 1, false)?;
            let sol = solve(&model, &Generator::zero(), &term, &fine, &ens, &pwl(64), Scheme::Explicit)?;
            let v = variation(&sol, &coarse, 2.0)?;
            let s = spline_error(&sol, &coarse, 2.0)?;
            notes.push(format!(
                "{} n = {}: var = {:.5} ± {:.5} (Y {:.5}, Z {:.5}), spline = {:.5}",
                kind, n, v.total, v.total_se, v.y_component, v.z_component, s.sup_error
            ));
            var.push((n as f64, v.total));
            spl.push((n as f64, s.sup_error));
            exact.push((n as f64, indicator_variation_exact(&coarse)));
        }
        let (slope, se) = rate_slope(&var)?;
        let (exact_slope, _) = rate_slope(&exact)?;
        notes.push(format!(
            "{}: var slope {:.4} ± {:.4}; closed-form var slope on the same nets {:.4}",
            kind, slope, se, exact_slope
        ));
        let band = |t: &[(f64, f64)]| {
            let v: Vec<f64> = t.iter().map(|(n, x)| n.sqrt() * x).collect();
            v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        match kind {
            NetKind::Theta => {
                let b = band(&var);
                checks.push(check(6, "theta' = 0.4: max/min of sqrt(n)·var_2", b, "<= 2", b <= 2.0));
                checks.push(check(
                    6,
                    "theta' = 0.4: slope of log var_2 vs log n",
                    slope,
                    "-0.50 ± 0.07",
                    (slope + 0.5).abs() <= 0.07,
                ));
                let sb = band(&spl);
                checks.push(check(7, "theta' = 0.4: max/min of sqrt(n)·spline error", sb, "<= 2", sb <= 2.0));
                let (ss, _) = rate_slope(&spl)?;
                notes.push(format!("theta: spline slope {:.4}", ss));
            }
            NetKind::Uniform => {
                checks.push(check(
                    6,
                    "uniform: slope of log var_2 vs log n",
                    slope,
                    "-0.25 ± 0.07",
                    (slope + 0.25).abs() <= 0.07,
                ));
            }
        }
    }
    notes.push(format!(
        "{} paths, seed 1, fine grid = net refined {}x, piecewise-linear basis with 64 bins",
        paths, refine
    ));
    Ok(report(checks, notes, scale))
}

fn mixing_stability(scale: Scale) -> Result<PresetReport> {
    let paths = scale.paths(16);
    let ts = [0.25, 0.5, 0.75];
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    let zero = Generator::zero();

    // Brownian: observed at 0, t and 1 only, X^η_1 − X_1 ~ N(0, 2(1 − t)).
    let model = brownian();
    let term = TerminalCondition::at_horizon(TerminalFunction1D::linear(), 1.0);
    let reg = RegressionConfig::default();
    for &t in &ts {
        let grid = TimeNet::from_knots(vec![0.0, t, 1.0], &[0.0, 1.0])?;
        let pair = simulate_mixed(&model, &grid, &MixingSchedule::indicator(t, 1.0)?, paths, 1)?;
        let g = pair.base.grid().clone();
        let base = solve(&model, &zero, &term, &g, &pair.base, &reg, Scheme::Explicit)?;
        let mixed = solve(&model, &zero, &term, &g, &pair.mixed, &reg, Scheme::Explicit)?;
        let gap = stability_gap(&pair, &base, &mixed, 2.0)?;
        let exact = (2.0 * (1.0 - t)).sqrt();
        let dev = (gap.x_sup_gap.value - exact).abs() / gap.x_sup_gap.se;
        checks.push(check(
            8,
            format!("brownian t = {}: |‖sup|X^η − X|‖_2 − sqrt(2(1−t))| / SE", t),
            dev,
            "<= 3",
            dev <= 3.0,
        ));
        notes.push(format!(
            "brownian t = {}: gap {:.5} ± {:.5}, exact {:.5}",
            t, gap.x_sup_gap.value, gap.x_sup_gap.se, exact
        ));
    }

    // GBM on a uniform grid with t inserted.
    let gbm = ForwardModel::geometric(vec![0.05], vec![0.3], vec![1.0])?;
    let base_grid = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0])?, if scale.is_full() { 64 } else { 16 })?;
    let (mut xs, mut gaps, mut consts) = (Vec::new(), Vec::new(), Vec::new());
    for &t in &ts {
        let pair = simulate_mixed(&gbm, &base_grid, &MixingSchedule::indicator(t, 1.0)?, paths, 2)?;
        let g = pair.base.grid().clone();
        let base = solve(&gbm, &zero, &term, &g, &pair.base, &reg, Scheme::Explicit)?;
        let mixed = solve(&gbm, &zero, &term, &g, &pair.mixed, &reg, Scheme::Explicit)?;
        let gap = stability_gap(&pair, &base, &mixed, 2.0)?;
        xs.push(1.0 - t);
        gaps.push(gap.x_sup_gap.value);
        consts.push(gap.constant());
        notes.push(format!(
            "gbm t = {}: X gap {:.5}, Y gap {:.5}, Z gap {:.5}, constant {:.4}",
            t,
            gap.x_sup_gap.value,
            gap.y_sup_gap.value,
            gap.z_integral_gap.value,
            gap.constant()
        ));
    }
    let (slope, _) = log_log_fit(&xs, &gaps)?;
    checks.push(check(8, "gbm: slope of log X gap vs log(1 − t)", slope, "0.5 ± 0.1", (slope - 0.5).abs() <= 0.1));
    let spread = consts.iter().cloned().fold(0.0, f64::max) / consts.iter().cloned().fold(f64::INFINITY, f64::min);
    notes.push(format!("gbm: fitted constant max/min over t = {:.4}", spread));
    Ok(report(checks, notes, scale))
}

fn malliavin_weights(scale: Scale) -> Result<PresetReport> {
    let paths = scale.paths(16);
    let model = brownian();
    let grid = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0])?, 2)?;
    let (r, big_r) = (1, 2);
    let span = 0.5;
    let ens = simulate(&model, &grid, paths, 1, true)?;
    let w = malliavin_weight_order1(&ens, r, big_r)?;
    let bitwise = (0..paths).all(|p| {
        let mut acc = 0.0;
        for k in r..big_r {
            acc += ens.increment(p, k)[0];
        }
        w[p] == acc / span
    });
    let mut checks = vec![check(
        9,
        "weight equals (W_R − W_r)/(R − r)",
        if bitwise { 1.0 } else { 0.0 },
        "bitwise equal",
        bitwise,
    )];

    // E[N h(X_r)] = 0 for test functions of the state at r.
    let tests: [(&str, fn(f64) -> f64); 3] = [("1", |_| 1.0), ("X_r", |x| x), ("1{X_r > 0}", |x| if x > 0.0 { 1.0 } else { 0.0 })];
    for (label, h) in tests {
        let v: Vec<f64> = (0..paths).map(|p| w[p] * h(ens.state(p, r)[0])).collect();
        let mean = v.iter().sum::<f64>() / paths as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (paths as f64 - 1.0)).sqrt();
        let z = mean.abs() / (sd / (paths as f64).sqrt());
        checks.push(check(9, format!("|E[N·{}]| / SE", label), z, "<= 3", z <= 3.0));
    }
    let norm = empirical_norm(&w, 2.0).value;
    let rel = (norm * span.sqrt() - 1.0).abs();
    checks.push(check(9, "‖N‖_2 relative to 1/sqrt(R − r)", rel, "<= 0.01", rel <= 0.01));

    let grad = gradient_via_weights(&ens, |x| if x[0] >= 0.0 { 1.0 } else { 0.0 }, r, big_r, &pwl(32))?;
    let (v, se) = grad.at(&[0.0], 0);
    let exact = 1.0 / (2.0 * PI * span).sqrt();
    let dev = (v - exact).abs() / se;
    checks.push(check(9, "indicator ∇F(r, 0): |estimate − exact| / SE", dev, "<= 3", dev <= 3.0));
    Ok(report(
        checks,
        vec![
            format!("{} paths, r = 0.5, R = 1", paths),
            format!("∇F(r, 0) = {:.5} ± {:.5}, exact {:.5}", v, se, exact),
        ],
        scale,
    ))
}

/// Reruns every other preset at smoke scale on 1 and 8 threads and compares the JSON bytes.
fn reproducibility(scale: Scale) -> Result<PresetReport> {
    let _ = scale;
    let mut checks = Vec::new();
    for p in PRESETS.iter().filter(|p| p.name != "reproducibility" && p.name != "spline-bound") {
        let a = super::run::with_threads(1, || run_preset(p.name, Scale::Smoke))??;
        let b = super::run::with_threads(8, || run_preset(p.name, Scale::Smoke))??;
        let same = serde_json::to_vec(&a)? == serde_json::to_vec(&b)?;
        checks.push(check(
            10,
            format!("{}: identical output on 1 and 8 threads", p.name),
            if same { 1.0 } else { 0.0 },
            "bitwise equal",
            same,
        ));
    }
    Ok(report(checks, vec!["each preset rerun at smoke scale".into()], scale))
}
