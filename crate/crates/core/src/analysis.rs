//! Diagnostic functionals of solved BSDEs: `L_p`-variation, smoothness
//! exponent probes, adapted splines, mixing experiments and rate slopes.
//!
//! Every `L_p` norm over paths is the empirical moment `((1/M) Σ |·|^p)^{1/p}`
//! with a 32-block jackknife standard error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{zbar, BsdeSolution, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward::{simulate_mixed, ForwardModel, MixedPathPair, MixingSchedule};
use crate::timenets::TimeNet;

pub const JACKKNIFE_BLOCKS: usize = 32;
/// Relative standard error above which a probe point makes its fit unreliable.
pub const UNRELIABLE_REL_SE: f64 = 0.2;
/// Smallest distance to the breakpoint admitted by the `Z` blow-up probe.
pub const Z_CLAMP: f64 = 1e-3;

/// An empirical norm with its jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub se: f64,
}

impl NormEstimate {
    pub fn rel_se(&self) -> f64 {
        if self.value > 0.0 {
            self.se / self.value
        } else {
            f64::INFINITY
        }
    }
}

/// Block sums of `|x|^p`, enough to recompute a norm with any block left out.
#[derive(Debug, Clone)]
struct BlockPowers {
    p: f64,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl BlockPowers {
    fn new(p: f64, values: impl IndexedParallelIterator<Item = f64>) -> Self {
        let m = values.len();
        let blocks = JACKKNIFE_BLOCKS.min(m).max(1);
        let per = m.div_ceil(blocks);
        let mut sums = vec![0.0; blocks];
        let mut counts = vec![0; blocks];
        let pow: Vec<f64> = values.map(|v| v.abs().powf(p)).collect();
        for (b, chunk) in pow.chunks(per).enumerate() {
            sums[b] = chunk.iter().sum();
            counts[b] = chunk.len();
        }
        Self { p, sums, counts }
    }

    fn norm(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        (self.sums.iter().sum::<f64>() / n as f64).powf(1.0 / self.p)
    }

    fn leave_one_out(&self) -> Vec<f64> {
        let total: f64 = self.sums.iter().sum();
        let n: usize = self.counts.iter().sum();
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| ((total - s) / (n - c).max(1) as f64).powf(1.0 / self.p))
            .collect()
    }
}

/// Jackknife standard error from leave-one-block-out replicates.
fn jackknife_se(replicates: &[f64]) -> f64 {
    let b = replicates.len() as f64;
    if b < 2.0 {
        return f64::NAN;
    }
    let mean = replicates.iter().sum::<f64>() / b;
    ((b - 1.0) / b * replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>()).sqrt()
}

/// `((1/M) Σ |x|^p)^{1/p}` with jackknife standard error.
pub fn empirical_norm(values: &[f64], p: f64) -> NormEstimate {
    let bp = BlockPowers::new(p, values.par_iter().copied());
    NormEstimate {
        value: bp.norm(),
        se: jackknife_se(&bp.leave_one_out()),
    }
}

fn euclid(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(Error::Argument(format!("p must be in [2, ∞), got {}", p)));
    }
    Ok(())
}

/// Contribution of one coarse interval to `var_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalVariation {
    pub start: f64,
    pub end: f64,
    /// `sup_s ‖Y_s − Y_{start}‖_p` over fine knots `s ∈ (start, end]`.
    pub y_sup: f64,
    pub y_sup_time: f64,
    /// `Σ_s ‖Z_s − Z̄‖_p² Δs` over fine intervals inside.
    pub z_square: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub p: f64,
    pub coarse_knots: Vec<f64>,
    pub y_component: f64,
    pub z_component: f64,
    pub total: f64,
    pub y_se: f64,
    pub z_se: f64,
    pub total_se: f64,
    pub intervals: Vec<IntervalVariation>,
}

/// `var_p(ξ, f, τ)` for the coarse net `τ` measured on the solution's grid.
pub fn variation(fine: &BsdeSolution, coarse: &TimeNet, p: f64) -> Result<VariationReport> {
    check_p(p)?;
    let zb = zbar(fine, coarse)?;
    let idx = &zb.fine_index;
    let m = fine.n_paths();
    let d = fine.dim();
    let knots = fine.grid().knots();

    let mut intervals = Vec::with_capacity(coarse.intervals());
    let mut y_reps = vec![f64::NEG_INFINITY; JACKKNIFE_BLOCKS.min(m)];
    let mut y_component = 0.0f64;
    let mut z_square_total = 0.0;
    let mut z_reps = vec![0.0; JACKKNIFE_BLOCKS.min(m)];
    for j in 0..coarse.intervals() {
        let (a, b) = (idx[j], idx[j + 1]);
        let ya = fine.y(a);
        let mut y_sup = 0.0f64;
        let mut y_sup_time = knots[a];
        for s in a + 1..=b {
            let ys = fine.y(s);
            let bp = BlockPowers::new(p, (0..m).into_par_iter().map(|q| ys[q] - ya[q]));
            let v = bp.norm();
            if v > y_sup {
                y_sup = v;
                y_sup_time = knots[s];
            }
            for (r, l) in y_reps.iter_mut().zip(bp.leave_one_out()) {
                *r = r.max(l);
            }
        }
        y_component = y_component.max(y_sup);
        let zbar_j = zb.interval(j);
        let mut z_square = 0.0;
        for i in a..b {
            let zi = fine.z(i);
            let dt = fine.grid().step(i);
            let bp = BlockPowers::new(
                p,
                (0..m).into_par_iter().map(|q| {
                    let mut diff = [0.0; crate::forward::MAX_DIM];
                    for k in 0..d {
                        diff[k] = zi[q * d + k] - zbar_j[q * d + k];
                    }
                    euclid(&diff[..d])
                }),
            );
            z_square += bp.norm().powi(2) * dt;
            for (r, l) in z_reps.iter_mut().zip(bp.leave_one_out()) {
                *r += l * l * dt;
            }
        }
        z_square_total += z_square;
        intervals.push(IntervalVariation {
            start: knots[a],
            end: knots[b],
            y_sup,
            y_sup_time,
            z_square,
        });
    }
    let z_component = z_square_total.sqrt();
    let z_reps: Vec<f64> = z_reps.iter().map(|v| v.sqrt()).collect();
    let total_reps: Vec<f64> = y_reps.iter().zip(&z_reps).map(|(a, b)| a + b).collect();
    Ok(VariationReport {
        p,
        coarse_knots: coarse.knots().to_vec(),
        y_component,
        z_component,
        total: y_component + z_component,
        y_se: jackknife_se(&y_reps),
        z_se: jackknife_se(&z_reps),
        total_se: jackknife_se(&total_reps),
        intervals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// `‖Z_t‖_p ≲ (r_l − t)^{(θ−1)/2}`.
    ZBlowup,
    /// `‖Y_{r_l} − Y_s‖_p ≲ (r_l − s)^{θ/2}`.
    YIncrement,
    /// `‖Y_{r_l} − E(Y_{r_l} | F_s)‖_p ≲ (r_l − s)^{θ/2}`.
    ResidualDecay,
}

/// One measured point `(s, value ± se)` of a probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub s: f64,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub probe: Probe,
    /// 1-based breakpoint index.
    pub l: usize,
    pub theta_hat: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub theta_se: f64,
    pub window: Vec<f64>,
    pub points: Vec<ProbePoint>,
    /// `max value / (r_l − s)^{exponent}` over the window; diagnostic only.
    pub constant: f64,
    /// Some point has relative standard error above 20%.
    pub unreliable: bool,
}

/// Least-squares slope of `log y` against `log x`, with its standard error.
///
/// Two points give an exact line and a `NaN` standard error.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument("need at least two (x, y) pairs".into()));
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("log-log fit needs positive values, got {}", bad)));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let se = if lx.len() > 2 {
        let rss: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok((slope, se))
}

/// Fits the probe's power law in `r_l − s` and converts the slope to `θ̂_l`.
pub fn estimate_exponent(
    probe: Probe,
    l: usize,
    r_prev: f64,
    r_l: f64,
    points: &[ProbePoint],
) -> Result<SmoothnessEstimate> {
    if points.len() < 4 {
        return Err(Error::Argument("need at least four probe points".into()));
    }
    if points.windows(2).any(|w| w[0].s >= w[1].s) {
        return Err(Error::Argument("probe times must increase strictly".into()));
    }
    if points.iter().any(|q| q.s < r_prev || q.s >= r_l) {
        return Err(Error::Argument(format!(
            "probe window must lie in [{}, {})",
            r_prev, r_l
        )));
    }
    if points.iter().any(|q| q.value == 0.0) {
        return Err(Error::DegenerateFit(
            "zero probe values; the terminal value is deterministic".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|q| r_l - q.s).collect();
    let ys: Vec<f64> = points.iter().map(|q| q.value).collect();
    let (slope, slope_se) = log_log_fit(&xs, &ys)?;
    let (theta_hat, theta_se) = match probe {
        Probe::ZBlowup => (1.0 + 2.0 * slope, 2.0 * slope_se),
        Probe::YIncrement | Probe::ResidualDecay => (2.0 * slope, 2.0 * slope_se),
    };
    if !theta_hat.is_finite() {
        return Err(Error::DegenerateFit("non-finite exponent".into()));
    }
    let exponent = match probe {
        Probe::ZBlowup => (theta_hat - 1.0) / 2.0,
        _ => theta_hat / 2.0,
    };
    let constant = points
        .iter()
        .map(|q| q.value / (r_l - q.s).powf(exponent))
        .fold(0.0, f64::max);
    Ok(SmoothnessEstimate {
        probe,
        l,
        theta_hat,
        slope,
        slope_se,
        theta_se,
        window: points.iter().map(|q| q.s).collect(),
        points: points.to_vec(),
        constant,
        unreliable: points.iter().any(|q| q.se / q.value > UNRELIABLE_REL_SE),
    })
}

/// `θ̂_l` from samples of `‖Y_{r_l} − Ê(Y_{r_l}|F_s)‖_p` on `[r_{l−1}, r_l)`.
pub fn smoothness_from_residuals(
    l: usize,
    r_prev: f64,
    r_l: f64,
    points: &[ProbePoint],
) -> Result<SmoothnessEstimate> {
    estimate_exponent(Probe::ResidualDecay, l, r_prev, r_l, points)
}

/// Measurement times `r_l − (r_l − r_{l−1}) 2^{−j}` for `j ∈ js`.
pub fn geometric_window(r_prev: f64, r_l: f64, js: std::ops::RangeInclusive<i32>) -> Vec<f64> {
    js.map(|j| r_l - (r_l - r_prev) * 2f64.powi(-j)).collect()
}

fn breakpoint_pair(solution: &BsdeSolution, l: usize) -> Result<(f64, f64, usize)> {
    let bps = solution.grid().breakpoints();
    if l == 0 || l > bps.len() {
        return Err(Error::Argument(format!("breakpoint index {} out of range", l)));
    }
    let r_prev = if l == 1 { 0.0 } else { bps[l - 2] };
    Ok((r_prev, bps[l - 1], solution.grid().breakpoint_indices()[l - 1]))
}

fn knots_of(solution: &BsdeSolution, window: &[f64]) -> Result<Vec<usize>> {
    window
        .iter()
        .map(|&s| {
            solution
                .grid()
                .index_of(s)
                .ok_or_else(|| Error::Argument(format!("window time {} is not a grid knot", s)))
        })
        .collect()
}

/// `‖Z_t‖_p` at window knots and the resulting blow-up exponent.
pub fn z_blowup_exponent(solution: &BsdeSolution, l: usize, window: &[f64], p: f64) -> Result<SmoothnessEstimate> {
    check_p(p)?;
    let (r_prev, r_l, _) = breakpoint_pair(solution, l)?;
    if let Some(s) = window.iter().find(|&&s| r_l - s < Z_CLAMP) {
        return Err(Error::Argument(format!(
            "window time {} is closer than {} to the breakpoint {}",
            s, Z_CLAMP, r_l
        )));
    }
    let d = solution.dim();
    let points = knots_of(solution, window)?
        .into_iter()
        .zip(window)
        .map(|(k, &s)| {
            let z = solution.z(k);
            let norms: Vec<f64> = z.chunks(d).map(euclid).collect();
            let e = empirical_norm(&norms, p);
            ProbePoint { s, value: e.value, se: e.se }
        })
        .collect::<Vec<_>>();
    estimate_exponent(Probe::ZBlowup, l, r_prev, r_l, &points)
}

/// `‖Y_{r_l} − Y_s‖_p` at window knots.
pub fn y_increment_samples(solution: &BsdeSolution, l: usize, window: &[f64], p: f64) -> Result<Vec<ProbePoint>> {
    check_p(p)?;
    let (_, _, kr) = breakpoint_pair(solution, l)?;
    let yr = solution.y(kr);
    Ok(knots_of(solution, window)?
        .into_iter()
        .zip(window)
        .map(|(k, &s)| {
            let diff: Vec<f64> = solution.y(k).iter().zip(yr).map(|(a, b)| b - a).collect();
            let e = empirical_norm(&diff, p);
            ProbePoint { s, value: e.value, se: e.se }
        })
        .collect())
}

pub fn y_increment_exponent(solution: &BsdeSolution, l: usize, window: &[f64], p: f64) -> Result<SmoothnessEstimate> {
    let (r_prev, r_l, _) = breakpoint_pair(solution, l)?;
    let points = y_increment_samples(solution, l, window, p)?;
    estimate_exponent(Probe::YIncrement, l, r_prev, r_l, &points)
}

/// `‖Y_{r_l} − Ê(Y_{r_l}|F_s)‖_p` with `Ê` the solution's regression at `s`.
pub fn residual_samples(solution: &BsdeSolution, l: usize, window: &[f64], p: f64) -> Result<Vec<ProbePoint>> {
    check_p(p)?;
    let (_, _, kr) = breakpoint_pair(solution, l)?;
    let yr = solution.y(kr);
    knots_of(solution, window)?
        .into_iter()
        .zip(window)
        .map(|(k, &s)| {
            let fit = solution.project(yr, k)?;
            let diff: Vec<f64> = yr.iter().zip(&fit).map(|(a, b)| a - b).collect();
            let e = empirical_norm(&diff, p);
            Ok(ProbePoint { s, value: e.value, se: e.se })
        })
        .collect()
}

pub fn residual_exponent(solution: &BsdeSolution, l: usize, window: &[f64], p: f64) -> Result<SmoothnessEstimate> {
    let (r_prev, r_l, _) = breakpoint_pair(solution, l)?;
    let points = residual_samples(solution, l, window, p)?;
    smoothness_from_residuals(l, r_prev, r_l, &points)
}

/// Piecewise-linear interpolation of per-path knot values.
#[derive(Debug, Clone)]
pub struct AdaptedSpline {
    knots: Vec<f64>,
    n_paths: usize,
    /// `S_{t_k}`, knot-major.
    values: Vec<f64>,
}

impl AdaptedSpline {
    /// Spline through the solution's `Y` at the knots of `net`.
    pub fn from_solution(solution: &BsdeSolution, net: &TimeNet) -> Result<Self> {
        let idx = solution
            .grid()
            .embedding_of(net)
            .ok_or_else(|| Error::Argument("spline knots are not a subset of the solution grid".into()))?;
        let mut values = Vec::with_capacity(idx.len() * solution.n_paths());
        for &k in &idx {
            values.extend_from_slice(solution.y(k));
        }
        Ok(Self {
            knots: net.knots().to_vec(),
            n_paths: solution.n_paths(),
            values,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot_values(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_paths..(k + 1) * self.n_paths]
    }

    /// `S_t` on every path.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let n = self.knots.len();
        let seg = self.knots.partition_point(|&k| k <= t).clamp(1, n - 1);
        let (a, b) = (self.knots[seg - 1], self.knots[seg]);
        let w = ((t - a) / (b - a)).clamp(0.0, 1.0);
        let (va, vb) = (self.knot_values(seg - 1), self.knot_values(seg));
        if w == 0.0 {
            return va.to_vec();
        }
        if w == 1.0 {
            return vb.to_vec();
        }
        va.iter().zip(vb).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineError {
    pub p: f64,
    pub n_knots: usize,
    pub sup_error: f64,
    pub se: f64,
    pub sup_time: f64,
    /// `(t, ‖Y_t − S_t‖_p)` on every fine knot.
    pub profile: Vec<(f64, f64)>,
}

/// `sup_t ‖Y_t − S_t‖_p` over the fine grid, with `S` the adapted spline on `knots`.
pub fn spline_error(solution: &BsdeSolution, knots: &TimeNet, p: f64) -> Result<SplineError> {
    check_p(p)?;
    let spline = AdaptedSpline::from_solution(solution, knots)?;
    let mut best = NormEstimate { value: 0.0, se: 0.0 };
    let mut sup_time = 0.0;
    let mut profile = Vec::with_capacity(solution.grid().len());
    for (i, &t) in solution.grid().knots().iter().enumerate() {
        let s = spline.eval(t);
        let diff: Vec<f64> = solution.y(i).iter().zip(&s).map(|(y, s)| y - s).collect();
        let e = empirical_norm(&diff, p);
        profile.push((t, e.value));
        if e.value > best.value {
            best = e;
            sup_time = t;
        }
    }
    Ok(SplineError {
        p,
        n_knots: knots.len(),
        sup_error: best.value,
        se: best.se,
        sup_time,
        profile,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingPoint {
    pub t: f64,
    /// `√(∫ η²)`.
    pub eta_l2: f64,
    pub distance: NormEstimate,
}

/// `‖ξ − ξ^{t,r_l}‖_p` for `η = χ_{(t, r_l]}` at each `t`.
#[allow(clippy::too_many_arguments)]
pub fn mixing_distance(
    model: &ForwardModel,
    term: &TerminalCondition,
    grid: &TimeNet,
    ts: &[f64],
    r_l: f64,
    n_paths: usize,
    seed: u64,
    p: f64,
) -> Result<Vec<MixingPoint>> {
    check_p(p)?;
    ts.iter()
        .map(|&t| {
            let schedule = MixingSchedule::indicator(t, r_l)?;
            let pair = simulate_mixed(model, grid, &schedule, n_paths, seed)?;
            let xi = terminal_values(term, &pair)?;
            let diff: Vec<f64> = xi.0.iter().zip(&xi.1).map(|(a, b)| a - b).collect();
            Ok(MixingPoint {
                t,
                eta_l2: schedule.l2_mass(pair.base.grid()).sqrt(),
                distance: empirical_norm(&diff, p),
            })
        })
        .collect()
}

/// `(ξ, ξ^η)` per path on a mixed pair.
pub fn terminal_values(term: &TerminalCondition, pair: &MixedPathPair) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = pair.base.grid();
    let idx: Vec<usize> = term
        .times()
        .iter()
        .map(|&t| {
            grid.index_of(t)
                .ok_or_else(|| Error::Argument(format!("observation time {} is not a grid knot", t)))
        })
        .collect::<Result<_>>()?;
    let eval = |ens: &crate::forward::PathEnsemble| -> Vec<f64> {
        (0..ens.n_paths())
            .into_par_iter()
            .map(|p| {
                let obs: Vec<&[f64]> = idx.iter().map(|&k| ens.state(p, k)).collect();
                term.eval(&obs)
            })
            .collect()
    };
    Ok((eval(&pair.base), eval(&pair.mixed)))
}

/// Left and right hand sides of the mixing stability inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityGap {
    /// `‖sup_t |Y^η_t − Y_t|‖_p` over grid knots.
    pub y_sup_gap: NormEstimate,
    /// `‖(∫ |Z^η − Z|² dt)^{1/2}‖_p`.
    pub z_integral_gap: NormEstimate,
    /// `‖sup_t |X^η_t − X_t|‖_p` over grid knots.
    pub x_sup_gap: NormEstimate,
    /// `‖ξ^η − ξ‖_p`.
    pub xi_gap: NormEstimate,
    pub xi_norm: NormEstimate,
    /// `√(∫ η² dt)`.
    pub eta_l2: f64,
}

impl StabilityGap {
    pub fn lhs(&self) -> f64 {
        self.x_sup_gap.value + self.y_sup_gap.value + self.z_integral_gap.value
    }

    pub fn rhs(&self) -> f64 {
        self.xi_gap.value + (1.0 + self.xi_norm.value) * self.eta_l2
    }

    /// Smallest constant making the inequality hold for this pair.
    pub fn constant(&self) -> f64 {
        self.lhs() / self.rhs()
    }
}

pub fn stability_gap(
    pair: &MixedPathPair,
    base: &BsdeSolution,
    mixed: &BsdeSolution,
    p: f64,
) -> Result<StabilityGap> {
    check_p(p)?;
    let grid = pair.base.grid();
    if pair.mixed.grid() != grid
        || base.grid() != grid
        || mixed.grid() != grid
        || pair.base.n_paths() != pair.mixed.n_paths()
        || base.n_paths() != pair.base.n_paths()
        || mixed.n_paths() != pair.base.n_paths()
        || pair.base.master_seed() != pair.mixed.master_seed()
    {
        return Err(Error::Argument("pair and solutions are not on a common grid and path set".into()));
    }
    let m = pair.base.n_paths();
    let d = pair.base.dim();
    let nk = grid.len();
    let coupled = (0..m).into_par_iter().all(|q| {
        (0..nk).all(|k| base.state(q, k) == pair.base.state(q, k) && mixed.state(q, k) == pair.mixed.state(q, k))
    });
    if !coupled {
        return Err(Error::Argument("solutions were not computed on the given pair".into()));
    }
    let x_sup: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|q| {
            (0..nk)
                .map(|k| {
                    let a = pair.base.state(q, k);
                    let b = pair.mixed.state(q, k);
                    let mut diff = [0.0; crate::forward::MAX_DIM];
                    for j in 0..d {
                        diff[j] = a[j] - b[j];
                    }
                    euclid(&diff[..d])
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let y_sup: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|q| (0..nk).map(|k| (base.y(k)[q] - mixed.y(k)[q]).abs()).fold(0.0, f64::max))
        .collect();
    let z_int: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|q| {
            (0..nk - 1)
                .map(|i| {
                    let (a, b) = (&base.z(i)[q * d..(q + 1) * d], &mixed.z(i)[q * d..(q + 1) * d]);
                    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * grid.step(i)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let last = nk - 1;
    let xi_gap: Vec<f64> = base.y(last).iter().zip(mixed.y(last)).map(|(a, b)| a - b).collect();
    Ok(StabilityGap {
        y_sup_gap: empirical_norm(&y_sup, p),
        z_integral_gap: empirical_norm(&z_int, p),
        x_sup_gap: empirical_norm(&x_sup, p),
        xi_gap: empirical_norm(&xi_gap, p),
        xi_norm: empirical_norm(base.y(last), p),
        eta_l2: pair.schedule.l2_mass(grid).sqrt(),
    })
}

/// Least-squares slope of `log value` against `log n`.
pub fn rate_slope(table: &[(f64, f64)]) -> Result<(f64, f64)> {
    if table.len() < 3 {
        return Err(Error::Argument("rate slope needs at least three rows".into()));
    }
    if table.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Argument("n must increase strictly".into()));
    }
    if let Some(&(n, v)) = table.iter().find(|r| !(r.1 > 0.0)) {
        return Err(Error::Domain(format!("non-positive value {} at n = {}", v, n)));
    }
    let ns: Vec<f64> = table.iter().map(|r| r.0).collect();
    let vs: Vec<f64> = table.iter().map(|r| r.1).collect();
    log_log_fit(&ns, &vs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve, Generator, Scheme};
    use crate::forward::simulate;
    use crate::gaussian_oracle::{cond_residual_norm, expand, TerminalFunction1D};
    use crate::regression::RegressionConfig;
    use crate::timenets::{build_theta_net, build_uniform_net, refine_net, SmoothnessSpec};

    fn unit() -> SmoothnessSpec {
        SmoothnessSpec::uniform(vec![0.0, 1.0]).unwrap()
    }

    fn solve_bm(g: TerminalFunction1D, grid: &TimeNet, paths: usize, seed: u64) -> BsdeSolution {
        let model = ForwardModel::brownian(1).unwrap();
        let ens = simulate(&model, grid, paths, seed, false).unwrap();
        let term = TerminalCondition::at_horizon(g, 1.0);
        solve(&model, &Generator::zero(), &term, grid, &ens, &RegressionConfig::default(), Scheme::Explicit)
            .unwrap()
    }

    #[test]
    fn jackknife_matches_standard_error_of_mean_square() {
        let v: Vec<f64> = (0..4096).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let e = empirical_norm(&v, 2.0);
        let ms = v.iter().map(|x| x * x).sum::<f64>() / 4096.0;
        assert!((e.value - ms.sqrt()).abs() < 1e-14);
        assert!(e.se > 0.0 && e.se < 0.01);
        assert_eq!(empirical_norm(&[0.0; 64], 2.0).se, 0.0);
    }

    #[test]
    fn rate_slope_examples() {
        let t: Vec<(f64, f64)> = [4.0, 8.0, 16.0, 32.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(-0.5))).collect();
        let (s, se) = rate_slope(&t).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && se < 1e-12);
        let t: Vec<(f64, f64)> = [4.0, 8.0, 16.0].iter().map(|&n: &f64| (n, n.powf(-0.25))).collect();
        assert!((rate_slope(&t).unwrap().0 + 0.25).abs() < 1e-12);
        assert!(matches!(rate_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(Error::Domain(_))));
        assert!(matches!(rate_slope(&[(1.0, 1.0), (2.0, 1.0)]), Err(Error::Argument(_))));
    }

    fn oracle_points(g: &TerminalFunction1D, p: f64) -> Vec<ProbePoint> {
        geometric_window(0.0, 1.0, 2..=10)
            .into_iter()
            .map(|s| {
                let q = cond_residual_norm(g, s, p).unwrap();
                ProbePoint { s, value: q.value, se: q.error }
            })
            .collect()
    }

    #[test]
    fn residual_exponents_from_oracle() {
        let lin = smoothness_from_residuals(1, 0.0, 1.0, &oracle_points(&TerminalFunction1D::linear(), 2.0)).unwrap();
        assert!((lin.theta_hat - 1.0).abs() < 1e-3);
        let ind = smoothness_from_residuals(1, 0.0, 1.0, &oracle_points(&TerminalFunction1D::indicator(0.0), 2.0)).unwrap();
        assert!((ind.theta_hat - 0.5).abs() < 0.03, "{}", ind.theta_hat);
        let pow = TerminalFunction1D::power(0.25).unwrap();
        let pw = smoothness_from_residuals(1, 0.0, 1.0, &oracle_points(&pow, 2.0)).unwrap();
        assert!((pw.theta_hat - 0.75).abs() < 0.03, "{}", pw.theta_hat);
    }

    #[test]
    fn z_blowup_exponents_from_oracle_series() {
        let fit = |g: TerminalFunction1D| {
            let e = expand(&g, 64, 256).unwrap();
            let pts: Vec<ProbePoint> = geometric_window(0.0, 1.0, 2..=9)
                .into_iter()
                .map(|s| ProbePoint { s, value: e.z_norm_l2(s).unwrap(), se: 0.0 })
                .collect();
            estimate_exponent(Probe::ZBlowup, 1, 0.0, 1.0, &pts).unwrap().theta_hat
        };
        assert!((fit(TerminalFunction1D::linear()) - 1.0).abs() < 1e-9);
        assert!((fit(TerminalFunction1D::hermite(2)) - 1.0).abs() < 0.05);
    }

    #[test]
    fn deterministic_terminal_is_degenerate() {
        let pts: Vec<ProbePoint> = geometric_window(0.0, 1.0, 2..=6)
            .into_iter()
            .map(|s| ProbePoint { s, value: 0.0, se: 0.0 })
            .collect();
        assert!(matches!(
            smoothness_from_residuals(1, 0.0, 1.0, &pts),
            Err(Error::DegenerateFit(_))
        ));
        assert!(smoothness_from_residuals(1, 0.0, 1.0, &pts[..3]).is_err());
    }

    #[test]
    fn variation_of_brownian_identity() {
        let coarse = build_uniform_net(&unit(), 4).unwrap();
        let fine = refine_net(&coarse, 4).unwrap();
        let sol = solve_bm(TerminalFunction1D::linear(), &fine, 1 << 14, 2);
        let rep = variation(&sol, &coarse, 2.0).unwrap();
        assert!((rep.y_component - 0.5).abs() < 0.02, "{}", rep.y_component);
        assert!(rep.z_component < 0.05, "{}", rep.z_component);
        assert_eq!(rep.total, rep.y_component + rep.z_component);
        assert!(rep.y_se > 0.0);
    }

    #[test]
    fn theta_one_and_uniform_reports_coincide() {
        let spec = unit();
        let a = build_uniform_net(&spec, 4).unwrap();
        let b = build_theta_net(&spec.with_theta(vec![1.0]).unwrap(), 4).unwrap();
        let fine = refine_net(&a, 2).unwrap();
        let sol = solve_bm(TerminalFunction1D::hermite(2), &fine, 4096, 9);
        assert_eq!(variation(&sol, &a, 2.0).unwrap(), variation(&sol, &b, 2.0).unwrap());
    }

    #[test]
    fn spline_vanishes_at_knots_and_matches_bridge() {
        let coarse = build_uniform_net(&unit(), 4).unwrap();
        let fine = refine_net(&coarse, 8).unwrap();
        let sol = solve_bm(TerminalFunction1D::linear(), &fine, 1 << 14, 4);
        let err = spline_error(&sol, &coarse, 2.0).unwrap();
        for &(t, e) in &err.profile {
            if coarse.index_of(t).is_some() {
                assert_eq!(e, 0.0);
            }
        }
        assert!((err.sup_error / 0.25 - 1.0).abs() < 0.1, "{}", err.sup_error);
    }

    #[test]
    fn mixing_distance_linear() {
        let model = ForwardModel::brownian(1).unwrap();
        let term = TerminalCondition::at_horizon(TerminalFunction1D::linear(), 1.0);
        let grid = build_uniform_net(&unit(), 1).unwrap();
        let pts = mixing_distance(&model, &term, &grid, &[0.25, 0.5, 0.75], 1.0, 1 << 15, 3, 2.0).unwrap();
        for q in pts {
            let exact = (2.0 * (1.0 - q.t)).sqrt();
            assert!((q.distance.value - exact).abs() < 3.0 * q.distance.se, "{:?}", q);
        }
    }

    #[test]
    fn zero_mixing_has_zero_gaps() {
        let model = ForwardModel::brownian(1).unwrap();
        let grid = build_uniform_net(&unit(), 4).unwrap();
        let pair = simulate_mixed(&model, &grid, &MixingSchedule::Zero, 2048, 1).unwrap();
        let term = TerminalCondition::at_horizon(TerminalFunction1D::indicator(0.0), 1.0);
        let reg = RegressionConfig::default();
        let a = solve(&model, &Generator::zero(), &term, &grid, &pair.base, &reg, Scheme::Explicit).unwrap();
        let b = solve(&model, &Generator::zero(), &term, &grid, &pair.mixed, &reg, Scheme::Explicit).unwrap();
        let gap = stability_gap(&pair, &a, &b, 2.0).unwrap();
        assert_eq!(gap.lhs(), 0.0);
        assert_eq!(gap.xi_gap.value, 0.0);
        let other = simulate(&model, &grid, 2048, 2, false).unwrap();
        let c = solve(&model, &Generator::zero(), &term, &grid, &other, &reg, Scheme::Explicit).unwrap();
        assert!(matches!(stability_gap(&pair, &a, &c, 2.0), Err(Error::Argument(_))));
    }
}
