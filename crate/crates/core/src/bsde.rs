//! Regression Monte Carlo for `Y_t = ξ + ∫_t^T f(s, X_s, Y_s, Z_s) ds − ∫_t^T Z_s dW_s`.
//!
//! The backward recursion runs on a solving grid whose knots are a subset of
//! the ensemble grid. Conditional expectations given `F_{t_{i-1}}` are least
//! squares projections on a basis in `X_{t_{i-1}}` plus the states already
//! observed at earlier observation times of the terminal condition.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{malliavin_weight_order1, ForwardModel, PathEnsemble};
use crate::gaussian_oracle::TerminalFunction1D;
use crate::regression::{Design, LinearFit, RegressionConfig};
use crate::timenets::TimeNet;

/// `f(t, x, y, z)`.
pub type GeneratorFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum GeneratorKind {
    Zero,
    /// `f = a_y·y + b_z·z + c`.
    Linear { a_y: f64, b_z: Vec<f64>, c: f64 },
    Custom(GeneratorFn),
}

impl fmt::Debug for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::Zero => write!(f, "Zero"),
            GeneratorKind::Linear { a_y, b_z, c } => f
                .debug_struct("Linear")
                .field("a_y", a_y)
                .field("b_z", b_z)
                .field("c", c)
                .finish(),
            GeneratorKind::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Driver of the backward equation with its growth and Lipschitz constants.
#[derive(Debug, Clone)]
pub struct Generator {
    kind: GeneratorKind,
    k_f: f64,
    l_f: f64,
}

impl Generator {
    pub fn zero() -> Self {
        Self {
            kind: GeneratorKind::Zero,
            k_f: 0.0,
            l_f: 0.0,
        }
    }

    pub fn linear(a_y: f64, b_z: Vec<f64>, c: f64) -> Result<Self> {
        if !a_y.is_finite() || !c.is_finite() || b_z.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("generator", "coefficients must be finite"));
        }
        let l_f = a_y.abs() + b_z.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self {
            kind: GeneratorKind::Linear { a_y, b_z, c },
            k_f: c.abs(),
            l_f,
        })
    }

    pub fn custom(f: GeneratorFn, k_f: f64, l_f: f64) -> Result<Self> {
        if !(k_f > 0.0 && k_f.is_finite()) {
            return Err(Error::validation("generator.k_f", "must be positive"));
        }
        if !(l_f > 0.0 && l_f.is_finite()) {
            return Err(Error::validation("generator.l_f", "must be positive"));
        }
        Ok(Self {
            kind: GeneratorKind::Custom(f),
            k_f,
            l_f,
        })
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn tag(&self) -> &'static str {
        match self.kind {
            GeneratorKind::Zero => "zero",
            GeneratorKind::Linear { .. } => "linear",
            GeneratorKind::Custom(_) => "custom",
        }
    }

    pub fn k_f(&self) -> f64 {
        self.k_f
    }

    pub fn l_f(&self) -> f64 {
        self.l_f
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, GeneratorKind::Zero)
    }

    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match &self.kind {
            GeneratorKind::Zero => 0.0,
            GeneratorKind::Linear { a_y, b_z, c } => {
                a_y * y + b_z.iter().zip(z).map(|(b, z)| b * z).sum::<f64>() + c
            }
            GeneratorKind::Custom(f) => f(t, x, y, z),
        }
    }
}

/// Lipschitz maps `Φ: ℝ^L → ℝ` combining one-dimensional terminal functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Combine {
    Sum { weights: Vec<f64> },
    Max,
    Min,
}

impl Combine {
    fn apply(&self, v: &[f64]) -> f64 {
        match self {
            Combine::Sum { weights } => weights.iter().zip(v).map(|(w, x)| w * x).sum(),
            Combine::Max => v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Combine::Min => v.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Path functional of observed states, `g(X_{r_1}, …, X_{r_L})`.
pub type PathFunctional = Arc<dyn Fn(&[&[f64]]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum TerminalKind {
    Composite {
        parts: Vec<TerminalFunction1D>,
        combine: Combine,
    },
    Custom(PathFunctional),
}

/// `ξ = g(X_{r_1}, …, X_{r_L})`.
///
/// One-dimensional terminal functions act on the first coordinate of the state.
#[derive(Clone)]
pub struct TerminalCondition {
    times: Vec<f64>,
    kind: TerminalKind,
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TerminalCondition({} at {:?})", self.label(), self.times)
    }
}

impl TerminalCondition {
    /// `g(X_T)` for a one-dimensional `g` observed at the single time `horizon`.
    pub fn at_horizon(g: TerminalFunction1D, horizon: f64) -> Self {
        Self {
            times: vec![horizon],
            kind: TerminalKind::Composite {
                parts: vec![g],
                combine: Combine::Sum { weights: vec![1.0] },
            },
        }
    }

    /// `Φ(g_1(X_{r_1}), …, g_L(X_{r_L}))`.
    pub fn composite(times: Vec<f64>, parts: Vec<TerminalFunction1D>, combine: Combine) -> Result<Self> {
        check_times(&times)?;
        if parts.len() != times.len() {
            return Err(Error::validation(
                "terminal.parts",
                "one function per observation time is required",
            ));
        }
        if let Combine::Sum { weights } = &combine {
            if weights.len() != parts.len() {
                return Err(Error::validation(
                    "terminal.weights",
                    "one weight per observation time is required",
                ));
            }
        }
        Ok(Self {
            times,
            kind: TerminalKind::Composite { parts, combine },
        })
    }

    pub fn custom(times: Vec<f64>, g: PathFunctional) -> Result<Self> {
        check_times(&times)?;
        Ok(Self {
            times,
            kind: TerminalKind::Custom(g),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// The one-dimensional function when `ξ = g(X_T)` with a single observation.
    pub fn single(&self) -> Option<&TerminalFunction1D> {
        match &self.kind {
            TerminalKind::Composite { parts, combine } if parts.len() == 1 => match combine {
                Combine::Sum { weights } if weights[0] == 1.0 => Some(&parts[0]),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            TerminalKind::Composite { parts, combine } => {
                if let Some(g) = self.single() {
                    return g.to_string();
                }
                let names: Vec<String> = parts.iter().map(|g| g.to_string()).collect();
                let tag = match combine {
                    Combine::Sum { .. } => "sum",
                    Combine::Max => "max",
                    Combine::Min => "min",
                };
                format!("{}({})", tag, names.join(","))
            }
            TerminalKind::Custom(_) => "custom".into(),
        }
    }

    /// The value `g_l(X_{r_l})` of a composite part, carried as an extra
    /// regression feature after `r_l` so discontinuous parts stay resolved.
    pub fn mark(&self, l: usize, x: &[f64]) -> Option<f64> {
        match &self.kind {
            TerminalKind::Composite { parts, .. } => parts.get(l).map(|g| g.eval(x[0])),
            TerminalKind::Custom(_) => None,
        }
    }

    /// Evaluates `g` on the states observed at each observation time.
    pub fn eval(&self, states: &[&[f64]]) -> f64 {
        match &self.kind {
            TerminalKind::Composite { parts, combine } => {
                let mut v = [0.0; 16];
                let v = &mut v[..parts.len().min(16)];
                if parts.len() > 16 {
                    let all: Vec<f64> = parts.iter().zip(states).map(|(g, x)| g.eval(x[0])).collect();
                    return combine.apply(&all);
                }
                for (o, (g, x)) in v.iter_mut().zip(parts.iter().zip(states)) {
                    *o = g.eval(x[0]);
                }
                combine.apply(v)
            }
            TerminalKind::Custom(g) => g(states),
        }
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::validation("terminal.times", "at least one observation time"));
    }
    if times.windows(2).any(|w| w[0] >= w[1]) || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::validation(
            "terminal.times",
            "observation times must be positive and strictly increasing",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    Implicit,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Explicit => "explicit",
            Scheme::Implicit => "implicit",
        })
    }
}

/// Regression target used for `Z_{t_{i-1}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZEstimator {
    /// `(Y_{t_i} − Ê[Y_{t_i}]) ΔW / Δt`; same conditional mean, smaller variance.
    #[default]
    ControlVariate,
    /// `Y_{t_i} ΔW / Δt`.
    Plain,
}

const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_ITERS: usize = 50;

/// Per-step regression diagnostics, indexed by the left knot of the step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepDiagnostics {
    pub knot: usize,
    pub y_residual_rms: f64,
    pub z_residual_rms: f64,
    pub condition: f64,
    pub iterations: usize,
}

/// Per-path `(Y, Z)` on a solving grid.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeNet,
    n_paths: usize,
    dim: usize,
    /// `X` at solving knots, path-major.
    states: Vec<f64>,
    /// Solving-grid indices of the observation times.
    observed: Vec<usize>,
    /// Composite part values, `(observation · M + path)`; empty if unused.
    marks: Vec<f64>,
    /// `Y`, knot-major.
    y: Vec<f64>,
    /// `Z` on each interval, `(interval · M + path) · d + k`.
    z: Vec<f64>,
    scheme: Scheme,
    reg: RegressionConfig,
    diagnostics: Vec<StepDiagnostics>,
}

impl BsdeSolution {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        grid: TimeNet,
        n_paths: usize,
        dim: usize,
        states: Vec<f64>,
        observed: Vec<usize>,
        marks: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        scheme: Scheme,
        reg: RegressionConfig,
        diagnostics: Vec<StepDiagnostics>,
    ) -> Result<Self> {
        let k = grid.len();
        if states.len() != n_paths * k * dim
            || !(marks.is_empty() || marks.len() == n_paths * observed.len())
            || y.len() != n_paths * k
            || z.len() != n_paths * (k - 1) * dim
            || observed.iter().any(|&o| o >= k)
        {
            return Err(Error::Argument("solution buffers do not match grid".into()));
        }
        Ok(Self {
            grid,
            n_paths,
            dim,
            states,
            observed,
            marks,
            y,
            z,
            scheme,
            reg,
            diagnostics,
        })
    }

    pub fn grid(&self) -> &TimeNet {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn regression(&self) -> &RegressionConfig {
        &self.reg
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    pub fn state(&self, path: usize, knot: usize) -> &[f64] {
        let off = (path * self.grid.len() + knot) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// `Y` at `knot` across paths.
    pub fn y(&self, knot: usize) -> &[f64] {
        &self.y[knot * self.n_paths..(knot + 1) * self.n_paths]
    }

    /// `Z` on `interval` across paths, path-major with `d` entries per path.
    pub fn z(&self, interval: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.z[interval * w..(interval + 1) * w]
    }

    /// Pointwise `Z` estimate at a knot; the last knot carries none.
    pub fn z_at_knot(&self, knot: usize) -> Option<&[f64]> {
        (knot < self.grid.intervals()).then(|| self.z(knot))
    }

    pub(crate) fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub(crate) fn raw_y(&self) -> &[f64] {
        &self.y
    }

    pub(crate) fn raw_z(&self) -> &[f64] {
        &self.z
    }

    pub(crate) fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub(crate) fn marks(&self) -> &[f64] {
        &self.marks
    }

    /// Earlier observations conditioning the regression at `knot`, per path.
    pub fn history(&self, knot: usize) -> Vec<f64> {
        history_buffer(&self.observed, &self.marks, knot, self.n_paths, self.dim, |p, i| {
            self.state(p, i)
        })
    }

    /// Regression design at `knot` with the solution's basis.
    pub fn design(&self, knot: usize) -> Design {
        let hist = self.history(knot);
        let w = hist.len() / self.n_paths;
        Design::build(&self.reg, self.n_paths, |p| self.state(p, knot), |p| &hist[p * w..(p + 1) * w])
    }

    /// Projection of `values` (one per path) on the basis at `knot`.
    pub fn project(&self, values: &[f64], knot: usize) -> Result<Vec<f64>> {
        let design = self.design(knot);
        let fit = design.fit(&[values], self.reg.ridge, knot)?;
        Ok(design.predict(&fit, 0))
    }
}

/// Per path: each earlier observed state followed by its mark, if any, then
/// the mark of an observation at `knot` itself (its state is already the
/// current state).
fn history_buffer<'a>(
    observed: &[usize],
    marks: &[f64],
    knot: usize,
    n_paths: usize,
    dim: usize,
    state: impl Fn(usize, usize) -> &'a [f64] + Sync,
) -> Vec<f64> {
    let seen = observed.iter().filter(|&&o| o < knot).count();
    let marked = !marks.is_empty();
    let current = marked && observed.get(seen) == Some(&knot);
    let per = dim + usize::from(marked);
    let w = seen * per + usize::from(current);
    let mut out = vec![0.0; n_paths * w];
    if w > 0 {
        out.par_chunks_mut(w).enumerate().for_each(|(p, row)| {
            for (j, &o) in observed[..seen].iter().enumerate() {
                let cell = &mut row[j * per..(j + 1) * per];
                cell[..dim].copy_from_slice(state(p, o));
                if marked {
                    cell[dim] = marks[j * n_paths + p];
                }
            }
            if current {
                row[w - 1] = marks[seen * n_paths + p];
            }
        });
    }
    out
}

pub fn solve(
    model: &ForwardModel,
    gen: &Generator,
    term: &TerminalCondition,
    grid: &TimeNet,
    ensemble: &PathEnsemble,
    reg: &RegressionConfig,
    scheme: Scheme,
) -> Result<BsdeSolution> {
    solve_with(model, gen, term, grid, ensemble, reg, scheme, ZEstimator::default())
}

#[allow(clippy::too_many_arguments)]
pub fn solve_with(
    model: &ForwardModel,
    gen: &Generator,
    term: &TerminalCondition,
    grid: &TimeNet,
    ensemble: &PathEnsemble,
    reg: &RegressionConfig,
    scheme: Scheme,
    z_estimator: ZEstimator,
) -> Result<BsdeSolution> {
    reg.validate()?;
    if model.dim() != ensemble.dim() {
        return Err(Error::Argument("model and ensemble dimensions differ".into()));
    }
    let embed = ensemble.grid().embedding_of(grid).ok_or_else(|| {
        Error::Argument("solving grid is not a subset of the ensemble grid".into())
    })?;
    let observed: Vec<usize> = term
        .times()
        .iter()
        .map(|&t| {
            grid.index_of(t).ok_or_else(|| {
                Error::Argument(format!("observation time {} is not a knot of the solving grid", t))
            })
        })
        .collect::<Result<_>>()?;

    let m = ensemble.n_paths();
    let d = ensemble.dim();
    let nk = grid.len();
    let n = nk - 1;
    if scheme == Scheme::Implicit && gen.l_f() * grid.max_step() >= 1.0 {
        return Err(Error::Scheme(format!(
            "implicit step needs L_f·Δt < 1 (got {:.3}); use a finer net",
            gen.l_f() * grid.max_step()
        )));
    }

    let mut states = vec![0.0; m * nk * d];
    states.par_chunks_mut(nk * d).enumerate().for_each(|(p, row)| {
        for (i, &e) in embed.iter().enumerate() {
            row[i * d..(i + 1) * d].copy_from_slice(ensemble.state(p, e));
        }
    });
    let state = |p: usize, i: usize| &states[(p * nk + i) * d..(p * nk + i + 1) * d];

    let mut y = vec![0.0; nk * m];
    let mut z = vec![0.0; n * m * d];
    y[n * m..].par_iter_mut().enumerate().for_each(|(p, v)| {
        let mut obs: [&[f64]; 16] = [&[]; 16];
        if observed.len() <= 16 {
            for (o, &k) in obs.iter_mut().zip(&observed) {
                *o = state(p, k);
            }
            *v = term.eval(&obs[..observed.len()]);
        } else {
            let all: Vec<&[f64]> = observed.iter().map(|&k| state(p, k)).collect();
            *v = term.eval(&all);
        }
    });
    if let Some(p) = y[n * m..].iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("terminal value is not finite on path {}", p)));
    }
    let mut marks = Vec::new();
    if observed.len() > 1 && term.mark(0, state(0, observed[0])).is_some() {
        marks = vec![0.0; observed.len() * m];
        marks.par_chunks_mut(m).enumerate().for_each(|(l, row)| {
            for (p, v) in row.iter_mut().enumerate() {
                *v = term.mark(l, state(p, observed[l])).unwrap_or(0.0);
            }
        });
    }

    let mut diagnostics = Vec::with_capacity(n);
    let mut dw = vec![0.0; m * d];
    for i in (1..=n).rev() {
        let left = i - 1;
        let t = grid.knots()[left];
        let dt = grid.step(left);
        dw.par_chunks_mut(d).enumerate().for_each(|(p, out)| {
            ensemble.increment_sum(p, embed[left], embed[i], out);
        });
        let hist = history_buffer(&observed, &marks, left, m, d, state);
        let hw = hist.len() / m;
        let design = Design::build(reg, m, |p| state(p, left), |p| &hist[p * hw..(p + 1) * hw]);
        let proj = design.factor(reg.ridge, left)?;

        let (done, rest) = y.split_at_mut(i * m);
        let y_next = &rest[..m];
        let y_here = &mut done[left * m..];

        let y_fit = design.fit_with(&proj, &[y_next])?;
        let y_hat = design.predict(&y_fit, 0);

        let z_targets: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                (0..m)
                    .into_par_iter()
                    .map(|p| {
                        let base = match z_estimator {
                            ZEstimator::ControlVariate => y_next[p] - y_hat[p],
                            ZEstimator::Plain => y_next[p],
                        };
                        base * dw[p * d + k] / dt
                    })
                    .collect()
            })
            .collect();
        let z_refs: Vec<&[f64]> = z_targets.iter().map(|v| v.as_slice()).collect();
        let z_fit = design.fit_with(&proj, &z_refs)?;
        let z_here = &mut z[left * m * d..(left + 1) * m * d];
        for k in 0..d {
            let zk = design.predict(&z_fit, k);
            for (p, v) in zk.into_iter().enumerate() {
                z_here[p * d + k] = v;
            }
        }
        let z_here = &z[left * m * d..(left + 1) * m * d];

        let mut iterations = 0;
        let mut y_rms = y_fit.residual_rms[0];
        if gen.is_zero() {
            y_here[..m].copy_from_slice(&y_hat);
        } else {
            match scheme {
                Scheme::Explicit => {
                    let target: Vec<f64> = (0..m)
                        .into_par_iter()
                        .map(|p| {
                            let zp = &z_here[p * d..(p + 1) * d];
                            y_next[p] + gen.eval(t, state(p, left), y_next[p], zp) * dt
                        })
                        .collect();
                    let fit = design.fit_with(&proj, &[&target])?;
                    y_rms = fit.residual_rms[0];
                    y_here[..m].copy_from_slice(&design.predict(&fit, 0));
                }
                Scheme::Implicit => {
                    let mut cur = y_hat.clone();
                    loop {
                        iterations += 1;
                        let next: Vec<f64> = (0..m)
                            .into_par_iter()
                            .map(|p| {
                                let zp = &z_here[p * d..(p + 1) * d];
                                y_hat[p] + gen.eval(t, state(p, left), cur[p], zp) * dt
                            })
                            .collect();
                        let (diff, scale) = next.iter().zip(&cur).fold((0.0f64, 1.0f64), |(a, s), (x, y)| {
                            (a.max((x - y).abs()), s.max(x.abs()))
                        });
                        cur = next;
                        if diff < FIXED_POINT_TOL * scale {
                            break;
                        }
                        if iterations >= FIXED_POINT_ITERS || !diff.is_finite() {
                            return Err(Error::Scheme(format!(
                                "fixed point did not converge at knot {} after {} iterations; use a finer net",
                                left, iterations
                            )));
                        }
                    }
                    y_here[..m].copy_from_slice(&cur);
                }
            }
        }
        diagnostics.push(StepDiagnostics {
            knot: left,
            y_residual_rms: y_rms,
            z_residual_rms: z_fit.residual_rms.iter().cloned().fold(0.0, f64::max),
            condition: proj.condition,
            iterations,
        });
    }
    diagnostics.reverse();
    Ok(BsdeSolution {
        grid: grid.clone(),
        n_paths: m,
        dim: d,
        states,
        observed,
        marks,
        y,
        z,
        scheme,
        reg: *reg,
        diagnostics,
    })
}

/// Conditional interval averages of `Z` on a coarse net.
#[derive(Debug, Clone)]
pub struct ZBar {
    pub coarse: TimeNet,
    /// Solving-grid index of each coarse knot.
    pub fine_index: Vec<usize>,
    dim: usize,
    n_paths: usize,
    values: Vec<f64>,
}

impl ZBar {
    /// `Z̄` on coarse interval `j`, path-major with `d` entries per path.
    pub fn interval(&self, j: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.values[j * w..(j + 1) * w]
    }
}

/// Projects the time average of fine `Z` over each coarse interval onto the
/// basis at the interval's left endpoint.
pub fn zbar(solution: &BsdeSolution, coarse: &TimeNet) -> Result<ZBar> {
    let idx = solution
        .grid
        .embedding_of(coarse)
        .ok_or_else(|| Error::Argument("solution grid does not refine the coarse net".into()))?;
    let m = solution.n_paths;
    let d = solution.dim;
    let knots = solution.grid.knots();
    let mut values = vec![0.0; coarse.intervals() * m * d];
    for j in 0..coarse.intervals() {
        let (a, b) = (idx[j], idx[j + 1]);
        let span = knots[b] - knots[a];
        let design = solution.design(a);
        let proj = design.factor(solution.reg.ridge, a)?;
        let targets: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                (0..m)
                    .into_par_iter()
                    .map(|p| {
                        (a..b)
                            .map(|i| solution.z(i)[p * d + k] * solution.grid.step(i))
                            .sum::<f64>()
                            / span
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
        let fit = design.fit_with(&proj, &refs)?;
        let out = &mut values[j * m * d..(j + 1) * m * d];
        for k in 0..d {
            for (p, v) in design.predict(&fit, k).into_iter().enumerate() {
                out[p * d + k] = v;
            }
        }
    }
    Ok(ZBar {
        coarse: coarse.clone(),
        fine_index: idx,
        dim: d,
        n_paths: m,
        values,
    })
}

/// `∇_x F(r, X_r)` from `E[g(X_R) N | X_r]` with the first-order Malliavin weight.
#[derive(Debug, Clone)]
pub struct WeightGradient {
    fit: LinearFit,
    dim: usize,
    /// Fitted gradient per path, `d` entries per path.
    pub per_path: Vec<f64>,
    /// Raw integrands `g(X_R)·N`, `d` entries per path.
    pub samples: Vec<f64>,
}

impl WeightGradient {
    /// Component `k` of the fitted gradient at `x`, with its standard error.
    pub fn at(&self, x: &[f64], k: usize) -> (f64, f64) {
        (self.fit.eval(x, &[], k), self.fit.eval_se(x, &[], k))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

pub fn gradient_via_weights(
    ensemble: &PathEnsemble,
    g: impl Fn(&[f64]) -> f64 + Sync,
    r_index: usize,
    big_r_index: usize,
    reg: &RegressionConfig,
) -> Result<WeightGradient> {
    reg.validate()?;
    let weights = malliavin_weight_order1(ensemble, r_index, big_r_index)?;
    let m = ensemble.n_paths();
    let d = ensemble.dim();
    let samples: Vec<f64> = (0..m * d)
        .into_par_iter()
        .map(|i| g(ensemble.state(i / d, big_r_index)) * weights[i])
        .collect();
    let design = Design::build(reg, m, |p| ensemble.state(p, r_index), |_| &[]);
    let targets: Vec<Vec<f64>> = (0..d)
        .map(|k| (0..m).map(|p| samples[p * d + k]).collect())
        .collect();
    let refs: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
    let fit = design.fit(&refs, reg.ridge, r_index)?;
    let mut per_path = vec![0.0; m * d];
    for k in 0..d {
        for (p, v) in design.predict(&fit, k).into_iter().enumerate() {
            per_path[p * d + k] = v;
        }
    }
    Ok(WeightGradient {
        fit,
        dim: d,
        per_path,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate;
    use crate::gaussian_oracle::{expand, DEFAULT_NODES, DEFAULT_ORDER};
    use crate::regression::Basis;
    use crate::timenets::{build_uniform_net, SmoothnessSpec};

    fn uniform(n: usize) -> TimeNet {
        build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0]).unwrap(), n).unwrap()
    }

    #[test]
    fn discontinuous_part_is_carried_exactly() {
        let model = ForwardModel::brownian(1).unwrap();
        let spec = SmoothnessSpec::uniform(vec![0.0, 0.5, 1.0]).unwrap();
        let grid = build_uniform_net(&spec, 4).unwrap();
        let ens = simulate(&model, &grid, 1 << 14, 5, false).unwrap();
        let term = TerminalCondition::composite(
            vec![0.5, 1.0],
            vec![TerminalFunction1D::indicator(0.0), TerminalFunction1D::linear()],
            Combine::Sum { weights: vec![1.0, 1.0] },
        )
        .unwrap();
        let sol = solve(&model, &Generator::zero(), &term, &grid, &ens, &RegressionConfig::default(), Scheme::Explicit)
            .unwrap();
        // Y_t = 1{X_{1/2} ≥ 0} + X_t from the observation on, the jump included
        let h = grid.index_of(0.5).unwrap();
        let step = |x: f64| if x >= 0.0 { 1.0 } else { 0.0 };
        for k in h..8 {
            let err = rms_gap(&sol, k, |p| step(sol.state(p, h)[0]) + sol.state(p, k)[0]);
            assert!(err < 0.02, "knot {} err {}", k, err);
        }
    }

    fn bm_solve(g: TerminalFunction1D, gen: &Generator, n: usize, paths: usize, scheme: Scheme) -> BsdeSolution {
        let model = ForwardModel::brownian(1).unwrap();
        let grid = uniform(n);
        let ens = simulate(&model, &grid, paths, 11, false).unwrap();
        let term = TerminalCondition::at_horizon(g, 1.0);
        solve(&model, gen, &term, &grid, &ens, &RegressionConfig::default(), scheme).unwrap()
    }

    /// RMS pathwise gap between `Y` at `knot` and `exact`.
    fn rms_gap(sol: &BsdeSolution, knot: usize, exact: impl Fn(usize) -> f64) -> f64 {
        let m = sol.n_paths();
        ((0..m).map(|p| (sol.y(knot)[p] - exact(p)).powi(2)).sum::<f64>() / m as f64).sqrt()
    }

    /// Accumulated coefficient noise `Σ residual · √(K/M)` from `knot` to the end.
    fn regression_tolerance(sol: &BsdeSolution, knot: usize, k: usize) -> f64 {
        let scale = (k as f64 / sol.n_paths() as f64).sqrt();
        sol.diagnostics()[knot..].iter().map(|d| d.y_residual_rms * scale).sum::<f64>()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn linear_terminal_is_recovered() {
        let sol = bm_solve(TerminalFunction1D::linear(), &Generator::zero(), 8, 1 << 16, Scheme::Explicit);
        for i in 1..8 {
            let err = rms_gap(&sol, i, |p| sol.state(p, i)[0]);
            let tol = regression_tolerance(&sol, i, 4);
            assert!(err < 3.0 * tol, "knot {} err {} tol {}", i, err, tol);
        }
        // the constant fit at knot 0 is the sample mean of X_1
        assert!(sol.y(0)[0].abs() < 3.0 / (sol.n_paths() as f64).sqrt());
        // each interval mean carries an SE of √(2/M) ≈ 0.55%; the time average is tighter
        let avg = (0..8).map(|i| mean(sol.z(i))).sum::<f64>() / 8.0;
        assert!((avg - 1.0).abs() < 0.01, "{}", avg);
        let zb = zbar(&sol, &uniform(1)).unwrap();
        assert!((mean(zb.interval(0)) - avg).abs() < 1e-7);
        let zb = zbar(&sol, &uniform(2)).unwrap();
        assert!((mean(zb.interval(1)) - 1.0).abs() < 0.01);
    }

    #[test]
    fn terminal_values_are_exact() {
        let sol = bm_solve(TerminalFunction1D::indicator(0.0), &Generator::zero(), 4, 1000, Scheme::Explicit);
        for p in 0..1000 {
            let x = sol.state(p, 4)[0];
            assert_eq!(sol.y(4)[p], if x >= 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn second_hermite_matches_oracle() {
        let g = TerminalFunction1D::hermite(2);
        let sol = bm_solve(g.clone(), &Generator::zero(), 8, 1 << 16, Scheme::Explicit);
        // Y_0 is the constant projection: its sample mean is E ξ = α_0 = 0
        let xi = sol.y(8);
        let sd = (xi.iter().map(|v| v * v).sum::<f64>() / xi.len() as f64).sqrt();
        assert!(sol.y(0)[0].abs() < 3.0 * sd / (xi.len() as f64).sqrt());
        let exp = expand(&g, DEFAULT_ORDER, DEFAULT_NODES).unwrap();
        let zn = (sol.z(4).iter().map(|v| v * v).sum::<f64>() / xi.len() as f64).sqrt();
        let oracle = exp.z_norm_l2(0.5).unwrap();
        assert!((oracle - 1.0).abs() < 1e-12);
        assert!((zn / oracle - 1.0).abs() < 0.03, "{}", zn);
    }

    #[test]
    fn linear_generator_closed_form() {
        let gen = Generator::linear(0.5, vec![0.0], 0.0).unwrap();
        for scheme in [Scheme::Explicit, Scheme::Implicit] {
            let sol = bm_solve(TerminalFunction1D::linear(), &gen, 64, 1 << 14, scheme);
            // Y_t = e^{c(1-t)} X_t up to the O(Δt) scheme bias
            let k = 32;
            let factor = (0.5f64 * 0.5).exp();
            let num: f64 = (0..sol.n_paths()).map(|p| sol.y(k)[p] * sol.state(p, k)[0]).sum();
            let den: f64 = (0..sol.n_paths()).map(|p| sol.state(p, k)[0].powi(2)).sum();
            assert!((num / den / factor - 1.0).abs() < 0.02, "{} {}", scheme, num / den);
            assert!(sol.y(0)[0].abs() < 1e-2);
        }
    }

    #[test]
    fn schemes_agree_without_generator() {
        let a = bm_solve(TerminalFunction1D::indicator(0.0), &Generator::zero(), 4, 4096, Scheme::Explicit);
        let b = bm_solve(TerminalFunction1D::indicator(0.0), &Generator::zero(), 4, 4096, Scheme::Implicit);
        for i in 0..=4 {
            assert!(a.y(i).iter().zip(b.y(i)).all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }

    #[test]
    fn tower_property_on_linear_case() {
        let sol = bm_solve(TerminalFunction1D::linear(), &Generator::zero(), 8, 1 << 12, Scheme::Explicit);
        for i in 1..8 {
            let direct = sol.project(sol.y(8), i).unwrap();
            let resid = sol.diagnostics()[i].y_residual_rms;
            let gap = direct
                .iter()
                .zip(sol.y(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap <= 2.0 * resid + 1e-9, "knot {} gap {} resid {}", i, gap, resid);
        }
    }

    #[test]
    fn residuals_orthogonal_per_step() {
        let sol = bm_solve(TerminalFunction1D::indicator(0.0), &Generator::zero(), 4, 8192, Scheme::Explicit);
        let reg = RegressionConfig::new(Basis::GlobalPoly { degree: 3 }, 0.0).unwrap();
        for i in 1..4 {
            let d = Design::build(&reg, sol.n_paths(), |p| sol.state(p, i), |_| &[]);
            let f = d.fit(&[sol.y(i + 1)], 0.0, i).unwrap();
            let pred = d.predict(&f, 0);
            let r: Vec<f64> = sol.y(i + 1).iter().zip(&pred).map(|(a, b)| a - b).collect();
            assert!(d.residual_orthogonality(&r) < 1e-8);
        }
    }

    #[test]
    fn implicit_contraction_is_enforced() {
        let model = ForwardModel::brownian(1).unwrap();
        let grid = uniform(2);
        let ens = simulate(&model, &grid, 1024, 1, false).unwrap();
        let gen = Generator::linear(3.0, vec![0.0], 0.0).unwrap();
        let term = TerminalCondition::at_horizon(TerminalFunction1D::linear(), 1.0);
        let err = solve(&model, &gen, &term, &grid, &ens, &RegressionConfig::default(), Scheme::Implicit);
        assert!(matches!(err, Err(Error::Scheme(_))));
    }

    #[test]
    fn path_dependent_terminal_uses_history() {
        let model = ForwardModel::brownian(1).unwrap();
        let spec = SmoothnessSpec::uniform(vec![0.0, 0.5, 1.0]).unwrap();
        let grid = build_uniform_net(&spec, 4).unwrap();
        let ens = simulate(&model, &grid, 1 << 14, 3, false).unwrap();
        let term = TerminalCondition::composite(
            vec![0.5, 1.0],
            vec![TerminalFunction1D::linear(), TerminalFunction1D::linear()],
            Combine::Sum { weights: vec![1.0, 1.0] },
        )
        .unwrap();
        let sol = solve(&model, &Generator::zero(), &term, &grid, &ens, &RegressionConfig::default(), Scheme::Explicit)
            .unwrap();
        // Y_t = X_{1/2} + X_t for t ≥ 1/2, = 2 X_t before
        let h = grid.index_of(0.5).unwrap();
        for k in 1..8 {
            let err = if k > h {
                rms_gap(&sol, k, |p| sol.state(p, h)[0] + sol.state(p, k)[0])
            } else {
                rms_gap(&sol, k, |p| 2.0 * sol.state(p, k)[0])
            };
            let tol = regression_tolerance(&sol, k, 6);
            assert!(err < 3.0 * tol, "knot {} err {} tol {}", k, err, tol);
        }
    }

    #[test]
    fn unmarked_observation_time_is_rejected() {
        let model = ForwardModel::brownian(1).unwrap();
        let grid = uniform(4);
        let ens = simulate(&model, &grid, 64, 1, false).unwrap();
        let term = TerminalCondition::at_horizon(TerminalFunction1D::linear(), 0.6);
        let err = solve(&model, &Generator::zero(), &term, &grid, &ens, &RegressionConfig::default(), Scheme::Explicit);
        assert!(matches!(err, Err(Error::Argument(_))));
        let sol = bm_solve(TerminalFunction1D::linear(), &Generator::zero(), 4, 64, Scheme::Explicit);
        assert!(matches!(zbar(&sol, &uniform(3)), Err(Error::Argument(_))));
    }

    #[test]
    fn weight_gradient_cases() {
        let model = ForwardModel::brownian(1).unwrap();
        let grid = uniform(2);
        let ens = simulate(&model, &grid, 1 << 16, 5, true).unwrap();
        let reg = RegressionConfig::new(Basis::PiecewiseLinear { bins: 32 }, 1e-8).unwrap();
        let lin = gradient_via_weights(&ens, |x| x[0], 1, 2, &reg).unwrap();
        assert!((mean(&lin.per_path) - 1.0).abs() < 0.01);
        let ind = gradient_via_weights(&ens, |x| if x[0] >= 0.0 { 1.0 } else { 0.0 }, 1, 2, &reg).unwrap();
        let (v, se) = ind.at(&[0.0], 0);
        let exact = 1.0 / (2.0 * std::f64::consts::PI * 0.5).sqrt();
        assert!((v - exact).abs() < 3.0 * se, "{} ± {}", v, se);
        let cst = gradient_via_weights(&ens, |_| 2.0, 1, 2, &reg).unwrap();
        let (v, se) = cst.at(&[0.0], 0);
        assert!(v.abs() < 3.0 * se);
    }
}
