//! Forward diffusion `dX = b(t, X) dt + σ(t, X) dW` on a time-net, its
//! stochastic flow `∇X`, and Brownian-mixed copies `X^η`.
//!
//! Built-in kinds are sampled from their exact transition laws, the generic
//! kind by Euler-Maruyama. All noise comes from [`NormalSource`] cells keyed by
//! `(seed, path, interval, stream)`, so results do not depend on how paths are
//! distributed over threads.
//!
//! Generic models are accepted as given: their Hölder regularity cannot be
//! checked numerically. Only non-singularity of `σ` is checked, at every
//! sampled point.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{NormalSource, Stream};
use crate::timenets::TimeNet;

/// Largest supported state dimension.
pub const MAX_DIM: usize = 8;

/// `b(t, x)` written into the output slice.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `σ(t, x)` as a row-major `d × d` matrix written into the output slice.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum ModelKind {
    /// `X = x0 + W`.
    Brownian,
    /// Constant coefficients; `vol` is row-major `d × d`.
    Arithmetic { drift: Vec<f64>, vol: Vec<f64> },
    /// Componentwise geometric Brownian motion `dX^k = μ_k X^k dt + σ_k X^k dW^k`.
    Geometric { mu: Vec<f64>, sigma: Vec<f64> },
    /// Componentwise `dX^k = κ (m_k - X^k) dt + σ_k dW^k`.
    OrnsteinUhlenbeck {
        kappa: f64,
        mean: Vec<f64>,
        sigma: Vec<f64>,
    },
    Generic { drift: DriftFn, diffusion: DiffusionFn },
}

impl fmt::Debug for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Brownian => write!(f, "Brownian"),
            ModelKind::Arithmetic { drift, vol } => f
                .debug_struct("Arithmetic")
                .field("drift", drift)
                .field("vol", vol)
                .finish(),
            ModelKind::Geometric { mu, sigma } => f
                .debug_struct("Geometric")
                .field("mu", mu)
                .field("sigma", sigma)
                .finish(),
            ModelKind::OrnsteinUhlenbeck { kappa, mean, sigma } => f
                .debug_struct("OrnsteinUhlenbeck")
                .field("kappa", kappa)
                .field("mean", mean)
                .field("sigma", sigma)
                .finish(),
            ModelKind::Generic { .. } => write!(f, "Generic"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardModel {
    dim: usize,
    x0: Vec<f64>,
    kind: ModelKind,
}

impl ForwardModel {
    pub fn new(x0: Vec<f64>, kind: ModelKind) -> Result<Self> {
        let d = x0.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::validation(
                "x0",
                format!("dimension must be in 1..={}, got {}", MAX_DIM, d),
            ));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("x0", "initial state must be finite"));
        }
        let check_len = |field: &str, v: &[f64], n: usize| {
            if v.len() != n {
                Err(Error::validation(
                    field,
                    format!("expected {} entries, got {}", n, v.len()),
                ))
            } else {
                Ok(())
            }
        };
        match &kind {
            ModelKind::Brownian | ModelKind::Generic { .. } => {}
            ModelKind::Arithmetic { drift, vol } => {
                check_len("drift", drift, d)?;
                check_len("vol", vol, d * d)?;
                check_elliptic(vol, d)?;
            }
            ModelKind::Geometric { mu, sigma } => {
                check_len("mu", mu, d)?;
                check_len("sigma", sigma, d)?;
                if sigma.iter().any(|&s| s == 0.0 || !s.is_finite()) {
                    return Err(Error::validation("sigma", "volatilities must be non-zero"));
                }
                if x0.iter().any(|&x| x == 0.0) {
                    return Err(Error::validation(
                        "x0",
                        "geometric model needs a non-zero initial state",
                    ));
                }
            }
            ModelKind::OrnsteinUhlenbeck { kappa, mean, sigma } => {
                check_len("mean", mean, d)?;
                check_len("sigma", sigma, d)?;
                if !(*kappa > 0.0 && kappa.is_finite()) {
                    return Err(Error::validation("kappa", "mean reversion must be positive"));
                }
                if sigma.iter().any(|&s| s == 0.0 || !s.is_finite()) {
                    return Err(Error::validation("sigma", "volatilities must be non-zero"));
                }
            }
        }
        Ok(Self { dim: d, x0, kind })
    }

    /// Standard `d`-dimensional Brownian motion started at zero.
    pub fn brownian(d: usize) -> Result<Self> {
        Self::new(vec![0.0; d], ModelKind::Brownian)
    }

    pub fn geometric(mu: Vec<f64>, sigma: Vec<f64>, x0: Vec<f64>) -> Result<Self> {
        Self::new(x0, ModelKind::Geometric { mu, sigma })
    }

    pub fn ornstein_uhlenbeck(
        kappa: f64,
        mean: Vec<f64>,
        sigma: Vec<f64>,
        x0: Vec<f64>,
    ) -> Result<Self> {
        Self::new(x0, ModelKind::OrnsteinUhlenbeck { kappa, mean, sigma })
    }

    pub fn arithmetic(drift: Vec<f64>, vol: Vec<f64>, x0: Vec<f64>) -> Result<Self> {
        Self::new(x0, ModelKind::Arithmetic { drift, vol })
    }

    pub fn generic(x0: Vec<f64>, drift: DriftFn, diffusion: DiffusionFn) -> Result<Self> {
        Self::new(x0, ModelKind::Generic { drift, diffusion })
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Result<Self> {
        Self::new(x0, self.kind.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn kind_tag(&self) -> &'static str {
        match self.kind {
            ModelKind::Brownian => "brownian",
            ModelKind::Arithmetic { .. } => "arithmetic",
            ModelKind::Geometric { .. } => "geometric",
            ModelKind::OrnsteinUhlenbeck { .. } => "ornstein_uhlenbeck",
            ModelKind::Generic { .. } => "generic",
        }
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            ModelKind::Brownian => out[..d].fill(0.0),
            ModelKind::Arithmetic { drift, .. } => out[..d].copy_from_slice(drift),
            ModelKind::Geometric { mu, .. } => {
                for k in 0..d {
                    out[k] = mu[k] * x[k];
                }
            }
            ModelKind::OrnsteinUhlenbeck { kappa, mean, .. } => {
                for k in 0..d {
                    out[k] = kappa * (mean[k] - x[k]);
                }
            }
            ModelKind::Generic { drift, .. } => drift(t, x, out),
        }
    }

    /// Row-major `d × d` diffusion matrix.
    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            ModelKind::Brownian => set_diag(out, d, |_| 1.0),
            ModelKind::Arithmetic { vol, .. } => out[..d * d].copy_from_slice(vol),
            ModelKind::Geometric { sigma, .. } => set_diag(out, d, |k| sigma[k] * x[k]),
            ModelKind::OrnsteinUhlenbeck { sigma, .. } => set_diag(out, d, |k| sigma[k]),
            ModelKind::Generic { diffusion, .. } => diffusion(t, x, out),
        }
    }
}

fn set_diag(out: &mut [f64], d: usize, f: impl Fn(usize) -> f64) {
    out[..d * d].fill(0.0);
    for k in 0..d {
        out[k * d + k] = f(k);
    }
}

/// `σσ*` must be uniformly positive definite.
fn check_elliptic(vol: &[f64], d: usize) -> Result<()> {
    let s = DMatrix::from_row_slice(d, d, vol);
    let a = &s * s.transpose();
    let eig = a.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max.max(1e-300)) {
        return Err(Error::validation(
            "vol",
            format!("diffusion matrix is not elliptic (eigenvalues of σσ* in [{:e}, {:e}])", min, max),
        ));
    }
    Ok(())
}

/// Mixing profile `η: [0, T] → [-1, 1]`.
#[derive(Clone)]
pub enum MixingSchedule {
    Zero,
    /// `η = χ_{(start, end]}`.
    Indicator { start: f64, end: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for MixingSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixingSchedule::Zero => write!(f, "Zero"),
            MixingSchedule::Indicator { start, end } => {
                write!(f, "Indicator({}, {}]", start, end)
            }
            MixingSchedule::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl MixingSchedule {
    pub fn indicator(start: f64, end: f64) -> Result<Self> {
        if !(start < end) {
            return Err(Error::validation(
                "schedule",
                format!("indicator needs start < end, got ({}, {}]", start, end),
            ));
        }
        Ok(MixingSchedule::Indicator { start, end })
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            MixingSchedule::Zero => 0.0,
            MixingSchedule::Indicator { start, end } => {
                if s > *start && s <= *end {
                    1.0
                } else {
                    0.0
                }
            }
            MixingSchedule::Custom(f) => f(s),
        }
    }

    /// `∫ η(s)² ds` over the grid (exact for indicators, midpoint rule otherwise).
    pub fn l2_mass(&self, grid: &TimeNet) -> f64 {
        match self {
            MixingSchedule::Zero => 0.0,
            MixingSchedule::Indicator { start, end } => {
                end.min(grid.horizon()) - start.max(0.0)
            }
            MixingSchedule::Custom(_) => (0..grid.intervals())
                .map(|i| self.interval_value(grid, i).powi(2) * grid.step(i))
                .sum(),
        }
    }

    /// Value used on grid interval `i`; indicators are exact because their
    /// jump points are knots.
    fn interval_value(&self, grid: &TimeNet, i: usize) -> f64 {
        let k = grid.knots();
        self.eval(0.5 * (k[i] + k[i + 1]))
    }
}

/// Paths of the forward diffusion on a grid, stored path-major.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    model: ForwardModel,
    grid: TimeNet,
    n_paths: usize,
    master_seed: u64,
    states: Vec<f64>,
    increments: Vec<f64>,
    flow: Option<Vec<f64>>,
}

impl PathEnsemble {
    pub(crate) fn from_parts(
        model: ForwardModel,
        grid: TimeNet,
        n_paths: usize,
        master_seed: u64,
        states: Vec<f64>,
        increments: Vec<f64>,
        flow: Option<Vec<f64>>,
    ) -> Result<Self> {
        let d = model.dim();
        let k = grid.len();
        if states.len() != n_paths * k * d || increments.len() != n_paths * (k - 1) * d {
            return Err(Error::Argument("ensemble buffers do not match grid".into()));
        }
        if let Some(f) = &flow {
            if f.len() != n_paths * k * d * d {
                return Err(Error::Argument("flow buffer does not match grid".into()));
            }
        }
        Ok(Self {
            model,
            grid,
            n_paths,
            master_seed,
            states,
            increments,
            flow,
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeNet {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Noise stream id of a path; equal to its index.
    pub fn stream_id(&self, path: usize) -> u64 {
        path as u64
    }

    pub fn has_flow(&self) -> bool {
        self.flow.is_some()
    }

    pub fn state(&self, path: usize, knot: usize) -> &[f64] {
        let d = self.dim();
        let off = (path * self.grid.len() + knot) * d;
        &self.states[off..off + d]
    }

    pub fn increment(&self, path: usize, interval: usize) -> &[f64] {
        let d = self.dim();
        let off = (path * self.grid.intervals() + interval) * d;
        &self.increments[off..off + d]
    }

    /// Row-major `∇X` at a knot, if flow was simulated.
    pub fn flow(&self, path: usize, knot: usize) -> Option<&[f64]> {
        let d = self.dim();
        self.flow.as_ref().map(|f| {
            let off = (path * self.grid.len() + knot) * d * d;
            &f[off..off + d * d]
        })
    }

    /// Component `dim` of `X` at `knot` for every path.
    pub fn column(&self, knot: usize, dim: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, knot)[dim]).collect()
    }

    /// Sum of increments over knots `from..to`, per path and dimension.
    pub fn increment_sum(&self, path: usize, from: usize, to: usize, out: &mut [f64]) {
        out.fill(0.0);
        for i in from..to {
            for (o, v) in out.iter_mut().zip(self.increment(path, i)) {
                *o += v;
            }
        }
    }

    pub(crate) fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub(crate) fn raw_increments(&self) -> &[f64] {
        &self.increments
    }

    pub(crate) fn raw_flow(&self) -> Option<&[f64]> {
        self.flow.as_deref()
    }

    /// Bitwise equality of all simulated data.
    pub fn same_data(&self, other: &PathEnsemble) -> bool {
        fn bits(v: &[f64]) -> impl Iterator<Item = u64> + '_ {
            v.iter().map(|x| x.to_bits())
        }
        self.grid == other.grid
            && self.n_paths == other.n_paths
            && bits(&self.states).eq(bits(&other.states))
            && bits(&self.increments).eq(bits(&other.increments))
            && match (&self.flow, &other.flow) {
                (Some(a), Some(b)) => bits(a).eq(bits(b)),
                (None, None) => true,
                _ => false,
            }
    }
}

/// Base ensemble driven by `W` and its copy driven by `W^η`.
#[derive(Debug, Clone)]
pub struct MixedPathPair {
    pub base: PathEnsemble,
    pub mixed: PathEnsemble,
    pub schedule: MixingSchedule,
}

/// Per-interval Brownian increments and auxiliary unit normals of one path.
trait NoiseSource: Sync {
    fn draw(&self, path: usize, interval: usize, h: f64, dw: &mut [f64], aux: &mut [f64]);
}

struct PlainNoise {
    src: NormalSource,
}

impl NoiseSource for PlainNoise {
    fn draw(&self, path: usize, interval: usize, h: f64, dw: &mut [f64], aux: &mut [f64]) {
        self.src.fill(path as u64, interval as u32, Stream::W, dw);
        let sh = h.sqrt();
        dw.iter_mut().for_each(|v| *v *= sh);
        self.src.fill(path as u64, interval as u32, Stream::AuxW, aux);
    }
}

struct MixedNoise {
    src: NormalSource,
    eta: Vec<f64>,
}

impl NoiseSource for MixedNoise {
    fn draw(&self, path: usize, interval: usize, h: f64, dw: &mut [f64], aux: &mut [f64]) {
        let eta = self.eta[interval];
        let (p, i) = (path as u64, interval as u32);
        let sh = h.sqrt();
        if eta == 0.0 {
            self.src.fill(p, i, Stream::W, dw);
            self.src.fill(p, i, Stream::AuxW, aux);
        } else if eta == 1.0 {
            self.src.fill(p, i, Stream::B, dw);
            self.src.fill(p, i, Stream::AuxB, aux);
        } else {
            let d = dw.len();
            let mut other = [0.0; MAX_DIM];
            let a = (1.0 - eta * eta).sqrt();
            self.src.fill(p, i, Stream::W, dw);
            self.src.fill(p, i, Stream::B, &mut other[..d]);
            for k in 0..d {
                dw[k] = a * dw[k] + eta * other[k];
            }
            self.src.fill(p, i, Stream::AuxW, aux);
            self.src.fill(p, i, Stream::AuxB, &mut other[..d]);
            for k in 0..d {
                aux[k] = a * aux[k] + eta * other[k];
            }
        }
        dw.iter_mut().for_each(|v| *v *= sh);
    }
}

/// Simulates `n_paths` paths of `model` on `grid`.
pub fn simulate(
    model: &ForwardModel,
    grid: &TimeNet,
    n_paths: usize,
    seed: u64,
    with_flow: bool,
) -> Result<PathEnsemble> {
    let noise = PlainNoise {
        src: NormalSource::new(seed),
    };
    simulate_driven(model, grid, n_paths, seed, with_flow, &noise)
}

/// Simulates `X` and `X^η` with `W^η = ∫√(1-η²) dW + ∫η dB` on a common grid.
///
/// Indicator jump points are inserted into `grid`, so the returned ensembles
/// may have more knots than the input grid.
pub fn simulate_mixed(
    model: &ForwardModel,
    grid: &TimeNet,
    schedule: &MixingSchedule,
    n_paths: usize,
    seed: u64,
) -> Result<MixedPathPair> {
    let grid = match schedule {
        MixingSchedule::Indicator { start, end } => {
            let h = grid.horizon();
            if *start < 0.0 || *end > h {
                return Err(Error::Domain(format!(
                    "indicator ({}, {}] is outside [0, {}]",
                    start, end, h
                )));
            }
            let extra: Vec<f64> = [*start, *end].into_iter().filter(|&t| t > 0.0).collect();
            grid.with_inserted(&extra)?
        }
        _ => grid.clone(),
    };
    let eta: Vec<f64> = (0..grid.intervals())
        .map(|i| schedule.interval_value(&grid, i))
        .collect();
    if let Some(bad) = eta.iter().find(|e| !(e.abs() <= 1.0)) {
        return Err(Error::validation(
            "schedule",
            format!("mixing profile value {} is outside [-1, 1]", bad),
        ));
    }
    let base = simulate(model, &grid, n_paths, seed, false)?;
    let noise = MixedNoise {
        src: NormalSource::new(seed),
        eta,
    };
    let mixed = simulate_driven(model, &grid, n_paths, seed, false, &noise)?;
    Ok(MixedPathPair {
        base,
        mixed,
        schedule: schedule.clone(),
    })
}

fn simulate_driven(
    model: &ForwardModel,
    grid: &TimeNet,
    n_paths: usize,
    seed: u64,
    with_flow: bool,
    noise: &dyn NoiseSource,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::Argument("n_paths must be at least 1".into()));
    }
    let d = model.dim();
    let k = grid.len();
    let mut states = vec![0.0; n_paths * k * d];
    let mut increments = vec![0.0; n_paths * (k - 1) * d];
    let mut flow = with_flow.then(|| vec![0.0; n_paths * k * d * d]);

    let stepper = Stepper::new(model);
    let run = |path: usize, xs: &mut [f64], dws: &mut [f64], fl: Option<&mut [f64]>| {
        stepper.run_path(grid, path, noise, xs, dws, fl)
    };
    match flow.as_mut() {
        Some(f) => states
            .par_chunks_mut(k * d)
            .zip(increments.par_chunks_mut((k - 1) * d))
            .zip(f.par_chunks_mut(k * d * d))
            .enumerate()
            .try_for_each(|(p, ((xs, dws), fl))| run(p, xs, dws, Some(fl)))?,
        None => states
            .par_chunks_mut(k * d)
            .zip(increments.par_chunks_mut((k - 1) * d))
            .enumerate()
            .try_for_each(|(p, (xs, dws))| run(p, xs, dws, None))?,
    }
    PathEnsemble::from_parts(
        model.clone(),
        grid.clone(),
        n_paths,
        seed,
        states,
        increments,
        flow,
    )
}

struct Stepper<'a> {
    model: &'a ForwardModel,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a ForwardModel) -> Self {
        Self { model }
    }

    fn run_path(
        &self,
        grid: &TimeNet,
        path: usize,
        noise: &dyn NoiseSource,
        xs: &mut [f64],
        dws: &mut [f64],
        mut flow: Option<&mut [f64]>,
    ) -> Result<()> {
        let d = self.model.dim();
        let knots = grid.knots();
        xs[..d].copy_from_slice(self.model.x0());
        if let Some(f) = flow.as_deref_mut() {
            set_diag(&mut f[..d * d], d, |_| 1.0);
        }
        let mut aux = [0.0; MAX_DIM];
        for i in 0..grid.intervals() {
            let h = knots[i + 1] - knots[i];
            let dw = &mut dws[i * d..(i + 1) * d];
            noise.draw(path, i, h, dw, &mut aux[..d]);
            let (prev, next) = xs.split_at_mut((i + 1) * d);
            let x = &prev[i * d..];
            let x_next = &mut next[..d];
            let flow_pair = flow.as_deref_mut().map(|f| {
                let (fp, fnx) = f.split_at_mut((i + 1) * d * d);
                (&fp[i * d * d..], &mut fnx[..d * d])
            });
            self.step(knots[i], h, x, dw, &aux[..d], x_next, flow_pair)
                .map_err(|message| Error::Simulation {
                    path,
                    knot: i,
                    message,
                })?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        t: f64,
        h: f64,
        x: &[f64],
        dw: &[f64],
        aux: &[f64],
        out: &mut [f64],
        flow: Option<(&[f64], &mut [f64])>,
    ) -> std::result::Result<(), String> {
        let d = x.len();
        match &self.model.kind {
            ModelKind::Brownian => {
                for k in 0..d {
                    out[k] = x[k] + dw[k];
                }
                if let Some((j, jn)) = flow {
                    jn.copy_from_slice(j);
                }
            }
            ModelKind::Arithmetic { drift, vol } => {
                for r in 0..d {
                    let mut v = x[r] + drift[r] * h;
                    for c in 0..d {
                        v += vol[r * d + c] * dw[c];
                    }
                    out[r] = v;
                }
                if let Some((j, jn)) = flow {
                    jn.copy_from_slice(j);
                }
            }
            ModelKind::Geometric { mu, sigma } => {
                let mut growth = [0.0; MAX_DIM];
                for k in 0..d {
                    growth[k] = ((mu[k] - 0.5 * sigma[k] * sigma[k]) * h + sigma[k] * dw[k]).exp();
                    out[k] = x[k] * growth[k];
                }
                if let Some((j, jn)) = flow {
                    for r in 0..d {
                        for c in 0..d {
                            jn[r * d + c] = j[r * d + c] * growth[r];
                        }
                    }
                }
            }
            ModelKind::OrnsteinUhlenbeck { kappa, mean, sigma } => {
                let decay = (-kappa * h).exp();
                // ∫ e^{-κ(h-u)} dW_u = c ΔW + s ζ with ζ independent of ΔW
                let c = -(-kappa * h).exp_m1() / (kappa * h);
                let var = -(-2.0 * kappa * h).exp_m1() / (2.0 * kappa);
                let s = (var - c * c * h).max(0.0).sqrt();
                for k in 0..d {
                    let integral = c * dw[k] + s * aux[k];
                    out[k] = x[k] * decay + mean[k] * (1.0 - decay) + sigma[k] * integral;
                }
                if let Some((j, jn)) = flow {
                    for (a, b) in jn.iter_mut().zip(j) {
                        *a = b * decay;
                    }
                }
            }
            ModelKind::Generic { drift, diffusion } => {
                let mut b = [0.0; MAX_DIM];
                let mut sig = [0.0; MAX_DIM * MAX_DIM];
                drift(t, x, &mut b[..d]);
                diffusion(t, x, &mut sig[..d * d]);
                if is_singular(&sig[..d * d], d) {
                    return Err("diffusion matrix is singular".into());
                }
                for r in 0..d {
                    let mut v = x[r] + b[r] * h;
                    for c in 0..d {
                        v += sig[r * d + c] * dw[c];
                    }
                    if !v.is_finite() {
                        return Err("state became non-finite".into());
                    }
                    out[r] = v;
                }
                if let Some((j, jn)) = flow {
                    self.generic_flow_step(t, h, x, dw, j, jn);
                }
            }
        }
        Ok(())
    }

    /// Linearized Euler step `J' = J + Db J h + Σ_c Dσ_{·c} J ΔW^c`, with
    /// Jacobians of the coefficients taken by central differences.
    #[allow(clippy::too_many_arguments)]
    fn generic_flow_step(&self, t: f64, h: f64, x: &[f64], dw: &[f64], j: &[f64], jn: &mut [f64]) {
        let d = x.len();
        // step operator A = I + Db h + Σ_c Dσ_{·c} ΔW^c, with A[r][m] = ∂/∂x_m of row r
        let mut a = [0.0; MAX_DIM * MAX_DIM];
        let mut xp = [0.0; MAX_DIM];
        let mut xm = [0.0; MAX_DIM];
        let mut bp = [0.0; MAX_DIM];
        let mut bm = [0.0; MAX_DIM];
        let mut sp = [0.0; MAX_DIM * MAX_DIM];
        let mut sm = [0.0; MAX_DIM * MAX_DIM];
        for m in 0..d {
            let eps = 1e-6 * x[m].abs().max(1.0);
            xp[..d].copy_from_slice(x);
            xm[..d].copy_from_slice(x);
            xp[m] += eps;
            xm[m] -= eps;
            self.model.drift(t, &xp[..d], &mut bp[..d]);
            self.model.drift(t, &xm[..d], &mut bm[..d]);
            self.model.diffusion(t, &xp[..d], &mut sp[..d * d]);
            self.model.diffusion(t, &xm[..d], &mut sm[..d * d]);
            for r in 0..d {
                let mut v = if r == m { 1.0 } else { 0.0 };
                v += (bp[r] - bm[r]) / (2.0 * eps) * h;
                for c in 0..d {
                    v += (sp[r * d + c] - sm[r * d + c]) / (2.0 * eps) * dw[c];
                }
                a[r * d + m] = v;
            }
        }
        for r in 0..d {
            for c in 0..d {
                let mut v = 0.0;
                for m in 0..d {
                    v += a[r * d + m] * j[m * d + c];
                }
                jn[r * d + c] = v;
            }
        }
    }
}

fn is_singular(m: &[f64], d: usize) -> bool {
    if d == 1 {
        return !(m[0].abs() > 1e-300) || !m[0].is_finite();
    }
    let mat = DMatrix::from_row_slice(d, d, m);
    let scale = mat.amax();
    !(scale.is_finite() && mat.determinant().abs() > 1e-14 * scale.powi(d as i32))
}

/// First-order Malliavin weight
/// `N = (R - r)^{-1} (∫_r^R (σ(s, X_s)^{-1} ∇X_s ∇X_r^{-1})* dW_s)*`,
/// discretized on the ensemble grid. Returns `d` entries per path, path-major.
pub fn malliavin_weight_order1(
    ensemble: &PathEnsemble,
    r_index: usize,
    big_r_index: usize,
) -> Result<Vec<f64>> {
    if !ensemble.has_flow() {
        return Err(Error::Precondition(
            "Malliavin weights need an ensemble simulated with flow".into(),
        ));
    }
    if !(r_index < big_r_index && big_r_index < ensemble.grid().len()) {
        return Err(Error::Argument(format!(
            "need r_index < R_index < {}, got {} and {}",
            ensemble.grid().len(),
            r_index,
            big_r_index
        )));
    }
    let d = ensemble.dim();
    let model = ensemble.model();
    let knots = ensemble.grid().knots();
    let span = knots[big_r_index] - knots[r_index];
    let n = ensemble.n_paths();
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(d)
        .enumerate()
        .try_for_each(|(p, w)| -> Result<()> {
            let mut sig = [0.0; MAX_DIM * MAX_DIM];
            if d == 1 {
                let jr = ensemble.flow(p, r_index).unwrap()[0];
                let mut acc = 0.0;
                for k in r_index..big_r_index {
                    model.diffusion(knots[k], ensemble.state(p, k), &mut sig[..1]);
                    if sig[0] == 0.0 {
                        return Err(Error::Simulation {
                            path: p,
                            knot: k,
                            message: "diffusion vanishes".into(),
                        });
                    }
                    let jk = ensemble.flow(p, k).unwrap()[0];
                    acc += jk / jr / sig[0] * ensemble.increment(p, k)[0];
                }
                w[0] = acc / span;
                return Ok(());
            }
            let jr = DMatrix::from_row_slice(d, d, ensemble.flow(p, r_index).unwrap());
            let jr_inv = jr.try_inverse().ok_or_else(|| Error::Simulation {
                path: p,
                knot: r_index,
                message: "flow is not invertible".into(),
            })?;
            let mut acc = DVector::zeros(d);
            for k in r_index..big_r_index {
                model.diffusion(knots[k], ensemble.state(p, k), &mut sig[..d * d]);
                let s_inv = DMatrix::from_row_slice(d, d, &sig[..d * d])
                    .try_inverse()
                    .ok_or_else(|| Error::Simulation {
                        path: p,
                        knot: k,
                        message: "diffusion matrix is singular".into(),
                    })?;
                let jk = DMatrix::from_row_slice(d, d, ensemble.flow(p, k).unwrap());
                let kernel = s_inv * jk * &jr_inv;
                let dw = DVector::from_row_slice(ensemble.increment(p, k));
                acc += kernel.transpose() * dw;
            }
            for c in 0..d {
                w[c] = acc[c] / span;
            }
            Ok(())
        })?;
    Ok(out)
}
