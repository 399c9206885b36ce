//! Ground truth for `X = W`, `f = 0`, `d = 1`, `T = 1`.
//!
//! With `g = Σ α_n h_n` in the orthonormal Hermite basis of `L_2(γ_1)` the
//! solution of the backward equation is explicit:
//!
//! ```text
//! Y_t = F(t, W_t),   F(t, x) = E g(x + W_{1-t}) = Σ α_n t^{n/2} h_n(x/√t)
//! ‖Z_t‖_2²           = Σ α_{n+1}² (n+1) t^n
//! ‖Z_t - Z_s‖_2²     = ∫_s^t Σ α_{n+2}² (n+2)(n+1) r^n dr
//! ‖g(W_1) - Y_t‖_2²  = Σ α_n² (1 - t^n)
//! ```
//!
//! Coefficients come from fixed Gauss-Hermite quadrature. Quantities that
//! must stay accurate close to `t = 1` for discontinuous `g` are computed by
//! breakpoint-aware quadrature in state space instead of through the series.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite, hermite, hermite_all, NormalIntegrator};

pub const DEFAULT_ORDER: usize = 64;
pub const DEFAULT_NODES: usize = 256;

/// One-dimensional terminal functions with known singular points.
#[derive(Clone)]
pub enum TerminalFunction1D {
    /// `χ_{[K, ∞)}`.
    Indicator { k: f64 },
    /// `x^α` for `x ≥ 0`, zero otherwise.
    Power { alpha: f64 },
    /// Orthonormal Hermite polynomial `h_n`; `h_1(x) = x`.
    Hermite { n: usize },
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        /// Points where `f` jumps or has a kink.
        singular: Vec<f64>,
        continuous: bool,
    },
}

impl fmt::Debug for TerminalFunction1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for TerminalFunction1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalFunction1D::Indicator { k } => write!(f, "indicator:{}", k),
            TerminalFunction1D::Power { alpha } => write!(f, "power:{}", alpha),
            TerminalFunction1D::Hermite { n } => write!(f, "hermite:{}", n),
            TerminalFunction1D::Custom { .. } => write!(f, "custom"),
        }
    }
}

impl FromStr for TerminalFunction1D {
    type Err = Error;

    /// Parses `indicator:K`, `power:α`, `hermite:n` or `linear`.
    fn from_str(s: &str) -> Result<Self> {
        let (tag, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |field: &str| {
            arg.trim().parse::<f64>().map_err(|_| {
                Error::validation(field, format!("cannot parse `{}` in `{}`", arg, s))
            })
        };
        match tag.trim() {
            "indicator" => Ok(Self::Indicator { k: num("k")? }),
            "power" => Self::power(num("alpha")?),
            "hermite" => {
                let n = arg.trim().parse::<usize>().map_err(|_| {
                    Error::validation("n", format!("cannot parse `{}` in `{}`", arg, s))
                })?;
                Ok(Self::Hermite { n })
            }
            "linear" => Ok(Self::Hermite { n: 1 }),
            other => Err(Error::validation(
                "g",
                format!("unknown terminal function `{}`", other),
            )),
        }
    }
}

impl TerminalFunction1D {
    pub fn indicator(k: f64) -> Self {
        Self::Indicator { k }
    }

    pub fn power(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::validation("alpha", "power exponent must lie in (0, 1)"));
        }
        Ok(Self::Power { alpha })
    }

    pub fn hermite(n: usize) -> Self {
        Self::Hermite { n }
    }

    pub fn linear() -> Self {
        Self::Hermite { n: 1 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Indicator { k } => {
                if x >= *k {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Power { alpha } => {
                if x > 0.0 {
                    x.powf(*alpha)
                } else {
                    0.0
                }
            }
            Self::Hermite { n } => hermite(*n, x),
            Self::Custom { f, .. } => f(x),
        }
    }

    pub fn singular_points(&self) -> Vec<f64> {
        match self {
            Self::Indicator { k } => vec![*k],
            Self::Power { .. } => vec![0.0],
            Self::Hermite { .. } => vec![],
            Self::Custom { singular, .. } => singular.clone(),
        }
    }

    pub fn is_continuous(&self) -> bool {
        match self {
            Self::Indicator { .. } => false,
            Self::Custom { continuous, .. } => *continuous,
            _ => true,
        }
    }

    /// The power example needs `α < 1 - 1/p` to be used at integrability `p`.
    pub fn validate_for_p(&self, p: f64) -> Result<()> {
        if let Self::Power { alpha } = self {
            if *alpha >= 1.0 - 1.0 / p {
                return Err(Error::validation(
                    "alpha",
                    format!("power({}) needs alpha < 1 - 1/p = {}", alpha, 1.0 - 1.0 / p),
                ));
            }
        }
        Ok(())
    }
}

/// Truncated expansion `g ≈ Σ_{n ≤ N} α_n h_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteExpansion {
    pub coefficients: Vec<f64>,
    pub order: usize,
    pub nodes: usize,
    /// `Σ_{N-8 < n ≤ N} α_n²`, the mass carried by the last retained terms.
    pub tail_mass: f64,
    /// `Σ_{N < n < nodes} α_n²` of the discrete spectrum that was dropped.
    pub discarded_mass: f64,
    /// Quadrature value of `∫ g² dγ_1` on the same nodes.
    pub norm_sq: f64,
    /// `max_{n ≤ N} |α_n - α_n'|` against a rule with twice the nodes.
    pub coefficient_error: f64,
    pub label: String,
}

/// Expands `g` up to order `order` with `nodes` Gauss-Hermite nodes.
pub fn expand(g: &TerminalFunction1D, order: usize, nodes: usize) -> Result<HermiteExpansion> {
    if nodes < 2 * order || nodes <= order {
        return Err(Error::Argument(format!(
            "need at least 2N = {} quadrature nodes, got {}",
            2 * order,
            nodes
        )));
    }
    let (x, w) = gauss_hermite(nodes);
    let mut alpha = vec![0.0; nodes];
    let mut hs = vec![0.0; nodes];
    let mut norm_sq = 0.0;
    for (&xj, &wj) in x.iter().zip(&w) {
        let gx = g.eval(xj);
        let wg = wj * gx;
        if !wg.is_finite() || !(wg * gx).is_finite() {
            return Err(Error::Numeric(format!(
                "g({}) overflows the quadrature ({})",
                xj, gx
            )));
        }
        norm_sq += wg * gx;
        hermite_all(xj, &mut hs);
        for (a, h) in alpha.iter_mut().zip(&hs) {
            *a += wg * h;
        }
    }
    let discarded_mass = alpha[order + 1..].iter().map(|a| a * a).sum();
    alpha.truncate(order + 1);
    let doubled = project(g, order, 2 * nodes);
    let coefficient_error = alpha
        .iter()
        .zip(&doubled)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let tail_mass = alpha[order.saturating_sub(7)..].iter().map(|a| a * a).sum();
    Ok(HermiteExpansion {
        coefficients: alpha,
        order,
        nodes,
        tail_mass,
        discarded_mass,
        norm_sq,
        coefficient_error,
        label: g.to_string(),
    })
}

fn project(g: &TerminalFunction1D, order: usize, nodes: usize) -> Vec<f64> {
    let (x, w) = gauss_hermite(nodes);
    let mut alpha = vec![0.0; order + 1];
    let mut hs = vec![0.0; order + 1];
    for (&xj, &wj) in x.iter().zip(&w) {
        let wg = wj * g.eval(xj);
        if wg == 0.0 || !wg.is_finite() {
            continue;
        }
        hermite_all(xj, &mut hs);
        for (a, h) in alpha.iter_mut().zip(&hs) {
            *a += wg * h;
        }
    }
    alpha
}

impl HermiteExpansion {
    /// `Σ_{n ≤ N} α_n²`.
    pub fn retained_mass(&self) -> f64 {
        self.coefficients.iter().map(|a| a * a).sum()
    }

    /// `|retained + discarded - ∫ g² dγ_1|`; zero up to rounding on a full
    /// discrete spectrum.
    pub fn parseval_defect(&self) -> f64 {
        (self.retained_mass() + self.discarded_mass - self.norm_sq).abs()
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Domain(format!(
                "series evaluation needs 0 <= t < 1, got {}",
                t
            )));
        }
        Ok(())
    }

    /// `‖Z_t - Z_s‖_2 = (Σ α_{n+2}² (n+2) (t^{n+1} - s^{n+1}))^{1/2}`.
    pub fn z_increment_l2(&self, s: f64, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        if !(0.0 <= s && s <= t) {
            return Err(Error::Domain(format!("need 0 <= s <= t, got s = {}, t = {}", s, t)));
        }
        let a = &self.coefficients;
        let mut sum = 0.0;
        let (mut tp, mut sp) = (t, s);
        for n in 0..a.len().saturating_sub(2) {
            let c = a[n + 2];
            sum += c * c * (n as f64 + 2.0) * (tp - sp);
            tp *= t;
            sp *= s;
        }
        Ok(sum.sqrt())
    }

    /// `‖Z_t‖_2 = (Σ α_{n+1}² (n+1) t^n)^{1/2}`.
    pub fn z_norm_l2(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let a = &self.coefficients;
        let mut sum = 0.0;
        let mut tp = 1.0;
        for n in 0..a.len().saturating_sub(1) {
            sum += a[n + 1] * a[n + 1] * (n as f64 + 1.0) * tp;
            tp *= t;
        }
        Ok(sum.sqrt())
    }

    /// `‖g(W_1) - E(g(W_1) | F_t)‖_2` of the truncated expansion.
    pub fn residual_l2(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let mut sum = 0.0;
        let mut tp = 1.0;
        for a in &self.coefficients {
            sum += a * a * (1.0 - tp);
            tp *= t;
        }
        Ok(sum.max(0.0).sqrt())
    }

    /// `F(t, x)` and its first two `x`-derivatives from the series.
    pub fn heat_kernel(&self, t: f64, x: f64) -> Result<KernelValues> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("series kernel needs 0 < t <= 1, got {}", t)));
        }
        let n = self.coefficients.len();
        let st = t.sqrt();
        let mut hs = vec![0.0; n];
        hermite_all(x / st, &mut hs);
        let (mut f, mut df, mut d2f) = (0.0, 0.0, 0.0);
        // ∂_x [t^{n/2} h_n(x/√t)] = √n t^{(n-1)/2} h_{n-1}(x/√t)
        for (k, a) in self.coefficients.iter().enumerate() {
            let kf = k as f64;
            f += a * t.powf(kf / 2.0) * hs[k];
            if k >= 1 {
                df += a * kf.sqrt() * t.powf((kf - 1.0) / 2.0) * hs[k - 1];
            }
            if k >= 2 {
                d2f += a * (kf * (kf - 1.0)).sqrt() * t.powf((kf - 2.0) / 2.0) * hs[k - 2];
            }
        }
        Ok(KernelValues { f, df, d2f })
    }
}

/// `F(t, x)`, `∇F(t, x)` and `D²F(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValues {
    pub f: f64,
    pub df: f64,
    pub d2f: f64,
}

/// Quadrature result with a node-doubling error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadValue {
    pub value: f64,
    pub error: f64,
}

/// `F(t, x) = E g(x + W_{1-t})` and its derivatives, by quadrature against
/// the Gaussian kernel and its `x`-derivatives.
pub fn heat_kernel_f(g: &TerminalFunction1D, t: f64, x: f64) -> Result<KernelValues> {
    heat_kernel_with(&NormalIntegrator::default(), g, t, x)
}

fn heat_kernel_with(
    q: &NormalIntegrator,
    g: &TerminalFunction1D,
    t: f64,
    x: f64,
) -> Result<KernelValues> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("kernel needs 0 <= t <= 1, got {}", t)));
    }
    if t == 1.0 {
        return match g {
            TerminalFunction1D::Hermite { n } => {
                let nf = *n as f64;
                Ok(KernelValues {
                    f: hermite(*n, x),
                    df: if *n >= 1 { nf.sqrt() * hermite(n - 1, x) } else { 0.0 },
                    d2f: if *n >= 2 {
                        (nf * (nf - 1.0)).sqrt() * hermite(n - 2, x)
                    } else {
                        0.0
                    },
                })
            }
            _ => Err(Error::Domain(
                "derivatives of F are singular at t = 1 for non-smooth g".into(),
            )),
        };
    }
    let var = 1.0 - t;
    let sd = var.sqrt();
    let breaks = g.singular_points();
    let f = q.expect(|z| g.eval(z), x, sd, &breaks);
    let df = q.expect(|z| g.eval(z) * (z - x) / var, x, sd, &breaks);
    let d2f = q.expect(
        |z| g.eval(z) * ((z - x) * (z - x) / (var * var) - 1.0 / var),
        x,
        sd,
        &breaks,
    );
    Ok(KernelValues { f, df, d2f })
}

/// `‖g(W_1) - E(g(W_1) | F_t)‖_p` by nested quadrature: outer over `W_t`,
/// inner over the remaining increment `W_1 - W_t`.
pub fn cond_residual_norm(g: &TerminalFunction1D, t: f64, p: f64) -> Result<QuadValue> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(Error::Argument(format!("norm order must satisfy 2 <= p < ∞, got {}", p)));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("residual needs 0 <= t < 1, got {}", t)));
    }
    let coarse = NormalIntegrator::default();
    let fine = coarse.doubled();
    let a = residual_with(&coarse, g, t, p);
    let b = residual_with(&fine, g, t, p);
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numeric(format!("residual quadrature diverged at t = {}", t)));
    }
    Ok(QuadValue {
        value: b,
        error: (a - b).abs(),
    })
}

fn residual_with(q: &NormalIntegrator, g: &TerminalFunction1D, t: f64, p: f64) -> f64 {
    let breaks = g.singular_points();
    let sd_rest = (1.0 - t).sqrt();
    let inner = |x: f64| {
        let cond = q.expect(|z| g.eval(z), x, sd_rest, &breaks);
        if p == 2.0 {
            q.expect(|z| (g.eval(z) - cond).powi(2), x, sd_rest, &breaks)
        } else {
            q.expect(|z| (g.eval(z) - cond).abs().powf(p), x, sd_rest, &breaks)
        }
    };
    q.expect(inner, 0.0, t.sqrt(), &breaks).powf(1.0 / p)
}

/// `‖Z_t‖_p = ‖∇F(t, W_t)‖_p` by quadrature over `W_t`.
pub fn z_norm(g: &TerminalFunction1D, t: f64, p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("Z norm needs 0 <= t < 1, got {}", t)));
    }
    let q = NormalIntegrator::default();
    let breaks = g.singular_points();
    let sd_rest = (1.0 - t).sqrt();
    let grad = |x: f64| q.expect(|z| g.eval(z) * (z - x), x, sd_rest, &breaks) / (1.0 - t);
    Ok(q
        .expect(|x| grad(x).abs().powf(p), 0.0, t.sqrt(), &breaks)
        .powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn exp_of(g: &TerminalFunction1D) -> HermiteExpansion {
        expand(g, DEFAULT_ORDER, DEFAULT_NODES).unwrap()
    }

    #[test]
    fn hermite_and_linear_expansions_are_unit_vectors() {
        let e = exp_of(&TerminalFunction1D::hermite(2));
        for (n, a) in e.coefficients.iter().enumerate() {
            let want = if n == 2 { 1.0 } else { 0.0 };
            assert!((a - want).abs() < 1e-12, "alpha_{} = {}", n, a);
        }
        let e = exp_of(&TerminalFunction1D::linear());
        for (n, a) in e.coefficients.iter().enumerate() {
            let want = if n == 1 { 1.0 } else { 0.0 };
            assert!((a - want).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_expansion_low_coefficients() {
        let e = exp_of(&TerminalFunction1D::indicator(0.0));
        let a = &e.coefficients;
        assert!((a[0] - 0.5).abs() < 1e-12);
        // fixed nodes converge slowly across the jump
        assert!((a[1] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-3, "{}", a[1]);
        assert!(a[2].abs() < 1e-12);
        // α_3 = h_2(0) φ(0)/√3 = -1/√(2·3·2π)
        assert!((a[3] + 1.0 / (12.0 * PI).sqrt()).abs() < 1e-3);
        assert!(e.coefficient_error > 1e-5 && e.coefficient_error < 1e-3);
    }

    #[test]
    fn parseval_holds_on_discrete_spectrum() {
        for g in [
            TerminalFunction1D::indicator(0.0),
            TerminalFunction1D::indicator(0.7),
            TerminalFunction1D::power(0.25).unwrap(),
            TerminalFunction1D::hermite(2),
            TerminalFunction1D::linear(),
        ] {
            let e = exp_of(&g);
            assert!(e.parseval_defect() < 1e-10, "{}: {}", g, e.parseval_defect());
        }
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(matches!(
            expand(&TerminalFunction1D::linear(), 64, 100),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let g = TerminalFunction1D::Custom {
            f: Arc::new(|x: f64| (x * x).exp()),
            singular: vec![],
            continuous: true,
        };
        assert!(matches!(expand(&g, 64, 256), Err(Error::Numeric(_))));
    }

    #[test]
    fn z_increment_examples() {
        let h2 = exp_of(&TerminalFunction1D::hermite(2));
        assert!((h2.z_increment_l2(0.25, 0.75).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(h2.z_increment_l2(0.4, 0.4).unwrap(), 0.0);
        let h1 = exp_of(&TerminalFunction1D::linear());
        assert!(h1.z_increment_l2(0.1, 0.9).unwrap() < 1e-12);
        assert!(matches!(h2.z_increment_l2(0.5, 1.0), Err(Error::Domain(_))));
        assert!((h2.z_norm_l2(0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_residual_is_square_root_of_remaining_time() {
        let g = TerminalFunction1D::linear();
        for &t in &[0.0, 0.3, 0.9, 0.999] {
            let r = cond_residual_norm(&g, t, 2.0).unwrap();
            assert!((r.value - (1.0 - t).sqrt()).abs() < 1e-10, "t={} {:?}", t, r);
        }
        assert!(matches!(cond_residual_norm(&g, 0.5, 1.5), Err(Error::Argument(_))));
        assert!(matches!(cond_residual_norm(&g, 1.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn hermite_residual_matches_martingale_norm() {
        for n in 1..=6 {
            let g = TerminalFunction1D::hermite(n);
            for &t in &[0.2, 0.5, 0.8] {
                let r = cond_residual_norm(&g, t, 2.0).unwrap();
                let exact = (1.0 - t.powi(n as i32)).sqrt();
                assert!((r.value - exact).abs() < 1e-6, "n={} t={} {}", n, t, r.value);
            }
        }
    }

    #[test]
    fn residual_exponents_for_singular_terminals() {
        let fit = |g: &TerminalFunction1D| {
            let pts: Vec<(f64, f64)> = [0.9, 0.99, 0.999]
                .iter()
                .map(|&t| {
                    let r = cond_residual_norm(g, t, 2.0).unwrap().value;
                    ((1.0 - t as f64).ln(), r.ln())
                })
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            2.0 * sxy / sxx
        };
        let th = fit(&TerminalFunction1D::indicator(0.0));
        assert!((th - 0.5).abs() < 0.03, "{}", th);
        let th = fit(&TerminalFunction1D::power(0.25).unwrap());
        assert!((th - 0.75).abs() < 0.03, "{}", th);
    }

    #[test]
    fn kernel_examples() {
        let k = heat_kernel_f(&TerminalFunction1D::linear(), 0.3, 1.7).unwrap();
        assert!((k.f - 1.7).abs() < 1e-12);
        assert!((k.df - 1.0).abs() < 1e-12);
        assert!(k.d2f.abs() < 1e-10);
        let ind = TerminalFunction1D::indicator(0.0);
        let k = heat_kernel_f(&ind, 0.96, 0.0).unwrap();
        assert!((k.df - 1.994_711_40).abs() < 1e-8, "{}", k.df);
        assert!(matches!(heat_kernel_f(&ind, 1.0, 0.0), Err(Error::Domain(_))));
        let h3 = heat_kernel_f(&TerminalFunction1D::hermite(3), 1.0, 0.4).unwrap();
        assert!((h3.df - 3f64.sqrt() * hermite(2, 0.4)).abs() < 1e-14);
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let h = 1e-5;
        for g in [
            TerminalFunction1D::indicator(0.2),
            TerminalFunction1D::power(0.25).unwrap(),
        ] {
            for &(t, x) in &[(0.5, 0.1), (0.8, -0.3), (0.3, 1.0)] {
                let k = heat_kernel_f(&g, t, x).unwrap();
                let kp = heat_kernel_f(&g, t, x + h).unwrap();
                let km = heat_kernel_f(&g, t, x - h).unwrap();
                let fd1 = (kp.f - km.f) / (2.0 * h);
                let fd2 = (kp.df - km.df) / (2.0 * h);
                assert!(((k.df - fd1) / k.df).abs() < 1e-4, "{} {} {}", g, k.df, fd1);
                assert!(((k.d2f - fd2) / k.d2f.abs().max(1e-3)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn kernel_martingale_property() {
        let q = NormalIntegrator::default();
        for g in [
            TerminalFunction1D::indicator(0.0),
            TerminalFunction1D::power(0.25).unwrap(),
            TerminalFunction1D::hermite(3),
        ] {
            let f0 = heat_kernel_f(&g, 0.0, 0.0).unwrap().f;
            for &t in &[0.25f64, 0.5, 0.75] {
                let m = q.expect(
                    |x| heat_kernel_f(&g, t, x).unwrap().f,
                    0.0,
                    t.sqrt(),
                    &g.singular_points(),
                );
                assert!((m - f0).abs() < 1e-8, "{} t={} {} vs {}", g, t, m, f0);
            }
        }
    }

    #[test]
    fn series_kernel_agrees_with_quadrature() {
        let g = TerminalFunction1D::indicator(0.0);
        let e = exp_of(&g);
        let a = e.heat_kernel(0.5, 0.3).unwrap();
        let b = heat_kernel_f(&g, 0.5, 0.3).unwrap();
        assert!((a.f - b.f).abs() < 2e-3);
        assert!((a.df - b.df).abs() < 2e-3);
    }

    #[test]
    fn gradient_bound_with_unit_weight_constant() {
        let g = TerminalFunction1D::indicator(0.0);
        for &t in &[0.5, 0.9, 0.99] {
            let zn = z_norm(&g, t, 2.0).unwrap();
            let res = cond_residual_norm(&g, t, 2.0).unwrap().value;
            assert!(zn <= res / (1.0 - t).sqrt() + 1e-12, "t={} {} {}", t, zn, res);
        }
    }

    #[test]
    fn z_norm_quadrature_matches_closed_form_for_indicator() {
        // ‖Z_t‖_2² = 1 / (2π ε √(ε² + 2t)), ε = √(1-t)
        let g = TerminalFunction1D::indicator(0.0);
        for &t in &[0.3, 0.9, 0.999] {
            let eps = (1.0f64 - t).sqrt();
            let exact = (1.0 / (2.0 * PI * eps * (eps * eps + 2.0 * t).sqrt())).sqrt();
            let got = z_norm(&g, t, 2.0).unwrap();
            assert!(((got - exact) / exact).abs() < 1e-9, "{} {}", got, exact);
        }
        let e = exp_of(&g);
        let exact = (1.0 / (2.0 * PI * 0.5f64.sqrt() * (0.5f64 + 1.0).sqrt())).sqrt();
        assert!((e.z_norm_l2(0.5).unwrap() - exact).abs() < 1e-3);
    }

    #[test]
    fn parse_tags() {
        assert!(matches!(
            "indicator:0".parse::<TerminalFunction1D>().unwrap(),
            TerminalFunction1D::Indicator { k } if k == 0.0
        ));
        assert!("power:1.5".parse::<TerminalFunction1D>().is_err());
        assert!("wat:1".parse::<TerminalFunction1D>().is_err());
        let p = TerminalFunction1D::power(0.6).unwrap();
        assert!(p.validate_for_p(2.0).is_err());
        assert!(p.validate_for_p(4.0).is_ok());
    }
}
