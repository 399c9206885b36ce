//! Least-squares projections standing in for conditional expectations.
//!
//! A [`FeatureMap`] is fitted to the cross-section of paths at one knot
//! (centering, scaling, spline knots) and then evaluated row by row. Rows are
//! stored sparsely, Gram matrices are accumulated over fixed-size chunks of
//! paths and summed in chunk order, so a fit is bitwise independent of the
//! number of worker threads.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    /// Monomials of total degree `≤ degree` in the standardized state.
    GlobalPoly { degree: usize },
    /// Hat functions on empirical quantile knots, one family per coordinate.
    PiecewiseLinear { bins: usize },
    /// Orthonormal Hermite polynomials of each standardized coordinate.
    Hermite { order: usize },
}

impl Basis {
    fn size_param(&self) -> usize {
        match *self {
            Basis::GlobalPoly { degree } => degree,
            Basis::PiecewiseLinear { bins } => bins,
            Basis::Hermite { order } => order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub basis: Basis,
    /// Ridge weight relative to the mean diagonal of the normalized Gram matrix.
    pub ridge: f64,
    /// Polynomial degree used for each observed breakpoint state.
    pub history_degree: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            basis: Basis::GlobalPoly { degree: 3 },
            ridge: 1e-8,
            history_degree: 2,
        }
    }
}

impl RegressionConfig {
    pub fn new(basis: Basis, ridge: f64) -> Result<Self> {
        let cfg = Self {
            basis,
            ridge,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis.size_param() < 1 {
            return Err(Error::validation(
                "regression.basis",
                "degree/bins/order must be at least 1",
            ));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::validation("regression.ridge", "ridge must be >= 0"));
        }
        Ok(())
    }
}

/// Standardization of one coordinate; `None` when the coordinate is constant.
#[derive(Debug, Clone, PartialEq)]
struct Scale {
    center: f64,
    spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    basis: Basis,
    state: Vec<Option<Scale>>,
    history: Vec<Option<Scale>>,
    /// Powers used per history coordinate; two-valued coordinates get one.
    history_powers: Vec<usize>,
    /// Spline knots per active state coordinate (piecewise basis only).
    knots: Vec<Vec<f64>>,
    /// Monomial exponents for the polynomial basis.
    monomials: Vec<Vec<usize>>,
    size: usize,
}

impl FeatureMap {
    /// Fits centering/scaling (and spline knots) to the cross-section.
    ///
    /// `state(p)` is the current state of path `p`, `history(p)` the
    /// concatenated earlier observations (possibly empty).
    pub fn fit<'a>(
        config: &RegressionConfig,
        n_paths: usize,
        state: impl Fn(usize) -> &'a [f64] + Sync,
        history: impl Fn(usize) -> &'a [f64] + Sync,
    ) -> Self {
        let d = state(0).len();
        let h = history(0).len();
        let scale_of = |get: &(dyn Fn(usize) -> f64 + Sync)| -> Option<Scale> {
            let (sum, sq) = chunked_moments(n_paths, get);
            let n = n_paths as f64;
            let center = sum / n;
            let var = (sq / n - center * center).max(0.0);
            let spread = var.sqrt();
            (spread > 1e-12 * center.abs().max(1.0)).then_some(Scale { center, spread })
        };
        let state_scales: Vec<Option<Scale>> =
            (0..d).map(|k| scale_of(&|p| state(p)[k])).collect();
        let history_scales: Vec<Option<Scale>> =
            (0..h).map(|k| scale_of(&|p| history(p)[k])).collect();
        let active = state_scales.iter().filter(|s| s.is_some()).count();

        let mut knots = Vec::new();
        let mut monomials = Vec::new();
        let state_size = match config.basis {
            Basis::GlobalPoly { degree } => {
                monomials = total_degree_exponents(active, degree);
                monomials.len()
            }
            Basis::Hermite { order } => 1 + active * order,
            Basis::PiecewiseLinear { bins } => {
                for (k, sc) in state_scales.iter().enumerate() {
                    if sc.is_some() {
                        let mut v: Vec<f64> = (0..n_paths).map(|p| state(p)[k]).collect();
                        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let mut kn: Vec<f64> = (0..=bins)
                            .map(|j| v[((j * (n_paths - 1)) as f64 / bins as f64).round() as usize])
                            .collect();
                        kn.dedup();
                        knots.push(kn);
                    }
                }
                // one shared constant; each coordinate contributes its hats minus one
                if knots.is_empty() {
                    1
                } else {
                    1 + knots.iter().map(|k| k.len() - 1).sum::<usize>()
                }
            }
        };
        let history_powers: Vec<usize> = history_scales
            .iter()
            .enumerate()
            .map(|(k, sc)| match sc {
                None => 0,
                Some(_) if two_valued(n_paths, |p| history(p)[k]) => config.history_degree.min(1),
                Some(_) => config.history_degree,
            })
            .collect();
        let size = state_size + history_powers.iter().sum::<usize>();
        Self {
            basis: config.basis,
            state: state_scales,
            history: history_scales,
            history_powers,
            knots,
            monomials,
            size,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Appends the non-zero entries of the basis row at `(x, hist)`.
    pub fn row(&self, x: &[f64], hist: &[f64], out: &mut Vec<(u32, f64)>) {
        out.clear();
        let mut u = [0.0; crate::forward::MAX_DIM];
        let mut m = 0;
        for (k, sc) in self.state.iter().enumerate() {
            if let Some(sc) = sc {
                u[m] = (x[k] - sc.center) / sc.spread;
                m += 1;
            }
        }
        let u = &u[..m];
        let mut col = 0u32;
        match self.basis {
            Basis::GlobalPoly { .. } => {
                for e in &self.monomials {
                    let v: f64 = e.iter().zip(u).map(|(&p, &x)| x.powi(p as i32)).product();
                    out.push((col, v));
                    col += 1;
                }
            }
            Basis::Hermite { order } => {
                out.push((col, 1.0));
                col += 1;
                let mut hs = vec![0.0; order + 1];
                for &x in u {
                    crate::quadrature::hermite_all(x, &mut hs);
                    for &v in &hs[1..] {
                        out.push((col, v));
                        col += 1;
                    }
                }
            }
            Basis::PiecewiseLinear { .. } => {
                out.push((col, 1.0));
                col += 1;
                let mut k = 0;
                for (coord, sc) in self.state.iter().enumerate() {
                    if sc.is_none() {
                        continue;
                    }
                    let kn = &self.knots[k];
                    k += 1;
                    // hats 1..len-1 on this coordinate; hat 0 is spanned by the constant
                    let x = x[coord].clamp(kn[0], kn[kn.len() - 1]);
                    let seg = kn.partition_point(|&v| v <= x).clamp(1, kn.len() - 1);
                    let (a, b) = (kn[seg - 1], kn[seg]);
                    let w = if b > a { (x - a) / (b - a) } else { 1.0 };
                    if seg >= 2 {
                        out.push((col + (seg - 2) as u32, 1.0 - w));
                    }
                    out.push((col + (seg - 1) as u32, w));
                    col += (kn.len() - 1) as u32;
                }
            }
        }
        for (k, sc) in self.history.iter().enumerate() {
            if let Some(sc) = sc {
                let v = (hist[k] - sc.center) / sc.spread;
                let mut pw = 1.0;
                for _ in 0..self.history_powers[k] {
                    pw *= v;
                    out.push((col, pw));
                    col += 1;
                }
            }
        }
        debug_assert_eq!(col as usize, self.size);
    }
}

/// True when the coordinate takes at most two distinct values, so that all
/// its powers are affine in the first.
fn two_valued(n_paths: usize, get: impl Fn(usize) -> f64) -> bool {
    let a = get(0);
    let mut b = None;
    for p in 1..n_paths {
        let v = get(p);
        if v == a {
            continue;
        }
        match b {
            None => b = Some(v),
            Some(b) if b == v => {}
            Some(_) => return false,
        }
    }
    true
}

fn total_degree_exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dim]];
    if dim == 0 {
        return out;
    }
    for total in 1..=degree {
        let mut e = vec![0; dim];
        push_compositions(total, 0, &mut e, &mut out);
    }
    out
}

fn push_compositions(rest: usize, pos: usize, e: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos == e.len() - 1 {
        e[pos] = rest;
        out.push(e.clone());
        return;
    }
    for k in (0..=rest).rev() {
        e[pos] = k;
        push_compositions(rest - k, pos + 1, e, out);
    }
    e[pos] = 0;
}

/// `(Σ v, Σ v²)` accumulated chunk by chunk in a fixed order.
fn chunked_moments(n: usize, get: &(dyn Fn(usize) -> f64 + Sync)) -> (f64, f64) {
    let parts: Vec<(f64, f64)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let (mut s, mut q) = (0.0, 0.0);
            for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let v = get(p);
                s += v;
                q += v * v;
            }
            (s, q)
        })
        .collect();
    parts
        .iter()
        .fold((0.0, 0.0), |(s, q), (a, b)| (s + a, q + b))
}

/// Sparse design matrix: one row per path.
#[derive(Debug, Clone)]
pub struct Design {
    map: FeatureMap,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Design {
    pub fn build<'a>(
        config: &RegressionConfig,
        n_paths: usize,
        state: impl Fn(usize) -> &'a [f64] + Sync,
        history: impl Fn(usize) -> &'a [f64] + Sync,
    ) -> Self {
        let map = FeatureMap::fit(config, n_paths, &state, &history);
        let rows: Vec<Vec<(u32, f64)>> = (0..n_paths)
            .into_par_iter()
            .map_init(Vec::new, |buf, p| {
                map.row(state(p), history(p), buf);
                buf.clone()
            })
            .collect();
        let mut offsets = Vec::with_capacity(n_paths + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for r in rows {
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            offsets.push(cols.len());
        }
        Self {
            map,
            offsets,
            cols,
            vals,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.map.len()
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.map
    }

    fn row(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[p], self.offsets[p + 1]);
        self.cols[a..b]
            .iter()
            .zip(&self.vals[a..b])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// Least-squares fit of each target column on the design.
    ///
    /// `targets[j][p]` is target `j` on path `p`. `knot` only labels errors.
    pub fn fit(&self, targets: &[&[f64]], ridge: f64, knot: usize) -> Result<LinearFit> {
        let proj = self.factor(ridge, knot)?;
        self.fit_with(&proj, targets)
    }

    /// Assembles and factors the (ridged) normalized Gram matrix.
    pub fn factor(&self, ridge: f64, knot: usize) -> Result<Projector> {
        let n = self.n_rows();
        let k = self.n_cols();
        let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; k * k];
                for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    for (i, vi) in self.row(p) {
                        for (j, vj) in self.row(p) {
                            if j >= i {
                                g[i * k + j] += vi * vj;
                            }
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(k, k);
        for g in &parts {
            for i in 0..k {
                for j in i..k {
                    gram[(i, j)] += g[i * k + j];
                }
            }
        }
        let nf = n as f64;
        for i in 0..k {
            for j in i..k {
                let v = gram[(i, j)] / nf;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }

        let eig = gram.clone().symmetric_eigenvalues();
        let max_eig = eig.iter().cloned().fold(0.0, f64::max);
        let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let deficit = eig.iter().filter(|&&e| e <= 1e-12 * max_eig).count();
        let shift = ridge * gram.trace() / k as f64;
        let condition = (max_eig + shift) / (min_eig.max(0.0) + shift);
        if ridge == 0.0 && (deficit > 0 || !(condition < 1e14)) {
            return Err(Error::Conditioning {
                knot,
                condition,
                deficit,
            });
        }
        let mut a = gram;
        for i in 0..k {
            a[(i, i)] += shift;
        }
        let chol = Cholesky::new(a).ok_or(Error::Conditioning {
            knot,
            condition,
            deficit,
        })?;
        Ok(Projector { chol, condition })
    }

    /// Solves for each target column with an already factored Gram matrix.
    pub fn fit_with(&self, proj: &Projector, targets: &[&[f64]]) -> Result<LinearFit> {
        let n = self.n_rows();
        let k = self.n_cols();
        let t = targets.len();
        if targets.iter().any(|c| c.len() != n) {
            return Err(Error::Argument("target length does not match design".into()));
        }
        let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut r = vec![0.0; k * t];
                for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    for (i, vi) in self.row(p) {
                        for (m, col) in targets.iter().enumerate() {
                            r[i * t + m] += vi * col[p];
                        }
                    }
                }
                r
            })
            .collect();
        let nf = n as f64;
        let mut rhs = DMatrix::<f64>::zeros(k, t);
        for r in &parts {
            for i in 0..k {
                for m in 0..t {
                    rhs[(i, m)] += r[i * t + m];
                }
            }
        }
        rhs /= nf;
        let coef = proj.chol.solve(&rhs);
        let mut fit = LinearFit {
            map: self.map.clone(),
            coef,
            chol: proj.chol.clone(),
            n_obs: n,
            residual_rms: vec![0.0; t],
            residual_var: vec![0.0; t],
            condition: proj.condition,
        };
        for (m, col) in targets.iter().enumerate() {
            let pred = self.predict(&fit, m);
            let (_, sq) = chunked_moments(n, &|p| col[p] - pred[p]);
            fit.residual_rms[m] = (sq / nf).sqrt();
            fit.residual_var[m] = sq / (n.saturating_sub(k).max(1)) as f64;
        }
        Ok(fit)
    }

    /// Fitted values of target `m` on every path of this design.
    pub fn predict(&self, fit: &LinearFit, m: usize) -> Vec<f64> {
        (0..self.n_rows())
            .into_par_iter()
            .map(|p| self.row(p).map(|(c, v)| v * fit.coef[(c, m)]).sum())
            .collect()
    }

    /// `Σ_p residual_p · basis_c(p) / (‖residual‖ ‖basis_c‖)`, maximized over columns.
    pub fn residual_orthogonality(&self, residual: &[f64]) -> f64 {
        let k = self.n_cols();
        let mut ip = vec![0.0; k];
        let mut bn = vec![0.0; k];
        for (p, r) in residual.iter().enumerate() {
            for (c, v) in self.row(p) {
                ip[c] += v * r;
                bn[c] += v * v;
            }
        }
        let rn = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        ip.iter()
            .zip(&bn)
            .map(|(i, b)| i.abs() / (rn * b.sqrt()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// A factored Gram matrix, reusable across targets on the same design.
#[derive(Debug, Clone)]
pub struct Projector {
    chol: Cholesky<f64, Dyn>,
    pub condition: f64,
}

/// Coefficients of a fitted projection plus diagnostics.
#[derive(Debug, Clone)]
pub struct LinearFit {
    map: FeatureMap,
    coef: DMatrix<f64>,
    /// Factor of the (ridged) normalized Gram matrix.
    chol: Cholesky<f64, Dyn>,
    n_obs: usize,
    pub residual_rms: Vec<f64>,
    residual_var: Vec<f64>,
    pub condition: f64,
}

impl LinearFit {
    /// Fitted regression function of target `m` at `(x, hist)`.
    pub fn eval(&self, x: &[f64], hist: &[f64], m: usize) -> f64 {
        let mut row = Vec::new();
        self.map.row(x, hist, &mut row);
        row.iter().map(|&(c, v)| v * self.coef[(c as usize, m)]).sum()
    }

    /// Standard error of [`LinearFit::eval`] under homoscedastic residuals.
    pub fn eval_se(&self, x: &[f64], hist: &[f64], m: usize) -> f64 {
        let mut row = Vec::new();
        self.map.row(x, hist, &mut row);
        let mut b = DMatrix::<f64>::zeros(self.map.len(), 1);
        for &(i, v) in &row {
            b[(i as usize, 0)] = v;
        }
        let q = b.dot(&self.chol.solve(&b));
        (self.residual_var[m] * q / self.n_obs as f64).sqrt()
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coef
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{NormalSource, Stream};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let src = NormalSource::new(seed);
        let mut b = [0.0];
        (0..n)
            .map(|p| {
                src.fill(p as u64, 0, Stream::W, &mut b);
                b[0]
            })
            .collect()
    }

    fn design(cfg: &RegressionConfig, xs: &[Vec<f64>]) -> Design {
        Design::build(cfg, xs.len(), |p| &xs[p], |_| &[])
    }

    #[test]
    fn exact_polynomial_is_recovered() {
        let x = normals(5000, 1);
        let xs: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let cfg = RegressionConfig::new(Basis::GlobalPoly { degree: 3 }, 0.0).unwrap();
        let d = design(&cfg, &xs);
        let fit = d.fit(&[&y], 0.0, 0).unwrap();
        assert!(fit.residual_rms[0] < 1e-9);
        assert!((fit.eval(&[0.7], &[], 0) - (1.0 - 1.4 + 0.5 * 0.343)).abs() < 1e-9);
    }

    #[test]
    fn residuals_are_orthogonal_to_basis() {
        let x = normals(20000, 2);
        let xs: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin() + v.abs()).collect();
        for basis in [
            Basis::GlobalPoly { degree: 3 },
            Basis::Hermite { order: 6 },
            Basis::PiecewiseLinear { bins: 16 },
        ] {
            let cfg = RegressionConfig::new(basis, 0.0).unwrap();
            let d = design(&cfg, &xs);
            let fit = d.fit(&[&y], 0.0, 0).unwrap();
            let pred = d.predict(&fit, 0);
            let res: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
            assert!(d.residual_orthogonality(&res) < 1e-8, "{:?}", basis);
        }
    }

    #[test]
    fn piecewise_linear_interpolates_linear_functions() {
        let x = normals(10000, 3);
        let xs: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let cfg = RegressionConfig::new(Basis::PiecewiseLinear { bins: 8 }, 0.0).unwrap();
        let d = design(&cfg, &xs);
        assert_eq!(d.n_cols(), 9);
        let fit = d.fit(&[&y], 0.0, 0).unwrap();
        assert!(fit.residual_rms[0] < 1e-9);
    }

    #[test]
    fn constant_state_collapses_to_intercept() {
        let xs = vec![vec![0.0]; 100];
        let cfg = RegressionConfig::default();
        let d = design(&cfg, &xs);
        assert_eq!(d.n_cols(), 1);
        let y: Vec<f64> = (0..100).map(|p| p as f64).collect();
        let fit = d.fit(&[&y], 0.0, 0).unwrap();
        assert!((fit.eval(&[0.0], &[], 0) - 49.5).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_without_ridge_is_reported() {
        // two distinct values cannot support a cubic
        let xs: Vec<Vec<f64>> = (0..100).map(|p| vec![(p % 2) as f64]).collect();
        let y = vec![1.0; 100];
        let cfg = RegressionConfig::new(Basis::GlobalPoly { degree: 3 }, 0.0).unwrap();
        let d = design(&cfg, &xs);
        assert!(matches!(d.fit(&[&y], 0.0, 7), Err(Error::Conditioning { knot: 7, .. })));
        assert!(d.fit(&[&y], 1e-8, 7).is_ok());
    }

    #[test]
    fn multi_dim_and_history_columns() {
        let a = normals(3000, 4);
        let b = normals(3000, 5);
        let xs: Vec<Vec<f64>> = a.iter().zip(&b).map(|(&x, &y)| vec![x, y]).collect();
        let hist: Vec<Vec<f64>> = a.iter().map(|&x| vec![x * 0.5 + 1.0]).collect();
        let cfg = RegressionConfig::default();
        let d = Design::build(&cfg, 3000, |p| &xs[p], |p| &hist[p]);
        // 10 monomials of degree ≤ 3 in two variables + 2 history terms
        assert_eq!(d.n_cols(), 12);
    }

    #[test]
    fn two_valued_history_takes_one_column() {
        let a = normals(2000, 6);
        let b = normals(2000, 7);
        let xs: Vec<Vec<f64>> = a.iter().map(|&x| vec![x]).collect();
        let hist: Vec<Vec<f64>> = b.iter().map(|&x| vec![x, if x >= 0.0 { 0.5 } else { 0.0 }]).collect();
        let cfg = RegressionConfig::default();
        let d = Design::build(&cfg, 2000, |p| &xs[p], |p| &hist[p]);
        // 4 state monomials + 2 powers of the first history entry + 1 for the step
        assert_eq!(d.n_cols(), 7);
        let y: Vec<f64> = hist.iter().map(|h| 3.0 * h[1]).collect();
        let fit = d.fit(&[&y], 0.0, 0).unwrap();
        let err = d.predict(&fit, 0).iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn fit_is_thread_count_invariant() {
        let x = normals(30000, 6);
        let xs: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let cfg = RegressionConfig::new(Basis::Hermite { order: 5 }, 1e-8).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let d = design(&cfg, &xs);
                    let f = d.fit(&[&y], cfg.ridge, 0).unwrap();
                    d.predict(&f, 0)
                })
        };
        let a = run(1);
        let b = run(5);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn validation() {
        assert!(RegressionConfig::new(Basis::GlobalPoly { degree: 0 }, 0.0).is_err());
        assert!(RegressionConfig::new(Basis::GlobalPoly { degree: 2 }, -1.0).is_err());
    }
}
