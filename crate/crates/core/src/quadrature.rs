//! Fixed-node quadrature rules.
//!
//! Gauss-Hermite nodes (probabilists' weight, normalized to total mass one)
//! serve smooth integrands and Hermite projections. Integrands with jumps or
//! kinks are handled by [`NormalIntegrator`], a composite Gauss-Legendre rule
//! whose panels are graded geometrically towards known singular points.

use std::f64::consts::PI;

use nalgebra::DMatrix;

/// Gauss-Hermite nodes and weights for the standard normal law.
///
/// Nodes are eigenvalues of the Jacobi matrix polished by Newton steps on
/// `h_n`; weights use the Christoffel form `w_j = 1 / Σ_{k<n} h_k(x_j)²`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut weights = vec![0.0; n];
    for (x, w) in nodes.iter_mut().zip(weights.iter_mut()) {
        for _ in 0..3 {
            let (hn, hn1, _) = scaled_hermite_pair(n, *x);
            if hn1 == 0.0 {
                break;
            }
            *x -= hn / ((n as f64).sqrt() * hn1);
        }
        let (_, _, inv_w) = scaled_hermite_pair(n, *x);
        *w = 1.0 / inv_w;
    }
    // symmetrize: the rule is exactly symmetric about zero
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Returns `(h_n(x), h_{n-1}(x), Σ_{k<n} h_k(x)²)`, with the first two
/// sharing an arbitrary common scale; the sum is unscaled and may be `inf`
/// only if the true value exceeds the float range.
fn scaled_hermite_pair(n: usize, x: f64) -> (f64, f64, f64) {
    let (mut prev, mut cur) = (0.0f64, 1.0f64);
    // sum of squares tracked as mantissa · 2^(2·exp)
    let mut sum = 0.0f64;
    let mut exp = 0i32;
    for k in 0..n {
        sum += cur * cur;
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e100 {
            let s = 2f64.powi(-332);
            prev *= s;
            cur *= s;
            sum *= s * s;
            exp += 332;
        }
    }
    (cur, prev, sum * 2f64.powi(2 * exp))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Orthonormal Hermite polynomials `h_0(x), ..., h_{out.len()-1}(x)` in `L_2(γ_1)`.
pub fn hermite_all(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = (x * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
    }
}

/// Orthonormal Hermite polynomial `h_n(x)`.
pub fn hermite(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Composite Gauss-Legendre integration against a normal density.
#[derive(Debug, Clone)]
pub struct NormalIntegrator {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Geometric grading levels towards every breakpoint.
    levels: usize,
    /// Integration range in standard deviations around the mean.
    span: f64,
}

impl Default for NormalIntegrator {
    fn default() -> Self {
        Self::new(10, 40)
    }
}

impl NormalIntegrator {
    pub fn new(points_per_panel: usize, levels: usize) -> Self {
        let (nodes, weights) = gauss_legendre(points_per_panel);
        Self {
            nodes,
            weights,
            levels,
            span: 12.0,
        }
    }

    /// The same layout with twice the points per panel.
    pub fn doubled(&self) -> Self {
        Self::new(2 * self.nodes.len(), self.levels)
    }

    /// `∫ f(z) φ((z - mean)/sd)/sd dz`, splitting at `breaks` and at the mean.
    pub fn expect(&self, f: impl Fn(f64) -> f64, mean: f64, sd: f64, breaks: &[f64]) -> f64 {
        if sd == 0.0 {
            return f(mean);
        }
        let lo = mean - self.span * sd;
        let hi = mean + self.span * sd;
        let mut cuts = vec![lo, mean, hi];
        cuts.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let g = |z: f64| f(z) * normal_pdf((z - mean) / sd) / sd;
        cuts.windows(2).map(|w| self.graded(&g, w[0], w[1])).sum()
    }

    /// Integral over `[a, b]` with panels refined geometrically towards both ends.
    pub fn graded(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mut total = 0.0;
        let mut outer = half;
        for _ in 0..self.levels {
            let inner = 0.5 * outer;
            total += self.panel(f, a + inner, a + outer);
            total += self.panel(f, b - outer, b - inner);
            outer = inner;
        }
        total += self.panel(f, a, a + outer);
        total += self.panel(f, b - outer, b);
        total
    }

    fn panel(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(c + h * x))
            .sum::<f64>()
            * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_moments() {
        let (x, w) = gauss_hermite(256);
        let m = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn small_hermite_rule_is_exact() {
        let (x, w) = gauss_hermite(3);
        // nodes ±√3, 0 with weights 1/6, 2/3, 1/6
        assert!((x[2] - 3f64.sqrt()).abs() < 1e-13);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn discrete_orthonormality() {
        let n = 64;
        let (x, w) = gauss_hermite(n);
        let mut hs = vec![vec![0.0; n]; n];
        for (j, &xj) in x.iter().enumerate() {
            hermite_all(xj, &mut hs[j]);
        }
        for a in 0..n {
            for b in 0..n {
                let ip: f64 = (0..n).map(|j| w[j] * hs[j][a] * hs[j][b]).sum();
                let exp = if a == b { 1.0 } else { 0.0 };
                assert!((ip - exp).abs() < 1e-10, "{} {} {}", a, b, ip);
            }
        }
    }

    #[test]
    fn legendre_rule() {
        let (x, w) = gauss_legendre(10);
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((int - 2.0 / 19.0).abs() < 1e-14);
    }

    #[test]
    fn graded_integration_handles_jumps_and_cusps() {
        let q = NormalIntegrator::default();
        let p = q.expect(|z| if z >= 0.3 { 1.0 } else { 0.0 }, 0.0, 1.0, &[0.3]);
        // P(Z ≥ 0.3) = 0.38208857781104744
        assert!((p - 0.382_088_577_811_047_4).abs() < 1e-13);
        // E|Z|^{1/2} = 2^{1/4} Γ(3/4)/√π
        let v = q.expect(|z| z.abs().sqrt(), 0.0, 1.0, &[0.0]);
        assert!((v - 0.822_178_958_662_697_3).abs() < 1e-12, "{}", v);
        assert_eq!(q.expect(|z| z * 2.0, 1.5, 0.0, &[]), 3.0);
    }

    #[test]
    fn hermite_values() {
        assert!((hermite(2, 1.5) - (1.5f64 * 1.5 - 1.0) / 2f64.sqrt()).abs() < 1e-15);
        let mut all = [0.0; 5];
        hermite_all(0.7, &mut all);
        assert!((all[4] - hermite(4, 0.7)).abs() < 1e-15);
    }
}
