//! Deterministic time-nets on `[0, r_L]`.
//!
//! A [`SmoothnessSpec`] fixes the observation breakpoints `0 = r_0 < ... < r_L`
//! and one exponent `θ_l ∈ (0, 1]` per breakpoint interval. The θ-adapted net
//! places `n` knots in each `(r_{l-1}, r_l]`, clustering them to the left of
//! `r_l` with power `1/θ_l`:
//!
//! ```text
//! t_k = r_{l-1} + (r_l - r_{l-1}) * (1 - (1 - (k - (l-1)n)/n)^(1/θ_l)),   (l-1)n < k <= ln
//! ```
//!
//! Small `θ_l` produces extreme clustering; for `θ_l` close to zero the last
//! knots of an interval can collapse onto `r_l` in floating point, which is
//! reported as a validation error rather than merged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Breakpoints `r_0 = 0 < r_1 < ... < r_L` and exponents `θ_1, ..., θ_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSpec {
    breakpoints: Vec<f64>,
    theta: Vec<f64>,
}

impl SmoothnessSpec {
    pub fn new(breakpoints: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::validation(
                "breakpoints",
                "need at least r_0 = 0 and one further breakpoint",
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::validation("breakpoints", "r_0 must equal 0"));
        }
        if breakpoints.iter().any(|r| !r.is_finite()) {
            return Err(Error::validation("breakpoints", "breakpoints must be finite"));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "breakpoints",
                "breakpoints must be strictly increasing",
            ));
        }
        if theta.len() != breakpoints.len() - 1 {
            return Err(Error::validation(
                "theta",
                format!(
                    "expected {} exponents for {} breakpoint intervals, got {}",
                    breakpoints.len() - 1,
                    breakpoints.len() - 1,
                    theta.len()
                ),
            ));
        }
        if let Some((l, th)) = theta
            .iter()
            .enumerate()
            .find(|(_, &th)| !(th > 0.0 && th <= 1.0))
        {
            return Err(Error::validation(
                "theta",
                format!("theta[{}] = {} is outside (0, 1]", l, th),
            ));
        }
        Ok(Self { breakpoints, theta })
    }

    /// Smooth spec (`θ_l = 1` everywhere) over the given breakpoints.
    pub fn uniform(breakpoints: Vec<f64>) -> Result<Self> {
        let l = breakpoints.len().saturating_sub(1);
        Self::new(breakpoints, vec![1.0; l])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Number of breakpoint intervals `L`.
    pub fn intervals(&self) -> usize {
        self.theta.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// Same breakpoints with a replacement exponent vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.breakpoints.clone(), theta)
    }

    /// Index `l` (1-based) of the breakpoint interval `[r_{l-1}, r_l)` holding `t`.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if !(t >= 0.0 && t < self.horizon()) {
            return None;
        }
        let pos = self.breakpoints.partition_point(|&r| r <= t);
        Some(pos)
    }
}

/// Strictly increasing knots `0 = t_0 < ... < t_N = r_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeNet {
    #[serde(with = "decimal_strings")]
    knots: Vec<f64>,
    breakpoint_indices: Vec<usize>,
}

impl TimeNet {
    /// Builds a net from raw knots, marking each of `breakpoints[1..]` as a knot.
    ///
    /// Breakpoints must be present among the knots (within the knot tolerance).
    pub fn from_knots(knots: Vec<f64>, breakpoints: &[f64]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::validation("knots", "a net needs at least two knots"));
        }
        if knots[0] != 0.0 {
            return Err(Error::validation("knots", "first knot must be 0"));
        }
        if knots.iter().any(|t| !t.is_finite()) {
            return Err(Error::validation("knots", "knots must be finite"));
        }
        let horizon = *knots.last().unwrap();
        let tol = knot_tolerance(horizon);
        for (i, w) in knots.windows(2).enumerate() {
            if w[1] - w[0] <= tol {
                return Err(Error::validation(
                    "knots",
                    format!(
                        "knots {} and {} coincide or decrease ({} vs {})",
                        i,
                        i + 1,
                        w[0],
                        w[1]
                    ),
                ));
            }
        }
        let mut breakpoint_indices = Vec::with_capacity(breakpoints.len().saturating_sub(1));
        for &r in breakpoints.iter().skip(1) {
            let idx = find_knot(&knots, r, tol).ok_or_else(|| {
                Error::validation("knots", format!("breakpoint {} is not a knot", r))
            })?;
            breakpoint_indices.push(idx);
        }
        if breakpoints.len() > 1 && *breakpoint_indices.last().unwrap() != knots.len() - 1 {
            return Err(Error::validation(
                "knots",
                "last knot must equal the final breakpoint",
            ));
        }
        Ok(Self {
            knots,
            breakpoint_indices,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn breakpoint_indices(&self) -> &[usize] {
        &self.breakpoint_indices
    }

    /// Breakpoint times `r_1, ..., r_L` as stored in the knots.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.breakpoint_indices.iter().map(|&i| self.knots[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn intervals(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Length of interval `i`, i.e. `t_{i+1} - t_i`.
    pub fn step(&self, i: usize) -> f64 {
        self.knots[i + 1] - self.knots[i]
    }

    pub fn max_step(&self) -> f64 {
        (0..self.intervals()).map(|i| self.step(i)).fold(0.0, f64::max)
    }

    /// Index of the knot equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        find_knot(&self.knots, t, knot_tolerance(self.horizon()))
    }

    /// If `self` refines `coarse`, returns the fine index of every coarse knot.
    pub fn embedding_of(&self, coarse: &TimeNet) -> Option<Vec<usize>> {
        let tol = knot_tolerance(self.horizon());
        if (coarse.horizon() - self.horizon()).abs() > tol {
            return None;
        }
        coarse
            .knots
            .iter()
            .map(|&t| find_knot(&self.knots, t, tol))
            .collect()
    }

    /// A copy of this net with extra knots inserted (existing knots within
    /// tolerance are reused).
    pub fn with_inserted(&self, extra: &[f64]) -> Result<Self> {
        let tol = knot_tolerance(self.horizon());
        let mut knots = self.knots.clone();
        for &t in extra {
            if !(0.0..=self.horizon()).contains(&t) {
                return Err(Error::Domain(format!(
                    "cannot insert knot {} outside [0, {}]",
                    t,
                    self.horizon()
                )));
            }
            if find_knot(&knots, t, tol).is_none() {
                let pos = knots.partition_point(|&k| k < t);
                knots.insert(pos, t);
            }
        }
        let breakpoints: Vec<f64> = std::iter::once(0.0).chain(self.breakpoints()).collect();
        Self::from_knots(knots, &breakpoints)
    }

    /// JSON array of shortest round-trip decimal strings.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&decimal_strings::encode(&self.knots)).expect("strings serialize")
    }
}

fn knot_tolerance(horizon: f64) -> f64 {
    1e-12 * horizon.abs()
}

fn find_knot(knots: &[f64], t: f64, tol: f64) -> Option<usize> {
    let pos = knots.partition_point(|&k| k < t - tol);
    (pos < knots.len() && (knots[pos] - t).abs() <= tol).then_some(pos)
}

/// Builds the θ-adapted net `τ^{n,Θ}` with `L n + 1` knots.
pub fn build_theta_net(spec: &SmoothnessSpec, n: usize) -> Result<TimeNet> {
    if n == 0 {
        return Err(Error::Argument("net size n must be at least 1".into()));
    }
    let r = spec.breakpoints();
    let mut knots = Vec::with_capacity(spec.intervals() * n + 1);
    knots.push(0.0);
    for (l, &theta) in spec.theta().iter().enumerate() {
        let (a, b) = (r[l], r[l + 1]);
        for j in 1..=n {
            knots.push(theta_knot(a, b, theta, j, n));
        }
    }
    TimeNet::from_knots(knots, r)
}

/// Knot `j` of `n` inside `[a, b]` for exponent `theta`; `j = n` returns `b` exactly.
pub fn theta_knot(a: f64, b: f64, theta: f64, j: usize, n: usize) -> f64 {
    if j == n {
        return b;
    }
    if j == 0 {
        return a;
    }
    let u = 1.0 - j as f64 / n as f64;
    a + (b - a) * (1.0 - u.powf(1.0 / theta))
}

/// `n` equal steps inside every breakpoint interval.
pub fn build_uniform_net(spec: &SmoothnessSpec, n: usize) -> Result<TimeNet> {
    if n == 0 {
        return Err(Error::Argument("net size n must be at least 1".into()));
    }
    let r = spec.breakpoints();
    let mut knots = Vec::with_capacity(spec.intervals() * n + 1);
    knots.push(0.0);
    for w in r.windows(2) {
        for j in 1..=n {
            knots.push(uniform_knot(w[0], w[1], j, n));
        }
    }
    TimeNet::from_knots(knots, r)
}

// Shares its arithmetic with `theta_knot` at θ = 1 so both nets agree bitwise.
fn uniform_knot(a: f64, b: f64, j: usize, n: usize) -> f64 {
    theta_knot(a, b, 1.0, j, n)
}

/// Singularity weight `φ(t) = (r_l - t)^{(θ_l - 1)/2}` for `t ∈ [r_{l-1}, r_l)`.
pub fn phi(t: f64, spec: &SmoothnessSpec) -> Result<f64> {
    let l = spec.interval_of(t).ok_or_else(|| {
        Error::Domain(format!("phi is defined on [0, {}), got t = {}", spec.horizon(), t))
    })?;
    let r = spec.breakpoints()[l];
    let theta = spec.theta()[l - 1];
    Ok((r - t).powf((theta - 1.0) / 2.0))
}

/// Splits every interval of `net` into `factor` equal parts.
pub fn refine_net(net: &TimeNet, factor: usize) -> Result<TimeNet> {
    if factor == 0 {
        return Err(Error::Argument("refinement factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(net.clone());
    }
    let mut knots = Vec::with_capacity(net.intervals() * factor + 1);
    knots.push(net.knots[0]);
    for w in net.knots.windows(2) {
        for j in 1..factor {
            knots.push(w[0] + (w[1] - w[0]) * (j as f64 / factor as f64));
        }
        knots.push(w[1]);
    }
    let breakpoints: Vec<f64> = std::iter::once(0.0).chain(net.breakpoints()).collect();
    TimeNet::from_knots(knots, &breakpoints)
}

pub(crate) mod decimal_strings {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(values: &[f64]) -> Vec<String> {
        values.iter().map(|v| v.to_string()).collect()
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(encode(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        raw.iter()
            .map(|s| s.parse::<f64>().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(r: &[f64], th: &[f64]) -> SmoothnessSpec {
        SmoothnessSpec::new(r.to_vec(), th.to_vec()).unwrap()
    }

    fn assert_knots(net: &TimeNet, expected: &[f64]) {
        assert_eq!(net.len(), expected.len());
        for (a, b) in net.knots().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", net.knots(), expected);
        }
    }

    #[test]
    fn theta_net_examples() {
        assert_knots(
            &build_theta_net(&spec(&[0.0, 1.0], &[1.0]), 4).unwrap(),
            &[0.0, 0.25, 0.5, 0.75, 1.0],
        );
        assert_knots(
            &build_theta_net(&spec(&[0.0, 1.0], &[0.5]), 2).unwrap(),
            &[0.0, 0.75, 1.0],
        );
        let net = build_theta_net(&spec(&[0.0, 1.0, 2.0], &[1.0, 0.5]), 2).unwrap();
        assert_knots(&net, &[0.0, 0.5, 1.0, 1.75, 2.0]);
        assert_eq!(net.breakpoint_indices(), &[2, 4]);
    }

    #[test]
    fn uniform_net_examples() {
        assert_knots(
            &build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0]).unwrap(), 2).unwrap(),
            &[0.0, 0.5, 1.0],
        );
        assert_knots(
            &build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 2.0]).unwrap(), 4).unwrap(),
            &[0.0, 0.5, 1.0, 1.5, 2.0],
        );
        assert_knots(
            &build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0, 3.0]).unwrap(), 2)
                .unwrap(),
            &[0.0, 0.5, 1.0, 2.0, 3.0],
        );
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.5, &spec(&[0.0, 1.0], &[1.0])).unwrap(), 1.0);
        let s = spec(&[0.0, 1.0], &[0.5]);
        assert!((phi(0.75, &s).unwrap() - 1.41421356).abs() < 1e-8);
        assert!((phi(0.99, &s).unwrap() - 3.16227766).abs() < 1e-8);
        assert!(matches!(phi(1.0, &s), Err(Error::Domain(_))));
        assert!(matches!(phi(-0.1, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn phi_uses_interval_of_t() {
        let s = spec(&[0.0, 1.0, 2.0], &[1.0, 0.5]);
        assert_eq!(phi(0.9, &s).unwrap(), 1.0);
        // t = r_1 belongs to the second interval
        assert!((phi(1.0, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((phi(1.75, &s).unwrap() - 0.25f64.powf(-0.25)).abs() < 1e-12);
    }

    #[test]
    fn refine_examples() {
        let base = TimeNet::from_knots(vec![0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_knots(&refine_net(&base, 2).unwrap(), &[0.0, 0.5, 1.0]);
        let net = TimeNet::from_knots(vec![0.0, 0.5, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(refine_net(&net, 1).unwrap(), net);
        let skewed = TimeNet::from_knots(vec![0.0, 0.75, 1.0], &[0.0, 1.0]).unwrap();
        assert_knots(
            &refine_net(&skewed, 2).unwrap(),
            &[0.0, 0.375, 0.75, 0.875, 1.0],
        );
        assert!(matches!(refine_net(&net, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SmoothnessSpec::new(vec![0.0, 1.0], vec![1.5]).is_err());
        assert!(SmoothnessSpec::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(SmoothnessSpec::new(vec![0.1, 1.0], vec![0.5]).is_err());
        assert!(SmoothnessSpec::new(vec![0.0, 1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(SmoothnessSpec::new(vec![0.0, 1.0], vec![0.5, 0.5]).is_err());
        let err = SmoothnessSpec::new(vec![0.0, 1.0], vec![1.5]).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert!(matches!(
            build_theta_net(&spec(&[0.0, 1.0], &[0.5]), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn degenerate_clustering_is_rejected() {
        // θ so small that the last knots collapse onto r_1 in floating point
        let s = spec(&[0.0, 1.0], &[1e-3]);
        let err = build_theta_net(&s, 64).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn knot_value_depends_only_on_fraction() {
        let s = spec(&[0.0, 1.0], &[0.3]);
        let a = build_theta_net(&s, 4).unwrap();
        let b = build_theta_net(&s, 8).unwrap();
        assert!((a.knots()[2] - b.knots()[4]).abs() < 1e-15);
    }

    #[test]
    fn phi_squared_integrates_to_closed_form() {
        let s = spec(&[0.0, 1.0, 2.5], &[0.4, 0.7]);
        let r = s.breakpoints();
        for l in 0..2 {
            let (a, b, th) = (r[l], r[l + 1], s.theta()[l]);
            // substitute u = (b - t)^θ to remove the endpoint singularity
            let m = 10_000;
            let umax = (b - a).powf(th);
            let mut total = 0.0;
            for k in 0..m {
                let u = umax * (k as f64 + 0.5) / m as f64;
                let t = b - u.powf(1.0 / th);
                let dt_du = u.powf(1.0 / th - 1.0) / th;
                total += phi(t, &s).unwrap().powi(2) * dt_du * umax / m as f64;
            }
            let exact = (b - a).powf(th) / th;
            assert!(((total - exact) / exact).abs() < 1e-3, "{} vs {}", total, exact);
        }
    }

    #[test]
    fn json_is_lossless() {
        let net = build_theta_net(&spec(&[0.0, 1.0], &[0.37]), 7).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: TimeNet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
        let arr: Vec<String> = serde_json::from_str(&net.to_json()).unwrap();
        assert_eq!(arr.len(), 8);
        assert_eq!(arr[0], "0");
        assert_eq!(arr[7], "1");
    }

    #[test]
    fn embedding_and_insertion() {
        let coarse = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0]).unwrap(), 4)
            .unwrap();
        let fine = refine_net(&coarse, 3).unwrap();
        assert_eq!(fine.embedding_of(&coarse).unwrap(), vec![0, 3, 6, 9, 12]);
        assert!(coarse.embedding_of(&fine).is_none());
        let ins = coarse.with_inserted(&[0.3, 0.5]).unwrap();
        assert_knots(&ins, &[0.0, 0.25, 0.3, 0.5, 0.75, 1.0]);
        assert!(coarse.with_inserted(&[1.2]).is_err());
    }
}
