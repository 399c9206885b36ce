//! Scenario files: TOML descriptions of an experiment grid.
//!
//! ```toml
//! name = "indicator-rates"
//! p = 2.0
//! paths = 65536
//! seeds = [1]
//! n = [4, 8, 16, 32]
//! nets = ["theta", "uniform"]
//! refine = 8
//! scheme = "explicit"
//!
//! [model]
//! kind = "brownian"
//! dim = 1
//!
//! [generator]
//! kind = "zero"
//!
//! [terminal]
//! kind = "indicator"
//! k = 0.0
//!
//! [smoothness]
//! breakpoints = [0.0, 1.0]
//! theta = [0.5]
//! theta_prime = [0.4]
//!
//! [regression]
//! basis = { kind = "piecewise_linear", bins = 64 }
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{Combine, Generator, Scheme, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, MAX_DIM};
use crate::gaussian_oracle::TerminalFunction1D;
use crate::regression::RegressionConfig;
use crate::timenets::SmoothnessSpec;

/// Smallest accepted path count.
pub const MIN_PATHS: usize = 1 << 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_p")]
    pub p: f64,
    pub paths: usize,
    pub seeds: Vec<u64>,
    pub n: Vec<usize>,
    #[serde(default = "default_nets")]
    pub nets: Vec<NetKind>,
    /// Fine grid = coarse net with every interval split into `refine` pieces.
    #[serde(default = "default_refine")]
    pub refine: usize,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub model: ModelSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    pub smoothness: SmoothnessSection,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<ProbeSection>,
}

fn default_p() -> f64 {
    2.0
}

fn default_nets() -> Vec<NetKind> {
    vec![NetKind::Theta]
}

fn default_refine() -> usize {
    8
}

fn default_scheme() -> Scheme {
    Scheme::Explicit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Theta,
    Uniform,
}

impl std::fmt::Display for NetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetKind::Theta => "theta",
            NetKind::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Brownian {
        #[serde(default = "one")]
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
    },
    Arithmetic {
        drift: Vec<f64>,
        vol: Vec<f64>,
        x0: Vec<f64>,
    },
    Geometric {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        x0: Vec<f64>,
    },
    OrnsteinUhlenbeck {
        kappa: f64,
        mean: Vec<f64>,
        sigma: Vec<f64>,
        x0: Vec<f64>,
    },
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn build(&self) -> Result<ForwardModel> {
        let m = match self {
            ModelSpec::Brownian { dim, x0 } => {
                if *dim == 0 || *dim > MAX_DIM {
                    return Err(Error::validation("model.dim", format!("must lie in 1..={}", MAX_DIM)));
                }
                let b = ForwardModel::brownian(*dim)?;
                match x0 {
                    Some(x0) => b.with_x0(x0.clone()),
                    None => Ok(b),
                }
            }
            ModelSpec::Arithmetic { drift, vol, x0 } => ForwardModel::arithmetic(drift.clone(), vol.clone(), x0.clone()),
            ModelSpec::Geometric { mu, sigma, x0 } => ForwardModel::geometric(mu.clone(), sigma.clone(), x0.clone()),
            ModelSpec::OrnsteinUhlenbeck { kappa, mean, sigma, x0 } => {
                ForwardModel::ornstein_uhlenbeck(*kappa, mean.clone(), sigma.clone(), x0.clone())
            }
        };
        m.map_err(|e| within("model", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    #[default]
    Zero,
    /// `f = a_y·y + b_z·z + c`.
    Linear { a_y: f64, b_z: Vec<f64>, c: f64 },
}

impl GeneratorSpec {
    pub fn build(&self, dim: usize) -> Result<Generator> {
        match self {
            GeneratorSpec::Zero => Ok(Generator::zero()),
            GeneratorSpec::Linear { a_y, b_z, c } => {
                if b_z.len() != dim {
                    return Err(Error::validation(
                        "generator.b_z",
                        format!("expected {} entries, got {}", dim, b_z.len()),
                    ));
                }
                Generator::linear(*a_y, b_z.clone(), *c)
            }
        }
    }
}

/// One-dimensional building blocks of terminal conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    Linear,
    Hermite { n: usize },
    Indicator {
        #[serde(default)]
        k: f64,
    },
    Power { alpha: f64 },
}

impl FunctionSpec {
    pub fn build(&self) -> Result<TerminalFunction1D> {
        Ok(match self {
            FunctionSpec::Linear => TerminalFunction1D::linear(),
            FunctionSpec::Hermite { n } => TerminalFunction1D::hermite(*n),
            FunctionSpec::Indicator { k } => TerminalFunction1D::indicator(*k),
            FunctionSpec::Power { alpha } => TerminalFunction1D::power(*alpha)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Linear,
    Hermite { n: usize },
    Indicator {
        #[serde(default)]
        k: f64,
    },
    Power { alpha: f64 },
    /// `Φ(g_1(X_{r_1}), …, g_L(X_{r_L}))` with one part per breakpoint.
    LipschitzComposite { parts: Vec<FunctionSpec>, combine: Combine },
}

impl TerminalSpec {
    pub fn build(&self, spec: &SmoothnessSpec, p: f64) -> Result<TerminalCondition> {
        let single = |f: FunctionSpec| -> Result<TerminalCondition> {
            let g = f.build()?;
            g.validate_for_p(p)?;
            Ok(TerminalCondition::at_horizon(g, spec.horizon()))
        };
        let t = match self {
            TerminalSpec::Linear => single(FunctionSpec::Linear),
            TerminalSpec::Hermite { n } => single(FunctionSpec::Hermite { n: *n }),
            TerminalSpec::Indicator { k } => single(FunctionSpec::Indicator { k: *k }),
            TerminalSpec::Power { alpha } => single(FunctionSpec::Power { alpha: *alpha }),
            TerminalSpec::LipschitzComposite { parts, combine } => {
                let times = spec.breakpoints()[1..].to_vec();
                if parts.len() != times.len() {
                    return Err(Error::validation(
                        "parts",
                        format!("expected one part per breakpoint ({}), got {}", times.len(), parts.len()),
                    ));
                }
                let gs = parts.iter().map(|f| f.build()).collect::<Result<Vec<_>>>()?;
                for g in &gs {
                    g.validate_for_p(p)?;
                }
                TerminalCondition::composite(times, gs, combine.clone())
            }
        };
        t.map_err(|e| within("terminal", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKeyword {
    Estimate,
}

/// Declared exponents, or the keyword `"estimate"` for a pilot measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaDecl {
    Declared(Vec<f64>),
    Estimate(EstimateKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessSection {
    pub breakpoints: Vec<f64>,
    pub theta: ThetaDecl,
    /// Exponents used to build theta nets instead of `theta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_prime: Option<Vec<f64>>,
}

/// Exponent probes on a theta net with a geometric window inserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Window `r_l − (r_l − r_{l−1})·2^{−j}` for `j` in this inclusive range.
    #[serde(default = "default_window")]
    pub window: [i32; 2],
    /// Net size of the probe grid before the window is inserted.
    #[serde(default = "default_probe_n")]
    pub n: usize,
}

fn default_window() -> [i32; 2] {
    [2, 8]
}

fn default_probe_n() -> usize {
    64
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            window: default_window(),
            n: default_probe_n(),
        }
    }
}

/// Prefixes a validation field with its section name.
fn within(section: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, message } if !field.starts_with(section) => {
            Error::validation(format!("{}.{}", section, field), message)
        }
        other => other,
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::validation("name", "must not be empty"));
        }
        if !(self.p >= 2.0) || !self.p.is_finite() {
            return Err(Error::validation("p", format!("must be a finite number >= 2, got {}", self.p)));
        }
        if self.paths < MIN_PATHS {
            return Err(Error::validation("paths", format!("must be at least {}, got {}", MIN_PATHS, self.paths)));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "need at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::validation("seeds", "seeds must be distinct"));
        }
        if self.n.is_empty() || self.n[0] == 0 || self.n.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("n", "must be a non-empty, strictly increasing list of positive sizes"));
        }
        if self.nets.is_empty() {
            return Err(Error::validation("nets", "need at least one net kind"));
        }
        let mut nets = self.nets.clone();
        nets.sort();
        nets.dedup();
        if nets.len() != self.nets.len() {
            return Err(Error::validation("nets", "net kinds must be distinct"));
        }
        if self.refine == 0 {
            return Err(Error::validation("refine", "must be at least 1"));
        }
        let model = self.model.build()?;
        self.generator.build(model.dim())?;
        let spec = self.declared_or_uniform()?;
        if let Some(tp) = &self.smoothness.theta_prime {
            spec.with_theta(tp.clone())
                .map_err(|e| rename(e, "smoothness.theta_prime"))?;
        }
        self.terminal.build(&spec, self.p)?;
        self.regression.validate()?;
        if let Some(pr) = &self.probes {
            if pr.window[0] < 1 || pr.window[1] < pr.window[0] + 3 {
                return Err(Error::validation("probes.window", "need 1 <= j_min and at least four window points"));
            }
            if pr.n == 0 {
                return Err(Error::validation("probes.n", "must be positive"));
            }
        }
        Ok(())
    }

    fn declared_or_uniform(&self) -> Result<SmoothnessSpec> {
        let bps = self.smoothness.breakpoints.clone();
        match &self.smoothness.theta {
            ThetaDecl::Declared(theta) => SmoothnessSpec::new(bps, theta.clone()),
            ThetaDecl::Estimate(_) => SmoothnessSpec::uniform(bps),
        }
        .map_err(|e| within("smoothness", e))
    }

    /// Declared smoothness, or `None` when it is to be estimated.
    pub fn declared_spec(&self) -> Result<Option<SmoothnessSpec>> {
        match self.smoothness.theta {
            ThetaDecl::Declared(_) => self.declared_or_uniform().map(Some),
            ThetaDecl::Estimate(_) => Ok(None),
        }
    }

    /// Smoothness with breakpoints only; exponents all 1.
    pub fn uniform_spec(&self) -> Result<SmoothnessSpec> {
        SmoothnessSpec::uniform(self.smoothness.breakpoints.clone()).map_err(|e| within("smoothness", e))
    }

    /// Exponents used to build theta nets given the scenario's smoothness.
    pub fn net_spec(&self, spec: &SmoothnessSpec) -> Result<SmoothnessSpec> {
        match &self.smoothness.theta_prime {
            Some(tp) => spec.with_theta(tp.clone()),
            None => Ok(spec.clone()),
        }
    }
}

fn rename(e: Error, field: &str) -> Error {
    match e {
        Error::Validation { message, .. } => Error::validation(field, message),
        other => other,
    }
}
