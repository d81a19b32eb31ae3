//! Generative models: the Gaussian toy model, the blowfly population model and
//! Lotka-Volterra predator-prey dynamics.
//!
//! Every simulator returns a [`SplitBag`]. For the toy model `z` and `x` are the
//! model's own variables; for the dynamical models `z` is time and `x` the state.
//! Simulators are pure functions of `(theta, seed)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::abc::GenerativeModel;
use crate::embeddings::{SampleBag, SplitBag};
use crate::seed::{self, Rng};
use crate::{Error, Result};

/// Populations above this are treated as divergent.
pub const MAX_POPULATION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Toy,
    Blowfly,
    Lv,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Toy => "toy",
            ModelId::Blowfly => "blowfly",
            ModelId::Lv => "lv",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(ModelId::Toy),
            "blowfly" => Ok(ModelId::Blowfly),
            "lv" | "lotka-volterra" => Ok(ModelId::Lv),
            other => Err(Error::invalid("model", format!("unknown model id `{other}`"))),
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

fn non_negative(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be non-negative, got {v}")))
    }
}

fn check_theta(theta: &[f64], d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
    }
    Ok(())
}

/// Log-normal distribution given by its median and the standard deviation of
/// the log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormal {
    pub median: f64,
    pub log_sd: f64,
}

impl LogNormal {
    pub const fn new(median: f64, log_sd: f64) -> Self {
        Self { median, log_sd }
    }

    pub fn validate(&self, name: &'static str) -> Result<()> {
        positive(name, self.median)?;
        non_negative(name, self.log_sd)
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.median * (self.log_sd * z).exp()
    }
}

// ---------------------------------------------------------------------------
// Toy model

/// `theta ~ N(2, 1)`, `z ~ N(0, 2)`, `x | z, theta ~ N(theta z^2, 1)`.
/// Second arguments are variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModel {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub z_var: f64,
    pub noise_var: f64,
    /// Points per dataset.
    pub n: usize,
}

impl Default for ToyModel {
    fn default() -> Self {
        Self { prior_mean: 2.0, prior_var: 1.0, z_var: 2.0, noise_var: 1.0, n: 200 }
    }
}

impl ToyModel {
    pub fn with_n(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        positive("prior_var", self.prior_var)?;
        positive("z_var", self.z_var)?;
        positive("noise_var", self.noise_var)?;
        if !self.prior_mean.is_finite() {
            return Err(Error::invalid("prior_mean", "must be finite"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        Ok(())
    }

    pub fn simulate_theta(&self, theta: f64, seed: u64) -> Result<SplitBag> {
        self.validate()?;
        if !theta.is_finite() {
            return Err(Error::invalid("theta", "must be finite"));
        }
        let mut rng = seed::rng(seed);
        let zd = Normal::new(0.0, self.z_var.sqrt()).map_err(|e| Error::invalid("z_var", e.to_string()))?;
        let sd = self.noise_var.sqrt();
        let mut z = Vec::with_capacity(self.n);
        let mut x = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let zi: f64 = zd.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            z.push(zi);
            x.push(theta * zi * zi + sd * e);
        }
        SplitBag::new(SampleBag::from_scalars(&z)?, SampleBag::from_scalars(&x)?)
    }
}

/// One toy dataset of `n` pairs with default variances.
pub fn simulate_toy(theta: f64, n: usize, seed: u64) -> Result<SplitBag> {
    if n < 1 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    ToyModel::with_n(n).simulate_theta(theta, seed)
}

impl GenerativeModel for ToyModel {
    fn param_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        let z: f64 = StandardNormal.sample(rng);
        vec![self.prior_mean + self.prior_var.sqrt() * z]
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> Result<SplitBag> {
        check_theta(theta, 1)?;
        self.simulate_theta(theta[0], seed)
    }
}

// ---------------------------------------------------------------------------
// Blowfly

/// Parameters of one blowfly trajectory.
///
/// A noise scale of exactly 0 means the deterministic limit where the noise
/// factor is 1. `P = 0` is allowed and gives pure decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowflyParams {
    pub p: f64,
    pub n0: f64,
    pub sigma_d: f64,
    pub sigma_p: f64,
    pub tau: usize,
    pub delta: f64,
    /// Steps simulated after the initial history, burn-in included.
    pub horizon: usize,
    pub burn_in: usize,
    /// Value of the constant initial history.
    pub initial: f64,
}

impl BlowflyParams {
    /// From `theta = [P, N0, sigma_d, sigma_p, tau, delta]`. The initial history
    /// defaults to `N0`.
    pub fn from_theta(theta: &[f64], n: usize, burn_in: usize, initial: Option<f64>) -> Result<Self> {
        check_theta(theta, 6)?;
        let tau = theta[4];
        if !(tau.is_finite() && tau >= 1.0 && tau.fract() == 0.0) {
            return Err(Error::invalid("tau", format!("must be an integer >= 1, got {tau}")));
        }
        let p = Self {
            p: theta[0],
            n0: theta[1],
            sigma_d: theta[2],
            sigma_p: theta[3],
            tau: tau as usize,
            delta: theta[5],
            horizon: burn_in + n,
            burn_in,
            initial: initial.unwrap_or(theta[1]),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("P", self.p)?;
        positive("N0", self.n0)?;
        non_negative("sigma_d", self.sigma_d)?;
        non_negative("sigma_p", self.sigma_p)?;
        positive("delta", self.delta)?;
        non_negative("initial", self.initial)?;
        if self.tau < 1 {
            return Err(Error::invalid("tau", "must be at least 1"));
        }
        if self.horizon <= self.burn_in {
            return Err(Error::invalid("horizon", "must exceed the burn-in"));
        }
        Ok(())
    }
}

/// `Gam(1/s^2, s^2)` noise with mean 1, or the constant 1 when `s = 0`.
enum UnitGamma {
    One,
    Gamma(Gamma<f64>),
}

impl UnitGamma {
    fn new(name: &'static str, s: f64) -> Result<Self> {
        if s == 0.0 {
            return Ok(UnitGamma::One);
        }
        let v = s * s;
        Gamma::new(1.0 / v, v)
            .map(UnitGamma::Gamma)
            .map_err(|e| Error::invalid(name, e.to_string()))
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            UnitGamma::One => 1.0,
            UnitGamma::Gamma(g) => g.sample(rng),
        }
    }
}

/// Raw blowfly series after burn-in.
pub fn blowfly_series(p: &BlowflyParams, seed: u64) -> Result<Vec<f64>> {
    p.validate()?;
    let mut rng = seed::rng(seed);
    let e_dist = UnitGamma::new("sigma_p", p.sigma_p)?;
    let d_dist = UnitGamma::new("sigma_d", p.sigma_d)?;
    let mut series = vec![p.initial; p.tau + 1];
    series.reserve(p.horizon);
    for _ in 0..p.horizon {
        let t = series.len() - 1;
        let lagged = series[t - p.tau];
        let e = e_dist.sample(&mut rng);
        let eps = d_dist.sample(&mut rng);
        let next = p.p * lagged * (-lagged / p.n0).exp() * e + series[t] * (-p.delta * eps).exp();
        if !next.is_finite() || next > MAX_POPULATION {
            return Err(Error::Divergence(format!(
                "blowfly population reached {next:e} at step {}; parameters are divergent",
                t + 1 - p.tau
            )));
        }
        if next < 0.0 {
            return Err(Error::Divergence(format!("blowfly population went negative ({next})")));
        }
        series.push(next);
    }
    Ok(series.split_off(p.tau + 1 + p.burn_in))
}

/// Blowfly trajectory as `(normalized time, population)` pairs.
pub fn simulate_blowfly(p: &BlowflyParams, seed: u64) -> Result<SplitBag> {
    let series = blowfly_series(p, seed)?;
    let n = series.len();
    let z: Vec<f64> = (0..n)
        .map(|i| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 })
        .collect();
    SplitBag::new(SampleBag::from_scalars(&z)?, SampleBag::from_scalars(&series)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlowflyPrior {
    pub p: LogNormal,
    pub n0: LogNormal,
    pub sigma_d: LogNormal,
    pub sigma_p: LogNormal,
    pub delta: LogNormal,
    pub tau_min: u32,
    pub tau_max: u32,
}

impl Default for BlowflyPrior {
    fn default() -> Self {
        Self {
            p: LogNormal::new(7.4, 0.5),
            n0: LogNormal::new(400.0, 0.5),
            sigma_d: LogNormal::new(0.47, 0.5),
            sigma_p: LogNormal::new(0.61, 0.5),
            delta: LogNormal::new(0.165, 0.4),
            tau_min: 1,
            tau_max: 20,
        }
    }
}

impl BlowflyPrior {
    pub fn validate(&self) -> Result<()> {
        self.p.validate("prior.p")?;
        self.n0.validate("prior.n0")?;
        self.sigma_d.validate("prior.sigma_d")?;
        self.sigma_p.validate("prior.sigma_p")?;
        self.delta.validate("prior.delta")?;
        if self.tau_min < 1 || self.tau_max < self.tau_min {
            return Err(Error::invalid("prior.tau", "need 1 <= tau_min <= tau_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlowflyModel {
    pub prior: BlowflyPrior,
    pub burn_in: usize,
    /// Initial history value; `None` starts at `N0`.
    pub initial: Option<f64>,
    pub n: usize,
}

impl Default for BlowflyModel {
    fn default() -> Self {
        Self { prior: BlowflyPrior::default(), burn_in: 50, initial: None, n: 200 }
    }
}

impl BlowflyModel {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        Ok(())
    }

    /// Default parameter value: prior medians with `tau = 14`.
    pub fn default_theta() -> Vec<f64> {
        let pr = BlowflyPrior::default();
        vec![pr.p.median, pr.n0.median, pr.sigma_d.median, pr.sigma_p.median, 14.0, pr.delta.median]
    }
}

impl GenerativeModel for BlowflyModel {
    fn param_dim(&self) -> usize {
        6
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        let pr = &self.prior;
        let p = pr.p.sample(rng);
        let n0 = pr.n0.sample(rng);
        let sd = pr.sigma_d.sample(rng);
        let sp = pr.sigma_p.sample(rng);
        let tau = rng.random_range(pr.tau_min..=pr.tau_max) as f64;
        let delta = pr.delta.sample(rng);
        vec![p, n0, sd, sp, tau, delta]
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> Result<SplitBag> {
        let p = BlowflyParams::from_theta(theta, self.n, self.burn_in, self.initial)?;
        simulate_blowfly(&p, seed)
    }
}

// ---------------------------------------------------------------------------
// Lotka-Volterra

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub x0: f64,
    pub y0: f64,
    /// RK4 step.
    pub h: f64,
    pub horizon: f64,
    /// Record every `stride` steps.
    pub stride: usize,
    /// Log-sd of multiplicative observation noise; 0 disables it.
    pub obs_noise: f64,
}

impl LvParams {
    pub fn validate(&self) -> Result<()> {
        non_negative("alpha", self.alpha)?;
        non_negative("beta", self.beta)?;
        non_negative("gamma", self.gamma)?;
        non_negative("delta", self.delta)?;
        positive("x0", self.x0)?;
        positive("y0", self.y0)?;
        positive("h", self.h)?;
        positive("horizon", self.horizon)?;
        non_negative("obs_noise", self.obs_noise)?;
        if self.stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.h).round() as usize
    }
}

fn lv_rates(p: &LvParams, s: [f64; 2]) -> [f64; 2] {
    let [x, y] = s;
    [p.alpha * x - p.beta * x * y, p.gamma * x * y - p.delta * y]
}

fn rk4_step(p: &LvParams, s: [f64; 2], h: f64) -> [f64; 2] {
    let add = |a: [f64; 2], k: [f64; 2], c: f64| [a[0] + c * k[0], a[1] + c * k[1]];
    let k1 = lv_rates(p, s);
    let k2 = lv_rates(p, add(s, k1, h / 2.0));
    let k3 = lv_rates(p, add(s, k2, h / 2.0));
    let k4 = lv_rates(p, add(s, k3, h));
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Noise-free RK4 trajectory `(t, prey, predator)` at every recorded step,
/// starting with `t = 0`.
pub fn lv_trajectory(p: &LvParams) -> Result<Vec<(f64, [f64; 2])>> {
    p.validate()?;
    let steps = p.steps();
    if steps == 0 {
        return Err(Error::invalid("horizon", "shorter than one step"));
    }
    let mut s = [p.x0, p.y0];
    let mut out = Vec::with_capacity(steps / p.stride + 1);
    out.push((0.0, s));
    for k in 1..=steps {
        s = rk4_step(p, s, p.h);
        if !(s[0].is_finite() && s[1].is_finite()) {
            return Err(Error::Divergence(format!("Lotka-Volterra state non-finite at step {k}")));
        }
        if s[0] < 0.0 || s[1] < 0.0 {
            return Err(Error::Divergence(format!(
                "Lotka-Volterra state negative at step {k}: ({}, {}); reduce the step size",
                s[0], s[1]
            )));
        }
        if k % p.stride == 0 {
            out.push((k as f64 * p.h, s));
        }
    }
    Ok(out)
}

/// Lotka-Volterra observations at every stride after the start: `z` is time,
/// `x` is `(prey, predator)`. The initial state is fixed by the parameters and
/// not recorded.
pub fn simulate_lv(p: &LvParams, seed: u64) -> Result<SplitBag> {
    let mut traj = lv_trajectory(p)?;
    traj.remove(0);
    let mut rng = seed::rng(seed);
    let mut z = Vec::with_capacity(traj.len());
    let mut x = Vec::with_capacity(2 * traj.len());
    for (t, s) in traj {
        z.push(t);
        for v in s {
            let noise = if p.obs_noise > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                (p.obs_noise * e).exp()
            } else {
                1.0
            };
            x.push(v * noise);
        }
    }
    SplitBag::new(SampleBag::from_scalars(&z)?, SampleBag::from_flat(2, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LvPrior {
    pub alpha: LogNormal,
    pub beta: LogNormal,
    pub gamma: LogNormal,
    pub delta: LogNormal,
}

impl Default for LvPrior {
    fn default() -> Self {
        Self {
            alpha: LogNormal::new(1.0, 0.2),
            beta: LogNormal::new(0.1, 0.2),
            gamma: LogNormal::new(0.1, 0.2),
            delta: LogNormal::new(1.0, 0.2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LvModel {
    pub prior: LvPrior,
    pub x0: f64,
    pub y0: f64,
    pub h: f64,
    pub stride: usize,
    pub obs_noise: f64,
    /// Recorded points per dataset.
    pub n: usize,
}

impl Default for LvModel {
    fn default() -> Self {
        Self { prior: LvPrior::default(), x0: 20.0, y0: 5.0, h: 0.01, stride: 10, obs_noise: 0.0, n: 200 }
    }
}

impl LvModel {
    pub fn validate(&self) -> Result<()> {
        self.prior.alpha.validate("prior.alpha")?;
        self.prior.beta.validate("prior.beta")?;
        self.prior.gamma.validate("prior.gamma")?;
        self.prior.delta.validate("prior.delta")?;
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        self.params(&Self::default_theta())?.validate()
    }

    pub fn default_theta() -> Vec<f64> {
        let pr = LvPrior::default();
        vec![pr.alpha.median, pr.beta.median, pr.gamma.median, pr.delta.median]
    }

    pub fn params(&self, theta: &[f64]) -> Result<LvParams> {
        check_theta(theta, 4)?;
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        Ok(LvParams {
            alpha: theta[0],
            beta: theta[1],
            gamma: theta[2],
            delta: theta[3],
            x0: self.x0,
            y0: self.y0,
            h: self.h,
            horizon: (self.n * self.stride) as f64 * self.h,
            stride: self.stride,
            obs_noise: self.obs_noise,
        })
    }
}

impl GenerativeModel for LvModel {
    fn param_dim(&self) -> usize {
        4
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        let pr = &self.prior;
        vec![pr.alpha.sample(rng), pr.beta.sample(rng), pr.gamma.sample(rng), pr.delta.sample(rng)]
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> Result<SplitBag> {
        simulate_lv(&self.params(theta)?, seed)
    }
}

// ---------------------------------------------------------------------------

/// Any of the built-in models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Simulator {
    Toy(ToyModel),
    Blowfly(BlowflyModel),
    Lv(LvModel),
}

impl Simulator {
    pub fn default_for(id: ModelId) -> Self {
        match id {
            ModelId::Toy => Simulator::Toy(ToyModel::default()),
            ModelId::Blowfly => Simulator::Blowfly(BlowflyModel::default()),
            ModelId::Lv => Simulator::Lv(LvModel::default()),
        }
    }

    /// Same model with `n` points per dataset.
    pub fn with_n(self, n: usize) -> Self {
        match self {
            Simulator::Toy(m) => Simulator::Toy(ToyModel { n, ..m }),
            Simulator::Blowfly(m) => Simulator::Blowfly(BlowflyModel { n, ..m }),
            Simulator::Lv(m) => Simulator::Lv(LvModel { n, ..m }),
        }
    }

    pub fn id(&self) -> ModelId {
        match self {
            Simulator::Toy(_) => ModelId::Toy,
            Simulator::Blowfly(_) => ModelId::Blowfly,
            Simulator::Lv(_) => ModelId::Lv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Simulator::Toy(m) => m.validate(),
            Simulator::Blowfly(m) => m.validate(),
            Simulator::Lv(m) => m.validate(),
        }
    }

    /// Parameter used for synthetic observations when none is configured.
    pub fn default_theta(&self) -> Vec<f64> {
        match self {
            Simulator::Toy(_) => vec![2.0],
            Simulator::Blowfly(_) => BlowflyModel::default_theta(),
            Simulator::Lv(_) => LvModel::default_theta(),
        }
    }

    fn inner(&self) -> &dyn GenerativeModel {
        match self {
            Simulator::Toy(m) => m,
            Simulator::Blowfly(m) => m,
            Simulator::Lv(m) => m,
        }
    }
}

impl GenerativeModel for Simulator {
    fn param_dim(&self) -> usize {
        self.inner().param_dim()
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        self.inner().sample_prior(rng)
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> Result<SplitBag> {
        self.inner().simulate(theta, seed)
    }
}

/// One draw from the default prior of the named model.
pub fn prior_sample(model: &str, seed: u64) -> Result<Vec<f64>> {
    let sim = Simulator::default_for(model.parse()?);
    Ok(sim.sample_prior(&mut seed::rng(seed)))
}

// ---------------------------------------------------------------------------
// Observed-data files
//
// Plain text. The first line is `# dz=<a> dx=<b>`; every further non-empty,
// non-comment line holds `a + b` whitespace-separated numbers, z columns first.

pub fn format_observed(data: &SplitBag) -> String {
    let mut out = format!("# dz={} dx={}\n", data.z().dim(), data.x().dim());
    for i in 0..data.len() {
        let row: Vec<String> = data
            .z()
            .point(i)
            .iter()
            .chain(data.x().point(i))
            .map(|v| format!("{v:?}"))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_observed(text: &str) -> Result<SplitBag> {
    let mut lines = text.lines().enumerate();
    let (dz, dx) = loop {
        let Some((_, line)) = lines.next() else {
            return Err(Error::Parse("missing `# dz=.. dx=..` header".into()));
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        break parse_header(line)?;
    };
    let mut z = Vec::new();
    let mut x = Vec::new();
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: `{t}`: {e}", no + 1))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != dz + dx {
            return Err(Error::Parse(format!(
                "line {}: expected {} columns, found {}",
                no + 1,
                dz + dx,
                vals.len()
            )));
        }
        z.extend_from_slice(&vals[..dz]);
        x.extend_from_slice(&vals[dz..]);
    }
    if z.is_empty() && x.is_empty() {
        return Err(Error::Empty("observed data"));
    }
    SplitBag::new(SampleBag::from_flat(dz, z)?, SampleBag::from_flat(dx, x)?)
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse(format!("bad header `{line}`, expected `# dz=<a> dx=<b>`"));
    let body = line.strip_prefix('#').ok_or_else(bad)?;
    let (mut dz, mut dx) = (None, None);
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(bad)?;
        let v: usize = v.parse().map_err(|_| bad())?;
        match k {
            "dz" => dz = Some(v),
            "dx" => dx = Some(v),
            _ => return Err(bad()),
        }
    }
    match (dz, dx) {
        (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(bad()),
    }
}

pub fn read_observed(path: &Path) -> Result<SplitBag> {
    parse_observed(&std::fs::read_to_string(path)?)
}

pub fn write_observed(path: &Path, data: &SplitBag) -> Result<()> {
    std::fs::write(path, format_observed(data))?;
    Ok(())
}
