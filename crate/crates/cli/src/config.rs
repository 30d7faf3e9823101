//! Experiment configuration: a single JSON document with numbers only,
//! no expressions, so identical files reproduce identical runs.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use remest::channel::{ChannelModel, DelayModel};
use remest::sim::SimConfig;
use remest::solver::SolverConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DelaySpec {
    Constant { value: f64 },
    TwoPoint { y1: f64, p1: f64, y2: f64 },
    Lognormal { sigma: f64 },
}

impl DelaySpec {
    pub fn build(&self) -> Result<DelayModel> {
        Ok(match *self {
            DelaySpec::Constant { value } => DelayModel::constant(value)?,
            DelaySpec::TwoPoint { y1, p1, y2 } => DelayModel::two_point(y1, p1, y2)?,
            DelaySpec::Lognormal { sigma } => DelayModel::lognormal_normalized(sigma)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub alpha: f64,
    pub delay: DelaySpec,
}

impl ChannelSpec {
    pub fn build(&self) -> Result<ChannelModel> {
        Ok(ChannelModel::new(self.alpha, self.delay.build()?)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub rho: Option<f64>,
    pub grid_nodes: Option<usize>,
    pub gh_nodes: Option<usize>,
    pub max_inner: Option<usize>,
}

impl SolverSpec {
    pub fn build(&self) -> SolverConfig {
        let d = SolverConfig::default();
        SolverConfig {
            k1: self.k1,
            k2: self.k2,
            eps1: self.eps1.unwrap_or(d.eps1),
            eps2: self.eps2.unwrap_or(d.eps2),
            rho: self.rho,
            grid_nodes: self.grid_nodes.unwrap_or(d.grid_nodes),
            gh_nodes: self.gh_nodes.unwrap_or(d.gh_nodes),
            max_inner: self.max_inner.unwrap_or(d.max_inner),
        }
    }
}

fn default_horizon() -> f64 {
    1e6
}

fn default_replications() -> usize {
    20
}

fn default_seed() -> u64 {
    1
}

fn default_warmup() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    /// Time step; omitted means `10^-3 * E[Y]`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            dt: None,
            horizon: default_horizon(),
            replications: default_replications(),
            seed: default_seed(),
            warmup_fraction: default_warmup(),
        }
    }
}

impl SimSpec {
    pub fn build(&self, channel: &ChannelModel, seed_override: Option<u64>) -> SimConfig {
        SimConfig {
            dt: self.dt.unwrap_or_else(|| SimConfig::default_dt(channel)),
            horizon: self.horizon,
            replications: self.replications,
            seed: seed_override.unwrap_or(self.seed),
            warmup_fraction: self.warmup_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Alpha,
    Sigma,
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParameter::Alpha => write!(f, "alpha"),
            SweepParameter::Sigma => write!(f, "sigma"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Optimal,
    Age,
    Zerowait,
}

impl std::fmt::Display for PolicyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyName::Optimal => write!(f, "optimal"),
            PolicyName::Age => write!(f, "age"),
            PolicyName::Zerowait => write!(f, "zerowait"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub channel: ChannelSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    pub policies: Vec<PolicyName>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(config)
    }

    /// Channel at one sweep point; `None` index means the base channel.
    pub fn channel_at(&self, value: Option<f64>) -> Result<ChannelModel> {
        let Some(value) = value else {
            return self.channel.build();
        };
        let sweep = self.sweep.as_ref().expect("sweep value without sweep spec");
        match sweep.parameter {
            SweepParameter::Alpha => {
                Ok(ChannelModel::new(value, self.channel.delay.build()?)?)
            }
            SweepParameter::Sigma => match self.channel.delay {
                DelaySpec::Lognormal { .. } => Ok(ChannelModel::new(
                    self.channel.alpha,
                    DelaySpec::Lognormal { sigma: value }.build()?,
                )?),
                _ => bail!("sigma sweeps need a lognormal delay"),
            },
        }
    }

    /// Full schema-and-range check; returns human-readable violations.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.channel.build() {
            out.push(format!("channel: {e:#}"));
        }
        if self.policies.is_empty() {
            out.push("policies: at least one policy is required".into());
        }
        let mut seen = Vec::new();
        for p in &self.policies {
            if seen.contains(p) {
                out.push(format!("policies: duplicate entry {p}"));
            }
            seen.push(*p);
        }
        if let Err(e) = self.solver.build().validate() {
            out.push(format!("solver: {e:#}"));
        }
        if let Ok(channel) = self.channel.build() {
            let sim = self.sim.build(&channel, None);
            if let Err(e) = sim.validate(&channel) {
                out.push(format!("sim: {e:#}"));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                out.push("sweep: value list is empty".into());
            }
            for &v in &sweep.values {
                let bad = match sweep.parameter {
                    SweepParameter::Alpha => !(0.0..1.0).contains(&v),
                    SweepParameter::Sigma => !(v > 0.0 && v.is_finite()),
                };
                if bad {
                    out.push(format!("sweep: value {v} out of range for {}", sweep.parameter));
                }
            }
            if sweep.parameter == SweepParameter::Sigma
                && !matches!(self.channel.delay, DelaySpec::Lognormal { .. })
            {
                out.push("sweep: sigma sweeps need a lognormal delay".into());
            }
        }
        out
    }
}

/// Formats a float with 12 significant digits, fixed-point where
/// reasonable, scientific otherwise. Deterministic for identical inputs.
pub fn fmt_sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        format!("{x:.11e}")
    } else {
        let decimals = (11 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    }
}
