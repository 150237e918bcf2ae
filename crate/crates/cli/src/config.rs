//! Run configuration: one TOML file with nested sections, validated before
//! any computation starts.

use std::path::{Path, PathBuf};

use dynamo_core::dg::SolverConfig;
use dynamo_core::env::{EnvConfig, ProblemSource};
use dynamo_core::estimators::FitBasis;
use dynamo_core::mesh::{Level, RefinementMode};
use dynamo_core::metrics::CostMode;
use dynamo_core::problems::{self, Family, ProblemSpec};
use dynamo_core::trainer::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSection,
    #[serde(default)]
    pub mesh: MeshSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub family: Family,
    /// canonical Riemann configuration (family `riemann_2d` only)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riemann_case: Option<u32>,
    /// fully specified instance; overrides sampling
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ProblemSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<RefinementMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_order: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remesh_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_ur: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_or: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_solution_channels: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_basis: Option<FitBasis>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Coarse,
    Fine,
    ThresholdAbsolute,
    ThresholdRelative,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub policy: PolicyKind,
    /// θ for threshold policies, α for learned ones
    #[serde(default)]
    pub parameters: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// number of sampled problem instances (seeds `seed`, `seed + 1`, ...)
    #[serde(default = "one")]
    pub instances: usize,
    #[serde(default)]
    pub cost_mode: CostMode,
    #[serde(default)]
    pub write_vtk: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_time: Option<f64>,
    /// VTK cadence; the remesh time when absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_interval: Option<f64>,
    #[serde(default)]
    pub level: Level,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

impl RunConfig {
    pub fn mode(&self) -> RefinementMode {
        self.mesh.mode.unwrap_or(if self.problem.family.is_smooth() {
            RefinementMode::P
        } else {
            RefinementMode::H
        })
    }

    /// The fixed instance named by the problem section, if any.
    pub fn fixed_instance(&self) -> Result<Option<ProblemSpec>, CliError> {
        if let Some(s) = &self.problem.spec {
            if s.family() != self.problem.family {
                return Err(CliError::Config("problem.spec belongs to a different family".into()));
            }
            return Ok(Some(s.clone()));
        }
        match (self.problem.family, self.problem.riemann_case) {
            (Family::Riemann2d, Some(id)) => Ok(Some(problems::riemann_case(id)?)),
            (_, Some(_)) => Err(CliError::Config("riemann_case requires family riemann_2d".into())),
            (Family::SodRadial, None) => Ok(Some(problems::sod_radial())),
            _ => Ok(None),
        }
    }

    /// Instance for a seed: the fixed one or a fresh sample.
    pub fn instance(&self, seed: u64) -> Result<ProblemSpec, CliError> {
        Ok(match self.fixed_instance()? {
            Some(s) => s,
            None => problems::sample(self.problem.family, &mut ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    /// Environment settings after applying family defaults and overrides.
    pub fn env_config(&self) -> Result<EnvConfig, CliError> {
        let family = self.problem.family;
        let mut c = EnvConfig::for_family(family, self.mode());
        let fixed = self.fixed_instance()?;
        let e = &self.env;
        if let Some(s) = &fixed {
            if s.family() == Family::Riemann2d && s.final_time.is_some() {
                c.agents = [problems::RIEMANN_AGENTS; 2];
            }
        }
        if let Some(a) = self.mesh.agents {
            c.agents = a;
        }
        if let Some(v) = e.rl_steps {
            c.rl_steps = v;
        }
        c.remesh_time = match (e.remesh_time, fixed.as_ref().and_then(|s| s.final_time)) {
            (Some(t), _) => t,
            (None, Some(tf)) => tf / c.rl_steps as f64,
            (None, None) => c.remesh_time,
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = e.$f { c.$f = v; } )* };
        }
        set!(alpha, beta, p_ur, p_or, window, include_solution_channels, failure_penalty, fit_basis);
        c.base_order = self.mesh.base_order;
        c.solver = self.solver;
        if let Some(s) = fixed {
            c.problem = ProblemSource::Fixed(s);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_default();
        if self.train.is_none() {
            t.seed = self.seed;
        }
        t
    }

    /// Checks every section that a subcommand will use.
    pub fn validate(&self) -> Result<(), CliError> {
        self.env_config()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(e) = &self.eval {
            if e.instances == 0 {
                return Err(CliError::Config("eval.instances must be positive".into()));
            }
            for &p in &e.parameters {
                let ok = match e.policy {
                    PolicyKind::ThresholdAbsolute => p > 0.0,
                    PolicyKind::ThresholdRelative => (0.0..=1.0).contains(&p),
                    PolicyKind::Learned => p > 0.0 && p <= 1.0,
                    PolicyKind::Coarse | PolicyKind::Fine => true,
                };
                if !ok || !p.is_finite() {
                    return Err(CliError::Config(format!("parameter {p} is out of range for {:?}", e.policy)));
                }
            }
            if e.policy == PolicyKind::Learned && e.checkpoint.is_none() {
                return Err(CliError::Config("learned policies need eval.checkpoint".into()));
            }
        }
        if let Some(s) = &self.solve {
            for t in [s.final_time, s.snapshot_interval].into_iter().flatten() {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(CliError::Config("solve times must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Copy with every default made explicit, for exact replay.
    pub fn resolved(&self, instance: Option<ProblemSpec>) -> Result<RunConfig, CliError> {
        let env = self.env_config()?;
        let mut r = self.clone();
        if let Some(spec) = instance {
            r.problem.riemann_case = None;
            r.problem.spec = Some(spec);
        }
        r.mesh = MeshSection {
            mode: Some(env.mode),
            agents: Some(env.agents),
            base_order: self.mesh.base_order,
        };
        r.env = EnvSection {
            remesh_time: Some(env.remesh_time),
            rl_steps: Some(env.rl_steps),
            alpha: Some(env.alpha),
            beta: Some(env.beta),
            p_ur: Some(env.p_ur),
            p_or: Some(env.p_or),
            window: Some(env.window),
            include_solution_channels: Some(env.include_solution_channels),
            failure_penalty: Some(env.failure_penalty),
            fit_basis: Some(env.fit_basis),
        };
        Ok(r)
    }
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    std::fs::write(dir.join("config.resolved.toml"), text)?;
    Ok(())
}
