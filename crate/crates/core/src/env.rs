//! The multi-agent mesh-refinement environment: one agent per coarse cell,
//! actions select the cell's refinement level for the next remesh interval.

use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dg::{basis, transfer_state, Discretization, SolutionState, Solver, SolverConfig};
use crate::equations::ConservationLaw;
use crate::error::{Error, Result};
use crate::estimators::{aggregate_to_agents, running_max_update, Aggregation, Estimator, FitBasis};
use crate::mesh::{Action, Level, Mesh, RefinementMode};
use crate::problems::{self, Family, ProblemSpec};

/// Errors below this are clamped before taking logarithms.
pub const ERROR_FLOOR: f64 = 1e-16;

/// Where episode initial conditions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    Family(Family),
    Fixed(ProblemSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub problem: ProblemSource,
    pub mode: RefinementMode,
    /// agents per axis
    pub agents: [usize; 2],
    pub remesh_time: f64,
    pub rl_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub p_ur: f64,
    pub p_or: f64,
    /// observation window half-widths `(n_x, n_y)`
    pub window: [usize; 2],
    #[serde(default)]
    pub include_solution_channels: bool,
    /// reward given to every agent when the solver breaks down
    #[serde(default = "default_failure_penalty")]
    pub failure_penalty: f64,
    /// overrides the family's default polynomial order
    #[serde(default)]
    pub base_order: Option<usize>,
    /// overrides the family's default solver settings
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub fit_basis: FitBasis,
}

fn default_failure_penalty() -> f64 {
    -100.0
}

impl EnvConfig {
    /// Defaults for a problem family in the given refinement mode.
    pub fn for_family(family: Family, mode: RefinementMode) -> Self {
        let setup = family.setup();
        Self {
            problem: ProblemSource::Family(family),
            mode,
            agents: [setup.agents, setup.agents],
            remesh_time: setup.remesh_time,
            rl_steps: setup.rl_steps,
            alpha: 0.1,
            beta: 1.2,
            p_ur: 10.0,
            p_or: 5.0,
            window: [8, 8],
            include_solution_channels: false,
            failure_penalty: default_failure_penalty(),
            base_order: None,
            solver: None,
            fit_basis: FitBasis::Tensor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.beta > 1.0) {
            return bad(format!("beta must exceed 1, got {}", self.beta));
        }
        if !(self.p_ur > 0.0 && self.p_or > 0.0) {
            return bad("penalty factors must be positive".into());
        }
        if !(self.remesh_time > 0.0 && self.remesh_time.is_finite()) {
            return bad(format!("remesh_time must be positive, got {}", self.remesh_time));
        }
        if self.rl_steps == 0 {
            return bad("rl_steps must be at least 1".into());
        }
        if self.agents[0] == 0 || self.agents[1] == 0 {
            return bad("agent counts must be positive".into());
        }
        if !(self.failure_penalty <= 0.0) {
            return bad("failure_penalty must not be positive".into());
        }
        if self.base_order == Some(0) {
            return bad("base_order must be at least 1".into());
        }
        if let Some(s) = self.solver {
            if !(s.cfl > 0.0) {
                return bad("cfl must be positive".into());
            }
        }
        if let ProblemSource::Fixed(spec) = &self.problem {
            spec.law().validate()?;
        }
        Ok(())
    }

    /// Observation channels per window cell for a law.
    pub fn channel_count(&self, law: &ConservationLaw) -> usize {
        2 + if self.include_solution_channels {
            extra_channel_count(law)
        } else {
            0
        }
    }

    pub fn window_shape(&self) -> [usize; 2] {
        [2 * self.window[0] + 1, 2 * self.window[1] + 1]
    }
}

fn extra_channel_count(law: &ConservationLaw) -> usize {
    match law {
        ConservationLaw::Advection { .. } => 1,
        ConservationLaw::Euler { .. } => 8,
    }
}

/// Per-agent observation tensors, flattened window-row-major with the
/// channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub agents: usize,
    /// `(k_x, k_y)`
    pub window: [usize; 2],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Observations {
    pub fn dim(&self) -> usize {
        self.window[0] * self.window[1] * self.channels
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// Index of the centre cell's first channel within an agent's vector.
    pub fn centre_offset(&self) -> usize {
        (self.window[0] * (self.window[1] / 2) + self.window[0] / 2) * self.channels
    }
}

/// `(e_max, e_min) = (α‖e‖_∞, e_max^β)`.
pub fn thresholds(errors: &[f64], alpha: f64, beta: f64) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::DegenerateThreshold("no errors".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::DegenerateThreshold(format!("invalid error value {e}")));
    }
    let inf = errors.iter().cloned().fold(0.0, f64::max);
    if inf == 0.0 {
        return Err(Error::DegenerateThreshold("error field is identically zero".into()));
    }
    let e_max = alpha * inf;
    if e_max >= 1.0 {
        warn!("e_max = {e_max} ≥ 1: the hysteresis band is inverted");
    }
    Ok((e_max, e_max.powf(beta)))
}

/// Per-agent quantities that feed the observation window.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentFields {
    pub errors: Vec<f64>,
    /// agent-averaged diagonal flux-Jacobian entry of the observed component
    pub jacobian: Vec<[f64; 2]>,
    /// optional solution channels per agent
    pub extras: Vec<Vec<f64>>,
}

/// Assembles observations from agent-level fields.
pub fn build_observations(
    mesh: &Mesh,
    fields: &AgentFields,
    e_max: f64,
    remesh_time: f64,
    window: [usize; 2],
) -> Result<Observations> {
    let n = mesh.agent_count();
    if fields.errors.len() != n || fields.jacobian.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: fields.errors.len().min(fields.jacobian.len()),
        });
    }
    let log_max = e_max.log10();
    if !(e_max > 0.0) || log_max == 0.0 || !log_max.is_finite() {
        return Err(Error::DegenerateThreshold(format!("cannot normalize by e_max = {e_max}")));
    }
    let extra = fields.extras.first().map_or(0, |v| v.len());
    let channels = 2 + extra;
    let shape = [2 * window[0] + 1, 2 * window[1] + 1];
    let mut data = Vec::with_capacity(n * shape[0] * shape[1] * channels);
    for i in 0..n {
        for j in mesh.observation_window(i, window[0], window[1]) {
            data.push(-fields.errors[j].max(ERROR_FLOOR).log10() / log_max);
            let r = mesh.displacement(i, j);
            let r2 = r.norm_sq();
            data.push(if r2 == 0.0 {
                0.0
            } else {
                let a = fields.jacobian[j];
                (a[0] * r.0[0] + a[1] * r.0[1]) / r2 * remesh_time
            });
            data.extend_from_slice(&fields.extras[j]);
        }
    }
    Ok(Observations {
        agents: n,
        window: shape,
        channels,
        data,
    })
}

/// Penalty-only reward from the running-maximum error and the thresholds of
/// the previous remesh time.
pub fn compute_reward(actions: &[Action], running_max: &[f64], e_max: f64, e_min: f64, p_ur: f64, p_or: f64) -> Vec<f64> {
    actions
        .iter()
        .zip(running_max)
        .map(|(a, &e)| {
            let e = e.max(ERROR_FLOOR);
            match a {
                Level::Coarse if e > e_max => -p_ur * (e / e_max).log10().abs(),
                Level::Fine if e < e_min => -p_or * (e / e_min).log10().abs(),
                _ => 0.0,
            }
        })
        .collect()
}

/// Diagnostics of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub time: f64,
    /// instantaneous agent errors at the end of the interval
    pub errors: Vec<f64>,
    pub running_max: Vec<f64>,
    /// thresholds used for the reward
    pub reward_thresholds: (f64, f64),
    /// thresholds after the step
    pub thresholds: (f64, f64),
    pub dof_count: usize,
    /// Σ DOF over accepted solver steps in this interval (analysis window
    /// only when the problem has one)
    pub cost: f64,
    pub solver_steps: usize,
    pub fine_agents: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observations: Observations,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub failed: bool,
    pub diagnostics: Option<StepDiagnostics>,
}

/// One row of the episode trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub dof: usize,
    pub mean_reward: f64,
    pub error_inf: f64,
    pub e_max: f64,
    pub e_min: f64,
    pub fine: usize,
    pub coarse: usize,
}

pub struct AmrEnv {
    config: EnvConfig,
    problem: Option<ProblemSpec>,
    coarse: Option<Mesh>,
    state: Option<SolutionState>,
    estimator: Option<Estimator>,
    solver: Solver,
    errors: Vec<f64>,
    thresholds: (f64, f64),
    observations: Option<Observations>,
    steps: usize,
    done: bool,
    trace: Vec<TraceRow>,
}

impl AmrEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            problem: None,
            coarse: None,
            state: None,
            estimator: None,
            solver: Solver::new(SolverConfig::default()),
            errors: Vec::new(),
            thresholds: (0.0, 0.0),
            observations: None,
            steps: 0,
            done: true,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut EnvConfig {
        &mut self.config
    }

    pub fn problem(&self) -> Option<&ProblemSpec> {
        self.problem.as_ref()
    }

    pub fn state(&self) -> Option<&SolutionState> {
        self.state.as_ref()
    }

    /// Instantaneous agent errors of the current state.
    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn thresholds(&self) -> (f64, f64) {
        self.thresholds
    }

    pub fn observations(&self) -> Option<&Observations> {
        self.observations.as_ref()
    }

    pub fn agent_count(&self) -> usize {
        self.config.agents[0] * self.config.agents[1]
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Starts an episode from a problem drawn by the configured source.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Observations> {
        let spec = match &self.config.problem {
            ProblemSource::Family(f) => problems::sample(*f, rng),
            ProblemSource::Fixed(s) => s.clone(),
        };
        self.reset_with(spec)
    }

    /// Starts an episode from a given problem.
    pub fn reset_with(&mut self, spec: ProblemSpec) -> Result<Observations> {
        let setup = spec.solver_setup();
        let order = self.config.base_order.unwrap_or(setup.base_order);
        self.solver = Solver::new(self.config.solver.unwrap_or(setup.solver));
        let coarse = Mesh::cartesian(self.config.agents[0], self.config.agents[1], spec.bounds, self.config.mode, order)?;
        let law = spec.law();
        let disc = Discretization::new(coarse.clone(), law);
        let state = spec.initial_state(disc.clone());
        for u in state.coeffs.iter().flat_map(|c| c.chunks(law.components())) {
            law.check_admissible(u)?;
        }
        self.check_domain_of_influence(&state)?;
        let estimator = Estimator::for_discretization(disc, self.config.fit_basis);
        let errors = agent_errors(&estimator, &state)?;
        let thresholds = thresholds(&errors, self.config.alpha, self.config.beta)?;
        let obs = build_observations(
            state.mesh(),
            &agent_fields(&state, errors.clone(), self.config.include_solution_channels)?,
            thresholds.0,
            self.config.remesh_time,
            self.config.window,
        )?;
        self.problem = Some(spec);
        self.coarse = Some(coarse);
        self.state = Some(state);
        self.estimator = Some(estimator);
        self.errors = errors;
        self.thresholds = thresholds;
        self.observations = Some(obs.clone());
        self.steps = 0;
        self.done = false;
        self.trace.clear();
        Ok(obs)
    }

    fn check_domain_of_influence(&self, state: &SolutionState) -> Result<()> {
        let law = state.law();
        let mut lambda: f64 = 0.0;
        for u in state.coeffs.iter().flat_map(|c| c.chunks(law.components())) {
            lambda = lambda.max(law.max_wavespeed(u)?);
        }
        let h = state.mesh().agent_size();
        let limit = (self.config.window[0] as f64 * h[0]).min(self.config.window[1] as f64 * h[1]) / lambda;
        if lambda > 0.0 && self.config.remesh_time > limit {
            warn!(
                "remesh time {} exceeds the observation window's domain of influence {limit:.4}",
                self.config.remesh_time
            );
        }
        Ok(())
    }

    /// One remesh interval: refine/coarsen, advance, score and observe.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Config("step called on a finished episode".into()));
        }
        let n = self.agent_count();
        if actions.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: actions.len(),
            });
        }
        match self.try_step(actions) {
            Ok(r) => Ok(r),
            Err(e) if e.is_solver_failure() => {
                warn!("solver failure, ending episode: {e}");
                self.done = true;
                Ok(StepResult {
                    observations: self.observations.clone().expect("active episode"),
                    rewards: vec![self.config.failure_penalty; n],
                    done: true,
                    failed: true,
                    diagnostics: None,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn try_step(&mut self, actions: &[Action]) -> Result<StepResult> {
        let coarse = self.coarse.as_ref().expect("active episode");
        let state = self.state.as_ref().expect("active episode");
        let mesh = coarse.with_actions(actions)?;
        let moved = transfer_state(state, mesh)?;
        let estimator = Estimator::for_discretization(moved.discretization().clone(), self.config.fit_basis);
        let mut running = vec![0.0; self.agent_count()];
        let (next, stats) = self.solver.advance(&moved, self.config.remesh_time, |s| {
            let e = agent_errors(&estimator, s)?;
            running_max_update(&mut running, &e)
        })?;
        let errors = agent_errors(&estimator, &next)?;
        let (e_max_prev, e_min_prev) = self.thresholds;
        let rewards = compute_reward(actions, &running, e_max_prev, e_min_prev, self.config.p_ur, self.config.p_or);
        let new_thresholds = thresholds(&errors, self.config.alpha, self.config.beta)?;
        let obs = build_observations(
            next.mesh(),
            &agent_fields(&next, errors.clone(), self.config.include_solution_channels)?,
            new_thresholds.0,
            self.config.remesh_time,
            self.config.window,
        )?;
        let window = self.problem.as_ref().and_then(|p| p.analysis_window);
        let dof_count = next.dof_count();
        let cost = match window {
            Some(w) => stats.steps as f64 * window_dofs(next.mesh(), next.components(), w) as f64,
            None => stats.dof_steps,
        };
        let fine = actions.iter().filter(|a| **a == Level::Fine).count();
        self.steps += 1;
        self.done = self.steps >= self.config.rl_steps;
        self.trace.push(TraceRow {
            step: self.steps,
            time: next.time,
            dof: dof_count,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            error_inf: errors.iter().cloned().fold(0.0, f64::max),
            e_max: new_thresholds.0,
            e_min: new_thresholds.1,
            fine,
            coarse: actions.len() - fine,
        });
        let diagnostics = StepDiagnostics {
            time: next.time,
            errors: errors.clone(),
            running_max: running,
            reward_thresholds: (e_max_prev, e_min_prev),
            thresholds: new_thresholds,
            dof_count,
            cost,
            solver_steps: stats.steps,
            fine_agents: fine,
        };
        self.state = Some(next);
        self.estimator = Some(estimator);
        self.errors = errors;
        self.thresholds = new_thresholds;
        self.observations = Some(obs.clone());
        Ok(StepResult {
            observations: obs,
            rewards,
            done: self.done,
            failed: false,
            diagnostics: Some(diagnostics),
        })
    }

    /// Writes the per-step trace of the current episode as CSV.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// DOFs of elements whose centroid lies in `window`.
pub fn window_dofs(mesh: &Mesh, components: usize, window: crate::mesh::Bounds) -> usize {
    mesh.elements()
        .iter()
        .filter(|e| window.contains(e.centroid()))
        .map(|e| e.node_count())
        .sum::<usize>()
        * components
}

/// Agent-level errors of the observed component.
pub fn agent_errors(estimator: &Estimator, state: &SolutionState) -> Result<Vec<f64>> {
    let field = estimator.estimate(state)?;
    aggregate_to_agents(&field.values, state.mesh(), Aggregation::L2)
}

/// Element-averaged diagonal Jacobian entry of the observed component.
fn element_jacobian(state: &SolutionState, e: usize) -> Result<[f64; 2]> {
    let law = state.law();
    let l = law.observed_component();
    let m = state.components();
    let b = state.discretization().basis(e);
    let (n, q) = (b.n(), b.q());
    let uq = basis::apply_tensor(&b.interp, &b.interp, q, n, &state.coeffs[e], m);
    let mut out = [0.0; 2];
    for j in 0..q {
        for i in 0..q {
            let w = 0.25 * b.quad_weights[i] * b.quad_weights[j];
            let k = i + q * j;
            let a = law.flux_jacobian(&uq[k * m..(k + 1) * m])?;
            out[0] += w * a.a[l][l][0];
            out[1] += w * a.a[l][l][1];
        }
    }
    Ok(out)
}

/// Gathers every per-agent observation input from a state.
pub fn agent_fields(state: &SolutionState, errors: Vec<f64>, solution_channels: bool) -> Result<AgentFields> {
    let mesh = state.mesh();
    let n_el = mesh.elements().len();
    let jac: Vec<[f64; 2]> = (0..n_el).map(|e| element_jacobian(state, e)).collect::<Result<_>>()?;
    let jx = aggregate_to_agents(&jac.iter().map(|a| a[0]).collect::<Vec<_>>(), mesh, Aggregation::AreaMean)?;
    let jy = aggregate_to_agents(&jac.iter().map(|a| a[1]).collect::<Vec<_>>(), mesh, Aggregation::AreaMean)?;
    let jacobian = jx.into_iter().zip(jy).map(|(x, y)| [x, y]).collect();
    let extras = if solution_channels {
        let law = state.law();
        let m = state.components();
        let means: Vec<_> = (0..n_el).map(|e| state.element_mean(e)).collect();
        let mut per_channel: Vec<Vec<f64>> = Vec::new();
        for c in 0..m {
            let v: Vec<f64> = means.iter().map(|u| u[c]).collect();
            per_channel.push(aggregate_to_agents(&v, mesh, Aggregation::AreaMean)?);
        }
        if let ConservationLaw::Euler { .. } = law {
            let prims: Vec<_> = means.iter().map(|u| law.to_primitive(&u[..m])).collect::<Result<_>>()?;
            let fields: [fn(&crate::equations::Primitive) -> f64; 4] =
                [|p| p.density, |p| p.velocity[0], |p| p.velocity[1], |p| p.pressure];
            for f in fields {
                let v: Vec<f64> = prims.iter().map(f).collect();
                per_channel.push(aggregate_to_agents(&v, mesh, Aggregation::AreaMean)?);
            }
        }
        (0..mesh.agent_count())
            .map(|a| per_channel.iter().map(|c| c[a]).collect())
            .collect()
    } else {
        vec![Vec::new(); mesh.agent_count()]
    };
    Ok(AgentFields {
        errors,
        jacobian,
        extras,
    })
}
