//! Cost and error bookkeeping, normalization against fully coarse and fully
//! fine reference runs, efficiency, and parameter sweeps.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dg::{basis, Discretization, SolutionState, Solver};
use crate::env::{AmrEnv, EnvConfig};
use crate::error::{Error, Result};
use crate::mesh::{Action, Bounds, Level, Mesh, RefinementMode};
use crate::policies::{threshold_absolute, threshold_relative, PolicyWeights};
use crate::problems::ProblemSpec;
use crate::trainer::greedy_actions;

/// Whether cost counts DOF once per solver step or once per remesh interval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    #[default]
    PerStep,
    PerInterval,
}

/// Work done during one remesh interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalCost {
    pub solver_steps: usize,
    /// DOF of the mesh used in the interval (analysis window only when the
    /// problem has one)
    pub dofs: usize,
}

pub fn accumulate_cost(intervals: &[IntervalCost], mode: CostMode) -> f64 {
    intervals
        .iter()
        .map(|i| match mode {
            CostMode::PerStep => (i.solver_steps * i.dofs) as f64,
            CostMode::PerInterval => i.dofs as f64,
        })
        .sum()
}

/// `(c̄, ē)` relative to the coarse and fine reference runs, unclamped.
pub fn normalize(c: f64, e: f64, coarse: (f64, f64), fine: (f64, f64)) -> Result<(f64, f64)> {
    let (c_coarse, e_coarse) = coarse;
    let (c_fine, e_fine) = fine;
    if !(c_fine > c_coarse) {
        return Err(Error::DegenerateReference(format!(
            "fine cost {c_fine} does not exceed coarse cost {c_coarse}"
        )));
    }
    if !(e_coarse > e_fine) {
        return Err(Error::DegenerateReference(format!(
            "coarse error {e_coarse} does not exceed fine error {e_fine}"
        )));
    }
    Ok(((c - c_coarse) / (c_fine - c_coarse), (e - e_fine) / (e_coarse - e_fine)))
}

/// `ε = 1 − sqrt(c̄² + ē²)`.
pub fn efficiency(c_bar: f64, e_bar: f64) -> f64 {
    1.0 - (c_bar * c_bar + e_bar * e_bar).sqrt()
}

/// L2 norm of the observed component's error at the state's time: against
/// the translated initial data for advection, against `reference` for
/// Euler. The integral runs over the analysis window when the problem has
/// one.
pub fn true_error(state: &SolutionState, spec: &ProblemSpec, reference: Option<&SolutionState>) -> Result<f64> {
    let law = state.law();
    if law != spec.law() {
        return Err(Error::ReferenceMismatch("state and problem use different conservation laws".into()));
    }
    let c = law.observed_component();
    let window = spec.analysis_window;
    match law {
        crate::equations::ConservationLaw::Advection { .. } => Ok(l2_over(state.mesh(), window, |x| {
            state.evaluate(x)[c] - spec.exact_advection(x, state.time).unwrap()
        })
        .sqrt()),
        crate::equations::ConservationLaw::Euler { .. } => {
            let r = reference.ok_or_else(|| Error::ReferenceMismatch("Euler errors need a reference solution".into()))?;
            if r.law() != law || r.mesh().bounds() != state.mesh().bounds() {
                return Err(Error::ReferenceMismatch("reference solves a different problem".into()));
            }
            if (r.time - state.time).abs() > 1e-9 * state.time.abs().max(1.0) {
                return Err(Error::ReferenceMismatch(format!(
                    "reference is at t = {}, solution at t = {}",
                    r.time, state.time
                )));
            }
            let finer = if r.dof_count() >= state.dof_count() { r } else { state };
            Ok(l2_over(finer.mesh(), window, |x| state.evaluate(x)[c] - r.evaluate(x)[c]).sqrt())
        }
    }
}

/// `∫ f²` by over-integrated Gauss quadrature on each element of `mesh`
/// (restricted to elements centred in `window`).
fn l2_over<F: Fn([f64; 2]) -> f64>(mesh: &Mesh, window: Option<Bounds>, f: F) -> f64 {
    let mut total = 0.0;
    for el in mesh.elements() {
        if window.is_some_and(|w| !w.contains(el.centroid())) {
            continue;
        }
        let (pts, wts) = basis::gauss_legendre(el.order + 4);
        let j = el.jacobian();
        for (qy, wy) in pts.iter().zip(&wts) {
            for (qx, wx) in pts.iter().zip(&wts) {
                let d = f(el.map([*qx, *qy]));
                total += wx * wy * j * d * d;
            }
        }
    }
    total
}

/// Uniform run used as the Euler error reference: order p+2 in p-mode,
/// four times the agent count per axis in h-mode (one level beyond the
/// finest policy mesh). Advances to `time`.
pub fn reference_solution(config: &EnvConfig, spec: &ProblemSpec, time: f64) -> Result<SolutionState> {
    let setup = spec.solver_setup();
    let order = config.base_order.unwrap_or(setup.base_order);
    let solver = Solver::new(config.solver.unwrap_or(setup.solver));
    let mesh = match config.mode {
        RefinementMode::P => Mesh::cartesian(config.agents[0], config.agents[1], spec.bounds, RefinementMode::P, order + 2)?,
        RefinementMode::H => Mesh::cartesian(4 * config.agents[0], 4 * config.agents[1], spec.bounds, RefinementMode::H, order)?,
    };
    let state = spec.initial_state(Discretization::new(mesh, spec.law()));
    Ok(solver.advance(&state, time, |_| Ok(()))?.0)
}

/// A marking strategy evaluated by [`run_episode`].
#[derive(Clone, Debug)]
pub enum PolicySpec {
    Uniform(Level),
    ThresholdAbsolute(f64),
    ThresholdRelative(f64),
    /// greedy actions of a trained network at the given `α`
    Learned { weights: Arc<PolicyWeights>, alpha: f64 },
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Uniform(Level::Coarse) => "coarse",
            PolicySpec::Uniform(Level::Fine) => "fine",
            PolicySpec::ThresholdAbsolute(_) => "threshold_absolute",
            PolicySpec::ThresholdRelative(_) => "threshold_relative",
            PolicySpec::Learned { .. } => "learned",
        }
    }

    pub fn parameter(&self) -> Option<f64> {
        match self {
            PolicySpec::Uniform(_) => None,
            PolicySpec::ThresholdAbsolute(t) | PolicySpec::ThresholdRelative(t) => Some(*t),
            PolicySpec::Learned { alpha, .. } => Some(*alpha),
        }
    }
}

/// Family of policies swept over a parameter.
#[derive(Clone, Debug)]
pub enum SweepFamily {
    ThresholdAbsolute,
    ThresholdRelative,
    Learned(Arc<PolicyWeights>),
}

impl SweepFamily {
    pub fn with_parameter(&self, p: f64) -> PolicySpec {
        match self {
            SweepFamily::ThresholdAbsolute => PolicySpec::ThresholdAbsolute(p),
            SweepFamily::ThresholdRelative => PolicySpec::ThresholdRelative(p),
            SweepFamily::Learned(w) => PolicySpec::Learned {
                weights: w.clone(),
                alpha: p,
            },
        }
    }
}

/// Result of one evaluation episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub intervals: Vec<IntervalCost>,
    pub final_state: SolutionState,
    /// actions taken at each remesh decision
    pub actions: Vec<Vec<Action>>,
    pub mean_reward: f64,
}

impl EpisodeOutcome {
    pub fn cost(&self, mode: CostMode) -> f64 {
        accumulate_cost(&self.intervals, mode)
    }
}

/// Plays one episode of `spec` with `policy`.
pub fn run_episode(config: &EnvConfig, spec: &ProblemSpec, policy: &PolicySpec) -> Result<EpisodeOutcome> {
    let mut cfg = config.clone();
    if let PolicySpec::Learned { alpha, .. } = policy {
        cfg.alpha = *alpha;
    }
    let mut env = AmrEnv::new(cfg)?;
    let mut obs = env.reset_with(spec.clone())?;
    let n = env.agent_count();
    let mut intervals = Vec::new();
    let mut all_actions = Vec::new();
    let mut reward_sum = 0.0;
    loop {
        let actions = match policy {
            PolicySpec::Uniform(l) => vec![*l; n],
            PolicySpec::ThresholdAbsolute(t) => threshold_absolute(env.errors(), *t)?,
            PolicySpec::ThresholdRelative(t) => threshold_relative(env.errors(), *t)?,
            PolicySpec::Learned { weights, .. } => greedy_actions(weights, &obs.data, n)?,
        };
        let r = env.step(&actions)?;
        all_actions.push(actions);
        reward_sum += r.rewards.iter().sum::<f64>() / n as f64;
        if r.failed {
            let time = env.state().map_or(0.0, |s| s.time);
            return Err(Error::SolverFailure {
                time,
                element: 0,
                reason: "episode ended by a solver failure".into(),
            });
        }
        let d = r.diagnostics.expect("successful step");
        intervals.push(IntervalCost {
            solver_steps: d.solver_steps,
            dofs: if d.solver_steps == 0 { 0 } else { (d.cost / d.solver_steps as f64).round() as usize },
        });
        obs = r.observations;
        if r.done {
            break;
        }
    }
    let steps = all_actions.len() as f64;
    Ok(EpisodeOutcome {
        intervals,
        final_state: env.state().expect("finished episode").clone(),
        actions: all_actions,
        mean_reward: reward_sum / steps,
    })
}

/// Coarse and fine reference results of one problem instance.
#[derive(Clone, Debug)]
pub struct References {
    /// `(c, e)` of the all-coarse run
    pub coarse: (f64, f64),
    /// `(c, e)` of the all-fine run
    pub fine: (f64, f64),
    /// Euler error reference at the final time
    pub solution: Option<SolutionState>,
    pub cost_mode: CostMode,
}

impl References {
    pub fn compute(config: &EnvConfig, spec: &ProblemSpec, cost_mode: CostMode) -> Result<Self> {
        let coarse = run_episode(config, spec, &PolicySpec::Uniform(Level::Coarse))?;
        let solution = match spec.law() {
            crate::equations::ConservationLaw::Euler { .. } => {
                Some(reference_solution(config, spec, coarse.final_state.time)?)
            }
            _ => None,
        };
        let fine = run_episode(config, spec, &PolicySpec::Uniform(Level::Fine))?;
        let e_c = true_error(&coarse.final_state, spec, solution.as_ref())?;
        let e_f = true_error(&fine.final_state, spec, solution.as_ref())?;
        Ok(Self {
            coarse: (coarse.cost(cost_mode), e_c),
            fine: (fine.cost(cost_mode), e_f),
            solution,
            cost_mode,
        })
    }
}

/// One evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub policy: String,
    pub parameter: Option<f64>,
    pub intervals: Vec<IntervalCost>,
    pub c: f64,
    pub e: f64,
    pub c_bar: f64,
    pub e_bar: f64,
    pub efficiency: f64,
    pub problem: ProblemSpec,
    pub seed: u64,
    pub wall_time: f64,
    /// failure message when the run broke down
    pub failure: Option<String>,
}

/// Column order of the sweep CSV.
pub const RUN_RECORD_COLUMNS: [&str; 9] = ["policy", "parameter", "c", "e", "c_bar", "e_bar", "efficiency", "seed", "wall_time"];

#[derive(Serialize, Deserialize)]
struct RunRow {
    policy: String,
    parameter: Option<f64>,
    c: f64,
    e: f64,
    c_bar: f64,
    e_bar: f64,
    efficiency: f64,
    seed: u64,
    wall_time: f64,
}

/// Evaluates one policy on one instance against precomputed references.
pub fn evaluate(config: &EnvConfig, spec: &ProblemSpec, policy: &PolicySpec, refs: &References, seed: u64) -> RunRecord {
    evaluate_with_state(config, spec, policy, refs, seed).0
}

/// As [`evaluate`], also returning the final state of a successful run.
pub fn evaluate_with_state(
    config: &EnvConfig,
    spec: &ProblemSpec,
    policy: &PolicySpec,
    refs: &References,
    seed: u64,
) -> (RunRecord, Option<SolutionState>) {
    let start = Instant::now();
    let result = run_episode(config, spec, policy).and_then(|out| {
        let c = out.cost(refs.cost_mode);
        let e = true_error(&out.final_state, spec, refs.solution.as_ref())?;
        let (cb, eb) = normalize(c, e, refs.coarse, refs.fine)?;
        Ok((out, c, e, cb, eb))
    });
    let wall_time = start.elapsed().as_secs_f64();
    let (intervals, state, c, e, c_bar, e_bar, failure) = match result {
        Ok((out, c, e, cb, eb)) => (out.intervals, Some(out.final_state), c, e, cb, eb, None),
        Err(err) => {
            warn!("{} run failed: {err}", policy.name());
            (Vec::new(), None, f64::NAN, f64::NAN, f64::NAN, f64::NAN, Some(err.to_string()))
        }
    };
    let record = RunRecord {
        policy: policy.name().into(),
        parameter: policy.parameter(),
        intervals,
        c,
        e,
        c_bar,
        e_bar,
        efficiency: efficiency(c_bar, e_bar),
        problem: spec.clone(),
        seed,
        wall_time,
        failure,
    };
    (record, state)
}

/// One record per parameter, in order; failed runs are kept with NaN
/// metrics.
pub fn pareto_sweep(
    config: &EnvConfig,
    spec: &ProblemSpec,
    family: &SweepFamily,
    parameters: &[f64],
    refs: &References,
    seed: u64,
) -> Vec<RunRecord> {
    parameters
        .iter()
        .map(|&p| evaluate(config, spec, &family.with_parameter(p), refs, seed))
        .collect()
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(RUN_RECORD_COLUMNS)?;
    }
    for r in records {
        w.serialize(RunRow {
            policy: r.policy.clone(),
            parameter: r.parameter,
            c: r.c,
            e: r.e,
            c_bar: r.c_bar,
            e_bar: r.e_bar,
            efficiency: r.efficiency,
            seed: r.seed,
            wall_time: r.wall_time,
        })?;
    }
    w.flush()?;
    Ok(())
}
