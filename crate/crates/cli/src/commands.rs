//! Subcommand implementations. Each validates its configuration before
//! creating the output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dynamo_core::dg::{Discretization, Solver};
use dynamo_core::mesh::{Level, Mesh};
use dynamo_core::metrics::{evaluate_with_state, true_error, write_records, PolicySpec, References, RunRecord};
use dynamo_core::policies::read_checkpoint;
use dynamo_core::problems::Family;
use dynamo_core::trainer;
use dynamo_core::vtk::write_vtk;
use log::{info, warn};

use crate::config::{self, EvalSection, PolicyKind, ProblemSection, RunConfig};
use crate::CliError;

/// Default θ sweep: six decades.
pub const THETA_DECADES: [f64; 6] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7];

pub fn solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let spec = cfg.instance(cfg.seed)?;
    let env = cfg.env_config()?;
    let section = cfg.solve.clone().unwrap_or_default();
    let setup = spec.solver_setup();
    let order = env.base_order.unwrap_or(setup.base_order);
    let solver = Solver::new(env.solver.unwrap_or(setup.solver));
    let mesh = Mesh::cartesian(env.agents[0], env.agents[1], spec.bounds, env.mode, order)?.uniform(section.level);
    let final_time = section
        .final_time
        .or(spec.final_time)
        .unwrap_or(env.remesh_time * env.rl_steps as f64);
    let interval = section.snapshot_interval.unwrap_or(env.remesh_time);

    std::fs::create_dir_all(out)?;
    config::write_resolved(&cfg.resolved(Some(spec.clone()))?, out)?;
    let mut state = spec.initial_state(Discretization::new(mesh, spec.law()));
    let m = state.components();
    let mut csv = csv::Writer::from_path(out.join("integrals.csv")).map_err(dynamo_core::Error::from)?;
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((0..m).map(|c| format!("q{c}")));
    csv.write_record(&header).map_err(dynamo_core::Error::from)?;
    let mut step = 0usize;
    let mut row = |step: usize, s: &dynamo_core::dg::SolutionState| -> dynamo_core::Result<()> {
        let q = s.integrals();
        let mut r = vec![step.to_string(), s.time.to_string()];
        r.extend(q[..m].iter().map(|v| v.to_string()));
        csv.write_record(&r)?;
        Ok(())
    };
    row(0, &state)?;
    write_vtk(&out.join("snapshot_0000.vtk"), &state)?;
    let mut snap = 0;
    while state.time < final_time * (1.0 - 1e-12) {
        let dt = interval.min(final_time - state.time);
        let (next, _) = solver.advance(&state, dt, |s| {
            step += 1;
            row(step, s)
        })?;
        state = next;
        snap += 1;
        write_vtk(&out.join(format!("snapshot_{snap:04}.vtk")), &state)?;
    }
    drop(row);
    csv.flush()?;
    match spec.family() {
        Family::AdvRing | Family::AdvBump => {
            let e = true_error(&state, &spec, None)?;
            println!("t = {:.6}  steps = {step}  L2 error = {e:.6e}", state.time);
        }
        _ => println!("t = {:.6}  steps = {step}", state.time),
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let env = cfg.env_config()?;
    let tc = cfg.train_config();
    tc.validate()?;
    if resume && !out.join("latest.ckpt").exists() {
        return Err(CliError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no checkpoint to resume in {}", out.display()),
        )));
    }
    std::fs::create_dir_all(out)?;
    let mut resolved = cfg.resolved(None)?;
    resolved.train = Some(tc.clone());
    config::write_resolved(&resolved, out)?;
    let summary = trainer::train(&env, &tc, out, resume)?;
    match summary.history.last() {
        Some(s) => println!(
            "iterations {}  env steps {}  last reward {:.4}  best reward {:.4}",
            s.iteration, s.env_steps, s.mean_reward, summary.best_mean_reward
        ),
        None => println!("no iterations run; initial checkpoint written"),
    }
    Ok(())
}

/// Command-line overrides for evaluation.
pub fn apply_overrides(cfg: &mut RunConfig, checkpoint: Option<PathBuf>, alpha: Option<f64>) -> Result<(), CliError> {
    if let Some(c) = checkpoint {
        let e = cfg.eval.get_or_insert_with(|| learned_section(None));
        e.policy = PolicyKind::Learned;
        e.checkpoint = Some(c);
    }
    if let Some(a) = alpha {
        let e = cfg
            .eval
            .as_mut()
            .filter(|e| e.policy == PolicyKind::Learned)
            .ok_or_else(|| CliError::Config("--alpha applies to learned policies only".into()))?;
        e.parameters = vec![a];
    }
    Ok(())
}

fn learned_section(checkpoint: Option<PathBuf>) -> EvalSection {
    EvalSection {
        policy: PolicyKind::Learned,
        parameters: Vec::new(),
        checkpoint,
        instances: 1,
        cost_mode: Default::default(),
        write_vtk: false,
    }
}

/// Evaluates the configured policy. In sweep mode a single instance is used
/// and threshold policies default to six θ decades.
pub fn eval(cfg: &RunConfig, out: &Path, sweep: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let section = cfg
        .eval
        .clone()
        .ok_or_else(|| CliError::Config("missing [eval] section".into()))?;
    let env = cfg.env_config()?;
    let weights = match (&section.policy, &section.checkpoint) {
        (PolicyKind::Learned, Some(p)) => Some(Arc::new(read_checkpoint(p)?.0)),
        _ => None,
    };
    let parameters = match (section.parameters.is_empty(), section.policy) {
        (false, _) => section.parameters.clone(),
        (true, PolicyKind::ThresholdAbsolute) if sweep => THETA_DECADES.to_vec(),
        (true, PolicyKind::ThresholdAbsolute) => vec![1e-3],
        (true, PolicyKind::ThresholdRelative) => vec![0.5],
        (true, PolicyKind::Learned) => vec![env.alpha],
        (true, PolicyKind::Coarse | PolicyKind::Fine) => vec![0.0],
    };
    let policies: Vec<PolicySpec> = parameters
        .iter()
        .map(|&p| match section.policy {
            PolicyKind::Coarse => PolicySpec::Uniform(Level::Coarse),
            PolicyKind::Fine => PolicySpec::Uniform(Level::Fine),
            PolicyKind::ThresholdAbsolute => PolicySpec::ThresholdAbsolute(p),
            PolicyKind::ThresholdRelative => PolicySpec::ThresholdRelative(p),
            PolicyKind::Learned => PolicySpec::Learned {
                weights: weights.clone().expect("validated"),
                alpha: p,
            },
        })
        .collect();
    let instances = if sweep { 1 } else { section.instances };
    let first = cfg.instance(cfg.seed)?;

    std::fs::create_dir_all(out)?;
    let mut resolved = cfg.resolved((instances == 1).then(|| first.clone()))?;
    if let Some(e) = resolved.eval.as_mut() {
        e.parameters = parameters.clone();
        e.instances = instances;
    }
    config::write_resolved(&resolved, out)?;

    let mut records: Vec<RunRecord> = Vec::new();
    for i in 0..instances {
        let seed = cfg.seed + i as u64;
        let spec = if i == 0 { first.clone() } else { cfg.instance(seed)? };
        // references are shared by every parameter of this instance
        let refs = References::compute(&env, &spec, section.cost_mode)?;
        info!(
            "instance {i}: coarse (c, e) = ({:.4e}, {:.4e}), fine = ({:.4e}, {:.4e})",
            refs.coarse.0, refs.coarse.1, refs.fine.0, refs.fine.1
        );
        for (k, p) in policies.iter().enumerate() {
            let (rec, state) = evaluate_with_state(&env, &spec, p, &refs, seed);
            match &rec.failure {
                Some(f) => warn!("{} {:?}: {f}", rec.policy, rec.parameter),
                None => println!(
                    "{:<20} {:>10}  c̄ = {:8.4}  ē = {:8.4}  ε = {:8.4}",
                    rec.policy,
                    rec.parameter.map_or("-".into(), |v| format!("{v:.3e}")),
                    rec.c_bar,
                    rec.e_bar,
                    rec.efficiency
                ),
            }
            if let (true, Some(s)) = (section.write_vtk, state) {
                write_vtk(&out.join(format!("final_{i:03}_{k:03}.vtk")), &s)?;
            }
            records.push(rec);
        }
    }
    write_records(&out.join("runs.csv"), &records)?;
    Ok(())
}

pub fn riemann(case: u32, base: Option<RunConfig>, out: &Path) -> Result<(), CliError> {
    let mut cfg = base.unwrap_or_else(|| RunConfig {
        seed: 0,
        problem: ProblemSection {
            family: Family::Riemann2d,
            riemann_case: None,
            spec: None,
        },
        mesh: Default::default(),
        solver: None,
        env: Default::default(),
        train: None,
        eval: None,
        solve: None,
    });
    cfg.problem = ProblemSection {
        family: Family::Riemann2d,
        riemann_case: Some(case),
        spec: None,
    };
    if cfg.eval.is_none() {
        cfg.eval = Some(EvalSection {
            policy: PolicyKind::ThresholdAbsolute,
            parameters: vec![1e-2],
            checkpoint: None,
            instances: 1,
            cost_mode: Default::default(),
            write_vtk: true,
        });
    }
    eval(&cfg, out, false)
}
