//! Staggered quasi-static driver: adaptive displacement stepping and
//! alternating elastic / phase-field solves.

use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_elastic_system, assemble_phasefield, phase_at_points, positive_energy, reaction_force, update_history,
    Discretization, DisplacementBc, PhaseFieldBc, PhaseFieldParams, ReactionMethod,
};
use crate::error::{Error, Result};
use crate::postproc::{probe_strain, ForceStrainRecord};
use crate::sparse::{norm2, CsrMatrix, LinearSolver, LinearSolverConfig};

/// Displacement increments and the rules that shrink them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadSchedule {
    pub u_large: f64,
    pub u_med: f64,
    pub u_small: f64,
    /// Switch large → medium once max 4ℓ₀Ψ⁺/Gc exceeds this value.
    pub energy_switch: f64,
    /// Switch medium → small once min s drops below this value.
    pub phase_switch: f64,
    /// Repeat a step with the smaller increment when it triggered a switch.
    pub rollback_on_switch: bool,
    /// Stop once this displacement magnitude is reached [mm].
    pub target_displacement: f64,
    /// Stop once |F| falls below this fraction of its running maximum.
    pub drop_fraction: f64,
    pub max_steps: usize,
}

impl Default for LoadSchedule {
    fn default() -> Self {
        LoadSchedule {
            u_large: 0.04,
            u_med: 0.002,
            u_small: 0.001,
            energy_switch: 0.5,
            phase_switch: 0.9,
            rollback_on_switch: true,
            target_displacement: 5.0,
            drop_fraction: 0.25,
            max_steps: 2000,
        }
    }
}

impl LoadSchedule {
    /// A schedule with a single step size.
    pub fn uniform(du: f64, target: f64) -> Self {
        LoadSchedule {
            u_large: du,
            u_med: du,
            u_small: du,
            target_displacement: target,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.u_small > 0.0 && self.u_med >= self.u_small && self.u_large >= self.u_med && self.u_large.is_finite()) {
            return err(format!(
                "schedule requires u_large >= u_med >= u_small > 0, got {} / {} / {}",
                self.u_large, self.u_med, self.u_small
            ));
        }
        if !(self.target_displacement > 0.0) {
            return err(format!("schedule.target_displacement must be > 0, got {}", self.target_displacement));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return err(format!("schedule.drop_fraction must lie in [0, 1), got {}", self.drop_fraction));
        }
        if self.max_steps == 0 {
            return err("schedule.max_steps must be >= 1".into());
        }
        Ok(())
    }
}

/// Current stage of the step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPhase {
    Large,
    Medium,
    Small,
}

impl StepPhase {
    pub fn size(self, s: &LoadSchedule) -> f64 {
        match self {
            StepPhase::Large => s.u_large,
            StepPhase::Medium => s.u_med,
            StepPhase::Small => s.u_small,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaggeredConfig {
    /// Tolerance on max(R_u, R_s).
    pub eps: f64,
    pub n_stag: usize,
    /// Residual stiffness η.
    pub eta: f64,
    /// Length scale ℓ₀ [mm].
    pub l0: f64,
}

impl Default for StaggeredConfig {
    fn default() -> Self {
        StaggeredConfig {
            eps: 1.0e-5,
            n_stag: 25,
            eta: 1.0e-5,
            l0: 2.0,
        }
    }
}

impl StaggeredConfig {
    pub fn validate(&self, h: f64) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("solver.eps must be > 0, got {}", self.eps)));
        }
        if self.n_stag == 0 {
            return Err(Error::Config("solver.n_stag must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("solver.eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.l0 >= h) {
            return Err(Error::Config(format!(
                "solver.l0 = {} is below the cell size h = {h}; the crack cannot be resolved",
                self.l0
            )));
        }
        Ok(())
    }
}

/// Degrees of freedom and history of one load step.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// History field at the volume quadrature points [MPa].
    pub history: Vec<f64>,
    pub applied: f64,
    pub step: usize,
}

impl FieldState {
    /// Undeformed, intact state.
    pub fn initial(disc: &Discretization) -> Self {
        FieldState {
            u: vec![0.0; disc.u_layout.num_dofs()],
            s: vec![1.0; disc.s_layout.num_dofs()],
            history: vec![0.0; disc.quad.len()],
            applied: 0.0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub iterations: usize,
    /// (R_u, R_s) per staggered iteration.
    pub residuals: Vec<(f64, f64)>,
    pub residual: f64,
    pub converged: bool,
}

/// The boundary value problem to be driven.
#[derive(Debug)]
pub struct Problem {
    pub disc: Discretization,
    pub bcs: Vec<DisplacementBc>,
    pub phase_bcs: Vec<PhaseFieldBc>,
    /// Index into `bcs` of the region whose reaction force is recorded.
    pub reaction_bc: usize,
    /// Force component reported in the records.
    pub reaction_component: usize,
    pub reaction_method: ReactionMethod,
    /// Strain probe (center, radius) recorded each step.
    pub probe: Option<([f64; 3], f64)>,
    /// Load direction: +1 pulls, −1 pushes.
    pub load_sign: f64,
    pub linear: LinearSolverConfig,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if self.reaction_bc >= self.bcs.len() {
            return Err(Error::Config(format!(
                "reaction boundary index {} out of range ({} boundaries)",
                self.reaction_bc,
                self.bcs.len()
            )));
        }
        if self.reaction_component > 2 {
            return Err(Error::Config("reaction component must be 0, 1 or 2".into()));
        }
        if self.load_sign != 1.0 && self.load_sign != -1.0 {
            return Err(Error::Config("load sign must be +1 or -1".into()));
        }
        Ok(())
    }

    /// Reaction force along the recorded component for a state.
    pub fn reaction(&self, state: &FieldState, eta: f64) -> f64 {
        reaction_force(
            &self.disc,
            &state.u,
            &state.s,
            &self.bcs[self.reaction_bc],
            state.applied,
            eta,
            self.reaction_method,
        )[self.reaction_component]
    }

    pub fn record(&self, state: &FieldState, eta: f64) -> Result<ForceStrainRecord> {
        let probe_eps3 = match self.probe {
            Some((c, r)) => probe_strain(&self.disc, &state.u, c, r)?,
            None => f64::NAN,
        };
        Ok(ForceStrainRecord {
            step: state.step,
            applied_displacement: state.applied,
            reaction_force: self.reaction(state, eta),
            probe_eps3,
        })
    }
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; x.len()];
    a.mul_vec(x, &mut ax);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let scale = norm2(b).max(norm2(&ax));
    if scale == 0.0 {
        0.0
    } else {
        r / scale
    }
}

/// ‖K u − f‖ / ‖f_int‖. The penalty load is orders of magnitude larger than
/// the bulk internal force, so it would hide the coupling error.
fn elastic_residual(k: &CsrMatrix, u: &[f64], f: &[f64], internal: &[f64]) -> f64 {
    let mut ku = vec![0.0; u.len()];
    k.mul_vec(u, &mut ku);
    let r = ku.iter().zip(f).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    if r == 0.0 {
        0.0
    } else {
        r / norm2(internal)
    }
}

/// One load increment: alternate elastic and phase-field solves until
/// max(R_u, R_s) < ε or `n_stag` iterations. A non-converged state is
/// returned with `converged = false`.
///
/// R_u and R_s are measured on the current iterate before it is updated,
/// relative to the larger of |rhs| and |A x|, so an already converged state
/// is returned unchanged.
pub fn staggered_step(
    problem: &Problem,
    state: &FieldState,
    du: f64,
    cfg: &StaggeredConfig,
    solver_u: &mut LinearSolver,
    solver_s: &mut LinearSolver,
) -> Result<(FieldState, StepDiagnostics)> {
    if !du.is_finite() {
        return Err(Error::Config(format!("load increment must be finite, got {du}")));
    }
    let disc = &problem.disc;
    let pf = PhaseFieldParams { l0: cfg.l0, eta: cfg.eta };
    let mut next = FieldState {
        applied: state.applied + du,
        step: state.step + 1,
        ..state.clone()
    };
    let wrap = |e: Error, next: &FieldState| Error::Step {
        step: next.step,
        applied: next.applied,
        source: Box::new(e),
    };
    let load = next.applied;
    let mut history = update_history(&state.history, &positive_energy(disc, &next.u));
    let (mut a_s, mut b_s) = assemble_phasefield(disc, &history, pf, &problem.phase_bcs).map_err(|e| wrap(e, &next))?;
    let mut diag = StepDiagnostics {
        iterations: 0,
        residuals: Vec::new(),
        residual: f64::INFINITY,
        converged: false,
    };
    for it in 1..=cfg.n_stag {
        let sys = assemble_elastic_system(disc, &next.u, &next.s, &problem.bcs, load, cfg.eta);
        let (k, f) = (sys.matrix, sys.rhs);
        let r_u = elastic_residual(&k, &next.u, &f, &sys.internal);
        let r_s = residual(&a_s, &next.s, &b_s);
        diag.iterations = it;
        diag.residuals.push((r_u, r_s));
        diag.residual = r_u.max(r_s);
        if diag.residual < cfg.eps {
            diag.converged = true;
            break;
        }
        solver_u.solve(&k, &f, &mut next.u).map_err(|e| wrap(e, &next))?;
        history = update_history(&state.history, &positive_energy(disc, &next.u));
        let sys = assemble_phasefield(disc, &history, pf, &problem.phase_bcs).map_err(|e| wrap(e, &next))?;
        a_s = sys.0;
        b_s = sys.1;
        solver_s.solve(&a_s, &b_s, &mut next.s).map_err(|e| wrap(e, &next))?;
    }
    if !diag.converged {
        log::warn!(
            "step {}: staggered iteration not converged after {} iterations (residual {:.3e})",
            next.step,
            cfg.n_stag,
            diag.residual
        );
    }
    next.history = history;
    Ok((next, diag))
}

/// Per-step summary kept alongside the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub applied: f64,
    pub increment: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub min_s: f64,
    pub max_energy_ratio: f64,
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ForceDrop,
    TargetReached,
    MaxSteps,
}

/// Resumable driver state.
#[derive(Debug, Clone)]
pub struct RunState {
    pub fields: FieldState,
    pub records: Vec<ForceStrainRecord>,
    pub summaries: Vec<StepSummary>,
    pub phase: StepPhase,
    pub max_force: f64,
}

impl RunState {
    pub fn new(problem: &Problem) -> Self {
        RunState {
            fields: FieldState::initial(&problem.disc),
            records: Vec::new(),
            summaries: Vec::new(),
            phase: StepPhase::Large,
            max_force: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    pub termination: Termination,
}

/// Failure of a run, with the last accepted state for checkpointing.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub state: RunState,
}

/// max 4ℓ₀H/Gc and min s over the physical quadrature points.
pub fn damage_indicators(disc: &Discretization, fields: &FieldState, l0: f64) -> (f64, f64) {
    let s_q = phase_at_points(disc, &fields.s);
    let mut ratio: f64 = 0.0;
    let mut min_s = f64::INFINITY;
    for q in 0..disc.quad.len() {
        if disc.quad.alpha[q] != 1.0 {
            continue;
        }
        let m = disc.materials.at(disc.quad.voxel[q], 1.0);
        ratio = ratio.max(4.0 * l0 * fields.history[q] / m.gc);
        min_s = min_s.min(s_q[q]);
    }
    (ratio, min_s)
}

/// Drive the problem from `start` until the force drops, the target
/// displacement is reached or the step limit is hit. `on_step` sees every
/// accepted step.
pub fn run_simulation(
    problem: &Problem,
    schedule: &LoadSchedule,
    cfg: &StaggeredConfig,
    start: RunState,
    mut on_step: impl FnMut(&RunState, &StepDiagnostics),
) -> std::result::Result<RunOutcome, Box<RunFailure>> {
    let mut state = start;
    let fail = |error: Error, state: &RunState| Box::new(RunFailure { error, state: state.clone() });
    if let Err(e) = schedule
        .validate()
        .and_then(|_| cfg.validate(problem.disc.h()))
        .and_then(|_| problem.validate())
    {
        return Err(fail(e, &state));
    }
    let mut solver_u = LinearSolver::new(problem.linear);
    let mut solver_s = LinearSolver::new(problem.linear);
    let target = schedule.target_displacement;
    loop {
        if state.records.len() >= schedule.max_steps {
            return Ok(RunOutcome { state, termination: Termination::MaxSteps });
        }
        let done = state.fields.applied.abs();
        if done >= target * (1.0 - 1e-12) {
            return Ok(RunOutcome { state, termination: Termination::TargetReached });
        }
        let size = state.phase.size(schedule).min(target - done);
        let du = problem.load_sign * size;
        let (fields, diag) = match staggered_step(problem, &state.fields, du, cfg, &mut solver_u, &mut solver_s) {
            Ok(r) => r,
            Err(e) => return Err(fail(e, &state)),
        };
        let (ratio, min_s) = damage_indicators(&problem.disc, &fields, cfg.l0);
        let mut phase = state.phase;
        if phase == StepPhase::Large && ratio > schedule.energy_switch {
            phase = StepPhase::Medium;
        }
        if phase == StepPhase::Medium && min_s < schedule.phase_switch {
            phase = StepPhase::Small;
        }
        if phase != state.phase {
            log::info!("step {}: switching step size to {:?}", fields.step, phase);
            let smaller = phase.size(schedule) < state.phase.size(schedule);
            state.phase = phase;
            if schedule.rollback_on_switch && smaller {
                continue;
            }
        }
        let record = match problem.record(&fields, cfg.eta) {
            Ok(r) => r,
            Err(e) => {
                let e = Error::Step { step: fields.step, applied: fields.applied, source: Box::new(e) };
                return Err(fail(e, &state));
            }
        };
        log::info!(
            "step {:4}  u = {:.5e}  F = {:.6e}  stag = {} ({:.2e}){}",
            fields.step,
            fields.applied,
            record.reaction_force,
            diag.iterations,
            diag.residual,
            if diag.converged { "" } else { "  NOT CONVERGED" }
        );
        state.summaries.push(StepSummary {
            step: fields.step,
            applied: fields.applied,
            increment: du,
            iterations: diag.iterations,
            residual: diag.residual,
            converged: diag.converged,
            min_s,
            max_energy_ratio: ratio,
        });
        state.fields = fields;
        state.records.push(record);
        let force = record.reaction_force.abs();
        state.max_force = state.max_force.max(force);
        on_step(&state, &diag);
        if state.max_force > 0.0 && force < schedule.drop_fraction * state.max_force {
            return Ok(RunOutcome { state, termination: Termination::ForceDrop });
        }
    }
}
