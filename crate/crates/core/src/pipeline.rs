//! End-to-end runs driven by a [`RunConfig`]: problem setup, simulation,
//! and the files written to the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_elastic, default_penalty, default_phase_penalty, Discretization, DisplacementBc, PhaseFieldBc,
};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::EmbeddedGrid;
use crate::image::VoxelImage;
use crate::material::MaterialTable;
use crate::postproc::{
    crack_isovolume, failure_load, probe_strain, read_id_points, read_id_values, regression, write_force_strain_csv,
    FailureLoad, ForceStrainRecord, RegressionStats,
};
use crate::solver::{run_simulation, FieldState, LoadSchedule, Problem, RunState, StaggeredConfig, Termination};
use crate::sparse::LinearSolver;
use crate::surface::build_surface_quadrature;
use crate::vtk::{field_mesh, isovolume_mesh};

pub const FORCE_STRAIN_CSV: &str = "force_strain.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const PROVENANCE_JSON: &str = "provenance.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const FIELDS_VTU: &str = "fields_final.vtu";
pub const CRACK_VTU: &str = "crack_isovolume.vtu";
pub const STRAIN_CSV: &str = "strain_validation.csv";
pub const REGRESSION_CSV: &str = "regression.csv";

/// Load the image named by the configuration, applying config overrides.
pub fn load_image(cfg: &RunConfig) -> Result<VoxelImage> {
    let mut image = VoxelImage::load(&cfg.image.sidecar)?;
    if let Some(t) = cfg.image.inside_threshold {
        if image.mask.is_none() {
            image.threshold_mask(t);
        }
    }
    if let Some(cal) = cfg.material.hu_calibration {
        image.hu_calibration = Some(cal);
    }
    Ok(image)
}

/// Assemble the boundary value problem described by `cfg`.
pub fn build_problem(cfg: &RunConfig, image: &VoxelImage) -> Result<Problem> {
    let materials = MaterialTable::from_image(image, cfg.material.params())?;
    let d = &cfg.discretization;
    let disc = Discretization::new(image, materials, d.basis_spec()?, d.h, cfg.material.alpha_fcm, &d.quadrature())?;
    let default_pen = default_penalty(&disc.materials, d.h);
    let mut bcs = Vec::with_capacity(cfg.boundary.len());
    for b in &cfg.boundary {
        let mut region = b.region.clone();
        region.resolve(Path::new(""))?;
        bcs.push(DisplacementBc::new(
            b.name.clone(),
            region,
            b.constraint.clone(),
            b.penalty.unwrap_or(default_pen),
            &disc,
            image,
        )?);
    }
    let mut phase_bcs = Vec::new();
    for (i, b) in cfg.phase_boundary.iter().enumerate() {
        let mut region = b.region.clone();
        region.resolve(Path::new(""))?;
        let quadrature = build_surface_quadrature(&region, &disc.grid, image);
        if quadrature.is_empty() {
            return Err(Error::Config(format!("phase_boundary.{i}: region does not intersect any active cell")));
        }
        phase_bcs.push(PhaseFieldBc {
            value: b.value,
            penalty: b.penalty.unwrap_or_else(|| default_phase_penalty(cfg.solver.l0, d.h)),
            quadrature,
        });
    }
    let reaction_bc = cfg
        .boundary
        .iter()
        .position(|b| b.name == cfg.loading.reaction_boundary)
        .ok_or_else(|| Error::Config("loading.reaction_boundary: unknown boundary".into()))?;
    let problem = Problem {
        disc,
        bcs,
        phase_bcs,
        reaction_bc,
        reaction_component: cfg.loading.component,
        reaction_method: cfg.loading.reaction_method,
        probe: cfg.postproc.probe.map(|p| (p.center, p.radius)),
        load_sign: cfg.loading.sign,
        linear: cfg.solver.linear,
    };
    problem.validate()?;
    Ok(problem)
}

/// Summary written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub failure_load: Option<FailureLoad>,
    pub steps: usize,
    pub termination: Option<Termination>,
    pub nonconverged_steps: usize,
    pub active_cells: usize,
    pub cut_cells: usize,
    pub displacement_dofs: usize,
    pub phase_field_dofs: usize,
    pub wall_time_s: f64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strain_regression: Option<RegressionStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Provenance {
    program: String,
    version: String,
    config_hash: String,
    threads: usize,
    config: RunConfig,
    alpha_fcm: f64,
    h: f64,
    staggered: StaggeredDump,
    schedule: LoadSchedule,
    penalties: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StaggeredDump {
    eps: f64,
    n_stag: usize,
    eta: f64,
    l0: f64,
}

impl From<StaggeredConfig> for StaggeredDump {
    fn from(s: StaggeredConfig) -> Self {
        StaggeredDump { eps: s.eps, n_stag: s.n_stag, eta: s.eta, l0: s.l0 }
    }
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<ForceStrainRecord>,
    pub summary: RunSummary,
    pub output_dir: PathBuf,
    pub final_state: FieldState,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn grid_counts(grid: &EmbeddedGrid) -> (usize, usize) {
    (grid.num_active(), grid.cut.iter().filter(|&&c| c).count())
}

/// Run the simulation and write all artifacts into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    run_with(cfg, out, None, |_, _| {})
}

/// Like [`run`], optionally resuming from a checkpoint, calling `on_step`
/// after every accepted step.
pub fn run_with(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&RunState, &Problem),
) -> Result<RunReport> {
    let t0 = Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = cfg.hash();
    let image = load_image(cfg)?;
    let problem = build_problem(cfg, &image)?;
    let stag = cfg.staggered();
    write_provenance(cfg, &problem, &stag, out, &hash)?;

    let start = match resume {
        Some(path) => {
            let (header, state) = read_checkpoint(path)?;
            check_compatible(&header.config_hash, &hash, &problem, &state.fields)?;
            state
        }
        None => RunState::new(&problem),
    };
    let outcome = run_simulation(&problem, &cfg.solver.schedule, &stag, start, |s, _| on_step(s, &problem));
    let (state, termination, error) = match outcome {
        Ok(o) => (o.state, Some(o.termination), None),
        Err(f) => (f.state, None, Some(f.error)),
    };
    if cfg.output.checkpoint || error.is_some() {
        write_checkpoint(&out.join(CHECKPOINT), &state, &hash, error.as_ref().map(|e| e.to_string()))?;
    }
    if let Some(e) = error {
        write_force_strain_csv(&out.join(FORCE_STRAIN_CSV), &state.records)?;
        return Err(e);
    }
    let (active_cells, cut_cells) = grid_counts(&problem.disc.grid);
    let mut summary = RunSummary {
        failure_load: failure_load(&state.records).ok(),
        steps: state.records.len(),
        termination,
        nonconverged_steps: state.summaries.iter().filter(|s| !s.converged).count(),
        active_cells,
        cut_cells,
        displacement_dofs: problem.disc.u_layout.num_dofs(),
        phase_field_dofs: problem.disc.s_layout.num_dofs(),
        wall_time_s: 0.0,
        config_hash: hash,
        strain_regression: None,
        error: None,
    };
    write_outputs(cfg, &problem, &state, out)?;
    if cfg.postproc.measured.is_some() {
        summary.strain_regression = Some(strain_validation(cfg, &problem, out)?);
    }
    summary.wall_time_s = t0.elapsed().as_secs_f64();
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    Ok(RunReport {
        records: state.records,
        summary,
        output_dir: out.to_path_buf(),
        final_state: state.fields,
    })
}

fn check_compatible(stored: &str, current: &str, problem: &Problem, f: &FieldState) -> Result<()> {
    if stored != current {
        log::warn!("checkpoint was written with a different configuration (hash {stored})");
    }
    let d = &problem.disc;
    if f.u.len() != d.u_layout.num_dofs() || f.s.len() != d.s_layout.num_dofs() || f.history.len() != d.quad.len() {
        return Err(Error::Checkpoint(
            "checkpoint does not match the discretization of this configuration".into(),
        ));
    }
    Ok(())
}

fn write_provenance(cfg: &RunConfig, problem: &Problem, stag: &StaggeredConfig, out: &Path, hash: &str) -> Result<()> {
    let prov = Provenance {
        program: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash.into(),
        threads: rayon::current_num_threads(),
        config: cfg.clone(),
        alpha_fcm: problem.disc.grid.alpha_fcm,
        h: problem.disc.h(),
        staggered: (*stag).into(),
        schedule: cfg.solver.schedule,
        penalties: problem.bcs.iter().map(|b| (b.name.clone(), b.penalty)).collect(),
    };
    write_json(&out.join(PROVENANCE_JSON), &prov)
}

/// CSV and VTK artifacts of a finished state.
fn write_outputs(cfg: &RunConfig, problem: &Problem, state: &RunState, out: &Path) -> Result<()> {
    write_force_strain_csv(&out.join(FORCE_STRAIN_CSV), &state.records)?;
    if cfg.postproc.vtk {
        let f = &state.fields;
        let d = &problem.disc;
        field_mesh(d, &f.u, &f.s, &f.history, cfg.material.eta, cfg.postproc.vtk_subdivisions)
            .write_vtu(&out.join(FIELDS_VTU))?;
        let samples = cfg.postproc.iso_samples.unwrap_or(2 * (d.spec().order + 1));
        let warp = cfg.postproc.warp_factor.map(|k| (f.u.as_slice(), k));
        let iso = crack_isovolume(d, &f.s, cfg.postproc.iso_low, cfg.postproc.iso_high, samples, warp)?;
        isovolume_mesh(&iso).write_vtu(&out.join(CRACK_VTU))?;
    }
    Ok(())
}

/// Checkpoint in `out` with the problem it belongs to.
fn load_checkpointed(cfg: &RunConfig, out: &Path) -> Result<(CheckpointHeader, RunState, Problem)> {
    let path = out.join(CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {}; run `fcmfrac run` with this configuration first",
            path.display()
        )));
    }
    let (header, state) = read_checkpoint(&path)?;
    let image = load_image(cfg)?;
    let problem = build_problem(cfg, &image)?;
    check_compatible(&header.config_hash, &cfg.hash(), &problem, &state.fields)?;
    Ok((header, state, problem))
}

/// Probe strain ε₃ [µstrain] of the checkpointed state in `out`.
pub fn probe_checkpoint(cfg: &RunConfig, out: &Path, center: [f64; 3], radius: f64) -> Result<f64> {
    let (_, state, problem) = load_checkpointed(cfg, out)?;
    probe_strain(&problem.disc, &state.fields.u, center, radius)
}

/// Regenerate CSV and VTK outputs from the checkpoint in `out`.
pub fn postprocess(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    let (header, state, problem) = load_checkpointed(cfg, out)?;
    write_outputs(cfg, &problem, &state, out)?;
    let (active_cells, cut_cells) = grid_counts(&problem.disc.grid);
    Ok(RunSummary {
        failure_load: failure_load(&state.records).ok(),
        steps: state.records.len(),
        termination: None,
        nonconverged_steps: state.summaries.iter().filter(|s| !s.converged).count(),
        active_cells,
        cut_cells,
        displacement_dofs: problem.disc.u_layout.num_dofs(),
        phase_field_dofs: problem.disc.s_layout.num_dofs(),
        wall_time_s: 0.0,
        config_hash: header.config_hash,
        strain_regression: None,
        error: header.error,
    })
}

/// Intact elastic solution for a unit applied displacement, with the
/// reaction force it produces.
pub fn unit_elastic_solution(problem: &Problem, eta: f64) -> Result<(Vec<f64>, f64)> {
    let d = &problem.disc;
    let s = vec![1.0; d.s_layout.num_dofs()];
    let load = problem.load_sign;
    let (k, f) = assemble_elastic(d, &vec![0.0; d.u_layout.num_dofs()], &s, &problem.bcs, load, eta);
    let mut u = vec![0.0; f.len()];
    LinearSolver::new(problem.linear).solve(&k, &f, &mut u)?;
    let state = FieldState {
        u,
        s,
        history: vec![0.0; d.quad.len()],
        applied: load,
        step: 0,
    };
    let force = problem.reaction(&state, eta);
    Ok((state.u, force))
}

/// ε₃ [µstrain] at `points` for the intact model loaded to `force` [N].
/// With s ≡ 1 the model is linear, so one solve is scaled to the load.
pub fn elastic_strains_at(problem: &Problem, eta: f64, points: &[[f64; 3]], radius: f64, force: f64) -> Result<Vec<f64>> {
    let (u, f_unit) = unit_elastic_solution(problem, eta)?;
    if f_unit == 0.0 {
        return Err(Error::Postproc("the loading produces no reaction force".into()));
    }
    let scale = force / f_unit;
    if scale < 0.0 {
        return Err(Error::Postproc(format!(
            "measured force {force} has the opposite sign of the model reaction {f_unit}"
        )));
    }
    let u: Vec<f64> = u.iter().map(|v| v * scale).collect();
    points.iter().map(|&c| probe_strain(&problem.disc, &u, c, radius)).collect()
}

/// Compare measured strains with the elastic model and write
/// `strain_validation.csv` and `regression.csv`.
pub fn strain_validation(cfg: &RunConfig, problem: &Problem, out: &Path) -> Result<RegressionStats> {
    let m = cfg
        .postproc
        .measured
        .as_ref()
        .ok_or_else(|| Error::Config("postproc.measured: not configured".into()))?;
    let values = read_id_values(&m.values)?;
    let points = read_id_points(&m.points)?;
    let mut ids = Vec::new();
    let mut measured = Vec::new();
    let mut coords = Vec::new();
    for (id, v) in &values {
        let p = points
            .iter()
            .find(|(pid, _)| pid == id)
            .ok_or_else(|| Error::Postproc(format!("measurement point '{id}' has no coordinates")))?;
        ids.push(id.clone());
        measured.push(*v);
        coords.push(p.1);
    }
    let computed = elastic_strains_at(problem, cfg.material.eta, &coords, m.radius, m.force)?;
    let mut csv = String::from("id,measured_ustrain,computed_ustrain\n");
    for ((id, a), b) in ids.iter().zip(&measured).zip(&computed) {
        csv.push_str(&format!("{id},{a},{b}\n"));
    }
    let path = out.join(STRAIN_CSV);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let stats = regression(&measured, &computed)?;
    let path = out.join(REGRESSION_CSV);
    fs::write(&path, stats.csv()).map_err(|e| Error::io(&path, e))?;
    Ok(stats)
}
