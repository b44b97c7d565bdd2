use fcm_fracture::assembly::{default_penalty, Constraint, Discretization, DisplacementBc, ReactionMethod};
use fcm_fracture::basis::BasisSpec;
use fcm_fracture::geometry::Face;
use fcm_fracture::image::{ValueKind, VoxelImage};
use fcm_fracture::material::{MaterialParams, MaterialTable};
use fcm_fracture::postproc::regression;
use fcm_fracture::quadrature::QuadratureOptions;
use fcm_fracture::solver::{
    run_simulation, staggered_step, FieldState, LoadSchedule, Problem, RunState, StaggeredConfig, Termination,
};
use fcm_fracture::sparse::{LinearSolver, LinearSolverConfig};
use fcm_fracture::surface::Region;

const E: f64 = 1000.0;

/// 2 x 2 x 6 mm bar on rollers, loaded along z at the top face.
fn bar(gc: f64) -> Problem {
    let dims = [4, 4, 12];
    let n = dims.iter().product();
    let img = VoxelImage::new(dims, [0.5; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; n], None).unwrap();
    let mat = MaterialTable::uniform(n, E, gc, MaterialParams::default());
    let h = 1.0;
    let disc = Discretization::new(&img, mat, BasisSpec::bspline(2), h, 1e-6, &QuadratureOptions::default()).unwrap();
    let pen = default_penalty(&disc.materials, h);
    let bc = |name: &str, face, c| DisplacementBc::new(name, Region::face(face), c, pen, &disc, &img).unwrap();
    let bcs = vec![
        bc("x0", Face::XMin, Constraint::Component { component: 0, value: 0.0 }),
        bc("y0", Face::YMin, Constraint::Component { component: 1, value: 0.0 }),
        bc("z0", Face::ZMin, Constraint::Component { component: 2, value: 0.0 }),
        bc("top", Face::ZMax, Constraint::Loaded { component: 2, scale: 1.0 }),
    ];
    Problem {
        disc,
        bcs,
        phase_bcs: vec![],
        reaction_bc: 3,
        reaction_component: 2,
        reaction_method: ReactionMethod::Penalty,
        probe: Some(([1.0, 1.0, 3.0], 0.5)),
        load_sign: 1.0,
        linear: LinearSolverConfig::default(),
    }
}

fn cfg() -> StaggeredConfig {
    StaggeredConfig { l0: 1.0, ..Default::default() }
}

fn solvers() -> (LinearSolver, LinearSolver) {
    (LinearSolver::new(LinearSolverConfig::default()), LinearSolver::new(LinearSolverConfig::default()))
}

#[test]
fn tough_elastic_step_converges_quickly() {
    // Gc so large that the phase field barely moves
    let p = bar(1e9);
    let (mut su, mut ss) = solvers();
    let start = FieldState::initial(&p.disc);
    let (next, diag) = staggered_step(&p, &start, 1e-3, &cfg(), &mut su, &mut ss).unwrap();
    assert!(diag.converged);
    assert!(diag.iterations <= 3, "{diag:?}");
    assert_eq!(next.step, 1);
    assert_eq!(next.applied, 1e-3);
}

#[test]
fn repeating_a_converged_step_changes_nothing() {
    let p = bar(5.0);
    let (mut su, mut ss) = solvers();
    let start = FieldState::initial(&p.disc);
    let (a, da) = staggered_step(&p, &start, 2e-3, &cfg(), &mut su, &mut ss).unwrap();
    assert!(da.converged, "{da:?}");
    let (b, db) = staggered_step(&p, &a, 0.0, &cfg(), &mut su, &mut ss).unwrap();
    assert_eq!(db.iterations, 1, "{db:?}");
    assert_eq!(a.u, b.u);
    assert_eq!(a.s, b.s);
    assert_eq!(a.history, b.history);
    assert_eq!(b.applied, a.applied);
}

#[test]
fn elastic_range_is_linear_with_the_analytic_slope() {
    let p = bar(1e9);
    let schedule = LoadSchedule::uniform(1e-3, 5e-3);
    let out = run_simulation(&p, &schedule, &cfg(), RunState::new(&p), |_, _| {}).unwrap();
    assert_eq!(out.termination, Termination::TargetReached);
    let r = &out.state.records;
    assert_eq!(r.len(), 5);
    let u: Vec<f64> = r.iter().map(|x| x.applied_displacement).collect();
    let f: Vec<f64> = r.iter().map(|x| x.reaction_force).collect();
    let fit = regression(&u, &f).unwrap();
    assert!(fit.r2 > 1.0 - 1e-12, "{fit:?}");
    // F = E A u / L with A = 4 mm², L = 6 mm
    let k = E * 4.0 / 6.0;
    assert!((fit.slope - k).abs() < 5e-3 * k, "slope {} vs {k}", fit.slope);
    for x in r {
        // uniaxial strain u / L, in µstrain, through the probe
        let eps = -0.3 * x.applied_displacement / 6.0 * 1e6;
        assert!((x.probe_eps3 - eps).abs() < 5e-3 * eps.abs(), "{} vs {eps}", x.probe_eps3);
    }
}

#[test]
fn compression_reverses_the_force() {
    let mut p = bar(1e9);
    p.load_sign = -1.0;
    let out = run_simulation(&p, &LoadSchedule::uniform(1e-3, 2e-3), &cfg(), RunState::new(&p), |_, _| {}).unwrap();
    for x in &out.state.records {
        assert!(x.applied_displacement < 0.0 && x.reaction_force < 0.0, "{x:?}");
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let p = bar(0.05);
    let sched = LoadSchedule::uniform(2e-3, 1e-2);
    let a = run_simulation(&p, &sched, &cfg(), RunState::new(&p), |_, _| {}).unwrap();
    let b = run_simulation(&p, &sched, &cfg(), RunState::new(&p), |_, _| {}).unwrap();
    assert_eq!(a.state.records, b.state.records);
    assert_eq!(a.state.fields.s, b.state.fields.s);
}

#[test]
fn phase_field_never_heals() {
    let p = bar(0.05);
    let mut prev: Option<Vec<f64>> = None;
    run_simulation(&p, &LoadSchedule::uniform(2e-3, 1.2e-2), &cfg(), RunState::new(&p), |st, _| {
        let h = st.fields.history.clone();
        if let Some(old) = &prev {
            assert!(h.iter().zip(old).all(|(a, b)| a >= b));
        }
        prev = Some(h);
    })
    .unwrap();
}

#[test]
fn invalid_load_sign_is_rejected() {
    let mut p = bar(5.0);
    p.load_sign = 0.5;
    let err = run_simulation(&p, &LoadSchedule::default(), &cfg(), RunState::new(&p), |_, _| {}).unwrap_err();
    assert!(err.error.to_string().contains("load sign"));
}
