use fcm_fracture::assembly::Discretization;
use fcm_fracture::basis::{BasisEvaluator, BasisSpec, ShapeValues};
use fcm_fracture::image::{ValueKind, VoxelImage};
use fcm_fracture::material::{MaterialParams, MaterialTable};
use fcm_fracture::postproc::{crack_isovolume, principal_values, probe_strain};
use fcm_fracture::quadrature::QuadratureOptions;
use nalgebra::Matrix3;
use proptest::prelude::*;

fn block(dims: [usize; 3], h: f64, spec: BasisSpec) -> Discretization {
    let n = dims.iter().product();
    let img = VoxelImage::new(dims, [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; n], None).unwrap();
    let mat = MaterialTable::uniform(n, 1000.0, 1.0, MaterialParams::default());
    Discretization::new(&img, mat, spec, h, 1e-6, &QuadratureOptions::default()).unwrap()
}

/// Coefficients that interpolate `f` in the least-squares sense at the
/// quadrature points; exact whenever `f` lies in the space.
fn project(d: &Discretization, comps: usize, f: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<f64> {
    let layout = if comps == 3 { &d.u_layout } else { &d.s_layout };
    let n = layout.num_dofs();
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    let mut shape = ShapeValues::new(&d.spec());
    for c in 0..d.grid.num_active() {
        let nodes = layout.nodes_of(c);
        for q in d.quad.cell_range(c) {
            d.basis.eval_into(d.cell_ijk(c), d.quad.local[q], &mut shape);
            let fx = f(d.point(c, q));
            let w = d.quad.weights[q];
            for (a, &na) in nodes.iter().enumerate() {
                for k in 0..comps {
                    let ra = na as usize * comps + k;
                    b[ra] += w * shape.values[a] * fx[k];
                    for (bb, &nb) in nodes.iter().enumerate() {
                        m[(ra, nb as usize * comps + k)] += w * shape.values[a] * shape.values[bb];
                    }
                }
            }
        }
    }
    m.cholesky().expect("mass matrix is SPD").solve(&b).iter().copied().collect()
}

#[test]
fn cubic_bsplines_reproduce_linear_fields() {
    let d = block([6, 4, 4], 1.0, BasisSpec::bspline(3));
    let f = |x: [f64; 3]| [0.3 + 0.2 * x[0] - 0.1 * x[1] + 0.05 * x[2], 0.0, 0.0];
    let s = project(&d, 1, f);
    for &x in &[[0.1, 0.2, 0.3], [5.9, 3.9, 3.9], [2.5, 1.7, 0.4], [3.0, 2.0, 2.0]] {
        let (c, shape) = d.locate(x).unwrap();
        let v = d.scalar_at(&s, c, &shape);
        assert!((v - f(x)[0]).abs() < 1e-10, "{x:?}: {v} vs {}", f(x)[0]);
        let g: [f64; 3] = std::array::from_fn(|j| {
            d.s_layout.nodes_of(c).iter().zip(&shape.gradients).map(|(&n, gr)| s[n as usize] * gr[j]).sum()
        });
        for (a, b) in g.iter().zip([0.2, -0.1, 0.05]) {
            assert!((a - b).abs() < 1e-9, "gradient {g:?}");
        }
    }
}

#[test]
fn legendre_basis_reproduces_quadratics() {
    let d = block([4, 2, 2], 1.0, BasisSpec::legendre(2));
    let f = |x: [f64; 3]| [x[0] * x[0] - 0.5 * x[1] * x[2] + x[2], 0.0, 0.0];
    let s = project(&d, 1, f);
    for &x in &[[0.3, 0.3, 0.3], [3.7, 1.2, 1.9], [2.0, 1.0, 1.0]] {
        let (c, shape) = d.locate(x).unwrap();
        assert!((d.scalar_at(&s, c, &shape) - f(x)[0]).abs() < 1e-10);
    }
}

#[test]
fn shape_functions_sum_to_one_everywhere() {
    let spec = BasisSpec::bspline(3);
    let ev = BasisEvaluator::new(spec, [5, 5, 5], 1.0);
    let mut shape = ShapeValues::new(&spec);
    for ijk in [[0, 0, 0], [2, 3, 4], [4, 4, 4]] {
        for xi in [[0.0, 0.5, 1.0], [0.13, 0.77, 0.5]] {
            ev.eval_into(ijk, xi, &mut shape);
            let sum: f64 = shape.values.iter().sum();
            assert!((sum - 1.0).abs() < 1e-13);
            for j in 0..3 {
                let gs: f64 = shape.gradients.iter().map(|g| g[j]).sum();
                assert!(gs.abs() < 1e-12);
            }
        }
    }
}

fn linear_displacement(d: &Discretization, g: [[f64; 3]; 3]) -> Vec<f64> {
    project(d, 3, |x| std::array::from_fn(|i| (0..3).map(|j| g[i][j] * x[j]).sum()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// For a homogeneous strain the probe returns its smallest principal
    /// value, whatever the ball.
    #[test]
    fn probe_of_homogeneous_strain_is_its_min_principal_value(
        g in proptest::array::uniform9(-1e-3f64..1e-3),
        cx in 1.5f64..4.5, cy in 1.5f64..2.5, cz in 1.5f64..2.5,
        r in 0.0f64..1.0,
    ) {
        let d = block([6, 4, 4], 1.0, BasisSpec::bspline(2));
        let grad = [[g[0], g[1], g[2]], [g[3], g[4], g[5]], [g[6], g[7], g[8]]];
        let u = linear_displacement(&d, grad);
        let e = Matrix3::from_fn(|i, j| 0.5 * (grad[i][j] + grad[j][i]));
        let (vals, _) = principal_values(&e);
        let expected = vals[2] * 1e6;
        let got = probe_strain(&d, &u, [cx, cy, cz], r).unwrap();
        prop_assert!((got - expected).abs() < 1e-6, "{} vs {}", got, expected);
    }

    /// Thresholds that widen the window never remove sub-cells.
    #[test]
    fn isovolume_grows_with_the_window(a in 0.05f64..0.5, b in 0.05f64..0.45, samples in 1usize..4) {
        let d = block([6, 4, 4], 1.0, BasisSpec::bspline(2));
        // phase field rising away from the plane x = 3
        let s = project(&d, 1, |x| [((x[0] - 3.0) / 3.0).powi(2).min(1.0), 0.0, 0.0]);
        let narrow = crack_isovolume(&d, &s, 0.0, a, samples, None).unwrap();
        let wide = crack_isovolume(&d, &s, 0.0, (a + b).min(1.0), samples, None).unwrap();
        prop_assert!(narrow.len() <= wide.len());
        for c in &narrow.centers {
            prop_assert!(wide.centers.contains(c));
        }
        for &v in &wide.s {
            prop_assert!((0.0..=(a + b).min(1.0)).contains(&v));
        }
    }
}

#[test]
fn isovolume_band_width_follows_the_threshold() {
    let d = block([12, 2, 2], 1.0, BasisSpec::bspline(2));
    // s = |x - 6| / 6: the window [0, t] is a slab of width 12 t
    let s = project(&d, 1, |x| [(x[0] - 6.0).abs() / 6.0, 0.0, 0.0]);
    let iso = crack_isovolume(&d, &s, 0.0, 0.25, 8, None).unwrap();
    let xs: Vec<f64> = iso.centers.iter().map(|c| c[0]).collect();
    let width = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min) + iso.sub_size;
    // the quadratic basis smooths the kink, so allow one sub-cell per side
    assert!((width - 3.0).abs() <= 2.0 * iso.sub_size + 1e-9, "width {width}");
    assert!((iso.volume() - width * 2.0 * 2.0).abs() < 1e-9);
}
