//! Derived quantities: strain probes, principal values, failure loads,
//! crack iso-volumes and regression statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::Discretization;
use crate::basis::ShapeValues;
use crate::error::{Error, Result};
use crate::material::{degraded_stress, Tensor};
use crate::quadrature::gauss_legendre;

/// Below this magnitude [µstrain] a measured value is excluded from the
/// relative error.
pub const NOISE_FLOOR_USTRAIN: f64 = 10.0;

/// One load step of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceStrainRecord {
    pub step: usize,
    /// Applied displacement [mm].
    pub applied_displacement: f64,
    /// Reaction force along the loading direction [N].
    pub reaction_force: f64,
    /// Minimum principal strain at the probe [µstrain]; NaN without a probe.
    pub probe_eps3: f64,
}

pub const FORCE_STRAIN_HEADER: &str = "step,applied_displacement,reaction_force,probe_eps3_ustrain";

/// CSV text for a record list. Floats use the shortest round-trip format.
pub fn format_force_strain_csv(records: &[ForceStrainRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(FORCE_STRAIN_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.applied_displacement, r.reaction_force, r.probe_eps3);
    }
    out
}

pub fn write_force_strain_csv(path: &Path, records: &[ForceStrainRecord]) -> Result<()> {
    fs::write(path, format_force_strain_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_force_strain_csv(path: &Path) -> Result<Vec<ForceStrainRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Postproc(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == FORCE_STRAIN_HEADER => {}
        _ => return Err(bad(1, &format!("expected header '{FORCE_STRAIN_HEADER}'"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, &format!("'{s}' is not a number")));
        out.push(ForceStrainRecord {
            step: f[0].parse().map_err(|_| bad(i + 1, "step is not an integer"))?,
            applied_displacement: num(f[1])?,
            reaction_force: num(f[2])?,
            probe_eps3: num(f[3])?,
        });
    }
    Ok(out)
}

/// Eigenvalues sorted v₁ ≥ v₂ ≥ v₃ and the matching unit eigenvectors as columns.
pub fn principal_values(t: &Tensor) -> ([f64; 3], Tensor) {
    // nalgebra's symmetric QR stops at ~1e-10 relative accuracy for some 3x3 inputs
    let sym = faer::Mat::<f64>::from_fn(3, 3, |i, j| 0.5 * (t[(i, j)] + t[(j, i)]));
    let Ok(eig) = sym.self_adjoint_eigen(faer::Side::Lower) else {
        // non-finite input
        return ([f64::NAN; 3], Tensor::identity());
    };
    let (vals, vecs) = (eig.S(), eig.U());
    // faer returns ascending eigenvalues
    let values = [vals[2], vals[1], vals[0]];
    let dirs = Tensor::from_fn(|r, c| vecs[(r, 2 - c)]);
    (values, dirs)
}

/// Peak of a force record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureLoad {
    /// Maximum reaction-force magnitude [N].
    pub force: f64,
    pub step: usize,
    pub applied_displacement: f64,
    /// False when the maximum is the last record, i.e. the curve never dropped.
    pub peak_detected: bool,
}

/// Maximum |F| over the records; ties go to the earliest step.
pub fn failure_load(records: &[ForceStrainRecord]) -> Result<FailureLoad> {
    if records.is_empty() {
        return Err(Error::Postproc("failure load of an empty record list".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.step);
    let mut best = 0;
    for (i, r) in sorted.iter().enumerate() {
        if r.reaction_force.abs() > sorted[best].reaction_force.abs() {
            best = i;
        }
    }
    let r = sorted[best];
    Ok(FailureLoad {
        force: r.reaction_force.abs(),
        step: r.step,
        applied_displacement: r.applied_displacement,
        peak_detected: best + 1 < sorted.len(),
    })
}

/// Minimum principal strain [µstrain] averaged over a ball, using only
/// points of the physical domain. A zero radius returns the value at the
/// nearest physical quadrature point.
pub fn probe_strain(disc: &Discretization, u: &[f64], center: [f64; 3], radius: f64) -> Result<f64> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("probe radius must be >= 0, got {radius}")));
    }
    let spec = disc.spec();
    if radius == 0.0 {
        return nearest_point_strain(disc, u, center);
    }
    let (rn, rw) = gauss_legendre(6);
    let (cn, cw) = gauss_legendre(8);
    let nphi = 16;
    let mut shape = ShapeValues::new(&spec);
    let (mut acc, mut wsum) = (0.0, 0.0);
    for (&r0, &wr) in rn.iter().zip(&rw) {
        let r = r0 * radius;
        for (&c0, &wc) in cn.iter().zip(&cw) {
            let ct = 2.0 * c0 - 1.0;
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            for k in 0..nphi {
                let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / nphi as f64;
                let x = [
                    center[0] + r * st * phi.cos(),
                    center[1] + r * st * phi.sin(),
                    center[2] + r * ct,
                ];
                if !matches!(disc.grid.indicator(x), Ok(a) if a == 1.0) {
                    continue;
                }
                let Some((ijk, xi)) = disc.grid.locate(x) else { continue };
                let Some(cell) = disc.grid.active_index(ijk) else { continue };
                disc.basis.eval_into(ijk, xi, &mut shape);
                let eps = disc.strain_at(u, cell, &shape);
                let w = wr * r * r * wc;
                acc += w * principal_values(&eps).0[2];
                wsum += w;
            }
        }
    }
    if wsum == 0.0 {
        return Err(Error::Postproc(format!(
            "probe sphere at {center:?} with radius {radius} does not intersect the physical domain"
        )));
    }
    Ok(acc / wsum * 1.0e6)
}

fn nearest_point_strain(disc: &Discretization, u: &[f64], center: [f64; 3]) -> Result<f64> {
    let mut best: Option<(f64, usize, usize)> = None;
    for c in 0..disc.grid.num_active() {
        for q in disc.quad.cell_range(c) {
            if disc.quad.alpha[q] != 1.0 {
                continue;
            }
            let x = disc.point(c, q);
            let d: f64 = (0..3).map(|a| (x[a] - center[a]).powi(2)).sum();
            if best.map_or(true, |b| d < b.0) {
                best = Some((d, c, q));
            }
        }
    }
    let (_, c, q) = best.ok_or_else(|| Error::Postproc("no physical quadrature point".into()))?;
    let mut shape = ShapeValues::new(&disc.spec());
    disc.basis.eval_into(disc.cell_ijk(c), disc.quad.local[q], &mut shape);
    Ok(principal_values(&disc.strain_at(u, c, &shape)).0[2] * 1.0e6)
}

/// Sub-cell selection of a phase-field band, as an unstructured hexahedral mesh.
#[derive(Debug, Clone, Default)]
pub struct IsoVolume {
    pub points: Vec<[f64; 3]>,
    pub hexes: Vec<[usize; 8]>,
    /// Phase field at each selected sub-cell center.
    pub s: Vec<f64>,
    /// Sub-cell centers (undeformed).
    pub centers: Vec<[f64; 3]>,
    /// Edge length of the sub-cells [mm].
    pub sub_size: f64,
}

impl IsoVolume {
    pub fn len(&self) -> usize {
        self.hexes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hexes.is_empty()
    }

    pub fn volume(&self) -> f64 {
        self.len() as f64 * self.sub_size.powi(3)
    }
}

/// Select the sub-cells of the physical domain with `s_low ≤ s ≤ s_high`.
/// Every active cell is split into `samples` sub-cells per axis; if `warp`
/// is given, vertices are displaced by `factor · u`.
pub fn crack_isovolume(
    disc: &Discretization,
    s: &[f64],
    s_low: f64,
    s_high: f64,
    samples: usize,
    warp: Option<(&[f64], f64)>,
) -> Result<IsoVolume> {
    if !(0.0 <= s_low && s_low < s_high && s_high <= 1.0) {
        return Err(Error::Config(format!(
            "iso-volume thresholds must satisfy 0 <= low < high <= 1, got [{s_low}, {s_high}]"
        )));
    }
    if samples == 0 {
        return Err(Error::Config("iso-volume sampling must be >= 1".into()));
    }
    let spec = disc.spec();
    let m = samples;
    let d = 1.0 / m as f64;
    let per_cell: Vec<Vec<([usize; 3], [f64; 3], f64)>> = (0..disc.grid.num_active())
        .into_par_iter()
        .map(|c| {
            let ijk = disc.cell_ijk(c);
            let mut shape = ShapeValues::new(&spec);
            let mut out = Vec::new();
            for k in 0..m {
                for j in 0..m {
                    for i in 0..m {
                        let xi = [(i as f64 + 0.5) * d, (j as f64 + 0.5) * d, (k as f64 + 0.5) * d];
                        let x = disc.grid.to_physical(ijk, xi);
                        if !matches!(disc.grid.indicator(x), Ok(a) if a == 1.0) {
                            continue;
                        }
                        disc.basis.eval_into(ijk, xi, &mut shape);
                        let sv = disc.scalar_at(s, c, &shape);
                        if sv >= s_low && sv <= s_high {
                            out.push(([i, j, k], x, sv));
                        }
                    }
                }
            }
            out
        })
        .collect();

    let h = disc.h();
    let mut iso = IsoVolume {
        sub_size: h * d,
        ..Default::default()
    };
    let mut shape = ShapeValues::new(&spec);
    for (c, sel) in per_cell.iter().enumerate() {
        let ijk = disc.cell_ijk(c);
        for &(sub, center, sv) in sel {
            let base = iso.points.len();
            for corner in 0..8 {
                // VTK hexahedron vertex order
                let (cx, cy, cz) = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)][corner];
                let xi = [
                    (sub[0] + cx) as f64 * d,
                    (sub[1] + cy) as f64 * d,
                    (sub[2] + cz) as f64 * d,
                ];
                let mut x = disc.grid.to_physical(ijk, xi);
                if let Some((u, factor)) = warp {
                    disc.basis.eval_into(ijk, xi, &mut shape);
                    let du = disc.displacement_at(u, c, &shape);
                    for a in 0..3 {
                        x[a] += factor * du[a];
                    }
                }
                iso.points.push(x);
            }
            iso.hexes.push(std::array::from_fn(|i| base + i));
            iso.s.push(sv);
            iso.centers.push(center);
        }
    }
    Ok(iso)
}

/// Ordinary least squares of computed against measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub n: usize,
    pub slope: f64,
    /// [µstrain]
    pub intercept: f64,
    pub r2: f64,
    /// Root mean square of the fit residuals [µstrain].
    pub rmse: f64,
    /// Mean |computed − measured| / |measured| in percent over points above
    /// the noise floor; NaN if no point qualifies.
    pub e_rel_percent: f64,
}

pub const REGRESSION_HEADER: &str = "n,slope,intercept_ustrain,r2,rmse_ustrain,e_rel_percent";

impl RegressionStats {
    pub fn csv(&self) -> String {
        format!(
            "{REGRESSION_HEADER}\n{},{},{},{},{},{}\n",
            self.n, self.slope, self.intercept, self.r2, self.rmse, self.e_rel_percent
        )
    }
}

pub fn regression(measured: &[f64], computed: &[f64]) -> Result<RegressionStats> {
    if measured.len() != computed.len() {
        return Err(Error::Postproc(format!(
            "regression needs equal lengths, got {} measured and {} computed",
            measured.len(),
            computed.len()
        )));
    }
    let n = measured.len();
    if n < 3 {
        return Err(Error::Postproc(format!("regression needs at least 3 points, got {n}")));
    }
    if measured.iter().chain(computed).any(|v| !v.is_finite()) {
        return Err(Error::Postproc("regression input contains non-finite values".into()));
    }
    let nf = n as f64;
    let mx = measured.iter().sum::<f64>() / nf;
    let my = computed.iter().sum::<f64>() / nf;
    let sxx: f64 = measured.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = measured.iter().zip(computed).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = computed.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= f64::EPSILON * measured.iter().map(|x| x * x).sum::<f64>() {
        return Err(Error::Postproc("measured values have zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = measured
        .iter()
        .zip(computed)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    let rel: Vec<f64> = measured
        .iter()
        .zip(computed)
        .filter(|(m, _)| m.abs() >= NOISE_FLOOR_USTRAIN)
        .map(|(m, c)| (c - m).abs() / m.abs())
        .collect();
    let e_rel_percent = if rel.is_empty() { f64::NAN } else { 100.0 * rel.iter().sum::<f64>() / rel.len() as f64 };
    Ok(RegressionStats {
        n,
        slope,
        intercept,
        r2,
        rmse: (ss_res / nf).sqrt(),
        e_rel_percent,
    })
}

/// Two-column CSV `id,value` (header optional).
pub fn read_id_values(path: &Path) -> Result<Vec<(String, f64)>> {
    read_table(path, 1).map(|rows| rows.into_iter().map(|(id, v)| (id, v[0])).collect())
}

/// Point coordinates `id,x,y,z` (header optional).
pub fn read_id_points(path: &Path) -> Result<Vec<(String, [f64; 3])>> {
    read_table(path, 3).map(|rows| rows.into_iter().map(|(id, v)| (id, [v[0], v[1], v[2]])).collect())
}

fn read_table(path: &Path, cols: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != cols + 1 {
            return Err(Error::Postproc(format!(
                "{}:{}: expected {} columns, found {}",
                path.display(),
                i + 1,
                cols + 1,
                f.len()
            )));
        }
        let vals: std::result::Result<Vec<f64>, _> = f[1..].iter().map(|s| s.parse::<f64>()).collect();
        match vals {
            Ok(v) => out.push((f[0].to_string(), v)),
            Err(_) if i == 0 && out.is_empty() => continue,
            Err(_) => {
                return Err(Error::Postproc(format!("{}:{}: non-numeric value", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

/// Strain, stress and principal values at a point of an active cell.
#[derive(Debug, Clone, Copy)]
pub struct PointFields {
    pub u: [f64; 3],
    pub s: f64,
    pub strain: Tensor,
    pub stress: Tensor,
    pub sigma1: f64,
    pub sigma3: f64,
    pub eps3: f64,
}

pub fn point_fields(disc: &Discretization, u: &[f64], s: &[f64], cell: usize, xi: [f64; 3], eta: f64) -> PointFields {
    let ijk = disc.cell_ijk(cell);
    let shape = {
        let mut sh = ShapeValues::new(&disc.spec());
        disc.basis.eval_into(ijk, xi, &mut sh);
        sh
    };
    let x = disc.grid.to_physical(ijk, xi);
    let strain = disc.strain_at(u, cell, &shape);
    let sv = disc.scalar_at(s, cell, &shape);
    let mat = match disc.grid.voxel_at(x) {
        Some(v) if disc.grid.voxel_inside(v) => &disc.materials.voxels[v],
        _ => &disc.materials.fictitious,
    };
    let stress = degraded_stress(&strain, sv.clamp(0.0, 1.0), mat, eta);
    let sp = principal_values(&stress).0;
    PointFields {
        u: disc.displacement_at(u, cell, &shape),
        s: sv,
        strain,
        stress,
        sigma1: sp[0],
        sigma3: sp[2],
        eps3: principal_values(&strain).0[2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn rec(step: usize, f: f64) -> ForceStrainRecord {
        ForceStrainRecord {
            step,
            applied_displacement: step as f64 * 0.01,
            reaction_force: f,
            probe_eps3: -10.0 * step as f64,
        }
    }

    #[test]
    fn principal_values_sorted() {
        let (v, _) = principal_values(&Tensor::from_diagonal(&nalgebra::Vector3::new(3.0, 1.0, 2.0)));
        assert_eq!(v, [3.0, 2.0, 1.0]);
        let (v, q) = principal_values(&(Tensor::identity() * 4.0));
        assert_eq!(v, [4.0; 3]);
        assert!((q.transpose() * q - Tensor::identity()).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn principal_reconstruction(a in prop::array::uniform6(-5.0f64..5.0), ang in prop::array::uniform3(-3.0f64..3.0)) {
            let t = Tensor::new(a[0], a[5], a[4], a[5], a[1], a[3], a[4], a[3], a[2]);
            let (v, q) = principal_values(&t);
            prop_assert!(v[0] >= v[1] && v[1] >= v[2]);
            let lam = Tensor::from_diagonal(&nalgebra::Vector3::new(v[0], v[1], v[2]));
            prop_assert!((q * lam * q.transpose() - t).amax() < 1e-10);
            let r = Rotation3::from_euler_angles(ang[0], ang[1], ang[2]).into_inner();
            let (w, _) = principal_values(&(r * t * r.transpose()));
            for i in 0..3 {
                prop_assert!((w[i] - v[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn failure_load_ignores_record_order(forces in prop::collection::vec(-100.0f64..100.0, 1..20), seed in 0u64..1000) {
            let recs: Vec<_> = forces.iter().enumerate().map(|(i, &f)| rec(i + 1, f)).collect();
            let mut shuffled = recs.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(failure_load(&recs).unwrap(), failure_load(&shuffled).unwrap());
        }
    }

    #[test]
    fn failure_load_examples() {
        let f = failure_load(&[rec(1, 100.0), rec(2, 250.0), rec(3, 240.0)]).unwrap();
        assert_eq!((f.force, f.step, f.peak_detected), (250.0, 2, true));
        let f = failure_load(&[rec(1, 100.0), rec(2, 250.0), rec(3, 250.0)]).unwrap();
        assert_eq!(f.step, 2);
        let f = failure_load(&[rec(1, 100.0), rec(2, 200.0)]).unwrap();
        assert_eq!((f.step, f.peak_detected), (2, false));
        let f = failure_load(&[rec(1, -50.0), rec(2, -80.0), rec(3, -10.0)]).unwrap();
        assert_eq!((f.force, f.step), (80.0, 2));
        assert!(failure_load(&[]).is_err());
    }

    #[test]
    fn regression_examples() {
        let x = [10.0, -20.0, 35.0, 50.0];
        let r = regression(&x, &x).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-14 && r.intercept.abs() < 1e-12);
        assert!((r.r2 - 1.0).abs() < 1e-14 && r.rmse < 1e-12 && r.e_rel_percent == 0.0);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 5.0).collect();
        let r = regression(&x, &y).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12 && (r.intercept - 5.0).abs() < 1e-10 && (r.r2 - 1.0).abs() < 1e-12);
        assert!(regression(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(regression(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn noise_floor_excludes_small_measurements() {
        let r = regression(&[1.0, 100.0, 200.0], &[5.0, 110.0, 180.0]).unwrap();
        assert!((r.e_rel_percent - 10.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.csv");
        let recs = vec![rec(1, 0.1 + 0.2), rec(2, -1e-300), ForceStrainRecord { probe_eps3: f64::NAN, ..rec(3, 7.0) }];
        write_force_strain_csv(&path, &recs).unwrap();
        let back = read_force_strain_csv(&path).unwrap();
        assert_eq!(back[..2], recs[..2]);
        assert!(back[2].probe_eps3.is_nan());
        assert_eq!(format_force_strain_csv(&back), format_force_strain_csv(&recs));
    }
}
