//! Run configuration (TOML).
//!
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory of the configuration file, and every referenced file must exist
//! when the configuration is loaded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{Constraint, ReactionMethod};
use crate::basis::{BasisFamily, BasisSpec};
use crate::error::{Error, Result};
use crate::image::HuCalibration;
use crate::material::MaterialParams;
use crate::quadrature::QuadratureOptions;
use crate::solver::{LoadSchedule, StaggeredConfig};
use crate::sparse::LinearSolverConfig;
use crate::surface::Region;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image: ImageConfig,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub material: MaterialConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub loading: LoadingConfig,
    #[serde(default)]
    pub postproc: PostprocConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub boundary: Vec<BoundaryConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_boundary: Vec<PhaseBoundaryConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    /// JSON sidecar of the voxel image.
    pub sidecar: PathBuf,
    /// Overrides the sidecar threshold when the image has no mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inside_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizationConfig {
    /// Cell edge length [mm].
    pub h: f64,
    pub p: usize,
    pub basis: BasisFamily,
    pub depth: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points_per_axis: Option<usize>,
    pub subdivide_heterogeneous: bool,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        let q = QuadratureOptions::default();
        DiscretizationConfig {
            h: 1.25,
            p: 3,
            basis: BasisFamily::BSpline,
            depth: q.depth,
            points_per_axis: None,
            subdivide_heterogeneous: q.subdivide_heterogeneous,
        }
    }
}

impl DiscretizationConfig {
    pub fn basis_spec(&self) -> Result<BasisSpec> {
        BasisSpec::new(self.basis, self.p)
    }

    pub fn quadrature(&self) -> QuadratureOptions {
        QuadratureOptions {
            depth: self.depth,
            points_per_axis: self.points_per_axis,
            subdivide_heterogeneous: self.subdivide_heterogeneous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub gc0: f64,
    pub e0: f64,
    pub beta: f64,
    pub nu: f64,
    pub eta: f64,
    pub e_min: f64,
    pub alpha_fcm: f64,
    /// Overrides the calibration stored with an HU image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hu_calibration: Option<HuCalibration>,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        let m = MaterialParams::default();
        MaterialConfig {
            gc0: m.gc0,
            e0: m.e0,
            beta: m.beta,
            nu: m.nu,
            eta: m.eta,
            e_min: m.e_min,
            alpha_fcm: crate::grid::DEFAULT_ALPHA_FCM,
            hu_calibration: None,
        }
    }
}

impl MaterialConfig {
    pub fn params(&self) -> MaterialParams {
        MaterialParams {
            gc0: self.gc0,
            e0: self.e0,
            beta: self.beta,
            nu: self.nu,
            eta: self.eta,
            e_min: self.e_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub l0: f64,
    pub eps: f64,
    pub n_stag: usize,
    pub linear: LinearSolverConfig,
    pub schedule: LoadSchedule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = StaggeredConfig::default();
        SolverConfig {
            l0: s.l0,
            eps: s.eps,
            n_stag: s.n_stag,
            linear: LinearSolverConfig::default(),
            schedule: LoadSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub name: String,
    pub region: Region,
    pub constraint: Constraint,
    /// Penalty factor; defaults to 1e3 · max E / h.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseBoundaryConfig {
    pub region: Region,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingConfig {
    /// Name of the boundary whose reaction force is recorded.
    pub reaction_boundary: String,
    pub component: usize,
    /// +1 for tension, −1 for compression.
    #[serde(default = "one")]
    pub sign: f64,
    #[serde(default)]
    pub reaction_method: ReactionMethod,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    pub iso_low: f64,
    pub iso_high: f64,
    /// Sub-cells per axis for the iso-volume; defaults to 2(p+1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iso_samples: Option<usize>,
    /// Displacement magnification for the iso-volume mesh.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warp_factor: Option<f64>,
    pub vtk: bool,
    pub vtk_subdivisions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured: Option<MeasuredConfig>,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            probe: None,
            iso_low: 0.0,
            iso_high: 0.03,
            iso_samples: None,
            warp_factor: None,
            vtk: true,
            vtk_subdivisions: 1,
            measured: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub center: [f64; 3],
    #[serde(default = "default_probe_radius")]
    pub radius: f64,
}

fn default_probe_radius() -> f64 {
    0.5
}

/// Strain gauge data for validation in the elastic range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredConfig {
    /// `id,value` with the measured ε₃ [µstrain].
    pub values: PathBuf,
    /// `id,x,y,z` [mm].
    pub points: PathBuf,
    /// Reaction force [N] at which the strains were measured.
    pub force: f64,
    #[serde(default = "default_probe_radius")]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("output"),
            checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    L0,
    Beta,
    Gc0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    #[default]
    FailureLoad,
    CurveRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Reference force-strain curve.
    pub reference: PathBuf,
    #[serde(default)]
    pub metric: SweepMetric,
}

impl RunConfig {
    /// Parse, resolve relative paths against `base` and validate.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate().map_err(|e| with_line(e, text))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.image.sidecar);
        fix(&mut self.output.dir);
        if let Some(m) = &mut self.postproc.measured {
            fix(&mut m.values);
            fix(&mut m.points);
        }
        if let Some(s) = &mut self.sweep {
            fix(&mut s.reference);
        }
        let regions = self
            .boundary
            .iter_mut()
            .map(|b| &mut b.region)
            .chain(self.phase_boundary.iter_mut().map(|b| &mut b.region));
        for r in regions {
            if let Region::Triangles { path: Some(p), .. } = r {
                if Path::new(p.as_str()).is_relative() {
                    *p = base.join(p.as_str()).to_string_lossy().into_owned();
                }
            }
        }
    }

    /// Check every numeric constraint and referenced file. Errors start with
    /// the dotted key they refer to.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        must_exist("image.sidecar", &self.image.sidecar)?;
        let d = &self.discretization;
        if !(d.h > 0.0 && d.h.is_finite()) {
            return bad("discretization.h", format!("must be > 0, got {}", d.h));
        }
        if let Err(e) = d.basis_spec() {
            return bad("discretization.p", e.to_string());
        }
        if d.depth > 6 {
            return bad("discretization.depth", format!("must be <= 6, got {}", d.depth));
        }
        if d.points_per_axis == Some(0) {
            return bad("discretization.points_per_axis", "must be >= 1".into());
        }
        if let Err(Error::Config(m)) = self.material.params().validate() {
            let key = m.split_whitespace().next().unwrap_or("material").to_string();
            return bad(&key, m);
        }
        let a = self.material.alpha_fcm;
        if !(a > 0.0 && a <= 1.0) {
            return bad("material.alpha_fcm", format!("must lie in (0, 1], got {a}"));
        }
        let s = &self.solver;
        let stag = StaggeredConfig {
            eps: s.eps,
            n_stag: s.n_stag,
            eta: self.material.eta,
            l0: s.l0,
        };
        if let Err(Error::Config(m)) = stag.validate(d.h) {
            let key = m.split(' ').next().unwrap_or("solver").to_string();
            return bad(&key, m);
        }
        if let Err(Error::Config(m)) = s.schedule.validate() {
            return bad("solver.schedule", m);
        }
        if !(s.linear.rtol > 0.0) || s.linear.max_iter == 0 {
            return bad("solver.linear", "rtol must be > 0 and max_iter >= 1".into());
        }
        if self.boundary.is_empty() {
            return bad("boundary", "at least one boundary condition is required".into());
        }
        for (i, b) in self.boundary.iter().enumerate() {
            if self.boundary[..i].iter().any(|o| o.name == b.name) {
                return bad(&format!("boundary.{}", b.name), "duplicate boundary name".into());
            }
            check_region(&format!("boundary.{}.region", b.name), &b.region)?;
            if let Some(p) = b.penalty {
                if !(p > 0.0 && p.is_finite()) {
                    return bad(&format!("boundary.{}.penalty", b.name), format!("must be > 0, got {p}"));
                }
            }
            if let Constraint::Component { component, .. } | Constraint::Loaded { component, .. } = b.constraint {
                if component > 2 {
                    return bad(&format!("boundary.{}.constraint.component", b.name), "must be 0, 1 or 2".into());
                }
            }
        }
        for (i, b) in self.phase_boundary.iter().enumerate() {
            check_region(&format!("phase_boundary.{i}.region"), &b.region)?;
            if !(0.0..=1.0).contains(&b.value) {
                return bad(&format!("phase_boundary.{i}.value"), "must lie in [0, 1]".into());
            }
        }
        let l = &self.loading;
        if !self.boundary.iter().any(|b| b.name == l.reaction_boundary) {
            return bad("loading.reaction_boundary", format!("no boundary named '{}'", l.reaction_boundary));
        }
        if l.component > 2 {
            return bad("loading.component", "must be 0, 1 or 2".into());
        }
        if l.sign != 1.0 && l.sign != -1.0 {
            return bad("loading.sign", format!("must be 1 or -1, got {}", l.sign));
        }
        let p = &self.postproc;
        if !(0.0 <= p.iso_low && p.iso_low < p.iso_high && p.iso_high <= 1.0) {
            return bad("postproc.iso_low", "thresholds must satisfy 0 <= iso_low < iso_high <= 1".into());
        }
        if p.iso_samples == Some(0) || p.vtk_subdivisions == 0 {
            return bad("postproc.iso_samples", "sampling counts must be >= 1".into());
        }
        if let Some(pr) = &p.probe {
            if !(pr.radius >= 0.0) {
                return bad("postproc.probe.radius", "must be >= 0".into());
            }
        }
        if let Some(m) = &p.measured {
            must_exist("postproc.measured.values", &m.values)?;
            must_exist("postproc.measured.points", &m.points)?;
            if !(m.force.is_finite() && m.force != 0.0) {
                return bad("postproc.measured.force", "must be finite and non-zero".into());
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return bad("sweep.values", "candidate list is empty".into());
            }
            if sw.parameter == SweepParameter::L0 {
                if let Some(v) = sw.values.iter().find(|&&v| !(v >= d.h)) {
                    return bad("sweep.values", format!("l0 candidate {v} is below the cell size {}", d.h));
                }
            }
            must_exist("sweep.reference", &sw.reference)?;
        }
        Ok(())
    }

    /// Copy with one sweep parameter replaced.
    pub fn with_parameter(&self, p: SweepParameter, value: f64) -> RunConfig {
        let mut c = self.clone();
        match p {
            SweepParameter::L0 => c.solver.l0 = value,
            SweepParameter::Beta => c.material.beta = value,
            SweepParameter::Gc0 => c.material.gc0 = value,
        }
        c
    }

    pub fn staggered(&self) -> StaggeredConfig {
        StaggeredConfig {
            eps: self.solver.eps,
            n_stag: self.solver.n_stag,
            eta: self.material.eta,
            l0: self.solver.l0,
        }
    }
}

fn must_exist(key: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: file not found: {}", p.display())))
    }
}

fn check_region(key: &str, r: &Region) -> Result<()> {
    match r {
        Region::Triangles { path: Some(p), .. } => must_exist(&format!("{key}.path"), Path::new(p)),
        Region::Triangles { path: None, triangles } if triangles.is_empty() => {
            Err(Error::Config(format!("{key}: a triangle region needs a path")))
        }
        Region::BoxFace { bounds: Some(b), .. } if b.iter().any(|r| !(r[0] < r[1])) => {
            Err(Error::Config(format!("{key}.bounds: each range must satisfy lo < hi")))
        }
        _ => Ok(()),
    }
}

/// Append the line of the offending key, when it can be found in `text`.
fn with_line(e: Error, text: &str) -> Error {
    let Error::Config(msg) = e else { return e };
    let key = msg.split(':').next().unwrap_or("");
    match find_key_line(text, key) {
        Some(line) => Error::Config(format!("line {line}: {msg}")),
        None => Error::Config(msg),
    }
}

/// 1-based line of a dotted key such as `discretization.h`. Falls back to
/// the table header when the key itself is absent.
pub fn find_key_line(text: &str, dotted: &str) -> Option<usize> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.len() < 2 {
        return None;
    }
    let (table, key) = (parts[..parts.len() - 1].join("."), parts[parts.len() - 1]);
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table {
                header_line = Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        if (current == table && k == key) || (current.is_empty() && k == dotted) {
            return Some(i + 1);
        }
    }
    header_line
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> String {
        fs::write(dir.join("img.json"), "{}").unwrap();
        r#"
[image]
sidecar = "img.json"

[discretization]
h = 1.0
p = 2

[solver]
l0 = 2.0

[solver.schedule]
u_large = 0.01
u_med = 0.005
u_small = 0.001

[loading]
reaction_boundary = "top"
component = 2
sign = -1

[[boundary]]
name = "bottom"
region = { type = "box_face", face = "z_min" }
constraint = { kind = "fixed" }

[[boundary]]
name = "top"
region = { type = "box_face", face = "z_max", physical_only = false }
constraint = { kind = "loaded", component = 2, scale = 1.0 }
penalty = 1e5
"#
        .to_string()
    }

    #[test]
    fn parses_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml_str(&sample(dir.path()), dir.path()).unwrap();
        assert_eq!(cfg.discretization.p, 2);
        assert_eq!(cfg.material.gc0, 7.0);
        assert_eq!(cfg.boundary[1].penalty, Some(1e5));
        let again = RunConfig::from_toml_str(&cfg.to_toml(), dir.path()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = sample(dir.path()).replace("l0 = 2.0", "l0 = 2.0\nlo = 3.0");
        let e = RunConfig::from_toml_str(&text, dir.path()).unwrap_err().to_string();
        assert!(e.contains("lo"), "{e}");
    }

    #[test]
    fn errors_name_the_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let text = sample(dir.path()).replace("h = 1.0", "h = -1.0");
        let e = RunConfig::from_toml_str(&text, dir.path()).unwrap_err().to_string();
        assert!(e.contains("discretization.h") && e.contains("line 6"), "{e}");

        let text = sample(dir.path()).replace("img.json", "missing.json");
        let e = RunConfig::from_toml_str(&text, dir.path()).unwrap_err().to_string();
        assert!(e.contains("image.sidecar") && e.contains("line 3"), "{e}");

        let text = sample(dir.path()).replace("l0 = 2.0", "l0 = 0.5");
        let e = RunConfig::from_toml_str(&text, dir.path()).unwrap_err().to_string();
        assert!(e.contains("solver.l0"), "{e}");
    }

    #[test]
    fn sweep_parameter_substitution() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml_str(&sample(dir.path()), dir.path()).unwrap();
        assert_eq!(cfg.with_parameter(SweepParameter::L0, 2.25).solver.l0, 2.25);
        assert_eq!(cfg.with_parameter(SweepParameter::Beta, 1.0).material.beta, 1.0);
    }
}
