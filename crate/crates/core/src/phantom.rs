//! Synthetic voxel models used for testing and demonstration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ValueKind, VoxelImage};
use crate::material::{ash_to_e, e_to_gc, MaterialParams};

pub const KINDS: [&str; 4] = ["uniform-bar", "notched-plate", "sphere", "layered-bone-surrogate"];

/// Parameters shared by all phantom kinds; unused fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub kind: String,
    pub dims: [usize; 3],
    /// Voxel edge length [mm].
    pub spacing: f64,
    pub seed: u64,
    /// Ash density of the bulk material [g/cm³].
    pub density: f64,
    /// notched-plate: notch length as a fraction of the width (x).
    pub notch_length: f64,
    /// notched-plate: notch height in voxels (y).
    pub notch_voxels: usize,
    /// sphere: radius in voxels.
    pub radius_voxels: f64,
    /// layered-bone-surrogate: shell ash density.
    pub shell_density: f64,
    /// layered-bone-surrogate: core ash density (mean).
    pub core_density: f64,
    /// layered-bone-surrogate: relative amplitude of the core density noise.
    pub core_noise: f64,
    /// layered-bone-surrogate: shell thickness in voxels.
    pub shell_voxels: usize,
    /// layered-bone-surrogate: free margin around the column in voxels.
    pub margin_voxels: usize,
    /// layered-bone-surrogate: neck band [start, end) as fractions of the height.
    pub neck_band: [f64; 2],
    /// layered-bone-surrogate: Gc of the neck band relative to the shell.
    pub neck_gc_ratio: f64,
    /// Material law parameters used to size the neck band.
    pub material: MaterialParams,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            kind: "uniform-bar".into(),
            dims: [16, 16, 64],
            spacing: 0.5,
            seed: 1,
            density: 1.0,
            notch_length: 0.5,
            notch_voxels: 4,
            radius_voxels: 10.0,
            shell_density: 1.2,
            core_density: 0.25,
            core_noise: 0.1,
            shell_voxels: 2,
            margin_voxels: 2,
            neck_band: [0.45, 0.55],
            neck_gc_ratio: 0.5,
            material: MaterialParams::default(),
        }
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<VoxelImage> {
    if spec.dims.iter().any(|&d| d == 0) || !(spec.spacing > 0.0) {
        return Err(Error::Config("phantom dims must be >= 1 and spacing > 0".into()));
    }
    match spec.kind.as_str() {
        "uniform-bar" => uniform_bar(spec.dims, spec.spacing, spec.density),
        "notched-plate" => notched_plate(spec),
        "sphere" => sphere(spec.dims, spec.spacing, spec.radius_voxels, spec.density),
        "layered-bone-surrogate" => layered_bone_surrogate(spec),
        other => Err(Error::Config(format!(
            "unknown phantom kind '{other}'; available kinds: {}",
            KINDS.join(", ")
        ))),
    }
}

fn image(dims: [usize; 3], spacing: f64, values: Vec<f64>, mask: Option<Vec<bool>>) -> Result<VoxelImage> {
    VoxelImage::new(dims, [spacing; 3], [0.0; 3], ValueKind::AshDensity, values, mask)
}

fn for_each_voxel(dims: [usize; 3], mut f: impl FnMut([usize; 3])) {
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                f([i, j, k]);
            }
        }
    }
}

/// Box fully inside with constant density.
pub fn uniform_bar(dims: [usize; 3], spacing: f64, density: f64) -> Result<VoxelImage> {
    let n = dims.iter().product();
    image(dims, spacing, vec![density; n], None)
}

/// Plate in the x-y plane with a rectangular notch entering from x = 0 at
/// mid-height. Notch voxels are outside the domain.
pub fn notched_plate(spec: &PhantomSpec) -> Result<VoxelImage> {
    let d = spec.dims;
    if spec.notch_voxels == 0 || spec.notch_voxels >= d[1] || !(0.0..1.0).contains(&spec.notch_length) {
        return Err(Error::Config("notched-plate: invalid notch size".into()));
    }
    let len = (spec.notch_length * d[0] as f64).round() as usize;
    let y0 = (d[1] - spec.notch_voxels) / 2;
    let mut mask = Vec::with_capacity(d.iter().product());
    for_each_voxel(d, |[i, j, _]| mask.push(!(i < len && j >= y0 && j < y0 + spec.notch_voxels)));
    image(d, spec.spacing, vec![spec.density; mask.len()], Some(mask))
}

/// Ball of the given radius (in voxels) centered in the box.
pub fn sphere(dims: [usize; 3], spacing: f64, radius_voxels: f64, density: f64) -> Result<VoxelImage> {
    let c: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 / 2.0);
    let mut mask = Vec::with_capacity(dims.iter().product());
    for_each_voxel(dims, |ijk| {
        let r2: f64 = (0..3).map(|a| (ijk[a] as f64 + 0.5 - c[a]).powi(2)).sum();
        mask.push(r2 <= radius_voxels * radius_voxels);
    });
    image(dims, spacing, vec![density; mask.len()], Some(mask))
}

/// Ash density whose toughness equals `gc` under the cortical law.
fn cortical_density_for_gc(gc: f64, m: &MaterialParams) -> f64 {
    let e = m.e0 * (gc / m.gc0).powf(1.0 / m.beta);
    (e / 10200.0).powf(1.0 / 2.01)
}

/// Square column along z with a stiff shell, a soft noisy core and a
/// weak band across the full section. The column is surrounded by a margin
/// of outside voxels in x and y.
pub fn layered_bone_surrogate(spec: &PhantomSpec) -> Result<VoxelImage> {
    let d = spec.dims;
    let m = spec.margin_voxels;
    let t = spec.shell_voxels;
    if 2 * (m + t) >= d[0].min(d[1]) {
        return Err(Error::Config("layered-bone-surrogate: margin and shell leave no core".into()));
    }
    if !(spec.neck_gc_ratio > 0.0 && spec.neck_gc_ratio <= 1.0) {
        return Err(Error::Config("layered-bone-surrogate: neck_gc_ratio must lie in (0, 1]".into()));
    }
    let [b0, b1] = spec.neck_band;
    if !(0.0 <= b0 && b0 < b1 && b1 <= 1.0) {
        return Err(Error::Config("layered-bone-surrogate: neck_band must satisfy 0 <= start < end <= 1".into()));
    }
    let mp = &spec.material;
    let shell_gc = e_to_gc(ash_to_e(spec.shell_density), mp.gc0, mp.e0, mp.beta);
    let neck_density = cortical_density_for_gc(spec.neck_gc_ratio * shell_gc, mp);
    if neck_density <= 0.486 {
        return Err(Error::Config(format!(
            "layered-bone-surrogate: neck density {neck_density:.3} falls below the cortical range; raise neck_gc_ratio"
        )));
    }
    let (z0, z1) = ((b0 * d[2] as f64).round() as usize, (b1 * d[2] as f64).round() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = d.iter().product();
    let mut values = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for_each_voxel(d, |[i, j, k]| {
        // draw for every voxel so the sequence does not depend on the layout
        let noise: f64 = rng.gen_range(-1.0..1.0);
        let inside = i >= m && i < d[0] - m && j >= m && j < d[1] - m;
        let in_shell = inside && (i - m).min(d[0] - m - 1 - i).min(j - m).min(d[1] - m - 1 - j) < t;
        let v = if !inside {
            0.0
        } else if k >= z0 && k < z1 {
            neck_density
        } else if in_shell {
            spec.shell_density
        } else {
            spec.core_density * (1.0 + spec.core_noise * noise)
        };
        values.push(v);
        mask.push(inside);
    });
    image(d, spec.spacing, values, Some(mask))
}
