//! Constitutive laws: density-to-modulus mapping, the density-dependent
//! fracture toughness, and the volumetric-deviatoric split of the elastic
//! energy with quadratic degradation.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ValueKind, VoxelImage};
use crate::quadrature::NO_VOXEL;

/// Symmetric second-order tensor.
pub type Tensor = Matrix3<f64>;

/// K2HPO4-equivalent mineral density to ash density [g/cm³].
/// Negative densities are clamped to zero first.
pub fn hu_to_ash(rho_k2hpo4: f64) -> f64 {
    0.877 * 1.15 * rho_k2hpo4.max(0.0) + 0.08
}

/// Young's modulus [MPa] of bone with ash density `rho` [g/cm³].
///
/// Cortical law above 0.486, trabecular plateau on (0.3, 0.486], trabecular
/// power law below. The jump at 0.486 is part of the law.
pub fn ash_to_e(rho: f64) -> f64 {
    let rho = rho.max(0.0);
    if rho > 0.486 {
        10200.0 * rho.powf(2.01)
    } else if rho > 0.3 {
        2398.0
    } else {
        33900.0 * rho.powf(2.2)
    }
}

/// Critical energy release rate [N/mm] from the local modulus.
pub fn e_to_gc(e: f64, gc0: f64, e0: f64, beta: f64) -> f64 {
    gc0 * (e / e0).powf(beta)
}

/// Quadratic degradation g(s) = (1-η)s² + η.
#[inline]
pub fn degradation(s: f64, eta: f64) -> f64 {
    (1.0 - eta) * s * s + eta
}

#[inline]
pub fn degradation_derivative(s: f64, eta: f64) -> f64 {
    2.0 * (1.0 - eta) * s
}

/// Dissipation function w(s) = 1 - s².
#[inline]
pub fn dissipation(s: f64) -> f64 {
    1.0 - s * s
}

/// Parameters of the material laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialParams {
    /// Base toughness Gc0 [N/mm]; `inf` disables fracture.
    pub gc0: f64,
    /// Reference modulus E0 [MPa].
    pub e0: f64,
    /// Power-law exponent linking Gc to E.
    pub beta: f64,
    pub nu: f64,
    /// Residual stiffness η.
    pub eta: f64,
    /// Lower bound on E [MPa] for voxels whose density maps to zero stiffness.
    pub e_min: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            gc0: 7.0,
            e0: 20000.0,
            beta: 0.8,
            nu: 0.3,
            eta: 1.0e-5,
            e_min: 1.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gc0 > 0.0) {
            return Err(Error::Config(format!("material.gc0 must be > 0, got {}", self.gc0)));
        }
        if !(self.e0 > 0.0 && self.e0.is_finite()) {
            return Err(Error::Config(format!("material.e0 must be > 0, got {}", self.e0)));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("material.beta must be finite".into()));
        }
        if !(self.nu > 0.0 && self.nu < 0.5) {
            return Err(Error::Config(format!("material.nu must lie in (0, 0.5), got {}", self.nu)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("material.eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.e_min > 0.0) {
            return Err(Error::Config(format!("material.e_min must be > 0, got {}", self.e_min)));
        }
        Ok(())
    }
}

/// Elastic and fracture constants at one material point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialPoint {
    pub e: f64,
    pub nu: f64,
    pub lambda: f64,
    pub mu: f64,
    pub kappa0: f64,
    pub gc: f64,
    pub rho_ash: f64,
}

impl MaterialPoint {
    pub fn new(e: f64, nu: f64, gc: f64, rho_ash: f64) -> Self {
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        MaterialPoint {
            e,
            nu,
            lambda,
            mu,
            kappa0: lambda + 2.0 * mu / 3.0,
            gc,
            rho_ash,
        }
    }

    pub fn from_ash(rho_ash: f64, params: &MaterialParams) -> Self {
        let e = ash_to_e(rho_ash).max(params.e_min);
        let gc = e_to_gc(e, params.gc0, params.e0, params.beta);
        Self::new(e, params.nu, gc, rho_ash)
    }
}

/// Tensile/compressive energy parts and the undegraded stress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEnergies {
    pub psi_pos: f64,
    pub psi_neg: f64,
    pub stress: Tensor,
}

#[inline]
fn macaulay_pos(x: f64) -> f64 {
    0.5 * (x + x.abs())
}

#[inline]
fn macaulay_neg(x: f64) -> f64 {
    0.5 * (x - x.abs())
}

pub fn split_energy(strain: &Tensor, m: &MaterialPoint) -> SplitEnergies {
    let tr = strain.trace();
    let dev = strain - Tensor::identity() * (tr / 3.0);
    let dev_sq = dev.component_mul(&dev).sum();
    let tp = macaulay_pos(tr);
    let tn = macaulay_neg(tr);
    SplitEnergies {
        psi_pos: 0.5 * m.kappa0 * tp * tp + m.mu * dev_sq,
        psi_neg: 0.5 * m.kappa0 * tn * tn,
        stress: Tensor::identity() * (m.kappa0 * tr) + dev * (2.0 * m.mu),
    }
}

/// σ = g(s)(κ₀⟨tr ε⟩₊ I + 2μ ε_dev) + κ₀⟨tr ε⟩₋ I.
pub fn degraded_stress(strain: &Tensor, s: f64, m: &MaterialPoint, eta: f64) -> Tensor {
    let tr = strain.trace();
    let dev = strain - Tensor::identity() * (tr / 3.0);
    let g = degradation(s, eta);
    (Tensor::identity() * (m.kappa0 * macaulay_pos(tr)) + dev * (2.0 * m.mu)) * g
        + Tensor::identity() * (m.kappa0 * macaulay_neg(tr))
}

/// Ψ⁺ from a strain in Voigt order (xx, yy, zz, yz, xz, xy) with
/// tensor (not engineering) shear components.
#[inline]
pub fn psi_pos_voigt(e: &[f64; 6], m: &MaterialPoint) -> f64 {
    let tr = e[0] + e[1] + e[2];
    let t3 = tr / 3.0;
    let d0 = e[0] - t3;
    let d1 = e[1] - t3;
    let d2 = e[2] - t3;
    let dev_sq = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * (e[3] * e[3] + e[4] * e[4] + e[5] * e[5]);
    let tp = macaulay_pos(tr);
    0.5 * m.kappa0 * tp * tp + m.mu * dev_sq
}

/// Isotropic tangent (λ_eff, μ_eff) of the degraded split law for a strain
/// with trace `tr`: σ = λ_eff tr(ε) I + 2 μ_eff ε. A zero trace takes the
/// tensile branch.
#[inline]
pub fn split_tangent(tr: f64, g: f64, m: &MaterialPoint) -> (f64, f64) {
    let bulk = if tr >= 0.0 { g * m.kappa0 } else { m.kappa0 };
    (bulk - 2.0 / 3.0 * g * m.mu, g * m.mu)
}

/// Material lookup per voxel.
#[derive(Debug, Clone)]
pub struct MaterialTable {
    pub params: MaterialParams,
    pub voxels: Vec<MaterialPoint>,
    /// Used at points outside the physical domain or the image.
    pub fictitious: MaterialPoint,
}

impl MaterialTable {
    pub fn from_image(image: &VoxelImage, params: MaterialParams) -> Result<Self> {
        params.validate()?;
        let to_ash: Box<dyn Fn(f64) -> f64> = match image.kind {
            ValueKind::AshDensity => Box::new(|v: f64| v.max(0.0)),
            ValueKind::MineralDensity => Box::new(hu_to_ash),
            ValueKind::Hu => {
                let cal = image.hu_calibration.ok_or_else(|| {
                    Error::Config("HU image requires hu_calibration (slope, intercept)".into())
                })?;
                Box::new(move |v: f64| hu_to_ash(cal.apply(v)))
            }
        };
        let voxels: Vec<MaterialPoint> = image
            .values
            .iter()
            .map(|&v| MaterialPoint::from_ash(to_ash(v), &params))
            .collect();
        let fictitious = voxels
            .iter()
            .enumerate()
            .filter(|(i, _)| image.is_inside(*i))
            .map(|(_, m)| *m)
            .max_by(|a, b| a.e.total_cmp(&b.e))
            .ok_or(Error::EmptyDomain)?;
        Ok(MaterialTable { params, voxels, fictitious })
    }

    /// Homogeneous table: every voxel gets the same modulus and toughness.
    pub fn uniform(len: usize, e: f64, gc: f64, params: MaterialParams) -> Self {
        let m = MaterialPoint::new(e, params.nu, gc, f64::NAN);
        MaterialTable {
            params,
            voxels: vec![m; len],
            fictitious: m,
        }
    }

    /// Material of a quadrature point given its voxel and α.
    #[inline]
    pub fn at(&self, voxel: u32, alpha: f64) -> &MaterialPoint {
        if voxel == NO_VOXEL || alpha < 1.0 {
            &self.fictitious
        } else {
            &self.voxels[voxel as usize]
        }
    }

    pub fn max_e(&self) -> f64 {
        self.voxels.iter().map(|m| m.e).fold(self.fictitious.e, f64::max)
    }

    pub fn min_gc(&self) -> f64 {
        self.voxels.iter().map(|m| m.gc).fold(self.fictitious.gc, f64::min)
    }
}
