//! Gauss-Legendre rules and composed sub-cell quadrature for cut cells.

use serde::{Deserialize, Serialize};

use crate::grid::EmbeddedGrid;

/// Marker for quadrature points outside the image.
pub const NO_VOXEL: u32 = u32::MAX;

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "a Gauss rule needs at least one point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        // Chebyshev initial guess, then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureOptions {
    /// Cut cells are split into 2^depth sub-cells per axis.
    pub depth: u32,
    /// Gauss points per axis; `None` uses p + 1.
    pub points_per_axis: Option<usize>,
    /// Also subdivide uncut cells whose voxels carry different values.
    pub subdivide_heterogeneous: bool,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            depth: 2,
            points_per_axis: None,
            subdivide_heterogeneous: true,
        }
    }
}

/// Quadrature points of all active cells, stored flat.
///
/// Points of active cell `c` occupy `offsets[c]..offsets[c + 1]`. Local
/// coordinates live in the unit cell [0,1]³ and weights are in that
/// reference measure, so an uncut cell's weights sum to 1.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub depth: u32,
    pub points_per_axis: usize,
    pub offsets: Vec<usize>,
    pub local: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Voxel owning each point (material index), `NO_VOXEL` outside the image.
    pub voxel: Vec<u32>,
}

pub fn build_quadrature(grid: &EmbeddedGrid, depth: u32) -> QuadratureRule {
    build_quadrature_with(
        grid,
        &QuadratureOptions {
            depth,
            ..QuadratureOptions::default()
        },
    )
}

pub fn build_quadrature_with(grid: &EmbeddedGrid, opts: &QuadratureOptions) -> QuadratureRule {
    let ng = opts.points_per_axis.unwrap_or(grid.order + 1).max(1);
    let (gx, gw) = gauss_legendre(ng);

    let mut rule = QuadratureRule {
        depth: opts.depth,
        points_per_axis: ng,
        offsets: Vec::with_capacity(grid.num_active() + 1),
        local: Vec::new(),
        weights: Vec::new(),
        alpha: Vec::new(),
        voxel: Vec::new(),
    };
    rule.offsets.push(0);

    for (a, &c) in grid.cells.iter().enumerate() {
        let ijk = grid.cell_ijk(c);
        let split = grid.cut[a] || (opts.subdivide_heterogeneous && grid.heterogeneous[a]);
        let nsub = if split { 1usize << opts.depth } else { 1 };
        let sub = 1.0 / nsub as f64;
        let sub_w = sub * sub * sub;
        for sk in 0..nsub {
            for sj in 0..nsub {
                for si in 0..nsub {
                    let corner = [si as f64 * sub, sj as f64 * sub, sk as f64 * sub];
                    for (&zk, &wk) in gx.iter().zip(&gw) {
                        for (&yj, &wj) in gx.iter().zip(&gw) {
                            for (&xi, &wi) in gx.iter().zip(&gw) {
                                let local = [
                                    corner[0] + xi * sub,
                                    corner[1] + yj * sub,
                                    corner[2] + zk * sub,
                                ];
                                let x = grid.to_physical(ijk, local);
                                let voxel = grid.voxel_at(x);
                                let alpha = match voxel {
                                    Some(v) if grid.voxel_inside(v) => 1.0,
                                    _ => grid.alpha_fcm,
                                };
                                rule.local.push(local);
                                rule.weights.push(wi * wj * wk * sub_w);
                                rule.alpha.push(alpha);
                                rule.voxel.push(voxel.map_or(NO_VOXEL, |v| v as u32));
                            }
                        }
                    }
                }
            }
        }
        rule.offsets.push(rule.local.len());
    }
    rule
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn cell_range(&self, active: usize) -> std::ops::Range<usize> {
        self.offsets[active]..self.offsets[active + 1]
    }

    /// Σ w·α over all points, in physical volume units.
    pub fn alpha_volume(&self, h: f64) -> f64 {
        let s: f64 = self.weights.iter().zip(&self.alpha).map(|(w, a)| w * a).sum();
        s * h * h * h
    }

    /// Σ w over points with α = 1, in physical volume units.
    pub fn physical_volume(&self, h: f64) -> f64 {
        let s: f64 = self
            .weights
            .iter()
            .zip(&self.alpha)
            .filter(|(_, &a)| a == 1.0)
            .map(|(w, _)| w)
            .sum();
        s * h * h * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::image::{ValueKind, VoxelImage};

    #[test]
    fn gauss_rules_integrate_monomials() {
        for n in 1..=8 {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for d in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(d as i32)).sum();
                let exact = 1.0 / (d as f64 + 1.0);
                assert!((q - exact).abs() < 1e-13 * exact.max(1.0), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn uncut_cell_weights_sum_to_one_at_any_depth() {
        let img = VoxelImage::new([2, 2, 2], [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; 8], None)
            .unwrap();
        let g = build_grid(&img, 2.0, 3).unwrap();
        for depth in 0..4 {
            let q = build_quadrature(&g, depth);
            assert_eq!(q.len(), 64);
            assert!((q.alpha_volume(2.0) - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn half_cut_cell() {
        let mask: Vec<bool> = (0..8).map(|v| v % 2 == 0).collect();
        let img = VoxelImage::new([2, 2, 2], [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; 8], Some(mask))
            .unwrap();
        let g = build_grid(&img, 2.0, 2).unwrap();
        assert!(g.cut[0]);
        let q = build_quadrature(&g, 1);
        let expected = 4.0 * (1.0 + 1e-6);
        assert!((q.alpha_volume(2.0) - expected).abs() < 1e-12);
        assert!(q.weights.iter().all(|&w| w > 0.0));
        assert!(q.alpha.iter().all(|&a| a == 1.0 || a == 1e-6));
    }
}
