//! Embedded Cartesian grid over the image bounding box.
//!
//! Only cells overlapping at least one inside voxel are kept. Cells that also
//! overlap outside voxels, or stick out of the image, are flagged as cut and
//! receive sub-cell quadrature.

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::image::VoxelImage;

/// Default penalization of the fictitious domain.
pub const DEFAULT_ALPHA_FCM: f64 = 1.0e-6;

const OVERLAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct EmbeddedGrid {
    /// Cell edge length [mm].
    pub h: f64,
    /// Polynomial order of the discretization built on this grid.
    pub order: usize,
    /// Number of cells per axis covering the image box.
    pub n_cells: [usize; 3],
    /// Grid box; starts at the image origin and may extend past the image.
    pub bounding_box: Aabb,
    pub image_box: Aabb,
    pub alpha_fcm: f64,
    /// Linear indices (x fastest) of active cells, ascending.
    pub cells: Vec<usize>,
    /// Per active cell: overlaps the fictitious domain.
    pub cut: Vec<bool>,
    /// Per active cell: overlaps inside voxels with different values.
    pub heterogeneous: Vec<bool>,
    lookup: Vec<u32>,
    image_spacing: [f64; 3],
    image_dims: [usize; 3],
    mask: Option<Vec<bool>>,
}

const INACTIVE: u32 = u32::MAX;

/// Build the embedded grid with default α.
pub fn build_grid(image: &VoxelImage, h: f64, order: usize) -> Result<EmbeddedGrid> {
    EmbeddedGrid::new(image, h, order, DEFAULT_ALPHA_FCM)
}

impl EmbeddedGrid {
    pub fn new(image: &VoxelImage, h: f64, order: usize, alpha_fcm: f64) -> Result<Self> {
        image.validate()?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("cell size h must be > 0, got {h}")));
        }
        if order < 1 {
            return Err(Error::Config("polynomial order p must be >= 1".into()));
        }
        if !(alpha_fcm > 0.0 && alpha_fcm <= 1.0) {
            return Err(Error::Config(format!("alpha_fcm must lie in (0, 1], got {alpha_fcm}")));
        }
        if image.inside_count() == 0 {
            return Err(Error::EmptyDomain);
        }

        let image_box = image.bounding_box();
        let extent = image_box.extent();
        let n_cells: [usize; 3] =
            std::array::from_fn(|a| ((extent[a] / h) - OVERLAP_TOL).ceil().max(1.0) as usize);
        let grid_max = std::array::from_fn(|a| image_box.min[a] + n_cells[a] as f64 * h);
        let n_total = n_cells.iter().product::<usize>();
        if n_total >= INACTIVE as usize {
            return Err(Error::Config(format!("grid with {n_total} cells is too large")));
        }

        let mut grid = EmbeddedGrid {
            h,
            order,
            n_cells,
            bounding_box: Aabb::new(image_box.min, grid_max),
            image_box,
            alpha_fcm,
            cells: Vec::new(),
            cut: Vec::new(),
            heterogeneous: Vec::new(),
            lookup: vec![INACTIVE; n_total],
            image_spacing: image.spacing,
            image_dims: image.dims,
            mask: image.mask.clone(),
        };

        let mut is_active = vec![false; n_total];
        let [nx, ny, nz] = image.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = image.linear_index([i, j, k]);
                    if !image.is_inside(v) {
                        continue;
                    }
                    let ranges = grid.cells_overlapping_voxel([i, j, k]);
                    for ck in ranges[2].clone() {
                        for cj in ranges[1].clone() {
                            for ci in ranges[0].clone() {
                                is_active[grid.linear_cell([ci, cj, ck])] = true;
                            }
                        }
                    }
                }
            }
        }

        for (c, &active) in is_active.iter().enumerate() {
            if active {
                grid.lookup[c] = grid.cells.len() as u32;
                grid.cells.push(c);
            }
        }

        let flags: Vec<(bool, bool)> = grid
            .cells
            .iter()
            .map(|&c| grid.classify_cell(image, grid.cell_ijk(c)))
            .collect();
        grid.cut = flags.iter().map(|f| f.0).collect();
        grid.heterogeneous = flags.iter().map(|f| f.1).collect();
        log::debug!(
            "grid: {} x {} x {} cells, {} active, {} cut",
            n_cells[0],
            n_cells[1],
            n_cells[2],
            grid.cells.len(),
            grid.cut.iter().filter(|&&c| c).count()
        );
        Ok(grid)
    }

    pub fn num_active(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn linear_cell(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.n_cells[0] * (ijk[1] + self.n_cells[1] * ijk[2])
    }

    #[inline]
    pub fn cell_ijk(&self, linear: usize) -> [usize; 3] {
        let nx = self.n_cells[0];
        let ny = self.n_cells[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    /// Active index of a cell, if active.
    #[inline]
    pub fn active_index(&self, ijk: [usize; 3]) -> Option<usize> {
        let l = self.lookup[self.linear_cell(ijk)];
        (l != INACTIVE).then_some(l as usize)
    }

    /// Lower corner of cell `ijk`.
    #[inline]
    pub fn cell_origin(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.bounding_box.min[a] + ijk[a] as f64 * self.h)
    }

    pub fn cell_box(&self, ijk: [usize; 3]) -> Aabb {
        let lo = self.cell_origin(ijk);
        Aabb::new(lo, std::array::from_fn(|a| lo[a] + self.h))
    }

    /// Map a local coordinate in [0,1]³ of cell `ijk` to physical space.
    #[inline]
    pub fn to_physical(&self, ijk: [usize; 3], xi: [f64; 3]) -> [f64; 3] {
        let lo = self.cell_origin(ijk);
        std::array::from_fn(|a| lo[a] + xi[a] * self.h)
    }

    /// Cell containing `x` and the local coordinate inside it. Points on a
    /// shared face go to the lower-index cell.
    pub fn locate(&self, x: [f64; 3]) -> Option<([usize; 3], [f64; 3])> {
        if !self.bounding_box.contains(x) {
            return None;
        }
        let mut ijk = [0usize; 3];
        let mut xi = [0.0; 3];
        for a in 0..3 {
            let t = (x[a] - self.bounding_box.min[a]) / self.h;
            let i = ((t.ceil() as isize) - 1).max(0) as usize;
            let i = i.min(self.n_cells[a] - 1);
            ijk[a] = i;
            xi[a] = (t - i as f64).clamp(0.0, 1.0);
        }
        Some((ijk, xi))
    }

    /// Indicator function α(x): 1 inside the physical domain, α_FCM elsewhere.
    pub fn indicator(&self, x: [f64; 3]) -> Result<f64> {
        if !self.bounding_box.contains(x) {
            return Err(Error::OutsideDomain { point: x, what: "grid bounding box" });
        }
        Ok(match self.voxel_at(x) {
            Some(v) if self.voxel_inside(v) => 1.0,
            _ => self.alpha_fcm,
        })
    }

    /// Linear voxel index at `x` (lower-index tie-break), `None` outside the image.
    pub fn voxel_at(&self, x: [f64; 3]) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let t = (x[a] - self.image_box.min[a]) / self.image_spacing[a];
            if !(t >= 0.0 && t <= self.image_dims[a] as f64) {
                return None;
            }
            ijk[a] = ((t.ceil() as isize - 1).max(0) as usize).min(self.image_dims[a] - 1);
        }
        Some(ijk[0] + self.image_dims[0] * (ijk[1] + self.image_dims[1] * ijk[2]))
    }

    #[inline]
    pub fn voxel_inside(&self, v: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[v])
    }

    fn cells_overlapping_voxel(&self, ijk: [usize; 3]) -> [std::ops::Range<usize>; 3] {
        std::array::from_fn(|a| {
            let x0 = ijk[a] as f64 * self.image_spacing[a] / self.h;
            let x1 = (ijk[a] + 1) as f64 * self.image_spacing[a] / self.h;
            let lo = (x0 + OVERLAP_TOL).floor().max(0.0) as usize;
            let hi = ((x1 - OVERLAP_TOL).ceil() as usize).min(self.n_cells[a]);
            lo..hi.max(lo + 1).min(self.n_cells[a])
        })
    }

    fn voxels_overlapping_cell(&self, ijk: [usize; 3]) -> [std::ops::Range<usize>; 3] {
        std::array::from_fn(|a| {
            let x0 = ijk[a] as f64 * self.h / self.image_spacing[a];
            let x1 = (ijk[a] + 1) as f64 * self.h / self.image_spacing[a];
            let lo = ((x0 + OVERLAP_TOL).floor().max(0.0) as usize).min(self.image_dims[a]);
            let hi = ((x1 - OVERLAP_TOL).ceil() as usize).min(self.image_dims[a]);
            lo..hi
        })
    }

    /// (cut, heterogeneous) for one cell.
    fn classify_cell(&self, image: &VoxelImage, ijk: [usize; 3]) -> (bool, bool) {
        let cell = self.cell_box(ijk);
        let mut cut = (0..3).any(|a| cell.max[a] > self.image_box.max[a] + OVERLAP_TOL * self.h);
        let mut first: Option<f64> = None;
        let mut heterogeneous = false;
        let r = self.voxels_overlapping_cell(ijk);
        for k in r[2].clone() {
            for j in r[1].clone() {
                for i in r[0].clone() {
                    let v = image.linear_index([i, j, k]);
                    if !image.is_inside(v) {
                        cut = true;
                        continue;
                    }
                    match first {
                        None => first = Some(image.values[v]),
                        Some(f) if f != image.values[v] => heterogeneous = true,
                        _ => {}
                    }
                }
            }
        }
        (cut, heterogeneous)
    }
}
