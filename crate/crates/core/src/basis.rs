//! Tensor-product shape functions on the structured grid.
//!
//! Two families share one interface:
//!
//! * uniform B-splines on a clamped knot vector with one knot per grid line,
//!   C^(p-1) across cells;
//! * integrated Legendre polynomials (hierarchical, C⁰), the classic
//!   p-version modes with vertex, edge, face and interior functions.
//!
//! Each family is described by a 1D mapping from (cell, local function) to a
//! global 1D index. The 3D function set is the tensor product of the per-axis
//! sets, so DOF sharing across faces, edges and vertices falls out of the
//! tensor structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::EmbeddedGrid;

/// Highest supported polynomial order.
pub const MAX_ORDER: usize = 8;
const MAX_LOCAL_1D: usize = MAX_ORDER + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    IntegratedLegendre,
    #[serde(rename = "bspline")]
    BSpline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub order: usize,
}

impl BasisSpec {
    pub fn new(family: BasisFamily, order: usize) -> Result<Self> {
        if order < 1 || order > MAX_ORDER {
            return Err(Error::Config(format!(
                "polynomial order must lie in 1..={MAX_ORDER}, got {order}"
            )));
        }
        Ok(BasisSpec { family, order })
    }

    pub fn bspline(order: usize) -> Self {
        Self::new(BasisFamily::BSpline, order).expect("valid order")
    }

    pub fn legendre(order: usize) -> Self {
        Self::new(BasisFamily::IntegratedLegendre, order).expect("valid order")
    }

    /// Inter-cell continuity: 0 for C⁰, p-1 for splines.
    pub fn continuity(&self) -> usize {
        match self.family {
            BasisFamily::IntegratedLegendre => 0,
            BasisFamily::BSpline => self.order - 1,
        }
    }

    #[inline]
    pub fn local_1d(&self) -> usize {
        self.order + 1
    }

    #[inline]
    pub fn local_count(&self) -> usize {
        self.local_1d().pow(3)
    }

    /// Number of 1D functions on a line of `n_cells` cells.
    pub fn global_1d_count(&self, n_cells: usize) -> usize {
        match self.family {
            BasisFamily::BSpline => n_cells + self.order,
            BasisFamily::IntegratedLegendre => n_cells * self.order + 1,
        }
    }

    /// Global 1D index of local function `local` of cell `cell`.
    #[inline]
    pub fn global_1d(&self, cell: usize, local: usize) -> usize {
        match self.family {
            BasisFamily::BSpline => cell + local,
            BasisFamily::IntegratedLegendre => match local {
                0 => cell * self.order,
                1 => (cell + 1) * self.order,
                k => cell * self.order + k - 1,
            },
        }
    }

    /// Values and d/dξ of the 1D functions of `cell` at ξ ∈ [0,1].
    pub fn eval_1d(&self, n_cells: usize, cell: usize, xi: f64, vals: &mut [f64], ders: &mut [f64]) {
        match self.family {
            BasisFamily::BSpline => bspline_1d(self.order, n_cells, cell, xi, vals, ders),
            BasisFamily::IntegratedLegendre => legendre_1d(self.order, xi, vals, ders),
        }
    }
}

/// Integrated Legendre modes on ξ ∈ [0,1] (t = 2ξ - 1).
fn legendre_1d(p: usize, xi: f64, vals: &mut [f64], ders: &mut [f64]) {
    let t = 2.0 * xi - 1.0;
    // Legendre polynomials P_0..P_p at t
    let mut leg = [0.0; MAX_LOCAL_1D + 1];
    leg[0] = 1.0;
    if p >= 1 {
        leg[1] = t;
    }
    for k in 2..=p {
        let kf = k as f64;
        leg[k] = ((2.0 * kf - 1.0) * t * leg[k - 1] - (kf - 1.0) * leg[k - 2]) / kf;
    }
    vals[0] = 0.5 * (1.0 - t);
    vals[1] = 0.5 * (1.0 + t);
    ders[0] = -1.0;
    ders[1] = 1.0;
    for k in 2..=p {
        let kf = k as f64;
        let c = 1.0 / (2.0 * (2.0 * kf - 1.0)).sqrt();
        vals[k] = c * (leg[k] - leg[k - 2]);
        // dN_k/dt = sqrt((2k-1)/2) P_{k-1}; chain rule dt/dξ = 2
        ders[k] = 2.0 * ((2.0 * kf - 1.0) / 2.0).sqrt() * leg[k - 1];
    }
}

/// Clamped uniform knot value at position `i` for `n_cells` cells.
#[inline]
fn knot(p: usize, n_cells: usize, i: isize) -> f64 {
    (i - p as isize).clamp(0, n_cells as isize) as f64
}

/// Nonzero B-spline functions of knot span `cell` and their first derivatives.
fn bspline_1d(p: usize, n_cells: usize, cell: usize, xi: f64, vals: &mut [f64], ders: &mut [f64]) {
    let u = cell as f64 + xi;
    let span = (cell + p) as isize;
    let mut ndu = [[0.0f64; MAX_LOCAL_1D]; MAX_LOCAL_1D];
    let mut left = [0.0; MAX_LOCAL_1D];
    let mut right = [0.0; MAX_LOCAL_1D];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = u - knot(p, n_cells, span + 1 - j as isize);
        right[j] = knot(p, n_cells, span + j as isize) - u;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    for r in 0..=p {
        vals[r] = ndu[r][p];
        let mut d = 0.0;
        if r >= 1 {
            d += ndu[r - 1][p - 1] / ndu[p][r - 1];
        }
        if r < p {
            d -= ndu[r][p - 1] / ndu[p][r];
        }
        ders[r] = p as f64 * d;
    }
}

/// Evaluates 3D shape functions of one cell of a structured grid.
#[derive(Debug, Clone)]
pub struct BasisEvaluator {
    pub spec: BasisSpec,
    pub n_cells: [usize; 3],
    pub h: f64,
}

/// Values and physical gradients of all functions of a cell at one point.
#[derive(Debug, Clone)]
pub struct ShapeValues {
    pub values: Vec<f64>,
    pub gradients: Vec<[f64; 3]>,
}

impl ShapeValues {
    pub fn new(spec: &BasisSpec) -> Self {
        let n = spec.local_count();
        ShapeValues {
            values: vec![0.0; n],
            gradients: vec![[0.0; 3]; n],
        }
    }
}

impl BasisEvaluator {
    pub fn new(spec: BasisSpec, n_cells: [usize; 3], h: f64) -> Self {
        BasisEvaluator { spec, n_cells, h }
    }

    pub fn for_grid(spec: BasisSpec, grid: &EmbeddedGrid) -> Self {
        Self::new(spec, grid.n_cells, grid.h)
    }

    /// Fill `out` for cell `ijk` at local point `xi` ∈ [0,1]³. Local function
    /// `a = ix + (p+1)(iy + (p+1) iz)`.
    pub fn eval_into(&self, ijk: [usize; 3], xi: [f64; 3], out: &mut ShapeValues) {
        let m = self.spec.local_1d();
        let mut v = [[0.0; MAX_LOCAL_1D]; 3];
        let mut d = [[0.0; MAX_LOCAL_1D]; 3];
        for a in 0..3 {
            self.spec.eval_1d(self.n_cells[a], ijk[a], xi[a], &mut v[a], &mut d[a]);
        }
        let inv_h = 1.0 / self.h;
        let mut idx = 0;
        for iz in 0..m {
            for iy in 0..m {
                let vyz = v[1][iy] * v[2][iz];
                let dy = d[1][iy] * v[2][iz];
                let dz = v[1][iy] * d[2][iz];
                for ix in 0..m {
                    out.values[idx] = v[0][ix] * vyz;
                    out.gradients[idx] = [d[0][ix] * vyz * inv_h, v[0][ix] * dy * inv_h, v[0][ix] * dz * inv_h];
                    idx += 1;
                }
            }
        }
    }

    /// Checked evaluation returning fresh buffers.
    pub fn eval(&self, ijk: [usize; 3], xi: [f64; 3]) -> Result<ShapeValues> {
        for a in 0..3 {
            if ijk[a] >= self.n_cells[a] {
                return Err(Error::OutsideDomain { point: xi, what: "grid (cell index)" });
            }
        }
        if xi.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::OutsideDomain { point: xi, what: "reference cell [0,1]^3" });
        }
        let mut out = ShapeValues::new(&self.spec);
        self.eval_into(ijk, xi, &mut out);
        Ok(out)
    }
}

/// Shape functions of a single isolated cell (one-cell grid) at `xi` ∈ [0,1]³,
/// with gradients with respect to ξ.
pub fn eval_basis(spec: BasisSpec, xi: [f64; 3]) -> Result<ShapeValues> {
    BasisEvaluator::new(spec, [1, 1, 1], 1.0).eval([0, 0, 0], xi)
}

/// Global numbering of the functions supported on active cells.
#[derive(Debug, Clone)]
pub struct DofLayout {
    pub spec: BasisSpec,
    pub components: usize,
    pub num_nodes: usize,
    /// Per active cell, `spec.local_count()` node indices, flat.
    pub cell_nodes: Vec<u32>,
    /// Tensor-lattice index (i, j, k) of every node's 1D functions.
    pub node_lattice: Vec<[u32; 3]>,
}

impl DofLayout {
    pub fn num_dofs(&self) -> usize {
        self.num_nodes * self.components
    }

    #[inline]
    pub fn nodes_of(&self, active: usize) -> &[u32] {
        let n = self.spec.local_count();
        &self.cell_nodes[active * n..(active + 1) * n]
    }

    /// Global DOF of component `c` of node `node`.
    #[inline]
    pub fn dof(&self, node: u32, c: usize) -> usize {
        node as usize * self.components + c
    }

    /// DOFs of an active cell, ordered node-major (a·components + c).
    pub fn cell_dofs(&self, active: usize, out: &mut Vec<usize>) {
        out.clear();
        for &n in self.nodes_of(active) {
            for c in 0..self.components {
                out.push(self.dof(n, c));
            }
        }
    }
}

/// Number the functions of `spec` supported on the active cells of `grid`.
pub fn dof_map(grid: &EmbeddedGrid, spec: BasisSpec, components: usize) -> DofLayout {
    assert!(components >= 1);
    let g: [usize; 3] = std::array::from_fn(|a| spec.global_1d_count(grid.n_cells[a]));
    let lattice_len = g[0] * g[1] * g[2];
    let m = spec.local_1d();
    let n_local = spec.local_count();

    let mut lattice_keys = Vec::with_capacity(grid.num_active() * n_local);
    for &c in &grid.cells {
        let ijk = grid.cell_ijk(c);
        for iz in 0..m {
            let kz = spec.global_1d(ijk[2], iz);
            for iy in 0..m {
                let ky = spec.global_1d(ijk[1], iy);
                for ix in 0..m {
                    let kx = spec.global_1d(ijk[0], ix);
                    lattice_keys.push(kx + g[0] * (ky + g[1] * kz));
                }
            }
        }
    }

    let mut used = vec![false; lattice_len];
    for &k in &lattice_keys {
        used[k] = true;
    }
    let mut number = vec![u32::MAX; lattice_len];
    let mut node_lattice = Vec::new();
    for (k, &u) in used.iter().enumerate() {
        if u {
            number[k] = node_lattice.len() as u32;
            node_lattice.push([(k % g[0]) as u32, ((k / g[0]) % g[1]) as u32, (k / (g[0] * g[1])) as u32]);
        }
    }
    let cell_nodes = lattice_keys.iter().map(|&k| number[k]).collect();

    DofLayout {
        spec,
        components,
        num_nodes: node_lattice.len(),
        cell_nodes,
        node_lattice,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::image::{ValueKind, VoxelImage};

    fn block(n: [usize; 3]) -> EmbeddedGrid {
        let len = n.iter().product();
        let img = VoxelImage::new(n, [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; len], None).unwrap();
        build_grid(&img, 1.0, 1).unwrap()
    }

    #[test]
    fn trilinear_center_values() {
        for family in [BasisFamily::BSpline, BasisFamily::IntegratedLegendre] {
            let s = eval_basis(BasisSpec::new(family, 1).unwrap(), [0.5; 3]).unwrap();
            assert_eq!(s.values.len(), 8);
            for v in s.values {
                assert!((v - 0.125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn outside_reference_cell_is_rejected() {
        assert!(eval_basis(BasisSpec::bspline(2), [1.1, 0.5, 0.5]).is_err());
        assert!(eval_basis(BasisSpec::legendre(2), [0.5, -0.01, 0.5]).is_err());
    }

    #[test]
    fn bspline_partition_of_unity_near_clamped_ends() {
        let ev = BasisEvaluator::new(BasisSpec::bspline(3), [5, 4, 2], 0.5);
        let mut out = ShapeValues::new(&ev.spec);
        for cell in [[0, 0, 0], [1, 2, 1], [4, 3, 1], [2, 1, 0]] {
            for xi in [[0.0, 0.0, 0.0], [0.3, 0.7, 0.1], [1.0, 0.5, 1.0]] {
                ev.eval_into(cell, xi, &mut out);
                let s: f64 = out.values.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for a in 0..3 {
                    let g: f64 = out.gradients.iter().map(|g| g[a]).sum();
                    assert!(g.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn legendre_vertex_modes_form_a_partition_of_unity() {
        let spec = BasisSpec::legendre(4);
        let s = eval_basis(spec, [0.2, 0.9, 0.45]).unwrap();
        let m = spec.local_1d();
        let mut sum = 0.0;
        for iz in 0..2 {
            for iy in 0..2 {
                for ix in 0..2 {
                    sum += s.values[ix + m * (iy + m * iz)];
                }
            }
        }
        assert!((sum - 1.0).abs() < 1e-14);
    }

    #[test]
    fn legendre_bubbles_vanish_at_cell_ends() {
        let mut v = [0.0; MAX_LOCAL_1D];
        let mut d = [0.0; MAX_LOCAL_1D];
        for xi in [0.0, 1.0] {
            legendre_1d(6, xi, &mut v, &mut d);
            for k in 2..=6 {
                assert!(v[k].abs() < 1e-14);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for spec in [BasisSpec::bspline(3), BasisSpec::legendre(3), BasisSpec::bspline(2)] {
            let ev = BasisEvaluator::new(spec, [4, 4, 4], 0.7);
            let mut a = ShapeValues::new(&spec);
            let mut b = ShapeValues::new(&spec);
            let mut c = ShapeValues::new(&spec);
            let xi = [0.31, 0.62, 0.47];
            let cell = [1, 0, 3];
            ev.eval_into(cell, xi, &mut a);
            let eps = 1e-6;
            for axis in 0..3 {
                let mut xp = xi;
                let mut xm = xi;
                xp[axis] += eps;
                xm[axis] -= eps;
                ev.eval_into(cell, xp, &mut b);
                ev.eval_into(cell, xm, &mut c);
                for i in 0..spec.local_count() {
                    let fd = (b.values[i] - c.values[i]) / (2.0 * eps * 0.7);
                    assert!((fd - a.gradients[i][axis]).abs() < 1e-7, "{spec:?}");
                }
            }
        }
    }

    #[test]
    fn dof_counts() {
        let one = block([1, 1, 1]);
        let two = block([2, 1, 1]);
        assert_eq!(dof_map(&one, BasisSpec::bspline(1), 1).num_dofs(), 8);
        assert_eq!(dof_map(&two, BasisSpec::bspline(1), 1).num_dofs(), 12);
        assert_eq!(dof_map(&two, BasisSpec::legendre(1), 3).num_dofs(), 36);
        assert_eq!(dof_map(&two, BasisSpec::bspline(3), 1).num_dofs(), 5 * 4 * 4);
    }

    /// Count vertex/edge/face/interior modes of two face-adjacent hexahedra
    /// by enumerating topological entities and subtracting the shared ones.
    fn legendre_two_cell_count(p: usize) -> usize {
        let per_edge = p - 1;
        let per_face = (p - 1) * (p - 1);
        let per_volume = (p - 1).pow(3);
        let vertices = 8 + 8 - 4;
        let edges = 12 + 12 - 4;
        let faces = 6 + 6 - 1;
        let volumes = 2;
        vertices + edges * per_edge + faces * per_face + volumes * per_volume
    }

    #[test]
    fn legendre_two_cells_match_combinatorial_count() {
        let two = block([2, 1, 1]);
        for p in 1..=5 {
            let layout = dof_map(&two, BasisSpec::legendre(p), 1);
            assert_eq!(layout.num_dofs(), legendre_two_cell_count(p), "p={p}");
        }
        assert_eq!(legendre_two_cell_count(2), 45);
    }

    #[test]
    fn shared_face_functions_share_numbers() {
        let two = block([2, 1, 1]);
        let layout = dof_map(&two, BasisSpec::legendre(2), 1);
        let m = 3;
        let a = layout.nodes_of(0);
        let b = layout.nodes_of(1);
        for iz in 0..m {
            for iy in 0..m {
                // right face of cell 0 (local ix = 1) equals left face of cell 1 (ix = 0)
                assert_eq!(a[1 + m * (iy + m * iz)], b[m * (iy + m * iz)]);
            }
        }
    }
}
