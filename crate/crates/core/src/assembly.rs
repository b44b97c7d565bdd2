//! Weak-form assembly of the elastic and phase-field systems on the embedded
//! grid, penalty Dirichlet conditions, the history field and reaction forces.

use std::sync::Arc;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{dof_map, BasisEvaluator, BasisSpec, DofLayout, ShapeValues};
use crate::error::{Error, Result};
use crate::grid::EmbeddedGrid;
use crate::image::VoxelImage;
use crate::material::{degradation, psi_pos_voigt, split_tangent, MaterialTable, Tensor};
use crate::quadrature::{build_quadrature_with, QuadratureOptions, QuadratureRule};
use crate::sparse::{CsrMatrix, CsrPattern};
use crate::surface::{build_surface_quadrature, Region, SurfaceQuadrature};

/// Cells are processed in chunks of this size; each chunk is computed in
/// parallel and merged in cell order.
const CHUNK: usize = 64;

/// Everything that depends only on the image and the discretization choices.
#[derive(Debug)]
pub struct Discretization {
    pub grid: EmbeddedGrid,
    pub quad: QuadratureRule,
    pub basis: BasisEvaluator,
    pub u_layout: DofLayout,
    pub s_layout: DofLayout,
    pub u_pattern: Arc<CsrPattern>,
    pub s_pattern: Arc<CsrPattern>,
    pub materials: MaterialTable,
}

impl Discretization {
    pub fn new(
        image: &VoxelImage,
        materials: MaterialTable,
        spec: BasisSpec,
        h: f64,
        alpha_fcm: f64,
        quad_opts: &QuadratureOptions,
    ) -> Result<Self> {
        if materials.voxels.len() != image.len() {
            return Err(Error::Config(format!(
                "material table has {} entries for an image of {} voxels",
                materials.voxels.len(),
                image.len()
            )));
        }
        let grid = EmbeddedGrid::new(image, h, spec.order, alpha_fcm)?;
        let quad = build_quadrature_with(&grid, quad_opts);
        let basis = BasisEvaluator::for_grid(spec, &grid);
        let u_layout = dof_map(&grid, spec, 3);
        let s_layout = dof_map(&grid, spec, 1);
        let u_pattern = Arc::new(CsrPattern::from_layout(&u_layout));
        let s_pattern = Arc::new(CsrPattern::from_layout(&s_layout));
        log::info!(
            "discretization: {} active cells ({} cut), {} quadrature points, {} displacement dofs, {} phase-field dofs",
            grid.num_active(),
            grid.cut.iter().filter(|&&c| c).count(),
            quad.len(),
            u_layout.num_dofs(),
            s_layout.num_dofs()
        );
        Ok(Discretization {
            grid,
            quad,
            basis,
            u_layout,
            s_layout,
            u_pattern,
            s_pattern,
            materials,
        })
    }

    pub fn spec(&self) -> BasisSpec {
        self.basis.spec
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    pub fn cell_ijk(&self, active: usize) -> [usize; 3] {
        self.grid.cell_ijk(self.grid.cells[active])
    }

    /// Physical coordinate of quadrature point `q` in active cell `active`.
    pub fn point(&self, active: usize, q: usize) -> [f64; 3] {
        self.grid.to_physical(self.cell_ijk(active), self.quad.local[q])
    }

    /// Physical volume weight of quadrature point `q`.
    #[inline]
    pub fn volume_weight(&self, q: usize) -> f64 {
        let h = self.grid.h;
        self.quad.weights[q] * h * h * h
    }

    /// Value of a scalar field at a local point of an active cell.
    pub fn scalar_at(&self, s: &[f64], active: usize, shape: &ShapeValues) -> f64 {
        self.s_layout
            .nodes_of(active)
            .iter()
            .zip(&shape.values)
            .map(|(&n, &v)| v * s[n as usize])
            .sum()
    }

    /// Displacement at a local point of an active cell.
    pub fn displacement_at(&self, u: &[f64], active: usize, shape: &ShapeValues) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (&n, &v) in self.u_layout.nodes_of(active).iter().zip(&shape.values) {
            let base = n as usize * 3;
            for c in 0..3 {
                out[c] += v * u[base + c];
            }
        }
        out
    }

    /// Small-strain tensor at a local point of an active cell.
    pub fn strain_at(&self, u: &[f64], active: usize, shape: &ShapeValues) -> Tensor {
        let mut grad = [[0.0; 3]; 3];
        for (&n, g) in self.u_layout.nodes_of(active).iter().zip(&shape.gradients) {
            let base = n as usize * 3;
            for i in 0..3 {
                for j in 0..3 {
                    grad[i][j] += u[base + i] * g[j];
                }
            }
        }
        Tensor::from_fn(|i, j| 0.5 * (grad[i][j] + grad[j][i]))
    }

    /// Evaluate shape functions at a physical point, if it lies in an active cell.
    pub fn locate(&self, x: [f64; 3]) -> Option<(usize, ShapeValues)> {
        let (ijk, xi) = self.grid.locate(x)?;
        let active = self.grid.active_index(ijk)?;
        let mut shape = ShapeValues::new(&self.basis.spec);
        self.basis.eval_into(ijk, xi, &mut shape);
        Some((active, shape))
    }
}

/// Prescribed values on a Dirichlet region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Constraint {
    /// u = 0.
    Fixed,
    /// One component fixed to a constant value.
    Component { component: usize, value: f64 },
    /// One component follows the applied displacement times `scale`.
    Loaded { component: usize, scale: f64 },
    /// u = G x + b on all components.
    Linear { gradient: [[f64; 3]; 3], offset: [f64; 3] },
    /// No constraint; the region is only used for force evaluation.
    TractionFree,
}

impl Constraint {
    /// Prescribed value per component at `x` for applied displacement `load`.
    pub fn values(&self, x: [f64; 3], load: f64) -> [Option<f64>; 3] {
        match self {
            Constraint::Fixed => [Some(0.0); 3],
            Constraint::Component { component, value } => {
                let mut v = [None; 3];
                v[*component] = Some(*value);
                v
            }
            Constraint::Loaded { component, scale } => {
                let mut v = [None; 3];
                v[*component] = Some(scale * load);
                v
            }
            Constraint::Linear { gradient, offset } => {
                std::array::from_fn(|i| Some((0..3).map(|j| gradient[i][j] * x[j]).sum::<f64>() + offset[i]))
            }
            Constraint::TractionFree => [None; 3],
        }
    }

    pub fn is_dirichlet(&self) -> bool {
        !matches!(self, Constraint::TractionFree)
    }
}

/// A displacement boundary condition with its surface quadrature.
#[derive(Debug, Clone)]
pub struct DisplacementBc {
    pub name: String,
    pub region: Region,
    pub constraint: Constraint,
    pub penalty: f64,
    pub quadrature: SurfaceQuadrature,
}

impl DisplacementBc {
    pub fn new(
        name: impl Into<String>,
        region: Region,
        constraint: Constraint,
        penalty: f64,
        disc: &Discretization,
        image: &VoxelImage,
    ) -> Result<Self> {
        let name = name.into();
        if constraint.is_dirichlet() && !(penalty > 0.0 && penalty.is_finite()) {
            return Err(Error::Config(format!("boundary '{name}': penalty must be > 0, got {penalty}")));
        }
        if let Constraint::Component { component, .. } | Constraint::Loaded { component, .. } = constraint {
            if component > 2 {
                return Err(Error::Config(format!("boundary '{name}': component must be 0, 1 or 2")));
            }
        }
        let quadrature = build_surface_quadrature(&region, &disc.grid, image);
        if quadrature.is_empty() {
            return Err(Error::Config(format!(
                "boundary '{name}' does not intersect any active cell"
            )));
        }
        Ok(DisplacementBc {
            name,
            region,
            constraint,
            penalty,
            quadrature,
        })
    }
}

/// A penalty constraint s = value on a region of the phase field.
#[derive(Debug, Clone)]
pub struct PhaseFieldBc {
    pub value: f64,
    pub penalty: f64,
    pub quadrature: SurfaceQuadrature,
}

/// Default displacement penalty: 1e3 · max E / h.
pub fn default_penalty(materials: &MaterialTable, h: f64) -> f64 {
    1.0e3 * materials.max_e() / h
}

/// Default phase-field penalty: 1e3 · 4ℓ₀² / h.
pub fn default_phase_penalty(l0: f64, h: f64) -> f64 {
    1.0e3 * 4.0 * l0 * l0 / h
}

/// Phase-field model constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFieldParams {
    pub l0: f64,
    pub eta: f64,
}

/// Scatter a symmetric local block matrix (node-major, `comp` components)
/// into the global matrix. `local` stores the full n·comp square.
fn scatter(matrix: &mut CsrMatrix, nodes: &[u32], comp: usize, local: &[f64]) {
    let p = Arc::clone(&matrix.pattern);
    let m = nodes.len() * comp;
    for (a, &na) in nodes.iter().enumerate() {
        for (b, &nb) in nodes.iter().enumerate() {
            let slot = p.node_slot(na, nb);
            for ci in 0..comp {
                let row = (a * comp + ci) * m + b * comp;
                for cj in 0..comp {
                    matrix.values[p.value_index(na, ci, slot, cj)] += local[row + cj];
                }
            }
        }
    }
}

/// Elastic tangent matrix at (u, s) with penalty terms, and the penalty
/// load vector. The split law is piecewise linear, so `K(u) u` equals the
/// internal force and `K(u) u - rhs` is the elastic residual.
pub fn assemble_elastic(
    disc: &Discretization,
    u: &[f64],
    s: &[f64],
    bcs: &[DisplacementBc],
    load: f64,
    eta: f64,
) -> (CsrMatrix, Vec<f64>) {
    let sys = assemble_elastic_system(disc, u, s, bcs, load, eta);
    (sys.matrix, sys.rhs)
}

/// Elastic system with the internal force vector of the bulk (no penalty).
pub struct ElasticSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub internal: Vec<f64>,
}

pub fn assemble_elastic_system(
    disc: &Discretization,
    u: &[f64],
    s: &[f64],
    bcs: &[DisplacementBc],
    load: f64,
    eta: f64,
) -> ElasticSystem {
    let spec = disc.spec();
    let n = spec.local_count();
    let m = 3 * n;
    let mut matrix = CsrMatrix::zeros(Arc::clone(&disc.u_pattern));
    let mut internal = vec![0.0; disc.u_layout.num_dofs()];
    let cells: Vec<usize> = (0..disc.grid.num_active()).collect();

    for chunk in cells.chunks(CHUNK) {
        let locals: Vec<(Vec<f64>, Vec<f64>)> = chunk
            .par_iter()
            .map(|&c| {
                let mut acc = StiffnessAccumulator::new(n);
                let mut fi = vec![0.0; m];
                let mut shape = ShapeValues::new(&spec);
                let ijk = disc.cell_ijk(c);
                let u_nodes = disc.u_layout.nodes_of(c);
                let s_nodes = disc.s_layout.nodes_of(c);
                for q in disc.quad.cell_range(c) {
                    disc.basis.eval_into(ijk, disc.quad.local[q], &mut shape);
                    let alpha = disc.quad.alpha[q];
                    let mat = disc.materials.at(disc.quad.voxel[q], alpha);
                    let sq: f64 = s_nodes.iter().zip(&shape.values).map(|(&i, &v)| v * s[i as usize]).sum();
                    let mut grad_u = [[0.0; 3]; 3];
                    for (&nd, g) in u_nodes.iter().zip(&shape.gradients) {
                        let b = nd as usize * 3;
                        for i in 0..3 {
                            for j in 0..3 {
                                grad_u[i][j] += u[b + i] * g[j];
                            }
                        }
                    }
                    let tr = grad_u[0][0] + grad_u[1][1] + grad_u[2][2];
                    let g = degradation(sq.clamp(0.0, 1.0), eta);
                    let (lam, mu) = split_tangent(tr, g, mat);
                    let w = alpha * disc.volume_weight(q);
                    let (lw, mw) = (lam * w, mu * w);
                    acc.push(&shape.gradients, lw, mw);
                    // σ w = λ tr I + μ (∇u + ∇uᵀ), already weighted
                    let mut sig = [[0.0; 3]; 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            sig[i][j] = mw * (grad_u[i][j] + grad_u[j][i]);
                        }
                        sig[i][i] += lw * tr;
                    }
                    for (a, ga) in shape.gradients.iter().enumerate() {
                        for i in 0..3 {
                            fi[3 * a + i] += sig[i][0] * ga[0] + sig[i][1] * ga[1] + sig[i][2] * ga[2];
                        }
                    }
                }
                (acc.finish(), fi)
            })
            .collect();
        for (&c, (k, fi)) in chunk.iter().zip(&locals) {
            let nodes = disc.u_layout.nodes_of(c);
            scatter(&mut matrix, nodes, 3, k);
            for (a, &nd) in nodes.iter().enumerate() {
                for i in 0..3 {
                    internal[nd as usize * 3 + i] += fi[3 * a + i];
                }
            }
        }
    }

    let mut rhs = vec![0.0; disc.u_layout.num_dofs()];
    for bc in bcs {
        add_displacement_penalty(disc, bc, load, &mut matrix, &mut rhs);
    }
    ElasticSystem { matrix, rhs, internal }
}

const BATCH: usize = 32;

/// Cell stiffness as two weighted Gram matrices of the gradient table,
/// P = Σ λ g gᵀ and Q = Σ μ g gᵀ with g = (∂_i N_a), evaluated in batches
/// with dense matrix products. K_ab,ij = P_ai,bj + Q_aj,bi + δ_ij Σ_k Q_ak,bk.
struct StiffnessAccumulator {
    m: usize,
    rows: usize,
    g: Mat<f64>,
    gl: Mat<f64>,
    gm: Mat<f64>,
    p: Mat<f64>,
    q: Mat<f64>,
}

impl StiffnessAccumulator {
    fn new(nodes: usize) -> Self {
        let m = 3 * nodes;
        StiffnessAccumulator {
            m,
            rows: 0,
            g: Mat::zeros(BATCH, m),
            gl: Mat::zeros(BATCH, m),
            gm: Mat::zeros(BATCH, m),
            p: Mat::zeros(m, m),
            q: Mat::zeros(m, m),
        }
    }

    fn push(&mut self, grads: &[[f64; 3]], lam: f64, mu: f64) {
        let r = self.rows;
        for (a, ga) in grads.iter().enumerate() {
            for i in 0..3 {
                let c = 3 * a + i;
                self.g[(r, c)] = ga[i];
                self.gl[(r, c)] = lam * ga[i];
                self.gm[(r, c)] = mu * ga[i];
            }
        }
        self.rows += 1;
        if self.rows == BATCH {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let r = self.rows;
        if r == 0 {
            return;
        }
        let gt = self.g.as_ref().subrows(0, r).transpose();
        matmul(self.p.as_mut(), Accum::Add, gt, self.gl.as_ref().subrows(0, r), 1.0, Par::Seq);
        matmul(self.q.as_mut(), Accum::Add, gt, self.gm.as_ref().subrows(0, r), 1.0, Par::Seq);
        self.rows = 0;
    }

    /// Dense row-major cell matrix.
    fn finish(mut self) -> Vec<f64> {
        self.flush();
        let m = self.m;
        let mut k = vec![0.0; m * m];
        for a in 0..m / 3 {
            for b in 0..m / 3 {
                let d: f64 = (0..3).map(|c| self.q[(3 * a + c, 3 * b + c)]).sum();
                for i in 0..3 {
                    for j in 0..3 {
                        let mut v = self.p[(3 * a + i, 3 * b + j)] + self.q[(3 * a + j, 3 * b + i)];
                        if i == j {
                            v += d;
                        }
                        k[(3 * a + i) * m + 3 * b + j] = v;
                    }
                }
            }
        }
        k
    }
}

/// K_ab,ij += λ ∂_i N_a ∂_j N_b + μ (∂_j N_a ∂_i N_b + δ_ij ∇N_a·∇N_b).
#[cfg(test)]
fn add_elastic_block(k: &mut [f64], grads: &[[f64; 3]], lam: f64, mu: f64) {
    let n = grads.len();
    let m = 3 * n;
    for a in 0..n {
        let ga = grads[a];
        for b in a..n {
            let gb = grads[b];
            let d = ga[0] * gb[0] + ga[1] * gb[1] + ga[2] * gb[2];
            for i in 0..3 {
                let row = (3 * a + i) * m + 3 * b;
                for j in 0..3 {
                    let mut v = lam * ga[i] * gb[j] + mu * ga[j] * gb[i];
                    if i == j {
                        v += mu * d;
                    }
                    k[row + j] += v;
                }
            }
        }
    }
}

/// Copy the upper node-block triangle into the lower one.
#[cfg(test)]
fn mirror_blocks(k: &mut [f64], n: usize) {
    let m = 3 * n;
    for a in 0..n {
        for b in 0..a {
            for i in 0..3 {
                for j in 0..3 {
                    k[(3 * a + i) * m + 3 * b + j] = k[(3 * b + j) * m + 3 * a + i];
                }
            }
        }
    }
}

fn add_displacement_penalty(disc: &Discretization, bc: &DisplacementBc, load: f64, matrix: &mut CsrMatrix, rhs: &mut [f64]) {
    if !bc.constraint.is_dirichlet() {
        return;
    }
    let spec = disc.spec();
    let n = spec.local_count();
    let m = 3 * n;
    let mut shape = ShapeValues::new(&spec);
    let q = &bc.quadrature;
    let mut local = vec![0.0; m * m];
    let mut i = 0;
    while i < q.len() {
        // points of one cell are contiguous per clipped piece; group them
        let cell = q.cell[i] as usize;
        let ijk = disc.cell_ijk(cell);
        local.iter_mut().for_each(|v| *v = 0.0);
        let nodes = disc.u_layout.nodes_of(cell);
        let mut j = i;
        while j < q.len() && q.cell[j] as usize == cell {
            disc.basis.eval_into(ijk, q.local[j], &mut shape);
            let vals = bc.constraint.values(q.point[j], load);
            let w = bc.penalty * q.weight[j];
            for (c, v) in vals.iter().enumerate() {
                let Some(target) = v else { continue };
                for a in 0..n {
                    let wa = w * shape.values[a];
                    rhs[nodes[a] as usize * 3 + c] += wa * target;
                    for b in 0..n {
                        local[(3 * a + c) * m + 3 * b + c] += wa * shape.values[b];
                    }
                }
            }
            j += 1;
        }
        scatter(matrix, nodes, 3, &local);
        i = j;
    }
}

/// Phase-field system −4ℓ₀²Δs + (4ℓ₀(1−η)H/Gc + 1)s = 1 with natural
/// boundary conditions plus optional penalty constraints.
pub fn assemble_phasefield(
    disc: &Discretization,
    history: &[f64],
    params: PhaseFieldParams,
    constraints: &[PhaseFieldBc],
) -> Result<(CsrMatrix, Vec<f64>)> {
    if !(params.l0 > 0.0) {
        return Err(Error::Config(format!("l0 must be > 0, got {}", params.l0)));
    }
    if let Some(gc) = disc
        .materials
        .voxels
        .iter()
        .map(|m| m.gc)
        .chain(std::iter::once(disc.materials.fictitious.gc))
        .find(|&gc| !(gc > 0.0))
    {
        return Err(Error::Config(format!("critical energy release rate must be > 0, found {gc}")));
    }
    assert_eq!(history.len(), disc.quad.len());
    let spec = disc.spec();
    let n = spec.local_count();
    let diff = 4.0 * params.l0 * params.l0;
    let react = 4.0 * params.l0 * (1.0 - params.eta);
    let mut matrix = CsrMatrix::zeros(Arc::clone(&disc.s_pattern));
    let mut rhs = vec![0.0; disc.s_layout.num_dofs()];
    let cells: Vec<usize> = (0..disc.grid.num_active()).collect();

    for chunk in cells.chunks(CHUNK) {
        let locals: Vec<(Vec<f64>, Vec<f64>)> = chunk
            .par_iter()
            .map(|&c| {
                let mut k = vec![0.0; n * n];
                let mut f = vec![0.0; n];
                let mut shape = ShapeValues::new(&spec);
                let ijk = disc.cell_ijk(c);
                for q in disc.quad.cell_range(c) {
                    disc.basis.eval_into(ijk, disc.quad.local[q], &mut shape);
                    let alpha = disc.quad.alpha[q];
                    let mat = disc.materials.at(disc.quad.voxel[q], alpha);
                    let coef = react * history[q] / mat.gc + 1.0;
                    let w = alpha * disc.volume_weight(q);
                    for a in 0..n {
                        let va = shape.values[a] * w;
                        let ga = shape.gradients[a];
                        f[a] += va;
                        for b in a..n {
                            let gb = shape.gradients[b];
                            k[a * n + b] += w * diff * (ga[0] * gb[0] + ga[1] * gb[1] + ga[2] * gb[2])
                                + coef * va * shape.values[b];
                        }
                    }
                }
                for a in 0..n {
                    for b in 0..a {
                        k[a * n + b] = k[b * n + a];
                    }
                }
                (k, f)
            })
            .collect();
        for (&c, (k, f)) in chunk.iter().zip(&locals) {
            let nodes = disc.s_layout.nodes_of(c);
            scatter(&mut matrix, nodes, 1, k);
            for (&nd, v) in nodes.iter().zip(f) {
                rhs[nd as usize] += v;
            }
        }
    }

    let mut shape = ShapeValues::new(&spec);
    for bc in constraints {
        let q = &bc.quadrature;
        for j in 0..q.len() {
            let cell = q.cell[j] as usize;
            disc.basis.eval_into(disc.cell_ijk(cell), q.local[j], &mut shape);
            let nodes = disc.s_layout.nodes_of(cell);
            let w = bc.penalty * q.weight[j];
            let mut local = vec![0.0; n * n];
            for a in 0..n {
                rhs[nodes[a] as usize] += w * shape.values[a] * bc.value;
                for b in 0..n {
                    local[a * n + b] = w * shape.values[a] * shape.values[b];
                }
            }
            scatter(&mut matrix, nodes, 1, &local);
        }
    }
    Ok((matrix, rhs))
}

/// Ψ⁺ of the undamaged material at every quadrature point.
pub fn positive_energy(disc: &Discretization, u: &[f64]) -> Vec<f64> {
    let spec = disc.spec();
    let cells: Vec<usize> = (0..disc.grid.num_active()).collect();
    let per_cell: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&c| {
            let mut shape = ShapeValues::new(&spec);
            let ijk = disc.cell_ijk(c);
            let nodes = disc.u_layout.nodes_of(c);
            disc.quad
                .cell_range(c)
                .map(|q| {
                    disc.basis.eval_into(ijk, disc.quad.local[q], &mut shape);
                    let mut gr = [[0.0; 3]; 3];
                    for (&nd, g) in nodes.iter().zip(&shape.gradients) {
                        let b = nd as usize * 3;
                        for i in 0..3 {
                            for j in 0..3 {
                                gr[i][j] += u[b + i] * g[j];
                            }
                        }
                    }
                    let e = [
                        gr[0][0],
                        gr[1][1],
                        gr[2][2],
                        0.5 * (gr[1][2] + gr[2][1]),
                        0.5 * (gr[0][2] + gr[2][0]),
                        0.5 * (gr[0][1] + gr[1][0]),
                    ];
                    psi_pos_voigt(&e, disc.materials.at(disc.quad.voxel[q], disc.quad.alpha[q]))
                })
                .collect()
        })
        .collect();
    per_cell.into_iter().flatten().collect()
}

/// H′ = max(H, Ψ⁺) pointwise.
pub fn update_history(history: &[f64], psi_pos: &[f64]) -> Vec<f64> {
    history.iter().zip(psi_pos).map(|(&h, &p)| h.max(p)).collect()
}

/// Phase field at every quadrature point.
pub fn phase_at_points(disc: &Discretization, s: &[f64]) -> Vec<f64> {
    let spec = disc.spec();
    let mut out = Vec::with_capacity(disc.quad.len());
    let mut shape = ShapeValues::new(&spec);
    for c in 0..disc.grid.num_active() {
        let ijk = disc.cell_ijk(c);
        for q in disc.quad.cell_range(c) {
            disc.basis.eval_into(ijk, disc.quad.local[q], &mut shape);
            out.push(disc.scalar_at(s, c, &shape));
        }
    }
    out
}

/// How reaction forces are evaluated on a constrained region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReactionMethod {
    /// ∫ β (ū − u) dΓ: the traction transmitted by the penalty constraint.
    #[default]
    Penalty,
    /// ∫ σ·n dΓ with the stress evaluated from the adjacent cell.
    StressTraction,
}

/// Total force [N] exerted on the specimen through region `bc`.
pub fn reaction_force(
    disc: &Discretization,
    u: &[f64],
    s: &[f64],
    bc: &DisplacementBc,
    load: f64,
    eta: f64,
    method: ReactionMethod,
) -> [f64; 3] {
    if method == ReactionMethod::Penalty && !bc.constraint.is_dirichlet() {
        log::warn!("reaction force requested on unconstrained region '{}'", bc.name);
    }
    let spec = disc.spec();
    let mut shape = ShapeValues::new(&spec);
    let q = &bc.quadrature;
    let mut force = [0.0; 3];
    for j in 0..q.len() {
        let cell = q.cell[j] as usize;
        disc.basis.eval_into(disc.cell_ijk(cell), q.local[j], &mut shape);
        match method {
            ReactionMethod::Penalty => {
                let uh = disc.displacement_at(u, cell, &shape);
                for (c, v) in bc.constraint.values(q.point[j], load).iter().enumerate() {
                    if let Some(target) = v {
                        force[c] += bc.penalty * q.weight[j] * (target - uh[c]);
                    }
                }
            }
            ReactionMethod::StressTraction => {
                let eps = disc.strain_at(u, cell, &shape);
                let sv = disc.scalar_at(s, cell, &shape).clamp(0.0, 1.0);
                let mat = match disc.grid.voxel_at(q.point[j]) {
                    Some(v) if disc.grid.voxel_inside(v) => &disc.materials.voxels[v],
                    _ => &disc.materials.fictitious,
                };
                let sigma = crate::material::degraded_stress(&eps, sv, mat, eta);
                let nrm = q.normal[j];
                for i in 0..3 {
                    force[i] += q.weight[j] * (0..3).map(|k| sigma[(i, k)] * nrm[k]).sum::<f64>();
                }
            }
        }
    }
    force
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Face;
    use crate::image::ValueKind;
    use crate::material::{MaterialParams, MaterialPoint};
    use crate::sparse::{LinearSolver, LinearSolverConfig};

    #[test]
    fn batched_cell_stiffness_matches_direct_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 10;
        let mut acc = StiffnessAccumulator::new(n);
        let mut direct = vec![0.0; 9 * n * n];
        for _ in 0..(2 * BATCH + 5) {
            let grads: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen::<f64>() - 0.5]).collect();
            let (lam, mu) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
            acc.push(&grads, lam, mu);
            add_elastic_block(&mut direct, &grads, lam, mu);
        }
        mirror_blocks(&mut direct, n);
        let k = acc.finish();
        let scale = direct.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, y) in k.iter().zip(&direct) {
            assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
        }
    }

    fn block_disc(n: [usize; 3], h: f64, spec: BasisSpec, mask: Option<Vec<bool>>) -> (VoxelImage, Discretization) {
        let len = n.iter().product();
        let img = VoxelImage::new(n, [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; len], mask).unwrap();
        let mat = MaterialTable::uniform(len, 1000.0, 1.0, MaterialParams::default());
        let disc = Discretization::new(&img, mat, spec, h, 1e-6, &QuadratureOptions::default()).unwrap();
        (img, disc)
    }

    #[test]
    fn single_cell_stiffness_has_rigid_translations() {
        let (_, disc) = block_disc([1, 1, 1], 1.0, BasisSpec::bspline(1), None);
        let n = disc.u_layout.num_dofs();
        let (k, _) = assemble_elastic(&disc, &vec![0.0; n], &vec![1.0; 8], &[], 0.0, 1e-5);
        assert!(k.asymmetry() < 1e-14);
        for comp in 0..3 {
            let t: Vec<f64> = (0..n).map(|i| (i % 3 == comp) as u8 as f64).collect();
            let mut kt = vec![0.0; n];
            k.mul_vec(&t, &mut kt);
            let scale = k.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(kt.iter().all(|v| v.abs() < 1e-12 * scale));
        }
    }

    #[test]
    fn fictitious_voxels_act_as_alpha_scaled_material() {
        // an outside voxel must assemble like an inside voxel of stiffness α·E
        let n = [4, 2, 2];
        let len = 16;
        let mask: Vec<bool> = (0..len).map(|v| v % 4 != 3).collect();
        let img = VoxelImage::new(n, [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; len], Some(mask)).unwrap();
        let params = MaterialParams::default();
        // no subdivision, so both discretizations share their quadrature points
        let opts = QuadratureOptions { depth: 0, ..Default::default() };
        let disc = Discretization::new(&img, MaterialTable::uniform(len, 1000.0, 1.0, params), BasisSpec::bspline(2), 2.0, 1e-6, &opts).unwrap();

        let full = VoxelImage::new(n, [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; len], None).unwrap();
        let mut table = MaterialTable::uniform(len, 1000.0, 1.0, params);
        for v in (0..len).filter(|v| v % 4 == 3) {
            table.voxels[v] = MaterialPoint::new(1000.0 * 1e-6, params.nu, 1.0, f64::NAN);
        }
        let reference = Discretization::new(&full, table, BasisSpec::bspline(2), 2.0, 1e-6, &opts).unwrap();
        assert_eq!(disc.quad.len(), reference.quad.len());

        let nd = disc.u_layout.num_dofs();
        let s = vec![1.0; disc.s_layout.num_dofs()];
        let (k, _) = assemble_elastic(&disc, &vec![0.0; nd], &s, &[], 0.0, 1e-5);
        let (r, _) = assemble_elastic(&reference, &vec![0.0; nd], &s, &[], 0.0, 1e-5);
        let scale = r.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in k.values.iter().zip(&r.values) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn history_is_a_running_maximum() {
        let mut h = vec![0.0; 4];
        let seq = [[1.0, 0.0, 3.0, 0.5], [0.5, 2.0, 1.0, 0.5], [2.0, 1.0, 0.0, 0.25]];
        let mut brute = [0.0f64; 4];
        for psi in &seq {
            h = update_history(&h, psi);
            for i in 0..4 {
                brute[i] = brute[i].max(psi[i]);
            }
            assert_eq!(h, brute.to_vec());
        }
    }

    #[test]
    fn phase_field_without_history_is_intact() {
        let (_, disc) = block_disc([4, 2, 2], 1.0, BasisSpec::bspline(2), None);
        let h = vec![0.0; disc.quad.len()];
        let (a, b) = assemble_phasefield(&disc, &h, PhaseFieldParams { l0: 1.0, eta: 1e-5 }, &[]).unwrap();
        let mut s = vec![0.0; b.len()];
        LinearSolver::new(LinearSolverConfig::default()).solve(&a, &b, &mut s).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(a.asymmetry() < 1e-14);
    }

    #[test]
    fn homogeneous_history_gives_algebraic_solution() {
        let (_, disc) = block_disc([3, 3, 3], 1.0, BasisSpec::legendre(2), None);
        let (l0, eta, hval, gc) = (1.5, 1e-5, 0.4, 1.0);
        let h = vec![hval; disc.quad.len()];
        let (a, b) = assemble_phasefield(&disc, &h, PhaseFieldParams { l0, eta }, &[]).unwrap();
        let mut s = vec![0.0; b.len()];
        LinearSolver::new(LinearSolverConfig::default()).solve(&a, &b, &mut s).unwrap();
        let expected = 1.0 / (1.0 + 4.0 * l0 * (1.0 - eta) * hval / gc);
        for v in phase_at_points(&disc, &s) {
            assert!((v - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn nonpositive_toughness_is_rejected() {
        let len = 8;
        let img = VoxelImage::new([2, 2, 2], [1.0; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; len], None).unwrap();
        let mut mat = MaterialTable::uniform(len, 1000.0, 1.0, MaterialParams::default());
        mat.voxels[3] = MaterialPoint::new(1000.0, 0.3, 0.0, 1.0);
        let disc = Discretization::new(&img, mat, BasisSpec::bspline(1), 1.0, 1e-6, &QuadratureOptions::default()).unwrap();
        let h = vec![0.0; disc.quad.len()];
        assert!(matches!(
            assemble_phasefield(&disc, &h, PhaseFieldParams { l0: 1.0, eta: 1e-5 }, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clamped_bar_gives_linear_displacement() {
        // uniaxial stress bar: symmetry planes plus prescribed end displacement
        let n = [2, 2, 8];
        let (img, disc) = block_disc(n, 1.0, BasisSpec::bspline(2), None);
        let pen = default_penalty(&disc.materials, disc.h());
        let delta = 0.01;
        let bcs = vec![
            DisplacementBc::new("x0", Region::face(Face::XMin), Constraint::Component { component: 0, value: 0.0 }, pen, &disc, &img).unwrap(),
            DisplacementBc::new("y0", Region::face(Face::YMin), Constraint::Component { component: 1, value: 0.0 }, pen, &disc, &img).unwrap(),
            DisplacementBc::new("z0", Region::face(Face::ZMin), Constraint::Component { component: 2, value: 0.0 }, pen, &disc, &img).unwrap(),
            DisplacementBc::new("z1", Region::face(Face::ZMax), Constraint::Loaded { component: 2, scale: 1.0 }, pen, &disc, &img).unwrap(),
        ];
        let nd = disc.u_layout.num_dofs();
        let s = vec![1.0; disc.s_layout.num_dofs()];
        let (k, f) = assemble_elastic(&disc, &vec![0.0; nd], &s, &bcs, delta, 1e-5);
        let mut u = vec![0.0; nd];
        LinearSolver::new(LinearSolverConfig { rtol: 1e-12, ..Default::default() }).solve(&k, &f, &mut u).unwrap();
        let nu = 0.3;
        let ez = delta / 8.0;
        let (c0, shape0) = disc.locate([1.0, 1.0, 4.0]).unwrap();
        let eps0 = disc.strain_at(&u, c0, &shape0);
        for x in [[0.3, 1.2, 0.0], [1.0, 1.0, 4.0], [2.0, 0.5, 7.9]] {
            let (c, shape) = disc.locate(x).unwrap();
            // the solution is exactly affine: strain is uniform
            let eps = disc.strain_at(&u, c, &shape);
            assert!((eps - eps0).amax() < 1e-10 * ez, "{x:?}");
            // penalty compliance at the ends costs O(1e-3 h / L) of the stretch
            let uh = disc.displacement_at(&u, c, &shape);
            let exact = [-nu * ez * x[0], -nu * ez * x[1], ez * x[2]];
            for i in 0..3 {
                assert!((uh[i] - exact[i]).abs() < 1e-3 * delta, "{x:?} {uh:?} {exact:?}");
            }
        }
        let f_end = reaction_force(&disc, &u, &s, &bcs[3], delta, 1e-5, ReactionMethod::Penalty);
        let f_start = reaction_force(&disc, &u, &s, &bcs[2], delta, 1e-5, ReactionMethod::Penalty);
        let analytic = 1000.0 * 4.0 * delta / 8.0;
        assert!((f_end[2] - analytic).abs() / analytic < 5e-3);
        assert!((f_end[2] + f_start[2]).abs() / analytic < 1e-3);
        let f_sigma = reaction_force(&disc, &u, &s, &bcs[3], delta, 1e-5, ReactionMethod::StressTraction);
        assert!((f_sigma[2] - analytic).abs() / analytic < 1e-2, "{f_sigma:?}");
    }
}
