//! Boundary regions and their quadrature on the embedded grid.
//!
//! Every region is turned into a set of triangles, each triangle is clipped
//! against the cells it overlaps, and the clipped polygons are integrated
//! with a collapsed Gauss rule. Box faces are tiled with voxel-face squares so
//! that `physical_only` faces follow the mask exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add, cross, dot, norm, scale, sub, Face};
use crate::grid::EmbeddedGrid;
use crate::image::VoxelImage;
use crate::quadrature::gauss_legendre;

pub type Triangle = [[f64; 3]; 3];

/// Where a boundary condition acts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    /// A face of the image bounding box.
    BoxFace {
        face: Face,
        /// In-plane bounds [[lo, hi], [lo, hi]] along the two remaining axes
        /// in ascending axis order; unbounded if absent.
        #[serde(default)]
        bounds: Option<[[f64; 2]; 2]>,
        /// Only integrate over voxel faces of inside voxels.
        #[serde(default = "default_true")]
        physical_only: bool,
    },
    /// Triangulated surface with outward-oriented triangles [mm].
    Triangles {
        #[serde(skip)]
        triangles: Vec<Triangle>,
        /// Source file (ASCII STL), kept for provenance.
        #[serde(default)]
        path: Option<String>,
    },
}

fn default_true() -> bool {
    true
}

impl Region {
    pub fn face(face: Face) -> Self {
        Region::BoxFace {
            face,
            bounds: None,
            physical_only: true,
        }
    }

    pub fn full_face(face: Face) -> Self {
        Region::BoxFace {
            face,
            bounds: None,
            physical_only: false,
        }
    }

    pub fn triangles(triangles: Vec<Triangle>) -> Self {
        Region::Triangles { triangles, path: None }
    }

    /// Load the triangles of a `Triangles` region from its `path`.
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        if let Region::Triangles { triangles, path: Some(p) } = self {
            if triangles.is_empty() {
                *triangles = read_ascii_stl(&base.join(p.as_str()))?;
            }
        }
        Ok(())
    }
}

/// Quadrature on a boundary region; weights are physical areas [mm²].
#[derive(Debug, Clone, Default)]
pub struct SurfaceQuadrature {
    pub cell: Vec<u32>,
    pub local: Vec<[f64; 3]>,
    pub point: Vec<[f64; 3]>,
    pub weight: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
}

impl SurfaceQuadrature {
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// Triangles covering a region.
pub fn region_triangles(region: &Region, image: &VoxelImage) -> Vec<Triangle> {
    match region {
        Region::Triangles { triangles, .. } => triangles.clone(),
        Region::BoxFace { face, bounds, physical_only } => {
            face_triangles(*face, bounds.as_ref(), *physical_only, image)
        }
    }
}

fn face_triangles(face: Face, bounds: Option<&[[f64; 2]; 2]>, physical_only: bool, image: &VoxelImage) -> Vec<Triangle> {
    let a = face.axis();
    let (b, c) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let bbox = image.bounding_box();
    let layer = if face.is_max() { image.dims[a] - 1 } else { 0 };
    let plane = if face.is_max() { bbox.max[a] } else { bbox.min[a] };
    let mut tris = Vec::new();
    for jc in 0..image.dims[c] {
        for jb in 0..image.dims[b] {
            let mut ijk = [0usize; 3];
            ijk[a] = layer;
            ijk[b] = jb;
            ijk[c] = jc;
            if physical_only && !image.is_inside(image.linear_index(ijk)) {
                continue;
            }
            let b0 = image.origin[b] + jb as f64 * image.spacing[b];
            let c0 = image.origin[c] + jc as f64 * image.spacing[c];
            let b1 = b0 + image.spacing[b];
            let c1 = c0 + image.spacing[c];
            if let Some(bd) = bounds {
                let (mb, mc) = (0.5 * (b0 + b1), 0.5 * (c0 + c1));
                if mb < bd[0][0] || mb > bd[0][1] || mc < bd[1][0] || mc > bd[1][1] {
                    continue;
                }
            }
            let p = |u: f64, v: f64| {
                let mut x = [0.0; 3];
                x[a] = plane;
                x[b] = u;
                x[c] = v;
                x
            };
            let (q00, q10, q11, q01) = (p(b0, c0), p(b1, c0), p(b1, c1), p(b0, c1));
            // orient so that the triangle normal is the outward face normal
            let n = face.normal();
            let t1 = [q00, q10, q11];
            let t2 = [q00, q11, q01];
            if dot(triangle_normal(&t1), n) >= 0.0 {
                tris.push(t1);
                tris.push(t2);
            } else {
                tris.push([q00, q11, q10]);
                tris.push([q00, q01, q11]);
            }
        }
    }
    tris
}

fn triangle_normal(t: &Triangle) -> [f64; 3] {
    cross(sub(t[1], t[0]), sub(t[2], t[0]))
}

/// Build the quadrature of `region` on the active cells of `grid`, exact for
/// polynomials of degree 2·order + 1 on each clipped piece.
pub fn build_surface_quadrature(region: &Region, grid: &EmbeddedGrid, image: &VoxelImage) -> SurfaceQuadrature {
    let tris = region_triangles(region, image);
    let n = grid.order + 1;
    let rule = triangle_rule(n);
    let mut q = SurfaceQuadrature::default();
    let tol = 1e-9 * grid.h;

    for tri in &tris {
        let nrm = triangle_normal(tri);
        let area2 = norm(nrm);
        if area2 <= tol * tol {
            continue;
        }
        let unit = scale(nrm, 1.0 / area2);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let mn = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let mx = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            let to_cell = |x: f64| {
                let t = (x - grid.bounding_box.min[a]) / grid.h;
                ((t.ceil() as isize - 1).max(0) as usize).min(grid.n_cells[a] - 1)
            };
            lo[a] = to_cell(mn);
            hi[a] = to_cell(mx);
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let ijk = [i, j, k];
                    let Some(active) = grid.active_index(ijk) else { continue };
                    let cb = grid.cell_box(ijk);
                    let poly = clip_to_box(tri.to_vec(), &cb.min, &cb.max, tol);
                    if poly.len() < 3 {
                        continue;
                    }
                    for m in 1..poly.len() - 1 {
                        let sub_tri = [poly[0], poly[m], poly[m + 1]];
                        let area = 0.5 * norm(triangle_normal(&sub_tri));
                        if area <= tol * grid.h {
                            continue;
                        }
                        for &(l1, l2, w) in &rule {
                            let x = add(
                                sub_tri[0],
                                add(scale(sub(sub_tri[1], sub_tri[0]), l1), scale(sub(sub_tri[2], sub_tri[0]), l2)),
                            );
                            let lo = grid.cell_origin(ijk);
                            let xi = std::array::from_fn(|a| ((x[a] - lo[a]) / grid.h).clamp(0.0, 1.0));
                            q.cell.push(active as u32);
                            q.local.push(xi);
                            q.point.push(x);
                            q.weight.push(w * 2.0 * area);
                            q.normal.push(unit);
                        }
                    }
                }
            }
        }
    }
    q
}

/// Collapsed Gauss rule on the unit triangle: (λ1, λ2, weight), weights sum to 1/2.
pub fn triangle_rule(n: usize) -> Vec<(f64, f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let mut out = Vec::with_capacity(n * n);
    for (&u, &wu) in x.iter().zip(&w) {
        for (&v, &wv) in x.iter().zip(&w) {
            // (u, v) in unit square -> triangle via Duffy map
            out.push((u * (1.0 - v), v, wu * wv * (1.0 - v)));
        }
    }
    out
}

/// Sutherland-Hodgman clipping of a planar polygon against an axis-aligned box.
fn clip_to_box(mut poly: Vec<[f64; 3]>, lo: &[f64; 3], hi: &[f64; 3], tol: f64) -> Vec<[f64; 3]> {
    for a in 0..3 {
        for (bound, sign) in [(lo[a], 1.0), (hi[a], -1.0)] {
            if poly.is_empty() {
                return poly;
            }
            let dist = |p: &[f64; 3]| sign * (p[a] - bound);
            let mut out = Vec::with_capacity(poly.len() + 2);
            for i in 0..poly.len() {
                let cur = poly[i];
                let next = poly[(i + 1) % poly.len()];
                let dc = dist(&cur);
                let dn = dist(&next);
                let cin = dc >= -tol;
                let nin = dn >= -tol;
                if cin {
                    out.push(cur);
                }
                if cin != nin {
                    let t = dc / (dc - dn);
                    let mut p = add(cur, scale(sub(next, cur), t));
                    p[a] = bound;
                    out.push(p);
                }
            }
            poly = out;
        }
    }
    poly
}

/// Read triangles from an ASCII STL file.
pub fn read_ascii_stl(path: &Path) -> Result<Vec<Triangle>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut verts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        if it.next() == Some("vertex") {
            let coords: Vec<f64> = it
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("{}:{}: bad vertex: {e}", path.display(), lineno + 1)))?;
            if coords.len() != 3 {
                return Err(Error::Config(format!(
                    "{}:{}: vertex needs 3 coordinates",
                    path.display(),
                    lineno + 1
                )));
            }
            verts.push([coords[0], coords[1], coords[2]]);
        }
    }
    if verts.is_empty() || verts.len() % 3 != 0 {
        return Err(Error::Config(format!(
            "{}: expected a positive multiple of 3 vertices, found {}",
            path.display(),
            verts.len()
        )));
    }
    Ok(verts.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Write triangles as ASCII STL.
pub fn write_ascii_stl(path: &Path, name: &str, tris: &[Triangle]) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = format!("solid {name}\n");
    for t in tris {
        let n = triangle_normal(t);
        let l = norm(n).max(f64::MIN_POSITIVE);
        let _ = writeln!(s, "  facet normal {} {} {}", n[0] / l, n[1] / l, n[2] / l);
        s.push_str("    outer loop\n");
        for v in t {
            let _ = writeln!(s, "      vertex {} {} {}", v[0], v[1], v[2]);
        }
        s.push_str("    endloop\n  endfacet\n");
    }
    let _ = writeln!(s, "endsolid {name}");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::image::ValueKind;

    fn box_image(n: [usize; 3], spacing: f64, inside: impl Fn([usize; 3]) -> bool) -> VoxelImage {
        let len = n.iter().product();
        let mut mask = vec![false; len];
        for k in 0..n[2] {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    mask[i + n[0] * (j + n[1] * k)] = inside([i, j, k]);
                }
            }
        }
        VoxelImage::new(n, [spacing; 3], [0.0; 3], ValueKind::AshDensity, vec![1.0; len], Some(mask)).unwrap()
    }

    #[test]
    fn triangle_rule_is_exact() {
        let r = triangle_rule(3);
        let w: f64 = r.iter().map(|t| t.2).sum();
        assert!((w - 0.5).abs() < 1e-14);
        // ∫ x^2 y over the unit triangle = 2!1!/5! = 1/60
        let q: f64 = r.iter().map(|&(x, y, w)| w * x * x * y).sum();
        assert!((q - 1.0 / 60.0).abs() < 1e-14);
    }

    #[test]
    fn face_area_on_non_aligned_grid() {
        let img = box_image([7, 5, 6], 0.5, |_| true);
        let g = build_grid(&img, 0.8, 2).unwrap();
        for face in Face::ALL {
            let q = build_surface_quadrature(&Region::face(face), &g, &img);
            let ext = img.bounding_box().extent();
            let a = face.axis();
            let expected: f64 = (0..3).filter(|&b| b != a).map(|b| ext[b]).product();
            assert!((q.area() - expected).abs() < 1e-10, "{face:?}");
            for n in &q.normal {
                assert_eq!(*n, face.normal());
            }
        }
    }

    #[test]
    fn physical_only_face_follows_mask() {
        let img = box_image([4, 4, 4], 1.0, |ijk| ijk[0] < 2);
        let g = build_grid(&img, 1.5, 1).unwrap();
        let q = build_surface_quadrature(&Region::face(Face::ZMin), &g, &img);
        assert!((q.area() - 8.0).abs() < 1e-12);
        // the full face is still limited to active cells (x < 3)
        let q = build_surface_quadrature(&Region::full_face(Face::ZMin), &g, &img);
        assert!((q.area() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_on_shared_cell_face_is_counted_once() {
        let img = box_image([4, 4, 4], 1.0, |_| true);
        let g = build_grid(&img, 1.0, 1).unwrap();
        let tri = [[2.0, 0.5, 0.5], [2.0, 3.5, 0.5], [2.0, 0.5, 3.5]];
        let q = build_surface_quadrature(&Region::triangles(vec![tri]), &g, &img);
        assert!((q.area() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn stl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.stl");
        let tris = vec![[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.25]]];
        write_ascii_stl(&p, "s", &tris).unwrap();
        assert_eq!(read_ascii_stl(&p).unwrap(), tris);
    }
}
