//! ASCII VTK unstructured-grid (.vtu) output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::assembly::Discretization;
use crate::error::{Error, Result};
use crate::postproc::{point_fields, IsoVolume};

const HEXAHEDRON: u8 = 12;
const CORNERS: [(usize, usize, usize); 8] = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)];

/// Hexahedral mesh with point and cell arrays.
#[derive(Debug, Clone, Default)]
pub struct HexMesh {
    pub points: Vec<[f64; 3]>,
    pub hexes: Vec<[usize; 8]>,
    /// (name, components, values)
    pub point_data: Vec<(String, usize, Vec<f64>)>,
    pub cell_data: Vec<(String, usize, Vec<f64>)>,
}

impl HexMesh {
    pub fn write_vtu(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "<?xml version=\"1.0\"?>");
        let _ = writeln!(out, "<VTKFile type=\"UnstructuredGrid\" version=\"0.1\" byte_order=\"LittleEndian\">");
        let _ = writeln!(out, "<UnstructuredGrid>");
        let _ = writeln!(out, "<Piece NumberOfPoints=\"{}\" NumberOfCells=\"{}\">", self.points.len(), self.hexes.len());
        let _ = writeln!(out, "<Points>");
        data_array(&mut out, "Points", 3, self.points.iter().flatten().copied());
        let _ = writeln!(out, "</Points>");
        let _ = writeln!(out, "<Cells>");
        let _ = writeln!(out, "<DataArray type=\"Int64\" Name=\"connectivity\" format=\"ascii\">");
        for h in &self.hexes {
            let line: Vec<String> = h.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        let _ = writeln!(out, "</DataArray>");
        let _ = writeln!(out, "<DataArray type=\"Int64\" Name=\"offsets\" format=\"ascii\">");
        for i in 0..self.hexes.len() {
            let _ = writeln!(out, "{}", 8 * (i + 1));
        }
        let _ = writeln!(out, "</DataArray>");
        let _ = writeln!(out, "<DataArray type=\"UInt8\" Name=\"types\" format=\"ascii\">");
        for _ in &self.hexes {
            let _ = writeln!(out, "{HEXAHEDRON}");
        }
        let _ = writeln!(out, "</DataArray>");
        let _ = writeln!(out, "</Cells>");
        let _ = writeln!(out, "<PointData>");
        for (name, comp, vals) in &self.point_data {
            data_array(&mut out, name, *comp, vals.iter().copied());
        }
        let _ = writeln!(out, "</PointData>");
        let _ = writeln!(out, "<CellData>");
        for (name, comp, vals) in &self.cell_data {
            data_array(&mut out, name, *comp, vals.iter().copied());
        }
        let _ = writeln!(out, "</CellData>");
        let _ = writeln!(out, "</Piece>");
        let _ = writeln!(out, "</UnstructuredGrid>");
        let _ = writeln!(out, "</VTKFile>");
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn data_array(out: &mut String, name: &str, comp: usize, vals: impl Iterator<Item = f64>) {
    let _ = writeln!(
        out,
        "<DataArray type=\"Float64\" Name=\"{name}\" NumberOfComponents=\"{comp}\" format=\"ascii\">"
    );
    for (i, v) in vals.enumerate() {
        // VTK readers reject "NaN"/"inf" tokens in some versions; write them as 0
        let v = if v.is_finite() { v } else { 0.0 };
        out.push_str(&format!("{v:e}"));
        out.push(if (i + 1) % comp == 0 { '\n' } else { ' ' });
    }
    let _ = writeln!(out, "</DataArray>");
}

/// Sample the fields on every active cell split into `sub` sub-cells per
/// axis. Point data: u, s. Cell data: alpha, H, σ₁, σ₃, ε₃ at sub-cell centers.
pub fn field_mesh(disc: &Discretization, u: &[f64], s: &[f64], history: &[f64], eta: f64, sub: usize) -> HexMesh {
    let sub = sub.max(1);
    let d = 1.0 / sub as f64;
    let pieces: Vec<HexMesh> = (0..disc.grid.num_active())
        .into_par_iter()
        .map(|c| {
            let ijk = disc.cell_ijk(c);
            let mut m = HexMesh::default();
            let mut uvals = Vec::new();
            let mut svals = Vec::new();
            let mut cell_vals: [Vec<f64>; 5] = Default::default();
            let quad = disc.quad.cell_range(c);
            let h_cell = if quad.is_empty() {
                0.0
            } else {
                let w: f64 = quad.clone().map(|q| disc.quad.weights[q]).sum();
                quad.clone().map(|q| disc.quad.weights[q] * history[q]).sum::<f64>() / w
            };
            for k in 0..sub {
                for j in 0..sub {
                    for i in 0..sub {
                        let base = m.points.len();
                        for &(cx, cy, cz) in &CORNERS {
                            let xi = [(i + cx) as f64 * d, (j + cy) as f64 * d, (k + cz) as f64 * d];
                            let pf = point_fields(disc, u, s, c, xi, eta);
                            m.points.push(disc.grid.to_physical(ijk, xi));
                            uvals.extend_from_slice(&pf.u);
                            svals.push(pf.s);
                        }
                        m.hexes.push(std::array::from_fn(|n| base + n));
                        let xi = [(i as f64 + 0.5) * d, (j as f64 + 0.5) * d, (k as f64 + 0.5) * d];
                        let pf = point_fields(disc, u, s, c, xi, eta);
                        let alpha = disc.grid.indicator(disc.grid.to_physical(ijk, xi)).unwrap_or(disc.grid.alpha_fcm);
                        for (dst, v) in cell_vals.iter_mut().zip([alpha, h_cell, pf.sigma1, pf.sigma3, pf.eps3 * 1e6]) {
                            dst.push(v);
                        }
                    }
                }
            }
            m.point_data = vec![("u".into(), 3, uvals), ("s".into(), 1, svals)];
            let names = ["alpha", "H", "sigma1", "sigma3", "eps3_ustrain"];
            m.cell_data = names.iter().zip(cell_vals).map(|(n, v)| (n.to_string(), 1, v)).collect();
            m
        })
        .collect();
    merge(pieces)
}

fn merge(pieces: Vec<HexMesh>) -> HexMesh {
    let mut out = HexMesh::default();
    for p in pieces {
        let off = out.points.len();
        out.points.extend(p.points);
        out.hexes.extend(p.hexes.into_iter().map(|h| h.map(|i| i + off)));
        for (dst, src) in [(&mut out.point_data, p.point_data), (&mut out.cell_data, p.cell_data)] {
            if dst.is_empty() {
                *dst = src;
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    d.2.extend(s.2);
                }
            }
        }
    }
    out
}

/// Iso-volume as a mesh with the phase field as cell data.
pub fn isovolume_mesh(iso: &IsoVolume) -> HexMesh {
    HexMesh {
        points: iso.points.clone(),
        hexes: iso.hexes.clone(),
        point_data: vec![],
        cell_data: vec![("s".into(), 1, iso.s.clone())],
    }
}
