//! Voxel images and their raw + sidecar on-disk format.
//!
//! The sidecar is a JSON document next to the raw scalar array. Paths inside
//! it are resolved relative to the sidecar's directory. See `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;

/// What the scalar values of an image represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// Hounsfield units; needs a linear calibration to mineral density.
    Hu,
    /// Equivalent K2HPO4 mineral density [g/cm³].
    MineralDensity,
    /// Ash density [g/cm³].
    AshDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawType {
    F32,
    I16,
}

/// Linear map from Hounsfield units to K2HPO4-equivalent density [g/cm³].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuCalibration {
    pub slope: f64,
    pub intercept: f64,
}

impl HuCalibration {
    pub fn apply(&self, hu: f64) -> f64 {
        self.slope * hu + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelImage {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: ValueKind,
    /// Scalar values, x fastest.
    pub values: Vec<f64>,
    /// Inside/outside flags; `None` means every voxel is inside.
    pub mask: Option<Vec<bool>>,
    pub hu_calibration: Option<HuCalibration>,
}

impl VoxelImage {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: ValueKind,
        values: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let image = VoxelImage {
            dims,
            spacing,
            origin,
            kind,
            values,
            mask,
            hu_calibration: None,
        };
        image.validate()?;
        Ok(image)
    }

    pub fn with_hu_calibration(mut self, calibration: HuCalibration) -> Self {
        self.hu_calibration = Some(calibration);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidImage(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidImage(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidImage("origin must be finite".into()));
        }
        let n = self.len();
        if self.values.len() != n {
            return Err(Error::InvalidImage(format!(
                "expected {} values for dims {:?}, got {}",
                n,
                self.dims,
                self.values.len()
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != n {
                return Err(Error::InvalidImage(format!(
                    "mask has {} entries, expected {}",
                    mask.len(),
                    n
                )));
            }
        }
        if self.kind == ValueKind::Hu && self.hu_calibration.is_none() {
            log::debug!("HU image without calibration; one must be supplied before material mapping");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn is_inside(&self, index: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[index])
    }

    pub fn inside_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.len(), |m| m.iter().filter(|&&b| b).count())
    }

    pub fn bounding_box(&self) -> Aabb {
        let mut max = self.origin;
        for a in 0..3 {
            max[a] += self.dims[a] as f64 * self.spacing[a];
        }
        Aabb::new(self.origin, max)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Center of voxel `ijk`.
    pub fn voxel_center(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (ijk[a] as f64 + 0.5) * self.spacing[a])
    }

    /// Voxel containing `x`, or `None` when `x` is outside the image.
    ///
    /// A point on a face shared by two voxels belongs to the lower-index one.
    pub fn locate(&self, x: [f64; 3]) -> Option<[usize; 3]> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let t = (x[a] - self.origin[a]) / self.spacing[a];
            if !(t >= 0.0 && t <= self.dims[a] as f64) {
                return None;
            }
            let i = (t.ceil() as isize - 1).max(0) as usize;
            ijk[a] = i.min(self.dims[a] - 1);
        }
        Some(ijk)
    }

    /// Voxel containing `x` as a linear index.
    pub fn locate_index(&self, x: [f64; 3]) -> Option<usize> {
        self.locate(x).map(|ijk| self.linear_index(ijk))
    }

    /// Replace the mask by `value >= threshold`.
    pub fn threshold_mask(&mut self, threshold: f64) {
        self.mask = Some(self.values.iter().map(|&v| v >= threshold).collect());
    }

    /// Read an image from its JSON sidecar.
    pub fn load(sidecar: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let meta: ImageSidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: sidecar.to_path_buf(),
            source: e,
        })?;
        let dir = sidecar.parent().unwrap_or_else(|| Path::new("."));
        let n: usize = meta.dims.iter().product();

        let data_path = dir.join(&meta.data);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let values = decode_raw(&bytes, meta.dtype, n)
            .map_err(|msg| Error::InvalidImage(format!("{}: {msg}", data_path.display())))?;

        let mask = match &meta.mask {
            Some(rel) => {
                let mask_path = dir.join(rel);
                let bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
                if bytes.len() != n {
                    return Err(Error::InvalidImage(format!(
                        "{}: expected {} mask bytes, got {}",
                        mask_path.display(),
                        n,
                        bytes.len()
                    )));
                }
                Some(bytes.iter().map(|&b| b != 0).collect())
            }
            None => None,
        };

        let mut image = VoxelImage {
            dims: meta.dims,
            spacing: meta.spacing,
            origin: meta.origin,
            kind: meta.kind,
            values,
            mask,
            hu_calibration: meta.hu_calibration,
        };
        if image.mask.is_none() {
            if let Some(t) = meta.inside_threshold {
                image.threshold_mask(t);
            }
        }
        image.validate()?;
        Ok(image)
    }

    /// Write `<stem>.raw`, `<stem>_mask.raw` (if masked) and `<stem>.json` into `dir`.
    /// Returns the sidecar path.
    pub fn save(&self, dir: &Path, stem: &str, dtype: RawType) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data_name = format!("{stem}.raw");
        let data_path = dir.join(&data_name);
        fs::write(&data_path, encode_raw(&self.values, dtype)).map_err(|e| Error::io(&data_path, e))?;

        let mask_name = match &self.mask {
            Some(mask) => {
                let name = format!("{stem}_mask.raw");
                let path = dir.join(&name);
                let bytes: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                Some(name)
            }
            None => None,
        };

        let meta = ImageSidecar {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            kind: self.kind,
            dtype,
            data: data_name,
            mask: mask_name,
            hu_calibration: self.hu_calibration,
            inside_threshold: None,
        };
        let sidecar = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
        fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }
}

/// JSON sidecar describing a raw voxel array.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: ValueKind,
    pub dtype: RawType,
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hu_calibration: Option<HuCalibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inside_threshold: Option<f64>,
}

fn decode_raw(bytes: &[u8], dtype: RawType, n: usize) -> std::result::Result<Vec<f64>, String> {
    let width = match dtype {
        RawType::F32 => 4,
        RawType::I16 => 2,
    };
    if bytes.len() != n * width {
        return Err(format!("expected {} bytes, got {}", n * width, bytes.len()));
    }
    Ok(match dtype {
        RawType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        RawType::I16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
    })
}

fn encode_raw(values: &[f64], dtype: RawType) -> Vec<u8> {
    match dtype {
        RawType::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        RawType::I16 => values
            .iter()
            .flat_map(|&v| (v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize) -> VoxelImage {
        VoxelImage::new(
            [n, n, n],
            [1.0; 3],
            [0.0; 3],
            ValueKind::AshDensity,
            vec![1.0; n * n * n],
            None,
        )
        .unwrap()
    }

    #[test]
    fn rejects_inconsistent_lengths() {
        let err = VoxelImage::new([2, 2, 2], [1.0; 3], [0.0; 3], ValueKind::Hu, vec![0.0; 7], None);
        assert!(matches!(err, Err(Error::InvalidImage(_))));
        let err = VoxelImage::new([0, 2, 2], [1.0; 3], [0.0; 3], ValueKind::Hu, vec![], None);
        assert!(matches!(err, Err(Error::InvalidImage(_))));
        let err = VoxelImage::new([1, 1, 1], [1.0, -1.0, 1.0], [0.0; 3], ValueKind::Hu, vec![0.0], None);
        assert!(matches!(err, Err(Error::InvalidImage(_))));
    }

    #[test]
    fn locate_uses_lower_index_on_faces() {
        let img = cube(4);
        assert_eq!(img.locate([0.5, 0.5, 0.5]), Some([0, 0, 0]));
        assert_eq!(img.locate([1.0, 2.0, 3.0]), Some([0, 1, 2]));
        assert_eq!(img.locate([0.0, 0.0, 0.0]), Some([0, 0, 0]));
        assert_eq!(img.locate([4.0, 4.0, 4.0]), Some([3, 3, 3]));
        assert_eq!(img.locate([4.0 + 1e-9, 1.0, 1.0]), None);
        assert_eq!(img.locate([-1e-12, 1.0, 1.0]), None);
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = cube(3);
        img.values = (0..27).map(|i| i as f64 * 0.25).collect();
        img.mask = Some((0..27).map(|i| i % 2 == 0).collect());
        let sidecar = img.save(dir.path(), "img", RawType::F32).unwrap();
        let back = VoxelImage::load(&sidecar).unwrap();
        assert_eq!(back, img);

        let sidecar = img.save(dir.path(), "img16", RawType::I16).unwrap();
        let back = VoxelImage::load(&sidecar).unwrap();
        assert_eq!(back.values[8], 2.0);
    }

    #[test]
    fn threshold_from_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = cube(2);
        img.values = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        img.save(dir.path(), "t", RawType::F32).unwrap();
        let path = dir.path().join("t.json");
        let mut meta: ImageSidecar =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        meta.inside_threshold = Some(4.0);
        fs::write(&path, serde_json::to_string(&meta).unwrap()).unwrap();
        let back = VoxelImage::load(&path).unwrap();
        assert_eq!(back.inside_count(), 4);
    }
}
