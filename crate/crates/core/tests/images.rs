use fcm_fracture::image::{HuCalibration, RawType, ValueKind, VoxelImage};
use fcm_fracture::material::{ash_to_e, e_to_gc, hu_to_ash, MaterialParams, MaterialTable};
use fcm_fracture::Error;

fn hu_image(cal: Option<HuCalibration>) -> VoxelImage {
    let values: Vec<f64> = (0..24).map(|i| 200.0 + 75.0 * i as f64).collect();
    let mask = Some((0..24).map(|i| i % 5 != 0).collect());
    VoxelImage {
        dims: [4, 3, 2],
        spacing: [0.5; 3],
        origin: [1.0, 0.0, -2.0],
        kind: ValueKind::Hu,
        values,
        mask,
        hu_calibration: cal,
    }
}

#[test]
fn hu_values_follow_the_density_chain() {
    let cal = HuCalibration { slope: 8e-4, intercept: -0.01 };
    let dir = tempfile::tempdir().unwrap();
    let sidecar = hu_image(Some(cal)).save(dir.path(), "ct", RawType::I16).unwrap();
    let img = VoxelImage::load(&sidecar).unwrap();
    assert_eq!(img.kind, ValueKind::Hu);
    assert_eq!(img.hu_calibration, Some(cal));
    let params = MaterialParams::default();
    let table = MaterialTable::from_image(&img, params).unwrap();
    for (i, &hu) in img.values.iter().enumerate() {
        let rho = hu_to_ash(cal.slope * hu + cal.intercept);
        let m = &table.voxels[i];
        let e = ash_to_e(rho).max(params.e_min);
        assert!((m.e - e).abs() <= 1e-12 * e, "voxel {i}: {} vs {e}", m.e);
        let gc = e_to_gc(e, params.gc0, params.e0, params.beta);
        assert!((m.gc - gc).abs() <= 1e-12 * gc);
    }
    // the fictitious material is the stiffest inside voxel
    let stiffest = (0..24).filter(|&i| img.is_inside(i)).map(|i| table.voxels[i].e).fold(0.0, f64::max);
    assert_eq!(table.fictitious.e, stiffest);
}

#[test]
fn hu_image_without_calibration_is_rejected() {
    let err = MaterialTable::from_image(&hu_image(None), MaterialParams::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("hu_calibration"));
}

#[test]
fn i16_storage_rounds_to_whole_units() {
    let mut img = hu_image(Some(HuCalibration { slope: 1e-3, intercept: 0.0 }));
    img.values[3] = 1234.4;
    let dir = tempfile::tempdir().unwrap();
    let back = VoxelImage::load(&img.save(dir.path(), "ct", RawType::I16).unwrap()).unwrap();
    assert_eq!(back.values[3], 1234.0);
    assert_eq!(back.mask, img.mask);
    assert_eq!(back.origin, img.origin);
}
