use std::path::Path;

use chrono::NaiveDate;
use ndarray::{ArrayD, IxDyn};
use physode::datasets::catalog::{ERA5_ATMOSPHERIC, ERA5_CONSTANT, ERA5_LEVELS, ERA5_SURFACE};
use physode::datasets::era5::write_weatherbench_file;
use physode::datasets::{load_era5_subset, CatalogEntry, Era5Request, TimeRange, VariableCatalog, VariableKind};
use physode::grid::{Boundary, GridSpec};
use physode::Error;

fn value(var: usize, t: f64, level: usize, i: usize, j: usize) -> f64 {
    100.0 * var as f64 + t + 0.1 * level as f64 + 0.01 * i as f64 + 0.001 * j as f64
}

fn write_all(dir: &Path, grid: &GridSpec, hours: &[f64]) {
    let (h, w) = (grid.height, grid.width);
    for (v, name) in ERA5_CONSTANT.iter().enumerate() {
        let data = ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| value(v, 0.0, 0, ix[0], ix[1]));
        write_weatherbench_file(&dir.join(format!("{name}.nc")), name, &[], None, grid, data).unwrap();
    }
    for (v, name) in ERA5_SURFACE.iter().enumerate() {
        let data = ArrayD::from_shape_fn(IxDyn(&[hours.len(), h, w]), |ix| value(10 + v, hours[ix[0]], 0, ix[1], ix[2]));
        write_weatherbench_file(&dir.join(format!("{name}.nc")), name, hours, None, grid, data).unwrap();
    }
    for (v, name) in ERA5_ATMOSPHERIC.iter().enumerate() {
        let data = ArrayD::from_shape_fn(IxDyn(&[hours.len(), ERA5_LEVELS.len(), h, w]), |ix| {
            value(20 + v, hours[ix[0]], ix[1], ix[2], ix[3])
        });
        let sub = dir.join("atmos");
        std::fs::create_dir_all(&sub).unwrap();
        write_weatherbench_file(&sub.join(format!("{name}.nc")), name, hours, Some(&ERA5_LEVELS), grid, data).unwrap();
    }
}

fn request(root: &Path, lead: usize) -> Era5Request {
    Era5Request {
        root: root.to_path_buf(),
        catalog: VariableCatalog::era5_default(),
        range: TimeRange {
            start: NaiveDate::from_ymd_opt(1979, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            end: NaiveDate::from_ymd_opt(1980, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        },
        split: None,
        lead,
        stride_hours: 1,
        history: 0,
        lat_boundary: Boundary::Clamp,
    }
}

#[test]
fn full_catalog_on_the_coarse_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec::global(32, 64, Boundary::Clamp).unwrap();
    write_all(dir.path(), &grid, &[0.0, 1.0, 2.0]);
    let d = load_era5_subset(&request(dir.path(), 2)).unwrap();
    assert_eq!(d.len(), 1);
    let s = &d.samples[0];
    assert_eq!(s.input.shape(), &[48, 32, 64]);
    assert_eq!(s.targets.shape(), &[2, 48, 32, 64]);
    assert_eq!(d.grid.lon_boundary, Boundary::Periodic);
    assert_eq!(d.grid.latitudes, grid.latitudes);

    // 1979-01-01T00 in hours since the Unix epoch.
    assert_eq!(s.t0_hours, 9.0 * 365.0 * 24.0 + 2.0 * 24.0);
    let cat = &d.catalog;
    let z500 = cat.index_of("z500").unwrap();
    let lsm = cat.index_of("lsm").unwrap();
    let t2m = cat.index_of("t2m").unwrap();
    assert_eq!(s.input[[z500, 3, 5]], value(20, 0.0, 2, 3, 5));
    assert_eq!(s.targets[[1, z500, 3, 5]], value(20, 2.0, 2, 3, 5));
    assert_eq!(s.targets[[0, t2m, 0, 63]], value(10, 1.0, 0, 0, 63));
    assert_eq!(s.targets[[1, lsm, 7, 7]], value(0, 0.0, 0, 7, 7));
}

fn small_catalog() -> VariableCatalog {
    VariableCatalog::new(vec![
        CatalogEntry {
            name: "t2m".into(),
            kind: VariableKind::Surface,
            level: None,
        },
        CatalogEntry {
            name: "z".into(),
            kind: VariableKind::Atmospheric,
            level: Some(500),
        },
    ])
    .unwrap()
}

fn write_small(dir: &Path, hours: &[f64], levels: &[u32], nan_at: Option<usize>) -> GridSpec {
    let grid = GridSpec::global(4, 8, Boundary::Clamp).unwrap();
    let mut t2m = ArrayD::from_shape_fn(IxDyn(&[hours.len(), 4, 8]), |ix| hours[ix[0]] + ix[1] as f64);
    if let Some(t) = nan_at {
        t2m[[t, 0, 0]] = f64::NAN;
    }
    write_weatherbench_file(&dir.join("t2m.nc"), "t2m", hours, None, &grid, t2m).unwrap();
    let z = ArrayD::from_shape_fn(IxDyn(&[hours.len(), levels.len(), 4, 8]), |ix| ix[1] as f64 + ix[3] as f64);
    write_weatherbench_file(&dir.join("z.nc"), "z", hours, Some(levels), &grid, z).unwrap();
    grid
}

fn small_request(root: &Path, lead: usize) -> Era5Request {
    Era5Request {
        catalog: small_catalog(),
        ..request(root, lead)
    }
}

#[test]
fn windows_with_stride_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let hours: Vec<f64> = (0..10).map(f64::from).collect();
    write_small(dir.path(), &hours, &[250, 500], None);
    let mut req = small_request(dir.path(), 3);
    assert_eq!(load_era5_subset(&req).unwrap().len(), 7);
    req.stride_hours = 2;
    req.history = 2;
    let d = load_era5_subset(&req).unwrap();
    // starts at 2, 4, 6
    assert_eq!(d.len(), 3);
    let s = &d.samples[1];
    assert_eq!(s.input[[0, 1, 0]], 4.0 + 1.0);
    assert_eq!(s.lagged(2).unwrap()[[0, 1, 0]], 2.0 + 1.0);
    assert_eq!(s.input[[1, 0, 3]], 1.0 + 3.0);
}

#[test]
fn gaps_and_missing_values_are_named() {
    let dir = tempfile::tempdir().unwrap();
    write_small(dir.path(), &[0.0, 1.0, 3.0, 4.0], &[500], None);
    match load_era5_subset(&small_request(dir.path(), 1)) {
        Err(Error::Ingestion { variable, msg }) => {
            assert_eq!(variable, "t2m");
            assert!(msg.contains("gap"), "{msg}");
        }
        other => panic!("expected an ingestion error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    write_small(dir.path(), &[0.0, 1.0, 2.0], &[500], Some(1));
    assert!(matches!(
        load_era5_subset(&small_request(dir.path(), 1)),
        Err(Error::Ingestion { ref variable, .. }) if variable == "t2m"
    ));

    let dir = tempfile::tempdir().unwrap();
    write_small(dir.path(), &[0.0, 1.0, 2.0], &[250, 850], None);
    assert!(matches!(
        load_era5_subset(&small_request(dir.path(), 1)),
        Err(Error::Ingestion { ref variable, .. }) if variable == "z500"
    ));
}

#[test]
fn too_short_a_record_gives_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    write_small(dir.path(), &[0.0, 1.0], &[500], None);
    assert!(load_era5_subset(&small_request(dir.path(), 2)).unwrap().is_empty());
}
