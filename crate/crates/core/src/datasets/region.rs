//! Regional cropping of global grids.
//!
//! A cell is selected when its center lies inside the closed box
//! `[lat_lo, lat_hi] × [lon_lo, lon_hi]`; the selection is then trimmed at
//! its far end to an even number of rows and columns so that 2×2 patches
//! tile it. On the 5.625° grid this reproduces the published regional grid
//! sizes for all four boxes.

use ndarray::{ArrayD, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, GridSpec};

/// Multiple that regional row/column counts are trimmed to.
pub const REGION_ALIGNMENT: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    /// `(lo, hi)` in degrees.
    pub lat: (f64, f64),
    /// `(lo, hi)` in degrees, `0 ≤ lo < hi ≤ 360`.
    pub lon: (f64, f64),
    /// `(rows, cols)` the crop must produce, if known.
    #[serde(default)]
    pub expected: Option<(usize, usize)>,
}

impl RegionSpec {
    pub fn north_america() -> Self {
        Self::named("north_america", (15.0, 65.0), (220.0, 300.0), (8, 14))
    }

    pub fn south_america() -> Self {
        Self::named("south_america", (-55.0, 20.0), (270.0, 330.0), (14, 10))
    }

    pub fn australia() -> Self {
        Self::named("australia", (-50.0, 10.0), (100.0, 180.0), (10, 14))
    }

    /// Whole globe on the 5.625° grid.
    pub fn global() -> Self {
        Self::named("global", (-90.0, 90.0), (0.0, 360.0), (32, 64))
    }

    fn named(name: &str, lat: (f64, f64), lon: (f64, f64), expected: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            lat,
            lon,
            expected: Some(expected),
        }
    }

    pub fn presets() -> Vec<RegionSpec> {
        vec![Self::north_america(), Self::south_america(), Self::australia(), Self::global()]
    }

    /// Looks up a preset by name (`north_america`, `south_america`,
    /// `australia`, `global`; dashes and case are ignored).
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase().replace('-', "_");
        Self::presets()
            .into_iter()
            .find(|r| r.name == key)
            .ok_or_else(|| Error::Region(format!("unknown region `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.lat;
        let (c, d) = self.lon;
        if !(a.is_finite() && b.is_finite() && -90.0 <= a && a < b && b <= 90.0) {
            return Err(Error::Region(format!("{}: latitude range ({a}, {b}) is not within the globe", self.name)));
        }
        if !(c.is_finite() && d.is_finite() && 0.0 <= c && c < d && d <= 360.0) {
            return Err(Error::Region(format!("{}: longitude range ({c}, {d}) must satisfy 0 <= lo < hi <= 360", self.name)));
        }
        Ok(())
    }

    fn is_full_circle(&self) -> bool {
        self.lon.0 <= 0.0 && self.lon.1 >= 360.0
    }
}

fn select(centers: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..centers.len())
        .filter(|&i| centers[i] >= lo && centers[i] <= hi)
        .collect();
    idx.truncate(idx.len() - idx.len() % REGION_ALIGNMENT);
    idx
}

/// Row and column indices of a region plus the cropped grid.
pub fn region_indices(region: &RegionSpec, grid: &GridSpec) -> Result<(Vec<usize>, Vec<usize>, GridSpec)> {
    region.validate()?;
    let rows = select(&grid.latitudes, region.lat.0, region.lat.1);
    let lons: Vec<f64> = grid.longitudes.iter().map(|l| l.rem_euclid(360.0)).collect();
    let mut cols = select(&lons, region.lon.0, region.lon.1);
    // Keep columns in ascending longitude order even if the grid is rotated.
    cols.sort_by(|&a, &b| lons[a].total_cmp(&lons[b]));
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Region(format!(
            "{}: selection is empty ({} rows, {} columns)",
            region.name,
            rows.len(),
            cols.len()
        )));
    }
    if let Some((er, ec)) = region.expected {
        if (rows.len(), cols.len()) != (er, ec) {
            return Err(Error::Region(format!(
                "{}: expected a {er}x{ec} crop, selected {}x{}",
                region.name,
                rows.len(),
                cols.len()
            )));
        }
    }
    let whole = rows.len() == grid.height && cols.len() == grid.width;
    let lon_boundary = if whole && region.is_full_circle() {
        grid.lon_boundary
    } else {
        Boundary::Clamp
    };
    let lat_boundary = match (whole, grid.lat_boundary) {
        (false, Boundary::Periodic) => Boundary::Clamp,
        (_, b) => b,
    };
    let sub = GridSpec {
        height: rows.len(),
        width: cols.len(),
        latitudes: rows.iter().map(|&i| grid.latitudes[i]).collect(),
        longitudes: cols.iter().map(|&j| grid.longitudes[j]).collect(),
        dx: grid.dx,
        dy: grid.dy,
        lat_boundary,
        lon_boundary,
    };
    sub.validate()?;
    Ok((rows, cols, sub))
}

/// Crops the last two axes of `field` to a region.
pub fn extract_region(field: ArrayViewD<f64>, region: &RegionSpec, grid: &GridSpec) -> Result<(ArrayD<f64>, GridSpec)> {
    let nd = field.ndim();
    if nd < 2 || field.shape()[nd - 2] != grid.height || field.shape()[nd - 1] != grid.width {
        return Err(Error::Shape(format!(
            "field {:?} does not end in the {}x{} grid",
            field.shape(),
            grid.height,
            grid.width
        )));
    }
    let (rows, cols, sub) = region_indices(region, grid)?;
    let out = field.select(Axis(nd - 2), &rows).select(Axis(nd - 1), &cols);
    Ok((out, sub))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, IxDyn};

    #[test]
    fn table_sizes_on_the_coarse_grid() {
        let g = GridSpec::global(32, 64, Boundary::Clamp).unwrap();
        for r in RegionSpec::presets() {
            let (rows, cols, sub) = region_indices(&r, &g).unwrap();
            assert_eq!(Some((rows.len(), cols.len())), r.expected, "{}", r.name);
            assert_eq!((sub.height, sub.width), r.expected.unwrap());
        }
        let (_, _, global) = region_indices(&RegionSpec::global(), &g).unwrap();
        assert_eq!(global, g);
    }

    #[test]
    fn descending_latitudes_give_the_same_sizes() {
        let mut g = GridSpec::global(32, 64, Boundary::Clamp).unwrap();
        g.latitudes.reverse();
        for r in RegionSpec::presets() {
            let (rows, cols, _) = region_indices(&r, &g).unwrap();
            assert_eq!(Some((rows.len(), cols.len())), r.expected, "{}", r.name);
        }
    }

    #[test]
    fn extraction_is_idempotent() {
        let g = GridSpec::global(32, 64, Boundary::Clamp).unwrap();
        let f = Array3::from_shape_fn((2, 32, 64), |(k, i, j)| (k * 10000 + i * 100 + j) as f64).into_dyn();
        let mut r = RegionSpec::australia();
        let (a, ga) = extract_region(f.view(), &r, &g).unwrap();
        assert_eq!(a.shape(), &[2, 10, 14]);
        assert_eq!(ga.lon_boundary, Boundary::Clamp);
        let (b, gb) = extract_region(a.view(), &r, &ga).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        r.expected = Some((3, 3));
        assert!(matches!(extract_region(f.view(), &r, &g), Err(Error::Region(_))));
    }

    #[test]
    fn empty_and_invalid_boxes() {
        let g = GridSpec::global(32, 64, Boundary::Clamp).unwrap();
        let f = ArrayD::<f64>::zeros(IxDyn(&[32, 64]));
        let tiny = RegionSpec {
            name: "sliver".into(),
            lat: (0.1, 0.2),
            lon: (10.0, 20.0),
            expected: None,
        };
        assert!(matches!(extract_region(f.view(), &tiny, &g), Err(Error::Region(_))));
        let bad = RegionSpec {
            lat: (-95.0, 0.0),
            ..tiny
        };
        assert!(bad.validate().is_err());
        assert!(RegionSpec::preset("North-America").is_ok());
        assert!(RegionSpec::preset("atlantis").is_err());
    }
}
