//! Spatial, temporal and spatiotemporal encodings fed to the advection and
//! source networks.
//!
//! Time is measured in days: the daily pair has period 1, the seasonal pair
//! period 365. An hourly lead `n` from a start `t0` (days) maps to
//! `t0 + n / 24`.

use std::f64::consts::PI;

use ndarray::{s, Array3};

use crate::grid::GridSpec;

pub const SPATIAL_CHANNELS: usize = 6;
pub const TEMPORAL_CHANNELS: usize = 4;
pub const EMBEDDING_CHANNELS: usize =
    SPATIAL_CHANNELS + TEMPORAL_CHANNELS + SPATIAL_CHANNELS * TEMPORAL_CHANNELS;

/// `[sin h, cos h, sin w, cos w, sin h·cos w, sin h·sin w]` for a point given
/// in degrees.
pub fn spatial_features(lat_deg: f64, lon_deg: f64) -> [f64; SPATIAL_CHANNELS] {
    let (sh, ch) = lat_deg.to_radians().sin_cos();
    let (sw, cw) = lon_deg.to_radians().sin_cos();
    [sh, ch, sw, cw, sh * cw, sh * sw]
}

/// Six-channel spatial encoding `(6, H, W)` of every cell center.
pub fn spatial_encoding(grid: &GridSpec) -> Array3<f64> {
    let mut out = Array3::zeros((SPATIAL_CHANNELS, grid.height, grid.width));
    for (h, &lat) in grid.latitudes.iter().enumerate() {
        for (w, &lon) in grid.longitudes.iter().enumerate() {
            for (c, v) in spatial_features(lat, lon).into_iter().enumerate() {
                out[[c, h, w]] = v;
            }
        }
    }
    out
}

/// `[sin 2πt, cos 2πt, sin(2πt/365), cos(2πt/365)]` with `t` in days.
pub fn temporal_encoding(t_days: f64) -> [f64; TEMPORAL_CHANNELS] {
    let (sd, cd) = (2.0 * PI * t_days).sin_cos();
    let (sy, cy) = (2.0 * PI * t_days / 365.0).sin_cos();
    [sd, cd, sy, cy]
}

/// Per-cell concatenation `[φ_s, φ_t, φ_s ⊗ φ_t]`, 34 channels.
///
/// The outer-product block is ordered with the spatial index outer and the
/// temporal index inner: channel `10 + 4i + j` holds `φ_s[i] · φ_t[j]`.
pub fn spatiotemporal_embedding(grid: &GridSpec, t_days: f64) -> Array3<f64> {
    combine(&spatial_encoding(grid), t_days)
}

/// Same as [`spatiotemporal_embedding`] but reuses a precomputed spatial block.
pub fn combine(spatial: &Array3<f64>, t_days: f64) -> Array3<f64> {
    let (_, h, w) = spatial.dim();
    let temporal = temporal_encoding(t_days);
    let mut out = Array3::zeros((EMBEDDING_CHANNELS, h, w));
    out.slice_mut(s![..SPATIAL_CHANNELS, .., ..]).assign(spatial);
    for (j, &tv) in temporal.iter().enumerate() {
        out.slice_mut(s![SPATIAL_CHANNELS + j, .., ..]).fill(tv);
    }
    let base = SPATIAL_CHANNELS + TEMPORAL_CHANNELS;
    for i in 0..SPATIAL_CHANNELS {
        for (j, &tv) in temporal.iter().enumerate() {
            let prod = spatial.slice(s![i, .., ..]).mapv(|x| x * tv);
            out.slice_mut(s![base + i * TEMPORAL_CHANNELS + j, .., ..])
                .assign(&prod);
        }
    }
    out
}

/// Hourly lead index to days since the epoch used by the temporal encoding.
pub fn lead_to_days(t0_days: f64, lead_hours: f64) -> f64 {
    t0_days + lead_hours / 24.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, GridSpec};

    #[test]
    fn spot_values() {
        assert_eq!(spatial_features(0.0, 0.0), [0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let p = spatial_features(90.0, 0.0);
        let e = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        for (a, b) in p.iter().zip(e) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = spatial_features(45.0, 90.0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let e = [r, r, 1.0, 0.0, 0.0, r];
        for (a, b) in q.iter().zip(e) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn temporal_spot_values() {
        assert_eq!(temporal_encoding(0.0), [0.0, 1.0, 0.0, 1.0]);
        let q = temporal_encoding(0.25);
        let a = PI / 730.0;
        let e = [1.0, 0.0, a.sin(), a.cos()];
        for (x, y) in q.iter().zip(e) {
            assert!((x - y).abs() < 1e-15);
        }
        let y = temporal_encoding(365.0);
        for (x, e) in y.iter().zip([0.0, 1.0, 0.0, 1.0]) {
            assert!((x - e).abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_layout() {
        let g = GridSpec::global(4, 8, Boundary::Clamp).unwrap();
        let e = spatiotemporal_embedding(&g, 0.3);
        assert_eq!(e.dim(), (34, 4, 8));
        for h in 0..4 {
            for w in 0..8 {
                for i in 0..6 {
                    for j in 0..4 {
                        assert_eq!(e[[10 + 4 * i + j, h, w]], e[[i, h, w]] * e[[6 + j, h, w]]);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_spatial_block_zeroes_products() {
        let spatial = Array3::zeros((6, 2, 3));
        let e = combine(&spatial, 1.7);
        assert!(e.slice(s![10.., .., ..]).iter().all(|v| *v == 0.0));
    }
}
