//! Lat-lon raster geometry, latitude weighting and the finite-difference
//! operators behind `∇u`, `∇·v` and the flux-form advection tendency.
//!
//! Space is treated as a flat `H × W` rectangle of unit cells (no spherical
//! metric terms). Longitude (`x`, the column axis) is periodic on global grids;
//! latitude (`y`, the row axis) follows the grid's [`Boundary`] policy.
//!
//! All operators act on the last two axes of their input, so the same code
//! serves single fields `(K, H, W)` and batched tensors `(B, K, H, W)`.

use ndarray::{Array1, Array3, ArrayD, ArrayView3, ArrayViewD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edge treatment along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Wrap around.
    Periodic,
    /// Second-order one-sided differences at the first/last index.
    Clamp,
    /// Mirror about the edge cell (`u[-1] = u[1]`), giving a zero edge derivative.
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Cell-center latitudes in degrees, one per row.
    pub latitudes: Vec<f64>,
    /// Cell-center longitudes in degrees, one per column.
    pub longitudes: Vec<f64>,
    pub dx: f64,
    pub dy: f64,
    pub lat_boundary: Boundary,
    pub lon_boundary: Boundary,
}

impl GridSpec {
    /// Global equiangular grid with WeatherBench cell centers
    /// (`lat = -90 + (i + 1/2)·180/H`, `lon = j·360/W`), unit spacing,
    /// periodic longitude and the given latitude policy.
    pub fn global(height: usize, width: usize, lat_boundary: Boundary) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Domain(format!(
                "grid must be non-empty, got {height}x{width}"
            )));
        }
        let dlat = 180.0 / height as f64;
        let dlon = 360.0 / width as f64;
        let grid = GridSpec {
            height,
            width,
            latitudes: (0..height).map(|i| -90.0 + (i as f64 + 0.5) * dlat).collect(),
            longitudes: (0..width).map(|j| j as f64 * dlon).collect(),
            dx: 1.0,
            dy: 1.0,
            lat_boundary,
            lon_boundary: Boundary::Periodic,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Periodic in both directions; used by the synthetic datasets and the
    /// conservation checks.
    pub fn fully_periodic(height: usize, width: usize) -> Result<Self> {
        Self::global(height, width, Boundary::Periodic)
    }

    pub fn with_spacing(mut self, dx: f64, dy: f64) -> Result<Self> {
        self.dx = dx;
        self.dy = dy;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2x2 cells, got {}x{}",
                self.height, self.width
            )));
        }
        if self.latitudes.len() != self.height || self.longitudes.len() != self.width {
            return Err(Error::Shape(format!(
                "coordinate lengths ({}, {}) do not match grid {}x{}",
                self.latitudes.len(),
                self.longitudes.len(),
                self.height,
                self.width
            )));
        }
        if !(self.dx > 0.0 && self.dx.is_finite() && self.dy > 0.0 && self.dy.is_finite()) {
            return Err(Error::Domain(format!(
                "grid spacing must be positive, got dx={} dy={}",
                self.dx, self.dy
            )));
        }
        for &lat in &self.latitudes {
            if !lat.is_finite() || lat.abs() >= 90.0 {
                return Err(Error::Domain(format!("latitude {lat} outside (-90, 90)")));
            }
        }
        let increasing = self.latitudes.windows(2).all(|w| w[1] > w[0]);
        let decreasing = self.latitudes.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::Domain("latitudes must be strictly monotone".into()));
        }
        let step = self.longitudes[1] - self.longitudes[0];
        if !(step > 0.0) {
            return Err(Error::Domain("longitudes must be increasing".into()));
        }
        for w in self.longitudes.windows(2) {
            if ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(1.0) {
                return Err(Error::Domain("longitudes must be uniformly spaced".into()));
            }
        }
        if self.lon_boundary == Boundary::Periodic {
            let expected = 360.0 / self.width as f64;
            if (step - expected).abs() > 1e-9
                || self.longitudes[0] < 0.0
                || self.longitudes[0] >= expected
            {
                return Err(Error::Domain(format!(
                    "periodic longitudes must cover [0, 360) with step {expected}"
                )));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn diff_ops(&self) -> DiffOps {
        DiffOps::new(self)
    }
}

/// Normalized cosine-latitude weights, `alpha(h) = cos(lat_h) / mean(cos(lat))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatitudeWeights {
    pub alpha: Array1<f64>,
}

impl LatitudeWeights {
    pub fn from_latitudes(latitudes: &[f64]) -> Result<Self> {
        if latitudes.is_empty() {
            return Err(Error::Domain("no latitudes given".into()));
        }
        if let Some(bad) = latitudes.iter().find(|l| !l.is_finite() || l.abs() >= 90.0) {
            return Err(Error::Domain(format!("latitude {bad} outside (-90, 90)")));
        }
        let cosines: Array1<f64> = latitudes.iter().map(|l| l.to_radians().cos()).collect();
        let mean = cosines.mean().expect("non-empty");
        Ok(Self {
            alpha: cosines / mean,
        })
    }

    /// All-ones weights for `height` rows.
    pub fn uniform(height: usize) -> Self {
        Self {
            alpha: Array1::ones(height),
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

pub fn latitude_weights(grid: &GridSpec) -> Result<LatitudeWeights> {
    LatitudeWeights::from_latitudes(&grid.latitudes)
}

/// Sparse banded operator along one axis: `out[i] = Σ c · in[j]`.
#[derive(Clone, Debug)]
pub struct Stencil1D {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Stencil1D {
    /// Centered first-derivative stencil with spacing `h` under `boundary`.
    pub fn first_derivative(n: usize, h: f64, boundary: Boundary) -> Self {
        let c = 1.0 / (2.0 * h);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = match boundary {
                Boundary::Periodic => {
                    let next = (i + 1) % n;
                    let prev = (i + n - 1) % n;
                    vec![(next, c), (prev, -c)]
                }
                Boundary::Clamp => {
                    if n == 2 {
                        // Only a first-order difference fits.
                        vec![(1, 1.0 / h), (0, -1.0 / h)]
                    } else if i == 0 {
                        vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
                    } else if i == n - 1 {
                        vec![(n - 1, 3.0 * c), (n - 2, -4.0 * c), (n - 3, c)]
                    } else {
                        vec![(i + 1, c), (i - 1, -c)]
                    }
                }
                Boundary::Reflect => {
                    if i == 0 || i == n - 1 {
                        Vec::new()
                    } else {
                        vec![(i + 1, c), (i - 1, -c)]
                    }
                }
            };
            rows.push(row);
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Applies the stencil along `axis` of `input`.
    pub fn apply(&self, input: &ArrayViewD<f64>, axis: usize) -> ArrayD<f64> {
        self.run(input, axis, false)
    }

    /// Applies the transpose of the stencil along `axis`.
    pub fn apply_adjoint(&self, input: &ArrayViewD<f64>, axis: usize) -> ArrayD<f64> {
        self.run(input, axis, true)
    }

    fn run(&self, input: &ArrayViewD<f64>, axis: usize, adjoint: bool) -> ArrayD<f64> {
        let shape = input.shape().to_vec();
        let n = shape[axis];
        assert_eq!(n, self.rows.len(), "stencil length does not match axis");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = input.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            let base = o * n * inner;
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, c) in row {
                    let (to, from) = if adjoint { (j, i) } else { (i, j) };
                    let dst = &mut out[base + to * inner..base + (to + 1) * inner];
                    let s = &src[base + from * inner..base + (from + 1) * inner];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += c * v;
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape preserved")
    }
}

/// Precomputed derivative stencils for one grid.
#[derive(Clone, Debug)]
pub struct DiffOps {
    pub ddx: Stencil1D,
    pub ddy: Stencil1D,
}

impl DiffOps {
    pub fn new(grid: &GridSpec) -> Self {
        Self {
            ddx: Stencil1D::first_derivative(grid.width, grid.dx, grid.lon_boundary),
            ddy: Stencil1D::first_derivative(grid.height, grid.dy, grid.lat_boundary),
        }
    }

    /// `∂/∂x` along the last axis.
    pub fn d_dx(&self, u: &ArrayViewD<f64>) -> ArrayD<f64> {
        self.ddx.apply(u, u.ndim() - 1)
    }

    /// `∂/∂y` along the second-to-last axis.
    pub fn d_dy(&self, u: &ArrayViewD<f64>) -> ArrayD<f64> {
        self.ddy.apply(u, u.ndim() - 2)
    }

    pub fn d_dx_adjoint(&self, g: &ArrayViewD<f64>) -> ArrayD<f64> {
        self.ddx.apply_adjoint(g, g.ndim() - 1)
    }

    pub fn d_dy_adjoint(&self, g: &ArrayViewD<f64>) -> ArrayD<f64> {
        self.ddy.apply_adjoint(g, g.ndim() - 2)
    }

    /// `(..., K, H, W)` → `(..., 2K, H, W)` ordered `[∂x u_1, ∂y u_1, ...]`.
    pub fn gradient(&self, u: &ArrayViewD<f64>) -> ArrayD<f64> {
        interleave(&self.d_dx(u), &self.d_dy(u))
    }

    /// `(..., 2K, H, W)` ordered `[vx_1, vy_1, ...]` → `(..., K, H, W)`.
    pub fn divergence(&self, v: &ArrayViewD<f64>) -> Result<ArrayD<f64>> {
        let (vx, vy) = deinterleave(v)?;
        Ok(self.d_dx(&vx.view()) + self.d_dy(&vy.view()))
    }

    /// Flux-form tendency `−∇·(u v)` per channel.
    pub fn advection_tendency(
        &self,
        u: &ArrayViewD<f64>,
        v: &ArrayViewD<f64>,
    ) -> Result<ArrayD<f64>> {
        let (vx, vy) = deinterleave(v)?;
        if vx.shape() != u.shape() {
            return Err(Error::Shape(format!(
                "velocity {:?} does not pair with field {:?}",
                v.shape(),
                u.shape()
            )));
        }
        let fx = &vx * u;
        let fy = &vy * u;
        Ok(-(self.d_dx(&fx.view()) + self.d_dy(&fy.view())))
    }
}

/// Interleaves two `(..., K, H, W)` tensors into `(..., 2K, H, W)`.
pub fn interleave(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.shape(), b.shape());
    let nd = a.ndim();
    let mut shape = a.shape().to_vec();
    shape[nd - 3] *= 2;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let k = a.shape()[nd - 3];
    for c in 0..k {
        out.index_axis_mut(Axis(nd - 3), 2 * c)
            .assign(&a.index_axis(Axis(nd - 3), c));
        out.index_axis_mut(Axis(nd - 3), 2 * c + 1)
            .assign(&b.index_axis(Axis(nd - 3), c));
    }
    out
}

/// Splits `(..., 2K, H, W)` into its even and odd channels.
pub fn deinterleave(v: &ArrayViewD<f64>) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let nd = v.ndim();
    if nd < 3 {
        return Err(Error::Shape(format!("velocity needs >= 3 axes, got {nd}")));
    }
    let c2 = v.shape()[nd - 3];
    if c2 % 2 != 0 {
        return Err(Error::Shape(format!(
            "velocity channel count {c2} is not even"
        )));
    }
    let mut shape = v.shape().to_vec();
    shape[nd - 3] = c2 / 2;
    let mut vx = ArrayD::zeros(IxDyn(&shape));
    let mut vy = ArrayD::zeros(IxDyn(&shape));
    for c in 0..c2 / 2 {
        vx.index_axis_mut(Axis(nd - 3), c)
            .assign(&v.index_axis(Axis(nd - 3), 2 * c));
        vy.index_axis_mut(Axis(nd - 3), c)
            .assign(&v.index_axis(Axis(nd - 3), 2 * c + 1));
    }
    Ok((vx, vy))
}

fn check_field(name: &str, a: &ArrayView3<f64>, grid: &GridSpec) -> Result<()> {
    let s = a.shape();
    if s[1] != grid.height || s[2] != grid.width {
        return Err(Error::Shape(format!(
            "{name} is {}x{}, grid is {}x{}",
            s[1], s[2], grid.height, grid.width
        )));
    }
    if let Some((idx, _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Integration {
            step: 0,
            channel: idx.0,
            row: idx.1,
            col: idx.2,
        });
    }
    Ok(())
}

fn to3(a: ArrayD<f64>) -> Array3<f64> {
    a.into_dimensionality().expect("three axes")
}

/// `∇u` as a `(2K, H, W)` array ordered `[∂x u_1, ∂y u_1, ...]`.
pub fn spatial_gradient(u: ArrayView3<f64>, grid: &GridSpec) -> Result<Array3<f64>> {
    check_field("field", &u, grid)?;
    Ok(to3(grid.diff_ops().gradient(&u.into_dyn())))
}

/// `∇·v` per scalar channel.
pub fn divergence(v: ArrayView3<f64>, grid: &GridSpec) -> Result<Array3<f64>> {
    if v.shape()[0] % 2 != 0 {
        return Err(Error::Shape(format!(
            "velocity channel count {} is not even",
            v.shape()[0]
        )));
    }
    check_field("velocity", &v, grid)?;
    Ok(to3(grid.diff_ops().divergence(&v.into_dyn())?))
}

/// Flux-form advection tendency `−∇·(u ⊙ v)`.
pub fn advection_tendency(
    u: ArrayView3<f64>,
    v: ArrayView3<f64>,
    grid: &GridSpec,
) -> Result<Array3<f64>> {
    check_field("field", &u, grid)?;
    check_field("velocity", &v, grid)?;
    Ok(to3(grid
        .diff_ops()
        .advection_tendency(&u.into_dyn(), &v.into_dyn())?))
}

/// Expanded form `−(v·∇u + u ∇·v)`; only used as a cross-check of the flux form.
pub fn advection_tendency_expanded(
    u: ArrayView3<f64>,
    v: ArrayView3<f64>,
    grid: &GridSpec,
) -> Result<Array3<f64>> {
    check_field("field", &u, grid)?;
    check_field("velocity", &v, grid)?;
    let ops = grid.diff_ops();
    let (vx, vy) = deinterleave(&v.into_dyn())?;
    let ud = u.into_dyn();
    let adv = &vx * &ops.d_dx(&ud) + &vy * &ops.d_dy(&ud);
    let div = ops.d_dx(&vx.view()) + ops.d_dy(&vy.view());
    Ok(to3(-(adv + &ud * &div)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::f64::consts::PI;

    #[test]
    fn single_row_weight_is_one() {
        let w = LatitudeWeights::from_latitudes(&[30.0]).unwrap();
        assert!((w.alpha[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_rows_have_equal_weight() {
        let w = LatitudeWeights::from_latitudes(&[-45.0, 45.0]).unwrap();
        assert!((w.alpha[0] - 1.0).abs() < 1e-15);
        assert!((w.alpha[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_match_direct_formula() {
        let lats = [-67.5, -22.5, 22.5, 67.5];
        let w = LatitudeWeights::from_latitudes(&lats).unwrap();
        let c67 = (67.5f64 * PI / 180.0).cos();
        let c22 = (22.5f64 * PI / 180.0).cos();
        let mean = (2.0 * c67 + 2.0 * c22) / 4.0;
        let expect = [c67 / mean, c22 / mean, c22 / mean, c67 / mean];
        for (a, e) in w.alpha.iter().zip(expect) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
        assert!((w.alpha.mean().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pole_latitude_is_rejected() {
        assert!(matches!(
            LatitudeWeights::from_latitudes(&[0.0, 90.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn weatherbench_grid_coordinates() {
        let g = GridSpec::global(32, 64, Boundary::Clamp).unwrap();
        assert!((g.latitudes[0] + 87.1875).abs() < 1e-12);
        assert!((g.latitudes[31] - 87.1875).abs() < 1e-12);
        assert!((g.longitudes[63] - 354.375).abs() < 1e-12);
    }

    #[test]
    fn invalid_grids() {
        assert!(GridSpec::global(1, 8, Boundary::Clamp).is_err());
        let mut g = GridSpec::global(4, 8, Boundary::Clamp).unwrap();
        g.latitudes[2] = g.latitudes[1];
        assert!(g.validate().is_err());
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let g = GridSpec::global(6, 8, Boundary::Clamp).unwrap();
        let u = Array3::from_elem((2, 6, 8), 3.5);
        let grad = spatial_gradient(u.view(), &g).unwrap();
        assert_eq!(grad.shape(), &[4, 6, 8]);
        assert!(grad.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn reflect_policy_zeroes_edge_rows() {
        let g = GridSpec::global(6, 8, Boundary::Reflect).unwrap();
        let u = Array3::from_shape_fn((1, 6, 8), |(_, h, _)| h as f64 * 2.0);
        let grad = spatial_gradient(u.view(), &g).unwrap();
        for w in 0..8 {
            assert_eq!(grad[[1, 0, w]], 0.0);
            assert_eq!(grad[[1, 5, w]], 0.0);
            assert!((grad[[1, 3, w]] - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn clamp_edges_are_exact_on_quadratics() {
        let g = GridSpec::global(5, 4, Boundary::Clamp).unwrap();
        let u = Array3::from_shape_fn((1, 5, 4), |(_, h, _)| (h * h) as f64);
        let grad = spatial_gradient(u.view(), &g).unwrap();
        for h in 0..5 {
            assert!((grad[[1, h, 0]] - 2.0 * h as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_velocity_channels_rejected() {
        let g = GridSpec::fully_periodic(4, 4).unwrap();
        let v = Array3::zeros((3, 4, 4));
        assert!(matches!(divergence(v.view(), &g), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_input_reports_location() {
        let g = GridSpec::fully_periodic(4, 4).unwrap();
        let mut u = Array3::zeros((2, 4, 4));
        u[[1, 2, 3]] = f64::NAN;
        let v = Array3::zeros((4, 4, 4));
        match advection_tendency(u.view(), v.view(), &g) {
            Err(Error::Integration {
                channel, row, col, ..
            }) => assert_eq!((channel, row, col), (1, 2, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adjoint_is_transpose() {
        for b in [Boundary::Periodic, Boundary::Clamp, Boundary::Reflect] {
            let s = Stencil1D::first_derivative(7, 0.7, b);
            let x = ArrayD::from_shape_fn(IxDyn(&[3, 7]), |i| ((i[0] * 7 + i[1]) as f64).sin());
            let y = ArrayD::from_shape_fn(IxDyn(&[3, 7]), |i| ((i[0] + 3 * i[1]) as f64).cos());
            let lhs = (&s.apply(&x.view(), 1) * &y).sum();
            let rhs = (&x * &s.apply_adjoint(&y.view(), 1)).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
