//! Field containers on a grid.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One channel of a field: variable name plus optional pressure level (hPa).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub name: String,
    pub level: Option<u32>,
}

impl ChannelId {
    pub fn new(name: impl Into<String>, level: Option<u32>) -> Self {
        Self {
            name: name.into(),
            level,
        }
    }

    /// Short label such as `z500` or `t2m`.
    pub fn label(&self) -> String {
        match self.level {
            Some(l) => format!("{}{}", self.name, l),
            None => self.name.clone(),
        }
    }
}

/// `K` scalar channels on the grid at time `t` (hours since trajectory start).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub values: Array3<f64>,
    pub time: f64,
    pub channels: Vec<ChannelId>,
}

impl FieldState {
    pub fn new(values: Array3<f64>, time: f64, channels: Vec<ChannelId>) -> Result<Self> {
        if channels.len() != values.shape()[0] {
            return Err(Error::Shape(format!(
                "{} channel ids for {} channels",
                channels.len(),
                values.shape()[0]
            )));
        }
        ensure_finite("field", values.iter())?;
        Ok(Self {
            values,
            time,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Per-channel flow `(2K, H, W)` ordered `[vx_1, vy_1, ..., vx_K, vy_K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub values: Array3<f64>,
}

impl VelocityField {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.shape()[0] % 2 != 0 {
            return Err(Error::Shape(format!(
                "velocity has {} channels, expected an even count",
                values.shape()[0]
            )));
        }
        ensure_finite("velocity", values.iter())?;
        Ok(Self { values })
    }

    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        Self {
            values: Array3::zeros((2 * k, h, w)),
        }
    }

    /// Same flow `(vx, vy)` for every channel and cell.
    pub fn uniform(k: usize, h: usize, w: usize, vx: f64, vy: f64) -> Self {
        Self {
            values: Array3::from_shape_fn((2 * k, h, w), |(c, _, _)| {
                if c % 2 == 0 {
                    vx
                } else {
                    vy
                }
            }),
        }
    }

    pub fn scalar_channels(&self) -> usize {
        self.values.shape()[0] / 2
    }
}

/// Ordered states at hourly leads, `u` as `(N, K, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Lead times in hours, one per entry.
    pub times: Vec<f64>,
    pub u: Array4<f64>,
    /// Flow at each lead, `(N, 2K, H, W)`.
    pub v: Array4<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// State at lead index `n` (1-based, matching hourly leads).
    pub fn state(&self, n: usize) -> Option<Array3<f64>> {
        if n == 0 || n > self.len() {
            return None;
        }
        Some(self.u.index_axis(ndarray::Axis(0), n - 1).to_owned())
    }
}

pub(crate) fn ensure_finite<'a>(what: &str, mut it: impl Iterator<Item = &'a f64>) -> Result<()> {
    if it.any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what} contains non-finite values")));
    }
    Ok(())
}
