//! Advection problems with closed-form solutions on a fully periodic grid.
//!
//! Each channel is a sum of periodic Gaussian bumps over a constant
//! background, carried by a time-independent velocity and optionally forced
//! by a source that is fixed in space and oscillates in time:
//! `s(x, y, t) = g(x, y)·cos(2πt / P)` with `g` a single Fourier mode.
//!
//! Positions are in cells, times in hours, velocities in cells per hour.
//! Column index is `x`, row index is `y`.

use std::f64::consts::PI;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::grid::GridSpec;

use super::{Dataset, TrajectorySample, VariableCatalog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityFamily {
    /// Constant `(vx, vy)` per channel; one pair is broadcast to all channels.
    Uniform { speeds: Vec<[f64; 2]> },
    /// Divergence-free shear `vx = A·sin(2πy/H)`, `vy = 0`.
    Rotational { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceFamily {
    None,
    /// `g = amplitude·cos(2π(mx·x/W + my·y/H) + phase_k)` with a per-channel
    /// phase, modulated by `cos(2πt / period_hours)`.
    Periodic {
        amplitude: f64,
        #[serde(default = "default_period")]
        period_hours: f64,
        #[serde(default = "default_modes")]
        modes: [u32; 2],
    },
}

fn default_period() -> f64 {
    24.0
}

fn default_modes() -> [u32; 2] {
    [1, 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub lead: usize,
    pub samples: usize,
    pub seed: u64,
    pub velocity: VelocityFamily,
    pub source: SourceFamily,
    /// Bumps per channel.
    pub bumps: usize,
    /// Bump width range in cells.
    pub sigma: [f64; 2],
    pub amplitude: [f64; 2],
    pub background: f64,
    /// Spacing of consecutive sample start times; defaults to the lead.
    pub stride_hours: Option<f64>,
    pub start_hours: f64,
    /// Number of past hourly states stored with each sample.
    pub history: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 32,
            channels: 2,
            lead: 6,
            samples: 64,
            seed: 0,
            velocity: VelocityFamily::Uniform {
                speeds: vec![[1.0, 0.0], [0.5, -0.5]],
            },
            source: SourceFamily::Periodic {
                amplitude: 0.2,
                period_hours: 24.0,
                modes: [1, 1],
            },
            bumps: 3,
            sigma: [1.5, 3.0],
            amplitude: [0.5, 1.5],
            background: 1.0,
            stride_hours: None,
            start_hours: 0.0,
            history: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let e = |p: &str, m: &str| Err(Error::config(format!("synth.{p}"), m));
        if self.height < 2 || self.width < 2 {
            return e("height", "grid must be at least 2x2");
        }
        if self.channels == 0 {
            return e("channels", "must be positive");
        }
        if self.lead == 0 {
            return e("lead", "must be at least 1");
        }
        if !(self.sigma[0] > 0.0 && self.sigma[0] <= self.sigma[1] && self.sigma[1].is_finite()) {
            return e("sigma", "needs 0 < min <= max");
        }
        if !(self.amplitude[0] <= self.amplitude[1]) || !self.amplitude.iter().all(|a| a.is_finite()) {
            return e("amplitude", "needs min <= max");
        }
        if !self.background.is_finite() || !self.start_hours.is_finite() {
            return e("background", "must be finite");
        }
        if let Some(s) = self.stride_hours {
            if !(s > 0.0 && s.is_finite()) {
                return e("stride_hours", "must be positive");
            }
        }
        match &self.velocity {
            VelocityFamily::Uniform { speeds } => {
                if speeds.len() != 1 && speeds.len() != self.channels {
                    return e("velocity.speeds", "needs one pair or one pair per channel");
                }
                if speeds.iter().flatten().any(|v| !v.is_finite()) {
                    return e("velocity.speeds", "must be finite");
                }
            }
            VelocityFamily::Rotational { amplitude } => {
                if !amplitude.is_finite() {
                    return e("velocity.amplitude", "must be finite");
                }
            }
        }
        if let SourceFamily::Periodic {
            amplitude, period_hours, ..
        } = &self.source
        {
            if !amplitude.is_finite() || !(*period_hours > 0.0 && period_hours.is_finite()) {
                return e("source", "needs a finite amplitude and positive period");
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> f64 {
        self.stride_hours.unwrap_or(self.lead as f64)
    }
}

#[derive(Clone, Debug)]
struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

/// A generator config resolved into per-sample initial fields and the exact
/// solution operator.
#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    pub config: SynthConfig,
    pub grid: GridSpec,
    bumps: Vec<Vec<Vec<Bump>>>,
    phases: Vec<f64>,
}

/// Periodic Gaussian profile: nearest-image distance plus two images each side.
fn periodic_gauss(d: f64, sigma: f64, period: f64) -> f64 {
    let d = (d + period / 2.0).rem_euclid(period) - period / 2.0;
    (-2..=2)
        .map(|m| {
            let z = (d + m as f64 * period) / sigma;
            (-0.5 * z * z).exp()
        })
        .sum()
}

/// `∫_{a}^{b} cos(c + kτ) dτ`, stable as `k → 0`.
fn integral_cos(c: f64, k: f64, a: f64, b: f64) -> f64 {
    let half = 0.5 * k * (b - a);
    let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
    (c + 0.5 * k * (a + b)).cos() * (b - a) * sinc
}

impl SyntheticProblem {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let grid = GridSpec::fully_periodic(config.height, config.width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let phases = (0..config.channels).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let bumps = (0..config.samples)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64 + 1);
                (0..config.channels)
                    .map(|_| {
                        (0..config.bumps)
                            .map(|_| Bump {
                                cx: rng.random_range(0.0..config.width as f64),
                                cy: rng.random_range(0.0..config.height as f64),
                                sigma: rng.random_range(config.sigma[0]..=config.sigma[1]),
                                amp: rng.random_range(config.amplitude[0]..=config.amplitude[1]),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            grid,
            bumps,
            phases,
        })
    }

    pub fn t0(&self, sample: usize) -> f64 {
        self.config.start_hours + sample as f64 * self.config.stride()
    }

    /// `(vx, vy)` of channel `k` in row `y`.
    pub fn velocity_at(&self, k: usize, y: f64) -> (f64, f64) {
        match &self.config.velocity {
            VelocityFamily::Uniform { speeds } => {
                let p = if speeds.len() == 1 { speeds[0] } else { speeds[k] };
                (p[0], p[1])
            }
            VelocityFamily::Rotational { amplitude } => {
                (amplitude * (2.0 * PI * y / self.config.height as f64).sin(), 0.0)
            }
        }
    }

    /// The generating velocity as a `2K × H × W` field.
    pub fn velocity(&self) -> VelocityField {
        let (k, h, w) = (self.config.channels, self.config.height, self.config.width);
        let mut v = Array3::zeros((2 * k, h, w));
        for c in 0..k {
            for i in 0..h {
                let (vx, vy) = self.velocity_at(c, i as f64);
                v.index_axis_mut(Axis(0), 2 * c).row_mut(i).fill(vx);
                v.index_axis_mut(Axis(0), 2 * c + 1).row_mut(i).fill(vy);
            }
        }
        VelocityField { values: v }
    }

    fn mode(&self, k: usize, x: f64, y: f64) -> Option<(f64, f64, f64, f64, f64)> {
        match &self.config.source {
            SourceFamily::None => None,
            SourceFamily::Periodic {
                amplitude,
                period_hours,
                modes,
            } => {
                let kx = 2.0 * PI * modes[0] as f64 / self.config.width as f64;
                let ky = 2.0 * PI * modes[1] as f64 / self.config.height as f64;
                let theta = kx * x + ky * y + self.phases[k];
                Some((*amplitude, theta, kx, ky, 2.0 * PI / period_hours))
            }
        }
    }

    /// Source field `s(t)`, `K × H × W`.
    pub fn source(&self, t: f64) -> Array3<f64> {
        let (k, h, w) = (self.config.channels, self.config.height, self.config.width);
        Array3::from_shape_fn((k, h, w), |(c, i, j)| match self.mode(c, j as f64, i as f64) {
            None => 0.0,
            Some((amp, theta, _, _, big_omega)) => amp * theta.cos() * (big_omega * t).cos(),
        })
    }

    fn initial_value(&self, sample: usize, k: usize, x: f64, y: f64) -> f64 {
        let (w, h) = (self.config.width as f64, self.config.height as f64);
        self.config.background
            + self.bumps[sample][k]
                .iter()
                .map(|b| b.amp * periodic_gauss(x - b.cx, b.sigma, w) * periodic_gauss(y - b.cy, b.sigma, h))
                .sum::<f64>()
    }

    /// Exact state of `sample` at absolute time `t` (any `t`, before or after `t0`).
    pub fn exact(&self, sample: usize, t: f64) -> Array3<f64> {
        let (k, h, w) = (self.config.channels, self.config.height, self.config.width);
        let t0 = self.t0(sample);
        let dt = t - t0;
        Array3::from_shape_fn((k, h, w), |(c, i, j)| {
            let (x, y) = (j as f64, i as f64);
            let (vx, vy) = self.velocity_at(c, y);
            let carried = self.initial_value(sample, c, x - vx * dt, y - vy * dt);
            let forced = match self.mode(c, x, y) {
                None => 0.0,
                Some((amp, theta, kx, ky, big_omega)) => {
                    // ∫_{t0}^{t} g(x − v(t − τ)) cos(Ωτ) dτ with g(x) = amp·cos θ(x).
                    let omega = kx * vx + ky * vy;
                    let c0 = theta - omega * t;
                    0.5 * amp
                        * (integral_cos(c0, omega - big_omega, t0, t) + integral_cos(c0, omega + big_omega, t0, t))
                }
            };
            carried + forced
        })
    }

    pub fn sample(&self, i: usize) -> Result<TrajectorySample> {
        let (k, h, w, n) = (self.config.channels, self.config.height, self.config.width, self.config.lead);
        let t0 = self.t0(i);
        let input = self.exact(i, t0);
        let mut targets = Array4::zeros((n, k, h, w));
        for step in 0..n {
            targets.index_axis_mut(Axis(0), step).assign(&self.exact(i, t0 + (step + 1) as f64));
        }
        let history = (self.config.history > 0).then(|| {
            let mut hist = Array4::zeros((self.config.history, k, h, w));
            for lag in 0..self.config.history {
                hist.index_axis_mut(Axis(0), lag).assign(&self.exact(i, t0 - (lag + 1) as f64));
            }
            hist
        });
        TrajectorySample::new(input, targets, t0, history)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let samples = (0..self.config.samples).map(|i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            grid: self.grid.clone(),
            catalog: VariableCatalog::synthetic(self.config.channels),
            lead: self.config.lead,
            samples,
            stats: None,
            description: format!(
                "synthetic {}",
                serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?
            ),
        })
    }
}

pub fn make_synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    SyntheticProblem::new(config.clone())?.dataset()
}
