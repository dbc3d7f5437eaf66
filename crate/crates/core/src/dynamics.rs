//! Joint time stepping of the field `u` and its flow `v`.
//!
//! The field follows the flux-form continuity equation `u̇ = −∇·(u v)` and the
//! flow follows a learned drift `v̇`. Sources are never evaluated inside the
//! solver: they are added to the finished rollout by [`apply_source`].
//! Everything runs on the autodiff tape so the loss can be differentiated
//! through the unrolled solver.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::datasets::Dataset;
use crate::embeddings::{combine, spatial_encoding, EMBEDDING_CHANNELS};
use crate::error::{Error, Result};
use crate::field::Trajectory;
use crate::grid::{latitude_weights, DiffOps, GridSpec};
use crate::io::container::ArrayContainer;
use crate::models::{AdvectionModel, Fwd, ModelBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    /// Stop at the first non-finite value and keep the states before it.
    Abort,
    /// Record the first non-finite value and keep integrating.
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// Hours between recorded states.
    pub output_hours: f64,
    /// Internal steps per recorded state; 0 leaves the state unchanged.
    pub substeps: usize,
    pub nan_policy: NanPolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Euler,
            output_hours: 1.0,
            substeps: 1,
            nan_policy: NanPolicy::Abort,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.output_hours.is_finite() && self.output_hours > 0.0) {
            return Err(Error::config("solver.output_hours", "must be positive"));
        }
        Ok(())
    }

    /// Internal step `Δt` in hours.
    pub fn step_hours(&self) -> f64 {
        if self.substeps == 0 {
            0.0
        } else {
            self.output_hours / self.substeps as f64
        }
    }
}

/// First non-finite value met during a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NanEvent {
    /// Recorded step (1-based) whose integration produced it.
    pub step: usize,
    pub sample: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

impl NanEvent {
    pub fn to_error(self) -> Error {
        Error::Integration {
            step: self.step,
            channel: self.channel,
            row: self.row,
            col: self.col,
        }
    }
}

/// A single `(u, v, t)` state.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeState {
    pub u: Array3<f64>,
    pub v: Array3<f64>,
    /// Absolute time in hours.
    pub t: f64,
}

impl OdeState {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let (k, h, w) = self.u.dim();
        if (h, w) != (grid.height, grid.width) || self.v.dim() != (2 * k, h, w) {
            return Err(Error::Shape(format!(
                "state u {:?} / v {:?} does not fit the {}x{} grid",
                self.u.shape(),
                self.v.shape(),
                grid.height,
                grid.width
            )));
        }
        if let Some(e) = first_nan(&self.u.view().insert_axis(Axis(0)).to_owned().into_dyn(), 0) {
            return Err(e.to_error());
        }
        if self.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("velocity contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Right-hand side of the flow equation.
pub trait Drift {
    /// `v̇` for a batch at absolute times `t_hours` (one per sample).
    fn vdot(&self, f: &mut Fwd, u: Var, grad_u: Var, v: Var, t_hours: &[f64]) -> Result<Var>;
}

/// `v̇ = 0`: the flow stays at its initial value.
pub struct FrozenFlow;

impl Drift for FrozenFlow {
    fn vdot(&self, f: &mut Fwd, _u: Var, _grad_u: Var, v: Var, _t_hours: &[f64]) -> Result<Var> {
        let zeros = ArrayD::zeros(f.tape.value(v).raw_dim());
        Ok(f.tape.constant(zeros))
    }
}

/// `v̇` from the advection model, fed the spatiotemporal embedding at `t`.
pub struct LearnedDrift<'a> {
    pub model: &'a AdvectionModel,
    pub spatial: &'a Array3<f64>,
}

impl Drift for LearnedDrift<'_> {
    fn vdot(&self, f: &mut Fwd, u: Var, grad_u: Var, v: Var, t_hours: &[f64]) -> Result<Var> {
        let (_, h, w) = self.spatial.dim();
        let mut emb = ArrayD::zeros(IxDyn(&[t_hours.len(), EMBEDDING_CHANNELS, h, w]));
        for (b, &t) in t_hours.iter().enumerate() {
            emb.index_axis_mut(Axis(0), b).assign(&combine(self.spatial, t / 24.0).into_dyn());
        }
        let emb = f.tape.constant(emb);
        Ok(self.model.forward(f, u, grad_u, v, emb))
    }
}

/// `∇u` on the tape, `(B, K, H, W)` → `(B, 2K, H, W)`.
pub fn gradient_var(f: &mut Fwd, ops: &Arc<DiffOps>, u: Var) -> Var {
    let gx = f.tape.d_dx(u, ops);
    let gy = f.tape.d_dy(u, ops);
    f.tape.interleave(gx, gy, 1)
}

/// `−∇·(u v)` on the tape.
pub fn flux_tendency_var(f: &mut Fwd, ops: &Arc<DiffOps>, u: Var, v: Var) -> Var {
    let (vx, vy) = f.tape.deinterleave(v, 1);
    let fx = f.tape.mul(vx, u);
    let fy = f.tape.mul(vy, u);
    let dx = f.tape.d_dx(fx, ops);
    let dy = f.tape.d_dy(fy, ops);
    f.tape.linear_combination(&[(dx, -1.0), (dy, -1.0)])
}

/// `(u̇, v̇)` on the tape.
pub fn tendency_var(f: &mut Fwd, ops: &Arc<DiffOps>, drift: &dyn Drift, u: Var, v: Var, t_hours: &[f64]) -> Result<(Var, Var)> {
    let du = flux_tendency_var(f, ops, u, v);
    let grad_u = gradient_var(f, ops, u);
    let dv = drift.vdot(f, u, grad_u, v, t_hours)?;
    Ok((du, dv))
}

/// Recorded states of a tape rollout.
pub struct Rollout {
    /// `u(t_n)` for `n = 1..`, each `(B, K, H, W)`.
    pub u: Vec<Var>,
    pub v: Vec<Var>,
    pub nan: Option<NanEvent>,
}

fn first_nan(x: &ArrayD<f64>, step: usize) -> Option<NanEvent> {
    x.indexed_iter().find(|(_, v)| !v.is_finite()).map(|(ix, _)| NanEvent {
        step,
        sample: ix[0],
        channel: ix[1],
        row: ix[2],
        col: ix[3],
    })
}

/// Integrates `n` recorded steps from `(u0, v0)` at absolute times `t0_hours`.
///
/// Under [`NanPolicy::Abort`] the rollout stops before the first recorded
/// step that contains a non-finite value, so `u.len()` may be less than `n`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    f: &mut Fwd,
    ops: &Arc<DiffOps>,
    drift: &dyn Drift,
    solver: &SolverConfig,
    u0: Var,
    v0: Var,
    t0_hours: &[f64],
    n: usize,
) -> Result<Rollout> {
    solver.validate()?;
    let h = solver.step_hours();
    let (mut u, mut v) = (u0, v0);
    let mut out = Rollout {
        u: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        nan: None,
    };
    let mut t: Vec<f64> = t0_hours.to_vec();
    let shift = |t: &[f64], d: f64| -> Vec<f64> { t.iter().map(|x| x + d).collect() };
    for step in 1..=n {
        for _ in 0..solver.substeps {
            (u, v) = match solver.scheme {
                Scheme::Euler => {
                    let (du, dv) = tendency_var(f, ops, drift, u, v, &t)?;
                    (
                        f.tape.linear_combination(&[(u, 1.0), (du, h)]),
                        f.tape.linear_combination(&[(v, 1.0), (dv, h)]),
                    )
                }
                Scheme::Rk4 => {
                    let th = shift(&t, 0.5 * h);
                    let (k1u, k1v) = tendency_var(f, ops, drift, u, v, &t)?;
                    let u2 = f.tape.linear_combination(&[(u, 1.0), (k1u, 0.5 * h)]);
                    let v2 = f.tape.linear_combination(&[(v, 1.0), (k1v, 0.5 * h)]);
                    let (k2u, k2v) = tendency_var(f, ops, drift, u2, v2, &th)?;
                    let u3 = f.tape.linear_combination(&[(u, 1.0), (k2u, 0.5 * h)]);
                    let v3 = f.tape.linear_combination(&[(v, 1.0), (k2v, 0.5 * h)]);
                    let (k3u, k3v) = tendency_var(f, ops, drift, u3, v3, &th)?;
                    let u4 = f.tape.linear_combination(&[(u, 1.0), (k3u, h)]);
                    let v4 = f.tape.linear_combination(&[(v, 1.0), (k3v, h)]);
                    let (k4u, k4v) = tendency_var(f, ops, drift, u4, v4, &shift(&t, h))?;
                    let c = h / 6.0;
                    (
                        f.tape.linear_combination(&[(u, 1.0), (k1u, c), (k2u, 2.0 * c), (k3u, 2.0 * c), (k4u, c)]),
                        f.tape.linear_combination(&[(v, 1.0), (k1v, c), (k2v, 2.0 * c), (k3v, 2.0 * c), (k4v, c)]),
                    )
                }
            };
            t = shift(&t, h);
        }
        if out.nan.is_none() {
            let bad = first_nan(f.tape.value(u), step).or_else(|| {
                first_nan(f.tape.value(v), step).map(|e| NanEvent {
                    channel: e.channel / 2,
                    ..e
                })
            });
            if let Some(e) = bad {
                out.nan = Some(e);
                if solver.nan_policy == NanPolicy::Abort {
                    return Ok(out);
                }
            }
        }
        out.u.push(u);
        out.v.push(v);
    }
    Ok(out)
}

/// A rollout converted to arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Integration {
    pub trajectory: Trajectory,
    pub nan: Option<NanEvent>,
}

impl Integration {
    /// The trajectory, or an integration error if a non-finite value occurred.
    pub fn into_result(self) -> Result<Trajectory> {
        match self.nan {
            Some(e) => Err(e.to_error()),
            None => Ok(self.trajectory),
        }
    }
}

fn batch1(x: &Array3<f64>) -> ArrayD<f64> {
    x.view().insert_axis(Axis(0)).to_owned().into_dyn()
}

/// `(u̇, v̇)` of a single state under the bundle's advection model.
pub fn state_tendency(state: &OdeState, bundle: &ModelBundle, grid: &GridSpec) -> Result<(Array3<f64>, Array3<f64>)> {
    state.validate(grid)?;
    let ops = Arc::new(grid.diff_ops());
    let spatial = spatial_encoding(grid);
    let drift = LearnedDrift {
        model: &bundle.advection,
        spatial: &spatial,
    };
    let mut tape = Tape::inference();
    let vars = bundle.params.bind(&mut tape);
    let mut f = Fwd::new(&mut tape, &vars, false, 0);
    let u = f.tape.constant(batch1(&state.u));
    let v = f.tape.constant(batch1(&state.v));
    let (du, dv) = tendency_var(&mut f, &ops, &drift, u, v, &[state.t])?;
    let du = unbatch(f.tape.value(du));
    let dv = unbatch(f.tape.value(dv));
    if let Some(e) = first_nan(&batch1(&du), 0) {
        return Err(e.to_error());
    }
    if dv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Integration {
            step: 0,
            channel: 0,
            row: 0,
            col: 0,
        });
    }
    Ok((du, dv))
}

fn unbatch(x: &ArrayD<f64>) -> Array3<f64> {
    x.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("rank 3")
}

/// Integrates one state with the bundle's advection model as the drift.
/// The source model is not used.
pub fn integrate(state: &OdeState, bundle: &ModelBundle, grid: &GridSpec, solver: &SolverConfig, n: usize) -> Result<Integration> {
    let spatial = spatial_encoding(grid);
    let drift = LearnedDrift {
        model: &bundle.advection,
        spatial: &spatial,
    };
    let mut tape = Tape::inference();
    let vars = bundle.params.bind(&mut tape);
    integrate_with(&mut tape, &vars, state, &drift, grid, solver, n)
}

/// Integrates one state with an explicit drift.
pub fn integrate_drift(state: &OdeState, drift: &dyn Drift, grid: &GridSpec, solver: &SolverConfig, n: usize) -> Result<Integration> {
    let mut tape = Tape::inference();
    integrate_with(&mut tape, &[], state, drift, grid, solver, n)
}

fn integrate_with(
    tape: &mut Tape,
    vars: &[Var],
    state: &OdeState,
    drift: &dyn Drift,
    grid: &GridSpec,
    solver: &SolverConfig,
    n: usize,
) -> Result<Integration> {
    if n == 0 {
        return Err(Error::Domain("integration needs at least one step".into()));
    }
    state.validate(grid)?;
    let ops = Arc::new(grid.diff_ops());
    let mut f = Fwd::new(tape, vars, false, 0);
    let u0 = f.tape.constant(batch1(&state.u));
    let v0 = f.tape.constant(batch1(&state.v));
    let r = rollout(&mut f, &ops, drift, solver, u0, v0, &[state.t], n)?;
    let (k, h, w) = state.u.dim();
    let m = r.u.len();
    let mut u = Array4::zeros((m, k, h, w));
    let mut v = Array4::zeros((m, 2 * k, h, w));
    for i in 0..m {
        u.index_axis_mut(Axis(0), i).assign(&unbatch(f.tape.value(r.u[i])));
        v.index_axis_mut(Axis(0), i).assign(&unbatch(f.tape.value(r.v[i])));
    }
    Ok(Integration {
        trajectory: Trajectory {
            times: (1..=m).map(|i| i as f64 * solver.output_hours).collect(),
            u,
            v,
        },
        nan: r.nan,
    })
}

/// Adds the source model's output to a single-sample trajectory; `v` is kept.
pub fn apply_source(
    trajectory: &Trajectory,
    u0: &Array3<f64>,
    v0: &Array3<f64>,
    bundle: &ModelBundle,
    grid: &GridSpec,
    t0_hours: f64,
) -> Result<Trajectory> {
    if trajectory.is_empty() {
        return Ok(trajectory.clone());
    }
    let spatial = spatial_encoding(grid);
    let mut tape = Tape::inference();
    let vars = bundle.params.bind(&mut tape);
    let mut f = Fwd::new(&mut tape, &vars, false, 0);
    let traj = f.tape.constant(trajectory.u.view().insert_axis(Axis(0)).to_owned().into_dyn());
    let u0 = f.tape.constant(batch1(u0));
    let v0 = f.tape.constant(batch1(v0));
    let times = vec![trajectory.times.iter().map(|t| (t0_hours + t) / 24.0).collect()];
    let s = bundle.source.forward(&mut f, traj, u0, v0, &spatial, &times)?;
    let corrected = f.tape.add(traj, s);
    let u = f
        .tape
        .value(corrected)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("rank 4");
    Ok(Trajectory {
        times: trajectory.times.clone(),
        u,
        v: trajectory.v.clone(),
    })
}

/// `(u(t) − u(t − Δt)) / Δt`.
pub fn finite_difference_velocity_baseline(current: &ArrayD<f64>, previous: &ArrayD<f64>, dt_hours: f64) -> Result<ArrayD<f64>> {
    if !(dt_hours.is_finite() && dt_hours > 0.0) {
        return Err(Error::Domain(format!("Δt must be positive, got {dt_hours}")));
    }
    if current.shape() != previous.shape() {
        return Err(Error::Shape(format!(
            "states {:?} and {:?} differ",
            current.shape(),
            previous.shape()
        )));
    }
    Ok((current - previous) / dt_hours)
}

/// RMS over time of the backward-difference error for `sin(2πt/P)`, closed form.
///
/// The estimate and the true derivative are sinusoids of the same frequency,
/// so their difference has amplitude `|A e^{-iωΔt/2} − ω|` with
/// `A = 2 sin(ωΔt/2)/Δt`.
pub fn sinusoid_difference_error(period_hours: f64, dt_hours: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI / period_hours;
    let half = 0.5 * w * dt_hours;
    let a = 2.0 * half.sin() / dt_hours;
    let amp2 = a * a + w * w - 2.0 * a * w * half.cos();
    (amp2.max(0.0) / 2.0).sqrt()
}

/// The same error measured by sampling one period at `samples` points.
pub fn sinusoid_difference_error_sampled(period_hours: f64, dt_hours: f64, samples: usize) -> Result<f64> {
    let w = 2.0 * std::f64::consts::PI / period_hours;
    let ts = Array1::linspace(0.0, period_hours, samples + 1);
    let ts = ts.slice(ndarray::s![..samples]);
    let cur = ts.mapv(|t| (w * t).sin()).into_dyn();
    let prev = ts.mapv(|t| (w * (t - dt_hours)).sin()).into_dyn();
    let est = finite_difference_velocity_baseline(&cur, &prev, dt_hours)?;
    let truth = ts.mapv(|t| w * (w * t).cos()).into_dyn();
    Ok(((est - truth).mapv(|e| e * e).sum() / samples as f64).sqrt())
}

/// Inputs of one forward pass: `B` initial states with their targets.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, K, H, W)`.
    pub u0: ArrayD<f64>,
    /// State one hour before `u0`, if the dataset carries history.
    pub previous: Option<ArrayD<f64>>,
    /// `(B, N, K, H, W)`.
    pub targets: ArrayD<f64>,
    pub t0_hours: Vec<f64>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let (k, h, w, n) = (ds.channels(), ds.grid.height, ds.grid.width, ds.lead);
        let b = indices.len();
        let mut u0 = ArrayD::zeros(IxDyn(&[b, k, h, w]));
        let mut targets = ArrayD::zeros(IxDyn(&[b, n, k, h, w]));
        let mut previous = (ds.history_len() > 0).then(|| ArrayD::zeros(IxDyn(&[b, k, h, w])));
        let mut t0 = Vec::with_capacity(b);
        for (bi, &i) in indices.iter().enumerate() {
            let s = ds
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample {i} out of range")))?;
            u0.index_axis_mut(Axis(0), bi).assign(&s.input.view().into_dyn());
            targets.index_axis_mut(Axis(0), bi).assign(&s.targets.view().into_dyn());
            if let (Some(p), Some(lag)) = (&mut previous, s.lagged(1)) {
                p.index_axis_mut(Axis(0), bi).assign(&lag.into_dyn());
            }
            t0.push(s.t0_hours);
        }
        Ok(Self {
            u0,
            previous,
            targets,
            t0_hours: t0,
        })
    }

    pub fn len(&self) -> usize {
        self.t0_hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t0_hours.is_empty()
    }
}

/// Grid-dependent pieces shared by every forward pass.
pub struct Pipeline {
    pub ops: Arc<DiffOps>,
    pub spatial: Array3<f64>,
    pub alpha: Array1<f64>,
    pub solver: SolverConfig,
}

impl Pipeline {
    pub fn new(grid: &GridSpec, solver: SolverConfig) -> Result<Self> {
        grid.validate()?;
        solver.validate()?;
        Ok(Self {
            ops: Arc::new(grid.diff_ops()),
            spatial: spatial_encoding(grid),
            alpha: latitude_weights(grid)?.alpha,
            solver,
        })
    }
}

/// Tape handles of one forecast.
pub struct ForecastVars {
    /// Source-corrected rollout `(B, n, K, H, W)`.
    pub prediction: Var,
    /// Rollout before the source correction.
    pub raw: Var,
    pub v0: Var,
    pub nan: Option<NanEvent>,
}

/// Velocity estimate, rollout and source correction for `n` hourly steps.
///
/// Returns `Ok` with `nan` set when the rollout produced non-finite values;
/// in that case `prediction` holds only the steps before it.
pub fn forecast(f: &mut Fwd, bundle: &ModelBundle, pipe: &Pipeline, batch: &Batch, n: usize) -> Result<ForecastVars> {
    if n == 0 {
        return Err(Error::Domain("lead must be at least 1".into()));
    }
    let u0 = f.tape.constant(batch.u0.clone());
    let grad_u0 = gradient_var(f, &pipe.ops, u0);
    let dudt = match (&batch.previous, bundle.velocity.config.inputs.needs_dt()) {
        (Some(prev), true) => Some(f.tape.constant(finite_difference_velocity_baseline(&batch.u0, prev, 1.0)?)),
        _ => None,
    };
    let v0 = bundle.velocity.forward(f, u0, grad_u0, dudt)?;
    let drift = LearnedDrift {
        model: &bundle.advection,
        spatial: &pipe.spatial,
    };
    let r = rollout(f, &pipe.ops, &drift, &pipe.solver, u0, v0, &batch.t0_hours, n)?;
    if r.u.is_empty() {
        let nan = r.nan;
        let empty = f.tape.constant(ArrayD::zeros(IxDyn(&[0])));
        return Ok(ForecastVars {
            prediction: empty,
            raw: empty,
            v0,
            nan,
        });
    }
    let raw = f.tape.stack(&r.u); // (m, B, K, H, W)
    let raw = f.tape.permute(raw, &[1, 0, 2, 3, 4]);
    if r.nan.is_some() {
        return Ok(ForecastVars {
            prediction: raw,
            raw,
            v0,
            nan: r.nan,
        });
    }
    let times: Vec<Vec<f64>> = batch
        .t0_hours
        .iter()
        .map(|t0| (1..=n).map(|i| (t0 + i as f64 * pipe.solver.output_hours) / 24.0).collect())
        .collect();
    let s = bundle.source.forward(f, raw, u0, v0, &pipe.spatial, &times)?;
    let prediction = f.tape.add(raw, s);
    Ok(ForecastVars {
        prediction,
        raw,
        v0,
        nan: None,
    })
}

/// Inference-mode forecast as arrays: `(B, n, K, H, W)`.
pub fn predict(bundle: &ModelBundle, pipe: &Pipeline, batch: &Batch, n: usize) -> Result<ArrayD<f64>> {
    let mut tape = Tape::inference();
    let vars = bundle.params.bind(&mut tape);
    let mut f = Fwd::new(&mut tape, &vars, false, 0);
    let out = forecast(&mut f, bundle, pipe, batch, n)?;
    if let Some(e) = out.nan {
        return Err(e.to_error());
    }
    Ok(f.tape.value(out.prediction).clone())
}

pub const TRAJECTORY_FORMAT: &str = "physode-trajectory/1";

/// Hex SHA-256 of a configuration's JSON form.
pub fn fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

/// Self-describing container for a trajectory.
pub fn trajectory_to_container<T: Serialize>(trajectory: &Trajectory, config: &T) -> Result<ArrayContainer> {
    let mut c = ArrayContainer::new(TRAJECTORY_FORMAT);
    c.insert("u", trajectory.u.clone().into_dyn());
    c.insert("v", trajectory.v.clone().into_dyn());
    c.insert("times", Array1::from(trajectory.times.clone()).into_dyn());
    c.set_meta("config", serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?);
    c.set_meta("fingerprint", fingerprint(config)?);
    Ok(c)
}

pub fn trajectory_from_container(mut c: ArrayContainer) -> Result<Trajectory> {
    c.expect_format(TRAJECTORY_FORMAT)?;
    let times = c.take("times")?;
    let u = c.take("u")?;
    let v = c.take("v")?;
    if times.ndim() != 1 || u.ndim() != 4 || v.ndim() != 4 {
        return Err(Error::Format("trajectory arrays have the wrong rank".into()));
    }
    let n = times.len();
    let (us, vs) = (u.shape().to_vec(), v.shape().to_vec());
    if us[0] != n || vs[0] != n || vs[1] != 2 * us[1] || vs[2..] != us[2..] {
        return Err(Error::Format("trajectory arrays do not line up".into()));
    }
    Ok(Trajectory {
        times: times.iter().copied().collect(),
        u: u.into_dimensionality().expect("rank 4"),
        v: v.into_dimensionality().expect("rank 4"),
    })
}

pub fn save_trajectory<T: Serialize>(path: &Path, trajectory: &Trajectory, config: &T) -> Result<()> {
    trajectory_to_container(trajectory, config)?.save(path)
}
