//! The three learned components: initial-velocity estimator, advection
//! correction `v̇`, and the post-hoc source term.

mod layers;
pub mod params;
pub mod resnet;
pub mod vit;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Var};
use crate::embeddings::{temporal_encoding, EMBEDDING_CHANNELS, SPATIAL_CHANNELS, TEMPORAL_CHANNELS};
use crate::error::{Error, Result};
use crate::io::container::ArrayContainer;

use layers::Conv;
pub use params::{Component, Fwd, Param, ParamId, ParamInit, ParamStore};
pub use resnet::{ResNet, ResNetConfig};
pub use vit::{Vit, VitConfig};

/// Local (convolutional) or global (patch-attention) network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Local(ResNetConfig),
    Attention(VitConfig),
}

impl BackboneConfig {
    pub fn validate(&self, path: &str, height: usize, width: usize) -> Result<()> {
        match self {
            BackboneConfig::Local(c) => c.validate(path),
            BackboneConfig::Attention(c) => c.validate(path, height, width),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            BackboneConfig::Local(_) => "local",
            BackboneConfig::Attention(_) => "attention",
        }
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Local(ResNet),
    Attention(Vit),
}

impl Backbone {
    fn new(init: &mut ParamInit, cfg: &BackboneConfig, cin: usize, cout: usize, h: usize, w: usize, volumetric: bool) -> Self {
        match cfg {
            BackboneConfig::Local(c) => Backbone::Local(ResNet::new(init, c, cin, cout, volumetric)),
            BackboneConfig::Attention(c) => Backbone::Attention(Vit::new(init, c, cin, cout, h, w)),
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        match self {
            Backbone::Local(n) => n.forward(f, x),
            Backbone::Attention(n) => n.forward(f, x),
        }
    }
}

/// Which inputs the velocity estimator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPlan {
    /// `u` only.
    U,
    /// `∇u` only.
    Grad,
    /// `u` and `∇u`.
    UGrad,
    /// `u`, `∇u` and the finite-difference `Δu/Δt`.
    UGradDt,
    /// `Δu/Δt` only.
    Dt,
}

impl InputPlan {
    pub const ALL: [InputPlan; 5] = [
        InputPlan::Dt,
        InputPlan::UGradDt,
        InputPlan::U,
        InputPlan::Grad,
        InputPlan::UGrad,
    ];

    pub fn channels(self, k: usize) -> usize {
        match self {
            InputPlan::U | InputPlan::Dt => k,
            InputPlan::Grad => 2 * k,
            InputPlan::UGrad => 3 * k,
            InputPlan::UGradDt => 4 * k,
        }
    }

    pub fn needs_dt(self) -> bool {
        matches!(self, InputPlan::UGradDt | InputPlan::Dt)
    }

    pub fn name(self) -> &'static str {
        match self {
            InputPlan::U => "u",
            InputPlan::Grad => "grad",
            InputPlan::UGrad => "u_grad",
            InputPlan::UGradDt => "u_grad_dt",
            InputPlan::Dt => "dt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityModelConfig {
    pub backbone: BackboneConfig,
    pub inputs: InputPlan,
}

impl Default for VelocityModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::Local(ResNetConfig::default()),
            inputs: InputPlan::UGrad,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionModelConfig {
    pub backbone: BackboneConfig,
}

impl Default for AdvectionModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::Attention(VitConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceModelConfig {
    /// Volumetric residual network over `(time, lat, lon)`.
    TimeAwareLocal(ResNetConfig),
    /// Patch attention across all steps jointly.
    TimeAwareAttention(VitConfig),
    /// Planar residual network applied to each step independently.
    Local(ResNetConfig),
    /// Patch attention applied to each step independently.
    Attention(VitConfig),
    None,
}

impl Default for SourceModelConfig {
    fn default() -> Self {
        SourceModelConfig::TimeAwareLocal(ResNetConfig::default())
    }
}

impl SourceModelConfig {
    pub fn short_name(&self) -> &'static str {
        match self {
            SourceModelConfig::TimeAwareLocal(_) => "time_aware_local",
            SourceModelConfig::TimeAwareAttention(_) => "time_aware_attention",
            SourceModelConfig::Local(_) => "local",
            SourceModelConfig::Attention(_) => "attention",
            SourceModelConfig::None => "none",
        }
    }

    fn validate(&self, path: &str, h: usize, w: usize) -> Result<()> {
        match self {
            SourceModelConfig::TimeAwareLocal(c) | SourceModelConfig::Local(c) => c.validate(path),
            SourceModelConfig::TimeAwareAttention(c) | SourceModelConfig::Attention(c) => c.validate(path, h, w),
            SourceModelConfig::None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub velocity: VelocityModelConfig,
    #[serde(default)]
    pub advection: AdvectionModelConfig,
    #[serde(default)]
    pub source: SourceModelConfig,
    #[serde(default)]
    pub seed: u64,
}

impl BundleConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            velocity: VelocityModelConfig::default(),
            advection: AdvectionModelConfig::default(),
            source: SourceModelConfig::default(),
            seed: 0,
        }
    }

    /// Default architectures with [`ResNetConfig::desk`] and [`VitConfig::desk`] sizes.
    pub fn desk(channels: usize, height: usize, width: usize) -> Self {
        Self {
            velocity: VelocityModelConfig {
                backbone: BackboneConfig::Local(ResNetConfig::desk()),
                inputs: InputPlan::UGrad,
            },
            advection: AdvectionModelConfig {
                backbone: BackboneConfig::Attention(VitConfig::desk()),
            },
            source: SourceModelConfig::TimeAwareLocal(ResNetConfig::desk()),
            ..Self::new(channels, height, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("model.channels", "must be positive"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("model.height", "grid must be at least 2x2"));
        }
        self.velocity.backbone.validate("model.velocity.backbone", self.height, self.width)?;
        self.advection.backbone.validate("model.advection.backbone", self.height, self.width)?;
        self.source.validate("model.source", self.height, self.width)
    }
}

pub struct VelocityModel {
    pub config: VelocityModelConfig,
    backbone: Backbone,
}

impl VelocityModel {
    /// `v(t0)` as `(B, 2K, H, W)` from `u` `(B, K, H, W)`, `∇u` `(B, 2K, H, W)`
    /// and, for plans that use it, `Δu/Δt` `(B, K, H, W)`.
    pub fn forward(&self, f: &mut Fwd, u: Var, grad_u: Var, dudt: Option<Var>) -> Result<Var> {
        for (name, v) in [("u", Some(u)), ("grad_u", Some(grad_u)), ("dudt", dudt)] {
            if let Some(v) = v {
                if f.tape.value(v).iter().any(|x| !x.is_finite()) {
                    return Err(Error::Model(format!("velocity model input `{name}` is not finite")));
                }
            }
        }
        let need_dt = || dudt.ok_or_else(|| Error::Model("input plan needs Δu/Δt".into()));
        let parts = match self.config.inputs {
            InputPlan::U => vec![u],
            InputPlan::Grad => vec![grad_u],
            InputPlan::UGrad => vec![u, grad_u],
            InputPlan::UGradDt => vec![u, grad_u, need_dt()?],
            InputPlan::Dt => vec![need_dt()?],
        };
        let x = if parts.len() == 1 { parts[0] } else { f.tape.concat(&parts, 1) };
        Ok(self.backbone.forward(f, x))
    }
}

pub struct AdvectionModel {
    pub config: AdvectionModelConfig,
    backbone: Backbone,
    linear: Conv,
    /// When false only the linear branch contributes.
    pub backbone_enabled: bool,
}

impl AdvectionModel {
    /// `v̇` as `(B, 2K, H, W)` from `u`, `∇u`, `v` and the 34-channel embedding.
    pub fn forward(&self, f: &mut Fwd, u: Var, grad_u: Var, v: Var, embedding: Var) -> Var {
        let x = f.tape.concat(&[u, grad_u, v, embedding], 1);
        let lin = self.linear.forward(f, x);
        if !self.backbone_enabled {
            return lin;
        }
        let net = self.backbone.forward(f, x);
        f.tape.add(net, lin)
    }
}

enum SourceNet {
    Volumetric(Backbone),
    PerStep(Backbone),
    None,
}

pub struct SourceModel {
    pub config: SourceModelConfig,
    net: SourceNet,
    channels: usize,
    calls: AtomicUsize,
}

impl SourceModel {
    fn time_aware(&self) -> bool {
        matches!(
            self.config,
            SourceModelConfig::TimeAwareLocal(_) | SourceModelConfig::TimeAwareAttention(_)
        )
    }

    /// Number of forward evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn input_channels(k: usize, time_aware: bool) -> usize {
        // u(t_n), u(t0), v(t0), φ_s and, for time-aware variants, φ_t(t_n).
        4 * k + SPATIAL_CHANNELS + if time_aware { TEMPORAL_CHANNELS } else { 0 }
    }

    /// Source fields `(B, N, K, H, W)` for a trajectory `(B, N, K, H, W)`.
    ///
    /// `spatial` is the `(6, H, W)` spatial encoding; `times_days[b][n]` is the
    /// absolute time of step `n` of sample `b`, in days.
    pub fn forward(
        &self,
        f: &mut Fwd,
        trajectory: Var,
        u0: Var,
        v0: Var,
        spatial: &Array3<f64>,
        times_days: &[Vec<f64>],
    ) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let shape = f.tape.shape(trajectory).to_vec();
        let (b, n, k, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        if n == 0 {
            return Err(Error::Model("source model needs at least one step".into()));
        }
        let traj = f.tape.value(trajectory);
        for step in 0..n {
            if traj.index_axis(Axis(1), step).iter().any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("trajectory step {step} contains non-finite values")));
            }
        }
        if times_days.len() != b || times_days.iter().any(|t| t.len() != n) {
            return Err(Error::Shape("source model needs one time per sample and step".into()));
        }
        for t in times_days {
            if t.windows(2).any(|p| !(p[1] > p[0])) {
                return Err(Error::Model("source model times must be strictly increasing".into()));
            }
        }
        let (net, volumetric) = match &self.net {
            SourceNet::None => {
                return Ok(f.tape.constant(ArrayD::zeros(IxDyn(&[b, n, k, h, w]))));
            }
            SourceNet::Volumetric(net) => (net, true),
            SourceNet::PerStep(net) => (net, false),
        };
        let time_aware = self.time_aware();
        let cond = f.tape.concat(&[u0, v0], 1);
        let spatial_b = broadcast_batch(spatial, b);
        let spatial_v = f.tape.constant(spatial_b);
        let mut steps = Vec::with_capacity(n);
        for step in 0..n {
            let un = f.tape.slice_axis(trajectory, 1, step, step + 1);
            let un = f.tape.reshape(un, &[b, k, h, w]);
            let mut parts = vec![un, cond, spatial_v];
            if time_aware {
                let mut enc = ArrayD::zeros(IxDyn(&[b, TEMPORAL_CHANNELS, h, w]));
                for (bi, t) in times_days.iter().enumerate() {
                    for (j, e) in temporal_encoding(t[step]).into_iter().enumerate() {
                        enc.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), j).fill(e);
                    }
                }
                parts.push(f.tape.constant(enc));
            }
            steps.push(f.tape.concat(&parts, 1));
        }
        let c = Self::input_channels(k, time_aware);
        let out = if volumetric {
            let framed: Vec<Var> = steps.iter().map(|&s| f.tape.reshape(s, &[b, c, 1, h, w])).collect();
            let x = f.tape.concat(&framed, 2);
            let y = net.forward(f, x); // (B, K, N, H, W)
            f.tape.permute(y, &[0, 2, 1, 3, 4])
        } else {
            let x = f.tape.stack(&steps); // (N, B, C, H, W)
            let x = f.tape.reshape(x, &[n * b, c, h, w]);
            let y = net.forward(f, x);
            let y = f.tape.reshape(y, &[n, b, k, h, w]);
            f.tape.permute(y, &[1, 0, 2, 3, 4])
        };
        debug_assert_eq!(f.tape.shape(out), &[b, n, self.channels, h, w]);
        Ok(out)
    }
}

fn broadcast_batch(x: &Array3<f64>, b: usize) -> ArrayD<f64> {
    let (c, h, w) = x.dim();
    x.broadcast((b, c, h, w))
        .expect("broadcast")
        .to_owned()
        .into_dyn()
}

/// The sandwich: velocity estimator, advection correction and source model
/// with all their parameters.
pub struct ModelBundle {
    pub config: BundleConfig,
    pub params: ParamStore,
    pub velocity: VelocityModel,
    pub advection: AdvectionModel,
    pub source: SourceModel,
}

pub const CHECKPOINT_FORMAT: &str = "physode-checkpoint/1";

impl ModelBundle {
    pub fn new(config: BundleConfig) -> Result<Self> {
        config.validate()?;
        let (k, h, w) = (config.channels, config.height, config.width);
        let mut params = ParamStore::default();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let velocity = {
            let mut init = ParamInit::new(&mut params, &mut rng, Component::Velocity, "velocity");
            let cin = config.velocity.inputs.channels(k);
            VelocityModel {
                config: config.velocity.clone(),
                backbone: Backbone::new(&mut init, &config.velocity.backbone, cin, 2 * k, h, w, false),
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let advection = {
            let mut init = ParamInit::new(&mut params, &mut rng, Component::Advection, "advection");
            let cin = 5 * k + EMBEDDING_CHANNELS;
            let backbone = Backbone::new(&mut init, &config.advection.backbone, cin, 2 * k, h, w, false);
            let linear = Conv::new(&mut init, "linear", cin, 2 * k, ConvGeometry::planar(1, 0, false), false, 1.0);
            AdvectionModel {
                config: config.advection.clone(),
                backbone,
                linear,
                backbone_enabled: true,
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        let source = {
            let mut init = ParamInit::new(&mut params, &mut rng, Component::Source, "source");
            let net = match &config.source {
                SourceModelConfig::TimeAwareLocal(c) => SourceNet::Volumetric(Backbone::Local(ResNet::new(
                    &mut init,
                    c,
                    SourceModel::input_channels(k, true),
                    k,
                    true,
                ))),
                SourceModelConfig::TimeAwareAttention(c) => SourceNet::Volumetric(Backbone::Attention(Vit::new(
                    &mut init,
                    c,
                    SourceModel::input_channels(k, true),
                    k,
                    h,
                    w,
                ))),
                SourceModelConfig::Local(c) => SourceNet::PerStep(Backbone::Local(ResNet::new(
                    &mut init,
                    c,
                    SourceModel::input_channels(k, false),
                    k,
                    false,
                ))),
                SourceModelConfig::Attention(c) => SourceNet::PerStep(Backbone::Attention(Vit::new(
                    &mut init,
                    c,
                    SourceModel::input_channels(k, false),
                    k,
                    h,
                    w,
                ))),
                SourceModelConfig::None => SourceNet::None,
            };
            SourceModel {
                config: config.source.clone(),
                net,
                channels: k,
                calls: AtomicUsize::new(0),
            }
        };

        Ok(Self {
            config,
            params,
            velocity,
            advection,
            source,
        })
    }

    /// Sets every parameter of one component to zero.
    pub fn zero_component(&mut self, component: Component) {
        for p in self.params.iter_mut().filter(|p| p.component == component) {
            p.value.fill(0.0);
        }
    }

    pub fn to_container(&self) -> Result<ArrayContainer> {
        let mut c = ArrayContainer::new(CHECKPOINT_FORMAT);
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        c.set_meta("bundle", cfg);
        for p in self.params.iter() {
            c.insert(format!("param/{}", p.name), p.value.clone());
        }
        Ok(c)
    }

    /// Rebuilds a bundle from its config and overwrites every parameter.
    pub fn from_container(c: &ArrayContainer) -> Result<Self> {
        c.expect_format(CHECKPOINT_FORMAT)?;
        let config: BundleConfig =
            serde_json::from_str(c.meta("bundle")?).map_err(|e| Error::Format(format!("bundle config: {e}")))?;
        let mut bundle = Self::new(config)?;
        for p in bundle.params.iter_mut() {
            let stored = c.array(&format!("param/{}", p.name))?;
            if stored.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                )));
            }
            if stored.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("parameter `{}` is not finite", p.name)));
            }
            p.value.assign(stored);
        }
        Ok(bundle)
    }
}
