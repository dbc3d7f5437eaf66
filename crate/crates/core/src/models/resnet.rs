//! Residual convolutional backbone over planar `(B, C, H, W)` or volumetric
//! `(B, C, T, H, W)` inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Var};
use crate::error::{Error, Result};

use super::layers::Conv;
use super::params::{Fwd, ParamInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetConfig {
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub dropout: f64,
    pub negative_slope: f64,
    /// `(block count, hidden width)` per stage.
    pub ladder: Vec<(usize, usize)>,
    /// Wrap convolutions around the longitude axis.
    pub circular_lon: bool,
}

/// Full-size block ladder; desk defaults divide the widths by 8.
pub const REFERENCE_LADDER: [(usize, usize); 4] = [(5, 512), (5, 128), (3, 64), (2, 48)];

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            padding: 1,
            stride: 1,
            dropout: 0.1,
            negative_slope: 0.3,
            ladder: REFERENCE_LADDER.iter().map(|&(n, w)| (n, w / 8)).collect(),
            circular_lon: true,
        }
    }
}

impl ResNetConfig {
    /// One stage of two 16-wide blocks, no dropout; sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            ladder: vec![(2, 16)],
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(format!("{path}.kernel_size"), "must be odd and positive"));
        }
        if 2 * self.padding + 1 != self.kernel_size {
            return Err(Error::config(
                format!("{path}.padding"),
                "padding must equal (kernel_size - 1) / 2 to keep the grid shape",
            ));
        }
        if self.stride != 1 {
            return Err(Error::config(
                format!("{path}.stride"),
                "only stride 1 preserves the grid for residual connections",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("{path}.dropout"), "must lie in [0, 1)"));
        }
        if !self.negative_slope.is_finite() {
            return Err(Error::config(format!("{path}.negative_slope"), "must be finite"));
        }
        if self.ladder.is_empty() || self.ladder.iter().any(|&(n, w)| n == 0 || w == 0) {
            return Err(Error::config(
                format!("{path}.ladder"),
                "needs at least one stage with positive count and width",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct ResNet {
    cfg: ResNetConfig,
    stem: Conv,
    blocks: Vec<ResBlock>,
    head: Conv,
}

impl ResNet {
    pub fn new(init: &mut ParamInit, cfg: &ResNetConfig, cin: usize, cout: usize, volumetric: bool) -> Self {
        let geo = if volumetric {
            ConvGeometry::volumetric(cfg.kernel_size, cfg.padding, cfg.circular_lon)
        } else {
            ConvGeometry::planar(cfg.kernel_size, cfg.padding, cfg.circular_lon)
        };
        let point = if volumetric {
            ConvGeometry::volumetric(1, 0, false)
        } else {
            ConvGeometry::planar(1, 0, false)
        };
        let first = cfg.ladder[0].1;
        let stem = Conv::new(init, "stem", cin, first, geo, volumetric, 1.0);
        let mut blocks = Vec::new();
        let mut width = first;
        for (stage, &(count, w)) in cfg.ladder.iter().enumerate() {
            for i in 0..count {
                let mut s = init.scope(&format!("stage{stage}.block{i}"));
                let skip = (width != w).then(|| Conv::new(&mut s, "skip", width, w, point, volumetric, 1.0));
                blocks.push(ResBlock {
                    conv1: Conv::new(&mut s, "conv1", width, w, geo, volumetric, 1.0),
                    conv2: Conv::new(&mut s, "conv2", w, w, geo, volumetric, 1.0),
                    skip,
                });
                width = w;
            }
        }
        let head = Conv::new(init, "head", width, cout, geo, volumetric, 1.0);
        Self {
            cfg: cfg.clone(),
            stem,
            blocks,
            head,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let slope = self.cfg.negative_slope;
        let h = self.stem.forward(f, x);
        let mut h = f.tape.leaky_relu(h, slope);
        for block in &self.blocks {
            let y = block.conv1.forward(f, h);
            let y = f.tape.leaky_relu(y, slope);
            let y = f.dropout(y, self.cfg.dropout);
            let y = block.conv2.forward(f, y);
            let skip = match &block.skip {
                Some(conv) => conv.forward(f, h),
                None => h,
            };
            let sum = f.tape.add(y, skip);
            h = f.tape.leaky_relu(sum, slope);
        }
        self.head.forward(f, h)
    }
}
