use crate::autodiff::{ConvGeometry, Var};

use super::params::{Fwd, ParamId, ParamInit};

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    geo: ConvGeometry,
    volumetric: bool,
}

impl Conv {
    pub fn new(init: &mut ParamInit, name: &str, cin: usize, cout: usize, geo: ConvGeometry, volumetric: bool, gain: f64) -> Self {
        let mut s = init.scope(name);
        let taps: usize = geo.kernel.iter().product();
        let shape: Vec<usize> = if volumetric {
            vec![cout, cin, geo.kernel[0], geo.kernel[1], geo.kernel[2]]
        } else {
            vec![cout, cin, geo.kernel[1], geo.kernel[2]]
        };
        let weight = s.fan_in("weight", &shape, cin * taps, gain);
        let bias = s.zeros("bias", &[cout]);
        Self {
            weight,
            bias,
            geo,
            volumetric,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let (w, b) = (f.p(self.weight), f.p(self.bias));
        if self.volumetric {
            f.tape.conv3d(x, w, Some(b), self.geo)
        } else {
            f.tape.conv2d(x, w, Some(b), self.geo)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut ParamInit, name: &str, din: usize, dout: usize, gain: f64) -> Self {
        let mut s = init.scope(name);
        let weight = s.fan_in("weight", &[din, dout], din, gain);
        let bias = s.zeros("bias", &[dout]);
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let (w, b) = (f.p(self.weight), f.p(self.bias));
        f.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            gamma: s.ones("gamma", &[dim]),
            beta: s.zeros("beta", &[dim]),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        f.tape.layer_norm(x, g, b, 1e-5)
    }
}
