use ndarray::{ArrayD, ArrayViewMutD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::io::container::ArrayContainer;

use super::Dataset;

/// Per-channel mean and standard deviation. Constant channels keep
/// `mean = 0`, `std = 1` so they pass through unchanged.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl NormStats {
    pub fn identity(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            std: vec![1.0; k],
            constant: vec![false; k],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Fits on every state of a split: inputs, targets and history.
    pub fn fit(split: &Dataset) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty split".into()));
        }
        let k = split.channels();
        let constant: Vec<bool> = (0..k).map(|c| split.catalog.is_constant(c)).collect();
        let views = split.samples.iter().flat_map(|s| {
            let mut v = vec![s.input.view().into_dyn()];
            v.extend(s.targets.outer_iter().map(|t| t.into_dyn()));
            if let Some(h) = &s.history {
                v.extend(h.outer_iter().map(|t| t.into_dyn()));
            }
            v
        });
        let states: Vec<_> = views.collect();
        Self::fit_states(&states, &constant, &split.catalog.labels())
    }

    /// Fits on `(K, H, W)` states. Streaming mean/variance (Welford) per channel.
    pub fn fit_states(states: &[ndarray::ArrayViewD<f64>], constant: &[bool], labels: &[String]) -> Result<Self> {
        let k = constant.len();
        let mut count = vec![0.0f64; k];
        let mut mean = vec![0.0f64; k];
        let mut m2 = vec![0.0f64; k];
        for s in states {
            if s.shape()[0] != k {
                return Err(Error::Shape(format!("state has {} channels, expected {k}", s.shape()[0])));
            }
            for (c, ch) in s.outer_iter().enumerate() {
                for &x in ch.iter() {
                    count[c] += 1.0;
                    let d = x - mean[c];
                    mean[c] += d / count[c];
                    m2[c] += d * (x - mean[c]);
                }
            }
        }
        let mut out = Self::identity(k);
        for c in 0..k {
            out.constant[c] = constant[c];
            if constant[c] {
                continue;
            }
            let std = (m2[c] / count[c]).sqrt();
            if !(std > 1e-12 * mean[c].abs().max(1.0)) {
                return Err(Error::Data(format!(
                    "channel `{}` has zero variance but is not marked constant",
                    labels.get(c).map(String::as_str).unwrap_or("?")
                )));
            }
            out.mean[c] = mean[c];
            out.std[c] = std;
        }
        Ok(out)
    }

    fn check(&self, x: &ArrayViewMutD<f64>) -> Result<usize> {
        let nd = x.ndim();
        if nd < 3 || x.shape()[nd - 3] != self.channels() {
            return Err(Error::Shape(format!(
                "expected {} channels on the third-to-last axis, got shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(nd - 3)
    }

    /// `(x - mean) / std` along the channel axis (third from last).
    pub fn normalize_in_place(&self, mut x: ArrayViewMutD<f64>) -> Result<()> {
        let axis = self.check(&x)?;
        for (c, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            x.index_axis_mut(Axis(axis), c).mapv_inplace(|v| (v - m) / s);
        }
        Ok(())
    }

    pub fn denormalize_in_place(&self, mut x: ArrayViewMutD<f64>) -> Result<()> {
        let axis = self.check(&x)?;
        for (c, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            x.index_axis_mut(Axis(axis), c).mapv_inplace(|v| v * s + m);
        }
        Ok(())
    }

    pub fn normalize(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mut y = x.clone();
        self.normalize_in_place(y.view_mut())?;
        Ok(y)
    }

    pub fn denormalize(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mut y = x.clone();
        self.denormalize_in_place(y.view_mut())?;
        Ok(y)
    }

    pub(crate) fn write_to(&self, c: &mut ArrayContainer) {
        let k = self.channels();
        c.insert("norm/mean", ArrayD::from_shape_vec(IxDyn(&[k]), self.mean.clone()).expect("len"));
        c.insert("norm/std", ArrayD::from_shape_vec(IxDyn(&[k]), self.std.clone()).expect("len"));
        let flags = self.constant.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        c.insert("norm/constant", ArrayD::from_shape_vec(IxDyn(&[k]), flags).expect("len"));
    }

    pub(crate) fn read_from(c: &ArrayContainer) -> Result<Option<Self>> {
        if !c.arrays.contains_key("norm/mean") {
            return Ok(None);
        }
        let get = |name: &str| -> Result<Vec<f64>> {
            let a = c.array(name)?;
            if a.ndim() != 1 {
                return Err(Error::Format(format!("{name} must be a vector")));
            }
            Ok(a.iter().copied().collect())
        };
        let (mean, std, flags) = (get("norm/mean")?, get("norm/std")?, get("norm/constant")?);
        if std.len() != mean.len() || flags.len() != mean.len() {
            return Err(Error::Format("normalization vectors differ in length".into()));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Format("normalization statistics must be finite with positive std".into()));
        }
        Ok(Some(Self {
            mean,
            std,
            constant: flags.iter().map(|&f| f != 0.0).collect(),
        }))
    }
}
