//! Trajectory datasets: synthetic advection problems with exact solutions,
//! reanalysis ingestion, normalization and regional cropping.

pub mod catalog;
pub mod era5;
pub mod norm;
pub mod region;
pub mod synthetic;

use std::path::Path;

use ndarray::{s, Array1, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::io::container::ArrayContainer;

pub use catalog::{CatalogEntry, VariableCatalog, VariableKind};
pub use era5::{load_era5_subset, Era5Request, Split, TimeRange};
pub use norm::NormStats;
pub use region::{extract_region, RegionSpec};
pub use synthetic::{make_synthetic_dataset, SourceFamily, SynthConfig, SyntheticProblem, VelocityFamily};

/// One supervised rollout: the state at `t0`, the `N` hourly targets after
/// it, and optionally the states before it (lag 1, 2, ... hours).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub input: Array3<f64>,
    pub targets: Array4<f64>,
    /// Absolute time of `t0` in hours.
    pub t0_hours: f64,
    /// `(M, K, H, W)`; entry `m` is the state at `t0 - (m + 1)` hours.
    pub history: Option<Array4<f64>>,
}

impl TrajectorySample {
    pub fn new(input: Array3<f64>, targets: Array4<f64>, t0_hours: f64, history: Option<Array4<f64>>) -> Result<Self> {
        if targets.shape()[0] == 0 {
            return Err(Error::Data("a sample needs at least one target step".into()));
        }
        if targets.shape()[1..] != *input.shape() {
            return Err(Error::Shape(format!(
                "targets {:?} do not match input {:?}",
                targets.shape(),
                input.shape()
            )));
        }
        if let Some(h) = &history {
            if h.shape()[1..] != *input.shape() {
                return Err(Error::Shape("history does not match input".into()));
            }
        }
        let finite = input.iter().chain(targets.iter()).chain(history.iter().flat_map(|h| h.iter()));
        if finite.clone().any(|x| !x.is_finite()) {
            return Err(Error::Data("sample contains non-finite values".into()));
        }
        Ok(Self {
            input,
            targets,
            t0_hours,
            history,
        })
    }

    pub fn lead(&self) -> usize {
        self.targets.shape()[0]
    }

    /// State `lag` hours before `t0`.
    pub fn lagged(&self, lag: usize) -> Option<Array3<f64>> {
        if lag == 0 {
            return Some(self.input.clone());
        }
        let h = self.history.as_ref()?;
        (lag <= h.shape()[0]).then(|| h.index_axis(Axis(0), lag - 1).to_owned())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub catalog: VariableCatalog,
    pub lead: usize,
    pub samples: Vec<TrajectorySample>,
    /// Statistics the samples were normalized with, if any.
    pub stats: Option<NormStats>,
    /// Free-form provenance (generator config, seed, source files).
    pub description: String,
}

pub const DATASET_FORMAT: &str = "physode-dataset/1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.catalog.channels()
    }

    pub fn history_len(&self) -> usize {
        self.samples
            .first()
            .and_then(|s| s.history.as_ref())
            .map_or(0, |h| h.shape()[0])
    }

    /// Fits statistics on this dataset and normalizes it in place.
    pub fn normalize_with_fit(&mut self) -> Result<NormStats> {
        let stats = NormStats::fit(self)?;
        self.apply_normalization(&stats)?;
        Ok(stats)
    }

    /// Normalizes every state in place with externally fitted statistics.
    pub fn apply_normalization(&mut self, stats: &NormStats) -> Result<()> {
        if self.stats.is_some() {
            return Err(Error::Data("dataset is already normalized".into()));
        }
        for s in &mut self.samples {
            stats.normalize_in_place(s.input.view_mut().into_dyn())?;
            stats.normalize_in_place(s.targets.view_mut().into_dyn())?;
            if let Some(h) = &mut s.history {
                stats.normalize_in_place(h.view_mut().into_dyn())?;
            }
        }
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Splits off the last `count` samples.
    pub fn split_tail(mut self, count: usize) -> (Dataset, Dataset) {
        let at = self.samples.len().saturating_sub(count);
        let tail = self.samples.split_off(at);
        let other = Dataset {
            samples: tail,
            ..self.clone()
        };
        (self, other)
    }

    /// Sample order for one epoch: a seeded shuffle of indices.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn to_container(&self) -> Result<ArrayContainer> {
        let (k, h, w) = (self.channels(), self.grid.height, self.grid.width);
        let n = self.lead;
        let count = self.samples.len();
        let m = self.history_len();
        let mut inputs = Array4::<f64>::zeros((count, k, h, w));
        let mut targets = ArrayD::<f64>::zeros(IxDyn(&[count, n, k, h, w]));
        let mut history = ArrayD::<f64>::zeros(IxDyn(&[count, m, k, h, w]));
        let mut t0 = Array1::<f64>::zeros(count);
        for (i, s) in self.samples.iter().enumerate() {
            if s.input.shape() != [k, h, w] || s.lead() != n {
                return Err(Error::Shape(format!("sample {i} does not match the dataset layout")));
            }
            inputs.index_axis_mut(Axis(0), i).assign(&s.input);
            targets.index_axis_mut(Axis(0), i).assign(&s.targets.view().into_dyn());
            match &s.history {
                Some(hist) if hist.shape()[0] == m => history.index_axis_mut(Axis(0), i).assign(&hist.view().into_dyn()),
                None if m == 0 => {}
                _ => return Err(Error::Shape(format!("sample {i} has a different history length"))),
            }
            t0[i] = s.t0_hours;
        }
        let mut c = ArrayContainer::new(DATASET_FORMAT);
        c.insert("inputs", inputs.into_dyn());
        c.insert("targets", targets);
        c.insert("history", history);
        c.insert("t0_hours", t0.into_dyn());
        c.set_meta("grid", to_json(&self.grid)?);
        c.set_meta("catalog", to_json(&self.catalog)?);
        c.set_meta("lead", n.to_string());
        c.set_meta("description", self.description.clone());
        if let Some(stats) = &self.stats {
            stats.write_to(&mut c);
        }
        Ok(c)
    }

    pub fn from_container(mut c: ArrayContainer) -> Result<Self> {
        c.expect_format(DATASET_FORMAT)?;
        let grid: GridSpec = parse_meta(&c, "grid")?;
        grid.validate()?;
        let catalog: VariableCatalog = parse_meta(&c, "catalog")?;
        catalog.validate()?;
        let lead: usize = c
            .meta("lead")?
            .parse()
            .map_err(|e| Error::Format(format!("lead: {e}")))?;
        let description = c.meta("description").unwrap_or_default().to_string();
        let stats = NormStats::read_from(&c)?;
        let inputs = c.take("inputs")?;
        let targets = c.take("targets")?;
        let history = c.take("history")?;
        let t0 = c.take("t0_hours")?;
        let (k, h, w) = (catalog.channels(), grid.height, grid.width);
        let count = t0.len();
        if t0.ndim() != 1
            || inputs.shape() != [count, k, h, w]
            || targets.shape() != [count, lead, k, h, w]
            || history.ndim() != 5
            || history.shape()[0] != count
            || history.shape()[2..] != [k, h, w]
        {
            return Err(Error::Format("dataset arrays do not match the declared layout".into()));
        }
        let m = history.shape()[1];
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let input = inputs.index_axis(Axis(0), i).to_owned().into_dimensionality().expect("rank 3");
            let tg = targets.index_axis(Axis(0), i).to_owned().into_dimensionality().expect("rank 4");
            let hist = (m > 0).then(|| {
                history
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_dimensionality()
                    .expect("rank 4")
            });
            samples.push(TrajectorySample::new(input, tg, t0[[i]], hist).map_err(|e| Error::Format(format!("sample {i}: {e}")))?);
        }
        Ok(Self {
            grid,
            catalog,
            lead,
            samples,
            stats,
            description,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(ArrayContainer::load(path)?)
    }

    /// Crops every sample to a region.
    pub fn crop(&self, region: &RegionSpec) -> Result<Dataset> {
        let (rows, cols, grid) = region::region_indices(region, &self.grid)?;
        let take = |a: ndarray::ArrayViewD<f64>| -> ArrayD<f64> {
            let nd = a.ndim();
            a.select(Axis(nd - 2), &rows).select(Axis(nd - 1), &cols)
        };
        let samples = self
            .samples
            .iter()
            .map(|s| TrajectorySample {
                input: take(s.input.view().into_dyn()).into_dimensionality().expect("rank 3"),
                targets: take(s.targets.view().into_dyn()).into_dimensionality().expect("rank 4"),
                t0_hours: s.t0_hours,
                history: s
                    .history
                    .as_ref()
                    .map(|h| take(h.view().into_dyn()).into_dimensionality().expect("rank 4")),
            })
            .collect();
        Ok(Dataset {
            grid,
            catalog: self.catalog.clone(),
            lead: self.lead,
            samples,
            stats: self.stats.clone(),
            description: format!("{} | region {}", self.description, region.name),
        })
    }

    /// Keeps the first `n` target steps of every sample.
    pub fn truncate_lead(&mut self, n: usize) -> Result<()> {
        if n == 0 || n > self.lead {
            return Err(Error::Domain(format!("lead {n} outside 1..={}", self.lead)));
        }
        for s in &mut self.samples {
            s.targets = s.targets.slice(s![..n, .., .., ..]).to_owned();
        }
        self.lead = n;
        Ok(())
    }
}

fn parse_meta<T: serde::de::DeserializeOwned>(c: &ArrayContainer, key: &str) -> Result<T> {
    serde_json::from_str(c.meta(key)?).map_err(|e| Error::Format(format!("{key}: {e}")))
}

pub(crate) fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}
