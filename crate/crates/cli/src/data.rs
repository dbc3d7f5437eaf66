//! Turns the data section of a config into train/val/test datasets.

use std::path::Path;

use physode::datasets::{load_era5_subset, make_synthetic_dataset, Dataset, Era5Request, NormStats, Split};
use physode::{Error, Result};

use crate::config::{DataKind, ExperimentConfig};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const DATASET_EXT: &str = "safetensors";
pub const NORM_FILE: &str = "norm.json";

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Statistics fitted on the training split, when normalizing.
    pub stats: Option<NormStats>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes one dataset file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for name in SPLITS {
            self.get(name).unwrap().save(&dir.join(format!("{name}.{DATASET_EXT}")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            let p = dir.join(format!("{name}.{DATASET_EXT}"));
            Dataset::load(&p).map_err(|e| match e {
                Error::Io(io) => Error::Data(format!("{}: {io}", p.display())),
                other => other,
            })
        };
        let train = load("train")?;
        let stats = train.stats.clone();
        Ok(Self {
            train,
            val: load("val")?,
            test: load("test")?,
            stats,
        })
    }
}

/// Builds raw splits without normalization.
fn raw_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    match cfg.data.kind {
        DataKind::Synthetic => {
            let all = make_synthetic_dataset(&cfg.data.synthetic)?;
            let (rest, test) = all.split_tail(cfg.data.test_samples);
            let (train, val) = rest.split_tail(cfg.data.val_samples);
            Ok((train, val, test))
        }
        DataKind::Era5 => {
            let e = cfg.data.era5.as_ref().ok_or_else(|| Error::config("data.era5", "missing"))?;
            let catalog = e.catalog()?;
            let load = |split: Split| {
                load_era5_subset(&Era5Request {
                    root: e.root.clone(),
                    catalog: catalog.clone(),
                    range: split.range(),
                    split: Some(split),
                    lead: e.lead,
                    stride_hours: e.stride_hours,
                    history: e.history,
                    lat_boundary: e.lat_boundary,
                })
            };
            Ok((load(Split::Train)?, load(Split::Val)?, load(Split::Test)?))
        }
        DataKind::Files => {
            let dir = cfg.data.dir.as_ref().ok_or_else(|| Error::config("data.dir", "missing"))?;
            let s = Splits::load(dir)?;
            Ok((s.train, s.val, s.test))
        }
    }
}

/// Loads or generates the splits and, if configured, normalizes all three
/// with statistics fitted on the training split.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Splits> {
    let (mut train, mut val, mut test) = raw_splits(cfg)?;
    let mut stats = train.stats.clone();
    if cfg.data.normalize() && stats.is_none() {
        if train.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty training split".into()));
        }
        let fitted = train.normalize_with_fit()?;
        val.apply_normalization(&fitted)?;
        test.apply_normalization(&fitted)?;
        stats = Some(fitted);
    }
    Ok(Splits { train, val, test, stats })
}
