use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ChannelId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Constant,
    Surface,
    Atmospheric,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    /// Variable name as stored in the source files (`z`, `t2m`, `lsm`, ...).
    pub name: String,
    pub kind: VariableKind,
    /// Pressure level in hPa, for atmospheric variables only.
    #[serde(default)]
    pub level: Option<u32>,
}

/// Ordered channel layout of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableCatalog {
    pub entries: Vec<CatalogEntry>,
}

pub const ERA5_LEVELS: [u32; 7] = [50, 250, 500, 600, 700, 850, 925];
pub const ERA5_ATMOSPHERIC: [&str; 6] = ["z", "u", "v", "t", "q", "r"];
pub const ERA5_SURFACE: [&str; 3] = ["t2m", "u10", "v10"];
pub const ERA5_CONSTANT: [&str; 3] = ["lsm", "orography", "lat2d"];

/// Channels scored by default on reanalysis data.
pub const TARGET_CHANNELS: [&str; 5] = ["z500", "t850", "t2m", "u10", "v10"];

impl VariableCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self> {
        let c = Self { entries };
        c.validate()?;
        Ok(c)
    }

    /// The 48-channel reanalysis layout: constants, then surface variables,
    /// then every atmospheric variable at each pressure level.
    pub fn era5_default() -> Self {
        let mut entries = Vec::new();
        for name in ERA5_CONSTANT {
            entries.push(CatalogEntry {
                name: name.into(),
                kind: VariableKind::Constant,
                level: None,
            });
        }
        for name in ERA5_SURFACE {
            entries.push(CatalogEntry {
                name: name.into(),
                kind: VariableKind::Surface,
                level: None,
            });
        }
        for name in ERA5_ATMOSPHERIC {
            for level in ERA5_LEVELS {
                entries.push(CatalogEntry {
                    name: name.into(),
                    kind: VariableKind::Atmospheric,
                    level: Some(level),
                });
            }
        }
        Self { entries }
    }

    /// `k` anonymous surface channels named `c0`, `c1`, ... for synthetic data.
    pub fn synthetic(k: usize) -> Self {
        Self {
            entries: (0..k)
                .map(|i| CatalogEntry {
                    name: format!("c{i}"),
                    kind: VariableKind::Surface,
                    level: None,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("catalog", "needs at least one variable"));
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let path = format!("catalog.entries[{i}]");
            match (e.kind, e.level) {
                (VariableKind::Atmospheric, None) => {
                    return Err(Error::config(path, format!("atmospheric `{}` needs a level", e.name)))
                }
                (VariableKind::Constant | VariableKind::Surface, Some(_)) => {
                    return Err(Error::config(path, format!("`{}` cannot have a level", e.name)))
                }
                _ => {}
            }
            if !seen.insert((e.name.clone(), e.level)) {
                return Err(Error::config(path, format!("duplicate channel `{}`", self.label(i))));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.entries.len()
    }

    pub fn label(&self, k: usize) -> String {
        let e = &self.entries[k];
        ChannelId::new(e.name.clone(), e.level).label()
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.channels()).map(|k| self.label(k)).collect()
    }

    pub fn channel_ids(&self) -> Vec<ChannelId> {
        self.entries.iter().map(|e| ChannelId::new(e.name.clone(), e.level)).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        (0..self.channels()).find(|&k| self.label(k) == label)
    }

    pub fn is_constant(&self, k: usize) -> bool {
        self.entries[k].kind == VariableKind::Constant
    }

    /// Indices of the default scored channels present in this catalog, or
    /// every non-constant channel when none of them are.
    pub fn scored_channels(&self) -> Vec<usize> {
        let named: Vec<usize> = TARGET_CHANNELS.iter().filter_map(|l| self.index_of(l)).collect();
        if named.is_empty() {
            (0..self.channels()).filter(|&k| !self.is_constant(k)).collect()
        } else {
            named
        }
    }

    /// Count check: atmospheric variables × levels + surface + constant.
    pub fn kind_counts(&self) -> (usize, usize, usize) {
        let count = |k: VariableKind| self.entries.iter().filter(|e| e.kind == k).count();
        (
            count(VariableKind::Atmospheric),
            count(VariableKind::Surface),
            count(VariableKind::Constant),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_48_channels() {
        let c = VariableCatalog::era5_default();
        c.validate().unwrap();
        assert_eq!(c.channels(), 48);
        assert_eq!(c.kind_counts(), (6 * 7, 3, 3));
        let scored: Vec<String> = c.scored_channels().iter().map(|&k| c.label(k)).collect();
        assert_eq!(scored, TARGET_CHANNELS);
    }

    #[test]
    fn duplicates_and_levels_are_rejected() {
        let e = |name: &str, kind, level| CatalogEntry {
            name: name.into(),
            kind,
            level,
        };
        assert!(VariableCatalog::new(vec![e("z", VariableKind::Atmospheric, Some(500)), e("z", VariableKind::Atmospheric, Some(500))]).is_err());
        assert!(VariableCatalog::new(vec![e("z", VariableKind::Atmospheric, None)]).is_err());
        assert!(VariableCatalog::new(vec![e("t2m", VariableKind::Surface, Some(2))]).is_err());
        assert!(VariableCatalog::new(vec![e("z", VariableKind::Atmospheric, Some(500)), e("z", VariableKind::Atmospheric, Some(850))]).is_ok());
    }

    #[test]
    fn synthetic_scores_everything() {
        let c = VariableCatalog::synthetic(3);
        assert_eq!(c.scored_channels(), vec![0, 1, 2]);
        assert_eq!(c.labels(), vec!["c0", "c1", "c2"]);
    }
}
