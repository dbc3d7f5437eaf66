//! Experiment configuration: one TOML file, dotted-path overrides, seed
//! resolution and full validation before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use physode::datasets::{CatalogEntry, RegionSpec, SynthConfig, VariableCatalog};
use physode::dynamics::SolverConfig;
use physode::evaluation::AccNumerator;
use physode::grid::Boundary;
use physode::models::{
    AdvectionModelConfig, BackboneConfig, BundleConfig, ResNetConfig, SourceModelConfig, VelocityModelConfig,
    VitConfig,
};
use physode::training::{ArchTriple, ChannelSubset, LossConfig, OptimConfig, StabilityRun};
use physode::{Error, Result};

pub const SEED_ENV: &str = "PHYSODE_SEED";
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: default_out(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    Era5,
    /// Dataset files previously written by `synth`.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synthetic: SynthConfig,
    pub era5: Option<Era5Config>,
    /// Directory holding `train`, `val` and `test` dataset files.
    pub dir: Option<PathBuf>,
    /// Synthetic only: samples held out for validation and test.
    pub val_samples: usize,
    pub test_samples: usize,
    /// Fit statistics on the training split and normalize every split;
    /// defaults to on for reanalysis data and off for synthetic data.
    pub normalize: Option<bool>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            synthetic: SynthConfig::default(),
            era5: None,
            dir: None,
            val_samples: 8,
            test_samples: 8,
            normalize: None,
        }
    }
}

impl DataConfig {
    pub fn normalize(&self) -> bool {
        self.normalize.unwrap_or(self.kind == DataKind::Era5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Era5Config {
    pub root: PathBuf,
    /// Explicit catalog; the 48-channel default when absent.
    #[serde(default)]
    pub catalog: Option<Vec<CatalogEntry>>,
    #[serde(default = "default_lead")]
    pub lead: usize,
    #[serde(default = "one")]
    pub stride_hours: usize,
    #[serde(default)]
    pub history: usize,
    #[serde(default = "clamp")]
    pub lat_boundary: Boundary,
}

fn default_lead() -> usize {
    6
}

fn one() -> usize {
    1
}

fn clamp() -> Boundary {
    Boundary::Clamp
}

impl Era5Config {
    pub fn catalog(&self) -> Result<VariableCatalog> {
        match &self.catalog {
            Some(entries) => VariableCatalog::new(entries.clone()),
            None => Ok(VariableCatalog::era5_default()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// Small widths that train on one CPU core.
    #[default]
    Desk,
    /// The published widths.
    Full,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: ModelPreset,
    pub velocity: Option<VelocityModelConfig>,
    pub advection: Option<AdvectionModelConfig>,
    pub source: Option<SourceModelConfig>,
}

impl ModelConfig {
    pub fn bundle(&self, channels: usize, height: usize, width: usize, seed: u64) -> BundleConfig {
        let mut c = match self.preset {
            ModelPreset::Desk => BundleConfig::desk(channels, height, width),
            ModelPreset::Full => BundleConfig::new(channels, height, width),
        };
        if let Some(v) = &self.velocity {
            c.velocity = v.clone();
        }
        if let Some(a) = &self.advection {
            c.advection = a.clone();
        }
        if let Some(s) = &self.source {
            c.source = s.clone();
        }
        c.seed = seed;
        c
    }

    pub fn resnet(&self) -> ResNetConfig {
        match self.preset {
            ModelPreset::Desk => ResNetConfig::desk(),
            ModelPreset::Full => ResNetConfig::default(),
        }
    }

    pub fn vit(&self) -> VitConfig {
        match self.preset {
            ModelPreset::Desk => VitConfig::desk(),
            ModelPreset::Full => VitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Leads to report; every trained lead when absent.
    pub leads: Option<Vec<usize>>,
    /// Region preset name (`global`, `north_america`, `south_america`, `australia`).
    pub region: Option<String>,
    pub acc_numerator: AccNumerator,
    pub batch_size: usize,
    /// Any of `model`, `persistence`, `climatology`, `oracle`.
    pub forecasters: Vec<String>,
    pub channels: Option<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            leads: None,
            region: None,
            acc_numerator: AccNumerator::Weighted,
            batch_size: 8,
            forecasters: vec!["model".into(), "persistence".into(), "climatology".into()],
            channels: None,
        }
    }
}

pub const FORECASTERS: [&str; 4] = ["model", "persistence", "climatology", "oracle"];

/// Architecture names used by the stability study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityRow {
    pub velocity: ArchName,
    pub advection: ArchName,
    pub source: ArchName,
    pub lr: f64,
    pub advection_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Local,
    Attention,
}

impl StabilityRow {
    fn new(velocity: ArchName, advection: ArchName, source: ArchName, lr: f64, advection_lr: f64) -> Self {
        Self {
            velocity,
            advection,
            source,
            lr,
            advection_lr,
        }
    }

    pub fn run(&self, model: &ModelConfig) -> StabilityRun {
        let backbone = |a: ArchName| match a {
            ArchName::Local => BackboneConfig::Local(model.resnet()),
            ArchName::Attention => BackboneConfig::Attention(model.vit()),
        };
        let source = match self.source {
            ArchName::Local => SourceModelConfig::TimeAwareLocal(model.resnet()),
            ArchName::Attention => SourceModelConfig::TimeAwareAttention(model.vit()),
        };
        StabilityRun {
            triple: ArchTriple {
                velocity: backbone(self.velocity),
                advection: backbone(self.advection),
                source,
            },
            lr: self.lr,
            advection_lr: self.advection_lr,
        }
    }
}

/// The eleven architecture/rate rows of the published stability study.
pub fn default_stability_rows() -> Vec<StabilityRow> {
    use ArchName::{Attention as A, Local as L};
    vec![
        StabilityRow::new(L, A, L, 5e-4, 5e-4),
        StabilityRow::new(A, A, L, 5e-4, 5e-4),
        StabilityRow::new(L, A, A, 5e-4, 5e-4),
        StabilityRow::new(A, A, A, 5e-4, 5e-4),
        StabilityRow::new(L, L, L, 5e-4, 5e-4),
        StabilityRow::new(A, L, L, 5e-4, 5e-4),
        StabilityRow::new(L, L, A, 5e-4, 5e-4),
        StabilityRow::new(A, L, A, 5e-4, 5e-4),
        StabilityRow::new(L, L, L, 5e-4, 5e-5),
        StabilityRow::new(A, L, A, 5e-4, 5e-5),
        StabilityRow::new(A, L, A, 5e-4, 5e-6),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Seed offsets added to the experiment seed for repeated runs.
    pub seeds: Vec<u64>,
    /// Intervals of the finite-difference study, in hours.
    pub dt_hours: Vec<f64>,
    pub period_hours: f64,
    pub stability: Vec<StabilityRow>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            dt_hours: vec![1.0, 2.0, 3.0, 6.0, 12.0],
            period_hours: 24.0,
            stability: default_stability_rows(),
        }
    }
}

/// Parses a scalar override value as a TOML literal, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a TOML document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like `a.b=value`"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{key}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Deserializes with the failing field's dotted path in the error.
pub fn from_table(doc: toml::Table) -> Result<ExperimentConfig> {
    let text = toml::to_string(&doc).map_err(|e| Error::config("<root>", e.to_string()))?;
    let de = toml::Deserializer::new(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().message().to_string())
    })
}

pub fn parse_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    from_table(doc)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_str(&text, overrides)
}

/// Flag, then environment, then file.
pub fn resolve_seed(file_seed: u64, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = env {
        return raw
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("`{raw}` is not an unsigned integer")));
    }
    Ok(file_seed)
}

impl ExperimentConfig {
    /// Propagates the single experiment seed to every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synthetic.seed = seed;
        self.optim.seed = seed;
    }

    pub fn region(&self) -> Result<Option<RegionSpec>> {
        self.eval
            .region
            .as_deref()
            .map(|name| RegionSpec::preset(name).map_err(|e| Error::config("eval.region", e.to_string())))
            .transpose()
    }

    /// Lead the model is trained for.
    pub fn lead(&self) -> usize {
        match (self.data.kind, &self.data.era5) {
            (DataKind::Era5, Some(e)) => e.lead,
            _ => self.data.synthetic.lead,
        }
    }

    pub fn set_lead(&mut self, lead: usize) {
        self.data.synthetic.lead = lead;
        if let Some(e) = &mut self.data.era5 {
            e.lead = lead;
        }
    }

    /// Checks every section; errors carry the offending field path.
    pub fn validate(&self) -> Result<()> {
        let rewrap = |prefix: &str, e: Error| match e {
            Error::Config { path, msg } if path.starts_with(prefix) => Error::Config { path, msg },
            Error::Config { path, msg } => Error::config(format!("{prefix}.{path}"), msg),
            other => Error::config(prefix, other.to_string()),
        };
        match self.data.kind {
            DataKind::Synthetic => {
                self.data.synthetic.validate().map_err(|e| rewrap("data.synthetic", e))?;
                if self.data.val_samples + self.data.test_samples > self.data.synthetic.samples && self.data.synthetic.samples > 0 {
                    return Err(Error::config(
                        "data.val_samples",
                        "validation and test samples exceed the generated samples",
                    ));
                }
            }
            DataKind::Era5 => {
                let e = self
                    .data
                    .era5
                    .as_ref()
                    .ok_or_else(|| Error::config("data.era5", "required when data.kind = \"era5\""))?;
                if e.lead == 0 {
                    return Err(Error::config("data.era5.lead", "must be at least 1"));
                }
                if e.stride_hours == 0 {
                    return Err(Error::config("data.era5.stride_hours", "must be at least 1"));
                }
                e.catalog().map_err(|err| rewrap("data.era5.catalog", err))?;
            }
            DataKind::Files => {
                if self.data.dir.is_none() {
                    return Err(Error::config("data.dir", "required when data.kind = \"files\""));
                }
            }
        }
        self.solver.validate().map_err(|e| rewrap("solver", e))?;
        self.optim.validate().map_err(|e| rewrap("optim", e))?;
        if let ChannelSubset::Indices(v) = &self.loss.channels {
            if v.is_empty() {
                return Err(Error::config("loss.channels", "must be nonempty"));
            }
        }
        if self.data.kind == DataKind::Synthetic {
            let s = &self.data.synthetic;
            self.model
                .bundle(s.channels, s.height, s.width, self.seed)
                .validate()
                .map_err(|e| rewrap("model", e))?;
        }
        self.region()?;
        if let Some(leads) = &self.eval.leads {
            if leads.is_empty() || leads.iter().any(|&n| n == 0 || n > self.lead()) {
                return Err(Error::config("eval.leads", format!("leads must lie in 1..={}", self.lead())));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        if let Some(bad) = self.eval.forecasters.iter().find(|f| !FORECASTERS.contains(&f.as_str())) {
            return Err(Error::config("eval.forecasters", format!("unknown forecaster `{bad}`")));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "must be nonempty"));
        }
        if self.ablation.dt_hours.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::config("ablation.dt_hours", "intervals must be positive"));
        }
        if !(self.ablation.period_hours > 0.0) {
            return Err(Error::config("ablation.period_hours", "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the resolved config into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SNAPSHOT_FILE), self.to_toml()?)?;
        Ok(())
    }

}
