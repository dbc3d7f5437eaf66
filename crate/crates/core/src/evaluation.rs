//! Latitude-weighted scores, reference forecasts and any-lead inference.

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array3, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::datasets::region::region_indices;
use crate::datasets::{Dataset, RegionSpec};
use crate::dynamics::{predict, Batch, Pipeline};
use crate::error::{Error, Result};
use crate::grid::latitude_weights;
use crate::models::ModelBundle;

fn check_pair(pred: &[usize], target: &[usize], alpha: usize) -> Result<()> {
    if pred != target {
        return Err(Error::Shape(format!("prediction {pred:?} and target {target:?} differ")));
    }
    if pred.len() != 3 || pred[1] != alpha {
        return Err(Error::Shape(format!("expected (K, H, W) with H = {alpha}, got {pred:?}")));
    }
    Ok(())
}

/// Per-channel `sqrt(mean_hw α(h)·(pred − target)²)` of one `(K, H, W)` state.
pub fn rmse(pred: ArrayView3<f64>, target: ArrayView3<f64>, alpha: &Array1<f64>) -> Result<Array1<f64>> {
    check_pair(pred.shape(), target.shape(), alpha.len())?;
    let (k, h, w) = pred.dim();
    Ok(Array1::from_shape_fn(k, |c| {
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = pred[[c, y, x]] - target[[c, y, x]];
                total += alpha[y] * d * d;
            }
        }
        (total / (h * w) as f64).sqrt()
    }))
}

/// How the ACC numerator treats latitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccNumerator {
    /// `Σ α ũ′u′`, so a perfect forecast scores exactly 1.
    #[default]
    Weighted,
    /// `Σ ũ′u′` with α only in the denominator.
    Unweighted,
}

/// Per-channel anomaly correlation of one `(K, H, W)` state against a
/// climatology of the same shape.
pub fn acc(
    pred: ArrayView3<f64>,
    target: ArrayView3<f64>,
    climatology: ArrayView3<f64>,
    alpha: &Array1<f64>,
    numerator: AccNumerator,
) -> Result<Array1<f64>> {
    check_pair(pred.shape(), target.shape(), alpha.len())?;
    check_pair(pred.shape(), climatology.shape(), alpha.len())?;
    let (k, h, w) = pred.dim();
    let mut out = Array1::zeros(k);
    for c in 0..k {
        let (mut num, mut pp, mut tt) = (0.0, 0.0, 0.0);
        for y in 0..h {
            let a = alpha[y];
            let a_num = match numerator {
                AccNumerator::Weighted => a,
                AccNumerator::Unweighted => 1.0,
            };
            for x in 0..w {
                let cl = climatology[[c, y, x]];
                let p = pred[[c, y, x]] - cl;
                let t = target[[c, y, x]] - cl;
                num += a_num * p * t;
                pp += a * p * p;
                tt += a * t * t;
            }
        }
        if pp <= 0.0 || tt <= 0.0 {
            return Err(Error::UndefinedScore(format!("channel {c} has zero anomaly variance")));
        }
        out[c] = num / (pp * tt).sqrt();
    }
    Ok(out)
}

/// Per-channel, per-cell temporal mean over a reference split.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    /// `(K, H, W)`.
    pub mean: Array3<f64>,
    /// Number of distinct states averaged.
    pub states: usize,
}

impl Climatology {
    /// Mean of every distinct hourly state (initial conditions and targets)
    /// in `ds`, in physical units when the dataset is normalized. States
    /// shared by overlapping windows count once; states at the same time
    /// with different values (independent synthetic samples) count separately.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data("climatology needs a nonempty dataset".into()));
        }
        let (k, h, w) = (ds.channels(), ds.grid.height, ds.grid.width);
        let mut seen: BTreeSet<(i64, u64)> = BTreeSet::new();
        let mut sum = Array3::<f64>::zeros((k, h, w));
        let mut add = |hours: f64, state: ArrayView3<f64>| {
            let mut hasher = DefaultHasher::new();
            state.iter().for_each(|v| v.to_bits().hash(&mut hasher));
            if seen.insert(((hours * 1000.0).round() as i64, hasher.finish())) {
                sum += &state;
            }
        };
        for s in &ds.samples {
            add(s.t0_hours, s.input.view());
            for (i, t) in s.targets.axis_iter(Axis(0)).enumerate() {
                add(s.t0_hours + (i + 1) as f64, t);
            }
        }
        let states = seen.len();
        let mut mean = (sum / states as f64).into_dyn();
        if let Some(stats) = &ds.stats {
            mean = stats.denormalize(&mean.insert_axis(Axis(0)))?.index_axis_move(Axis(0), 0);
        }
        let mean = mean.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { mean, states })
    }
}

/// Identity forecast: `u0` repeated for `n` steps, `(B, K, H, W)` to `(B, n, K, H, W)`.
pub fn persistence_baseline(u0: &ArrayD<f64>, n: usize) -> Result<ArrayD<f64>> {
    if u0.ndim() != 4 {
        return Err(Error::Shape(format!("persistence expects (B, K, H, W), got {:?}", u0.shape())));
    }
    let sh = u0.shape();
    let mut out = ArrayD::zeros(IxDyn(&[sh[0], n, sh[1], sh[2], sh[3]]));
    for i in 0..n {
        out.index_axis_mut(Axis(1), i).assign(u0);
    }
    Ok(out)
}

/// Every lead from one rollout of a model trained for `trained_lead` steps.
#[derive(Clone, Debug)]
pub struct FlexibleForecast {
    pub trained_lead: usize,
    /// `(B, N, K, H, W)`.
    pub predictions: ArrayD<f64>,
}

impl FlexibleForecast {
    /// Prediction at lead `n` hours, `(B, K, H, W)`.
    pub fn at(&self, n: usize) -> Result<ArrayView4<'_, f64>> {
        if n == 0 || n > self.trained_lead {
            return Err(Error::Domain(format!("lead {n} outside 1..={}", self.trained_lead)));
        }
        self.predictions
            .index_axis(Axis(1), n - 1)
            .into_dimensionality()
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Runs one `trained_lead`-step rollout; any lead up to it can then be read
/// off without integrating again.
pub fn flexible_inference(bundle: &ModelBundle, pipe: &Pipeline, batch: &Batch, trained_lead: usize) -> Result<FlexibleForecast> {
    if trained_lead == 0 {
        return Err(Error::Domain("trained lead must be at least 1".into()));
    }
    Ok(FlexibleForecast {
        trained_lead,
        predictions: predict(bundle, pipe, batch, trained_lead)?,
    })
}

/// Prediction at lead `n` from a model trained for `trained_lead` steps.
pub fn forecast_at_lead(bundle: &ModelBundle, pipe: &Pipeline, batch: &Batch, trained_lead: usize, n: usize) -> Result<ArrayD<f64>> {
    if n == 0 || n > trained_lead {
        return Err(Error::Domain(format!("lead {n} outside 1..={trained_lead}")));
    }
    Ok(flexible_inference(bundle, pipe, batch, trained_lead)?.at(n)?.to_owned().into_dyn())
}

/// What produces the forecasts being scored.
pub enum Forecaster<'a> {
    Model { bundle: &'a ModelBundle, pipe: &'a Pipeline },
    Persistence,
    /// The climatological mean at every lead.
    Climatology,
    /// The targets themselves; scores a perfect forecast.
    Oracle,
}

impl Forecaster<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Forecaster::Model { .. } => "model",
            Forecaster::Persistence => "persistence",
            Forecaster::Climatology => "climatology",
            Forecaster::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub variable: String,
    pub lead_hours: usize,
    pub rmse: f64,
    /// Absent when the anomaly variance vanished for every sample.
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub split: String,
    pub region: String,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreReport {
    pub fn get(&self, variable: &str, lead_hours: usize) -> Option<&ScoreEntry> {
        self.entries.iter().find(|e| e.variable == variable && e.lead_hours == lead_hours)
    }

    pub fn leads(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.lead_hours).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Mean RMSE over variables at one lead.
    pub fn mean_rmse(&self, lead_hours: usize) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.lead_hours == lead_hours).map(|e| e.rmse).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,lead_hours,rmse,acc\n");
        for e in &self.entries {
            let acc = e.acc.map_or(String::new(), |a| a.to_string());
            let _ = writeln!(out, "{},{},{},{}", e.variable, e.lead_hours, e.rmse, acc);
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Channels to score; `None` means the catalog's scored channels.
    pub channels: Option<Vec<usize>>,
    /// Score only inside this box of the dataset grid.
    pub region: Option<RegionSpec>,
    /// Leads to report; `None` means every lead of the dataset.
    pub leads: Option<Vec<usize>>,
    pub batch_size: usize,
    pub acc_numerator: AccNumerator,
    pub split: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            channels: None,
            region: None,
            leads: None,
            batch_size: 8,
            acc_numerator: AccNumerator::Weighted,
            split: "test".into(),
        }
    }
}

/// Scores `forecaster` on every sample of `ds` at each requested lead.
///
/// Predictions and targets are mapped back to physical units when the
/// dataset is normalized. Per-sample scores are averaged over samples.
pub fn evaluate(ds: &Dataset, climatology: &Climatology, forecaster: &Forecaster, opts: &EvalOptions) -> Result<ScoreReport> {
    if ds.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let (k, h, w) = (ds.channels(), ds.grid.height, ds.grid.width);
    if climatology.mean.dim() != (k, h, w) {
        return Err(Error::Shape(format!(
            "climatology {:?} does not match the dataset ({k}, {h}, {w})",
            climatology.mean.shape()
        )));
    }
    let channels = opts.channels.clone().unwrap_or_else(|| ds.catalog.scored_channels());
    if channels.is_empty() || channels.iter().any(|&c| c >= k) {
        return Err(Error::config("eval.channels", format!("needs a nonempty subset of 0..{k}")));
    }
    let leads = opts.leads.clone().unwrap_or_else(|| (1..=ds.lead).collect());
    if let Some(&bad) = leads.iter().find(|&&n| n == 0 || n > ds.lead) {
        return Err(Error::Domain(format!("lead {bad} outside 1..={}", ds.lead)));
    }
    let (rows, cols, region_grid, region_name) = match &opts.region {
        Some(r) => {
            let (rows, cols, g) = region_indices(r, &ds.grid)?;
            (rows, cols, g, r.name.clone())
        }
        None => ((0..h).collect::<Vec<_>>(), (0..w).collect::<Vec<_>>(), ds.grid.clone(), "global".to_string()),
    };
    let alpha = latitude_weights(&region_grid)?.alpha;
    let crop = |x: ArrayView3<f64>| -> Array3<f64> {
        x.select(Axis(0), &channels).select(Axis(1), &rows).select(Axis(2), &cols)
    };
    let clim = crop(climatology.mean.view());

    let labels = ds.catalog.labels();
    let mut rmse_sum = vec![vec![0.0; channels.len()]; leads.len()];
    let mut acc_sum = vec![vec![0.0; channels.len()]; leads.len()];
    let mut acc_count = vec![vec![0usize; channels.len()]; leads.len()];

    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let batch = Batch::from_dataset(ds, chunk)?;
        let mut pred = match forecaster {
            Forecaster::Model { bundle, pipe } => predict(bundle, pipe, &batch, ds.lead)?,
            Forecaster::Persistence => persistence_baseline(&batch.u0, ds.lead)?,
            Forecaster::Climatology => {
                let full = climatology.mean.view().insert_axis(Axis(0)).insert_axis(Axis(0));
                full.broadcast(batch.targets.raw_dim())
                    .ok_or_else(|| Error::Shape("climatology does not broadcast".into()))?
                    .to_owned()
            }
            Forecaster::Oracle => batch.targets.clone(),
        };
        let mut target = batch.targets;
        if let Some(stats) = &ds.stats {
            stats.denormalize_in_place(target.view_mut())?;
            if !matches!(forecaster, Forecaster::Climatology) {
                stats.denormalize_in_place(pred.view_mut())?;
            }
        }
        for b in 0..chunk.len() {
            for (li, &n) in leads.iter().enumerate() {
                let p = pred.slice(s![b, n - 1, .., .., ..]);
                let t = target.slice(s![b, n - 1, .., .., ..]);
                let (p, t) = (crop(p), crop(t));
                let r = rmse(p.view(), t.view(), &alpha)?;
                for c in 0..channels.len() {
                    rmse_sum[li][c] += r[c];
                }
                for c in 0..channels.len() {
                    let one = |x: &Array3<f64>| x.slice(s![c..c + 1, .., ..]).to_owned();
                    match acc(one(&p).view(), one(&t).view(), one(&clim).view(), &alpha, opts.acc_numerator) {
                        Ok(a) => {
                            acc_sum[li][c] += a[0];
                            acc_count[li][c] += 1;
                        }
                        Err(Error::UndefinedScore(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }

    let samples = ds.len();
    let mut entries = Vec::new();
    for (li, &n) in leads.iter().enumerate() {
        for (ci, &c) in channels.iter().enumerate() {
            entries.push(ScoreEntry {
                variable: labels[c].clone(),
                lead_hours: n,
                rmse: rmse_sum[li][ci] / samples as f64,
                acc: (acc_count[li][ci] > 0).then(|| acc_sum[li][ci] / acc_count[li][ci] as f64),
            });
        }
    }
    Ok(ScoreReport {
        model: forecaster.name().into(),
        split: opts.split.clone(),
        region: region_name,
        samples,
        height: rows.len(),
        width: cols.len(),
        entries,
    })
}
