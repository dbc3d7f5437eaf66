//! Reanalysis ingestion from WeatherBench-style classic NetCDF files.
//!
//! Every `.nc` file below the root is scanned. A catalog entry `name` is read
//! from whichever files define a variable of that name; files are joined
//! along time. Variables with a `level` dimension are sliced at the entry's
//! pressure level, and time-invariant fields `(lat, lon)` are broadcast.
//! Times are converted to hours since 1970-01-01T00:00 from the CF `units`
//! attribute of the `time` coordinate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use ndarray::{s, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::grid::{Boundary, GridSpec};
use crate::io::netcdf::{NcFile, NcVariable};

use super::{CatalogEntry, Dataset, TrajectorySample, VariableCatalog, VariableKind};

/// Half-open time window `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Inclusive calendar years.
    pub fn years(self) -> (i32, i32) {
        match self {
            Split::Train => (1979, 2015),
            Split::Val => (2016, 2016),
            Split::Test => (2017, 2018),
        }
    }

    pub fn range(self) -> TimeRange {
        let (a, b) = self.years();
        TimeRange {
            start: year_start(a),
            end: year_start(b + 1),
        }
    }

    pub fn contains(self, t: NaiveDateTime) -> bool {
        let (a, b) = self.years();
        (a..=b).contains(&t.year())
    }
}

fn year_start(y: i32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(y, 1, 1).expect("valid year").and_hms_opt(0, 0, 0).expect("midnight")
}

fn epoch() -> NaiveDateTime {
    year_start(1970)
}

pub fn to_hours(t: NaiveDateTime) -> f64 {
    (t - epoch()).num_seconds() as f64 / 3600.0
}

pub fn from_hours(h: f64) -> NaiveDateTime {
    epoch() + chrono::Duration::seconds((h * 3600.0).round() as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Era5Request {
    pub root: PathBuf,
    pub catalog: VariableCatalog,
    pub range: TimeRange,
    /// Additionally restrict samples to one of the standard year splits.
    #[serde(default)]
    pub split: Option<Split>,
    pub lead: usize,
    /// Hours between consecutive sample start times.
    #[serde(default = "one")]
    pub stride_hours: usize,
    #[serde(default)]
    pub history: usize,
    #[serde(default = "clamp")]
    pub lat_boundary: Boundary,
}

fn one() -> usize {
    1
}

fn clamp() -> Boundary {
    Boundary::Clamp
}

/// Parses CF time units such as `hours since 1979-01-01` into
/// (hours per unit, reference time).
pub fn parse_time_units(units: &str) -> Result<(f64, NaiveDateTime)> {
    let bad = || Error::ingestion("time", format!("unsupported time units `{units}`"));
    let (unit, since) = units.split_once(" since ").ok_or_else(bad)?;
    let scale = match unit.trim().to_ascii_lowercase().as_str() {
        "seconds" | "second" | "s" => 1.0 / 3600.0,
        "minutes" | "minute" => 1.0 / 60.0,
        "hours" | "hour" | "h" => 1.0,
        "days" | "day" | "d" => 24.0,
        _ => return Err(bad()),
    };
    let since = since.trim().trim_end_matches('Z').trim_end_matches(" UTC");
    let parsed = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(since, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(since, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
        .ok_or_else(bad)?;
    Ok((scale, parsed))
}

struct Source {
    path: PathBuf,
    file: NcFile,
}

impl Source {
    fn times(&self, var: &str) -> Result<Option<Vec<f64>>> {
        let Some(tv) = self.file.variable("time") else {
            return Ok(None);
        };
        let units = tv
            .text_attr("units")
            .ok_or_else(|| Error::ingestion(var, format!("{}: time has no units", self.path.display())))?;
        let (scale, reference) = parse_time_units(units).map_err(|_| {
            Error::ingestion(var, format!("{}: unsupported time units `{units}`", self.path.display()))
        })?;
        let base = to_hours(reference);
        Ok(Some(tv.data.iter().map(|&x| base + x * scale).collect()))
    }

    fn coords(&self, var: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let get = |name: &str| -> Result<Vec<f64>> {
            let alt = if name == "lat" { "latitude" } else { "longitude" };
            self.file
                .variable(name)
                .or_else(|| self.file.variable(alt))
                .map(|v| v.data.iter().copied().collect())
                .ok_or_else(|| Error::ingestion(var, format!("{}: missing `{name}` coordinate", self.path.display())))
        };
        Ok((get("lat")?, get("lon")?))
    }
}

/// `(T, H, W)` frames for one catalog entry, keyed by hour.
struct Series {
    frames: BTreeMap<i64, Array3<f64>>,
    constant: Option<ndarray::Array2<f64>>,
    lat: Vec<f64>,
    lon: Vec<f64>,
}

fn level_slice(entry: &CatalogEntry, var: &NcVariable, src: &Source) -> Result<ArrayD<f64>> {
    let label = entry.level.map_or(entry.name.clone(), |l| format!("{}{}", entry.name, l));
    let Some(axis) = var.dims.iter().position(|d| d == "level" || d == "plev" || d == "isobaricInhPa") else {
        if entry.level.is_some() && var.data.ndim() > 3 {
            return Err(Error::ingestion(&label, "variable has extra dimensions but no level axis"));
        }
        return Ok(var.data.clone());
    };
    let level = entry
        .level
        .ok_or_else(|| Error::ingestion(&label, "variable has a level axis but the catalog gives no level"))?;
    let levels: Vec<f64> = src
        .file
        .variable(&var.dims[axis])
        .map(|v| v.data.iter().copied().collect())
        .ok_or_else(|| Error::ingestion(&label, "level coordinate missing"))?;
    let idx = levels
        .iter()
        .position(|&l| (l - level as f64).abs() < 1e-6 || (l - 100.0 * level as f64).abs() < 1e-3)
        .ok_or_else(|| Error::ingestion(&label, format!("level {level} not present in {}", src.path.display())))?;
    Ok(var.data.index_axis(Axis(axis), idx).to_owned())
}

fn collect_series(entry: &CatalogEntry, sources: &[Source], range: &TimeRange) -> Result<Series> {
    let label = entry.level.map_or(entry.name.clone(), |l| format!("{}{}", entry.name, l));
    let (lo, hi) = (to_hours(range.start), to_hours(range.end));
    let mut out = Series {
        frames: BTreeMap::new(),
        constant: None,
        lat: Vec::new(),
        lon: Vec::new(),
    };
    let mut found = false;
    for src in sources {
        let Some(var) = src.file.variable(&entry.name) else {
            continue;
        };
        found = true;
        let (lat, lon) = src.coords(&label)?;
        if out.lat.is_empty() {
            out.lat = lat.clone();
            out.lon = lon.clone();
        } else if out.lat != lat || out.lon != lon {
            return Err(Error::ingestion(&label, format!("{}: grid differs from earlier files", src.path.display())));
        }
        let data = level_slice(entry, var, src)?;
        let (h, w) = (lat.len(), lon.len());
        let has_time = var.dims.first().is_some_and(|d| d == "time");
        if !has_time || entry.kind == VariableKind::Constant {
            let field = match data.ndim() {
                2 => data,
                3 if data.shape()[0] >= 1 => data.index_axis(Axis(0), 0).to_owned(),
                _ => return Err(Error::ingestion(&label, format!("constant field has shape {:?}", data.shape()))),
            };
            if field.shape() != [h, w] {
                return Err(Error::ingestion(&label, format!("shape {:?} does not match {h}x{w} grid", field.shape())));
            }
            out.constant = Some(field.into_dimensionality().expect("rank 2"));
            continue;
        }
        if data.ndim() != 3 || data.shape()[1..] != [h, w] {
            return Err(Error::ingestion(&label, format!("shape {:?} does not match (time, {h}, {w})", data.shape())));
        }
        let times = src
            .times(&label)?
            .ok_or_else(|| Error::ingestion(&label, format!("{}: no time coordinate", src.path.display())))?;
        if times.len() != data.shape()[0] {
            return Err(Error::ingestion(&label, "time coordinate length does not match data"));
        }
        for (ti, &t) in times.iter().enumerate() {
            if t < lo || t >= hi {
                continue;
            }
            let key = t.round() as i64;
            if (t - key as f64).abs() > 1e-6 {
                return Err(Error::ingestion(&label, format!("time {t} h is not on the hourly grid")));
            }
            let frame: ndarray::Array2<f64> = data.index_axis(Axis(0), ti).to_owned().into_dimensionality().expect("rank 2");
            if out.frames.insert(key, frame.insert_axis(Axis(0))).is_some() {
                return Err(Error::ingestion(&label, format!("duplicate time {}", from_hours(t))));
            }
        }
    }
    if !found {
        return Err(Error::ingestion(&label, "variable not found in any file"));
    }
    Ok(out)
}

/// Loads reanalysis files into hourly trajectory samples.
pub fn load_era5_subset(req: &Era5Request) -> Result<Dataset> {
    req.catalog.validate()?;
    if req.lead == 0 || req.stride_hours == 0 {
        return Err(Error::config("era5.lead", "lead and stride must be positive"));
    }
    if req.range.end <= req.range.start {
        return Err(Error::config("era5.range", "end must be after start"));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(&req.root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "nc"))
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::ingestion("*", format!("no .nc files below {}", req.root.display())));
    }
    let sources = paths
        .into_iter()
        .map(|path| NcFile::open(&path).map(|file| Source { path, file }))
        .collect::<Result<Vec<_>>>()?;

    let mut series = Vec::with_capacity(req.catalog.channels());
    for entry in &req.catalog.entries {
        series.push(collect_series(entry, &sources, &req.range)?);
    }

    // Common time axis from the first time-varying channel; all others must match.
    let reference = series
        .iter()
        .position(|s| s.constant.is_none())
        .ok_or_else(|| Error::ingestion("*", "catalog has no time-varying variable"))?;
    let hours: Vec<i64> = series[reference].frames.keys().copied().collect();
    let (lat, lon) = (series[reference].lat.clone(), series[reference].lon.clone());
    for (k, s) in series.iter().enumerate() {
        let label = req.catalog.label(k);
        if s.lat != lat || s.lon != lon {
            return Err(Error::ingestion(&label, "grid differs from other variables"));
        }
        if s.constant.is_none() && s.frames.keys().copied().ne(hours.iter().copied()) {
            return Err(Error::ingestion(&label, "time axis differs from other variables"));
        }
    }
    let first_label = req.catalog.label(reference);
    for pair in hours.windows(2) {
        if pair[1] - pair[0] != 1 {
            return Err(Error::ingestion(
                &first_label,
                format!(
                    "non-hourly gap between {} and {}",
                    from_hours(pair[0] as f64),
                    from_hours(pair[1] as f64)
                ),
            ));
        }
    }

    let (h, w, k) = (lat.len(), lon.len(), req.catalog.channels());
    let t = hours.len();
    let mut cube = Array4::<f64>::zeros((t, k, h, w));
    for (c, s) in series.iter().enumerate() {
        let label = req.catalog.label(c);
        match &s.constant {
            Some(field) => {
                for ti in 0..t {
                    cube.slice_mut(s![ti, c, .., ..]).assign(field);
                }
            }
            None => {
                for (ti, frame) in s.frames.values().enumerate() {
                    cube.slice_mut(s![ti, c, .., ..]).assign(&frame.index_axis(Axis(0), 0));
                }
            }
        }
        if cube.index_axis(Axis(1), c).iter().any(|x| !x.is_finite()) {
            return Err(Error::ingestion(&label, "missing or non-finite values"));
        }
    }

    let mut grid = GridSpec {
        height: h,
        width: w,
        latitudes: lat,
        longitudes: lon,
        dx: 1.0,
        dy: 1.0,
        lat_boundary: req.lat_boundary,
        lon_boundary: Boundary::Periodic,
    };
    if grid.validate().is_err() {
        grid.lon_boundary = Boundary::Clamp;
        grid.validate()
            .map_err(|e| Error::ingestion(&first_label, format!("coordinates do not form a valid grid: {e}")))?;
    }

    let mut samples = Vec::new();
    let (n, m) = (req.lead, req.history);
    let mut i = m;
    while i + n < t {
        let t0 = hours[i] as f64;
        let keep = req.split.is_none_or(|sp| sp.contains(from_hours(t0)) && sp.contains(from_hours(hours[i + n] as f64)));
        if keep {
            let input = cube.index_axis(Axis(0), i).to_owned();
            let targets = cube.slice(s![i + 1..=i + n, .., .., ..]).to_owned();
            let history = (m > 0).then(|| {
                let mut hist = Array4::zeros((m, k, h, w));
                for lag in 1..=m {
                    hist.index_axis_mut(Axis(0), lag - 1).assign(&cube.index_axis(Axis(0), i - lag));
                }
                hist
            });
            samples.push(TrajectorySample::new(input, targets, t0, history)?);
        }
        i += req.stride_hours;
    }
    Ok(Dataset {
        grid,
        catalog: req.catalog.clone(),
        lead: n,
        samples,
        stats: None,
        description: format!("era5 {} [{}, {})", req.root.display(), req.range.start, req.range.end),
    })
}

/// Convenience for tests and tools: writes one variable as a WeatherBench-style file.
pub fn write_weatherbench_file(
    path: &Path,
    name: &str,
    hours_since_1979: &[f64],
    levels: Option<&[u32]>,
    grid: &GridSpec,
    data: ArrayD<f64>,
) -> Result<()> {
    use crate::io::netcdf::NcAttr;
    let mut dims = vec![];
    let mut variables = BTreeMap::new();
    let coord = |dim: &str, vals: Vec<f64>| NcVariable {
        dims: vec![dim.to_string()],
        data: ArrayD::from_shape_vec(ndarray::IxDyn(&[vals.len()]), vals).expect("1d"),
        attrs: BTreeMap::new(),
    };
    let mut var_dims = vec![];
    if !hours_since_1979.is_empty() {
        dims.push(("time".to_string(), hours_since_1979.len()));
        let mut t = coord("time", hours_since_1979.to_vec());
        t.attrs.insert("units".into(), NcAttr::Text("hours since 1979-01-01".into()));
        variables.insert("time".to_string(), t);
        var_dims.push("time".to_string());
    }
    if let Some(levels) = levels {
        dims.push(("level".to_string(), levels.len()));
        variables.insert("level".to_string(), coord("level", levels.iter().map(|&l| l as f64).collect()));
        var_dims.push("level".to_string());
    }
    dims.push(("lat".to_string(), grid.height));
    dims.push(("lon".to_string(), grid.width));
    variables.insert("lat".to_string(), coord("lat", grid.latitudes.clone()));
    variables.insert("lon".to_string(), coord("lon", grid.longitudes.clone()));
    var_dims.push("lat".to_string());
    var_dims.push("lon".to_string());
    variables.insert(
        name.to_string(),
        NcVariable {
            dims: var_dims,
            data,
            attrs: BTreeMap::new(),
        },
    );
    NcFile {
        dims,
        unlimited: None,
        variables,
    }
    .write(path)
}
