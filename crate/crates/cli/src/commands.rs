//! The five subcommands and the ablation studies behind `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use physode::datasets::Dataset;
use physode::dynamics::{sinusoid_difference_error, sinusoid_difference_error_sampled, Batch, Pipeline};
use physode::evaluation::{evaluate, Climatology, EvalOptions, Forecaster, ScoreReport};
use physode::io::ArrayContainer;
use physode::models::{BundleConfig, InputPlan, ModelBundle, SourceModelConfig};
use physode::training::{
    load_checkpoint, read_jsonl, stability_runs, train, Outcome, StabilityRecord, StepRecord, TrainReport, TrainSetup,
    ValidationRecord, BEST_CHECKPOINT, HISTORY_FILE, VALIDATION_FILE,
};
use physode::{Error, Result};

use crate::config::{DataKind, ExperimentConfig};
use crate::data::{prepare, Splits};
use crate::plot;

/// A command failure with its exit status.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Training produced a non-finite value.
    Diverged { epoch: usize, step: usize },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Diverged { epoch, step } => {
                write!(f, "training diverged: non-finite value at epoch {epoch}, step {step}")
            }
        }
    }
}

impl std::error::Error for CliError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged { .. } => EXIT_NUMERICAL,
            CliError::Core(e) => match e {
                Error::Config { .. } => EXIT_CONFIG,
                Error::Integration { .. } | Error::Loss(_) => EXIT_NUMERICAL,
                Error::Data(_)
                | Error::Ingestion { .. }
                | Error::Region(_)
                | Error::Format(_)
                | Error::Io(_)
                | Error::Shape(_)
                | Error::Domain(_) => EXIT_DATA,
                Error::Model(_) | Error::UndefinedScore(_) => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// `synth`: writes one dataset file per split plus the config snapshot.
pub fn synth(cfg: &ExperimentConfig) -> CliResult<Splits> {
    if cfg.data.kind != DataKind::Synthetic {
        return Err(Error::config("data.kind", "synth generates synthetic data only").into());
    }
    cfg.snapshot(&cfg.out)?;
    let splits = prepare(cfg)?;
    splits.save(&cfg.out.join("data"))?;
    log::info!(
        "wrote {} / {} / {} samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.out.join("data").display()
    );
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub outcome: Outcome,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_validation: Option<f64>,
}

pub const SUMMARY_FILE: &str = "train_summary.json";

pub fn bundle_for(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> BundleConfig {
    cfg.model.bundle(ds.channels(), ds.grid.height, ds.grid.width, seed)
}

/// `train`: fits a bundle and leaves checkpoints and history in `cfg.out`.
pub fn train_cmd(cfg: &ExperimentConfig, resume: bool) -> CliResult<TrainReport> {
    cfg.snapshot(&cfg.out)?;
    let splits = prepare(cfg)?;
    if let Some(stats) = &splits.stats {
        write_json(&cfg.out.join("norm.json"), stats)?;
    }
    let mut bundle = ModelBundle::new(bundle_for(cfg, &splits.train, cfg.seed))?;
    let setup = TrainSetup {
        train: &splits.train,
        val: (!splits.val.is_empty()).then_some(&splits.val),
        solver: cfg.solver.clone(),
        optim: cfg.optim.clone(),
        loss: cfg.loss.clone(),
        run_dir: Some(cfg.out.clone()),
        resume,
        stop_after: None,
    };
    let report = train(&mut bundle, &setup)?;
    write_json(
        &cfg.out.join(SUMMARY_FILE),
        &TrainSummary {
            outcome: report.outcome,
            steps: report.steps,
            initial_loss: report.initial_loss(),
            final_loss: report.final_loss(),
            best_validation: report.best_validation,
        },
    )?;
    match report.outcome {
        Outcome::Stable => Ok(report),
        Outcome::Diverged { epoch, step } => Err(CliError::Diverged { epoch, step }),
    }
}

pub const FORECAST_SAMPLE_FILE: &str = "forecast_sample0.safetensors";

fn eval_options(cfg: &ExperimentConfig) -> Result<EvalOptions> {
    Ok(EvalOptions {
        channels: cfg.eval.channels.clone(),
        region: cfg.region()?,
        leads: cfg.eval.leads.clone(),
        batch_size: cfg.eval.batch_size,
        acc_numerator: cfg.eval.acc_numerator,
        split: "test".into(),
    })
}

/// `eval`: scores the checkpoint and the configured baselines on the test
/// split. Reads the checkpoint and datasets without modifying them.
pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<Vec<ScoreReport>> {
    let splits = prepare(cfg)?;
    let test = &splits.test;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()).into());
    }
    let needs_model = cfg.eval.forecasters.iter().any(|f| f == "model");
    let ckpt: PathBuf = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
    let bundle = if needs_model {
        let b = load_checkpoint(&ckpt).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("checkpoint {}: {io}", ckpt.display())),
            other => other,
        })?;
        let c = &b.config;
        if (c.channels, c.height, c.width) != (test.channels(), test.grid.height, test.grid.width) {
            return Err(Error::Shape(format!(
                "checkpoint expects {}x{}x{}, data is {}x{}x{}",
                c.channels,
                c.height,
                c.width,
                test.channels(),
                test.grid.height,
                test.grid.width
            ))
            .into());
        }
        Some(b)
    } else {
        None
    };
    let pipe = Pipeline::new(&test.grid, cfg.solver.clone())?;
    let clim = Climatology::from_dataset(test)?;
    let opts = eval_options(cfg)?;
    let dir = cfg.out.join("eval");
    fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for name in &cfg.eval.forecasters {
        let forecaster = match name.as_str() {
            "model" => Forecaster::Model {
                bundle: bundle.as_ref().expect("loaded above"),
                pipe: &pipe,
            },
            "persistence" => Forecaster::Persistence,
            "climatology" => Forecaster::Climatology,
            "oracle" => Forecaster::Oracle,
            other => return Err(Error::config("eval.forecasters", format!("unknown forecaster `{other}`")).into()),
        };
        let report = evaluate(test, &clim, &forecaster, &opts)?;
        report.save(&dir, &format!("scores_{name}"))?;
        reports.push(report);
    }
    if let Some(b) = &bundle {
        save_forecast_sample(b, &pipe, test, &dir.join(FORECAST_SAMPLE_FILE))?;
    }
    Ok(reports)
}

/// First test sample's forecast and target in physical units, for plotting.
fn save_forecast_sample(bundle: &ModelBundle, pipe: &Pipeline, test: &Dataset, path: &Path) -> Result<()> {
    let batch = Batch::from_dataset(test, &[0])?;
    let mut pred = physode::dynamics::predict(bundle, pipe, &batch, test.lead)?;
    let mut target = batch.targets;
    if let Some(stats) = &test.stats {
        stats.denormalize_in_place(pred.view_mut())?;
        stats.denormalize_in_place(target.view_mut())?;
    }
    let mut c = ArrayContainer::new("physode-forecast-sample/1");
    c.insert("prediction", pred.index_axis_move(Axis(0), 0));
    c.insert("target", target.index_axis_move(Axis(0), 0));
    c.set_meta("labels", test.catalog.labels().join(","));
    c.save(path)
}

/// Ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    VelocityInputs,
    SourceArch,
    DtInterval,
    Stability,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::VelocityInputs => "velocity-inputs",
            Study::SourceArch => "source-arch",
            Study::DtInterval => "dt-interval",
            Study::Stability => "stability",
        }
    }
}

/// One trained configuration in a comparison study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    /// `stable` or `nan`.
    pub outcome: String,
    /// Mean held-out RMSE over scored channels at the final lead; absent
    /// for diverged runs.
    pub rmse: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// One row of a study's summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub value: f64,
}

/// Trains `bundle_cfg` on the training split and scores it on the test split.
pub fn train_and_score(cfg: &ExperimentConfig, splits: &Splits, bundle_cfg: BundleConfig, seed: u64, label: &str) -> Result<AblationRun> {
    let mut bundle = ModelBundle::new(BundleConfig { seed, ..bundle_cfg })?;
    let setup = TrainSetup {
        train: &splits.train,
        val: None,
        solver: cfg.solver.clone(),
        optim: physode::training::OptimConfig {
            seed,
            ..cfg.optim.clone()
        },
        loss: cfg.loss.clone(),
        run_dir: None,
        resume: false,
        stop_after: None,
    };
    let report = train(&mut bundle, &setup)?;
    let (outcome, rmse) = match report.outcome {
        Outcome::Stable => {
            let pipe = Pipeline::new(&splits.test.grid, cfg.solver.clone())?;
            let clim = Climatology::from_dataset(&splits.test)?;
            let lead = splits.test.lead;
            let opts = EvalOptions {
                leads: Some(vec![lead]),
                ..eval_options(cfg)?
            };
            match evaluate(&splits.test, &clim, &Forecaster::Model { bundle: &bundle, pipe: &pipe }, &opts) {
                Ok(r) => ("stable", r.mean_rmse(lead)),
                Err(Error::Integration { .. }) => ("nan", None),
                Err(e) => return Err(e),
            }
        }
        Outcome::Diverged { .. } => ("nan", None),
    };
    log::info!("{label} seed {seed}: {outcome} rmse {rmse:?}");
    Ok(AblationRun {
        label: label.into(),
        seed,
        outcome: outcome.into(),
        rmse,
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
    })
}

/// Mean RMSE per label over stable seeds; NaN when every seed diverged.
pub fn summarize(runs: &[AblationRun]) -> Vec<SummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let v: Vec<f64> = runs.iter().filter(|r| r.label == label).filter_map(|r| r.rmse).collect();
            SummaryRow {
                label: label.into(),
                value: if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 },
            }
        })
        .collect()
}

pub fn plan_label(plan: InputPlan) -> &'static str {
    match plan {
        InputPlan::U => "u",
        InputPlan::Grad => "grad_u",
        InputPlan::UGrad => "u+grad_u",
        InputPlan::UGradDt => "u+grad_u+du_dt",
        InputPlan::Dt => "du_dt",
    }
}

/// Velocity-input study: every plan under every seed offset. The data
/// carries one hour of history so the `Δu/Δt` plans see the same samples.
pub fn velocity_inputs_study(cfg: &ExperimentConfig, plans: &[InputPlan]) -> Result<Vec<AblationRun>> {
    let mut cfg = cfg.clone();
    cfg.data.synthetic.history = cfg.data.synthetic.history.max(1);
    if let Some(e) = &mut cfg.data.era5 {
        e.history = e.history.max(1);
    }
    let splits = prepare(&cfg)?;
    let mut runs = Vec::new();
    for &plan in plans {
        for &offset in &cfg.ablation.seeds {
            let mut b = bundle_for(&cfg, &splits.train, 0);
            b.velocity.inputs = plan;
            runs.push(train_and_score(&cfg, &splits, b, cfg.seed.wrapping_add(offset), plan_label(plan))?);
        }
    }
    Ok(runs)
}

pub fn source_variants(cfg: &ExperimentConfig) -> Vec<SourceModelConfig> {
    let (r, v) = (cfg.model.resnet(), cfg.model.vit());
    vec![
        SourceModelConfig::TimeAwareLocal(r.clone()),
        SourceModelConfig::TimeAwareAttention(v.clone()),
        SourceModelConfig::Local(r),
        SourceModelConfig::Attention(v),
        SourceModelConfig::None,
    ]
}

pub fn source_arch_study(cfg: &ExperimentConfig) -> Result<Vec<AblationRun>> {
    let splits = prepare(cfg)?;
    let mut runs = Vec::new();
    for source in source_variants(cfg) {
        for &offset in &cfg.ablation.seeds {
            let mut b = bundle_for(cfg, &splits.train, 0);
            let label = source.short_name();
            b.source = source.clone();
            runs.push(train_and_score(cfg, &splits, b, cfg.seed.wrapping_add(offset), label)?);
        }
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtRow {
    pub dt_hours: f64,
    pub closed_form: f64,
    pub sampled: f64,
}

/// Forward-difference error of `sin(2πt/P)` for each interval.
pub fn dt_interval_study(cfg: &ExperimentConfig) -> Result<Vec<DtRow>> {
    cfg.ablation
        .dt_hours
        .iter()
        .map(|&dt| {
            Ok(DtRow {
                dt_hours: dt,
                closed_form: sinusoid_difference_error(cfg.ablation.period_hours, dt),
                sampled: sinusoid_difference_error_sampled(cfg.ablation.period_hours, dt, 4096)?,
            })
        })
        .collect()
}

pub fn stability_study(cfg: &ExperimentConfig) -> Result<Vec<StabilityRecord>> {
    let splits = prepare(cfg)?;
    let base = bundle_for(cfg, &splits.train, cfg.seed);
    let runs: Vec<_> = cfg.ablation.stability.iter().map(|r| r.run(&cfg.model)).collect();
    let setup = TrainSetup {
        train: &splits.train,
        val: (!splits.val.is_empty()).then_some(&splits.val),
        solver: cfg.solver.clone(),
        optim: cfg.optim.clone(),
        loss: cfg.loss.clone(),
        run_dir: None,
        resume: false,
        stop_after: None,
    };
    stability_runs(&base, &runs, &setup)
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn opt_usize(v: Option<usize>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Writes `<study>.csv` (label,value), a detail table and a bar chart.
fn write_summary(dir: &Path, study: Study, rows: &[SummaryRow]) -> Result<()> {
    write_csv(
        &dir.join(format!("{}.csv", study.name())),
        "label,value",
        rows.iter().map(|r| format!("{},{}", r.label, r.value)),
    )?;
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    plot::save(&plot::bar_chart(&values)?, &dir.join(format!("{}.png", study.name())))
}

/// `ablate`: runs one study and writes its tables and figure under
/// `<out>/ablation`.
pub fn ablate_cmd(cfg: &ExperimentConfig, study: Study) -> CliResult<Vec<SummaryRow>> {
    cfg.snapshot(&cfg.out)?;
    let dir = cfg.out.join("ablation");
    fs::create_dir_all(&dir)?;
    let rows = match study {
        Study::VelocityInputs | Study::SourceArch => {
            let runs = if study == Study::VelocityInputs {
                velocity_inputs_study(cfg, &InputPlan::ALL)?
            } else {
                source_arch_study(cfg)?
            };
            write_csv(
                &dir.join(format!("{}_runs.csv", study.name())),
                "label,seed,outcome,rmse,initial_loss,final_loss",
                runs.iter().map(|r| {
                    format!(
                        "{},{},{},{},{},{}",
                        r.label,
                        r.seed,
                        r.outcome,
                        opt(r.rmse),
                        opt(r.initial_loss),
                        opt(r.final_loss)
                    )
                }),
            )?;
            write_json(&dir.join(format!("{}_runs.json", study.name())), &runs)?;
            summarize(&runs)
        }
        Study::DtInterval => {
            let table = dt_interval_study(cfg)?;
            write_csv(
                &dir.join("dt-interval_errors.csv"),
                "dt_hours,closed_form,sampled",
                table.iter().map(|r| format!("{},{},{}", r.dt_hours, r.closed_form, r.sampled)),
            )?;
            table
                .iter()
                .map(|r| SummaryRow {
                    label: format!("{}h", r.dt_hours),
                    value: r.closed_form,
                })
                .collect()
        }
        Study::Stability => {
            let records = stability_study(cfg)?;
            let mut jsonl = String::new();
            for r in &records {
                jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
                jsonl.push('\n');
            }
            fs::write(dir.join("stability.jsonl"), jsonl)?;
            write_csv(
                &dir.join("stability_table.csv"),
                "velocity,advection,source,lr,advection_lr,outcome,nan_epoch,final_validation_loss,rank",
                records.iter().map(|r| {
                    format!(
                        "{},{},{},{},{},{},{},{},{}",
                        r.velocity,
                        r.advection,
                        r.source,
                        r.lr,
                        r.advection_lr,
                        r.outcome,
                        opt_usize(r.nan_epoch),
                        opt(r.final_validation_loss),
                        opt_usize(r.rank)
                    )
                }),
            )?;
            records
                .iter()
                .map(|r| SummaryRow {
                    label: format!("{}/{}/{} {}/{}", r.velocity, r.advection, r.source, r.lr, r.advection_lr),
                    value: r.final_validation_loss.unwrap_or(f64::NAN),
                })
                .collect()
        }
    };
    write_summary(&dir, study, &rows)?;
    Ok(rows)
}

/// Run id used as the prefix of every figure: the run directory's name.
pub fn run_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "run".into())
}

/// `plot`: loss curves, forecast field maps and ablation bars for a run
/// directory. Returns the files written.
pub fn plot_cmd(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let id = run_id(dir);
    let out = dir.join("plots");
    let mut written = Vec::new();

    let hist_path = dir.join(HISTORY_FILE);
    let history: Vec<StepRecord> = if hist_path.exists() { read_jsonl(&hist_path)? } else { Vec::new() };
    if history.is_empty() {
        return Err(Error::Data(format!("no training history in {}", dir.display())).into());
    }
    let mut series = vec![history.iter().map(|r| (r.step as f64, r.loss)).collect::<Vec<_>>()];
    let val_path = dir.join(VALIDATION_FILE);
    if val_path.exists() {
        let val: Vec<ValidationRecord> = read_jsonl(&val_path)?;
        series.push(val.iter().map(|r| (r.step as f64, r.loss)).collect());
    }
    let p = out.join(format!("{id}_loss.png"));
    plot::save(&plot::line_plot(&series, true)?, &p)?;
    written.push(p);

    let sample = dir.join("eval").join(FORECAST_SAMPLE_FILE);
    if sample.exists() {
        let c = ArrayContainer::load(&sample)?;
        let labels: Vec<String> = c.meta("labels")?.split(',').map(String::from).collect();
        for key in ["prediction", "target"] {
            let a = c.array(key)?;
            let last = a.shape()[0] - 1;
            for (k, label) in labels.iter().enumerate() {
                let field = a.slice(s![last, k, .., ..]);
                let p = out.join(format!("{id}_{label}_{key}.png"));
                plot::save(&plot::field_map(field, 8)?, &p)?;
                written.push(p);
            }
        }
    }

    for study in [Study::VelocityInputs, Study::SourceArch, Study::DtInterval, Study::Stability] {
        let csv = dir.join("ablation").join(format!("{}.csv", study.name()));
        if !csv.exists() {
            continue;
        }
        let values: Vec<f64> = fs::read_to_string(&csv)?
            .lines()
            .skip(1)
            .filter_map(|l| l.rsplit_once(',').map(|(_, v)| v.parse().unwrap_or(f64::NAN)))
            .collect();
        if values.is_empty() {
            continue;
        }
        let p = out.join(format!("{id}_ablation_{}.png", study.name()));
        plot::save(&plot::bar_chart(&values)?, &p)?;
        written.push(p);
    }
    Ok(written)
}
