//! Command-line front end: one JSON configuration file plus flag
//! overrides (flags win) driving the prep → train → eval → baseline →
//! analyze pipeline. Every artifact embeds the resolved configuration and
//! seed; all randomness flows from that single seed through fixed child
//! labels, so reruns are byte-identical.
//!
//! Exit codes: 0 success, 2 input/schema error, 3 numeric divergence,
//! 4 configuration error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{self, EvalReport};
use crate::baselines;
use crate::cells::{ModelSpec, Variant, CHECKPOINT_FORMAT_VERSION};
use crate::dataprep::{
    self, build_windows, cleanse_table, fit_robust_scale, merge_on_year, ColumnScale, RawTable,
    RobustScaleParams, SeriesTable, SplitMode, WindowedDataset,
};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, Rng};
use crate::training::{self, EpochLoss, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Cleansed-table schemas: header names assigned to the kept columns of
/// each raw export.
pub const COLLISIONS_HEADERS: [&str; 5] =
    ["year", "fatal", "fsc_unadjusted", "fsc_adjusted", "all_collisions"];
pub const CASUALTIES_HEADERS: [&str; 8] = [
    "year",
    "pedestrians_killed",
    "pedal_cyclists_killed",
    "motorcyclists_killed",
    "car_occupants_killed",
    "other_road_users_killed",
    "all_road_users_killed",
    "all_road_users_all_severities",
];
pub const VEHICLES_HEADERS: [&str; 10] = [
    "year",
    "pedal_cycles",
    "motorcycles",
    "cars",
    "buses_or_coaches",
    "light_goods_vehicles",
    "heavy_goods_vehicles",
    "other_vehicles",
    "unknown_vehicles",
    "all_vehicles",
];

/// The reference feature pool. The default feature set drops the target
/// column from this list; `--paper-faithful` keeps it.
pub const FEATURE_POOL: [&str; 12] = [
    "all_collisions",
    "all_road_users_killed",
    "all_road_users_all_severities",
    "pedal_cycles",
    "motorcycles",
    "cars",
    "buses_or_coaches",
    "light_goods_vehicles",
    "heavy_goods_vehicles",
    "other_vehicles",
    "unknown_vehicles",
    "all_vehicles",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub collisions: PathBuf,
    pub casualties: PathBuf,
    pub vehicles: PathBuf,
}

impl Default for InputPaths {
    fn default() -> Self {
        InputPaths {
            collisions: "data/collisions.csv".into(),
            casualties: "data/casualties.csv".into(),
            vehicles: "data/vehicles.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipRows {
    pub collisions: usize,
    pub casualties: usize,
    pub vehicles: usize,
}

impl Default for SkipRows {
    fn default() -> Self {
        SkipRows {
            collisions: 6,
            casualties: 7,
            vehicles: 4,
        }
    }
}

/// The resolved run configuration; one JSON document, echoed into every
/// report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub inputs: InputPaths,
    pub skip_rows: SkipRows,
    /// Lookback window in years.
    pub lookback: usize,
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub train_fraction: f64,
    pub split: SplitMode,
    /// Reproduces the reference analysis configuration: the target column
    /// stays in the feature set, the model trains on the unscaled target,
    /// and the train/test split is shuffled.
    pub paper_faithful: bool,
    pub target: String,
    /// Rolling-mean window for the trend report.
    pub rolling_window: usize,
    pub ar_order: usize,
    pub ar_differencing: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: InputPaths::default(),
            skip_rows: SkipRows::default(),
            lookback: 5,
            variant: Variant::Lstm,
            layers: 2,
            hidden: 32,
            train_fraction: 0.8,
            split: SplitMode::Chronological,
            paper_faithful: false,
            target: "all_road_users_killed".into(),
            rolling_window: 5,
            ar_order: 2,
            ar_differencing: 1,
            out_dir: "out".into(),
            seed: 42,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Argument(format!("invalid config {}: {e}", path.display())))
    }

    /// Normalises derived fields: the training seed always equals the run
    /// seed, and a paper-faithful run always uses the shuffled split.
    pub fn resolve(&mut self) {
        self.train.seed = self.seed;
        if self.paper_faithful {
            self.split = SplitMode::Shuffled;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::Argument("lookback must be at least 1".into()));
        }
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Argument("layers and hidden size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument("train fraction outside (0, 1)".into()));
        }
        if self.rolling_window == 0 {
            return Err(Error::Argument("rolling window must be at least 1".into()));
        }
        if self.ar_order == 0 {
            return Err(Error::Argument("AR order must be at least 1".into()));
        }
        self.train.validate()
    }

    /// Feature columns for windowing: the reference pool, minus the target
    /// unless the paper-faithful flag keeps it.
    pub fn feature_columns(&self) -> Vec<String> {
        FEATURE_POOL
            .iter()
            .filter(|c| self.paper_faithful || **c != self.target)
            .map(|c| c.to_string())
            .collect()
    }

    fn echo(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Artifact paths under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub merged: PathBuf,
    pub scale: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub eval: PathBuf,
    pub trend: PathBuf,
    pub correlations: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: &Path) -> Self {
        Artifacts {
            merged: out_dir.join("merged_cleansed.csv"),
            scale: out_dir.join("scale_params.json"),
            checkpoint: out_dir.join("checkpoint.json"),
            history: out_dir.join("history.csv"),
            eval: out_dir.join("eval_report.json"),
            trend: out_dir.join("trend_report.csv"),
            correlations: out_dir.join("correlations.csv"),
        }
    }

    /// Every artifact the full pipeline emits.
    pub fn all(&self) -> [&Path; 7] {
        [
            &self.merged,
            &self.scale,
            &self.checkpoint,
            &self.history,
            &self.eval,
            &self.trend,
            &self.correlations,
        ]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScaleParamsFile {
    format_version: u32,
    seed: u64,
    columns: BTreeMap<String, ColumnScale>,
    config: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    seed: u64,
    best_epoch: usize,
    stopped_epoch: usize,
    model: ModelSpec,
    history: Vec<EpochLoss>,
    config: Value,
}

/// Serialises through `serde_json::Value` so object keys are always
/// alphabetical and reruns stay byte-identical.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let canonical = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&canonical)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Schema(format!("missing artifact {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("corrupt artifact {}: {e}", path.display())))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Schema(format!(
            "missing artifact {}; run the earlier pipeline stages first",
            path.display()
        )));
    }
    Ok(())
}

/// Ingests, cleanses, and merges the three inputs, then writes the merged
/// table and the fitted robust-scale parameters.
pub fn cmd_prep(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let artifacts = Artifacts::new(&cfg.out_dir);

    let collisions = cleanse_table(
        &RawTable::from_path(&cfg.inputs.collisions)?,
        cfg.skip_rows.collisions,
        &COLLISIONS_HEADERS,
    )?;
    let casualties = cleanse_table(
        &RawTable::from_path(&cfg.inputs.casualties)?,
        cfg.skip_rows.casualties,
        &CASUALTIES_HEADERS,
    )?;
    let vehicles = cleanse_table(
        &RawTable::from_path(&cfg.inputs.vehicles)?,
        cfg.skip_rows.vehicles,
        &VEHICLES_HEADERS,
    )?;

    let merged = merge_on_year(&collisions, &casualties, &vehicles)?;
    for (a, b) in merged.year_gaps() {
        eprintln!("warning: year gap between {a} and {b}");
    }
    eprintln!(
        "prep: {} rows x {} columns (+year), {}-{}",
        merged.n_rows(),
        merged.columns.len(),
        merged.years.first().unwrap_or(&0),
        merged.years.last().unwrap_or(&0),
    );

    merged.write_csv(&artifacts.merged)?;
    let names: Vec<&str> = merged.column_names();
    let scale = fit_robust_scale(&merged, &names)?;
    write_json(
        &artifacts.scale,
        &ScaleParamsFile {
            format_version: 1,
            seed: cfg.seed,
            columns: scale.columns,
            config: cfg.echo()?,
        },
    )?;
    Ok(())
}

struct Prepared {
    merged: SeriesTable,
    scale: RobustScaleParams,
    full: WindowedDataset,
    train: WindowedDataset,
    test: WindowedDataset,
}

/// Rebuilds the supervised framing from the prep artifacts; train, eval,
/// and analyze all go through here so they see identical windows and
/// splits.
fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    require(&artifacts.merged)?;
    require(&artifacts.scale)?;
    let merged = SeriesTable::read_csv(&artifacts.merged)?;
    let scale_file: ScaleParamsFile = read_json(&artifacts.scale)?;
    let scale = RobustScaleParams {
        columns: scale_file.columns,
    };

    let features = cfg.feature_columns();
    let n = merged.n_rows();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(features.len());
        for name in &features {
            let raw = merged.column(name)?[i];
            row.push(scale.scale_value(name, raw)?);
        }
        rows.push(row);
    }

    let raw_target = merged.column(&cfg.target)?.to_vec();
    let targets: Vec<f64> = if cfg.paper_faithful {
        raw_target
    } else {
        raw_target
            .iter()
            .map(|x| scale.scale_value(&cfg.target, *x))
            .collect::<Result<_>>()?
    };

    let full = build_windows(&rows, &features, &targets, &merged.years, cfg.lookback)?;
    let (train, test) = dataprep::split(
        &full,
        cfg.train_fraction,
        cfg.split,
        derive_seed(cfg.seed, "split"),
    )?;
    Ok(Prepared {
        merged,
        scale,
        full,
        train,
        test,
    })
}

/// Converts model-space predictions back to fatality counts.
fn to_original_units(cfg: &RunConfig, scale: &RobustScaleParams, preds: &[f64]) -> Result<Vec<f64>> {
    if cfg.paper_faithful {
        return Ok(preds.to_vec());
    }
    preds
        .iter()
        .map(|p| scale.invert_value(&cfg.target, *p))
        .collect()
}

fn raw_targets_for(merged: &SeriesTable, target: &str, years: &[i64]) -> Result<Vec<f64>> {
    let column = merged.column(target)?;
    years
        .iter()
        .map(|y| {
            merged
                .year_index(*y)
                .map(|i| column[i])
                .ok_or_else(|| Error::Schema(format!("target year {y} not in merged table")))
        })
        .collect()
}

/// Trains the configured model and writes the checkpoint and history.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let prepared = prepare(cfg)?;

    let mut init_rng = Rng::new(derive_seed(cfg.seed, "init"));
    let spec = ModelSpec::init(
        &mut init_rng,
        prepared.full.feature_names.len(),
        cfg.hidden,
        cfg.layers,
        cfg.variant,
        cfg.train.dropout_rate,
    );
    let result = training::fit(&spec, &prepared.train, &cfg.train)?;
    eprintln!(
        "train: stopped at epoch {} (best {}), final val loss {:.6}",
        result.stopped_epoch,
        result.best_epoch,
        result
            .history
            .last()
            .map(|e| e.val_loss)
            .unwrap_or(f64::NAN),
    );

    write_json(
        &artifacts.checkpoint,
        &CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: cfg.seed,
            best_epoch: result.best_epoch,
            stopped_epoch: result.stopped_epoch,
            model: result.best_spec,
            history: result.history.clone(),
            config: cfg.echo()?,
        },
    )?;

    let mut history = String::from("epoch,train_loss,val_loss\n");
    for e in &result.history {
        history.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    std::fs::write(&artifacts.history, history)?;
    Ok(())
}

/// Evaluates the checkpoint on the test split in fatality units.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    require(&artifacts.checkpoint)?;
    let prepared = prepare(cfg)?;
    let checkpoint: CheckpointFile = read_json(&artifacts.checkpoint)?;

    let preds = training::predict(&checkpoint.model, &prepared.test)?;
    let preds = to_original_units(cfg, &prepared.scale, &preds)?;
    let years = prepared.test.target_years();
    let targets = raw_targets_for(&prepared.merged, &cfg.target, &years)?;
    let report = EvalReport::from_predictions(years, targets, preds, cfg.seed, cfg.echo()?)?;
    eprintln!("eval: rmse {} mae {} over {} samples", report.rmse, report.mae, report.n);
    write_json(&artifacts.eval, &report)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BaselineMetrics {
    rmse: f64,
    mae: f64,
}

fn metrics(y: &[f64], yhat: &[f64]) -> Result<BaselineMetrics> {
    Ok(BaselineMetrics {
        rmse: analysis::rmse(y, yhat)?,
        mae: analysis::mae(y, yhat)?,
    })
}

/// Fits the classical baselines and appends them to the evaluation report
/// under a `baselines` key.
///
/// Baselines are always evaluated on the chronological test span (the last
/// `test` target years); under a shuffled split the model's own test set
/// differs from that span.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    require(&artifacts.eval)?;
    let prepared = prepare(cfg)?;
    let merged = &prepared.merged;

    let target = merged.column(&cfg.target)?;
    let years_f: Vec<f64> = merged.years.iter().map(|y| *y as f64).collect();
    let n_test = prepared.test.len();
    let boundary = merged.n_rows() - n_test;
    let (train_target, test_target) = (&target[..boundary], &target[boundary..]);
    let test_years = &years_f[boundary..];

    // persistence: carry the previous year's value forward
    let persistence: Vec<f64> = (boundary..merged.n_rows()).map(|i| target[i - 1]).collect();

    let ols = baselines::fit_ols(&years_f[..boundary], train_target)?;
    let ols_preds: Vec<f64> = test_years.iter().map(|y| ols.predict(*y)).collect();

    let ar = baselines::fit_ar(train_target, cfg.ar_order, cfg.ar_differencing, false)?;
    let ar_preds = baselines::forecast_ar(&ar, train_target, n_test)?;

    let poisson = baselines::poisson_fit(train_target)?;
    let poisson_preds = vec![poisson.lambda; n_test];

    let block = serde_json::json!({
        "test_years": merged.years[boundary..].to_vec(),
        "persistence": metrics(test_target, &persistence)?,
        "ols_on_year": {
            "beta0": ols.beta0,
            "beta1": ols.beta1,
            "metrics": metrics(test_target, &ols_preds)?,
        },
        "ar": {
            "p": ar.p,
            "d": ar.d,
            "alpha": ar.alpha,
            "metrics": metrics(test_target, &ar_preds)?,
        },
        "poisson": {
            "lambda": poisson.lambda,
            "metrics": metrics(test_target, &poisson_preds)?,
        },
    });

    let mut report: Value = read_json(&artifacts.eval)?;
    report
        .as_object_mut()
        .ok_or_else(|| Error::Schema("eval report is not a JSON object".into()))?
        .insert("baselines".into(), block);
    write_json(&artifacts.eval, &report)?;
    Ok(())
}

/// Writes the trend report for the target column and the vehicle-type
/// correlations against model predictions over all windowed years.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    require(&artifacts.checkpoint)?;
    let prepared = prepare(cfg)?;
    let checkpoint: CheckpointFile = read_json(&artifacts.checkpoint)?;

    let trend = analysis::trend(&prepared.merged, &cfg.target, cfg.rolling_window)?;
    trend.write_csv(&artifacts.trend)?;

    let preds = training::predict(&checkpoint.model, &prepared.full)?;
    let preds = to_original_units(cfg, &prepared.scale, &preds)?;
    let years = prepared.full.target_years();
    let corr = analysis::vehicle_correlations(&prepared.merged, &preds, &years)?;
    corr.write_csv(&artifacts.correlations)?;
    Ok(())
}

/// Runs prep, train, eval, baseline, and analyze in order.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<()> {
    cmd_prep(cfg)?;
    cmd_train(cfg)?;
    cmd_eval(cfg)?;
    cmd_baseline(cfg)?;
    cmd_analyze(cfg)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Lstm,
    Sr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Chrono,
    Shuffled,
}

#[derive(Debug, Parser)]
#[command(name = "roadcast", about = "Yearly road-casualty forecasting pipeline")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,

    #[arg(long, global = true)]
    lookback: Option<usize>,

    /// Reproduce the reference analysis configuration (target kept among
    /// the features, unscaled training target, shuffled split).
    #[arg(long, global = true)]
    paper_faithful: bool,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    split: Option<SplitArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cleanse and merge the input tables; fit scaling parameters.
    Prep,
    /// Train the configured model on the prepared data.
    Train,
    /// Evaluate the checkpoint on the test split.
    Eval,
    /// Fit classical baselines and append them to the evaluation report.
    Baseline,
    /// Emit trend and vehicle-correlation reports.
    Analyze,
    /// Run every stage in order.
    Pipeline,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(variant) = cli.variant {
        cfg.variant = match variant {
            VariantArg::Lstm => Variant::Lstm,
            VariantArg::Sr => Variant::Sr,
        };
    }
    if let Some(lookback) = cli.lookback {
        cfg.lookback = lookback;
    }
    if cli.paper_faithful {
        cfg.paper_faithful = true;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(split) = cli.split {
        cfg.split = match split {
            SplitArg::Chrono => SplitMode::Chronological,
            SplitArg::Shuffled => SplitMode::Shuffled,
        };
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Argument(_) => EXIT_CONFIG,
        _ => EXIT_INPUT,
    }
}

/// Parses arguments, runs the requested stage, and returns the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match cli.command {
        Command::Prep => cmd_prep(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Baseline => cmd_baseline(&cfg),
        Command::Analyze => cmd_analyze(&cfg),
        Command::Pipeline => cmd_pipeline(&cfg),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
