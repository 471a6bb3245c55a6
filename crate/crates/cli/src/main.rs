use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::{Duration, NaiveDate};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dateformer::autocorr::{circular_autocorrelation, lagged_autocorrelation, stability_score};
use dateformer::calendar::{
    build_embedding_range, load_calendar_tables, CalendarTables, DateKey, Feature,
};
use dateformer::config::{DatasetManifest, PreparedData};
use dateformer::eval::{export_plot_data, rolling_evaluate, EvalOptions, Metrics};
use dateformer::models::encoder::EncoderModel;
use dateformer::models::{bundle_shape, embedding_matrix, ModelBundle};
use dateformer::numerics::Checkpoint;
use dateformer::scheduler::{default_lookback, forecast, ForecastRequest};
use dateformer::training::{
    checkpoint_paths, fine_tune_stage, pretrain_stage, run_pipeline, warmup_stage, TrainConfig,
    TrainingLog,
};
use dateformer::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dateformer",
    version,
    about = "Date-driven day-granular forecasting"
)]
struct Cli {
    /// Seed for parameter init, shuffling and dropout (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seed shuffling and dropout from `--seed` instead of fresh entropy.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Training config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the 23 date features for a date range as CSV.
    Embed(EmbedArgs),
    /// Load a dataset manifest and report its shape, splits and statistics.
    Ingest(IngestArgs),
    /// Pretrain the date encoder and write its checkpoint.
    Pretrain(PretrainArgs),
    /// Warm up the global forecaster from a pretrained encoder.
    Warmup(WarmupArgs),
    /// Train the full model (all enabled stages, or from a checkpoint).
    Train(TrainArgs),
    /// Forecast `--horizon` days from `--anchor`.
    Forecast(ForecastArgs),
    /// Rolling evaluation over the test split against naive baselines.
    Eval(EvalArgs),
    /// Autocorrelation of one CSV column.
    Autocorr(AutocorrArgs),
    /// Dump the encoder's attention maps for the window around one date.
    AttnDump(AttnDumpArgs),
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long, default_value = "")]
    region: String,
    #[arg(long)]
    from: NaiveDate,
    #[arg(long)]
    to: NaiveDate,
    /// Calendar table file or directory of `<region>.csv` tables.
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write the summary as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarmupArgs {
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Start from an encoder, warm-up or bundle checkpoint instead of
    /// running the earlier stages.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for checkpoints and `train_log.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    anchor: NaiveDate,
    #[arg(long)]
    horizon: usize,
    /// Defaults to the standard lookback for the horizon.
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Maximum lag in the autocorrelation companion file.
    #[arg(long)]
    max_lag: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 7, 30, 90, 180])]
    horizons: Vec<usize>,
    /// One lookback per horizon; defaults to the standard mapping.
    #[arg(long, value_delimiter = ',')]
    lookbacks: Option<Vec<usize>>,
    /// Score in the series' original units.
    #[arg(long)]
    original_units: bool,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AutocorrMode {
    Score,
    Circular,
    Lagged,
}

#[derive(Args, Debug)]
struct AutocorrArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    column: String,
    #[arg(long, value_enum, default_value = "score")]
    mode: AutocorrMode,
    #[arg(long)]
    max_lag: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttnDumpArgs {
    /// Encoder, warm-up or bundle checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    date: NaiveDate,
    #[arg(long, default_value = "")]
    region: String,
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config_error() => 2,
        Some(err) if err.is_training_error() => 4,
        Some(_) => 3,
        None if e
            .chain()
            .any(|c| c.downcast_ref::<std::io::Error>().is_some()) =>
        {
            3
        }
        None => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = train_config(&cli)?;
    match cli.command {
        Command::Embed(a) => embed(a),
        Command::Ingest(a) => ingest(a),
        Command::Pretrain(a) => pretrain(&cfg, a),
        Command::Warmup(a) => warmup(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Forecast(a) => forecast_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Autocorr(a) => autocorr(a),
        Command::AttnDump(a) => attn_dump(a),
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn tables_at(path: Option<&Path>) -> Result<CalendarTables> {
    Ok(match path {
        Some(p) => load_calendar_tables(p)?,
        None => CalendarTables::empty(),
    })
}

fn prepare(manifest: &Path) -> Result<PreparedData> {
    let m = DatasetManifest::load(manifest)?;
    let data = m.prepare()?;
    info!(
        "{}: {} days, G={}, N={}",
        m.path.display(),
        data.dataset.len(),
        data.dataset.granularity(),
        data.dataset.n_variates()
    );
    Ok(data)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_log(log: &TrainingLog, path: &Path) -> Result<()> {
    create(path)?
        .write_all(log.to_json_lines().as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let tables = tables_at(a.tables.as_deref())?;
    let rows = build_embedding_range(
        &DateKey::from_date(a.from, a.region.as_str()),
        &DateKey::from_date(a.to, a.region.as_str()),
        &tables,
    )?;
    let mut f = create(&a.out)?;
    let header: Vec<&str> = Feature::ALL.iter().map(|f| f.name()).collect();
    writeln!(f, "date,{}", header.join(","))?;
    for r in &rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{}", r.date, vals.join(","))?;
    }
    info!("wrote {} embeddings to {}", rows.len(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let data = m.prepare()?;
    let ds = &data.dataset;
    let summary = serde_json::json!({
        "path": m.path,
        "region": ds.region,
        "days": ds.len(),
        "start": ds.start_date().map(|d| d.to_string()),
        "granularity": ds.granularity(),
        "variates": ds.variate_names(),
        "splits": ds.splits(),
        "normalization": ds.stats(),
        "table_coverage": data.tables.region(&ds.region).coverage().map(|(a, b)| [a.to_string(), b.to_string()]),
    });
    let text = serde_json::to_string_pretty(&summary)?;
    match a.out {
        Some(p) => create(&p)?.write_all(text.as_bytes())?,
        None => println!("{text}"),
    }
    Ok(())
}

fn pretrain(cfg: &TrainConfig, a: PretrainArgs) -> Result<()> {
    let data = prepare(&a.manifest)?;
    let mut log = TrainingLog::default();
    let mut model =
        EncoderModel::<f64>::new(cfg.model.clone(), data.dataset.n_variates(), cfg.seed)?;
    pretrain_stage(cfg, &data, &mut model, &mut log)?;
    model.save(&a.out)?;
    write_log(&log, &a.log.unwrap_or_else(|| default_log_path(&a.out)))?;
    if let Some(v) = log.best_val(dateformer::training::Stage::Pretrain) {
        info!("best validation loss {v:.6}");
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

/// A fresh bundle shaped for `data` with the checkpoint's model config and
/// whatever trained parameters the checkpoint provides.
fn bundle_from(ck: &Checkpoint, data: &PreparedData, seed: u64) -> Result<ModelBundle<f64>> {
    let kind = ck.metadata["kind"].as_str().unwrap_or_default();
    let prefixes: Vec<&str> = match kind {
        "encoder" => vec!["encoder."],
        "dert" => vec!["encoder.", "dert."],
        "bundle" => vec![""],
        other => bail!(Error::Checkpoint(format!(
            "unknown checkpoint kind {other:?}"
        ))),
    };
    let config = serde_json::from_value(ck.metadata["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config unreadable: {e}")))?;
    let ds = &data.dataset;
    let mut bundle = ModelBundle::new(config, ds.granularity(), ds.n_variates(), seed)?;
    bundle.load_from(ck, &prefixes)?;
    Ok(bundle)
}

fn warmup(cfg: &TrainConfig, a: WarmupArgs) -> Result<()> {
    let data = prepare(&a.manifest)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut bundle = bundle_from(&ck, &data, cfg.seed)?;
    let mut log = TrainingLog::default();
    warmup_stage(cfg, &data, &mut bundle, &mut log)?;
    bundle.save(&a.out, "dert", &["encoder.", "dert."])?;
    write_log(&log, &a.log.unwrap_or_else(|| default_log_path(&a.out)))?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn train(cfg: &TrainConfig, a: TrainArgs) -> Result<()> {
    let data = prepare(&a.manifest)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log = match &a.ckpt {
        None => run_pipeline::<f64>(cfg, &data, Some(&a.out))?.log,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            // Every checkpoint kind carries a trained encoder.
            let mut bundle = bundle_from(&ck, &data, cfg.seed)?;
            let mut log = TrainingLog::default();
            fine_tune_stage(cfg, &data, &mut bundle, true, &mut log)?;
            bundle.save(&checkpoint_paths(&a.out).2, "bundle", &[])?;
            log
        }
    };
    write_log(&log, &a.out.join("train_log.jsonl"))?;
    info!("wrote {}", checkpoint_paths(&a.out).2.display());
    Ok(())
}

fn load_bundle(path: &Path) -> Result<ModelBundle<f64>> {
    let ck = Checkpoint::load(path)?;
    if ck.metadata["kind"].as_str() != Some("bundle") {
        bail!(Error::Checkpoint(format!(
            "{} is not a trained bundle checkpoint",
            path.display()
        )));
    }
    let (config, g, n) = bundle_shape(&ck)?;
    let mut bundle = ModelBundle::new(config, g, n, 0)?;
    bundle.load_from(&ck, &[""])?;
    Ok(bundle)
}

fn forecast_cmd(a: ForecastArgs) -> Result<()> {
    let bundle = load_bundle(&a.ckpt)?;
    let data = prepare(&a.manifest)?;
    let request = ForecastRequest {
        anchor: a.anchor,
        horizon: a.horizon,
        lookback: a.lookback.unwrap_or_else(|| default_lookback(a.horizon)),
    };
    let result = forecast(&bundle, &request, &data.dataset, &data.tables)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    for p in export_plot_data(&result, &data.dataset, &a.out, a.max_lag)? {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn fmt_metric(m: &Option<Metrics>) -> String {
    m.as_ref()
        .map(|m| format!("{:>9.4} {:>9.4}", m.mse, m.mae))
        .unwrap_or_else(|| format!("{:>9} {:>9}", "-", "-"))
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.ckpt)?;
    let data = prepare(&a.manifest)?;
    let options = EvalOptions {
        horizons: a.horizons,
        lookbacks: a.lookbacks,
        original_units: a.original_units,
        ..EvalOptions::default()
    };
    let report = rolling_evaluate(&bundle, &data.dataset, &data.tables, &options)?;
    println!(
        "{:>4} {:>4} {:>8} | {:>19} | {:>19} | {:>19}",
        "H", "L", "windows", "model mse/mae", "persistence", "seasonal naive"
    );
    for h in &report.horizons {
        let windows = h.model.as_ref().map(|m| m.windows).unwrap_or(0);
        println!(
            "{:>4} {:>4} {:>8} | {} | {} | {}",
            h.horizon,
            h.lookback,
            windows,
            fmt_metric(&h.model),
            fmt_metric(&h.persistence),
            fmt_metric(&h.seasonal_naive)
        );
    }
    if let Some(p) = a.out {
        create(&p)?.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| Error::Schema(format!("{} has no column {column:?}", path.display())))?;
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(idx).unwrap_or("").trim();
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: format!("{cell:?} is not a number"),
        })?;
        values.push(v);
    }
    Ok(values)
}

fn autocorr(a: AutocorrArgs) -> Result<()> {
    let x = read_column(&a.input, &a.column)?;
    let mut f = create(&a.out)?;
    match a.mode {
        AutocorrMode::Score => {
            writeln!(f, "column,score")?;
            writeln!(f, "{},{}", a.column, stability_score(&x)?)?;
        }
        AutocorrMode::Circular => {
            let r = circular_autocorrelation(&x)?;
            let last = a.max_lag.unwrap_or(r.len() - 1).min(r.len() - 1);
            writeln!(f, "lag,value")?;
            for k in 0..=last {
                writeln!(f, "{k},{}", r.lag(k))?;
            }
        }
        AutocorrMode::Lagged => {
            let k = a.max_lag.unwrap_or(x.len().saturating_sub(1));
            writeln!(f, "lag,value")?;
            for (lag, v) in lagged_autocorrelation(&x, k)?.iter().enumerate() {
                writeln!(f, "{lag},{v}")?;
            }
        }
    }
    Ok(())
}

fn attn_dump(a: AttnDumpArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let tables = tables_at(a.tables.as_deref())?;
    let (maps, pre) = if ck.metadata["kind"].as_str() == Some("encoder") {
        let m = EncoderModel::<f64>::load(&a.ckpt)?;
        let (pre, w) = (m.config.preday, m.config.window());
        let emb = embedding_matrix(&tables, &a.region, a.date - Duration::days(pre as i64), w)?;
        (m.export_attention(&emb, pre)?, pre)
    } else {
        let (config, g, n) = bundle_shape(&ck)?;
        let mut b = ModelBundle::<f64>::new(config, g, n, 0)?;
        b.load_from(&ck, &["encoder."])?;
        let (pre, w) = (b.config.preday, b.config.window());
        let emb = embedding_matrix(&tables, &a.region, a.date - Duration::days(pre as i64), w)?;
        (
            dateformer::models::encoder::export_attention(&b.encoder, &b.store, &emb, pre)?,
            pre,
        )
    };
    let mut f = create(&a.out)?;
    writeln!(f, "layer,head,query_offset,key_offset,weight")?;
    for (l, heads) in maps.iter().enumerate() {
        for (h, m) in heads.iter().enumerate() {
            for q in 0..m.rows() {
                for k in 0..m.cols() {
                    writeln!(
                        f,
                        "{l},{h},{},{},{}",
                        q as i64 - pre as i64,
                        k as i64 - pre as i64,
                        m.at(q, k)
                    )?;
                }
            }
        }
    }
    info!(
        "wrote {} layers of attention to {}",
        maps.len(),
        a.out.display()
    );
    Ok(())
}
