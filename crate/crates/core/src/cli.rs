//! Command-line front end. Every command resolves a [`RunConfig`] from an
//! optional INI file plus flags, echoes it to `<out>/config.ini`, and writes
//! its results as files under `<out>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ini::Ini;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    chronological_split, generate_synthetic, interpolate_missing, load_station_csv, training_rows,
    window_samples, HydroSeries, MinMaxScaler, Split, SplitRatios, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::graph::StationGraph;
use crate::model::{ApsLstm, ModelConfig};
use crate::parallel::Execution;
use crate::spectral::{aggregation_weights, dft_amplitudes, select_top_k};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, EpochRecord, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "apslstm", version, about = "Multi-station flood forecasting")]
pub struct Cli {
    /// INI file with [data], [model] and [train] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub adjacency: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write model.apsl, history.csv and metrics.json.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the test split.
    Evaluate,
    /// Forecast from the last T hours given in a CSV.
    Predict {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the top-k period divisions of one window.
    AnalyzePeriods {
        /// Row index of the window's last hour.
        #[arg(long)]
        origin: usize,
    },
    /// Write the attention score matrices of one window.
    DumpAttention {
        #[arg(long)]
        origin: usize,
    },
    /// Generate a synthetic dataset and adjacency.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub stations: usize,
    #[arg(long, default_value_t = 2000)]
    pub rows: usize,
    /// Comma-separated planted periods in hours.
    #[arg(long, default_value = "4,6", value_delimiter = ',')]
    pub periods: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub lag: usize,
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub flow_station: Option<String>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub input_len: usize,
    pub horizon: usize,
    pub blocks: usize,
    pub top_k: usize,
    pub hidden: usize,
    /// `None` means `min(4, N − 1)`.
    pub embed_dim: Option<usize>,
    pub psa_kernel: (usize, usize),
    pub ssa_kernel: usize,
    pub disable_psa: bool,
    pub disable_ssa: bool,
    pub differentiable_agg_weights: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        let t = TrainConfig::default();
        let r = SplitRatios::default();
        RunConfig {
            dataset: None,
            adjacency: None,
            checkpoint: None,
            out: PathBuf::from("."),
            flow_station: None,
            train_ratio: r.train,
            val_ratio: r.val,
            test_ratio: r.test,
            input_len: m.input_len,
            horizon: m.horizon,
            blocks: m.blocks,
            top_k: m.top_k,
            hidden: m.hidden,
            embed_dim: None,
            psa_kernel: m.psa_kernel,
            ssa_kernel: m.ssa_kernel,
            disable_psa: false,
            disable_ssa: false,
            differentiable_agg_weights: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            parallel: t.execution == Execution::Parallel,
        }
    }
}

fn parse_val<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {v:?} is not valid")))
}

fn parse_kernel(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("psa_kernel {v:?} must look like 3x3"));
    let (a, b) = v.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

impl RunConfig {
    /// Applies an INI document over the current values. Unknown sections and
    /// keys are rejected.
    pub fn apply_ini(&mut self, ini: &Ini) -> Result<()> {
        for (section, props) in ini.iter() {
            let Some(sec) = section else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("config keys must sit inside a [section]".into()));
                }
                continue;
            };
            for (key, v) in props.iter() {
                match (sec, key) {
                    ("data", "dataset") => self.dataset = Some(PathBuf::from(v.trim())),
                    ("data", "adjacency") => self.adjacency = Some(PathBuf::from(v.trim())),
                    ("data", "flow_station") => self.flow_station = Some(v.trim().to_string()),
                    ("data", "train_ratio") => self.train_ratio = parse_val(sec, key, v)?,
                    ("data", "val_ratio") => self.val_ratio = parse_val(sec, key, v)?,
                    ("data", "test_ratio") => self.test_ratio = parse_val(sec, key, v)?,
                    ("model", "input_len") => self.input_len = parse_val(sec, key, v)?,
                    ("model", "horizon") => self.horizon = parse_val(sec, key, v)?,
                    ("model", "blocks") => self.blocks = parse_val(sec, key, v)?,
                    ("model", "top_k") => self.top_k = parse_val(sec, key, v)?,
                    ("model", "hidden") => self.hidden = parse_val(sec, key, v)?,
                    ("model", "embed_dim") => {
                        self.embed_dim = match v.trim() {
                            "auto" => None,
                            s => Some(parse_val(sec, key, s)?),
                        }
                    }
                    ("model", "psa_kernel") => self.psa_kernel = parse_kernel(v)?,
                    ("model", "ssa_kernel") => self.ssa_kernel = parse_val(sec, key, v)?,
                    ("model", "disable_psa") => self.disable_psa = parse_val(sec, key, v)?,
                    ("model", "disable_ssa") => self.disable_ssa = parse_val(sec, key, v)?,
                    ("model", "differentiable_agg_weights") => {
                        self.differentiable_agg_weights = parse_val(sec, key, v)?
                    }
                    ("train", "epochs") => self.epochs = parse_val(sec, key, v)?,
                    ("train", "batch_size") => self.batch_size = parse_val(sec, key, v)?,
                    ("train", "lr") => self.lr = parse_val(sec, key, v)?,
                    ("train", "seed") => self.seed = parse_val(sec, key, v)?,
                    ("train", "parallel") => self.parallel = parse_val(sec, key, v)?,
                    _ => return Err(Error::Config(format!("unknown config key [{sec}] {key}"))),
                }
            }
        }
        Ok(())
    }

    pub fn to_ini(&self) -> Ini {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut ini = Ini::new();
        ini.with_section(Some("data"))
            .set("dataset", opt_path(&self.dataset))
            .set("adjacency", opt_path(&self.adjacency))
            .set("flow_station", self.flow_station.clone().unwrap_or_default())
            .set("train_ratio", self.train_ratio.to_string())
            .set("val_ratio", self.val_ratio.to_string())
            .set("test_ratio", self.test_ratio.to_string());
        ini.with_section(Some("model"))
            .set("input_len", self.input_len.to_string())
            .set("horizon", self.horizon.to_string())
            .set("blocks", self.blocks.to_string())
            .set("top_k", self.top_k.to_string())
            .set("hidden", self.hidden.to_string())
            .set("embed_dim", self.embed_dim.map_or("auto".to_string(), |m| m.to_string()))
            .set("psa_kernel", format!("{}x{}", self.psa_kernel.0, self.psa_kernel.1))
            .set("ssa_kernel", self.ssa_kernel.to_string())
            .set("disable_psa", self.disable_psa.to_string())
            .set("disable_ssa", self.disable_ssa.to_string())
            .set("differentiable_agg_weights", self.differentiable_agg_weights.to_string());
        ini.with_section(Some("train"))
            .set("epochs", self.epochs.to_string())
            .set("batch_size", self.batch_size.to_string())
            .set("lr", self.lr.to_string())
            .set("seed", self.seed.to_string())
            .set("parallel", self.parallel.to_string());
        ini
    }

    pub fn model_config(&self, n_stations: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_stations,
            input_len: self.input_len,
            horizon: self.horizon,
            blocks: self.blocks,
            top_k: self.top_k,
            hidden: self.hidden,
            psa_kernel: self.psa_kernel,
            ssa_kernel: self.ssa_kernel,
            embed_dim: self.embed_dim.unwrap_or(4.min(n_stations.saturating_sub(1))),
            disable_psa: self.disable_psa,
            disable_ssa: self.disable_ssa,
            differentiable_agg_weights: self.differentiable_agg_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            execution: if self.parallel {
                Execution::available()
            } else {
                Execution::Sequential
            },
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    fn execution(&self) -> Execution {
        self.train_config().execution
    }
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = self.error.to_string().replace('\n', " ");
        write!(f, "{} failed: {msg}", self.stage)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type CmdResult<T = ()> = std::result::Result<T, StageError>;

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.error.exit_code()
        }
    }
}

/// Runs a parsed command; the returned string is the human-readable summary.
pub fn execute(cli: Cli) -> CmdResult<String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let ini = Ini::load_from_file(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))
            .stage("config")?;
        cfg.apply_ini(&ini).stage("config")?;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.dataset.is_some() {
        cfg.dataset = cli.dataset;
    }
    if cli.adjacency.is_some() {
        cfg.adjacency = cli.adjacency;
    }
    if cli.checkpoint.is_some() {
        cfg.checkpoint = cli.checkpoint;
    }
    fs::create_dir_all(&cfg.out).map_err(Error::from).stage("output")?;
    match cli.command {
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cmd_train(cfg)
        }
        Command::Evaluate => cmd_evaluate(cfg),
        Command::Predict { input } => cmd_predict(cfg, &input),
        Command::AnalyzePeriods { origin } => cmd_analyze_periods(cfg, origin),
        Command::DumpAttention { origin } => cmd_dump_attention(cfg, origin),
        Command::Synth(args) => cmd_synth(cfg, args),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag --{what} or [data] {what})")))
}

fn load_graph(cfg: &RunConfig) -> CmdResult<StationGraph> {
    let path = required(&cfg.adjacency, "adjacency").stage("config")?;
    let flow = match &cfg.flow_station {
        Some(f) => f.clone(),
        None => last_header_name(path).stage("ingestion")?,
    };
    StationGraph::from_csv(path, &flow).stage("ingestion")
}

fn last_header_name(path: &Path) -> Result<String> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot read adjacency {}: {e}", path.display())))?;
    let h = rdr.headers().map_err(|e| Error::Data(e.to_string()))?;
    h.iter()
        .next_back()
        .map(|s| s.trim().to_string())
        .ok_or_else(|| Error::Data("adjacency header is empty".into()))
}

struct Prepared {
    graph: StationGraph,
    series: HydroSeries,
    scaler: MinMaxScaler,
    model_config: ModelConfig,
}

/// Ingests, fills gaps and fits the scaler on the training rows.
fn prepare(cfg: &RunConfig) -> CmdResult<Prepared> {
    let graph = load_graph(cfg)?;
    let model_config = cfg.model_config(graph.n_stations()).stage("config")?;
    let path = required(&cfg.dataset, "dataset").stage("config")?;
    let raw = load_station_csv(path, &graph).stage("ingestion")?;
    let series = interpolate_missing(&raw).stage("interpolation")?;
    let fit_rows =
        training_rows(series.rows(), cfg.input_len, cfg.horizon, cfg.ratios()).stage("split")?;
    let mut scaler = MinMaxScaler::new();
    scaler.fit(&series, fit_rows).stage("normalization")?;
    Ok(Prepared {
        graph,
        series,
        scaler,
        model_config,
    })
}

fn split_with(p: &Prepared, cfg: &RunConfig, scaler: &MinMaxScaler) -> CmdResult<Split> {
    let norm = scaler.transform(&p.series).stage("normalization")?;
    let samples =
        window_samples(&norm, cfg.input_len, cfg.horizon, p.graph.flow_station()).stage("windowing")?;
    chronological_split(samples, cfg.ratios()).stage("split")
}

fn echo(cfg: &RunConfig, model: Option<&ModelConfig>) -> CmdResult {
    let mut resolved = cfg.clone();
    if let Some(m) = model {
        resolved.embed_dim = Some(m.embed_dim);
    }
    resolved
        .to_ini()
        .write_to_file(cfg.out.join("config.ini"))
        .map_err(Error::from)
        .stage("output")
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn write_json(path: &Path, v: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(v).expect("json serializes");
    fs::write(path, text + "\n").map_err(Error::from).stage("output")
}

fn write_history(path: &Path, history: &[EpochRecord]) -> CmdResult {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_mse, r.val_mse);
    }
    fs::write(path, s).map_err(Error::from).stage("output")
}

fn load_checkpoint(cfg: &RunConfig, expected: &ModelConfig) -> CmdResult<Checkpoint> {
    let path = required(&cfg.checkpoint, "checkpoint").stage("config")?;
    checkpoint::load(path, Some(expected)).stage("checkpoint")
}

fn cmd_train(cfg: RunConfig) -> CmdResult<String> {
    let p = prepare(&cfg)?;
    echo(&cfg, Some(&p.model_config))?;
    let split = split_with(&p, &cfg, &p.scaler)?;
    let model = ApsLstm::new(p.model_config.clone(), &p.graph, cfg.seed).stage("model")?;
    let outcome = train(model, &split.train, &split.val, &cfg.train_config()).stage("training")?;
    let flow = p.graph.flow_station();
    let exec = cfg.execution();
    let val = evaluate(&outcome.model, &split.val, &p.scaler, flow, exec).stage("evaluation")?;
    let test = evaluate(&outcome.model, &split.test, &p.scaler, flow, exec).stage("evaluation")?;

    let ckpt = Checkpoint {
        model: outcome.model,
        scaler: Some(p.scaler.clone()),
    };
    checkpoint::save(&cfg.out.join("model.apsl"), &ckpt).stage("checkpoint")?;
    write_history(&cfg.out.join("history.csv"), &outcome.history)?;
    let cj = config_json(&cfg);
    write_json(&cfg.out.join("metrics.json"), &val.report.to_json(Some(cj.clone())))?;
    write_json(&cfg.out.join("test_metrics.json"), &test.report.to_json(Some(cj)))?;
    Ok(format!(
        "trained {} epochs (best epoch {}), {} train / {} val / {} test samples\nvalidation metrics:\n{}",
        outcome.history.len(),
        outcome.best_epoch,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        val.report.table()
    ))
}

fn cmd_evaluate(cfg: RunConfig) -> CmdResult<String> {
    let p = prepare(&cfg)?;
    echo(&cfg, Some(&p.model_config))?;
    let ck = load_checkpoint(&cfg, &p.model_config)?;
    let scaler = ck.scaler.clone().unwrap_or_else(|| p.scaler.clone());
    let split = split_with(&p, &cfg, &scaler)?;
    let flow = p.graph.flow_station();
    let ev = evaluate(&ck.model, &split.test, &scaler, flow, cfg.execution()).stage("evaluation")?;
    write_json(&cfg.out.join("metrics.json"), &ev.report.to_json(Some(config_json(&cfg))))?;
    let mut s = String::from("origin_index,horizon,predicted_flow,true_flow\n");
    for ((sample, pred), truth) in split.test.iter().zip(&ev.predictions).zip(&ev.truths) {
        for h in 0..pred.len() {
            let _ = writeln!(s, "{},{},{},{}", sample.origin_index, h + 1, pred[h], truth[h]);
        }
    }
    fs::write(cfg.out.join("predictions.csv"), s).map_err(Error::from).stage("output")?;
    Ok(format!("test metrics ({} samples):\n{}", split.test.len(), ev.report.table()))
}

fn cmd_predict(cfg: RunConfig, input: &Path) -> CmdResult<String> {
    let graph = load_graph(&cfg)?;
    let mc = cfg.model_config(graph.n_stations()).stage("config")?;
    echo(&cfg, Some(&mc))?;
    let ck = load_checkpoint(&cfg, &mc)?;
    let scaler = ck
        .scaler
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no scaler".into()))
        .stage("checkpoint")?;
    let raw = load_station_csv(input, &graph).stage("ingestion")?;
    if raw.rows() != mc.input_len {
        return Err(Error::Data(format!("expected {} rows, got {}", mc.input_len, raw.rows()))).stage("ingestion");
    }
    let filled = interpolate_missing(&raw).stage("interpolation")?;
    let norm = scaler.transform(&filled).stage("normalization")?;
    let x = norm.window(0, mc.input_len).stage("prediction")?;
    let y = ck.model.predict(&x).stage("prediction")?;
    let flow = graph.flow_station();
    let preds = y.iter().map(|&v| scaler.invert(v, flow)).collect::<Result<Vec<_>>>().stage("prediction")?;
    let mut csv_out = String::from("horizon,predicted_flow\n");
    let mut table = format!("{:<8}{:>14}\n", "horizon", "flow");
    for (h, v) in preds.iter().enumerate() {
        let _ = writeln!(csv_out, "{},{v}", h + 1);
        let _ = writeln!(table, "{:<8}{:>14.2}", format!("T+{}", h + 1), v);
    }
    fs::write(cfg.out.join("forecast.csv"), csv_out).map_err(Error::from).stage("output")?;
    Ok(table)
}

/// Normalized `[T, N]` window ending at row `origin`.
fn window_at(p: &Prepared, scaler: &MinMaxScaler, t_len: usize, origin: usize) -> CmdResult<Tensor> {
    if origin + 1 < t_len || origin >= p.series.rows() {
        return Err(Error::Data(format!(
            "origin {origin} needs rows {}..={origin} but the dataset has {} rows",
            (origin + 1).saturating_sub(t_len),
            p.series.rows()
        )))
        .stage("windowing");
    }
    let norm = scaler.transform(&p.series).stage("normalization")?;
    norm.window(origin + 1 - t_len, t_len).stage("windowing")
}

fn cmd_analyze_periods(cfg: RunConfig, origin: usize) -> CmdResult<String> {
    let p = prepare(&cfg)?;
    echo(&cfg, Some(&p.model_config))?;
    let (model, scaler) = match &cfg.checkpoint {
        Some(_) => {
            let ck = load_checkpoint(&cfg, &p.model_config)?;
            let s = ck.scaler.clone().unwrap_or_else(|| p.scaler.clone());
            (ck.model, s)
        }
        None => (
            ApsLstm::new(p.model_config.clone(), &p.graph, cfg.seed).stage("model")?,
            p.scaler.clone(),
        ),
    };
    let x = window_at(&p, &scaler, cfg.input_len, origin)?;
    let fused = model.embedded_input(&x).stage("analysis")?;
    let spectrum = dft_amplitudes(&fused).stage("analysis")?;
    let divisions = select_top_k(&spectrum, cfg.top_k).stage("analysis")?;
    let weights = aggregation_weights(&divisions);
    let mut s = String::from("rank,frequency,period_len,num_periods,amplitude,weight\n");
    let mut table = format!("{:<6}{:>10}{:>12}{:>12}{:>12}{:>10}\n", "rank", "freq", "period_len", "periods", "amplitude", "weight");
    for (i, (d, w)) in divisions.iter().zip(&weights).enumerate() {
        let _ = writeln!(s, "{},{},{},{},{},{}", i + 1, d.frequency, d.period_len, d.num_periods, d.amplitude, w);
        let _ = writeln!(
            table,
            "{:<6}{:>10}{:>12}{:>12}{:>12.2}{:>10.2}",
            i + 1,
            d.frequency,
            d.period_len,
            d.num_periods,
            d.amplitude,
            w
        );
    }
    fs::write(cfg.out.join("periods.csv"), s).map_err(Error::from).stage("output")?;
    Ok(table)
}

fn matrix_csv(t: &Tensor, row_labels: &[String], col_labels: &[String], corner: &str) -> String {
    let mut s = String::from(corner);
    for c in col_labels {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (r, label) in row_labels.iter().enumerate() {
        s.push_str(label);
        for v in t.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn cmd_dump_attention(cfg: RunConfig, origin: usize) -> CmdResult<String> {
    let p = prepare(&cfg)?;
    echo(&cfg, Some(&p.model_config))?;
    let ck = load_checkpoint(&cfg, &p.model_config)?;
    let scaler = ck.scaler.clone().unwrap_or_else(|| p.scaler.clone());
    let x = window_at(&p, &scaler, cfg.input_len, origin)?;
    let (_, trace) = ck.model.trace(&x).stage("analysis")?;
    let names = p.graph.names();
    let mut written = 0;
    for (l, slots) in trace.blocks.iter().enumerate() {
        for (i, slot) in slots.iter().enumerate() {
            let tag = format!("block{}_slot{}", l + 1, i + 1);
            if let Some(ssa) = &slot.ssa_scores {
                let text = matrix_csv(ssa, names, names, "station");
                fs::write(cfg.out.join(format!("ssa_{tag}.csv")), text).map_err(Error::from).stage("output")?;
                written += 1;
            }
            if let Some(psa) = &slot.psa_scores {
                let (n, pn) = (psa.shape()[0], psa.shape()[1]);
                let labels: Vec<String> = (1..=pn).map(|k| format!("period{k}")).collect();
                for st in 0..n {
                    let m = Tensor::new(vec![pn, pn], psa.data()[st * pn * pn..(st + 1) * pn * pn].to_vec())
                        .expect("slice of a valid tensor");
                    let text = matrix_csv(&m, &labels, &labels, "period");
                    let file = format!("psa_{tag}_station{}.csv", st + 1);
                    fs::write(cfg.out.join(file), text).map_err(Error::from).stage("output")?;
                    written += 1;
                }
            }
        }
    }
    Ok(format!("wrote {written} attention matrices to {}\n", cfg.out.display()))
}

fn cmd_synth(cfg: RunConfig, args: SynthArgs) -> CmdResult<String> {
    let spec = SyntheticSpec {
        stations: args.stations,
        rows: args.rows,
        periods: args.periods,
        noise: args.noise,
        lag: args.lag,
        seed: cfg.seed,
    };
    let (series, graph) = generate_synthetic(&spec).stage("synthesis")?;
    let data_path = cfg.out.join("synthetic.csv");
    let adj_path = cfg.out.join("adjacency.csv");
    series.write_csv(&data_path).stage("output")?;
    graph.write_csv(&adj_path).stage("output")?;
    let mut echoed = cfg.clone();
    echoed.dataset = Some(data_path.clone());
    echoed.adjacency = Some(adj_path);
    echoed.flow_station = Some(graph.names()[graph.flow_station()].clone());
    let mut ini = echoed.to_ini();
    let periods: Vec<String> = spec.periods.iter().map(|p| p.to_string()).collect();
    ini.with_section(Some("synth"))
        .set("stations", spec.stations.to_string())
        .set("rows", spec.rows.to_string())
        .set("periods", periods.join(","))
        .set("noise", spec.noise.to_string())
        .set("lag", spec.lag.to_string())
        .set("seed", spec.seed.to_string());
    ini.write_to_file(cfg.out.join("config.ini")).map_err(Error::from).stage("output")?;
    Ok(format!(
        "wrote {} rows x {} stations to {}\n",
        series.rows(),
        series.n_stations(),
        data_path.display()
    ))
}
