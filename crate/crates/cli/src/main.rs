//! Command-line pipeline: synthesize data, build and partition the station
//! graph, train and evaluate the forecaster, and export plot-ready data.
//!
//! Exit codes: 0 success, 2 usage errors, 3 data/config validation
//! failures, 4 numerical failures. `S2CAST_THREADS` caps worker threads.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use s2cast_core::checkpoint::{load_checkpoint, save_checkpoint};
use s2cast_core::data::{load_dataset, save_stations_csv, Dataset, Normalizer, Split};
use s2cast_core::error::{Error, Result};
use s2cast_core::graph::thread_cap;
use s2cast_core::model::{attention_maps, predict, ModelParams, ModelPlan};
use s2cast_core::partition::Partition;
use s2cast_core::probe::{analytic_argmin, probe};
use s2cast_core::synth::{synth_generate, SynthConfig};
use s2cast_core::train::{evaluate, preprocess, run_ablations, train, TrainConfig};
use s2cast_core::Tensor;

#[derive(Parser)]
#[command(
    name = "s2cast",
    version,
    about = "Station forecasting with structured attention over a partitioned spatial graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spatially-correlated station dataset.
    Synth(SynthArgs),
    /// Partition the station graph and write one JSON file per level.
    Partition(PartitionArgs),
    /// Run spatial preprocessing (graph, hierarchy, hop tables, harmonics)
    /// and report per-stage wall times.
    Preprocess(PreprocessArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Forecast from a series window and write CSV.
    Predict(PredictArgs),
    /// Export post-softmax attention matrices as JSON.
    ExportAttn(ExportAttnArgs),
    /// Evaluate the attention-cost curve over a part-count grid.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of stations.
    #[arg(long)]
    n: usize,
    /// Number of timesteps.
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Correlation length in km ("inf" for a fully shared field).
    #[arg(long, default_value_t = 2000.0)]
    length_scale_km: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 45.0)]
    cap_center_lat: f64,
    #[arg(long, default_value_t = 10.0)]
    cap_center_lon: f64,
    #[arg(long, default_value_t = 60.0)]
    cap_radius_deg: f64,
    /// Output prefix; writes <prefix>.stations.csv and <prefix>.series.bin.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    /// Stations CSV (id,lat,lon).
    #[arg(long)]
    stations: PathBuf,
    /// Graph threshold in km.
    #[arg(long)]
    epsilon_km: Option<f64>,
    /// Alternative: quantile of k-nearest-neighbor distances in [0,1].
    #[arg(long)]
    epsilon_quantile: Option<f64>,
    #[arg(long, default_value_t = 4)]
    knn_k: usize,
    #[arg(long, default_value_t = 0.03)]
    imbalance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    p0: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    p0: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 3)]
    l_max: usize,
    /// Dump the spherical-harmonic basis matrix to this CSV.
    #[arg(long)]
    dump_sh: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config (station/series paths plus training options).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train every ablation variant and write a comparison CSV.
    #[arg(long)]
    ablations: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stations: PathBuf,
    #[arg(long)]
    series: PathBuf,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stations: PathBuf,
    #[arg(long)]
    series: PathBuf,
    /// Window start index; defaults to the last full input window.
    #[arg(long)]
    at: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stations: PathBuf,
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    at: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    n: usize,
    /// Comma-separated part counts, e.g. 25,50,100,200,400.
    #[arg(long, value_delimiter = ',')]
    p_grid: Vec<usize>,
    /// Also run instrumented forward passes and record measured entries.
    #[arg(long)]
    measure: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// On-disk run config: data paths plus the training options. Unknown keys
/// anywhere in the document are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    stations: PathBuf,
    series: PathBuf,
    train: TrainConfig,
}

/// Config echo stored inside checkpoints.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    n: usize,
    c: usize,
    channels: Vec<String>,
    train: TrainConfig,
}

fn graph_config(args: &GraphArgs, p0: usize, levels: usize, l_max: usize) -> TrainConfig {
    TrainConfig {
        p0,
        levels,
        l_max,
        imbalance: args.imbalance,
        seed: args.seed,
        epsilon_km: args.epsilon_km,
        epsilon_quantile: if args.epsilon_km.is_some() { None } else { args.epsilon_quantile.or(Some(0.9)) },
        knn_k: args.knn_k,
        // dim never drives preprocessing; keep it valid for any l_max
        dim: (((l_max + 1) * (l_max + 1) + 1).next_power_of_two()).max(8),
        ..TrainConfig::default()
    }
}

fn path_with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_stations: args.n,
        steps: args.steps,
        seed: args.seed,
        length_scale_km: args.length_scale_km,
        noise: args.noise,
        cap_center_lat: args.cap_center_lat,
        cap_center_lon: args.cap_center_lon,
        cap_radius_deg: args.cap_radius_deg,
        ..Default::default()
    };
    let dataset = synth_generate(&cfg)?;
    let stations_path = path_with_suffix(&args.out_prefix, ".stations.csv");
    let series_path = path_with_suffix(&args.out_prefix, ".series.bin");
    if let Some(parent) = stations_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_stations_csv(&dataset.stations, &stations_path)?;
    dataset.save_series(&series_path)?;
    println!(
        "wrote {} stations x {} steps to {} and {}",
        args.n,
        args.steps,
        stations_path.display(),
        series_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PartitionJson<'a> {
    p: usize,
    assignment: &'a [usize],
}

fn write_partition_json(path: &Path, partition: &Partition) -> Result<()> {
    let body =
        serde_json::to_string(&PartitionJson { p: partition.p, assignment: &partition.assignment })?;
    std::fs::write(path, body)?;
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<()> {
    let stations = s2cast_core::data::load_stations_csv(&args.graph.stations)?;
    let cfg = graph_config(&args.graph, args.p0, args.levels, 1);
    let started = std::time::Instant::now();
    let (pre, timings) = preprocess(&stations, &cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for (i, level) in pre.hierarchy.levels.iter().enumerate() {
        let path = args.out_dir.join(format!("partition_level{}.json", i + 1));
        write_partition_json(&path, &level.partition)?;
    }
    println!(
        "epsilon_km {:.3}, {} levels written to {} in {} ms (graph {} ms, hierarchy {} ms)",
        pre.epsilon_km,
        pre.hierarchy.depth(),
        args.out_dir.display(),
        started.elapsed().as_millis(),
        timings.graph_ms,
        timings.hierarchy_ms
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let stations = s2cast_core::data::load_stations_csv(&args.graph.stations)?;
    let cfg = graph_config(&args.graph, args.p0, args.levels, args.l_max);
    let (pre, timings) = preprocess(&stations, &cfg)?;
    if let Some(dump) = &args.dump_sh {
        let cols = pre.basis.n_columns();
        let mut out = String::from("id");
        for col in 0..cols {
            out.push_str(&format!(",y{}", col));
        }
        out.push('\n');
        for (i, id) in stations.ids.iter().enumerate() {
            out.push_str(id);
            for col in 0..cols {
                out.push_str(&format!(",{}", pre.basis.values.data()[i * cols + col]));
            }
            out.push('\n');
        }
        std::fs::write(dump, out)?;
    }
    let summary = serde_json::json!({
        "stations": stations.len(),
        "epsilon_km": pre.epsilon_km,
        "edges": pre.graph.edge_count(),
        "levels": pre.hierarchy.depth(),
        "max_part_sizes": pre.hierarchy.levels.iter().map(|l| l.layout.m).collect::<Vec<_>>(),
        "timings_ms": timings,
        "threads": thread_cap(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: invalid run config: {}", path.display(), e)))?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        run.train.epochs = epochs;
    }
    let dataset = load_dataset(&run.stations, &run.series)?;
    std::fs::create_dir_all(&args.out_dir)?;

    if args.ablations {
        let rows = run_ablations(&run.train, &dataset)?;
        let csv_path = args.out_dir.join("ablations.csv");
        let mut csv = String::from(
            "variant,overall_mae,overall_mse,persistence_mae,trainable_params,best_epoch\n",
        );
        for (name, report) in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name,
                report.overall_mae,
                report.overall_mse,
                report.overall_persistence_mae,
                report.trainable_params,
                report.best_epoch
            ));
        }
        std::fs::write(&csv_path, csv)?;
        println!("wrote {}", csv_path.display());
        return Ok(());
    }

    let out = train(&run.train, &dataset)?;
    let ckpt_cfg = CheckpointConfig {
        n: dataset.n(),
        c: dataset.c(),
        channels: dataset.channels.clone(),
        train: run.train.clone(),
    };
    let ckpt_path = args.out_dir.join("checkpoint.bin");
    save_checkpoint(&ckpt_path, &serde_json::to_value(&ckpt_cfg)?, run.train.seed, &out.params)?;
    let metrics_path = args.out_dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&out.report)?)?;
    println!(
        "test MAE {:.6} (persistence {:.6}), checkpoint {}",
        out.report.overall_mae,
        out.report.overall_persistence_mae,
        ckpt_path.display()
    );
    Ok(())
}

/// Rebuild the model and its preprocessing products from a checkpoint.
fn load_model(
    checkpoint: &Path,
    dataset: &Dataset,
) -> Result<(ModelParams, ModelPlan, s2cast_core::train::Preprocessed, Normalizer, TrainConfig)> {
    let (config_json, _seed, tensors) = load_checkpoint(checkpoint)?;
    let ckpt_cfg: CheckpointConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::data(format!("{}: bad checkpoint config: {}", checkpoint.display(), e)))?;
    if ckpt_cfg.n != dataset.n() || ckpt_cfg.c != dataset.c() {
        return Err(Error::data(format!(
            "checkpoint was trained on {} stations x {} channels, dataset has {} x {}",
            ckpt_cfg.n,
            ckpt_cfg.c,
            dataset.n(),
            dataset.c()
        )));
    }
    let model_cfg = ckpt_cfg.train.model_config(dataset.n(), dataset.c());
    let params = ModelParams::from_tensors(model_cfg.clone(), tensors)?;
    let (pre, _) = preprocess(&dataset.stations, &ckpt_cfg.train)?;
    let plan = ModelPlan::new(&model_cfg, &pre.hierarchy)?;
    let train_range = ckpt_cfg.train.split.range(dataset.t_total, Split::Train);
    let normalizer = Normalizer::fit(dataset, train_range)?;
    Ok((params, plan, pre, normalizer, ckpt_cfg.train))
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid(format!("unknown split `{}`", other))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.stations, &args.series)?;
    let (params, plan, pre, normalizer, train_cfg) = load_model(&args.checkpoint, &dataset)?;
    let split = parse_split(&args.split)?;
    let range = train_cfg.split.range(dataset.t_total, split);
    let normalized = normalizer.apply_dataset(&dataset)?;
    let metrics =
        evaluate(&params, &plan, &pre.basis, &normalized, &normalizer, range, train_cfg.stride)?;
    let report = serde_json::json!({
        "split": args.split,
        "windows": metrics.windows,
        "channels": dataset.channels,
        "mae": metrics.mae,
        "mse": metrics.mse,
        "overall_mae": metrics.overall_mae,
        "overall_mse": metrics.overall_mse,
        "persistence_mae": metrics.persistence_mae,
        "persistence_mse": metrics.persistence_mse,
    });
    let body = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, body)?,
        None => println!("{}", body),
    }
    Ok(())
}

/// Normalized input window starting at `start`.
fn input_window(dataset: &Dataset, normalized: &Dataset, start: usize, t_in: usize) -> Result<Tensor> {
    if start + t_in > dataset.t_total {
        return Err(Error::data(format!(
            "window start {} leaves fewer than {} steps of {}",
            start, t_in, dataset.t_total
        )));
    }
    let (n, c) = (dataset.n(), dataset.c());
    let mut input = Vec::with_capacity(n * t_in * c);
    for s in 0..n {
        let base = (s * dataset.t_total + start) * c;
        input.extend_from_slice(&normalized.series[base..base + t_in * c]);
    }
    Tensor::new(vec![n, t_in, c], input)
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let dataset = load_dataset(&args.stations, &args.series)?;
    let (params, plan, pre, normalizer, train_cfg) = load_model(&args.checkpoint, &dataset)?;
    let t_in = train_cfg.t_in;
    if dataset.t_total < t_in {
        return Err(Error::data(format!(
            "series has {} steps, model needs {} input steps",
            dataset.t_total, t_in
        )));
    }
    let start = args.at.unwrap_or(dataset.t_total - t_in);
    let normalized = normalizer.apply_dataset(&dataset)?;
    let input = input_window(&dataset, &normalized, start, t_in)?;
    let pred = predict(&params, &plan, &pre.basis, &input)?;

    let (n, c) = (dataset.n(), dataset.c());
    let mut csv = String::from("id,step");
    for name in &dataset.channels {
        csv.push_str(&format!(",{}", name));
    }
    csv.push('\n');
    for station in 0..n {
        for f in 0..train_cfg.f_out {
            csv.push_str(&format!("{},{}", dataset.stations.ids[station], f + 1));
            for ch in 0..c {
                let v = normalizer
                    .invert_value(ch, pred.data()[(station * train_cfg.f_out + f) * c + ch]);
                csv.push_str(&format!(",{}", v));
            }
            csv.push('\n');
        }
    }
    std::fs::write(&args.out, csv)?;
    println!("wrote {} forecast rows to {}", n * train_cfg.f_out, args.out.display());
    Ok(())
}

fn cmd_export_attn(args: ExportAttnArgs) -> Result<()> {
    let dataset = load_dataset(&args.stations, &args.series)?;
    let (params, plan, pre, normalizer, train_cfg) = load_model(&args.checkpoint, &dataset)?;
    let t_in = train_cfg.t_in;
    let start = args.at.unwrap_or(dataset.t_total.saturating_sub(t_in));
    let normalized = normalizer.apply_dataset(&dataset)?;
    let input = input_window(&dataset, &normalized, start, t_in)?;
    let maps = attention_maps(&params, &plan, &pre.basis, &input)?;

    std::fs::create_dir_all(&args.out_dir)?;
    for (li, (intra, inter)) in maps.intra.iter().zip(&maps.inter).enumerate() {
        let (p, m) = (intra.shape()[0], intra.shape()[1]);
        let intra_rows: Vec<Vec<Vec<f64>>> = (0..p)
            .map(|pi| {
                (0..m)
                    .map(|i| (0..m).map(|j| intra.data()[(pi * m + i) * m + j] as f64).collect())
                    .collect()
            })
            .collect();
        let inter_rows: Vec<Vec<f64>> =
            (0..p).map(|i| (0..p).map(|j| inter.data()[i * p + j] as f64).collect()).collect();
        let body = serde_json::json!({
            "level": li + 1,
            "p": p,
            "m": m,
            "window_start": start,
            "intra": intra_rows,
            "inter": inter_rows,
        });
        let path = args.out_dir.join(format!("attn_level{}.json", li + 1));
        std::fs::write(&path, serde_json::to_string(&body)?)?;
    }
    println!("wrote {} levels to {}", maps.intra.len(), args.out_dir.display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    if args.p_grid.is_empty() {
        return Err(Error::invalid("p_grid must not be empty"));
    }
    let points = probe(args.n, &args.p_grid, args.measure, args.seed)?;
    let argmin = analytic_argmin(args.n, &args.p_grid).expect("non-empty grid");
    let mut csv = String::from("p,analytic_cost,measured_entries,is_argmin\n");
    for point in &points {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            point.p,
            point.analytic_cost,
            point.measured_entries.map(|v| v.to_string()).unwrap_or_default(),
            if point.p == argmin { 1 } else { 0 }
        ));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, csv)?;
    println!("argmin p = {} for n = {}; wrote {}", argmin, args.n, args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::ExportAttn(args) => cmd_export_attn(args),
        Command::Probe(args) => cmd_probe(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_numerical() {
                ExitCode::from(4)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
