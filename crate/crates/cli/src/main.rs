//! Command-line driver for the uncertainty/adaptation pipeline.
//!
//! `utrcaf synth` generates a planted-shift domain pair, `train-source` fits
//! the source classifier, `utr` computes the uncertainty spectrum of a model
//! on a dataset, `adapt` runs the alternating calibration/adaptation
//! schedule, and `eval` scores both channel halves with the classical
//! transferability measurements and writes the accuracy curve.
//!
//! Exit codes: 0 on success, 2 on configuration or validation errors
//! (including unreadable inputs), 3 when training diverges numerically. All
//! outputs are written atomically and printed to stdout, one path per line.

mod config;

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use utrcaf_core::model::Dataset;
use utrcaf_core::{caf, eval, io, model, synth, utr, Error, Result};

use config::{files, RunConfig};

#[derive(Parser)]
#[command(name = "utrcaf", version, about = "Uncertainty-guided source-free domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-shift source/target CSVs and their manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the source classifier on the labeled source CSV.
    TrainSource {
        #[arg(long)]
        config: PathBuf,
        /// Labeled training CSV; defaults to the generated source data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the uncertainty spectrum and its channel / instance means.
    Utr {
        #[arg(long)]
        config: PathBuf,
        /// Model checkpoint; defaults to the trained source model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Feature CSV; defaults to the generated target data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt the source model to unlabeled target data.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_model: Option<PathBuf>,
        #[arg(long)]
        target_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score both channel halves and write the report and accuracy curve.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_model: Option<PathBuf>,
        #[arg(long)]
        source_data: Option<PathBuf>,
        #[arg(long)]
        target_data: Option<PathBuf>,
        /// Size of the low-uncertainty channel half; overrides `eval.split_m`.
        #[arg(long)]
        split_m: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => cmd_synth(&config, out),
        Command::TrainSource { config, data, out } => cmd_train_source(&config, data, out),
        Command::Utr {
            config,
            model,
            data,
            out,
        } => cmd_utr(&config, model, data, out),
        Command::Adapt {
            config,
            source_model,
            target_data,
            out,
        } => cmd_adapt(&config, source_model, target_data, out),
        Command::Eval {
            config,
            source_model,
            source_data,
            target_data,
            split_m,
            out,
        } => cmd_eval(&config, source_model, source_data, target_data, split_m, out),
    }
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn print_path(path: &Path) {
    println!("{}", path.display());
}

fn cmd_synth(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = config::load(config_path)?;
    let dir = out_dir(&cfg, out)?;
    let (source, target, mut manifest) = synth::gen_planted_shift::<f64>(&cfg.data)?;

    let source_path = files::source_data(&dir);
    let target_path = files::target_data(&dir);
    let manifest_path = files::manifest(&dir);
    io::save_dataset(&source, &source_path)?;
    io::save_dataset(&target, &target_path)?;
    manifest.source_path = source_path.display().to_string();
    manifest.target_path = target_path.display().to_string();
    io::save_json(&manifest, &manifest_path)?;

    print_path(&source_path);
    print_path(&target_path);
    print_path(&manifest_path);
    Ok(())
}

fn cmd_train_source(config_path: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = config::load(config_path)?;
    let dir = out_dir(&cfg, out)?;
    let data_path = data.unwrap_or_else(|| files::source_data(&dir));
    let dataset: Dataset<f64> = io::load_dataset(&data_path)?;
    let params = model::train_source(&dataset, &cfg.arch, &cfg.train)?;

    let model_path = files::source_model(&dir);
    io::save_checkpoint(&params, &model_path)?;
    print_path(&model_path);
    Ok(())
}

fn cmd_utr(
    config_path: &Path,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = config::load(config_path)?;
    let dir = out_dir(&cfg, out)?;
    let model_path = model.unwrap_or_else(|| files::source_model(&dir));
    let data_path = data.unwrap_or_else(|| files::target_data(&dir));
    let params: model::ModelParams<f64> = io::load_checkpoint(&model_path)?;
    let dataset: Dataset<f64> = io::load_dataset(&data_path)?;

    let spectrum = utr::channel_ud(&params, dataset.features.view(), &cfg.perturb)?;
    let domain = utr::utr_domain(&spectrum)?;
    let instance = utr::utr_instance(&spectrum)?;

    let spectrum_path = files::spectrum(&dir);
    let d_path = files::utr_d(&dir);
    let i_path = files::utr_i(&dir);
    io::save_spectrum(&spectrum, &spectrum_path)?;
    io::save_vector(&domain.values, &d_path)?;
    io::save_vector(&instance.values, &i_path)?;

    print_path(&spectrum_path);
    print_path(&d_path);
    print_path(&i_path);
    Ok(())
}

fn cmd_adapt(
    config_path: &Path,
    source_model: Option<PathBuf>,
    target_data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = config::load(config_path)?;
    let dir = out_dir(&cfg, out)?;
    let model_path = source_model.unwrap_or_else(|| files::source_model(&dir));
    let data_path = target_data.unwrap_or_else(|| files::target_data(&dir));
    let params: model::ModelParams<f64> = io::load_checkpoint(&model_path)?;
    let dataset: Dataset<f64> = io::load_dataset(&data_path)?;

    let state = caf::run_caf(&params, &dataset, &cfg.caf)?;

    let adapted_path = files::adapted_model(&dir);
    let state_path = files::adapted_state(&dir);
    let loss_path = files::loss_history(&dir);
    io::save_checkpoint(&state.target_params, &adapted_path)?;
    io::save_json(&state.sidecar(&cfg.caf), &state_path)?;
    io::save_loss_history(&state.loss_history, &loss_path)?;

    print_path(&adapted_path);
    print_path(&state_path);
    print_path(&loss_path);
    Ok(())
}

fn cmd_eval(
    config_path: &Path,
    source_model: Option<PathBuf>,
    source_data: Option<PathBuf>,
    target_data: Option<PathBuf>,
    split_m: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = config::load(config_path)?;
    let dir = out_dir(&cfg, out)?;
    let model_path = source_model.unwrap_or_else(|| files::source_model(&dir));
    let source_path = source_data.unwrap_or_else(|| files::source_data(&dir));
    let target_path = target_data.unwrap_or_else(|| files::target_data(&dir));
    let m = split_m.unwrap_or(cfg.eval.split_m);

    let params: model::ModelParams<f64> = io::load_checkpoint(&model_path)?;
    let source: Dataset<f64> = io::load_dataset(&source_path)?;
    let target: Dataset<f64> = io::load_dataset(&target_path)?;

    let spectrum = utr::channel_ud(&params, target.features.view(), &cfg.perturb)?;
    let domain = utr::utr_domain(&spectrum)?;
    let split = eval::split_channels(&domain, m)?;
    let report = eval::build_report(&params, &source, &target, &split, cfg.eval.seed)?;

    let instance = utr::utr_instance(&spectrum)?;
    let labels = target.require_labels()?;
    let pred = model::predict_labels(&params, target.features.view())?;
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, l)| p == l).collect();
    let thresholds = linspace_over(&instance.values, cfg.eval.curve_points);
    let curve = eval::accuracy_utr_curve(&instance, &correct, &thresholds)?;

    let report_json_path = files::report_json(&dir);
    let report_csv_path = files::report_csv(&dir);
    let curve_path = files::curve(&dir);
    io::save_json(&report, &report_json_path)?;
    io::save_report_csv(&report, &report_csv_path)?;
    io::save_curve(&curve, &curve_path)?;

    print_path(&report_json_path);
    print_path(&report_csv_path);
    print_path(&curve_path);
    Ok(())
}

/// Evenly spaced thresholds from the smallest to the largest observed score.
fn linspace_over(values: &ndarray::Array1<f64>, points: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    (0..points)
        .map(|j| lo + span * j as f64 / (points - 1) as f64)
        .collect()
}
