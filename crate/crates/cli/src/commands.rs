//! The six subcommands: simulate, preprocess, train, predict, evaluate,
//! cluster. Each writes its outputs plus a resolved-config echo into the
//! output directory, so any run is reproducible from its artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use neural_ekf::checkpoint::{load_checkpoint, save_checkpoint};
use neural_ekf::data::{
    apply_normalization, butterworth_filter, destandardize_output_variances,
    destandardize_outputs, load_dataset, resample, save_dataset, simulate_duffing, standardize,
    window, DuffingConfig, FilterKind, Forcing,
};
use neural_ekf::eval::{anomaly_report, rmse, AnomalyOptions};
use neural_ekf::matrix::Matrix;
use neural_ekf::model::{ModelConfig, NeuralEkf};
use neural_ekf::predict::{predict, PredictMode};
use neural_ekf::train::{log_header, train, TrainConfig, TrainState};

use crate::config::RunConfig;

/// Command failure with the exit code it maps to: 2 for usage and
/// configuration problems, 1 for runtime failures.
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<neural_ekf::Error> for CliError {
    fn from(e: neural_ekf::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CmdResult = Result<(), CliError>;

fn require_exists(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{}: no such file or directory", path.display())));
    }
    Ok(())
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn write_echo(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::write(out.join("config.resolved.ini"), cfg.echo())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn duffing_config(cfg: &RunConfig) -> Result<DuffingConfig, CliError> {
    let forcing = match cfg.string("data", "forcing").as_str() {
        "free" => Forcing::Free,
        "random" => Forcing::Random {
            std: cfg.f64("data", "forcing_std")?,
        },
        other => {
            return Err(CliError::Usage(format!(
                "data.forcing must be free or random, got {other:?}"
            )))
        }
    };
    Ok(DuffingConfig {
        mass: cfg.matrix("data", "mass")?,
        stiffness: cfg.matrix("data", "stiffness")?,
        damping: cfg.matrix("data", "damping")?,
        cubic_coeff: cfg.f64("data", "cubic_coeff")?,
        dt: cfg.f64("data", "dt")?,
        steps: cfg.usize("data", "steps")?,
        forcing,
        seed: cfg.u64("data", "seed")?,
        symmetric_stiffness: cfg.bool("data", "symmetric_stiffness")?,
        init_amplitude: cfg.f64("data", "init_amplitude")?,
    })
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let duffing = duffing_config(cfg)?;
    duffing
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid data section: {e}")))?;
    let n = cfg.usize("data", "trajectories")?;
    let dataset = simulate_duffing(&duffing, n)?;
    ensure_out_dir(out)?;
    save_dataset(&dataset, out)?;
    write_echo(cfg, out)?;
    println!(
        "wrote {} trajectories (T={}, d_u={}, d_x={}, {} Hz) to {}",
        dataset.len(),
        dataset.trajectories[0].len(),
        dataset.input_dim(),
        dataset.output_dim(),
        dataset.sample_rate_hz,
        out.display()
    );
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig, data: &Path, out: &Path) -> CmdResult {
    require_exists(data)?;
    let mut dataset = load_dataset(data)?;

    let resample_hz = cfg.f64("data", "resample_hz")?;
    if resample_hz > 0.0 {
        dataset = resample(&dataset, resample_hz)?;
    }
    let order = cfg.usize("data", "filter_order")?;
    let highpass = cfg.f64("data", "highpass_hz")?;
    if highpass > 0.0 {
        dataset = butterworth_filter(&dataset, FilterKind::HighPass, highpass, order)?;
    }
    let lowpass = cfg.f64("data", "lowpass_hz")?;
    if lowpass > 0.0 {
        dataset = butterworth_filter(&dataset, FilterKind::LowPass, lowpass, order)?;
    }
    if cfg.bool("data", "standardize")? {
        dataset = standardize(&dataset)?;
    }
    let length = cfg.usize("data", "window_length")?;
    if length > 0 {
        let stride = match cfg.usize("data", "window_stride")? {
            0 => length,
            s => s,
        };
        dataset = window(&dataset, length, stride)?;
    }

    ensure_out_dir(out)?;
    save_dataset(&dataset, out)?;
    write_echo(cfg, out)?;
    println!(
        "preprocessed {} trajectories (T={}, {} Hz) to {}",
        dataset.len(),
        dataset.shortest_trajectory(),
        dataset.sample_rate_hz,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CmdResult {
    require_exists(data)?;
    let dataset = load_dataset(data)?;
    ensure_out_dir(out)?;

    let train_cfg = TrainConfig {
        epochs: cfg.usize("training", "epochs")?,
        batch_size: cfg.usize("training", "batch_size")?,
        learning_rate: cfg.f64("training", "learning_rate")?,
        alpha: cfg.f64("training", "alpha")?,
        seed: cfg.u64("training", "seed")?,
        gradient_clip: cfg.f64("training", "gradient_clip")?,
        checkpoint_every: cfg.usize("training", "checkpoint_every")?,
    };
    train_cfg
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid training section: {e}")))?;

    let resume_from = cfg.string("training", "resume_from");
    let mut state = if resume_from.is_empty() {
        let model_cfg = ModelConfig {
            latent_dim: cfg.usize("model", "latent_dim")?,
            input_dim: dataset.input_dim(),
            obs_dim: dataset.output_dim(),
            hidden: cfg.usize_list("model", "hidden")?,
            residual: cfg.bool("model", "residual")?,
        };
        model_cfg
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid model section: {e}")))?;
        let model = NeuralEkf::new(model_cfg, cfg.u64("model", "seed")?)?;
        let mut state = TrainState::new(model);
        state.normalization = dataset.normalization.clone();
        state
    } else {
        let path = PathBuf::from(&resume_from);
        require_exists(&path)?;
        load_checkpoint(&path)?
    };
    state.config_echo = cfg.echo();

    let log_path = out.join("training_log.csv");
    let append = state.epoch > 0 && log_path.exists();
    let mut log = if append {
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?
    } else {
        let mut f = fs::File::create(&log_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
        writeln!(f, "{}", log_header())
            .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
        f
    };

    let checkpoint_every = train_cfg.checkpoint_every;
    let out_dir = out.to_path_buf();
    train(&mut state, &dataset, &train_cfg, |state, stats| {
        writeln!(log, "{}", stats.log_line()).map_err(neural_ekf::Error::from)?;
        println!("{}", stats.log_line());
        if checkpoint_every > 0 && stats.epoch % checkpoint_every == 0 {
            save_checkpoint(state, &out_dir.join(format!("checkpoint_epoch{:04}.bin", stats.epoch)))?;
        }
        Ok(())
    })?;

    save_checkpoint(&state, &out.join("checkpoint.bin"))?;
    write_echo(cfg, out)?;
    println!(
        "trained {} epochs; final loss {}; checkpoint at {}",
        state.epoch,
        state.history.last().map(|s| s.loss).unwrap_or(f64::NAN),
        out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn prediction_file(out: &Path, idx: usize) -> PathBuf {
    out.join(format!("pred_{idx:04}.csv"))
}

pub fn cmd_predict(checkpoint: &Path, data: &Path, mode: PredictMode, out: &Path) -> CmdResult {
    require_exists(checkpoint)?;
    require_exists(data)?;
    let state = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    if dataset.input_dim() != state.model.cfg.input_dim
        || dataset.output_dim() != state.model.cfg.obs_dim
    {
        return Err(CliError::Runtime(format!(
            "dataset dims (u:{}, x:{}) do not match the checkpoint (u:{}, x:{})",
            dataset.input_dim(),
            dataset.output_dim(),
            state.model.cfg.input_dim,
            state.model.cfg.obs_dim
        )));
    }
    // Predictions run in model scale. Raw physical-unit data is
    // standardized with the training statistics carried by the
    // checkpoint and the outputs mapped back; data that is already
    // standardized (its manifest carries a normalization record) runs
    // as-is and the outputs stay in that scale, so evaluation against
    // the same dataset is always consistent.
    let already_standardized = dataset.normalization.is_some();
    let scaled = match (&state.normalization, already_standardized) {
        (Some(norm), false) => apply_normalization(&dataset, norm)?,
        _ => dataset.clone(),
    };

    ensure_out_dir(out)?;
    let mut listing = String::from("# predictions\n");
    for (idx, traj) in scaled.trajectories.iter().enumerate() {
        let pred = predict(&state.model, traj, mode)?;
        let (mean, variance) = match (&state.normalization, already_standardized) {
            (Some(norm), false) => (
                destandardize_outputs(&pred.mean, norm),
                destandardize_output_variances(&pred.variance, norm),
            ),
            _ => (pred.mean, pred.variance),
        };
        let path = prediction_file(out, idx);
        let mut text = String::from("step");
        for name in &dataset.output_names {
            text.push_str(&format!(",{name}_mean,{name}_var"));
        }
        text.push('\n');
        for t in 0..mean.rows() {
            text.push_str(&t.to_string());
            for j in 0..mean.cols() {
                text.push_str(&format!(",{},{}", mean.get(t, j), variance.get(t, j)));
            }
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        listing.push_str(&format!("{}\n", path.file_name().unwrap().to_string_lossy()));
    }
    fs::write(out.join("predictions.txt"), listing)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    println!(
        "wrote {} prediction files ({:?} mode) to {}",
        scaled.len(),
        mode,
        out.display()
    );
    Ok(())
}

fn load_prediction_means(path: &Path, d_x: usize) -> Result<Matrix, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 1 + 2 * d_x {
            return Err(CliError::Runtime(format!(
                "{}: line {} has {} fields, expected {}",
                path.display(),
                line_no + 1,
                cells.len(),
                1 + 2 * d_x
            )));
        }
        let mut row = Vec::with_capacity(d_x);
        for j in 0..d_x {
            let cell = cells[1 + 2 * j];
            row.push(cell.parse().map_err(|_| {
                CliError::Runtime(format!(
                    "{}: line {}: bad number {cell:?}",
                    path.display(),
                    line_no + 1
                ))
            })?);
        }
        rows.push(row);
    }
    Ok(Matrix::from_fn(rows.len(), d_x, |i, j| rows[i][j]))
}

pub fn cmd_evaluate(predictions: &Path, data: &Path, out: &Path) -> CmdResult {
    require_exists(predictions)?;
    require_exists(data)?;
    let dataset = load_dataset(data)?;
    let d_x = dataset.output_dim();

    ensure_out_dir(out)?;
    let mut table = format!("case,{}\n", dataset.output_names.join(","));
    for (idx, traj) in dataset.trajectories.iter().enumerate() {
        let pred_path = prediction_file(predictions, idx);
        require_exists(&pred_path)?;
        let mean = load_prediction_means(&pred_path, d_x)?;
        if mean.rows() != traj.len() {
            return Err(CliError::Runtime(format!(
                "{}: prediction has {} steps, trajectory has {}",
                pred_path.display(),
                mean.rows(),
                traj.len()
            )));
        }
        let values = rmse(&mean, &traj.x)?;
        let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        table.push_str(&format!("{},{}\n", traj.source, cells.join(",")));
    }
    let path = out.join("rmse.csv");
    fs::write(&path, table).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    println!("wrote RMSE table for {} cases to {}", dataset.len(), path.display());
    Ok(())
}

fn load_rmse_table(path: &Path) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut cases = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(CliError::Runtime(format!(
                "{}: line {}: expected case,values...",
                path.display(),
                line_no + 1
            )));
        }
        let values: Vec<f64> = cells[1..]
            .iter()
            .map(|c| {
                c.parse().map_err(|_| {
                    CliError::Runtime(format!(
                        "{}: line {}: bad number {c:?}",
                        path.display(),
                        line_no + 1
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        cases.push((cells[0].to_string(), values));
    }
    Ok(cases)
}

pub fn cmd_cluster(cfg: &RunConfig, rmse_tables: &[PathBuf], out: &Path) -> CmdResult {
    let mut cases = Vec::new();
    for path in rmse_tables {
        require_exists(path)?;
        cases.extend(load_rmse_table(path)?);
    }
    if cases.is_empty() {
        return Err(CliError::Usage("no cases found in the RMSE tables".into()));
    }
    let opts = AnomalyOptions {
        clusters: cfg.usize("evaluation", "clusters")?,
        seed: cfg.u64("evaluation", "seed")?,
        restarts: cfg.usize("evaluation", "restarts")?,
        zscore: cfg.bool("evaluation", "zscore")?,
    };
    let report = anomaly_report(&cases, &opts)?;
    ensure_out_dir(out)?;
    let path = out.join("cluster_report.txt");
    fs::write(&path, report.to_tables())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    write_echo(cfg, out)?;
    println!(
        "clustered {} cases into {} clusters (inertia {}); report at {}",
        report.labels.len(),
        opts.clusters,
        report.inertia,
        path.display()
    );
    Ok(())
}
