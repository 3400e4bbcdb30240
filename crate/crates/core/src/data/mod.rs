//! Dataset representation, CSV ingestion and export, dataset manifests,
//! and the preprocessing recipes: resampling, band filtering,
//! standardization, and windowing.

mod dsp;
mod duffing;

pub use dsp::{butterworth_filter, resample, FilterKind};
pub use duffing::{rk4_step, simulate_duffing, DuffingConfig, Forcing};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One trajectory: paired input and observation sequences at a fixed
/// sampling rate. Row `t-1` of `u` is the input driving the step into
/// time `t`; row `t-1` of `x` is the observation at time `t`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub u: Matrix,
    pub x: Matrix,
    /// Provenance label (file name, or window origin).
    pub source: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Per-channel standardization statistics. A constant channel is
/// flagged (`scaled = false`) and passed through unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    pub scaled: bool,
}

/// Standardization record for inputs and outputs, stored so predictions
/// can be mapped back to physical units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Normalization {
    pub input: Vec<ChannelStats>,
    pub output: Vec<ChannelStats>,
}

/// A set of trajectories sharing dimensions and sampling rate.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub trajectories: Vec<Trajectory>,
    pub sample_rate_hz: f64,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    /// Set once the dataset has been standardized.
    pub normalization: Option<Normalization>,
    /// Every preprocessing operation applied, in order, with arguments.
    pub provenance: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_names.len()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Checks dimensional consistency, time ordering (non-empty rows),
    /// and finiteness across all trajectories.
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Contract("dataset has no trajectories".into()));
        }
        let (d_u, d_x) = (self.input_dim(), self.output_dim());
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.u.cols() != d_u || traj.x.cols() != d_x {
                return Err(Error::Contract(format!(
                    "trajectory {i} has dims u:{} x:{}, dataset declares u:{d_u} x:{d_x}",
                    traj.u.cols(),
                    traj.x.cols()
                )));
            }
            if traj.u.rows() != traj.x.rows() || traj.x.rows() == 0 {
                return Err(Error::Contract(format!(
                    "trajectory {i} has {} input rows and {} output rows",
                    traj.u.rows(),
                    traj.x.rows()
                )));
            }
            if !traj.u.is_finite() || !traj.x.is_finite() {
                return Err(Error::Contract(format!("trajectory {i} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn shortest_trajectory(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).min().unwrap_or(0)
    }
}

/// Column roles for single-file ingestion.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub input_columns: Vec<String>,
    pub output_columns: Vec<String>,
    pub sample_rate_hz: f64,
}

/// Loads one trajectory from a headered CSV file. Every parse failure
/// names the data row and column it occurred at.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        row: 0,
        column: String::new(),
        message: e.to_string(),
    })?;
    let trajectory = parse_csv_trajectory(&text, path, schema)?;
    Ok(TimeSeriesDataset {
        trajectories: vec![trajectory],
        sample_rate_hz: schema.sample_rate_hz,
        input_names: schema.input_columns.clone(),
        output_names: schema.output_columns.clone(),
        normalization: None,
        provenance: vec![format!("load_csv path={}", path.display())],
    })
}

fn parse_csv_trajectory(text: &str, path: &Path, schema: &CsvSchema) -> Result<Trajectory> {
    let path_str = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        row: 0,
        column: String::new(),
        message: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();

    let find = |name: &String| -> Result<usize> {
        columns.iter().position(|c| c == name).ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            row: 1,
            column: name.clone(),
            message: "declared column not found in header".into(),
        })
    };
    let u_idx: Vec<usize> = schema.input_columns.iter().map(find).collect::<Result<_>>()?;
    let x_idx: Vec<usize> = schema.output_columns.iter().map(find).collect::<Result<_>>()?;

    let mut u_rows: Vec<Vec<f64>> = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let row = line_no + 1; // 1-based data row
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                path: path_str.clone(),
                row,
                column: String::new(),
                message: format!("ragged row: {} cells, header has {}", cells.len(), columns.len()),
            });
        }
        let parse_cell = |idx: usize| -> Result<f64> {
            let v: f64 = cells[idx].parse().map_err(|_| Error::Parse {
                path: path_str.clone(),
                row,
                column: columns[idx].to_string(),
                message: format!("not a number: {:?}", cells[idx]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    row,
                    column: columns[idx].to_string(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        u_rows.push(u_idx.iter().map(|&i| parse_cell(i)).collect::<Result<_>>()?);
        x_rows.push(x_idx.iter().map(|&i| parse_cell(i)).collect::<Result<_>>()?);
    }
    if x_rows.is_empty() {
        return Err(Error::Parse {
            path: path_str,
            row: 1,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let to_matrix = |rows: &[Vec<f64>], cols: usize| {
        Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
    };
    Ok(Trajectory {
        u: to_matrix(&u_rows, u_idx.len()),
        x: to_matrix(&x_rows, x_idx.len()),
        source: path_str,
    })
}

/// Writes one trajectory as a headered CSV. Values round-trip exactly
/// (shortest exact decimal representation).
pub fn write_csv(
    path: &Path,
    trajectory: &Trajectory,
    input_names: &[String],
    output_names: &[String],
) -> Result<()> {
    let mut out = String::new();
    let header: Vec<&str> = input_names
        .iter()
        .chain(output_names.iter())
        .map(String::as_str)
        .collect();
    writeln!(out, "{}", header.join(",")).expect("string write");
    for t in 0..trajectory.len() {
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        for j in 0..trajectory.u.cols() {
            cells.push(format!("{}", trajectory.u.get(t, j)));
        }
        for j in 0..trajectory.x.cols() {
            cells.push(format!("{}", trajectory.x.get(t, j)));
        }
        writeln!(out, "{}", cells.join(",")).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_VERSION: u32 = 1;

/// Writes a dataset as one CSV per trajectory plus a manifest recording
/// column roles, sample rate, normalization, and provenance.
pub fn save_dataset(ds: &TimeSeriesDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "version = {MANIFEST_VERSION}").expect("string write");
    writeln!(manifest, "sample_rate_hz = {}", ds.sample_rate_hz).expect("string write");
    writeln!(manifest, "input_columns = {}", ds.input_names.join(",")).expect("string write");
    writeln!(manifest, "output_columns = {}", ds.output_names.join(",")).expect("string write");
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let file = format!("traj_{i:04}.csv");
        write_csv(&dir.join(&file), traj, &ds.input_names, &ds.output_names)?;
        writeln!(manifest, "file = {file}").expect("string write");
    }
    if let Some(norm) = &ds.normalization {
        for (name, s) in ds.input_names.iter().zip(&norm.input) {
            writeln!(manifest, "norm_input = {name},{},{},{}", s.mean, s.std, s.scaled)
                .expect("string write");
        }
        for (name, s) in ds.output_names.iter().zip(&norm.output) {
            writeln!(manifest, "norm_output = {name},{},{},{}", s.mean, s.std, s.scaled)
                .expect("string write");
        }
    }
    for step in &ds.provenance {
        writeln!(manifest, "step = {step}").expect("string write");
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Loads a dataset from a directory containing a manifest (or from the
/// manifest file itself).
pub fn load_dataset(path: &Path) -> Result<TimeSeriesDataset> {
    let (dir, manifest_path): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_NAME))
    } else {
        (
            path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Parse {
        path: manifest_path.display().to_string(),
        row: 0,
        column: String::new(),
        message: e.to_string(),
    })?;

    let mut sample_rate_hz = None;
    let mut input_names: Vec<String> = Vec::new();
    let mut output_names: Vec<String> = Vec::new();
    let mut files: Vec<String> = Vec::new();
    let mut norm_input: Vec<ChannelStats> = Vec::new();
    let mut norm_output: Vec<ChannelStats> = Vec::new();
    let mut provenance: Vec<String> = Vec::new();

    let parse_stats = |value: &str, row: usize| -> Result<ChannelStats> {
        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: manifest_path.display().to_string(),
                row,
                column: String::new(),
                message: format!("malformed normalization entry: {value:?}"),
            });
        }
        Ok(ChannelStats {
            mean: parts[1].parse().map_err(|_| Error::Parse {
                path: manifest_path.display().to_string(),
                row,
                column: parts[0].to_string(),
                message: "bad mean".into(),
            })?,
            std: parts[2].parse().map_err(|_| Error::Parse {
                path: manifest_path.display().to_string(),
                row,
                column: parts[0].to_string(),
                message: "bad std".into(),
            })?,
            scaled: parts[3] == "true",
        })
    };

    for (line_no, line) in text.lines().enumerate() {
        let row = line_no + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: manifest_path.display().to_string(),
                row,
                column: String::new(),
                message: format!("expected key = value, got {line:?}"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "version" => {
                let v: u32 = value.parse().map_err(|_| Error::Parse {
                    path: manifest_path.display().to_string(),
                    row,
                    column: "version".into(),
                    message: format!("bad version {value:?}"),
                })?;
                if v != MANIFEST_VERSION {
                    return Err(Error::Contract(format!(
                        "manifest version {v} is not supported (this build reads {MANIFEST_VERSION})"
                    )));
                }
            }
            "sample_rate_hz" => {
                sample_rate_hz = Some(value.parse().map_err(|_| Error::Parse {
                    path: manifest_path.display().to_string(),
                    row,
                    column: "sample_rate_hz".into(),
                    message: format!("bad rate {value:?}"),
                })?)
            }
            "input_columns" => {
                input_names = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "output_columns" => {
                output_names = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "file" => files.push(value.to_string()),
            "norm_input" => norm_input.push(parse_stats(value, row)?),
            "norm_output" => norm_output.push(parse_stats(value, row)?),
            "step" => provenance.push(value.to_string()),
            _ => {
                return Err(Error::Parse {
                    path: manifest_path.display().to_string(),
                    row,
                    column: String::new(),
                    message: format!("unknown manifest key {key:?}"),
                })
            }
        }
    }

    let sample_rate_hz = sample_rate_hz.ok_or_else(|| Error::Contract(
        "manifest is missing sample_rate_hz".into(),
    ))?;
    let schema = CsvSchema {
        input_columns: input_names.clone(),
        output_columns: output_names.clone(),
        sample_rate_hz,
    };
    let mut trajectories = Vec::with_capacity(files.len());
    for file in &files {
        let file_path = dir.join(file);
        let text = fs::read_to_string(&file_path).map_err(|e| Error::Parse {
            path: file_path.display().to_string(),
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?;
        trajectories.push(parse_csv_trajectory(&text, &file_path, &schema)?);
    }
    let normalization = if norm_input.is_empty() && norm_output.is_empty() {
        None
    } else {
        Some(Normalization {
            input: norm_input,
            output: norm_output,
        })
    };
    let ds = TimeSeriesDataset {
        trajectories,
        sample_rate_hz,
        input_names,
        output_names,
        normalization,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

fn channel_stats(values: impl Iterator<Item = f64> + Clone) -> ChannelStats {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    ChannelStats {
        mean,
        std,
        scaled: std > 0.0,
    }
}

/// Per-channel zero-mean unit-variance scaling over the whole dataset.
/// Constant channels are flagged and passed through. The record needed
/// to invert the transform is stored on the returned dataset.
pub fn standardize(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    ds.validate()?;
    let input_stats: Vec<ChannelStats> = (0..ds.input_dim())
        .map(|j| {
            channel_stats(
                ds.trajectories
                    .iter()
                    .flat_map(move |t| (0..t.u.rows()).map(move |i| t.u.get(i, j))),
            )
        })
        .collect();
    let output_stats: Vec<ChannelStats> = (0..ds.output_dim())
        .map(|j| {
            channel_stats(
                ds.trajectories
                    .iter()
                    .flat_map(move |t| (0..t.x.rows()).map(move |i| t.x.get(i, j))),
            )
        })
        .collect();
    let norm = Normalization {
        input: input_stats,
        output: output_stats,
    };
    let mut out = apply_normalization(ds, &norm)?;
    out.provenance.push("standardize".into());
    Ok(out)
}

/// Applies an existing standardization record (training statistics) to a
/// dataset in physical units.
pub fn apply_normalization(
    ds: &TimeSeriesDataset,
    norm: &Normalization,
) -> Result<TimeSeriesDataset> {
    if norm.input.len() != ds.input_dim() || norm.output.len() != ds.output_dim() {
        return Err(Error::Contract(format!(
            "normalization record covers {}+{} channels, dataset has {}+{}",
            norm.input.len(),
            norm.output.len(),
            ds.input_dim(),
            ds.output_dim()
        )));
    }
    let scale = |m: &Matrix, stats: &[ChannelStats]| {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            let s = &stats[j];
            if s.scaled {
                (m.get(i, j) - s.mean) / s.std
            } else {
                m.get(i, j)
            }
        })
    };
    let trajectories = ds
        .trajectories
        .iter()
        .map(|t| Trajectory {
            u: scale(&t.u, &norm.input),
            x: scale(&t.x, &norm.output),
            source: t.source.clone(),
        })
        .collect();
    Ok(TimeSeriesDataset {
        trajectories,
        sample_rate_hz: ds.sample_rate_hz,
        input_names: ds.input_names.clone(),
        output_names: ds.output_names.clone(),
        normalization: Some(norm.clone()),
        provenance: ds.provenance.clone(),
    })
}

/// Maps standardized output-channel means back to physical units.
pub fn destandardize_outputs(means: &Matrix, norm: &Normalization) -> Matrix {
    Matrix::from_fn(means.rows(), means.cols(), |i, j| {
        let s = &norm.output[j];
        if s.scaled {
            means.get(i, j) * s.std + s.mean
        } else {
            means.get(i, j)
        }
    })
}

/// Maps standardized output-channel variances back to physical units.
pub fn destandardize_output_variances(vars: &Matrix, norm: &Normalization) -> Matrix {
    Matrix::from_fn(vars.rows(), vars.cols(), |i, j| {
        let s = &norm.output[j];
        if s.scaled {
            vars.get(i, j) * s.std * s.std
        } else {
            vars.get(i, j)
        }
    })
}

/// Cuts every trajectory into overlapping fixed-length windows. Window
/// origins are retained in the trajectory source metadata.
pub fn window(ds: &TimeSeriesDataset, length: usize, stride: usize) -> Result<TimeSeriesDataset> {
    if length == 0 || stride == 0 {
        return Err(Error::Contract("window length and stride must be positive".into()));
    }
    for (i, traj) in ds.trajectories.iter().enumerate() {
        if length > traj.len() {
            return Err(Error::Contract(format!(
                "window length {length} exceeds trajectory {i} ({} steps, source {})",
                traj.len(),
                traj.source
            )));
        }
    }
    let mut out = Vec::new();
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let mut start = 0;
        while start + length <= traj.len() {
            out.push(Trajectory {
                u: traj.u.slice_rows(start, length)?,
                x: traj.x.slice_rows(start, length)?,
                source: format!("traj{i}[{start}..{}]", start + length),
            });
            start += stride;
        }
    }
    let mut provenance = ds.provenance.clone();
    provenance.push(format!("window length={length} stride={stride}"));
    Ok(TimeSeriesDataset {
        trajectories: out,
        sample_rate_hz: ds.sample_rate_hz,
        input_names: ds.input_names.clone(),
        output_names: ds.output_names.clone(),
        normalization: ds.normalization.clone(),
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> TimeSeriesDataset {
        let t1 = Trajectory {
            u: Matrix::from_fn(10, 1, |i, _| i as f64 * 0.1),
            x: Matrix::from_fn(10, 2, |i, j| (i as f64 + j as f64).sin()),
            source: "t1".into(),
        };
        let t2 = Trajectory {
            u: Matrix::from_fn(12, 1, |i, _| -(i as f64) * 0.2),
            x: Matrix::from_fn(12, 2, |i, j| (i as f64 * 0.3 - j as f64).cos()),
            source: "t2".into(),
        };
        TimeSeriesDataset {
            trajectories: vec![t1, t2],
            sample_rate_hz: 10.0,
            input_names: vec!["u1".into()],
            output_names: vec!["x1".into(), "x2".into()],
            normalization: None,
            provenance: vec!["test".into()],
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = std::env::temp_dir().join(format!("nekf_csv_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let ds = toy_dataset();
        let path = dir.join("t.csv");
        write_csv(&path, &ds.trajectories[0], &ds.input_names, &ds.output_names).unwrap();
        let schema = CsvSchema {
            input_columns: ds.input_names.clone(),
            output_columns: ds.output_names.clone(),
            sample_rate_hz: 10.0,
        };
        let loaded = load_csv(&path, &schema).unwrap();
        assert_eq!(loaded.trajectories[0].u, ds.trajectories[0].u);
        assert_eq!(loaded.trajectories[0].x, ds.trajectories[0].x);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_toy_shape() {
        let dir = std::env::temp_dir().join(format!("nekf_csv3_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.csv");
        fs::write(&path, "f,a,b\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let schema = CsvSchema {
            input_columns: vec!["f".into()],
            output_columns: vec!["a".into(), "b".into()],
            sample_rate_hz: 50.0,
        };
        let ds = load_csv(&path, &schema).unwrap();
        assert_eq!(ds.trajectories[0].len(), 3);
        assert_eq!(ds.input_dim(), 1);
        assert_eq!(ds.output_dim(), 2);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_nan_cell_error_names_row_and_column() {
        let dir = std::env::temp_dir().join(format!("nekf_csvnan_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        fs::write(&path, "u1,a4\n1,2\n3,NaN\n").unwrap();
        let schema = CsvSchema {
            input_columns: vec!["u1".into()],
            output_columns: vec!["a4".into()],
            sample_rate_hz: 1.0,
        };
        let err = load_csv(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("a4"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_missing_column_and_ragged_rows_are_reported() {
        let dir = std::env::temp_dir().join(format!("nekf_csverr_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        fs::write(&path, "u1,x1\n1,2\n").unwrap();
        let schema = CsvSchema {
            input_columns: vec!["u9".into()],
            output_columns: vec!["x1".into()],
            sample_rate_hz: 1.0,
        };
        let err = load_csv(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("u9"), "{err}");

        fs::write(&path, "u1,x1\n1,2\n3\n").unwrap();
        let schema = CsvSchema {
            input_columns: vec!["u1".into()],
            output_columns: vec!["x1".into()],
            sample_rate_hz: 1.0,
        };
        let err = load_csv(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("ragged"), "{err}");
        assert!(err.contains("row 2"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("nekf_ds_{}", std::process::id()));
        let ds = standardize(&toy_dataset()).unwrap();
        save_dataset(&ds, &dir).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.sample_rate_hz, ds.sample_rate_hz);
        assert_eq!(loaded.normalization, ds.normalization);
        assert_eq!(loaded.provenance, ds.provenance);
        for (a, b) in loaded.trajectories.iter().zip(&ds.trajectories) {
            assert_eq!(a.u, b.u);
            assert_eq!(a.x, b.x);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn standardize_centers_and_scales() {
        let ds = standardize(&toy_dataset()).unwrap();
        for j in 0..ds.output_dim() {
            let values: Vec<f64> = ds
                .trajectories
                .iter()
                .flat_map(|t| (0..t.x.rows()).map(move |i| t.x.get(i, j)))
                .collect();
            let n = values.len() as f64;
            let mean: f64 = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() <= 1e-12, "channel {j} mean {mean}");
            assert!((std - 1.0).abs() <= 1e-12, "channel {j} std {std}");
        }
    }

    #[test]
    fn standardize_then_destandardize_recovers_values() {
        let ds = toy_dataset();
        let scaled = standardize(&ds).unwrap();
        let norm = scaled.normalization.clone().unwrap();
        let restored = destandardize_outputs(&scaled.trajectories[0].x, &norm);
        let diff = restored.sub(&ds.trajectories[0].x).unwrap().max_abs();
        assert!(diff <= 1e-12);
    }

    #[test]
    fn constant_channel_is_flagged_and_passed_through() {
        let mut ds = toy_dataset();
        for traj in &mut ds.trajectories {
            let rows = traj.x.rows();
            traj.x = Matrix::from_fn(rows, 2, |i, j| if j == 0 { 7.5 } else { traj.x.get(i, j) });
        }
        let scaled = standardize(&ds).unwrap();
        let norm = scaled.normalization.as_ref().unwrap();
        assert!(!norm.output[0].scaled);
        assert!(norm.output[1].scaled);
        assert_eq!(scaled.trajectories[0].x.get(0, 0), 7.5);
    }

    #[test]
    fn window_identity_when_length_covers_trajectory() {
        let ds = toy_dataset();
        let w = window(&ds, 10, 10).unwrap();
        // First trajectory has exactly 10 rows -> 1 window; second has 12
        // rows -> 1 window starting at 0.
        assert_eq!(w.len(), 2);
        assert_eq!(w.trajectories[0].x, ds.trajectories[0].x);
    }

    #[test]
    fn window_counts_and_origins() {
        let mut ds = toy_dataset();
        ds.trajectories.truncate(1); // 10 steps
        let w = window(&ds, 5, 5).unwrap();
        assert_eq!(w.len(), 2);
        let w = window(&ds, 4, 3).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.trajectories[0].source, "traj0[0..4]");
        assert_eq!(w.trajectories[1].source, "traj0[3..7]");
        assert_eq!(w.trajectories[2].source, "traj0[6..10]");
    }

    #[test]
    fn window_rejects_oversized_length() {
        let ds = toy_dataset();
        let err = window(&ds, 11, 1).unwrap_err().to_string();
        assert!(err.contains("trajectory 0"), "{err}");
    }

    #[test]
    fn preprocessing_leaves_inputs_untouched() {
        let ds = toy_dataset();
        let before = ds.trajectories[0].x.clone();
        let _ = standardize(&ds).unwrap();
        let _ = window(&ds, 5, 5).unwrap();
        let _ = resample(&ds, 5.0).unwrap();
        assert_eq!(ds.trajectories[0].x, before);
    }
}
