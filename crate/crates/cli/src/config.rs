//! INI-style run configuration: `[section]` headers, `key = value`
//! lines, `#` comments. Four sections are recognized: data, model,
//! training, evaluation. Command-line `--set section.key=value`
//! overrides file values; every value has a default, and the fully
//! resolved configuration is echoed into each output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use neural_ekf::matrix::Matrix;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

const SECTIONS: [&str; 4] = ["data", "model", "training", "evaluation"];

/// Known keys and their defaults, per section.
fn defaults() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        ("data", "trajectories", "200"),
        ("data", "steps", "500"),
        ("data", "dt", "0.01"),
        ("data", "forcing", "random"),
        ("data", "forcing_std", "1.0"),
        ("data", "seed", "0"),
        ("data", "cubic_coeff", "1.0"),
        ("data", "symmetric_stiffness", "false"),
        ("data", "init_amplitude", "1.0"),
        ("data", "mass", "1,0;0,1"),
        ("data", "stiffness", "4,-0.5;0.5,4"),
        ("data", "damping", "0.5,0;0,0.5"),
        ("data", "resample_hz", "0"),
        ("data", "highpass_hz", "0"),
        ("data", "lowpass_hz", "0"),
        ("data", "filter_order", "4"),
        ("data", "standardize", "true"),
        ("data", "window_length", "0"),
        ("data", "window_stride", "0"),
        ("model", "latent_dim", "4"),
        ("model", "hidden", "64,64,64"),
        ("model", "residual", "true"),
        ("model", "seed", "0"),
        ("training", "epochs", "100"),
        ("training", "batch_size", "16"),
        ("training", "learning_rate", "0.001"),
        ("training", "alpha", "0.5"),
        ("training", "seed", "0"),
        ("training", "gradient_clip", "10"),
        ("training", "checkpoint_every", "0"),
        ("training", "resume_from", ""),
        ("evaluation", "clusters", "3"),
        ("evaluation", "seed", "0"),
        ("evaluation", "restarts", "10"),
        ("evaluation", "zscore", "false"),
    ]
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

impl RunConfig {
    pub fn with_defaults() -> Self {
        let values = defaults()
            .into_iter()
            .map(|(s, k, v)| ((s.to_string(), k.to_string()), v.to_string()))
            .collect();
        RunConfig { values }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::with_defaults();
        let mut section = String::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError(format!(
                        "{}:{}: unknown section [{name}]",
                        path.display(),
                        line_no + 1
                    )));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    line_no + 1
                )));
            };
            if section.is_empty() {
                return Err(ConfigError(format!(
                    "{}:{}: key outside any [section]",
                    path.display(),
                    line_no + 1
                )));
            }
            cfg.set(&section, key.trim(), value.trim()).map_err(|e| {
                ConfigError(format!("{}:{}: {}", path.display(), line_no + 1, e.0))
            })?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override.
    pub fn set_dotted(&mut self, spec: &str) -> Result<(), ConfigError> {
        let Some((path, value)) = spec.split_once('=') else {
            return Err(ConfigError(format!(
                "--set expects section.key=value, got {spec:?}"
            )));
        };
        let Some((section, key)) = path.split_once('.') else {
            return Err(ConfigError(format!(
                "--set key must be dotted section.key, got {path:?}"
            )));
        };
        self.set(section.trim(), key.trim(), value.trim())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let slot = (section.to_string(), key.to_string());
        if !self.values.contains_key(&slot) {
            return Err(ConfigError(format!("unknown configuration field {section}.{key}")));
        }
        self.values.insert(slot, value.to_string());
        Ok(())
    }

    fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .expect("every known key has a default")
    }

    pub fn string(&self, section: &str, key: &str) -> String {
        self.raw(section, key).to_string()
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<usize, ConfigError> {
        self.raw(section, key)
            .parse()
            .map_err(|_| ConfigError(format!("{section}.{key}: expected an integer, got {:?}", self.raw(section, key))))
    }

    pub fn u64(&self, section: &str, key: &str) -> Result<u64, ConfigError> {
        self.raw(section, key)
            .parse()
            .map_err(|_| ConfigError(format!("{section}.{key}: expected an integer, got {:?}", self.raw(section, key))))
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.raw(section, key)
            .parse()
            .map_err(|_| ConfigError(format!("{section}.{key}: expected a number, got {:?}", self.raw(section, key))))
    }

    pub fn bool(&self, section: &str, key: &str) -> Result<bool, ConfigError> {
        match self.raw(section, key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(ConfigError(format!(
                "{section}.{key}: expected true/false, got {other:?}"
            ))),
        }
    }

    /// Comma-separated list of positive integers.
    pub fn usize_list(&self, section: &str, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.raw(section, key)
            .split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| {
                    ConfigError(format!("{section}.{key}: expected integers, got {p:?}"))
                })
            })
            .collect()
    }

    /// Matrix literal: rows separated by ';', entries by ','.
    pub fn matrix(&self, section: &str, key: &str) -> Result<Matrix, ConfigError> {
        let text = self.raw(section, key);
        let rows: Vec<Vec<f64>> = text
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|cell| {
                        cell.trim().parse().map_err(|_| {
                            ConfigError(format!(
                                "{section}.{key}: bad matrix entry {cell:?} in {text:?}"
                            ))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        let n_cols = rows.first().map(Vec::len).unwrap_or(0);
        if n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
            return Err(ConfigError(format!("{section}.{key}: ragged matrix literal {text:?}")));
        }
        Ok(Matrix::from_fn(rows.len(), n_cols, |i, j| rows[i][j]))
    }

    /// Serializes the resolved configuration for provenance echoes.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for ((section, key), value) in &self.values {
            if section != current {
                if !current.is_empty() {
                    writeln!(out).expect("write");
                }
                writeln!(out, "[{section}]").expect("write");
                current = section;
            }
            writeln!(out, "{key} = {value}").expect("write");
        }
        out
    }
}
