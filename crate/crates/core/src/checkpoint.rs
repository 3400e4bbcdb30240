//! Versioned binary checkpoints: a single self-describing container
//! holding every parameter tensor by name, the optimizer moments, the
//! epoch counter, the loss history, the configuration echo, and the
//! training-data standardization record.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! ```text
//! offset  field
//! 0       magic "NEKFCKPT" (8 bytes)
//! 8       format version, u32 (currently 1)
//! 12      completed epochs, u64
//! 20      optimizer step counter, u64
//! 28      config echo: u32 byte length, then UTF-8 bytes
//! .       model shape: latent u32, input u32, obs u32, residual u8,
//!         hidden-layer count u32, then each width u32
//! .       tensor count, u32; per tensor: name (u32 length + UTF-8),
//!         rows u32, cols u32, rows*cols f64 (row-major)
//! .       per tensor, same order: first moment rows*cols f64,
//!         second moment rows*cols f64
//! .       normalization flag u8; if 1: input channel count u32, per
//!         channel (name, mean f64, std f64, scaled u8), then output
//!         channels in the same form
//! .       history length u32; per epoch: epoch u64, loss f64,
//!         reconstruction f64, overshoot f64, kl f64
//! ```
//!
//! Saving is deterministic: save, load, save again produces the same
//! bytes.

use std::fs;
use std::path::Path;

use crate::data::{ChannelStats, Normalization};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, NeuralEkf, ParamStore};
use crate::train::{AdamState, EpochStats, TrainState};

const MAGIC: &[u8; 8] = b"NEKFCKPT";
const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    buf.extend_from_slice(&state.adam.step.to_le_bytes());
    write_string(&mut buf, &state.config_echo);

    let cfg = &state.model.cfg;
    buf.extend_from_slice(&(cfg.latent_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.obs_dim as u32).to_le_bytes());
    buf.push(cfg.residual as u8);
    buf.extend_from_slice(&(cfg.hidden.len() as u32).to_le_bytes());
    for &w in &cfg.hidden {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }

    let params = &state.model.params;
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        write_string(&mut buf, name);
        write_matrix(&mut buf, value);
    }
    for id in 0..params.len() {
        write_values(&mut buf, &state.adam.m[id]);
        write_values(&mut buf, &state.adam.v[id]);
    }

    match &state.normalization {
        None => buf.push(0),
        Some(norm) => {
            buf.push(1);
            for side in [&norm.input, &norm.output] {
                buf.extend_from_slice(&(side.len() as u32).to_le_bytes());
                for (i, stats) in side.iter().enumerate() {
                    write_string(&mut buf, &format!("ch{i}"));
                    buf.extend_from_slice(&stats.mean.to_le_bytes());
                    buf.extend_from_slice(&stats.std.to_le_bytes());
                    buf.push(stats.scaled as u8);
                }
            }
        }
    }

    buf.extend_from_slice(&(state.history.len() as u32).to_le_bytes());
    for e in &state.history {
        buf.extend_from_slice(&(e.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&e.loss.to_le_bytes());
        buf.extend_from_slice(&e.reconstruction.to_le_bytes());
        buf.extend_from_slice(&e.overshoot.to_le_bytes());
        buf.extend_from_slice(&e.kl.to_le_bytes());
    }

    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };

    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(r.corrupt(0, "bad magic (not a checkpoint file)"));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let epoch = r.u64("epoch")? as usize;
    let adam_step = r.u64("optimizer step")?;
    let config_echo = r.string("config echo")?;

    let latent_dim = r.u32("latent dim")? as usize;
    let input_dim = r.u32("input dim")? as usize;
    let obs_dim = r.u32("obs dim")? as usize;
    let residual = r.u8("residual flag")? != 0;
    let n_hidden = r.u32("hidden count")? as usize;
    if n_hidden > 64 {
        return Err(r.corrupt(r.pos, "implausible hidden layer count"));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32("hidden width")? as usize);
    }
    let cfg = ModelConfig {
        latent_dim,
        input_dim,
        obs_dim,
        hidden,
        residual,
    };

    let n_tensors = r.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    let mut shapes = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string("tensor name")?;
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let values = r.f64s(rows * cols, "tensor values")?;
        shapes.push((rows, cols));
        params.insert(name, Matrix::from_rows(rows, cols, &values));
    }
    let mut adam = AdamState {
        m: Vec::with_capacity(n_tensors),
        v: Vec::with_capacity(n_tensors),
        step: adam_step,
    };
    for &(rows, cols) in &shapes {
        let m = r.f64s(rows * cols, "first moment")?;
        let v = r.f64s(rows * cols, "second moment")?;
        adam.m.push(Matrix::from_rows(rows, cols, &m));
        adam.v.push(Matrix::from_rows(rows, cols, &v));
    }

    let normalization = match r.u8("normalization flag")? {
        0 => None,
        1 => {
            let read_side = |r: &mut Reader| -> Result<Vec<ChannelStats>> {
                let n = r.u32("channel count")? as usize;
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let _name = r.string("channel name")?;
                    let mean = r.f64("channel mean")?;
                    let std = r.f64("channel std")?;
                    let scaled = r.u8("channel scaled flag")? != 0;
                    out.push(ChannelStats { mean, std, scaled });
                }
                Ok(out)
            };
            let input = read_side(&mut r)?;
            let output = read_side(&mut r)?;
            Some(Normalization { input, output })
        }
        _ => return Err(r.corrupt(r.pos - 1, "bad normalization flag")),
    };

    let n_history = r.u32("history length")? as usize;
    let mut history = Vec::with_capacity(n_history);
    for _ in 0..n_history {
        history.push(EpochStats {
            epoch: r.u64("history epoch")? as usize,
            loss: r.f64("history loss")?,
            reconstruction: r.f64("history reconstruction")?,
            overshoot: r.f64("history overshoot")?,
            kl: r.f64("history kl")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, "trailing bytes after checkpoint payload"));
    }

    let model = NeuralEkf::from_params(cfg, params)?;
    Ok(TrainState {
        model,
        adam,
        epoch,
        history,
        config_echo,
        normalization,
    })
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    write_values(buf, m);
}

fn write_values(buf: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, message: &str) -> Error {
        Error::CheckpointCorrupt {
            path: self.path.clone(),
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(self.pos, &format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let len = self.u32(what)? as usize;
        if len > 1 << 20 {
            return Err(self.corrupt(start, &format!("implausible length for {what}")));
        }
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| self.corrupt(start, &format!("invalid UTF-8 in {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn state_with_history() -> TrainState {
        let cfg = ModelConfig {
            latent_dim: 2,
            input_dim: 1,
            obs_dim: 1,
            hidden: vec![4, 4],
            residual: true,
        };
        let mut state = TrainState::new(NeuralEkf::new(cfg, 21).unwrap());
        state.epoch = 3;
        state.adam.step = 17;
        state.config_echo = "epochs = 3\nseed = 21".into();
        state.history = vec![
            EpochStats {
                epoch: 1,
                loss: 2.5,
                reconstruction: -1.0,
                overshoot: -1.2,
                kl: 0.4,
            },
            EpochStats {
                epoch: 2,
                loss: 2.1,
                reconstruction: -0.9,
                overshoot: -1.0,
                kl: 0.3,
            },
        ];
        state.normalization = Some(Normalization {
            input: vec![ChannelStats {
                mean: 0.5,
                std: 2.0,
                scaled: true,
            }],
            output: vec![ChannelStats {
                mean: -0.1,
                std: 0.0,
                scaled: false,
            }],
        });
        state
    }

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("nekf_ckpt_{tag}_{}", std::process::id()))
    }

    #[test]
    fn round_trip_reproduces_every_tensor_and_field() {
        let state = state_with_history();
        let path = temp_path("rt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.epoch, state.epoch);
        assert_eq!(loaded.adam.step, state.adam.step);
        assert_eq!(loaded.config_echo, state.config_echo);
        assert_eq!(loaded.history, state.history);
        assert_eq!(loaded.normalization, state.normalization);
        assert_eq!(loaded.model.cfg, state.model.cfg);
        for id in 0..state.model.params.len() {
            assert_eq!(loaded.model.params.name(id), state.model.params.name(id));
            assert_eq!(loaded.model.params.value(id), state.model.params.value(id));
            assert_eq!(loaded.adam.m[id], state.adam.m[id]);
            assert_eq!(loaded.adam.v[id], state.adam.v[id]);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let state = state_with_history();
        let p1 = temp_path("b1");
        let p2 = temp_path("b2");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let state = state_with_history();
        let path = temp_path("trunc");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointCorrupt { offset, .. }) => assert!(offset > 0),
            other => panic!("expected corruption error, got {:?}", other.map(|s| s.epoch)),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let state = state_with_history();
        let path = temp_path("ver");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("expected version error, got {:?}", other.map(|s| s.epoch)),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn garbage_file_is_rejected() {
        let path = temp_path("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
