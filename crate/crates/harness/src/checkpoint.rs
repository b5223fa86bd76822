//! Checkpoint files: a versioned container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "IBPCKPT\0"
//! version   u32
//! iteration u64
//! config    32 bytes  SHA-256 config fingerprint
//! count     u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, data f64 × numel }
//! checksum  32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Floats are stored as raw bit patterns, so a round trip is bit-exact.
//! Files are written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use ibp::diffcore::{AdamState, Tensor};
use ibp::maze_planner::{ActionGrid, ManagerNet, MazeTask, TrainedManager};
use ibp::nn::Parameters;
use ibp::planner::AgentParams;
use ibp::trainer::Trainer;
use sha2::{Digest, Sha256};

use crate::config::Fingerprint;

pub const MAGIC: &[u8; 8] = b"IBPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("file ends early, at byte {at} of a field needing {need} more")]
    Truncated { at: usize, need: usize },
    #[error("checksum mismatch; the file is corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {0:?} is missing")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub fingerprint: Fingerprint,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(iteration: u64, fingerprint: Fingerprint) -> Self {
        Self {
            version: FORMAT_VERSION,
            iteration,
            fingerprint,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    /// Copy the stored tensor `name` into `dst`, which fixes the shape.
    pub fn restore(&self, name: &str, dst: &mut Tensor) -> Result<(), CheckpointError> {
        let src = self.get(name)?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::Shape {
                name: name.into(),
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        *dst = src.clone();
        Ok(())
    }

    fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let t = self.get(name)?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(CheckpointError::Malformed(format!("{name:?} is not a scalar"))),
        }
    }

    fn push_optimizer(&mut self, prefix: &str, opt: &AdamState) {
        for (i, m) in opt.first.iter().enumerate() {
            self.push(format!("{prefix}.m.{i}"), m);
        }
        for (i, v) in opt.second.iter().enumerate() {
            self.push(format!("{prefix}.v.{i}"), v);
        }
        self.push(format!("{prefix}.step"), &Tensor::scalar(opt.step as f64));
    }

    pub fn restore_optimizer(&self, prefix: &str, opt: &mut AdamState) -> Result<(), CheckpointError> {
        for (i, m) in opt.first.iter_mut().enumerate() {
            self.restore(&format!("{prefix}.m.{i}"), m)?;
        }
        for (i, v) in opt.second.iter_mut().enumerate() {
            self.restore(&format!("{prefix}.v.{i}"), v)?;
        }
        opt.step = self.scalar(&format!("{prefix}.step"))? as u64;
        Ok(())
    }

    /// Parameters of all four components, the three optimizers and the
    /// current learning rates.
    pub fn from_trainer(trainer: &Trainer, fingerprint: Fingerprint) -> Self {
        let mut c = Self::new(trainer.iteration, fingerprint);
        for (name, t) in trainer.params.named_tensors() {
            c.push(name, t);
        }
        c.push_optimizer("opt.model", &trainer.model_opt);
        c.push_optimizer("opt.manager", &trainer.manager_opt);
        c.push_optimizer("opt.controller", &trainer.controller_opt);
        c.push("lr.model", &Tensor::scalar(trainer.lrs.model));
        c.push("lr.controller", &Tensor::scalar(trainer.lrs.controller));
        c.push("lr.manager", &Tensor::scalar(trainer.lrs.manager));
        c
    }

    pub fn restore_params(&self, params: &mut AgentParams) -> Result<(), CheckpointError> {
        for (name, t) in params.named_tensors_mut() {
            self.restore(&name, t)?;
        }
        Ok(())
    }

    /// Parameters, optimizer moments, learning rates and iteration counter.
    /// The transition buffer is not stored.
    pub fn restore_trainer(&self, trainer: &mut Trainer) -> Result<(), CheckpointError> {
        self.restore_params(&mut trainer.params)?;
        self.restore_optimizer("opt.model", &mut trainer.model_opt)?;
        self.restore_optimizer("opt.manager", &mut trainer.manager_opt)?;
        self.restore_optimizer("opt.controller", &mut trainer.controller_opt)?;
        trainer.lrs.model = self.scalar("lr.model")?;
        trainer.lrs.controller = self.scalar("lr.controller")?;
        trainer.lrs.manager = self.scalar("lr.manager")?;
        trainer.iteration = self.iteration;
        Ok(())
    }

    /// Pre-trained Q tables, and the learned manager if there is one.
    pub fn from_maze(tasks: &[MazeTask], manager: Option<&TrainedManager>, fingerprint: Fingerprint) -> Self {
        let mut c = Self::new(manager.map_or(0, |m| m.iterations as u64), fingerprint);
        for (i, task) in tasks.iter().enumerate() {
            let q = &task.q;
            let t = Tensor::new(vec![q.height(), q.width(), 4], q.as_slice().to_vec()).expect("q shape");
            c.push(format!("q.{i}"), &t);
        }
        if let Some(m) = manager {
            for (i, t) in m.net.tensors().into_iter().enumerate() {
                c.push(format!("maze_manager.{i}"), t);
            }
            c.push_optimizer("opt.maze_manager", &m.optimizer);
        }
        c
    }

    /// Replace each task's Q table with the stored one.
    pub fn restore_q_tables(&self, tasks: &mut [MazeTask]) -> Result<(), CheckpointError> {
        for (i, task) in tasks.iter_mut().enumerate() {
            let name = format!("q.{i}");
            let t = self.get(&name)?;
            let expected = vec![task.maze.height(), task.maze.width(), 4];
            if t.shape() != expected.as_slice() {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            task.q = ActionGrid::from_values(expected[0], expected[1], t.data().to_vec())
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        Ok(())
    }

    pub fn has_maze_manager(&self) -> bool {
        self.get("maze_manager.0").is_ok()
    }

    /// The learned maze manager; `template` fixes the architecture.
    pub fn maze_manager(&self, mut template: ManagerNet) -> Result<ManagerNet, CheckpointError> {
        for (i, t) in template.tensors_mut().into_iter().enumerate() {
            self.restore(&format!("maze_manager.{i}"), t)?;
        }
        Ok(template)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.fingerprint.0);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < r.at + CHECKSUM_LEN {
            return Err(CheckpointError::Truncated {
                at: bytes.len(),
                need: CHECKSUM_LEN,
            });
        }
        let body = bytes.len() - CHECKSUM_LEN;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            bytes: &bytes[..body],
            at: r.at,
        };
        let iteration = r.u64()?;
        let fingerprint = Fingerprint(r.take(32)?.try_into().expect("32 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name:?}: shape overflows")))?;
            let need = numel
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name:?}: shape overflows")))?;
            let data = r
                .take(need)?
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if r.at != body {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body - r.at)));
        }
        Ok(Self {
            version,
            iteration,
            fingerprint,
            tensors,
        })
    }

    /// Write atomically: a temporary file in the same directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write `bytes` to a temporary sibling of `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { at: self.at, need: n });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
