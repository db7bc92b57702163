//! Binary checkpoint of a run between tasks.
//!
//! Layout (little-endian): magic `MNDC`, version `u16`, SHA-256 of the run
//! config, tasks completed `u32`, then four length-prefixed sections: weight
//! values (`u64` count + `f32`s), mask owners (`u64` count + `u16`s), banks
//! (`u64` bank count, then per bank the affine and stats vectors, each a
//! `u64` count + `f32`s) and the RNG state (32-byte seed, stream `u64`,
//! word position `u128`).

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{MindError, Result};
use crate::mask::TaskMask;
use crate::network::GatedNet;
use crate::scenarios::Scenario;
use crate::trainer::{Learner, RngState};

const MAGIC: &[u8; 4] = b"MNDC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub tasks_completed: usize,
    pub values: Vec<f32>,
    pub owners: Vec<u16>,
    /// `(affine, stats)` per bank.
    pub banks: Vec<(Vec<f32>, Vec<f32>)>,
    pub rng: RngState,
}

fn bad(field: &'static str, reason: impl Into<String>) -> MindError {
    MindError::format(field, reason)
}

fn put_f32s<W: Write>(w: &mut W, v: &[f32]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| bad(field, e.to_string()))?;
        Ok(b)
    }

    fn count(&mut self, field: &'static str, limit: usize) -> Result<usize> {
        let n = u64::from_le_bytes(self.bytes::<8>(field)?);
        if n > limit as u64 {
            return Err(bad(field, format!("length {n} exceeds {limit}")));
        }
        Ok(n as usize)
    }

    fn f32s(&mut self, field: &'static str, limit: usize) -> Result<Vec<f32>> {
        let n = self.count(field, limit)?;
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes::<4>(field)?))).collect()
    }
}

/// Upper bound on any section length, to reject corrupt headers before allocating.
const MAX_LEN: usize = 1 << 30;

impl Checkpoint {
    pub fn capture(learner: &Learner) -> Self {
        Checkpoint {
            config_hash: learner.config().hash(),
            tasks_completed: learner.tasks_done(),
            values: learner.net.params.values.clone(),
            owners: learner.net.mask.owners().to_vec(),
            banks: learner.net.banks.iter().map(|b| (b.affine.clone(), b.stats.clone())).collect(),
            rng: learner.rng_state(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&(self.tasks_completed as u32).to_le_bytes())?;
        put_f32s(w, &self.values)?;
        w.write_all(&(self.owners.len() as u64).to_le_bytes())?;
        for o in &self.owners {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&(self.banks.len() as u64).to_le_bytes())?;
        for (a, s) in &self.banks {
            put_f32s(w, a)?;
            put_f32s(w, s)?;
        }
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { r };
        if &r.bytes::<4>("magic")? != MAGIC {
            return Err(bad("magic", "not a checkpoint file"));
        }
        let version = u16::from_le_bytes(r.bytes("version")?);
        if version != VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        let config_hash = r.bytes::<32>("config_hash")?;
        let tasks_completed = u32::from_le_bytes(r.bytes("tasks_completed")?) as usize;
        let values = r.f32s("params", MAX_LEN)?;
        let n = r.count("masks", MAX_LEN)?;
        let owners = (0..n).map(|_| Ok(u16::from_le_bytes(r.bytes("masks")?))).collect::<Result<Vec<_>>>()?;
        let nb = r.count("banks", 1 << 16)?;
        let mut banks = Vec::with_capacity(nb);
        for _ in 0..nb {
            banks.push((r.f32s("banks", MAX_LEN)?, r.f32s("banks", MAX_LEN)?));
        }
        let rng = RngState {
            seed: r.bytes("rng")?,
            stream: u64::from_le_bytes(r.bytes("rng")?),
            word_pos: u128::from_le_bytes(r.bytes("rng")?),
        };
        Ok(Checkpoint {
            config_hash,
            tasks_completed,
            values,
            owners,
            banks,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| MindError::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w).and_then(|_| w.flush()).map_err(|e| MindError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| MindError::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    /// Rebuilds the learner this checkpoint was taken from. `config` must be
    /// the run's config; `scenario` supplies the class lists of finished tasks.
    pub fn into_learner(self, config: &RunConfig, scenario: &Scenario) -> Result<Learner> {
        if self.config_hash != config.hash() {
            return Err(MindError::State("checkpoint was written for a different config".into()));
        }
        let template = Learner::new(config)?;
        let mut net: GatedNet<f32> = template.net;
        if self.values.len() != net.params.values.len() || self.banks.len() != net.banks.len() {
            return Err(bad("params", "sizes do not match the configured network"));
        }
        let mask = &net.mask;
        net.mask = TaskMask::from_owners(mask.layers().to_vec(), mask.n_tasks(), mask.fraction(), self.owners)?;
        net.params.values = self.values;
        for (bank, (affine, stats)) in net.banks.iter_mut().zip(self.banks) {
            if affine.len() != bank.affine.len() || stats.len() != bank.stats.len() {
                return Err(bad("banks", "bank layout does not match the configured network"));
            }
            bank.affine = affine;
            bank.stats = stats;
        }
        Learner::restore(config, scenario, net, self.rng, self.tasks_completed)
    }
}
