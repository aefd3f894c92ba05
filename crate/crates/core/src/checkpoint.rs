//! Versioned binary checkpoints of a meta-training run.
//!
//! Layout: the 8-byte magic `O4RLCKPT`, a little-endian `u32` format version,
//! then the config, the meta state and every unit in order. All integers and
//! floats are little-endian; floats are stored bit-exactly.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::agent::EnvRunner;
use crate::error::{Error, Result};
use crate::gridworld::{self, GridworldState};
use crate::meta::{MetaState, MetaTrainConfig, MetaTrainer, TrainingUnit};
use crate::nets::HiddenStateBank;
use crate::optimizers::{ClassicalState, LearnedKind, OptimizerState};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"O4RLCKPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn usize(&mut self, x: usize) {
        self.u64(x as u64);
    }
    fn f64(&mut self, x: f64) {
        self.u64(x.to_bits());
    }
    fn bool(&mut self, x: bool) {
        self.u8(x as u8);
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        for &x in xs {
            self.f64(x);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.shape().len());
        for &d in t.shape() {
            self.usize(d);
        }
        self.f64s(t.data());
    }
    fn tree(&mut self, p: &ParamTree) {
        self.usize(p.len());
        for (k, t) in p.iter() {
            self.str(k);
            self.tensor(t);
        }
    }
    fn rng(&mut self, r: &ChaCha8Rng) {
        self.buf.extend_from_slice(&r.get_seed());
        self.u64(r.get_stream());
        self.buf.extend_from_slice(&r.get_word_pos().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(bad("length exceeds file size"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(bad(format!("invalid bool byte {x}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.len(8)?;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, self.f64s()?)
    }
    fn tree(&mut self) -> Result<ParamTree> {
        let n = self.len(1)?;
        let mut p = ParamTree::new();
        for _ in 0..n {
            let k = self.str()?;
            p.insert(k, self.tensor()?);
        }
        Ok(p)
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.array()?;
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.array()?);
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(word_pos);
        Ok(r)
    }
}

fn kind_tag(kind: LearnedKind) -> u8 {
    match kind {
        LearnedKind::Optim4Rl => 0,
        LearnedKind::LinearOptim => 1,
        LearnedKind::RnnOptim => 2,
    }
}

fn kind_from_tag(tag: u8) -> Result<LearnedKind> {
    Ok(match tag {
        0 => LearnedKind::Optim4Rl,
        1 => LearnedKind::LinearOptim,
        2 => LearnedKind::RnnOptim,
        x => return Err(bad(format!("unknown optimizer tag {x}"))),
    })
}

fn write_config(w: &mut Writer, c: &MetaTrainConfig) {
    w.usize(c.units);
    w.usize(c.reset_interval);
    w.usize(c.inner_steps);
    w.f64(c.meta_lr);
    w.u64(c.iterations);
    w.u64(c.seed);
    w.usize(c.envs.len());
    for e in &c.envs {
        w.str(e);
    }
    w.u8(kind_tag(c.kind));
    match c.agent_lr {
        Some(lr) => {
            w.bool(true);
            w.f64(lr);
        }
        None => w.bool(false),
    }
}

fn read_config(r: &mut Reader) -> Result<MetaTrainConfig> {
    let units = r.usize()?;
    let reset_interval = r.usize()?;
    let inner_steps = r.usize()?;
    let meta_lr = r.f64()?;
    let iterations = r.u64()?;
    let seed = r.u64()?;
    let n = r.len(8)?;
    let envs = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let kind = kind_from_tag(r.u8()?)?;
    let agent_lr = if r.bool()? { Some(r.f64()?) } else { None };
    Ok(MetaTrainConfig {
        units,
        reset_interval,
        inner_steps,
        meta_lr,
        iterations,
        seed,
        envs,
        kind,
        agent_lr,
    })
}

fn write_classical(w: &mut Writer, s: &ClassicalState) {
    w.tree(&s.m);
    w.tree(&s.v);
    w.u64(s.step);
}

fn read_classical(r: &mut Reader) -> Result<ClassicalState> {
    Ok(ClassicalState {
        m: r.tree()?,
        v: r.tree()?,
        step: r.u64()?,
    })
}

fn write_env(w: &mut Writer, s: &GridworldState) {
    w.usize(s.agent.0);
    w.usize(s.agent.1);
    w.usize(s.objects.len());
    for o in &s.objects {
        match o {
            Some((row, col)) => {
                w.bool(true);
                w.usize(*row);
                w.usize(*col);
            }
            None => w.bool(false),
        }
    }
    w.usize(s.t);
    w.bool(s.done);
    w.rng(&s.rng);
}

fn read_env(r: &mut Reader) -> Result<GridworldState> {
    let agent = (r.usize()?, r.usize()?);
    let n = r.len(1)?;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        objects.push(if r.bool()? {
            Some((r.usize()?, r.usize()?))
        } else {
            None
        });
    }
    Ok(GridworldState {
        agent,
        objects,
        t: r.usize()?,
        done: r.bool()?,
        rng: r.rng()?,
    })
}

fn write_unit(w: &mut Writer, u: &TrainingUnit) {
    w.usize(u.id);
    w.str(&u.runner.config.name);
    write_env(w, &u.runner.state);
    w.f64(u.runner.episode_return);
    w.tree(&u.params);
    match &u.state {
        OptimizerState::Classical(s) => {
            w.u8(0);
            write_classical(w, s);
        }
        OptimizerState::Learned(b) => {
            w.u8(1);
            w.tensor(&b.h1);
            w.tensor(&b.h2);
        }
    }
    w.f64(u.alpha);
    w.usize(u.offset);
    w.u64(u.local_iteration);
    w.rng(&u.rng);
    w.bool(u.diverged);
    w.u64(u.resets);
    w.f64s(&u.recent_returns);
}

fn read_unit(r: &mut Reader) -> Result<TrainingUnit> {
    let id = r.usize()?;
    let config = gridworld::make_env(&r.str()?)?;
    let state = read_env(r)?;
    if state.objects.len() != config.objects.len() {
        return Err(bad("object count does not match environment"));
    }
    let obs = gridworld::observation(&config, &state);
    let runner = EnvRunner {
        config,
        state,
        obs,
        episode_return: r.f64()?,
    };
    let params = r.tree()?;
    let opt_state = match r.u8()? {
        0 => OptimizerState::Classical(read_classical(r)?),
        1 => OptimizerState::Learned(HiddenStateBank {
            h1: r.tensor()?,
            h2: r.tensor()?,
        }),
        x => return Err(bad(format!("unknown optimizer state tag {x}"))),
    };
    Ok(TrainingUnit {
        id,
        runner,
        params,
        state: opt_state,
        alpha: r.f64()?,
        offset: r.usize()?,
        local_iteration: r.u64()?,
        rng: r.rng()?,
        diverged: r.bool()?,
        resets: r.u64()?,
        recent_returns: r.f64s()?,
    })
}

pub fn encode(trainer: &MetaTrainer) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    write_config(&mut w, &trainer.config);
    let m = &trainer.meta;
    w.u8(kind_tag(m.kind));
    w.tree(&m.phi);
    write_classical(&mut w, &m.adam);
    w.u64(m.iteration);
    w.u64(m.skipped_updates);
    w.usize(trainer.units.len());
    for u in &trainer.units {
        write_unit(&mut w, u);
    }
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<MetaTrainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let config = read_config(&mut r)?;
    config.validate()?;
    let meta = MetaState {
        kind: kind_from_tag(r.u8()?)?,
        phi: r.tree()?,
        adam: read_classical(&mut r)?,
        iteration: r.u64()?,
        skipped_updates: r.u64()?,
    };
    let n = r.len(1)?;
    let units = (0..n).map(|_| read_unit(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(MetaTrainer {
        config,
        units,
        meta,
    })
}

pub fn save(path: &Path, trainer: &MetaTrainer) -> Result<()> {
    fs::write(path, encode(trainer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MetaTrainer> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer() -> MetaTrainer {
        let cfg = MetaTrainConfig {
            units: 2,
            reset_interval: 4,
            inner_steps: 1,
            iterations: 4,
            envs: vec!["small_dense_short".into(), "big_sparse_short".into()],
            ..MetaTrainConfig::default()
        };
        let mut t = MetaTrainer::new(cfg).unwrap();
        t.step().unwrap();
        t
    }

    #[test]
    fn round_trip_is_exact() {
        let t = trainer();
        let bytes = encode(&t);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.meta, t.meta);
        assert_eq!(back.config, t.config);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let mut a = trainer();
        let mut b = decode(&encode(&a)).unwrap();
        for _ in 0..2 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(encode(&a), encode(&b));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&trainer());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong), Err(Error::Checkpoint(_))));
        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode(&future), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..bytes.len() / 2]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let t = trainer();
        save(&path, &t).unwrap();
        assert_eq!(encode(&load(&path).unwrap()), encode(&t));
    }
}
