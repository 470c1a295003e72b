//! Binary training checkpoints.
//!
//! Little-endian layout:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `b"RNTC"` |
//! | version | `u32` (currently 1) |
//! | experiment config | `u32` length + UTF-8 INI text |
//! | parameters | `u32` count, then per tensor: name (`u32` length + UTF-8), `u32` rows, `u32` cols, `f64` values |
//! | optimizer | `f64` lr, beta1, beta2, epsilon; `u64` step; first then second moments as `f64` values shaped like the parameters |
//! | step | `u64` |
//! | rng | 32-byte ChaCha8 seed, `u64` stream, `u128` word position |
//! | state pool | `u64` capacity, `u64` count, then per entry `u64` step, `u64` last token, `f64` state values |
//!
//! Saving a loaded checkpoint reproduces the original bytes.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::longform::{PoolEntry, StatePool};
use crate::model::{RecurrentState, RnntModel, RnntParams};
use crate::nn::{AdamConfig, AdamState};
use crate::trainer::Trainer;

pub const MAGIC: [u8; 4] = *b"RNTC";
pub const VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: RnntModel,
    pub optimizer: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub pool: StatePool,
}

impl Checkpoint {
    /// Snapshot of a trainer; `config.model` and `config.train` are replaced
    /// by the trainer's own.
    pub fn from_trainer(trainer: &Trainer, config: &ExperimentConfig) -> Self {
        let mut config = config.clone();
        config.model = trainer.model.config.clone();
        config.train = trainer.config.clone();
        Self {
            config,
            model: trainer.model.clone(),
            optimizer: trainer.optimizer.clone(),
            step: trainer.step,
            rng: trainer.rng.clone(),
            pool: trainer.pool.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::from_parts(
            self.config.train,
            self.model,
            Some(self.optimizer),
            Some(self.pool),
            self.rng,
            self.step,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_ini_string())?;

        let named = self.model.params.named_tensors();
        w.len32(named.len())?;
        for (name, m) in &named {
            w.str(name)?;
            w.len32(m.rows())?;
            w.len32(m.cols())?;
            w.f64s(m.data());
        }

        let opt = &self.optimizer;
        if opt.first_moment.len() != named.len() || opt.second_moment.len() != named.len() {
            return Err(Error::Contract("optimizer moments do not match the parameters".into()));
        }
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = opt.config;
        w.f64s(&[learning_rate, beta1, beta2, epsilon]);
        w.u64(opt.step);
        for (moment, (_, p)) in opt.first_moment.iter().chain(&opt.second_moment).zip(named.iter().cycle()) {
            if moment.shape() != p.shape() {
                return Err(Error::Contract("optimizer moment shape differs from its parameter".into()));
            }
            w.f64s(moment.data());
        }

        w.u64(self.step);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());

        w.u64(self.pool.capacity() as u64);
        w.u64(self.pool.len() as u64);
        for entry in self.pool.entries() {
            w.u64(entry.step);
            w.u64(entry.state.last_token as u64);
            for v in entry.state.values() {
                w.f64s(&[*v]);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let config = ExperimentConfig::from_ini_str(&r.str()?)?;

        let mut params = RnntParams::zeros(&config.model);
        let expected: Vec<(String, (usize, usize))> = params
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!("{count} tensors stored, model has {}", expected.len())));
        }
        for ((name, shape), tensor) in expected.iter().zip(params.tensors_mut()) {
            let stored = r.str()?;
            let dims = (r.u32()? as usize, r.u32()? as usize);
            if &stored != name || dims != *shape {
                return Err(Error::Format(format!(
                    "tensor {stored} {dims:?} does not match expected {name} {shape:?}"
                )));
            }
            r.fill_f64s(tensor.data_mut())?;
        }
        let model = RnntModel::from_parts(config.model.clone(), params)?;

        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let epsilon = r.f64()?;
        let shapes = model.params.shapes();
        let mut optimizer = AdamState::new(
            AdamConfig {
                learning_rate: lr,
                beta1,
                beta2,
                epsilon,
            },
            &shapes,
        );
        optimizer.step = r.u64()?;
        for m in optimizer.first_moment.iter_mut().chain(optimizer.second_moment.iter_mut()) {
            r.fill_f64s(m.data_mut())?;
        }

        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let capacity = r.u64()? as usize;
        let mut pool = StatePool::new(capacity).map_err(|e| Error::Format(format!("state pool: {e}")))?;
        let entries = r.u64()? as usize;
        if entries > capacity {
            return Err(Error::Format(format!("pool holds {entries} entries but capacity is {capacity}")));
        }
        for _ in 0..entries {
            let entry_step = r.u64()?;
            let mut state = RecurrentState::zeros(&model.config);
            state.last_token = r.u64()? as usize;
            for v in state.values_mut() {
                *v = r.f64()?;
            }
            pool.push(PoolEntry {
                state,
                step: entry_step,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            rng,
            pool,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn len32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.len32(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn fill_f64s(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out {
            *v = self.f64()?;
        }
        Ok(())
    }
}

/// Loads only the model from a checkpoint.
pub fn load_model(path: &Path) -> Result<RnntModel> {
    Ok(Checkpoint::load(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_domains;
    use crate::longform::{StateStrategy, StrategyKind};
    use crate::recipe::{generate_corpus, DataConfig};
    use crate::trainer::TrainingSet;

    fn tiny_trainer(kind: StrategyKind) -> (Trainer, ExperimentConfig, TrainingSet) {
        let mut cfg = ExperimentConfig::default();
        cfg.train.batch_size = 2;
        cfg.train.state_strategy = StateStrategy::new(kind);
        cfg.train.pool_capacity = 3;
        let data = DataConfig {
            train_utts_per_domain: 8,
            test_utts_per_domain: 2,
            domains: vec!["search".into()],
            ..cfg.data.clone()
        };
        let corpus = generate_corpus(&data, default_domains(data.vocab_size, data.raw_dim).unwrap()[..1].to_vec()).unwrap();
        let set = TrainingSet::new(corpus.domains, corpus.train).unwrap();
        let trainer = Trainer::new(cfg.model.clone(), cfg.train.clone()).unwrap();
        (trainer, cfg, set)
    }

    fn step(t: &mut Trainer, set: &TrainingSet) -> f64 {
        let batch = set.sample_batch(t.config.sampling, t.config.batch_size, &mut t.rng).unwrap();
        t.train_step(&batch).unwrap().loss
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (mut trainer, cfg, set) = tiny_trainer(StrategyKind::Rsp);
        for _ in 0..4 {
            step(&mut trainer, &set);
        }
        assert!(!trainer.pool.is_empty());
        let bytes = Checkpoint::from_trainer(&trainer, &cfg).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RNTC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.model, trainer.model);
        assert_eq!(back.optimizer, trainer.optimizer);
        assert_eq!(back.step, 4);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (mut a, cfg, set) = tiny_trainer(StrategyKind::Rsp);
        for _ in 0..2 {
            step(&mut a, &set);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        Checkpoint::from_trainer(&a, &cfg).save(&path).unwrap();
        let mut b = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
        for _ in 0..3 {
            let la = step(&mut a, &set);
            let lb = step(&mut b, &set);
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (trainer, cfg, _) = tiny_trainer(StrategyKind::Zero);
        let bytes = Checkpoint::from_trainer(&trainer, &cfg).to_bytes().unwrap();
        let mut bad_version = bytes.clone();
        bad_version[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Format(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));
    }
}
