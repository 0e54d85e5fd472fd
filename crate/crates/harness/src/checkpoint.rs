//! Versioned, checksummed training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length, SHA-256
//! of the payload, payload. The payload is a length-prefixed JSON header
//! followed by every network tensor (weights and spectral-norm vectors) and
//! both optimizers' moment estimates, all little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segtrans_autograd::{Amsgrad, EntryKind, Moments, ParamKey, Tensor};
use segtrans_core::{Architecture, LossWeights, Model, OptimizerConfig, Trainer, VariantKind};

use crate::error::{io_err, CheckpointError, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Bookkeeping carried alongside the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub seed: u64,
    /// Last completed epoch (0 before any training).
    pub epoch: usize,
    /// Absence examples consumed so far; absence batches cycle independently.
    pub absence_cursor: u64,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub config_json: Option<String>,
    pub data_digest: Option<String>,
}

impl RunProgress {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            absence_cursor: 0,
            best_val_dice: None,
            best_epoch: None,
            config_json: None,
            data_digest: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub trainer: Trainer<f32>,
    pub optimizer: OptimizerConfig,
    pub progress: RunProgress,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: VariantKind,
    architecture: Architecture,
    weights: LossWeights,
    optimizer: OptimizerConfig,
    step: u64,
    rng: RngState,
    progress: RunProgress,
    dtype: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        self.0.reserve(4 * v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("payload ends before byte {}", self.pos + n)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], CheckpointError> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn floats(&mut self) -> std::result::Result<Vec<f32>, CheckpointError> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

fn write_optimizer(w: &mut Writer, opt: &Amsgrad<f32>) {
    w.u64(opt.state.len() as u64);
    for (key, m) in &opt.state {
        w.u32(key.store);
        w.u32(key.index);
        w.u64(m.step);
        w.floats(&m.m);
        w.floats(&m.v);
        w.floats(&m.v_max);
    }
}

fn read_optimizer(r: &mut Reader, opt: &mut Amsgrad<f32>) -> std::result::Result<(), CheckpointError> {
    let n = r.u64()?;
    opt.state.clear();
    for _ in 0..n {
        let key = ParamKey {
            store: r.u32()?,
            index: r.u32()?,
        };
        let step = r.u64()?;
        let (m, v, v_max) = (r.floats()?, r.floats()?, r.floats()?);
        if m.len() != v.len() || m.len() != v_max.len() {
            return Err(CheckpointError::Corrupt(format!("optimizer moments for {key:?} disagree in length")));
        }
        opt.state.insert(key, Moments { step, m, v, v_max });
    }
    Ok(())
}

fn encode(state: &TrainingState) -> Vec<u8> {
    let t = &state.trainer;
    let header = Header {
        variant: t.model.variant,
        architecture: t.model.arch.clone(),
        weights: t.weights,
        optimizer: state.optimizer,
        step: t.step,
        rng: RngState::capture(&t.rng),
        progress: state.progress.clone(),
        dtype: "f32".into(),
    };
    let mut w = Writer(Vec::new());
    w.bytes(&serde_json::to_vec(&header).expect("header serializes"));
    let nets = t.model.nets();
    w.u32(nets.len() as u32);
    for net in nets {
        let store = &net.store;
        w.u32(store.id());
        w.bytes(store.name().as_bytes());
        w.u32(store.entries().len() as u32);
        for e in store.entries() {
            w.bytes(e.name.as_bytes());
            w.u8(matches!(e.kind, EntryKind::Buffer) as u8);
            w.u32(e.tensor.shape().len() as u32);
            for &d in e.tensor.shape() {
                w.u64(d as u64);
            }
            w.floats(e.tensor.data());
        }
    }
    write_optimizer(&mut w, &t.opt_generator);
    write_optimizer(&mut w, &t.opt_discriminator);
    w.0
}

fn decode(payload: &[u8]) -> std::result::Result<TrainingState, CheckpointError> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let header: Header = serde_json::from_slice(r.bytes()?)
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(CheckpointError::Mismatch(format!("dtype {}", header.dtype)));
    }
    let model = Model::<f32>::new(header.variant, header.architecture, 0)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let mut trainer = Trainer::new(model, header.weights, header.optimizer, 0)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

    let n_nets = r.u32()? as usize;
    let mut nets = trainer.model.nets_mut();
    if n_nets != nets.len() {
        return Err(CheckpointError::Mismatch(format!("{n_nets} networks stored, model has {}", nets.len())));
    }
    for net in nets.iter_mut() {
        let store = &mut net.store;
        let id = r.u32()?;
        let name = String::from_utf8_lossy(r.bytes()?).into_owned();
        if id != store.id() || name != store.name() {
            return Err(CheckpointError::Mismatch(format!(
                "network {name} ({id}) where {} ({}) was expected",
                store.name(),
                store.id()
            )));
        }
        let n = r.u32()? as usize;
        if n != store.entries().len() {
            return Err(CheckpointError::Mismatch(format!("{name}: {n} tensors stored, {} expected", store.entries().len())));
        }
        for entry in store.entries_mut() {
            let ename = String::from_utf8_lossy(r.bytes()?).into_owned();
            let buffer = r.u8()? == 1;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let data = r.floats()?;
            if ename != entry.name || buffer != matches!(entry.kind, EntryKind::Buffer) || shape != entry.tensor.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: tensor {ename} {shape:?} where {} {:?} was expected",
                    entry.name,
                    entry.tensor.shape()
                )));
            }
            entry.tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
    }
    drop(nets);
    read_optimizer(&mut r, &mut trainer.opt_generator)?;
    read_optimizer(&mut r, &mut trainer.opt_discriminator)?;
    if r.pos != payload.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
    }
    trainer.rng = header.rng.restore();
    trainer.step = header.step;
    Ok(TrainingState {
        trainer,
        optimizer: header.optimizer,
        progress: header.progress,
    })
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_checkpoint(state: &TrainingState, path: &Path) -> Result<()> {
    let payload = encode(state);
    let mut out = Vec::with_capacity(PREAMBLE + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainingState> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fail = |source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(CheckpointError::BadMagic));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }));
    }
    if bytes.len() < PREAMBLE {
        return Err(fail(CheckpointError::Truncated {
            expected: PREAMBLE as u64,
            found: bytes.len() as u64,
        }));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = PREAMBLE as u64 + len;
    if bytes.len() as u64 != expected {
        return Err(fail(CheckpointError::Truncated {
            expected,
            found: bytes.len() as u64,
        }));
    }
    let payload = &bytes[PREAMBLE..];
    if Sha256::digest(payload)[..] != bytes[20..52] {
        return Err(fail(CheckpointError::Corrupt("payload digest mismatch".into())));
    }
    decode(payload).map_err(fail)
}
