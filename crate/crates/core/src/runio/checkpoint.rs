//! Versioned binary checkpoint with CRC-protected sections. See
//! `docs/formats.md` for the byte layout.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{GradVector, Layout, ParamVector, Segment};
use crate::error::{Error, Result};
use crate::metascheme::{FlatnessCache, TrainState, Trainer};
use crate::tasksuite::TaskId;
use crate::wire::Cursor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UEGC";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_META: &[u8; 4] = b"META";
const TAG_GEN: &[u8; 4] = b"GEN\0";
const TAG_SURR: &[u8; 4] = b"SURR";
const TAG_CACHE: &[u8; 4] = b"CACH";

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub task: TaskId,
    pub count: u64,
    pub mean: Vec<f64>,
}

/// Everything needed to continue a training run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cycle: u64,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub generator: ParamVector,
    pub surrogates: ParamVector,
    pub cache_phase: u64,
    pub cache: Vec<CacheEntry>,
}

fn put_params(out: &mut Vec<u8>, p: &ParamVector) {
    let segs = p.layout().segments();
    out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for s in segs {
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.rows as u32).to_le_bytes());
        out.extend_from_slice(&(s.cols as u32).to_le_bytes());
    }
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_params(c: &mut Cursor<'_>) -> Result<ParamVector> {
    let n = c.u32()? as usize;
    let mut segments = Vec::with_capacity(n.min(1 << 16));
    let mut offset = 0;
    for _ in 0..n {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::CorruptFile("segment name is not UTF-8".into()))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        segments.push(Segment {
            name,
            offset,
            rows,
            cols,
        });
        offset += rows * cols;
    }
    let layout = Layout::from_segments(segments).map_err(|e| Error::CorruptFile(e.to_string()))?;
    if c.remaining() < offset * 8 {
        return Err(Error::CorruptFile("parameter block is truncated".into()));
    }
    let values = (0..offset).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    ParamVector::new(values, Arc::new(layout)).map_err(|e| Error::CorruptFile(e.to_string()))
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    let start = out.len();
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

fn get_section<'a>(c: &mut Cursor<'a>, tag: &[u8; 4]) -> Result<&'a [u8]> {
    let head = c.take(12)?;
    if &head[..4] != tag {
        return Err(Error::CorruptFile(format!(
            "expected section {}, found {}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&head[..4])
        )));
    }
    let len = u64::from_le_bytes(head[4..].try_into().unwrap());
    if (c.remaining() as u64) < len.saturating_add(4) {
        return Err(Error::CorruptFile(format!("section {} is truncated", String::from_utf8_lossy(tag))));
    }
    let payload = c.take(len as usize)?;
    let crc = c.u32()?;
    let mut h = crc32fast::Hasher::new();
    h.update(head);
    h.update(payload);
    if h.finalize() != crc {
        return Err(Error::CorruptFile(format!(
            "checksum mismatch in section {}",
            String::from_utf8_lossy(tag)
        )));
    }
    Ok(payload)
}

fn finish(c: &Cursor<'_>, what: &str) -> Result<()> {
    if c.remaining() != 0 {
        return Err(Error::CorruptFile(format!("{} trailing bytes after {what}", c.remaining())));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            cycle: state.cycle,
            iteration: state.iteration,
            rng_seed: state.rng.get_seed(),
            rng_stream: state.rng.get_stream(),
            rng_word_pos: state.rng.get_word_pos(),
            generator: state.generator.params().clone(),
            surrogates: state.pool.params().clone(),
            cache_phase: state.cache.phase(),
            cache: state
                .cache
                .snapshot()
                .into_iter()
                .map(|(task, count, mean)| CacheEntry {
                    task,
                    count,
                    mean: mean.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());

        let mut meta = Vec::with_capacity(64);
        meta.extend_from_slice(&self.cycle.to_le_bytes());
        meta.extend_from_slice(&self.iteration.to_le_bytes());
        meta.extend_from_slice(&self.rng_seed);
        meta.extend_from_slice(&self.rng_stream.to_le_bytes());
        meta.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        put_section(&mut out, TAG_META, &meta);

        let mut gen = Vec::new();
        put_params(&mut gen, &self.generator);
        put_section(&mut out, TAG_GEN, &gen);

        let mut surr = Vec::new();
        put_params(&mut surr, &self.surrogates);
        put_section(&mut out, TAG_SURR, &surr);

        let mut cache = Vec::new();
        cache.extend_from_slice(&self.cache_phase.to_le_bytes());
        cache.extend_from_slice(&(self.cache.len() as u32).to_le_bytes());
        for e in &self.cache {
            cache.extend_from_slice(&e.task.0.to_le_bytes());
            cache.extend_from_slice(&e.count.to_le_bytes());
            cache.extend_from_slice(&(e.mean.len() as u64).to_le_bytes());
            for v in &e.mean {
                cache.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_section(&mut out, TAG_CACHE, &cache);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        if c.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::CorruptFile("not a checkpoint file".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let sections = c.u32()?;
        if sections != 4 {
            return Err(Error::CorruptFile(format!("expected 4 sections, header says {sections}")));
        }

        let mut m = Cursor::new(get_section(&mut c, TAG_META)?);
        let cycle = m.u64()?;
        let iteration = m.u64()?;
        let rng_seed: [u8; 32] = m.take(32)?.try_into().unwrap();
        let rng_stream = m.u64()?;
        let rng_word_pos = m.u128()?;
        finish(&m, "META")?;

        let mut g = Cursor::new(get_section(&mut c, TAG_GEN)?);
        let generator = get_params(&mut g)?;
        finish(&g, "GEN")?;

        let mut s = Cursor::new(get_section(&mut c, TAG_SURR)?);
        let surrogates = get_params(&mut s)?;
        finish(&s, "SURR")?;

        let mut k = Cursor::new(get_section(&mut c, TAG_CACHE)?);
        let cache_phase = k.u64()?;
        let n = k.u32()?;
        let mut cache = Vec::new();
        for _ in 0..n {
            let task = TaskId(k.u32()?);
            let count = k.u64()?;
            let len = k.u64()? as usize;
            if k.remaining() < len.saturating_mul(8) {
                return Err(Error::CorruptFile("cache entry is truncated".into()));
            }
            let mean = (0..len).map(|_| k.f64()).collect::<Result<Vec<_>>>()?;
            cache.push(CacheEntry { task, count, mean });
        }
        finish(&k, "CACHE")?;
        finish(&c, "the last section")?;

        Ok(Self {
            cycle,
            iteration,
            rng_seed,
            rng_stream,
            rng_word_pos,
            generator,
            surrogates,
            cache_phase,
            cache,
        })
    }

    /// Rebuilds a training state for `trainer`; the architecture implied by
    /// the trainer's config must match the stored segment tables.
    pub fn restore(&self, trainer: &Trainer) -> Result<TrainState> {
        let base = trainer.init_state()?;
        if **base.generator.layout() != **self.generator.layout() {
            return Err(Error::LayoutMismatch("checkpoint generator does not match the configured architecture".into()));
        }
        if **base.pool.layout() != **self.surrogates.layout() {
            return Err(Error::LayoutMismatch("checkpoint surrogates do not match the configured architecture".into()));
        }
        let gen_layout = base.generator.layout().clone();
        let generator = base
            .generator
            .with_params(ParamVector::new(self.generator.values().to_vec(), gen_layout.clone())?)?;
        let pool = base
            .pool
            .with_params(ParamVector::new(self.surrogates.values().to_vec(), base.pool.layout().clone())?)?;
        let entries = self
            .cache
            .iter()
            .map(|e| Ok((e.task, e.count, GradVector::new(e.mean.clone(), gen_layout.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        Ok(TrainState {
            generator,
            pool,
            cache: FlatnessCache::from_snapshot(self.cache_phase, entries),
            rng,
            cycle: self.cycle,
            iteration: self.iteration,
        })
    }
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a partial checkpoint.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &Checkpoint::from_state(state).encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
