//! Self-describing binary container for one side of a split. See
//! `docs/formats.md` for the byte layout.

use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, LabelBatch, LabelKind, LossKind, MetricKind, Target, TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::models::ImageDims;
use crate::wire::Cursor;

pub const DATASET_MAGIC: &[u8; 4] = b"UEGD";
pub const DATASET_VERSION: u32 = 1;

/// Contents of a dataset file. Images are stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedDataset {
    pub seed: u64,
    pub dims: ImageDims,
    pub tasks: Vec<TaskSpec>,
    pub scene_indices: Vec<u64>,
    pub images: Vec<f32>,
    pub labels: Vec<LabelBatch>,
}

fn kind_code(k: LabelKind) -> (u8, u32) {
    match k {
        LabelKind::ImageClass { classes } => (0, classes as u32),
        LabelKind::PixelClass { classes } => (1, classes as u32),
        LabelKind::ImageRegression { dim } => (2, dim as u32),
        LabelKind::PixelRegression => (3, 0),
    }
}

fn loss_code(l: LossKind) -> u8 {
    match l {
        LossKind::CrossEntropy => 0,
        LossKind::Brier => 1,
        LossKind::SquaredError => 2,
    }
}

fn metric_code(m: MetricKind) -> u8 {
    match m {
        MetricKind::Accuracy => 0,
        MetricKind::MeanIoU => 1,
        MetricKind::Mae => 2,
        MetricKind::Mse => 3,
    }
}

/// Serializes `data` (rendered for `tasks`) into the container format.
pub fn encode_dataset(tasks: &[TaskSpec], data: &Dataset, seed: u64) -> Vec<u8> {
    let dims = data.dims();
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for v in [dims.channels, dims.height, dims.width, data.len(), tasks.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in tasks {
        let (kind, param) = kind_code(t.label_kind);
        out.extend_from_slice(&t.id.0.to_le_bytes());
        out.push(u8::from(t.seen));
        out.push(kind);
        out.extend_from_slice(&param.to_le_bytes());
        out.push(loss_code(t.loss));
        out.push(metric_code(t.metric));
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
    }
    for i in &data.scene_indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for v in data.images.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for t in tasks {
        match &data.labels[t.id.0 as usize] {
            LabelBatch::Class(v) | LabelBatch::PixelClass(v) => {
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                for y in v {
                    out.extend_from_slice(&(*y as u32).to_le_bytes());
                }
            }
            LabelBatch::Regression(v) | LabelBatch::PixelRegression(v) => {
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                for y in v {
                    out.extend_from_slice(&(*y as f32).to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ExportedDataset> {
    if bytes.len() < 12 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::CorruptFile("not a dataset container".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::CorruptFile("dataset checksum mismatch".into()));
    }
    let mut c = Cursor::new(&body[8..]);
    let seed = c.u64()?;
    let dims = ImageDims::new(c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let count = c.u32()? as usize;
    let num_tasks = c.u32()? as usize;
    let mut tasks = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let id = TaskId(c.u32()?);
        let seen = c.u8()? != 0;
        let kind = c.u8()?;
        let param = c.u32()?;
        let loss = c.u8()?;
        let metric = c.u8()?;
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::CorruptFile("task name is not UTF-8".into()))?;
        let target = Target::SEEN
            .iter()
            .chain(&Target::UNSEEN)
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))?;
        let spec = TaskSpec::new(id, *target, seen);
        if kind_code(spec.label_kind) != (kind, param) || loss_code(spec.loss) != loss || metric_code(spec.metric) != metric
        {
            return Err(Error::CorruptFile(format!("task table entry for {name} is inconsistent")));
        }
        tasks.push(spec);
    }
    let scene_indices = (0..count).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let images = (0..count * dims.len()).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    let mut labels = Vec::with_capacity(num_tasks);
    for t in &tasks {
        let n = c.u64()? as usize;
        if n > body.len() {
            return Err(Error::CorruptFile("label block length out of range".into()));
        }
        let block = match t.label_kind {
            LabelKind::ImageClass { .. } => {
                LabelBatch::Class((0..n).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?)
            }
            LabelKind::PixelClass { .. } => {
                LabelBatch::PixelClass((0..n).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?)
            }
            LabelKind::ImageRegression { .. } => {
                LabelBatch::Regression((0..n).map(|_| c.f32().map(f64::from)).collect::<Result<_>>()?)
            }
            LabelKind::PixelRegression => {
                LabelBatch::PixelRegression((0..n).map(|_| c.f32().map(f64::from)).collect::<Result<_>>()?)
            }
        };
        labels.push(block);
    }
    if c.remaining() != 0 {
        return Err(Error::CorruptFile("trailing bytes after label blocks".into()));
    }
    Ok(ExportedDataset {
        seed,
        dims,
        tasks,
        scene_indices,
        images,
        labels,
    })
}

pub fn write_dataset(path: &Path, tasks: &[TaskSpec], data: &Dataset, seed: u64) -> Result<()> {
    let bytes = encode_dataset(tasks, data, seed);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<ExportedDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
