//! Training checkpoints: the baked bitstream, plus a sidecar with exact
//! `f64` parameters, soft-index logits, optimizer moments and run metadata.
//!
//! ```text
//! "VQCK" version:u16 stream_len:u64 stream meta_len:u64 meta(JSON)
//! count:u32 then per tensor: name_len:u16 name rows:u32 cols:u32 f64×(rows·cols)
//! ```

use serde::{Deserialize, Serialize};

use super::{decode, encode, CodecError};
use crate::diffcore::Matrix;
use crate::field::NeuralField;
use crate::grid::LevelData;
use crate::train::{parameters, Moments, OptimizerState, Param, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VQCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a vqad checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint tensor {0} does not fit the model")]
    Tensor(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Everything needed to resume or inspect a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field: NeuralField,
    pub train: Option<TrainConfig>,
    pub history: Vec<f64>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run description, e.g. the originating config.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    meta: serde_json::Value,
    train: Option<TrainConfig>,
    history: Vec<f64>,
    background: [f64; 3],
    optimizer_steps: Option<u64>,
    /// Update count of each parameter's moments.
    moment_steps: Vec<(String, u64)>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(ck: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let stream = encode(&ck.field.baked().map_err(CodecError::from)?)?;
    let sidecar = Sidecar {
        meta: ck.meta.clone(),
        train: ck.train.clone(),
        history: ck.history.clone(),
        background: ck.field.render.background,
        optimizer_steps: ck.optimizer.as_ref().map(|o| o.steps),
        moment_steps: ck
            .optimizer
            .iter()
            .flat_map(|o| o.moments.iter().map(|(n, m)| (n.clone(), m.t)))
            .collect(),
    };
    let meta = serde_json::to_vec(&sidecar)?;

    let mut tensors: Vec<(String, &Matrix)> = parameters(&ck.field)
        .into_iter()
        .map(|p| (p.name(), p.get(&ck.field)))
        .collect();
    if let Some(o) = &ck.optimizer {
        for (n, m) in &o.moments {
            tensors.push((format!("adam.{n}.m"), &m.m));
            tensors.push((format!("adam.{n}.v"), &m.v));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    out.extend_from_slice(&stream);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        put_tensor(&mut out, &name, m);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("sized"))
    }

    fn len64(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(u64::from_le_bytes(self.array()?)).map_err(|_| CheckpointError::Truncated)
    }
}

pub fn load(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(c.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let n = c.len64()?;
    let mut field = decode(c.take(n)?)?;
    let n = c.len64()?;
    let sidecar: Sidecar = serde_json::from_slice(c.take(n)?)?;
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.array()?) as usize;
        let name = String::from_utf8_lossy(c.take(len)?).into_owned();
        let rows = u32::from_le_bytes(c.array()?) as usize;
        let cols = u32::from_le_bytes(c.array()?) as usize;
        let raw = c.take(
            rows.checked_mul(cols)
                .and_then(|v| v.checked_mul(8))
                .ok_or(CheckpointError::Truncated)?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    field.render.background = sidecar.background;
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m);

    // Soft indices replace the baked ones they were stored as.
    if find("level0.logits").is_some() {
        let data = (0..field.levels())
            .map(|l| {
                let name = Param::Logits(l).name();
                match find(&name) {
                    Some(m)
                        if m.rows() == field.pyramid.vertex_count(l)
                            && m.cols() == field.codebooks[l].len() =>
                    {
                        Ok(LevelData::SoftIndices(m.clone()))
                    }
                    _ => Err(CheckpointError::Tensor(name)),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        field.pyramid.replace_data(data).map_err(CodecError::from)?;
    }
    for p in parameters(&field) {
        let name = p.name();
        if let Some(m) = find(&name) {
            let slot = p.get_mut(&mut field);
            if slot.shape() != m.shape() {
                return Err(CheckpointError::Tensor(name));
            }
            *slot = m.clone();
        }
    }

    let optimizer = match sidecar.optimizer_steps {
        None => None,
        Some(steps) => {
            let mut moments = Vec::new();
            for (name, t) in &sidecar.moment_steps {
                let (Some(m), Some(v)) = (
                    find(&format!("adam.{name}.m")),
                    find(&format!("adam.{name}.v")),
                ) else {
                    return Err(CheckpointError::Tensor(format!("adam.{name}")));
                };
                moments.push((
                    name.clone(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                        t: *t,
                    },
                ));
            }
            Some(OptimizerState { steps, moments })
        }
    };
    Ok(Checkpoint {
        field,
        train: sidecar.train,
        history: sidecar.history,
        optimizer,
        meta: sidecar.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::grid::{GridConfig, Occupancy};
    use crate::raster::Image;
    use crate::train::{TrainMode, Trainer};
    use crate::vq::VqConfig;

    #[test]
    fn roundtrip_restores_exact_training_state() {
        for mode in [
            TrainMode::Uncompressed,
            TrainMode::Vqad,
            TrainMode::RandomIndex,
        ] {
            let cfg = TrainConfig {
                mode,
                epochs: 1,
                batch_size: 32,
                hidden: 8,
                ..TrainConfig::default()
            };
            let grid = GridConfig {
                levels: 2,
                base_resolution: 2,
                feature_dim: 3,
                dim: 2,
            };
            let set = Dataset::Image(Image::from_fn(8, 8, |x, y| {
                [x as f64 / 8.0, y as f64 / 8.0, 0.5]
            }))
            .training_set();
            let field = crate::train::init_field(
                &cfg,
                set.task,
                grid,
                VqConfig { bitwidth: 2 },
                &Occupancy::Dense,
                Default::default(),
            )
            .unwrap();
            let mut t = Trainer::new(cfg.clone(), field).unwrap();
            t.run_epoch(&set).unwrap();
            let model = t.finish();
            let ck = Checkpoint {
                field: model.field.clone(),
                train: Some(cfg),
                history: model.history.clone(),
                optimizer: Some(model.optimizer.clone()),
                meta: serde_json::json!({"note": "x"}),
            };
            let bytes = save(&ck).unwrap();
            let back = load(&bytes).unwrap();
            assert_eq!(back, ck);
            assert!(matches!(
                load(&bytes[..bytes.len() - 1]),
                Err(CheckpointError::Truncated)
            ));
        }
    }
}
