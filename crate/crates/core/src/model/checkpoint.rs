//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DPCKPT01"
//! u32 header length, header JSON (config and fingerprints)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rows, u32 cols, rows*cols f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::delay_codec::DelaySchedule;
use crate::error::{Error, Result};
use crate::tokenizer::FieldVocabulary;

const MAGIC: &[u8; 8] = b"DPCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_fingerprint: u64,
    pub schedule_fingerprint: u64,
    /// Optimizer steps taken before saving.
    pub train_steps: usize,
}

impl CheckpointHeader {
    pub fn for_model(model: &Model, train_steps: usize) -> Self {
        Self {
            config: model.config.clone(),
            vocab_fingerprint: model.config.vocab.fingerprint(),
            schedule_fingerprint: model.config.schedule.fingerprint(),
            train_steps,
        }
    }

    /// Fails unless the checkpoint was trained for `schedule` and `vocab`.
    pub fn expect(&self, schedule: &DelaySchedule, vocab: &FieldVocabulary) -> Result<()> {
        if self.schedule_fingerprint != schedule.fingerprint() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint schedule {} differs from requested {schedule}",
                self.config.schedule
            )));
        }
        if self.vocab_fingerprint != vocab.fingerprint() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint vocabulary {:?} differs from requested {:?}",
                self.config.vocab.sizes, vocab.sizes
            )));
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(model: &Model, train_steps: usize, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader::for_model(model, train_steps))?;
    w.write_all(MAGIC)?;
    w.write_all(&len_u32(header.len())?.to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = model.params.named();
    w.write_all(&len_u32(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len_u32(t.rows)?.to_le_bytes())?;
        w.write_all(&len_u32(t.cols)?.to_le_bytes())?;
        for &x in &t.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadFormat("not a checkpoint file".into()));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    header.expect(&header.config.schedule, &header.config.vocab)?;

    let mut params = Params::zeros(&header.config);
    let count = read_u32(&mut r)? as usize;
    let mut slots = params.named_mut();
    if count != slots.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{count} tensors stored, configuration needs {}",
            slots.len()
        )));
    }
    for (expected, t) in slots.iter_mut() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::BadFormat("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if name != *expected || rows != t.rows || cols != t.cols {
            return Err(Error::CheckpointMismatch(format!(
                "found tensor {name} [{rows}x{cols}], expected {expected} [{}x{}]",
                t.rows, t.cols
            )));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)?;
        for (x, b) in t.data.iter_mut().zip(buf.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64;
        }
    }
    drop(slots);
    let model = Model::from_params(header.config.clone(), params)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &Model, train_steps: usize) -> Result<()> {
    write_checkpoint(model, train_steps, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::BadFormat(format!("length {n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            d_ff: 16,
            max_steps: 32,
            ..ModelConfig::default()
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn round_trip_is_stable() {
        let m = model();
        let mut a = Vec::new();
        write_checkpoint(&m, 7, &mut a).unwrap();
        let (loaded, header) = read_checkpoint(&a[..]).unwrap();
        assert_eq!(header.train_steps, 7);
        for (x, y) in m.params.flat().iter().zip(loaded.params.flat()) {
            assert_eq!(*x as f32, y as f32);
        }
        let mut b = Vec::new();
        write_checkpoint(&loaded, 7, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), 0, &mut buf).unwrap();
        let (_, header) = read_checkpoint(&buf[..]).unwrap();
        let err = header.expect(&DelaySchedule::zero(), &FieldVocabulary::default());
        assert!(matches!(err, Err(Error::CheckpointMismatch(_))));
        assert!(header.expect(&DelaySchedule::uniform(), &FieldVocabulary::default()).is_ok());
    }

    #[test]
    fn truncated_file_fails() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), 0, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
        assert!(matches!(read_checkpoint(&b"garbage!...."[..]), Err(Error::BadFormat(_))));
    }
}
