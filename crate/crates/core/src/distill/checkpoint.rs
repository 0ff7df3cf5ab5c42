//! Phase checkpoints: `"RUCK"`, u16 version, u8 phase, u64 seed, u32 sample
//! count, u32 slice count, then portable tensors for every latent vector, the
//! labels, every entropy-net parameter and every decoder parameter.
//!
//! Tensors are stored as f32, so a run that continues in memory after saving
//! reloads its own checkpoint to stay identical to a resumed run.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DistillConfig, DistillState, Phase};
use crate::error::{Error, Result};
use crate::numerics::tensor_io::{read_tensor, write_tensor};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RUCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(out: &mut W, state: &DistillState) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&[state.phase as u8])?;
    out.write_all(&state.seed.to_le_bytes())?;
    out.write_all(&(state.len() as u32).to_le_bytes())?;
    out.write_all(&(state.num_slices() as u32).to_le_bytes())?;
    for z in &state.latents {
        write_tensor(out, z)?;
    }
    let labels: Vec<f64> = state.labels.iter().map(|&y| y as f64).collect();
    write_tensor(out, &Tensor::new(vec![labels.len()], labels)?)?;
    for p in state.entropy.iter().flat_map(|n| &n.params) {
        write_tensor(out, p)?;
    }
    for p in state.decoders.iter().flat_map(|n| &n.params) {
        write_tensor(out, p)?;
    }
    Ok(())
}

/// Reads a checkpoint whose layout must agree with `cfg`.
pub fn read_checkpoint<R: Read>(r: &mut R, cfg: &DistillConfig) -> Result<DistillState> {
    let mut head = [0u8; 4 + 2 + 1 + 8 + 4 + 4];
    r.read_exact(&mut head).map_err(|_| Error::Truncated("checkpoint header"))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let phase = Phase::from_u8(head[6])?;
    let seed = u64::from_le_bytes(head[7..15].try_into().expect("8 bytes"));
    let n = u32::from_le_bytes(head[15..19].try_into().expect("4 bytes")) as usize;
    let slices = u32::from_le_bytes(head[19..23].try_into().expect("4 bytes")) as usize;

    let mut state = DistillState::new(cfg)?;
    if n != state.len() || slices != state.num_slices() || seed != cfg.seed {
        return Err(Error::Format(format!(
            "checkpoint holds {n} samples in {slices} slices (seed {seed}); config expects {} in {} (seed {})",
            state.len(),
            state.num_slices(),
            cfg.seed
        )));
    }
    let mut take = |like: &Tensor<f64>| -> Result<Tensor<f64>> {
        let t: Tensor<f64> = read_tensor(r)?;
        if t.shape() != like.shape() {
            return Err(Error::Format(format!("checkpoint tensor {:?}, expected {:?}", t.shape(), like.shape())));
        }
        Ok(t)
    };
    for z in state.latents.iter_mut() {
        *z = take(z)?;
    }
    let labels = take(&Tensor::zeros(vec![n]))?;
    state.labels = labels.data().iter().map(|&v| v as u32).collect();
    if state.labels.iter().any(|&y| y as usize >= cfg.num_classes) {
        return Err(Error::Format("checkpoint label out of range".into()));
    }
    for p in state.entropy.iter_mut().flat_map(|n| n.params.iter_mut()) {
        *p = take(p)?;
    }
    for p in state.decoders.iter_mut().flat_map(|n| n.params.iter_mut()) {
        *p = take(p)?;
    }
    state.phase = phase;
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &DistillState) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, state)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, cfg: &DistillConfig) -> Result<DistillState> {
    read_checkpoint(&mut BufReader::new(std::fs::File::open(path)?), cfg)
}
