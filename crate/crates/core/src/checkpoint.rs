//! Checkpoint files: the full parameter store, batchnorm running stats,
//! optimizer state, frozen loss weights and the rng position, keyed by a
//! digest of the canonical config text. Loading refuses a digest mismatch.

use crate::config::Config;
use crate::error::{AlignError, Result};
use crate::ops::norm::BnStats;
use crate::params::ParameterStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor4;
use crate::trainer::TrainerState;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"REDC";
const VERSION: u32 = 1;

fn w_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn r_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r_u64(r)? as usize;
    if n > (1 << 20) {
        return Err(AlignError::integrity("unreasonable string length"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| AlignError::integrity("invalid utf-8 in checkpoint"))
}

pub fn save_checkpoint(path: &Path, cfg: &Config, state: &TrainerState) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(CHECKPOINT_MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    let config_text = cfg.canonical_text();
    let digest = Sha256::digest(config_text.as_bytes());
    buf.write_all(&digest)?;
    w_str(&mut buf, &config_text)?;

    buf.write_all(&[state.stage])?;
    w_u64(&mut buf, state.epoch as u64)?;
    buf.write_all(&[state.lambda.is_some() as u8, state.gamma.is_some() as u8])?;
    w_f64(&mut buf, state.lambda.unwrap_or(0.0))?;
    w_f64(&mut buf, state.gamma.unwrap_or(0.0))?;
    w_f64(&mut buf, state.lr)?;
    w_f64(&mut buf, state.best_val)?;
    w_u64(&mut buf, state.stall as u64)?;
    buf.write_all(&[state.plateau_ref.is_some() as u8])?;
    w_f64(&mut buf, state.plateau_ref.unwrap_or(0.0))?;
    let (seed, pos) = state.rng.state();
    w_str(&mut buf, crate::rng::RNG_ALGORITHM)?;
    w_u64(&mut buf, seed)?;
    w_u64(&mut buf, pos)?;

    w_u64(&mut buf, state.store.len() as u64)?;
    for (name, p) in state.store.iter() {
        w_str(&mut buf, name)?;
        p.value.write_block(&mut buf)?;
    }
    w_u64(&mut buf, state.store.bn.len() as u64)?;
    for (name, stats) in &state.store.bn {
        w_str(&mut buf, name)?;
        Tensor4::from_slice_1d(&stats.mean).write_block(&mut buf)?;
        Tensor4::from_slice_1d(&stats.var).write_block(&mut buf)?;
        w_u64(&mut buf, stats.updates)?;
    }
    w_u64(&mut buf, state.momentum.len() as u64)?;
    for (name, v) in &state.momentum {
        w_str(&mut buf, name)?;
        v.write_block(&mut buf)?;
    }
    std::fs::write(path, &buf)?;
    Ok(())
}

/// Load a checkpoint; the embedded config text must hash to the stored
/// digest, and the returned [`Config`] is re-validated by parsing it.
pub fn load_checkpoint(path: &Path) -> Result<(Config, TrainerState)> {
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AlignError::integrity("bad checkpoint magic"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    if u32::from_le_bytes(vb) != VERSION {
        return Err(AlignError::integrity("unsupported checkpoint version"));
    }
    let mut stored_digest = [0u8; 32];
    r.read_exact(&mut stored_digest)?;
    let config_text = r_str(&mut r)?;
    let digest = Sha256::digest(config_text.as_bytes());
    if digest.as_slice() != stored_digest {
        return Err(AlignError::integrity("checkpoint config digest mismatch"));
    }
    let cfg = Config::parse(&config_text)?;

    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let stage = b1[0];
    let epoch = r_u64(&mut r)? as usize;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags)?;
    let lambda_raw = r_f64(&mut r)?;
    let gamma_raw = r_f64(&mut r)?;
    let lr = r_f64(&mut r)?;
    let best_val = r_f64(&mut r)?;
    let stall = r_u64(&mut r)? as usize;
    let mut pr_flag = [0u8; 1];
    r.read_exact(&mut pr_flag)?;
    let plateau_raw = r_f64(&mut r)?;
    let algo = r_str(&mut r)?;
    if algo != crate::rng::RNG_ALGORITHM {
        return Err(AlignError::integrity(format!(
            "unknown rng algorithm `{algo}` in checkpoint"
        )));
    }
    let seed = r_u64(&mut r)?;
    let pos = r_u64(&mut r)?;

    let n_params = r_u64(&mut r)? as usize;
    let mut store = ParameterStore::default();
    for _ in 0..n_params {
        let name = r_str(&mut r)?;
        let value = Tensor4::read_block(&mut r)?;
        store.insert(&name, value)?;
    }
    let n_bn = r_u64(&mut r)? as usize;
    for _ in 0..n_bn {
        let name = r_str(&mut r)?;
        let mean = Tensor4::read_block(&mut r)?;
        let var = Tensor4::read_block(&mut r)?;
        let updates = r_u64(&mut r)?;
        store.bn.insert(
            name,
            BnStats {
                mean: mean.into_data(),
                var: var.into_data(),
                updates,
            },
        );
    }
    let n_mom = r_u64(&mut r)? as usize;
    let mut momentum = BTreeMap::new();
    for _ in 0..n_mom {
        let name = r_str(&mut r)?;
        momentum.insert(name, Tensor4::read_block(&mut r)?);
    }

    Ok((
        cfg,
        TrainerState {
            store,
            momentum,
            lambda: (flags[0] == 1).then_some(lambda_raw),
            gamma: (flags[1] == 1).then_some(gamma_raw),
            stage,
            epoch,
            lr,
            best_val,
            stall,
            plateau_ref: (pr_flag[0] == 1).then_some(plateau_raw),
            rng: SeededRng::restore(seed, pos),
        },
    ))
}
