//! Dataset persistence: a binary container of identity records, landmark
//! tracks and stacked tensor blocks, closed by a SHA-256 digest, plus a
//! human-readable manifest sidecar.

use crate::config::ModelConfig;
use crate::error::{AlignError, Result};
use crate::maps::{LandmarkPoint, LandmarkSet};
use crate::synth::{Clip, Dataset, IdentityParams, IntensityProfile};
use crate::tensor::Tensor4;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"RNDS";
const VERSION: u32 = 1;

fn w_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
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

/// Stack per-frame `(1,c,h,w)` tensors into one `(t,c,h,w)` block.
fn stack_frames(frames: &[Tensor4]) -> Tensor4 {
    let d = frames[0].dims();
    let mut out = Tensor4::zeros(frames.len(), d.c, d.h, d.w);
    let plane = d.c * d.h * d.w;
    for (t, f) in frames.iter().enumerate() {
        out.data_mut()[t * plane..(t + 1) * plane].copy_from_slice(f.data());
    }
    out
}

fn unstack_frames(stacked: &Tensor4) -> Vec<Tensor4> {
    let d = stacked.dims();
    let plane = d.c * d.h * d.w;
    (0..d.n)
        .map(|t| {
            Tensor4::from_vec(
                1,
                d.c,
                d.h,
                d.w,
                stacked.data()[t * plane..(t + 1) * plane].to_vec(),
            )
            .expect("plane length")
        })
        .collect()
}

fn write_landmarks<W: Write>(w: &mut W, lms: &LandmarkSet) -> Result<()> {
    w_u64(w, lms.points.len() as u64)?;
    for p in &lms.points {
        w_u64(w, p.id as u64)?;
        w_f64(w, p.x)?;
        w_f64(w, p.y)?;
    }
    Ok(())
}

fn read_landmarks<R: Read>(r: &mut R) -> Result<LandmarkSet> {
    let n = r_u64(r)? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r_u64(r)? as u16;
        let x = r_f64(r)?;
        let y = r_f64(r)?;
        points.push(LandmarkPoint {
            id,
            x,
            y,
            low_confidence: false,
        });
    }
    Ok(LandmarkSet { points })
}

/// Serialize the dataset: header, identities, clips (landmark records plus
/// frame/map tensor blocks), then the SHA-256 of everything before it.
pub fn write_dataset(ds: &Dataset, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(DATASET_MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    let t = ds.clips.first().map(|c| c.len()).unwrap_or(0);
    for v in [
        cfg.input_size as u64,
        t as u64,
        cfg.c_d as u64,
        cfg.c_r as u64,
        ds.master_seed,
        ds.identities.len() as u64,
        ds.clips.len() as u64,
    ] {
        w_u64(&mut buf, v)?;
    }
    for id in &ds.identities {
        w_u64(&mut buf, id.id)?;
        w_u64(&mut buf, id.shape_offset.len() as u64)?;
        for &(dx, dy) in &id.shape_offset {
            w_f64(&mut buf, dx)?;
            w_f64(&mut buf, dy)?;
        }
        w_u64(&mut buf, id.texture_seed)?;
        for v in [
            id.intensity_profile.face,
            id.intensity_profile.eye,
            id.intensity_profile.mouth,
            id.intensity_profile.nose,
        ] {
            w_f64(&mut buf, v)?;
        }
    }
    for clip in &ds.clips {
        w_u64(&mut buf, clip.id)?;
        w_u64(&mut buf, clip.identity)?;
        w_u64(&mut buf, clip.len() as u64)?;
        for lms in &clip.landmarks {
            write_landmarks(&mut buf, lms)?;
        }
        stack_frames(&clip.frames).write_block(&mut buf)?;
        stack_frames(&clip.gt_binary).write_block(&mut buf)?;
        stack_frames(&clip.gt_heat).write_block(&mut buf)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf)?;
    write_manifest(ds, cfg, t, path)?;
    Ok(())
}

fn write_manifest(ds: &Dataset, cfg: &ModelConfig, t: usize, path: &Path) -> Result<()> {
    let mut m = String::new();
    m.push_str(&format!("master_seed={}\n", ds.master_seed));
    m.push_str(&format!("t={t}\n"));
    m.push_str(&format!("c_d={}\n", cfg.c_d));
    m.push_str(&format!("c_r={}\n", cfg.c_r));
    m.push_str(&format!("input_size={}\n", cfg.input_size));
    m.push_str(&format!("identities={}\n", ds.identities.len()));
    m.push_str(&format!("clips={}\n", ds.clips.len()));
    for id in &ds.identities {
        let count = ds.clips.iter().filter(|c| c.identity == id.id).count();
        m.push_str(&format!("identity.{}.clips={count}\n", id.id));
    }
    let manifest_path = path.with_extension("manifest.txt");
    std::fs::write(manifest_path, m)?;
    Ok(())
}

/// Load a dataset, verifying magic, trailing digest, and that the stored
/// geometry matches the supplied model configuration.
pub fn read_dataset(path: &Path, cfg: &ModelConfig) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 36 {
        return Err(AlignError::integrity("dataset file truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != tail {
        return Err(AlignError::integrity("dataset digest mismatch"));
    }
    let mut r = body;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(AlignError::integrity("bad dataset magic"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    if u32::from_le_bytes(vb) != VERSION {
        return Err(AlignError::integrity("unsupported dataset version"));
    }
    let size = r_u64(&mut r)? as usize;
    let t = r_u64(&mut r)? as usize;
    let c_d = r_u64(&mut r)? as usize;
    let c_r = r_u64(&mut r)? as usize;
    let master_seed = r_u64(&mut r)?;
    let n_ids = r_u64(&mut r)? as usize;
    let n_clips = r_u64(&mut r)? as usize;
    if size != cfg.input_size || c_d != cfg.c_d || c_r != cfg.c_r {
        return Err(AlignError::config(format!(
            "dataset geometry (size={size}, c_d={c_d}, c_r={c_r}) does not match \
             config (size={}, c_d={}, c_r={})",
            cfg.input_size, cfg.c_d, cfg.c_r
        )));
    }
    let mut identities = Vec::with_capacity(n_ids);
    for _ in 0..n_ids {
        let id = r_u64(&mut r)?;
        let n_off = r_u64(&mut r)? as usize;
        let mut shape_offset = Vec::with_capacity(n_off);
        for _ in 0..n_off {
            let dx = r_f64(&mut r)?;
            let dy = r_f64(&mut r)?;
            shape_offset.push((dx, dy));
        }
        let texture_seed = r_u64(&mut r)?;
        let face = r_f64(&mut r)?;
        let eye = r_f64(&mut r)?;
        let mouth = r_f64(&mut r)?;
        let nose = r_f64(&mut r)?;
        identities.push(IdentityParams {
            id,
            shape_offset,
            texture_seed,
            intensity_profile: IntensityProfile {
                face,
                eye,
                mouth,
                nose,
            },
        });
    }
    let mut clips = Vec::with_capacity(n_clips);
    for _ in 0..n_clips {
        let id = r_u64(&mut r)?;
        let identity = r_u64(&mut r)?;
        let clip_t = r_u64(&mut r)? as usize;
        if clip_t != t {
            return Err(AlignError::integrity("clip length differs from header"));
        }
        let mut landmarks = Vec::with_capacity(clip_t);
        for _ in 0..clip_t {
            landmarks.push(read_landmarks(&mut r)?);
        }
        let frames = unstack_frames(&Tensor4::read_block(&mut r)?);
        let gt_binary = unstack_frames(&Tensor4::read_block(&mut r)?);
        let gt_heat = unstack_frames(&Tensor4::read_block(&mut r)?);
        clips.push(Clip {
            id,
            identity,
            frames,
            landmarks,
            gt_binary,
            gt_heat,
        });
    }
    Ok(Dataset {
        master_seed,
        identities,
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::synth::generate_dataset;
    use tempfile::tempdir;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.model.input_size = 32;
        cfg.model.t = 2;
        cfg
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg, 2, 2, 7, 0).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.rnds");
        write_dataset(&ds, &cfg.model, &path).unwrap();
        let back = read_dataset(&path, &cfg.model).unwrap();
        assert_eq!(ds, back);
        assert!(path.with_extension("manifest.txt").exists());
        let manifest = std::fs::read_to_string(path.with_extension("manifest.txt")).unwrap();
        assert!(manifest.contains("identities=2"));
        assert!(manifest.contains("master_seed=7"));
    }

    #[test]
    fn wrong_geometry_is_a_config_error() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg, 1, 1, 3, 0).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.rnds");
        write_dataset(&ds, &cfg.model, &path).unwrap();
        let mut other = cfg.clone();
        other.model.c_r = 9;
        other.model.block_channels = cfg.model.block_channels.clone();
        let err = read_dataset(&path, &other.model).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn corrupt_digest_is_rejected() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg, 1, 1, 3, 0).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.rnds");
        write_dataset(&ds, &cfg.model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&path, &cfg.model).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn file_size_matches_record_arithmetic() {
        let mut cfg = Config::default();
        cfg.model.t = 10;
        let n_clips = 10usize;
        let ds = generate_dataset(&cfg, 2, 5, 11, 0).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("size.rnds");
        write_dataset(&ds, &cfg.model, &path).unwrap();
        let actual = std::fs::metadata(&path).unwrap().len() as usize;

        // independent size arithmetic
        let t = 10usize;
        let hw = 64usize * 64;
        let tensor_payload = n_clips * t * (3 + 7 + 18) * hw * 8;
        let block_overhead = n_clips * 3 * (4 + 4 * 8); // magic + dims per block
        let n_points = 7 + 18;
        let landmark_records = n_clips * t * (8 + n_points * 24);
        let clip_headers = n_clips * 3 * 8;
        let identity_records = 2 * (8 + 8 + 25 * 16 + 8 + 4 * 8);
        let header = 4 + 4 + 7 * 8;
        let digest = 32;
        let expected = header
            + identity_records
            + clip_headers
            + landmark_records
            + tensor_payload
            + block_overhead
            + digest;
        assert_eq!(actual, expected);
        // and the dominant term is the page of tensor data the estimate names
        assert!(tensor_payload == 10 * 10 * (3 + 7 + 18) * 64 * 64 * 8);
    }
}
