//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "PKVAECKP"  u32 version  u64 header_len  header (JSON, UTF-8)
//! u32 n_arrays, then per array:
//!     u32 name_len  name  u32 ndim  u64 dims[ndim]  f32 data[prod(dims)]
//! sha256 of every preceding byte (32 bytes)
//! ```
//!
//! Array groups: `model/`, `discriminator/`, and the Adam moments under
//! `adam.model.m/`, `adam.model.v/`, `adam.discriminator.m/`,
//! `adam.discriminator.v/`, each followed by the parameter name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dc_loss::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::nn::Parameterized;
use crate::optim::Adam;
use crate::rng::{rng_for, RngState};
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"PKVAECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub train: TrainConfig,
    /// Full run configuration in its text form.
    pub config: String,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub adam_model_step: u64,
    pub adam_discriminator_step: u64,
    /// `single` when produced by the single-threaded loop.
    pub threading: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig, config_text: &str) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                architecture: state.model.arch.clone(),
                train: cfg.clone(),
                config: config_text.to_string(),
                epoch: state.epoch,
                step: state.step,
                rng: RngState::capture(&state.rng),
                adam_model_step: state.opt_model.step,
                adam_discriminator_step: state.opt_disc.step,
                threading: "single".into(),
            },
            state: state.clone(),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_array(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u64(buf, d as u64);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn moment_arrays<'a>(
    prefix: &str,
    params: &'a impl Parameterized<f32>,
    adam: &'a Adam<f32>,
) -> Vec<(String, Vec<usize>, &'a [f32])> {
    let refs = params.params();
    let mut out = Vec::new();
    for (which, buffers) in [("m", &adam.first), ("v", &adam.second)] {
        for (p, b) in refs.iter().zip(buffers) {
            out.push((format!("adam.{prefix}.{which}/{}", p.name), p.shape.clone(), b.as_slice()));
        }
    }
    out
}

fn all_arrays(state: &TrainState) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut arrays: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    for p in state.model.params() {
        arrays.push((format!("model/{}", p.name), p.shape, p.data));
    }
    for p in state.disc.params() {
        arrays.push((format!("discriminator/{}", p.name), p.shape, p.data));
    }
    arrays.extend(moment_arrays("model", &state.model, &state.opt_model));
    arrays.extend(moment_arrays("discriminator", &state.disc, &state.opt_disc));
    arrays
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&ckpt.header).expect("checkpoint header");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, header.len() as u64);
    buf.extend_from_slice(&header);
    let arrays = all_arrays(&ckpt.state);
    put_u32(&mut buf, arrays.len() as u32);
    for (name, shape, data) in arrays {
        put_array(&mut buf, &name, &shape, data);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes via a temporary file and rename, so a crash leaves either the
/// old file or the new one.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn fill(dst: &mut [f32], name: &str, shape: &[usize], arrays: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
    let (found_shape, data) = arrays
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks array `{name}`")))?;
    if found_shape != shape || data.len() != dst.len() {
        return Err(Error::Format(format!(
            "array `{name}` has shape {found_shape:?}, expected {shape:?}"
        )));
    }
    dst.copy_from_slice(&data);
    Ok(())
}

fn fill_params(
    prefix: &str,
    params: &mut impl Parameterized<f32>,
    arrays: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    for p in params.params_mut() {
        fill(p.data, &format!("{prefix}/{}", p.name), &p.shape, arrays)?;
    }
    Ok(())
}

fn fill_moments(
    prefix: &str,
    params: &impl Parameterized<f32>,
    adam: &mut Adam<f32>,
    arrays: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    let refs = params.params();
    for (which, buffers) in [("m", &mut adam.first), ("v", &mut adam.second)] {
        for (p, b) in refs.iter().zip(buffers.iter_mut()) {
            fill(b, &format!("adam.{prefix}.{which}/{}", p.name), &p.shape, arrays)?;
        }
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let n = r.u32()? as usize;
    let mut arrays = std::collections::HashMap::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("array size overflows".into()))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("array size overflows".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        arrays.insert(name, (shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }

    header
        .architecture
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    // build zero-valued containers of the right shapes, then fill them
    let mut scratch = rng_for(0, "checkpoint");
    let mut model = ModelParams::<f32>::new(&header.architecture, &mut scratch)?;
    let mut disc = DiscriminatorParams::<f32>::new(&header.architecture, &mut scratch);
    let mut opt_model = Adam::new(header.train.adam(), &model);
    let mut opt_disc = Adam::new(header.train.adam(), &disc);
    fill_params("model", &mut model, &mut arrays)?;
    fill_params("discriminator", &mut disc, &mut arrays)?;
    fill_moments("model", &model, &mut opt_model, &mut arrays)?;
    fill_moments("discriminator", &disc, &mut opt_disc, &mut arrays)?;
    if let Some(name) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array `{name}` in checkpoint")));
    }
    opt_model.step = header.adam_model_step;
    opt_disc.step = header.adam_discriminator_step;
    let state = TrainState {
        model,
        disc,
        opt_model,
        opt_disc,
        epoch: header.epoch,
        step: header.step,
        rng: header.rng.restore()?,
    };
    Ok(Checkpoint { header, state })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::tests_support::toy_state;
    use ndarray::{Array1, Array2};

    #[test]
    fn round_trip_is_bit_exact() {
        let (state, cfg) = toy_state(3);
        let ckpt = Checkpoint::from_state(&state, &cfg, "seed = 3\n");
        let bytes = to_bytes(&ckpt);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.state.model, state.model);
        assert_eq!(back.state.disc, state.disc);
        assert_eq!(back.state.opt_model, state.opt_model);
        assert_eq!(back.state.opt_disc, state.opt_disc);
        assert_eq!(back.header, ckpt.header);
        assert_eq!(to_bytes(&back), bytes);
        let m = Array1::from_elem(state.model.arch.domain_dim(), 0.3f32);
        let o = Array2::from_elem((2, state.model.arch.content_dim()), -0.2f32);
        assert_eq!(back.state.model.decode(&m, &o).unwrap(), state.model.decode(&m, &o).unwrap());
    }

    #[test]
    fn rng_position_survives() {
        use rand::Rng;
        let (mut state, cfg) = toy_state(4);
        let _: u64 = state.rng.random();
        let mut back = from_bytes(&to_bytes(&Checkpoint::from_state(&state, &cfg, ""))).unwrap();
        let a: [u64; 4] = state.rng.random();
        let b: [u64; 4] = back.state.rng.random();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let (state, cfg) = toy_state(5);
        let bytes = to_bytes(&Checkpoint::from_state(&state, &cfg, ""));
        let mut bad = bytes.clone();
        bad[20] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"nonsense"), Err(Error::Format(_))));
    }

    #[test]
    fn save_then_load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (state, cfg) = toy_state(6);
        let path = dir.path().join("nested").join("a.ckpt");
        save(&Checkpoint::from_state(&state, &cfg, "x"), &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.state, state);
        assert!(matches!(load(&dir.path().join("missing.ckpt")), Err(Error::Io { .. })));
    }
}
