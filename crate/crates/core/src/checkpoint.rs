//! GDCK: the checkpoint format.
//!
//! Layout (little-endian):
//!   magic          4 bytes "GDCK"
//!   version        u32 (1)
//!   config digest  8 bytes (FNV-1a of the model config JSON)
//!   step           u64
//!   rng state      4 * u64
//!   cursor         u64       epoch cursor into the shuffled order
//!   order len      u64       sample order of the current epoch
//!   order          len * u64
//!   param count    u32
//!   per parameter: name (u32 len + utf8), value, adam m, adam v
//!                  (each tensor a GDTF record)
//!
//! Every field round-trips bit-exactly, so a resumed run continues the
//! exact trajectory of an uninterrupted one.

use std::io::{Read, Write};
use std::path::Path;

use crate::digest;
use crate::error::{Error, Result};
use crate::gdtf;
use crate::net::{ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"GDCK";
pub const VERSION: u32 = 1;

pub fn config_digest(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("model config serialises");
    let mut d = digest::Digest::new();
    d.update(json.as_bytes());
    d.finish()
}

pub fn save_checkpoint(path: &Path, state: &TrainState, model_cfg: &ModelConfig) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest(model_cfg).to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    for w in state.rng.state() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&(state.cursor as u64).to_le_bytes());
    buf.extend_from_slice(&(state.order.len() as u64).to_le_bytes());
    for &id in &state.order {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    buf.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for i in 0..state.params.len() {
        let name = state.params.name(i).as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        gdtf::encode_tensor(&mut buf, state.params.tensor(i));
        gdtf::encode_tensor(&mut buf, &state.m[i]);
        gdtf::encode_tensor(&mut buf, &state.v[i]);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let ctx = path.display().to_string();
    let corrupt = |reason: &str| Error::Corrupt {
        path: ctx.clone(),
        reason: reason.to_string(),
    };
    let need = |off: usize, n: usize| -> Result<()> {
        if off + n > bytes.len() {
            Err(Error::Corrupt {
                path: ctx.clone(),
                reason: "truncated checkpoint".to_string(),
            })
        } else {
            Ok(())
        }
    };
    let mut off = 0usize;
    need(off, 8)?;
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    off = 8;
    need(off, 8 + 8 + 32 + 16)?;
    let cfg_digest = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    off += 8;
    let step = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    off += 8;
    let mut rng_state = [0u64; 4];
    for w in rng_state.iter_mut() {
        *w = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
    }
    let cursor = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    let order_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    need(off, order_len * 8)?;
    let mut order = Vec::with_capacity(order_len);
    for i in 0..order_len {
        order.push(u64::from_le_bytes(
            bytes[off + i * 8..off + i * 8 + 8].try_into().unwrap(),
        ));
    }
    off += order_len * 8;
    need(off, 4)?;
    let count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;

    let mut params = ParamSet::new();
    let mut m: Vec<Tensor<f32>> = Vec::with_capacity(count);
    let mut v: Vec<Tensor<f32>> = Vec::with_capacity(count);
    for _ in 0..count {
        need(off, 4)?;
        let nlen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, nlen)?;
        let name = std::str::from_utf8(&bytes[off..off + nlen])
            .map_err(|_| corrupt("invalid parameter name"))?
            .to_string();
        off += nlen;
        let value: Tensor<f32> = gdtf::decode_tensor(&bytes, &mut off, &ctx)?;
        let mi: Tensor<f32> = gdtf::decode_tensor(&bytes, &mut off, &ctx)?;
        let vi: Tensor<f32> = gdtf::decode_tensor(&bytes, &mut off, &ctx)?;
        if mi.shape() != value.shape() || vi.shape() != value.shape() {
            return Err(corrupt(&format!("moment shape mismatch for {name}")));
        }
        params.add(name, value);
        m.push(mi);
        v.push(vi);
    }
    if off != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(TrainState {
        params,
        m,
        v,
        step,
        rng: Rng::from_state(rng_state),
        cursor,
        order,
        config_digest: cfg_digest,
    })
}

/// Check a loaded state against the architecture implied by `model_cfg`;
/// names the first offending tensor on mismatch.
pub fn validate_shapes(state: &TrainState, model_cfg: &ModelConfig) -> Result<()> {
    let expected: ParamSet<f32> = crate::net::init_params(model_cfg, 0);
    if expected.len() != state.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            state.params.len(),
            expected.len()
        )));
    }
    for i in 0..expected.len() {
        let name = expected.name(i);
        let found = state
            .params
            .get(name)
            .ok_or_else(|| Error::Missing(format!("tensor `{name}` in checkpoint")))?;
        if found.shape() != expected.tensor(i).shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                found: found.shape().to_vec(),
                expected: expected.tensor(i).shape().to_vec(),
            });
        }
    }
    Ok(())
}
