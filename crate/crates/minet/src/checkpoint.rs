//! Binary weight files: magic, version, a config snapshot, every parameter
//! as name + shape + float32 little-endian payload in `named_params` order,
//! then an optional optimizer section. Writes go to a temp file renamed
//! into place so a crash never leaves a half-written checkpoint.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{MINetConfig, MINetParams};
use crate::tensor::{shape_string, Scalar, Shape, Tensor};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MINW1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_f32_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in &t.data {
        out.extend_from_slice(&(v.to_f64s() as f32).to_le_bytes());
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &MINetParams<T>,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    let named = params.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = params.config.to_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in &named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32_payload(&mut out, tensor);
    }
    match adam {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.t.to_le_bytes());
            for v in [state.beta1, state.beta2, state.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for m in &state.m {
                push_f32_payload(&mut out, m);
            }
            for v in &state.v {
                push_f32_payload(&mut out, v);
            }
        }
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_payload<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

/// Reads a checkpoint into a freshly constructed model of the stored
/// configuration. Stored float32 values are widened into `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MINetParams<T>, Option<AdamState<T>>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = cur.u32("config length")? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len, "config")?)
        .map_err(|_| Error::Checkpoint("config snapshot is not utf-8".into()))?;
    let config = MINetConfig::from_text(config_text)?;

    // weights are fully overwritten below; the rng only shapes the skeleton
    let mut params: MINetParams<T> =
        MINetParams::new(&mut ChaCha8Rng::seed_from_u64(0), config)?;
    let mut named = params.named_params_mut();

    let count = cur.u32("parameter count")? as usize;
    if count != named.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {count} parameters, config implies {}",
            named.len()
        )));
    }
    for (expect_name, tensor) in named.iter_mut() {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        if name != expect_name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: file has {name:?}, expected {expect_name:?}"
            )));
        }
        let mut shape: Shape = [0; 4];
        for d in shape.iter_mut() {
            *d = cur.u32("shape")? as usize;
        }
        if shape != tensor.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {} does not match {}",
                shape_string(&shape),
                shape_string(&tensor.shape)
            )));
        }
        tensor.data = cur.f32_payload(tensor.numel(), name)?;
    }
    drop(named);

    let adam = match cur.take(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let t = cur.u64("optimizer step")?;
            let beta1 = cur.f64("beta1")?;
            let beta2 = cur.f64("beta2")?;
            let eps = cur.f64("eps")?;
            let shapes: Vec<Shape> = params.named_params().iter().map(|(_, t)| t.shape).collect();
            let mut read_moments = |what: &str| -> Result<Vec<Tensor<T>>> {
                shapes
                    .iter()
                    .map(|&s| {
                        let data = cur.f32_payload(crate::tensor::shape_numel(&s), what)?;
                        Tensor::from_vec(s, data)
                    })
                    .collect()
            };
            let m = read_moments("first moments")?;
            let v = read_moments("second moments")?;
            Some(AdamState {
                t,
                beta1,
                beta2,
                eps,
                m,
                v,
            })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };

    if cur.pos < bytes.len() {
        eprintln!(
            "warning: {} ignoring {} unknown trailing bytes",
            path.display(),
            bytes.len() - cur.pos
        );
    }
    Ok((params, adam))
}
