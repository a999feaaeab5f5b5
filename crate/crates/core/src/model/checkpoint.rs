//! Binary checkpoint layout (all integers u64 little-endian):
//!
//! ```text
//! magic "NKCKPT01"
//! config_len, config JSON
//! tensor_count
//! per tensor: name_len, name (UTF-8), ndim, dims..., values as f64 LE
//! ```
//!
//! Trainable tensors come first in storage order, then
//! `bn{j}.running_mean` and `bn{j}.running_var` for every dense layer.

use std::io::{Read, Write};

use super::{init_model, ModelConfig, ModelError, ModelParams, RunningStats};
use crate::grad::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NKCKPT01";

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    put_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    put_u64(w, shape.len() as u64)?;
    for &d in shape {
        put_u64(w, d as u64)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<(), ModelError> {
    let config = serde_json::to_vec(&params.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u64(&mut w, config.len() as u64)?;
    w.write_all(&config)?;
    put_u64(&mut w, (params.tensors.len() + 2 * params.running.len()) as u64)?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_tensor(&mut w, name, t.shape(), t.data())?;
    }
    for (j, r) in params.running.iter().enumerate() {
        put_tensor(&mut w, &format!("bn{j}.running_mean"), &[r.mean.len()], &r.mean)?;
        put_tensor(&mut w, &format!("bn{j}.running_var"), &[r.var.len()], &r.var)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn u64(&mut self) -> Result<u64, ModelError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self, what: &str) -> Result<usize, ModelError> {
        let v = self.u64()?;
        if v > 1 << 32 {
            return Err(ModelError::Checkpoint(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, ModelError> {
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn tensor(&mut self) -> Result<(String, Tensor), ModelError> {
        let n = self.len("name length")?;
        let name = String::from_utf8(self.bytes(n)?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let nd = self.len("rank")?;
        let shape = (0..nd).map(|_| self.len("dimension")).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = self.bytes(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data).expect("shape from dims")))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParams, ModelError> {
    let mut r = Reader(r);
    let bad = |m: String| ModelError::Checkpoint(m);
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let n = r.len("config length")?;
    let config: ModelConfig = serde_json::from_slice(&r.bytes(n)?).map_err(|e| bad(e.to_string()))?;
    let mut params = init_model(&config)?;
    let count = r.len("tensor count")?;
    let expected = params.tensors.len() + 2 * params.running.len();
    if count != expected {
        return Err(bad(format!("expected {expected} tensors, found {count}")));
    }
    for i in 0..params.tensors.len() {
        let (name, t) = r.tensor()?;
        if name != params.names[i] || t.shape() != params.tensors[i].shape() {
            return Err(bad(format!(
                "tensor `{name}` {:?} does not match `{}` {:?}",
                t.shape(),
                params.names[i],
                params.tensors[i].shape()
            )));
        }
        params.tensors[i] = t;
    }
    for j in 0..params.running.len() {
        let width = params.running[j].mean.len();
        let mut take = |suffix: &str| -> Result<Vec<f64>, ModelError> {
            let (name, t) = r.tensor()?;
            if name != format!("bn{j}.{suffix}") || t.shape() != [width] {
                return Err(bad(format!("unexpected buffer `{name}`")));
            }
            Ok(t.into_data())
        };
        let mean = take("running_mean")?;
        let var = take("running_var")?;
        params.running[j] = RunningStats { mean, var };
    }
    Ok(params)
}
