//! FJWT weight files: the on-disk form of [`ModelParams`].
//!
//! Layout, all little-endian: magic `FJWT`, version `u32`, tensor count
//! `u32`, then per tensor: name length `u8`, name bytes, rank `u8`, dims
//! `u32` each, and the f32 payload. Tensors appear in flatten order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{CnnConfig, ModelParams, Params, Tensor};

const FJWT_MAGIC: &[u8; 4] = b"FJWT";
const FJWT_VERSION: u32 = 1;

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = params_to_bytes(params);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn params_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FJWT_MAGIC);
    out.extend_from_slice(&FJWT_VERSION.to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    for (name, tensor) in params.tensors() {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_params(path: &Path, cfg: &CnnConfig) -> Result<ModelParams> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes, cfg)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn params_from_bytes(bytes: &[u8], cfg: &CnnConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != FJWT_MAGIC {
        return Err(Error::format(0, "bad magic, expected FJWT"));
    }
    let version = r.u32("version")?;
    if version != FJWT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {version}, expected {FJWT_VERSION}"),
        ));
    }
    let count = r.u32("tensor count")?;
    if count != 4 {
        return Err(Error::format(8, format!("expected 4 tensors, file has {count}")));
    }

    let expect = Params::<f32>::zeros(cfg);
    let mut loaded: Vec<Tensor<f32>> = Vec::with_capacity(4);
    for (want_name, want) in expect.tensors() {
        let name_len = r.u8("tensor name length")? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(r.at as u64, "tensor name is not utf-8"))?;
        if name != want_name {
            return Err(Error::shape(
                want_name,
                format!("expected tensor `{want_name}`, file has `{name}`"),
            ));
        }
        let rank = r.u8(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("{name} dims"))? as usize);
        }
        if shape != want.shape {
            return Err(Error::shape(
                name.to_string(),
                format!("file shape {shape:?} does not match config shape {:?}", want.shape),
            ));
        }
        let count: usize = shape.iter().product();
        let payload = r.take(count * 4, &format!("{name} payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(Tensor { shape, data });
    }
    if r.at != bytes.len() {
        return Err(Error::format(
            r.at as u64,
            format!("{} trailing bytes after last tensor", bytes.len() - r.at),
        ));
    }
    let mut it = loaded.into_iter();
    Ok(ModelParams {
        conv_w: it.next().unwrap(),
        conv_b: it.next().unwrap(),
        fc_w: it.next().unwrap(),
        fc_b: it.next().unwrap(),
    })
}
