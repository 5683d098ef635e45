//! Binary model and checkpoint files.
//!
//! Layout (little endian): magic `MTK1`, `u32` version, `u32` header length
//! and UTF-8 header text, then one record per tensor (`u32` name length,
//! name, `u32` rank, `u32` dims, `f32` values), closed by a zero name length
//! and the marker `MTKE`. A model file's header is its configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTK1";
const END: &[u8; 4] = b"MTKE";
pub const VERSION: u32 = 1;

pub fn encode_bundle(header: &str, tensors: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + 4 * tensors.numel() + 64 * tensors.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(END);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("file truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in file".into()))
    }
}

pub fn decode_bundle(buf: &[u8]) -> Result<(String, ParamSet)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported file version {version} (expected {VERSION})")));
    }
    let n = r.u32()? as usize;
    let header = r.string(n)?;
    let mut set = ParamSet::new();
    loop {
        let n = r.u32()? as usize;
        if n == 0 {
            break;
        }
        let name = r.string(n)?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        set.insert(name, Tensor::new(&dims, data)?);
    }
    if r.take(4)? != END {
        return Err(Error::Format("missing end marker".into()));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after end marker".into()));
    }
    Ok((header, set))
}

/// Write through a temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(path: &Path, header: &str, tensors: &ParamSet) -> Result<()> {
    write_atomic(path, &encode_bundle(header, tensors))
}

pub fn read_bundle(path: &Path) -> Result<(String, ParamSet)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&buf)
}

pub fn save_model(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    write_bundle(path, &config.to_text(), params)
}

/// Like [`save_model`], with free-form `notes` (e.g. the training settings)
/// stored after a `---` line of the header.
pub fn save_model_with_notes(path: &Path, config: &ModelConfig, params: &ParamSet, notes: &str) -> Result<()> {
    write_bundle(path, &format!("{}---\n{notes}", config.to_text()), params)
}

/// Split a model header into its configuration and optional notes.
pub fn split_header(header: &str) -> (&str, Option<&str>) {
    if let Some(rest) = header.strip_prefix("---\n") {
        return ("", Some(rest));
    }
    match header.split_once("\n---\n") {
        Some((cfg, notes)) => (cfg, Some(notes)),
        None => (header, None),
    }
}

/// The notes stored by [`save_model_with_notes`], if any.
pub fn model_notes(path: &Path) -> Result<Option<String>> {
    let (header, _) = read_bundle(path)?;
    Ok(split_header(&header).1.map(String::from))
}

/// Load a model file and check its parameters against the architecture.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let (header, params) = read_bundle(path)?;
    let config = ModelConfig::from_text(split_header(&header).0)?;
    let model: Model<f32> = Model::new(config.clone())?;
    model.check_params(&params)?;
    Ok((config, params))
}
