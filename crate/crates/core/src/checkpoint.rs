//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "UNPCKPT\0" | version u32
//! header_len u32 | header text (key = value lines)
//! config_len u32 | canonical config text
//! n_params u32 | per param: name_len u16, name, ndim u8, dims u64.., data f64..
//! adam_t u64 | first moments f64.. | second moments f64..   (param order)
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Shapes of the moment blocks follow the parameter table. Writes go to a
//! temporary sibling and are renamed into place.

use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::model::Layout;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::TrainState;
use crate::{Result, UnpError};

pub const MAGIC: &[u8; 8] = b"UNPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const SNAKE_CONVENTION: &str = "row-major-odd-rows-reversed";

fn err(msg: impl Into<String>) -> UnpError {
    UnpError::Checkpoint(msg.into())
}

fn header(state: &TrainState) -> String {
    let d = &state.config.dims;
    format!(
        "format = unp-checkpoint\nversion = {FORMAT_VERSION}\nlattice = {}x{}\nsnake = {SNAKE_CONVENTION}\nd_e = {}\nn_c = {}\nn_t = {}\nt_total = {}\nstep = {}\nconfig_hash = {}\n",
        d.lx,
        d.ly,
        d.d_e,
        d.n_c,
        d.n_t,
        d.t_total,
        state.step,
        state.config.hash()
    )
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for text in [header(state), state.config.to_text()] {
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, t) in state.layout.names.iter().zip(&state.params) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    for t in state.adam.m.iter().chain(&state.adam.v) {
        put_f64s(&mut out, t.data());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| err("header is not UTF-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| err("truncated file"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Header fields of a checkpoint, without decoding the tensors.
pub fn read_header(bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_prefix(&mut r)?;
    let h = r.text()?;
    Ok(crate::config::parse_kv(h)?.into_iter().map(|l| (l.key, l.value)).collect())
}

fn check_prefix(r: &mut Reader) -> Result<()> {
    if r.take(MAGIC.len()).map_err(|_| err("truncated file"))? != MAGIC {
        return Err(err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_prefix(&mut r)?;
    if bytes.len() < r.pos + 32 {
        return Err(err("truncated file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let _ = r.text()?;
    let config = RunConfig::from_text(r.text()?, None)?;
    let layout = Layout::new(&config.dims);
    let n = r.u32()? as usize;
    if n != layout.len() {
        return Err(err(format!("checkpoint has {n} parameters, config implies {}", layout.len())));
    }
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| err("parameter name is not UTF-8"))?;
        if name != layout.names[i] {
            return Err(err(format!("parameter {i} is {name}, expected {}", layout.names[i])));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != layout.shapes[i] {
            return Err(err(format!("parameter {name} has shape {shape:?}, expected {:?}", layout.shapes[i])));
        }
        let count = shape.iter().product();
        params.push(Tensor::new(&shape, r.f64s(count)?));
    }
    let t = r.u64()?;
    let mut moments = Vec::with_capacity(2 * n);
    for k in 0..2 * n {
        let shape = &layout.shapes[k % n];
        moments.push(Tensor::new(shape, r.f64s(shape.iter().product())?));
    }
    if r.pos != body.len() {
        return Err(if r.pos > body.len() { err("truncated file") } else { err("trailing bytes after optimizer state") });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(err("checksum mismatch (corrupted file)"));
    }
    let v = moments.split_off(n);
    let step = read_header(bytes)?
        .into_iter()
        .find(|(k, _)| k == "step")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| err("header lacks a step counter"))?;
    Ok(TrainState { config, layout, params, adam: Adam { t, m: moments, v }, step })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path.file_name().ok_or_else(|| err("checkpoint path has no file name"))?;
    let tmp = dir.join(format!(".{}.{}.tmp", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// Load and require the given lattice shape.
pub fn load_for_lattice(path: &Path, lx: usize, ly: usize) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let d = &state.config.dims;
    if (d.lx, d.ly) != (lx, ly) {
        return Err(err(format!("checkpoint lattice is {}x{}, requested {lx}x{ly}", d.lx, d.ly)));
    }
    Ok(state)
}

/// SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(state: &TrainState) -> String {
    hex(&Sha256::digest(to_bytes(state)))
}
