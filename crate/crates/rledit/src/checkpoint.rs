//! Flat binary tensor containers for model ("RLE1") and hypernetwork ("RLH1")
//! checkpoints: a 4-byte magic, header fields as little-endian u32, then each
//! named tensor as (name length, name bytes, rows, cols, row-major f64 LE).
//! Round-trips are bit-exact.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MODEL_MAGIC: [u8; 4] = *b"RLE1";
pub const HYPERNET_MAGIC: [u8; 4] = *b"RLH1";

pub fn write_container(
    path: &Path,
    magic: [u8; 4],
    header: &[u32],
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&magic)?;
    for &h in header {
        f.write_all(&h.to_le_bytes())?;
    }
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(t.rows() as u32).to_le_bytes())?;
        f.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_container(
    path: &Path,
    magic: [u8; 4],
    header_len: usize,
) -> Result<(Vec<u32>, Vec<(String, Tensor)>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut f = BufReader::new(File::open(path)?);
    let mut got = [0u8; 4];
    f.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Contract(format!(
            "checkpoint {} has magic {:?}, expected {:?}",
            path.display(),
            got,
            magic
        )));
    }
    let mut header = Vec::with_capacity(header_len);
    for _ in 0..header_len {
        header.push(read_u32(&mut f)?);
    }
    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match f.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Contract("non-UTF-8 tensor name in checkpoint".into()))?;
        let rows = read_u32(&mut f)? as usize;
        let cols = read_u32(&mut f)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    Ok((header, tensors))
}

pub fn save_model(path: &Path, w: &ModelWeights) -> Result<()> {
    let c = &w.config;
    let header = [
        c.vocab_size as u32,
        c.d_model as u32,
        c.n_layers as u32,
        c.d_ff as u32,
        c.n_heads as u32,
        c.max_seq_len as u32,
    ];
    let tensors: Vec<(String, &Tensor)> = w.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(path, MODEL_MAGIC, &header, &tensors)
}

/// Load model weights. The checkpoint carries the architecture integers;
/// editable selectors are configuration, so the caller supplies them (or
/// accepts the defaults for the loaded depth).
pub fn load_model(path: &Path, editable_layers: Option<Vec<String>>) -> Result<ModelWeights> {
    let (header, tensors) = read_container(path, MODEL_MAGIC, 6)?;
    let n_layers = header[2] as usize;
    let editable = editable_layers.unwrap_or_else(|| {
        let last = n_layers.saturating_sub(1);
        vec![format!("ffn_up@{last}"), format!("ffn_down@{last}")]
    });
    let config = ModelConfig {
        vocab_size: header[0] as usize,
        d_model: header[1] as usize,
        n_layers,
        d_ff: header[3] as usize,
        n_heads: header[4] as usize,
        max_seq_len: header[5] as usize,
        editable_layers: editable,
    };
    config.validate()?;
    let mut w = ModelWeights::init(&config, 0)?;
    let expected: Vec<String> = w.names().cloned().collect();
    let mut seen = Vec::new();
    for (name, t) in tensors {
        if !expected.contains(&name) {
            return Err(Error::Contract(format!(
                "checkpoint tensor `{name}` does not belong to this architecture"
            )));
        }
        w.set(&name, t);
        seen.push(name);
    }
    for name in expected {
        if !seen.contains(&name) {
            return Err(Error::Contract(format!("checkpoint is missing tensor `{name}`")));
        }
    }
    Ok(w)
}
