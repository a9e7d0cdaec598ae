//! Model checkpoints.
//!
//! Binary "SLOB1" layout (little-endian): magic `SLOB`, u32 version = 1,
//! a length-prefixed UTF-8 key=value block serializing the config and
//! normalizer, u32 tensor count, then per tensor: u32 name length, name
//! bytes, u32 rank, rank u32 dims, and the values as 32-bit reals.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::NormStats;
use crate::nn::{Real, Tensor};

use super::{ModelConfig, ModelError, ModelWeights};

const MAGIC: &[u8; 4] = b"SLOB";
const VERSION: u32 = 1;

pub fn save(weights: &ModelWeights, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let header = header_block(&weights.config, &weights.norm);
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;

    let tensors = weights.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelWeights, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("missing SLOB magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header)
        .map_err(|_| ModelError::Checkpoint("header is not UTF-8".into()))?;
    let (config, norm) = parse_header(&header)?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank != 2 {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has rank {rank}, expected 2"
            )));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as Real);
        }
        let tensor = Tensor::from_vec(rows, cols, data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        tensors.insert(name, tensor);
    }

    let mut weights = ModelWeights::init(&config, 0)?;
    weights.norm = norm;
    for (name, slot) in weights.tensors_mut() {
        let loaded = tensors
            .remove(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        if loaded.shape() != slot.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ModelError::Checkpoint(format!("unknown tensor {extra}")));
    }
    Ok(weights)
}

fn header_block(config: &ModelConfig, norm: &NormStats) -> String {
    let hidden: Vec<String> = config.fcn2_hidden.iter().map(|v| v.to_string()).collect();
    format!(
        "tau={}\nd_model={}\nn_blocks={}\nlatent_len={}\nheads={}\nffn_mult={}\n\
         fcn2_hidden={}\npositional_encoding={}\n\
         norm.price_center={:?}\nnorm.price_scale={:?}\n\
         norm.volume_center={:?}\nnorm.volume_scale={:?}\n",
        config.tau,
        config.d_model,
        config.n_blocks,
        config.latent_len,
        config.heads,
        config.ffn_mult,
        hidden.join(","),
        config.positional_encoding,
        norm.price_center,
        norm.price_scale,
        norm.volume_center,
        norm.volume_scale,
    )
}

fn parse_header(text: &str) -> Result<(ModelConfig, NormStats), ModelError> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Checkpoint(format!("bad header line: {line}")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String, ModelError> {
        map.get(key)
            .ok_or_else(|| ModelError::Checkpoint(format!("header missing {key}")))
    };
    let usize_of = |key: &str| -> Result<usize, ModelError> {
        get(key)?
            .parse()
            .map_err(|_| ModelError::Checkpoint(format!("bad integer for {key}")))
    };
    let f64_of = |key: &str| -> Result<f64, ModelError> {
        get(key)?
            .parse()
            .map_err(|_| ModelError::Checkpoint(format!("bad float for {key}")))
    };
    let hidden = get("fcn2_hidden")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| ModelError::Checkpoint("bad fcn2_hidden entry".into()))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let config = ModelConfig {
        tau: usize_of("tau")?,
        d_model: usize_of("d_model")?,
        n_blocks: usize_of("n_blocks")?,
        latent_len: usize_of("latent_len")?,
        heads: usize_of("heads")?,
        ffn_mult: usize_of("ffn_mult")?,
        fcn2_hidden: hidden,
        positional_encoding: get("positional_encoding")? == "true",
    };
    let norm = NormStats {
        price_center: f64_of("norm.price_center")?,
        price_scale: f64_of("norm.price_scale")?,
        volume_center: f64_of("norm.volume_center")?,
        volume_scale: f64_of("norm.volume_scale")?,
    };
    Ok((config, norm))
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
