//! Binary checkpoints: `BBH1` magic, version, metadata block, f64 payload.
//!
//! ```text
//! b"BBH1" | u32 LE version | u64 LE metadata length | metadata (UTF-8) | payload
//! ```
//!
//! The metadata holds the posterior family, the resolved config between
//! `config` and `end config` lines, and one `tensor <name> <d0>x<d1>..` line
//! per tensor. The payload is every tensor's data as little-endian f64, in
//! manifest order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{parse_config, ExperimentConfig};
use crate::error::{io_err, Error, Result};
use crate::posterior::Posterior;
use crate::tensor::Tensor;
use crate::training::init_posterior;

pub const MAGIC: &[u8; 4] = b"BBH1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Config block exactly as stored.
    pub config_text: String,
    pub posterior: Posterior,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

pub fn encode_checkpoint(config: &ExperimentConfig, posterior: &Posterior) -> Vec<u8> {
    let tensors = posterior.named_tensors();
    let mut meta = format!("family {}\nconfig\n{}end config\n", posterior.family_name(), config.to_text());
    for (name, t) in &tensors {
        meta.push_str(&format!("tensor {name} {}\n", shape_text(t.shape())));
    }
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + meta.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Manifest {
    family: String,
    config_text: String,
    tensors: Vec<(String, Vec<usize>)>,
}

fn parse_manifest(meta: &str, base: usize) -> Result<Manifest> {
    let mut lines = meta.lines();
    let family = lines
        .next()
        .and_then(|l| l.strip_prefix("family "))
        .ok_or_else(|| format_err(base, "metadata does not start with a family line"))?
        .to_string();
    if lines.next() != Some("config") {
        return Err(format_err(base, "metadata is missing its config block"));
    }
    let mut config_text = String::new();
    loop {
        match lines.next() {
            Some("end config") => break,
            Some(l) => {
                config_text.push_str(l);
                config_text.push('\n');
            }
            None => return Err(format_err(base, "unterminated config block")),
        }
    }
    let mut tensors = Vec::new();
    for line in lines {
        let mut parts = line.split(' ');
        let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(format_err(base, format!("bad manifest line `{line}`")));
        };
        let shape = if dims == "-" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| format_err(base, format!("bad shape `{dims}` for tensor {name}")))?
        };
        tensors.push((name.to_string(), shape));
    }
    Ok(Manifest {
        family,
        config_text,
        tensors,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, not a checkpoint"));
    }
    if bytes.len() < 16 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(8, format!("metadata length {meta_len} exceeds the file")))?;
    let meta = std::str::from_utf8(&bytes[16..meta_end]).map_err(|_| format_err(16, "metadata is not UTF-8"))?;
    let manifest = parse_manifest(meta, 16)?;

    let config = parse_config(&manifest.config_text)?;
    let spec = config.network.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut posterior = init_posterior(&config.train, &spec, &mut rng)?;
    if posterior.family_name() != manifest.family {
        return Err(format_err(
            16,
            format!("family {} does not match the config ({})", manifest.family, posterior.family_name()),
        ));
    }
    let expected: Vec<(String, Vec<usize>)> = posterior
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected != manifest.tensors {
        return Err(format_err(16, "tensor manifest does not match the configured posterior"));
    }

    let mut offset = meta_end;
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for (name, shape) in &manifest.tensors {
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(format_err(offset, format!("payload truncated in tensor {name}")));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_err(offset, format!("{} trailing bytes after the payload", bytes.len() - offset)));
    }
    for (slot, v) in posterior.tensors_mut().into_iter().zip(values) {
        *slot = v;
    }
    Ok(Checkpoint {
        config,
        config_text: manifest.config_text,
        posterior,
    })
}

pub fn save_checkpoint(path: &Path, config: &ExperimentConfig, posterior: &Posterior) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, posterior)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}
