//! Binary container: `USIS`, u32 version, u64 manifest length, manifest
//! text, then little-endian f32 payloads in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelBundle, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Tensor};

const MAGIC: &[u8; 4] = b"USIS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parsed checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub seed: u64,
    /// Optimizer step counts for `g`, `d`, `s`.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn named_tensors(bundle: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (prefix, store, opt) in bundle.parts() {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            out.push((name.clone(), t));
        }
        for (name, t) in store.names().iter().zip(opt.first_moments()) {
            out.push((format!("adam_{prefix}.m.{name}"), t));
        }
        for (name, t) in store.names().iter().zip(opt.second_moments()) {
            out.push((format!("adam_{prefix}.v.{name}"), t));
        }
    }
    out
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, bundle: &ModelBundle, cfg: &TrainConfig) -> Result<()> {
    let path = path.as_ref();
    let tensors = named_tensors(bundle);
    let mut manifest = format!("step = {}\nrng_seed = {}\n", bundle.step, bundle.seed);
    for (prefix, _, opt) in bundle.parts() {
        manifest.push_str(&format!("adam_{prefix}.step = {}\n", opt.step_count()));
    }
    for (k, v) in cfg.to_pairs() {
        manifest.push_str(&format!("config.{k} = {v}\n"));
    }
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("tensor {name} f32 {}\n", dims.join("x")));
    }
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut bytes = Vec::with_capacity(16 + manifest.len() + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses and fully validates the container before returning anything.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest = bytes
        .get(16..16usize.saturating_add(mlen))
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;

    let mut keys = BTreeMap::new();
    let mut specs = Vec::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, dtype, dims] = parts[..] else {
                return Err(bad(format!("malformed tensor entry `{line}`")));
            };
            if dtype != "f32" {
                return Err(bad(format!("tensor `{name}` has unsupported dtype {dtype}")));
            }
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("tensor `{name}`: bad shape `{dims}`"))))
                .collect::<Result<_>>()?;
            specs.push((name.to_string(), shape));
        } else if let Some((k, v)) = line.split_once('=') {
            keys.insert(k.trim().to_string(), v.trim().to_string());
        } else if !line.trim().is_empty() {
            return Err(bad(format!("malformed manifest line `{line}`")));
        }
    }
    let expected: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
    let payload = &bytes[16 + mlen..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, manifest describes {expected} (truncated or corrupt)",
            payload.len()
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }

    let num = |k: &str| -> Result<u64> {
        keys.get(k)
            .ok_or_else(|| bad(format!("manifest lacks `{k}`")))?
            .parse()
            .map_err(|_| bad(format!("manifest `{k}` is not an integer")))
    };
    let config_map: BTreeMap<String, String> = keys
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let config = TrainConfig::from_pairs(&config_map)?;
    let mut optimizer_steps = BTreeMap::new();
    for p in ["g", "d", "s"] {
        optimizer_steps.insert(p.to_string(), num(&format!("adam_{p}.step"))?);
    }
    Ok(Checkpoint {
        config,
        step: num("step")?,
        seed: num("rng_seed")?,
        optimizer_steps,
        tensors,
    })
}

/// Loads a checkpoint into a bundle built from `cfg`, which must describe the
/// same architecture. Mismatches name the offending key or tensor.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<ModelBundle> {
    let ckpt = read_checkpoint(path)?;
    let saved: BTreeMap<String, String> = ckpt.config.to_pairs().into_iter().collect();
    let current: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
    for key in TrainConfig::architecture_keys() {
        if saved.get(*key) != current.get(*key) {
            return Err(bad(format!(
                "architecture mismatch on `{key}`: checkpoint has {:?}, config has {:?}",
                saved.get(*key),
                current.get(*key)
            )));
        }
    }
    let mut bundle = ModelBundle::new(cfg)?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in ckpt.tensors {
        by_name.insert(name, t);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| bad(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for (prefix, store, opt) in bundle.parts_mut() {
        let names = store.names().to_vec();
        let shapes: Vec<Vec<usize>> = store.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, shape) in names.iter().zip(&shapes) {
            params.push((name.clone(), take(name, shape)?));
            m.push(take(&format!("adam_{prefix}.m.{name}"), shape)?);
            v.push(take(&format!("adam_{prefix}.v.{name}"), shape)?);
        }
        store.load(params)?;
        let steps = ckpt.optimizer_steps[prefix];
        *opt = Adam::from_parts(opt.config, steps, m, v)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(bad(format!("checkpoint has unexpected tensor `{extra}`")));
    }
    bundle.step = ckpt.step;
    bundle.seed = ckpt.seed;
    Ok(bundle)
}
