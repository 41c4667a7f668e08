//! Checkpoint files.
//!
//! Layout: one ASCII manifest line `ONNKIT-CKPT v1`, then one line per
//! tensor (`name ndim d1 ... dk`), a blank line, and the raw little-endian
//! f64 payloads concatenated in manifest order. Writing the same tensors
//! twice produces byte-identical files.
//!
//! Network checkpoints additionally carry the architecture as two metadata
//! tensors (`SPEC.layers`, `SPEC.meta`) so a file is self-contained.

use crate::error::{Error, Result};
use crate::net::{LayerSpec, Network, NetworkSpec, Padding, ParamMeta, Parameterization};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "ONNKIT-CKPT v1";

pub fn save_tensors(entries: &[(String, Tensor)], path: &Path) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    for (name, t) in entries {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidSpec(format!(
                "tensor name {name:?} must be non-empty and whitespace-free"
            )));
        }
        manifest.push_str(name);
        manifest.push(' ');
        manifest.push_str(&t.shape().len().to_string());
        for d in t.shape() {
            manifest.push(' ');
            manifest.push_str(&d.to_string());
        }
        manifest.push('\n');
    }
    manifest.push('\n');
    let mut file = fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    for (_, t) in entries {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let data_err = |msg: String| Error::Data(format!("{}: {msg}", path.display()));

    // Header ends at the first blank line; everything after is payload.
    let mut lines: Vec<(usize, &str)> = Vec::new(); // (byte offset after line, text)
    let mut start = 0usize;
    let mut payload_start = None;
    while start < bytes.len() {
        let rel = bytes[start..].iter().position(|&b| b == b'\n');
        let Some(rel) = rel else {
            return Err(data_err("truncated header (no blank line)".into()));
        };
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| data_err("header is not ASCII".into()))?;
        start += rel + 1;
        if line.is_empty() && !lines.is_empty() {
            payload_start = Some(start);
            break;
        }
        lines.push((start, line));
    }
    let payload_start = payload_start.ok_or_else(|| data_err("missing blank line".into()))?;
    if lines.is_empty() || lines[0].1 != MAGIC {
        return Err(data_err(format!(
            "wrong magic: expected {MAGIC:?}, got {:?}",
            lines.first().map(|l| l.1).unwrap_or("")
        )));
    }

    let mut entries = Vec::new();
    let mut total = 0usize;
    for (_, line) in &lines[1..] {
        let mut tok = line.split(' ');
        let name = tok
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| data_err(format!("bad manifest line {line:?}")))?;
        let ndim: usize = tok
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| data_err(format!("bad manifest line {line:?}")))?;
        let dims: Vec<usize> = tok
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| data_err(format!("bad manifest line {line:?}")))?;
        if dims.len() != ndim {
            return Err(data_err(format!(
                "manifest line {line:?} declares {ndim} dims but lists {}",
                dims.len()
            )));
        }
        total += dims.iter().product::<usize>();
        entries.push((name.to_string(), dims));
    }

    let payload = &bytes[payload_start..];
    if payload.len() < total * 8 {
        return Err(data_err(format!(
            "truncated payload: need {} bytes, have {}",
            total * 8,
            payload.len()
        )));
    }
    if payload.len() > total * 8 {
        return Err(data_err(format!(
            "trailing bytes: payload is {} bytes, manifest accounts for {}",
            payload.len(),
            total * 8
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    let mut at = 0usize;
    for (name, dims) in entries {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[(at + i) * 8..(at + i + 1) * 8]);
            data.push(f64::from_le_bytes(b));
        }
        at += n;
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

fn encode_layer(layer: &LayerSpec) -> [f64; 8] {
    match *layer {
        LayerSpec::Dense { fan_in, fan_out, bias } => [
            0.0,
            fan_in as f64,
            fan_out as f64,
            bias as u8 as f64,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        LayerSpec::Conv2d {
            channels_in,
            channels_out,
            kernel_size,
            padding,
            bias,
        } => [
            1.0,
            channels_in as f64,
            channels_out as f64,
            kernel_size as f64,
            matches!(padding, Padding::Same) as u8 as f64,
            bias as u8 as f64,
            0.0,
            0.0,
        ],
        LayerSpec::Relu => [2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        LayerSpec::Upsample2x => [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        LayerSpec::Flatten => [4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    }
}

fn decode_layer(row: &[f64]) -> Result<LayerSpec> {
    let u = |v: f64| v as usize;
    match row[0] as usize {
        0 => Ok(LayerSpec::Dense {
            fan_in: u(row[1]),
            fan_out: u(row[2]),
            bias: row[3] != 0.0,
        }),
        1 => Ok(LayerSpec::Conv2d {
            channels_in: u(row[1]),
            channels_out: u(row[2]),
            kernel_size: u(row[3]),
            padding: if row[4] != 0.0 { Padding::Same } else { Padding::Valid },
            bias: row[5] != 0.0,
        }),
        2 => Ok(LayerSpec::Relu),
        3 => Ok(LayerSpec::Upsample2x),
        4 => Ok(LayerSpec::Flatten),
        k => Err(Error::Data(format!("unknown layer code {k} in checkpoint"))),
    }
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let spec = net.spec();
    let mut entries = Vec::new();
    let mut layers_data = Vec::with_capacity(spec.layers.len() * 8);
    for layer in &spec.layers {
        layers_data.extend_from_slice(&encode_layer(layer));
    }
    entries.push((
        "SPEC.layers".to_string(),
        Tensor::new(vec![spec.layers.len(), 8], layers_data)?,
    ));
    let param_code = match spec.parameterization {
        Parameterization::Standard => 0.0,
        Parameterization::Ntk => 1.0,
    };
    entries.push((
        "SPEC.meta".to_string(),
        Tensor::new(vec![2], vec![param_code, spec.frontend_split as f64])?,
    ));
    for (p, m) in net.params().iter().zip(net.meta()) {
        entries.push((m.name.clone(), p.clone()));
    }
    save_tensors(&entries, path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let entries = load_tensors(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("{}: missing {name}", path.display())))
    };
    let layers_t = find("SPEC.layers")?;
    let meta_t = find("SPEC.meta")?;
    let mut layers = Vec::new();
    for row in layers_t.data().chunks(8) {
        layers.push(decode_layer(row)?);
    }
    let parameterization = if meta_t.data()[0] != 0.0 {
        Parameterization::Ntk
    } else {
        Parameterization::Standard
    };
    let spec = NetworkSpec::new(layers, parameterization, meta_t.data()[1] as usize);
    let mut params = Vec::new();
    let mut meta = Vec::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("layer") {
            let (idx, _) = rest
                .split_once('.')
                .ok_or_else(|| Error::Data(format!("bad parameter name {name}")))?;
            let layer: usize = idx
                .parse()
                .map_err(|_| Error::Data(format!("bad parameter name {name}")))?;
            params.push(t);
            meta.push(ParamMeta { name, layer });
        }
    }
    Network::from_parts(spec, params, meta)
}

/// FNV-1a digest of a file, for freeze/immutability assertions.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = fs::read(path)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    Ok(h)
}
