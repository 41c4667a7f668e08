//! Feature export for external visualization (t-SNE, confusion plots):
//! one CSV row per sample with the label and the activations entering the
//! final parameterized layer.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::optics::FabricatedFrontend;
use crate::rng::{derive, rng_from_seed};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Index of the last parameterized layer; its input is the feature vector.
fn penultimate_stage(net: &Network) -> Result<usize> {
    net.spec()
        .layers
        .iter()
        .rposition(|l| l.has_params())
        .ok_or_else(|| Error::InvalidSpec("network has no parameterized layers".into()))
}

/// Writes `label,f0,f1,...` rows; returns the row count. With a fabricated
/// frontend the features come from the backend applied to captured maps.
pub fn export_features(
    net: &Network,
    frontend: Option<&FabricatedFrontend>,
    dataset: &LabeledDataset,
    path: &Path,
    seed: u64,
) -> Result<usize> {
    let labels = dataset.class_labels().map_err(|_| {
        Error::Data("feature export supports classification datasets".into())
    })?;
    let (model, inputs) = match frontend {
        Some(f) => {
            let mut rng = rng_from_seed(derive(seed, "export-capture"));
            (net.backend_network()?, f.capture(&dataset.images, &mut rng)?)
        }
        None => (net.clone(), dataset.images.clone()),
    };
    let stage = penultimate_stage(&model)?;
    let n = inputs.batch_size();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let chunk = 256;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let batch = inputs.gather(&idx);
        let trace = model.forward_trace(&batch, true)?;
        let feats = &trace.acts[stage];
        let d = feats.len() / idx.len();
        for i in 0..idx.len() {
            rows.push(feats[i * d..(i + 1) * d].to_vec());
        }
        at = hi;
    }

    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = String::from("label");
    for c in 0..width {
        write!(out, ",f{c}").unwrap();
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(&rows) {
        write!(out, "{label}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(rows.len())
}

/// Loads an exported feature CSV back into (labels, features).
pub fn load_features(path: &Path) -> Result<(Vec<usize>, Tensor)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty feature file", path.display())))?;
    let width = header.split(',').count() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let label: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad feature row {line:?}")))?;
        labels.push(label);
        for p in parts {
            data.push(
                p.parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad feature value {p:?}")))?,
            );
        }
    }
    let n = labels.len();
    if data.len() != n * width {
        return Err(Error::Data(format!(
            "{}: ragged feature rows",
            path.display()
        )));
    }
    Ok((labels, Tensor::new(vec![n, width], data)?))
}
