//! Flat parameter vectors with a named shape manifest.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::ModelError;
use crate::gradtape::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Fan-in used for the uniform `±sqrt(1/fan_in)` initializer.
    pub fan_in: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of named tensors packed into one flat vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) {
        let e = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            fan_in: fan_in.max(1),
        };
        self.total += e.len();
        self.entries.push(e);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, values: &[f64], name: &str) -> Tensor {
        let e = self.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        Tensor::new(e.shape.clone(), values[e.range()].to_vec()).expect("layout shape")
    }

    /// Uniform `±sqrt(1/fan_in)` initialization.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut v = vec![0.0; self.total];
        for e in &self.entries {
            let bound = (1.0 / e.fan_in as f64).sqrt();
            for x in &mut v[e.range()] {
                *x = rng.random_range(-bound..=bound);
            }
        }
        v
    }

    /// Client-side encoder and decoder parameters.
    pub fn client(cfg: &ModelConfig) -> Self {
        let mut l = Self::default();
        let (f, fe, ke) = (cfg.encoder_channels, cfg.features, cfg.encoder_kernel);
        l.push("enc.w", &[f, fe, ke], fe * ke);
        l.push("enc.b", &[f], fe * ke);
        let cin = cfg.graph_channels() + f;
        let (c, kd) = (cfg.decoder_channels, cfg.decoder_kernel);
        l.push("dec.conv.w", &[c, cin, kd], cin * kd);
        l.push("dec.conv.b", &[c], cin * kd);
        let flat = c * cfg.history;
        let out = cfg.quantiles.outputs();
        l.push("dec.lin.w", &[flat, out], flat);
        l.push("dec.lin.b", &[out], flat);
        l
    }

    /// Server-side graph-block parameters for `n` stations.
    pub fn server(cfg: &ModelConfig, n: usize) -> Self {
        let mut l = Self::default();
        let d = cfg.history;
        for b in 0..cfg.blocks {
            let f = cfg.block_in_channels(b);
            let p = |s: &str| format!("block{b}.{s}");
            l.push(p("sat.v"), &[n, n], n);
            l.push(p("sat.b"), &[n, n], n);
            l.push(p("sat.w1"), &[d], d);
            l.push(p("sat.w2"), &[f, d], f);
            l.push(p("sat.w3"), &[f], f);
            l.push(p("tat.v"), &[d, d], d);
            l.push(p("tat.b"), &[d, d], d);
            l.push(p("tat.u1"), &[n], n);
            l.push(p("tat.u2"), &[f, n], f);
            l.push(p("tat.u3"), &[f], f);
            l.push(p("cheb.theta"), &[cfg.cheb_order], cfg.cheb_order);
            l.push(
                p("tconv.phi"),
                &[cfg.hidden, f, cfg.temporal_kernel],
                f * cfg.temporal_kernel,
            );
        }
        l
    }
}

/// JSON manifest written next to a flat checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub layout: ParamLayout,
    pub data_file: String,
}

/// Write `<stem>.bin` (little-endian f64) and `<stem>.json` (manifest).
pub fn save_checkpoint(dir: &Path, stem: &str, layout: &ParamLayout, values: &[f64]) -> Result<(), ModelError> {
    if values.len() != layout.total {
        return Err(ModelError::Checkpoint(format!(
            "{} values for a layout of {}",
            values.len(),
            layout.total
        )));
    }
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let data_file = format!("{stem}.bin");
    fs::write(dir.join(&data_file), bytes)?;
    let manifest = CheckpointManifest {
        layout: layout.clone(),
        data_file,
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(ParamLayout, Vec<f64>), ModelError> {
    let text = fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    if bytes.len() != manifest.layout.total * 8 {
        return Err(ModelError::Checkpoint(format!(
            "{} bytes for {} parameters",
            bytes.len(),
            manifest.layout.total
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((manifest.layout, values))
}
