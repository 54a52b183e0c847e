//! Named-array archives: a text manifest (metadata, array names, shapes,
//! precision) next to one little-endian binary file holding the arrays in
//! manifest order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::memory::snapshot_data_path;
use crate::model::{Model, ModelParams};
use crate::numerics::Tensor;

const FORMAT: &str = "chunklm-archive 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("archive has no array `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("archive has no metadata `{key}`")))
    }
}

/// Path of the binary payload belonging to `manifest`.
pub fn data_path(manifest: &Path) -> PathBuf {
    snapshot_data_path(manifest)
}

pub fn save_archive(manifest: &Path, archive: &Archive, precision: Precision) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "format = {FORMAT}").unwrap();
    writeln!(text, "precision = {}", precision.name()).unwrap();
    for (k, v) in &archive.meta {
        if k.contains(char::is_whitespace) || v.contains(['#', '\n']) {
            return Err(Error::Config(format!("metadata `{k}` cannot be written to a manifest")));
        }
        writeln!(text, "meta.{k} = {v}").unwrap();
    }
    let total: usize = archive.arrays.iter().map(|(_, t)| t.len()).sum();
    let mut bin = Vec::with_capacity(total * precision.width());
    for (i, (name, t)) in archive.arrays.iter().enumerate() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Config(format!("array name `{name}` contains whitespace")));
        }
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        writeln!(text, "array.{i:06} = {name} {}", shape.join("x")).unwrap();
        match precision {
            Precision::F64 => t.data().iter().for_each(|v| bin.extend_from_slice(&v.to_le_bytes())),
            Precision::F32 => t
                .data()
                .iter()
                .for_each(|&v| bin.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    fs::write(manifest, text)?;
    fs::write(data_path(manifest), bin)?;
    Ok(())
}

pub fn load_archive(manifest: &Path) -> Result<Archive> {
    let text = fs::read_to_string(manifest)?;
    let fields = crate::config::parse_flat(&text, manifest)?;
    if fields.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::format(manifest, "not a checkpoint manifest"));
    }
    let precision = match fields.get("precision").map(String::as_str) {
        Some("f64") => Precision::F64,
        Some("f32") => Precision::F32,
        other => return Err(Error::format(manifest, format!("unknown precision {other:?}"))),
    };
    let mut archive = Archive::default();
    let mut specs = Vec::new();
    for (k, v) in &fields {
        if let Some(key) = k.strip_prefix("meta.") {
            archive.meta.insert(key.to_string(), v.clone());
        } else if k.starts_with("array.") {
            let (name, shape) = v
                .split_once(' ')
                .ok_or_else(|| Error::format(manifest, format!("malformed array line `{v}`")))?;
            let shape = shape
                .split('x')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(manifest, format!("array `{name}` shape: {e}")))?;
            specs.push((name.to_string(), shape));
        }
    }
    let path = data_path(manifest);
    let bin = fs::read(&path)?;
    let w = precision.width();
    let expected: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>() * w).sum();
    if bin.len() != expected {
        return Err(Error::format(&path, format!("expected {expected} bytes, found {}", bin.len())));
    }
    let mut at = 0;
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = bin[at..at + n * w]
            .chunks_exact(w)
            .map(|b| match precision {
                Precision::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                Precision::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            })
            .collect();
        at += n * w;
        archive.arrays.push((name, Tensor::new(shape, data)?));
    }
    Ok(archive)
}

/// Writes `cfg` as `config.<key>` metadata entries.
pub fn put_config(archive: &mut Archive, cfg: &TrainConfig) {
    for line in cfg.render().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            archive.meta.insert(format!("config.{k}"), v.to_string());
        }
    }
}

pub fn get_config(archive: &Archive) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in &archive.meta {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_archive(model: &Model) -> Archive {
    let mut a = Archive::default();
    let cfg = TrainConfig {
        model: model.cfg.clone(),
        ..TrainConfig::default()
    };
    put_config(&mut a, &cfg);
    a.arrays = model
        .params
        .names()
        .into_iter()
        .zip(model.params.to_vec())
        .collect();
    a
}

pub fn model_from_archive(archive: &Archive) -> Result<Model> {
    let cfg: ModelConfig = get_config(archive)?.model;
    let names = ModelParams::zeros(&cfg).names();
    let tensors = names
        .iter()
        .map(|n| archive.array(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    Model::new(cfg.clone(), ModelParams::from_tensors(&cfg, tensors)?)
}

pub fn save_model(manifest: &Path, model: &Model, precision: Precision) -> Result<()> {
    save_archive(manifest, &model_archive(model), precision)
}

pub fn load_model(manifest: &Path) -> Result<Model> {
    model_from_archive(&load_archive(manifest)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut cfg = ModelConfig::tiny();
        cfg.ablations.no_rnn = true;
        let m = Model::init(cfg, 3).unwrap();
        save_model(&path, &m, Precision::F64).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.cfg, m.cfg);
    }

    #[test]
    fn f32_round_trip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut m = Model::init(ModelConfig::tiny(), 4).unwrap();
        for t in m.params.tensors_mut() {
            *t = t.map(|v| v as f32 as f64);
        }
        save_model(&path, &m, Precision::F32).unwrap();
        assert_eq!(load_model(&path).unwrap().params, m.params);
        save_model(&path, &load_model(&path).unwrap(), Precision::F32).unwrap();
        assert_eq!(load_model(&path).unwrap().params, m.params);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_model(&path, &Model::init(ModelConfig::tiny(), 0).unwrap(), Precision::F64).unwrap();
        let bin = fs::read(data_path(&path)).unwrap();
        fs::write(data_path(&path), &bin[..bin.len() - 8]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }
}
