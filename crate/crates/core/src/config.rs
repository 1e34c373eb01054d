//! Dotted-key text configuration: `section.field = value` lines with `#`
//! comments. Every key has a default, so an empty document is valid;
//! unknown keys are rejected rather than ignored.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{KernelMode, NetworkConfig};
use crate::preprocess::Scale;
use crate::train::TrainConfig;

/// Non-network, non-training settings: where cases live.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataConfig {
    pub dir: Option<String>,
}

/// Everything a run needs, assembled from defaults plus overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Splits config text into key/value pairs, rejecting malformed lines and
/// duplicate keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got {:?}", lineno + 1, raw))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", lineno + 1, key)));
        }
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("key {}: cannot parse {:?}", key, v)))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect()
}

fn parse_triplet(key: &str, v: &str) -> Result<[usize; 3]> {
    let list = parse_list(key, v)?;
    list.try_into()
        .map_err(|_| Error::Config(format!("key {}: expected exactly three values", key)))
}

impl KernelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelMode::Aniso2p5d => "aniso_2p5d",
            KernelMode::Iso3d => "iso_3d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aniso_2p5d" => Ok(KernelMode::Aniso2p5d),
            "iso_3d" => Ok(KernelMode::Iso3d),
            other => Err(Error::Config(format!(
                "unknown kernel_mode {:?}, expected aniso_2p5d or iso_3d",
                other
            ))),
        }
    }
}

fn apply_network(cfg: &mut NetworkConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "base_channels" => cfg.base_channels = parse_list(key, value)?,
        "pe_reduction" => cfg.pe_reduction = parse_num(key, value)?,
        "kernel_mode" => cfg.kernel_mode = KernelMode::parse(value)?,
        "in_channels" => cfg.in_channels = parse_num(key, value)?,
        "out_classes" => cfg.out_classes = parse_num(key, value)?,
        "patch_shape" => cfg.patch_shape = parse_triplet(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {}", key))),
    }
    Ok(())
}

fn apply_train(cfg: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "lr0" => cfg.lr0 = parse_num(key, value)?,
        "lr_decay_factor" => cfg.lr_decay_factor = parse_num(key, value)?,
        "lr_decay_every" => cfg.lr_decay_every = parse_num(key, value)?,
        "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value)?,
        "total_iterations" => cfg.total_iterations = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "scale" => cfg.scale = Scale::parse(value).map_err(|e| Error::Config(e.to_string()))?,
        _ => return Err(Error::Config(format!("unknown key {}", key))),
    }
    Ok(())
}

impl RunConfig {
    /// Defaults overlaid with the document's key/value pairs; validates the
    /// resulting network and training settings.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, value) in parse_kv(text)? {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("unknown key {}", key)))?;
            match section {
                "network" => apply_network(&mut cfg.network, &key, field, &value)?,
                "train" => apply_train(&mut cfg.train, &key, field, &value)?,
                "data" => match field {
                    "dir" => cfg.data.dir = Some(value),
                    _ => return Err(Error::Config(format!("unknown key {}", key))),
                },
                _ => return Err(Error::Config(format!("unknown key {}", key))),
            }
        }
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = network_to_text(&self.network);
        let t = &self.train;
        s.push_str(&format!("train.lr0 = {}\n", t.lr0));
        s.push_str(&format!("train.lr_decay_factor = {}\n", t.lr_decay_factor));
        s.push_str(&format!("train.lr_decay_every = {}\n", t.lr_decay_every));
        s.push_str(&format!("train.weight_decay = {}\n", t.weight_decay));
        s.push_str(&format!("train.batch_size = {}\n", t.batch_size));
        s.push_str(&format!("train.total_iterations = {}\n", t.total_iterations));
        s.push_str(&format!("train.seed = {}\n", t.seed));
        s.push_str(&format!("train.scale = {}\n", t.scale.as_str()));
        if let Some(dir) = &self.data.dir {
            s.push_str(&format!("data.dir = {}\n", dir));
        }
        s
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Network settings alone, in the same dotted-key format (used inside
/// checkpoints).
pub fn network_to_text(cfg: &NetworkConfig) -> String {
    format!(
        "network.base_channels = {}\nnetwork.pe_reduction = {}\nnetwork.kernel_mode = {}\nnetwork.in_channels = {}\nnetwork.out_classes = {}\nnetwork.patch_shape = {}\n",
        join(&cfg.base_channels),
        cfg.pe_reduction,
        cfg.kernel_mode.as_str(),
        cfg.in_channels,
        cfg.out_classes,
        join(&cfg.patch_shape),
    )
}

pub fn network_from_text(text: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::default();
    for (key, value) in parse_kv(text)? {
        let field = key
            .strip_prefix("network.")
            .ok_or_else(|| Error::Config(format!("unknown key {}", key)))?;
        apply_network(&mut cfg, &key, field, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
