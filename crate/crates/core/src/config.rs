//! Flat `key = value` run configuration and manifests.
//!
//! Keys are the dotted paths of [`RunConfig`]'s serialized form, e.g.
//! `train.lr = 0.0003` or `weights.w_sec = 0`. Values are JSON literals; bare
//! words are read as strings. `#` starts a comment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bench::BenchConfig;
use crate::diagnostics::ProbeConfig;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config line",
                detail: format!("line {}: expected `key = value`, got `{raw}`", i + 1),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_pairs([(key, value)])
    }

    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, raw) in pairs {
            let slot = lookup(&mut tree, key)?;
            *slot = parse_value(raw);
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Every leaf as `key = value`, sorted by key.
    pub fn to_manifest(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        p.model.validate()?;
        p.adapter.validate()?;
        p.train.validate()?;
        p.weights.validate()?;
        p.decode.validate()?;
        if p.heads.n_agg_layers == 0 || p.heads.n_agg_layers > p.model.n_layers {
            return Err(Error::InvalidConfig(format!(
                "heads.n_agg_layers must be in 1..={}",
                p.model.n_layers
            )));
        }
        let n = p.decode.n_samples as u64;
        if p.ks.is_empty() || p.ks.iter().any(|&k| k == 0 || k > n) {
            return Err(Error::InvalidConfig(format!(
                "every k in ks must be in 1..=decode.n_samples ({n}), got {:?}",
                p.ks
            )));
        }
        Ok(())
    }
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let unknown = || Error::InvalidConfig(format!("unknown config key `{key}`"));
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(unknown)?;
    }
    if node.is_object() {
        return Err(Error::InvalidConfig(format!("`{key}` is a section, not a value")));
    }
    Ok(node)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}
