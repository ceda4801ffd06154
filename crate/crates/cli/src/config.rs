//! Layered configuration: command-line flags over a JSON config file over
//! built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;
use serde_json::{Map, Value};

use tdu_core::{ModelConfig, TrainConfig};

use crate::FusionArg;

/// `{"model": {...}, "train": {...}}`, each section partial.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: Map<String, Value>,
    #[serde(default)]
    pub train: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub max_contexts: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Falls back to the config file, then TDU_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn overlay(base: &mut Value, section: &str, layer: &Map<String, Value>) -> Result<()> {
    let obj = base.as_object_mut().expect("configs serialize to objects");
    for (k, v) in layer {
        if !obj.contains_key(k) {
            bail!("unknown {section} setting {k:?}");
        }
        obj.insert(k.clone(), v.clone());
    }
    Ok(())
}

fn set<T: serde::Serialize>(layer: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        layer.insert(key.into(), serde_json::to_value(v).expect("plain value"));
    }
}

pub fn merge_model(file: &ConfigFile, args: &ModelArgs) -> Result<ModelConfig> {
    let mut value = serde_json::to_value(ModelConfig::default())?;
    overlay(&mut value, "model", &file.model)?;
    let mut cli = Map::new();
    set(&mut cli, "layers", args.layers);
    set(&mut cli, "hidden", args.hidden);
    set(&mut cli, "heads", args.heads);
    set(&mut cli, "max_positions", args.max_positions);
    set(&mut cli, "max_contexts", args.max_contexts);
    set(&mut cli, "ffn_mult", args.ffn_mult);
    set(&mut cli, "fusion", args.fusion.map(tdu_core::Fusion::from));
    overlay(&mut value, "model", &cli)?;
    let config: ModelConfig = serde_json::from_value(value).context("invalid model configuration")?;
    Ok(config)
}

pub fn merge_train(file: &ConfigFile, args: &TrainArgs, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(base.unwrap_or_default())?;
    if !file.train.contains_key("seed") {
        if let Ok(s) = std::env::var("TDU_SEED") {
            let seed: u64 = s.parse().with_context(|| format!("TDU_SEED={s:?} is not an unsigned integer"))?;
            value["seed"] = seed.into();
        }
    }
    overlay(&mut value, "train", &file.train)?;
    let mut cli = Map::new();
    set(&mut cli, "lr", args.lr);
    set(&mut cli, "weight_decay", args.weight_decay);
    set(&mut cli, "steps", args.steps);
    set(&mut cli, "batch", args.batch);
    set(&mut cli, "dropout", args.dropout);
    set(&mut cli, "eval_every", args.eval_every);
    set(&mut cli, "seed", args.seed);
    overlay(&mut value, "train", &cli)?;
    let config: TrainConfig = serde_json::from_value(value).context("invalid training configuration")?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(json: &str) -> ConfigFile {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let f = file(r#"{"model": {"hidden": 64, "heads": 4, "layers": 3}, "train": {"steps": 100, "eval_every": 50}}"#);
        let m = merge_model(&f, &ModelArgs { layers: Some(2), ..Default::default() }).unwrap();
        assert_eq!((m.layers, m.hidden, m.heads, m.ffn_mult), (2, 64, 4, 4));
        let t = merge_train(&f, &TrainArgs { steps: Some(200), seed: Some(3), ..Default::default() }, None).unwrap();
        assert_eq!((t.steps, t.eval_every, t.seed, t.batch), (200, 50, 3, 8));
        assert_eq!(t.lr, 8e-5);
    }

    #[test]
    fn defaults_follow_the_reference_table() {
        let m = merge_model(&ConfigFile::default(), &ModelArgs::default()).unwrap();
        assert_eq!((m.layers, m.hidden, m.heads), (2, 768, 12));
    }

    #[test]
    fn unknown_settings_are_rejected() {
        assert!(merge_model(&file(r#"{"model": {"hiden": 64}}"#), &ModelArgs::default()).is_err());
        assert!(serde_json::from_str::<ConfigFile>(r#"{"optim": {}}"#).is_err());
        let bad = file(r#"{"train": {"eval_every": 50000}}"#);
        assert!(merge_train(&bad, &TrainArgs::default(), None).is_err());
    }
}
