//! Flat `key = value` run configuration merged from a file and flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use attnp::adversary::{AdvConfig, Method};
use attnp::data::DatasetMode;
use attnp::evaluator::Task;
use attnp::model::{ModelConfig, TaskKind};
use attnp::trainer::TrainConfig;

/// Every recognised key with its default. `None` means required or unset.
const KEYS: &[(&str, Option<&str>)] = &[
    ("data", None),
    ("mode", Some("pair")),
    ("task", Some("qa")),
    ("label_count", Some("6")),
    ("min_count", Some("2")),
    ("embeddings", None),
    ("embed_dim", Some("50")),
    ("hidden_dim", Some("64")),
    ("attn_dim", None),
    ("learning_rate", Some("0.001")),
    ("l2_coefficient", Some("1e-5")),
    ("epochs", Some("40")),
    ("batch_size", Some("32")),
    ("early_stop_patience", Some("5")),
    ("clip_norm", Some("5")),
    ("freeze_embeddings", Some("false")),
    ("method", Some("vanilla")),
    ("epsilon", Some("0")),
    ("lambda", Some("1")),
    ("seed", Some("0")),
    ("heatmaps", Some("3")),
];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{origin}:{}: expected key = value, got '{line}'", i + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("{origin}:{}: empty key", i + 1);
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            bail!("{origin}:{}: key '{k}' given twice", i + 1);
        }
    }
    Ok(out)
}

/// Resolved settings for a training or sweep run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: PathBuf,
    pub mode: DatasetMode,
    pub task: Task,
    pub label_count: usize,
    pub min_count: usize,
    pub embeddings: Option<PathBuf>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: Option<usize>,
    pub train: TrainConfig,
    pub heatmaps: usize,
    /// Every key with the exact text it was resolved from.
    pub resolved: BTreeMap<String, String>,
}

fn value<T: FromStr>(map: &BTreeMap<String, String>, key: &str, bad: &mut Vec<String>) -> Option<T>
where
    T::Err: std::fmt::Display,
{
    let raw = map.get(key)?;
    match raw.parse::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            bad.push(format!("{key} = '{raw}': {e}"));
            None
        }
    }
}

impl RunConfig {
    /// Merges `file` (if any) with `overrides`, which win.
    pub fn load(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = match file {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        map.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self::from_map(map)
    }

    pub fn from_map(mut map: BTreeMap<String, String>) -> Result<Self> {
        let unknown: Vec<&String> = map.keys().filter(|k| !KEYS.iter().any(|(n, _)| n == k)).collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            bail!("unknown configuration keys: {}", list.join(", "));
        }
        for (k, d) in KEYS {
            if let Some(d) = d {
                map.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }

        let mut bad = Vec::new();
        let data: Option<PathBuf> = value(&map, "data", &mut bad);
        if data.is_none() && !map.contains_key("data") {
            bad.push("data: required (path prefix of the .train/.valid/.test.jsonl files)".into());
        }
        let mode = value::<DatasetMode>(&map, "mode", &mut bad);
        let task = value::<Task>(&map, "task", &mut bad);
        let label_count = value::<usize>(&map, "label_count", &mut bad);
        let min_count = value::<usize>(&map, "min_count", &mut bad);
        let embeddings = value::<PathBuf>(&map, "embeddings", &mut bad);
        let embed_dim = value::<usize>(&map, "embed_dim", &mut bad);
        let hidden_dim = value::<usize>(&map, "hidden_dim", &mut bad);
        let attn_dim = value::<usize>(&map, "attn_dim", &mut bad);
        let learning_rate = value::<f64>(&map, "learning_rate", &mut bad);
        let l2_coefficient = value::<f64>(&map, "l2_coefficient", &mut bad);
        let epochs = value::<usize>(&map, "epochs", &mut bad);
        let batch_size = value::<usize>(&map, "batch_size", &mut bad);
        let patience = value::<usize>(&map, "early_stop_patience", &mut bad);
        let clip_norm = match map.get("clip_norm").map(String::as_str) {
            Some("none") => Some(None),
            _ => value::<f64>(&map, "clip_norm", &mut bad).map(Some),
        };
        let freeze = value::<bool>(&map, "freeze_embeddings", &mut bad);
        let method = value::<Method>(&map, "method", &mut bad);
        let epsilon = value::<f64>(&map, "epsilon", &mut bad);
        let lambda = value::<f64>(&map, "lambda", &mut bad);
        let seed = value::<u64>(&map, "seed", &mut bad);
        let heatmaps = value::<usize>(&map, "heatmaps", &mut bad);
        if !bad.is_empty() {
            bail!("invalid configuration:\n  {}", bad.join("\n  "));
        }
        let (Some(data), Some(mode), Some(task), Some(label_count), Some(min_count)) =
            (data, mode, task, label_count, min_count)
        else {
            unreachable!("checked above");
        };

        let method = method.expect("defaulted");
        let mut epsilon = epsilon.expect("defaulted");
        if method == Method::Vanilla && epsilon != 0.0 {
            log::warn!("method vanilla ignores epsilon = {epsilon}");
            epsilon = 0.0;
            map.insert("epsilon".into(), "0".into());
        }
        if method != Method::Vanilla && epsilon == 0.0 {
            log::warn!("method {method} with epsilon = 0 trains like vanilla");
        }
        let lambda = lambda.expect("defaulted");
        let adv = AdvConfig { method, epsilon, lambda };
        let train = TrainConfig {
            learning_rate: learning_rate.expect("defaulted"),
            l2_coefficient: l2_coefficient.expect("defaulted"),
            epochs: epochs.expect("defaulted"),
            batch_size: batch_size.expect("defaulted"),
            seed: seed.expect("defaulted"),
            adv,
            early_stop_patience: patience.expect("defaulted"),
            clip_norm: clip_norm.expect("defaulted"),
            freeze_embeddings: freeze.expect("defaulted"),
            task,
        };
        train
            .validate()
            .with_context(|| format!("invalid training settings (method {method})"))?;
        let cfg = Self {
            data,
            mode,
            task,
            label_count,
            min_count,
            embeddings,
            embed_dim: embed_dim.expect("defaulted"),
            hidden_dim: hidden_dim.expect("defaulted"),
            attn_dim,
            train,
            heatmaps: heatmaps.expect("defaulted"),
            resolved: map,
        };
        cfg.model_config(2).validate().context("invalid model settings")?;
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let kind = match self.mode {
            DatasetMode::Single => TaskKind::Single,
            DatasetMode::Pair => TaskKind::Pair,
        };
        let cfg = ModelConfig::new(kind, vocab_size, self.embed_dim, self.hidden_dim, self.label_count);
        match self.attn_dim {
            Some(a) => cfg.with_attn_dim(a),
            None => cfg,
        }
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        let mut s = self.data.clone().into_os_string();
        s.push(format!(".{split}.jsonl"));
        PathBuf::from(s)
    }

    /// `key=value` lines, sorted by key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn file_format() {
        let m = parse_pairs("# run\ndata = out/babi1\n\nepochs=3 # short\n", "f").unwrap();
        assert_eq!(m, map(&[("data", "out/babi1"), ("epochs", "3")]));
        assert!(parse_pairs("epochs 3", "f").unwrap_err().to_string().contains("f:1"));
        assert!(parse_pairs("a=1\na=2", "f").is_err());
    }

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_map(map(&[("data", "d"), ("method", "attention_iat"), ("epsilon", "5")])).unwrap();
        assert_eq!(cfg.train.adv.method, Method::AttentionIat);
        assert_eq!(cfg.train.adv.epsilon, 5.0);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.split_path("valid"), PathBuf::from("d.valid.jsonl"));
        assert!(cfg.echo().contains("method=attention_iat\n"));
        assert!(cfg.echo().contains("batch_size=32\n"));
    }

    #[test]
    fn vanilla_drops_epsilon() {
        let cfg = RunConfig::from_map(map(&[("data", "d"), ("epsilon", "5")])).unwrap();
        assert_eq!(cfg.train.adv.epsilon, 0.0);
        assert!(cfg.echo().contains("epsilon=0\n"));
    }

    #[test]
    fn offending_keys_are_listed() {
        let err = RunConfig::from_map(map(&[("data", "d"), ("epochs", "many"), ("method", "magic")]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("epochs") && err.contains("method"), "{err}");
        let err = RunConfig::from_map(map(&[("data", "d"), ("colour", "red")])).unwrap_err().to_string();
        assert!(err.contains("colour"));
        let err = RunConfig::from_map(map(&[])).unwrap_err().to_string();
        assert!(err.contains("data"));
        assert!(RunConfig::from_map(map(&[("data", "d"), ("batch_size", "0")])).is_err());
        assert!(RunConfig::from_map(map(&[("data", "d"), ("hidden_dim", "0")])).is_err());
    }
}
