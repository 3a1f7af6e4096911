//! Flat `key=value` run configuration with a fixed key set per command.

use std::path::Path;
use std::str::FromStr;

use rdlab::model::ModelConfig;
use rdlab::{Error, Result};

/// Ordered key/value pairs; only keys present in the defaults may be set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    entries: Vec<(String, String)>,
}

fn model_defaults() -> Vec<(String, String)> {
    ModelConfig::default()
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| !matches!(k.as_str(), "vocab_size" | "freeze_vision" | "freeze_lm" | "model_seed"))
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

impl RunConfig {
    pub fn gen_data() -> Self {
        RunConfig {
            entries: pairs(&[("out", ""), ("n", "22000"), ("seed", "0"), ("single_op", "false"), ("verify", "false")]),
        }
    }

    pub fn pretrain() -> Self {
        let mut entries = pairs(&[
            ("data", ""),
            ("out", ""),
            ("seed", "0"),
            ("vision_epochs", "5"),
            ("vision_batch", "16"),
            ("vision_lr", "0.001"),
            ("vision_target_mse", "0.01"),
            ("vision_min_images", "5000"),
            ("lm_corpus", "50000"),
            ("lm_heldout", "1000"),
            ("lm_epochs", "3"),
            ("lm_batch", "8"),
            ("lm_lr", "0.001"),
            ("lm_warmup", "200"),
        ]);
        entries.extend(model_defaults());
        RunConfig { entries }
    }

    pub fn train() -> Self {
        RunConfig {
            entries: pairs(&[
                ("experiment", "1"),
                ("data", ""),
                ("init", ""),
                ("out", ""),
                ("seed", "0"),
                ("epochs", "10"),
                ("batch_size", "2"),
                ("warmup", "200"),
                ("peak_lr", "0.001"),
                ("floor_lr", "0.00001"),
                ("weight_decay", "0.01"),
                ("aux_weight", "1"),
                ("aux_detached", "default"),
                ("overlap_penalty", "ratio"),
                ("unfrozen", "false"),
                ("pretrained_lr_scale", "0.1"),
                ("val_limit", "all"),
                ("eval_threads", "1"),
                ("max_new", "64"),
            ]),
        }
    }

    pub fn eval() -> Self {
        RunConfig {
            entries: pairs(&[
                ("ckpt", ""),
                ("data", ""),
                ("split", "test"),
                ("out", ""),
                ("seed", "0"),
                ("threads", "1"),
                ("max_new", "64"),
                ("limit", "all"),
                ("max_malformed_rate", "0.5"),
            ]),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => {
                entry.1 = value.into();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{item}`: expected key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
    }

    /// A value where `all` (or `default`) means `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            "all" | "default" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        match self.raw(key) {
            "" => Err(Error::Config(format!("`{key}` is required"))),
            v => Ok(v),
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Model dimensions from the `model.*` keys.
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> Result<ModelConfig> {
        let mut map: std::collections::BTreeMap<String, String> = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        map.insert("vocab_size".into(), vocab_size.to_string());
        map.insert("freeze_vision".into(), "false".into());
        map.insert("freeze_lm".into(), "false".into());
        map.insert("model_seed".into(), seed.to_string());
        let config = ModelConfig::from_pairs(&map).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::train();
        assert!(c.set("epochz", "3").is_err());
        assert!(c.apply_text("epochs=3\n# note\n\nlearning_rate=1").is_err());
        assert_eq!(c.raw("epochs"), "3");
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::pretrain();
        c.set("model.d_lm", "64").unwrap();
        let mut d = RunConfig::pretrain();
        d.apply_text(&c.render()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.model_config(100, 1).unwrap().d_lm, 64);
    }

    #[test]
    fn optional_values() {
        let c = RunConfig::train();
        assert_eq!(c.get_opt::<usize>("val_limit").unwrap(), None);
        assert_eq!(c.get::<usize>("epochs").unwrap(), 10);
        assert!(c.get::<usize>("overlap_penalty").is_err());
    }
}
