//! Flat `key = value` run configuration.
//!
//! Every hyperparameter has a dotted key. Files hold one assignment per
//! line; `#` starts a comment. Unknown keys and unparsable values are
//! rejected. [`RunConfig::to_text`] echoes every key, so a run can be
//! reproduced from its log or checkpoint alone.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Aggregation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Bool,
    Int,
    Float,
    /// A non-negative integer, or `auto` to take it from the dataset.
    AutoInt,
    Choice(&'static [&'static str]),
    Path,
}

/// One configurable key.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub key: &'static str,
    pub default: &'static str,
    /// The value used for the published large-scale results.
    pub published: &'static str,
    pub help: &'static str,
    kind: Kind,
}

const fn key(key: &'static str, kind: Kind, default: &'static str, published: &'static str, help: &'static str) -> KeyInfo {
    KeyInfo {
        key,
        default,
        published,
        help,
        kind,
    }
}

pub const KEYS: &[KeyInfo] = &[
    key("model.aggregation", Kind::Choice(&["nextvlad", "netvlad"]), "nextvlad", "nextvlad", "frame aggregation layer"),
    key("model.mixture", Kind::Choice(&["1", "3"]), "1", "3", "number of experts; 3 enables the distillation mixture"),
    key("model.video_dim", Kind::AutoInt, "auto", "1024", "visual feature size N_v"),
    key("model.audio_dim", Kind::AutoInt, "auto", "128", "audio feature size N_a"),
    key("model.num_classes", Kind::AutoInt, "auto", "3862", "number of classes C"),
    key("model.hidden", Kind::Int, "2048", "2048", "hidden size H after the reduction layer"),
    key("model.se_ratio", Kind::Int, "8", "8", "reduction ratio r of SE context gating (8 or 16)"),
    key("model.dropout", Kind::Float, "0.5", "0.5", "dropout rate after stream concatenation"),
    key("model.reverse_whitening", Kind::Bool, "false", "true", "scale video features by sqrt(eigenvalue)"),
    key("model.eigenvalues", Kind::Path, "", "", "EIGV file used for reverse whitening"),
    key("vlad.lambda", Kind::Int, "2", "2", "NeXtVLAD expansion factor"),
    key("vlad.groups", Kind::Int, "8", "8", "NeXtVLAD group count G"),
    key("vlad.clusters", Kind::Int, "128", "128", "cluster count K"),
    key("train.base_lr", Kind::Float, "0.0002", "0.0002", "initial Adam learning rate"),
    key("train.batch_size", Kind::Int, "160", "160", "videos per step"),
    key("train.decay_factor", Kind::Float, "0.8", "0.8", "learning-rate decay factor (0.8 or 0.9)"),
    key("train.decay_every_samples", Kind::Int, "2000000", "2000000", "samples per decay period (2M or 2.5M)"),
    key("train.lr_staircase", Kind::Bool, "false", "false", "decay in discrete steps instead of continuously"),
    key("train.l2_classifier", Kind::Float, "0.00001", "0.00001", "L2 weight on classifier weights"),
    key("train.epochs", Kind::Int, "5", "5", "passes over the training set"),
    key("train.steps", Kind::Int, "0", "0", "step budget; 0 derives it from train.epochs"),
    key("train.seed", Kind::Int, "0", "", "seed for initialization, shuffling and dropout"),
    key("train.eval_every", Kind::Int, "0", "", "evaluation period in steps; 0 evaluates once per epoch"),
    key("train.max_frames", Kind::Int, "300", "300", "frames kept per video"),
    key("train.deterministic", Kind::Bool, "true", "", "reproducible execution (training is single-threaded)"),
    key("kd.temperature", Kind::Float, "3", "3", "distillation temperature T; 0 disables distillation"),
    key("kd.stop_teacher_gradient", Kind::Bool, "false", "", "detach the mixture distribution in the KL term"),
];

fn info(key: &str) -> Result<&'static KeyInfo> {
    KEYS.iter().find(|k| k.key == key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

fn check(info: &KeyInfo, value: &str) -> Result<()> {
    let ok = match info.kind {
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::AutoInt => value == "auto" || value.parse::<u64>().is_ok(),
        Kind::Choice(opts) => opts.contains(&value),
        Kind::Path => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid value `{value}` for `{}`", info.key)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.key, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let info = info(key)?;
        let value = value.trim();
        check(info, value)?;
        self.values.insert(info.key, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies every assignment of a config file on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        info(key)?;
        Ok(&self.values[key])
    }

    fn parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
    }

    fn auto(&self, key: &str, fallback: usize) -> Result<usize> {
        match self.get(key)? {
            "auto" => Ok(fallback),
            _ => self.parse(key),
        }
    }

    /// Every key in table order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.key, self.values[k.key])).collect()
    }

    /// Resolves `auto` dimensions from a dataset's header.
    pub fn model_config(&self, video_dim: usize, audio_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let aggregation = match self.get("model.aggregation")? {
            "netvlad" => Aggregation::NetVlad,
            _ => Aggregation::NeXtVlad {
                expansion: self.parse("vlad.lambda")?,
                groups: self.parse("vlad.groups")?,
            },
        };
        let cfg = ModelConfig {
            video_dim: self.auto("model.video_dim", video_dim)?,
            audio_dim: self.auto("model.audio_dim", audio_dim)?,
            aggregation,
            clusters: self.parse("vlad.clusters")?,
            hidden: self.parse("model.hidden")?,
            se_ratio: self.parse("model.se_ratio")?,
            num_classes: self.auto("model.num_classes", num_classes)?,
            dropout_rate: self.parse("model.dropout")?,
            reverse_whitening: self.parse("model.reverse_whitening")?,
            experts: self.parse("model.mixture")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let steps: u64 = self.parse("train.steps")?;
        let eval_every: u64 = self.parse("train.eval_every")?;
        let temperature: f64 = self.parse("kd.temperature")?;
        let cfg = TrainConfig {
            base_lr: self.parse("train.base_lr")?,
            batch_size: self.parse("train.batch_size")?,
            decay_factor: self.parse("train.decay_factor")?,
            decay_every_samples: self.parse("train.decay_every_samples")?,
            lr_staircase: self.parse("train.lr_staircase")?,
            l2_classifier: self.parse("train.l2_classifier")?,
            epochs: self.parse("train.epochs")?,
            steps: (steps > 0).then_some(steps),
            seed: self.parse("train.seed")?,
            eval_every: (eval_every > 0).then_some(eval_every),
            max_frames: self.parse("train.max_frames")?,
            kd: LossConfig {
                stop_teacher_gradient: self.parse("kd.stop_teacher_gradient")?,
                ..LossConfig::new(temperature)
            },
            deterministic: self.parse("train.deterministic")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eigenvalues_path(&self) -> Option<PathBuf> {
        Some(self.values["model.eigenvalues"].as_str()).filter(|p| !p.is_empty()).map(PathBuf::from)
    }

    /// A table of every key with its default and published value.
    pub fn help_text() -> String {
        let mut s = format!("{:<28} {:<10} {:<10} {}\n", "key", "default", "published", "description");
        for k in KEYS {
            let published = if k.published.is_empty() { "-" } else { k.published };
            let default = if k.default.is_empty() { "\"\"" } else { k.default };
            s.push_str(&format!("{:<28} {:<10} {:<10} {}\n", k.key, default, published, k.help));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        let m = c.model_config(64, 16, 20).unwrap();
        assert_eq!((m.video_dim, m.audio_dim, m.num_classes), (64, 16, 20));
        assert_eq!(m.aggregation, Aggregation::NeXtVlad { expansion: 2, groups: 8 });
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn published_values_reproduce_the_published_setting() {
        let mut c = RunConfig::default();
        for k in KEYS.iter().filter(|k| !k.published.is_empty()) {
            c.set(k.key, k.published).unwrap();
        }
        c.set("model.mixture", "1").unwrap();
        assert_eq!(c.model_config(0, 0, 0).unwrap(), ModelConfig::published());
    }

    #[test]
    fn parse_text_with_comments() {
        let c = RunConfig::parse_text("# desk run\nvlad.groups = 4  # fewer groups\n\n train.base_lr=0.001\n").unwrap();
        assert_eq!(c.get("vlad.groups").unwrap(), "4");
        assert_eq!(c.train_config().unwrap().base_lr, 0.001);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::parse_text("vlad.group = 4").unwrap_err().to_string();
        assert!(err.contains("unknown config key `vlad.group`"), "{err}");
        assert!(RunConfig::parse_text("model.aggregation = lstm").is_err());
        assert!(RunConfig::parse_text("train.batch_size = -1").is_err());
        assert!(RunConfig::parse_text("train.base_lr = nan").is_err());
        assert!(RunConfig::parse_text("no equals sign").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set_pair("kd.temperature=0").unwrap();
        c.set_pair("model.eigenvalues = /tmp/e.eigv").unwrap();
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text().lines().count(), KEYS.len());
        assert!(!back.train_config().unwrap().kd.kd_enabled);
        assert_eq!(back.eigenvalues_path(), Some(PathBuf::from("/tmp/e.eigv")));
    }

    #[test]
    fn help_lists_every_key() {
        let h = RunConfig::help_text();
        assert!(KEYS.iter().all(|k| h.contains(k.key)));
    }
}
