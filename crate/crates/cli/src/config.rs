//! Run settings resolved from four layers, later ones winning:
//! built-in preset defaults, a `key=value` file, `RELEX_*` environment
//! variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use relex_core::encoder::EncoderConfig;
use relex_core::{HeadKind, HeadSpec, LabelSet, TrainConfig};

pub const ENV_PREFIX: &str = "RELEX_";

const KEYS: [&str; 17] = [
    "preset",
    "task",
    "head",
    "learning_rate",
    "batch_size",
    "epochs",
    "max_len",
    "seed",
    "freeze_encoder",
    "eval_each_epoch",
    "num_layers",
    "hidden_size",
    "num_heads",
    "ffn_size",
    "dropout",
    "lstm_hidden",
    "lowercase",
];

/// Defaults for a named preset. `base` is the BERT-base fine-tuning setup,
/// `desk` a small encoder trained from scratch.
pub fn preset_defaults(preset: &str) -> Result<BTreeMap<String, String>> {
    let (train, enc) = match preset {
        "base" => (TrainConfig::default(), EncoderConfig::base(0, 0)),
        "desk" => (TrainConfig::desk(), EncoderConfig::desk(0, 0)),
        other => bail!("config error: unknown preset {other:?}; expected base or desk"),
    };
    let pairs = [
        ("preset", preset.to_string()),
        ("task", "ppi".into()),
        ("head", HeadKind::AttLl.name().into()),
        ("learning_rate", train.learning_rate.to_string()),
        ("batch_size", train.batch_size.to_string()),
        ("epochs", train.epochs.to_string()),
        ("max_len", train.max_len.to_string()),
        ("seed", train.seed.to_string()),
        ("freeze_encoder", train.freeze_encoder.to_string()),
        ("eval_each_epoch", train.eval_each_epoch.to_string()),
        ("num_layers", enc.num_layers.to_string()),
        ("hidden_size", enc.hidden_size.to_string()),
        ("num_heads", enc.num_heads.to_string()),
        ("ffn_size", enc.ffn_size.to_string()),
        ("dropout", enc.dropout.to_string()),
        // 0 means "same as hidden_size".
        ("lstm_hidden", "0".into()),
        ("lowercase", "true".into()),
    ];
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

fn check_key(key: &str, origin: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        bail!("config error: unknown key {key:?} in {origin}; valid keys: {}", KEYS.join(", "))
    }
}

/// Parses a flat `key = value` file. `#` starts a comment line.
pub fn parse_config_file(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config error: {origin} line {}: expected key=value", i + 1))?;
        let key = k.trim().to_string();
        check_key(&key, origin)?;
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("io error: {}", path.display()))?;
    parse_config_file(&text, &path.display().to_string())
}

/// `RELEX_LEARNING_RATE=1e-3` becomes `learning_rate = 1e-3`.
pub fn env_layer(vars: impl IntoIterator<Item = (String, String)>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, value) in vars {
        if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
            let key = rest.to_ascii_lowercase();
            check_key(&key, &format!("environment variable {name}"))?;
            out.insert(key, value);
        }
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("config error: expected KEY=VALUE, got {s:?}"))?;
    let key = k.trim().to_string();
    check_key(&key, "--set")?;
    Ok((key, v.trim().to_string()))
}

/// Fully resolved settings; `values` holds every key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Merges `layers` (lowest precedence first) over the defaults of the
    /// preset the layers select.
    pub fn resolve(layers: &[BTreeMap<String, String>]) -> Result<Self> {
        let preset = layers
            .iter()
            .rev()
            .find_map(|l| l.get("preset"))
            .map(String::as_str)
            .unwrap_or("base");
        let mut values = preset_defaults(preset)?;
        for layer in layers {
            for (k, v) in layer {
                check_key(k, "settings")?;
                values.insert(k.clone(), v.clone());
            }
        }
        let cfg = RunConfig { values };
        cfg.train_config()?.validate()?;
        cfg.head_kind()?;
        cfg.labels()?;
        Ok(cfg)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|e| anyhow!("config error: {key} = {raw:?}: {e}"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn head_kind(&self) -> Result<HeadKind> {
        Ok(self.values["head"].parse::<HeadKind>()?)
    }

    pub fn labels(&self) -> Result<LabelSet> {
        Ok(LabelSet::for_task(&self.values["task"])?)
    }

    pub fn lowercase(&self) -> Result<bool> {
        self.get("lowercase")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.get("learning_rate")?,
            batch_size: self.get("batch_size")?,
            epochs: self.get("epochs")?,
            max_len: self.get("max_len")?,
            seed: self.get("seed")?,
            freeze_encoder: self.get("freeze_encoder")?,
            eval_each_epoch: self.get("eval_each_epoch")?,
        })
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            num_layers: self.get("num_layers")?,
            hidden_size: self.get("hidden_size")?,
            num_heads: self.get("num_heads")?,
            ffn_size: self.get("ffn_size")?,
            vocab_size,
            max_len: self.get("max_len")?,
            dropout: self.get("dropout")?,
            seed: self.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_spec(&self, num_classes: usize) -> Result<HeadSpec> {
        let hidden: usize = self.get("hidden_size")?;
        let mut spec = HeadSpec::new(self.head_kind()?, num_classes, hidden);
        let lstm: usize = self.get("lstm_hidden")?;
        if lstm > 0 {
            spec.lstm_hidden = lstm;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn later_layers_win() {
        let file = layer(&[("epochs", "3"), ("seed", "5"), ("preset", "desk")]);
        let env = layer(&[("seed", "6")]);
        let flags = layer(&[("epochs", "4")]);
        let cfg = RunConfig::resolve(&[file, env, flags]).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.epochs, t.seed, t.learning_rate), (4, 6, 1e-3));
        assert_eq!(cfg.encoder_config(10).unwrap().hidden_size, 32);
    }

    #[test]
    fn base_defaults() {
        let cfg = RunConfig::resolve(&[]).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.learning_rate, t.batch_size, t.epochs, t.max_len), (2e-5, 32, 10, 128));
        assert_eq!(cfg.encoder_config(10).unwrap().hidden_size, 768);
    }

    #[test]
    fn file_syntax_and_unknown_keys() {
        let m = parse_config_file("# comment\n\nepochs = 2\nhead=cls\n", "f").unwrap();
        assert_eq!(m["epochs"], "2");
        assert_eq!(m["head"], "cls");
        let err = parse_config_file("epoch = 2", "f").unwrap_err().to_string();
        assert!(err.contains("valid keys"), "{err}");
        assert!(parse_config_file("epochs 2", "f").is_err());
    }

    #[test]
    fn env_variables_map_to_keys() {
        let m = env_layer([("RELEX_BATCH_SIZE".into(), "4".into()), ("HOME".into(), "/".into())]).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m["batch_size"], "4");
        assert!(env_layer([("RELEX_NOPE".into(), "1".into())]).is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::resolve(&[layer(&[("epochs", "many")])]).unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        let err = RunConfig::resolve(&[layer(&[("head", "bert")])]).unwrap_err().to_string();
        for k in HeadKind::ALL {
            assert!(err.contains(k.name()), "{err}");
        }
    }
}
