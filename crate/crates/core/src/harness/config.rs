//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::gates_decoder::InterChannels;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub train_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 8,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 60,
            seed: 0,
            w_bce: 1.0,
            w_dice: 1.0,
            train_dir: PathBuf::from("data/train"),
            checkpoint: PathBuf::from("model.ckpt"),
        }
    }
}

/// Every recognised key with its one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("input_size", "side of the square input images"),
    ("base_channels", "channel width of pyramid level 1"),
    ("patch_size", "kernel of the stage-1 patch embedding"),
    ("depth", "transformer blocks per stage"),
    ("heads", "attention heads"),
    ("cnn_blocks", "conv blocks per CNN stage"),
    ("mlp_ratio", "transformer MLP expansion"),
    ("se_ratio", "squeeze-and-excitation reduction ratio"),
    ("se_blocks", "SE blocks per fusion module"),
    ("aspp_rates", "three increasing dilation rates, comma separated"),
    ("inter_channels", "attention-gate width rule: half | full"),
    ("decoder_blocks", "conv blocks per decoder level"),
    ("batch_size", "samples per SGD step"),
    ("learning_rate", "SGD step size"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 penalty added to the gradient"),
    ("epochs", "passes over the training set"),
    ("seed", "seed for initialisation and shuffling"),
    ("w_bce", "weight of the BCE term"),
    ("w_dice", "weight of the Dice term"),
    ("train_dir", "dataset directory with images/ and masks/"),
    ("checkpoint", "checkpoint file written after every epoch"),
];

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("{key}: cannot parse {v:?}"),
    })
}

impl TrainConfig {
    /// Parse config text. Keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config { line, msg: format!("expected `key = value`, got {content:?}") });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { line, msg: format!("duplicate key {key:?}") });
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative dataset and checkpoint paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.train_dir = base.join(&cfg.train_dir);
        cfg.checkpoint = base.join(&cfg.checkpoint);
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        match key {
            "input_size" => e.input_size = parse_num(line, key, v)?,
            "base_channels" => e.base_channels = parse_num(line, key, v)?,
            "patch_size" => e.patch_size = parse_num(line, key, v)?,
            "depth" => e.depth = parse_num(line, key, v)?,
            "heads" => e.heads = parse_num(line, key, v)?,
            "cnn_blocks" => e.cnn_blocks = parse_num(line, key, v)?,
            "mlp_ratio" => e.mlp_ratio = parse_num(line, key, v)?,
            "se_ratio" => m.se_ratio = parse_num(line, key, v)?,
            "se_blocks" => m.se_blocks = parse_num(line, key, v)?,
            "aspp_rates" => {
                let rates = v
                    .split(',')
                    .map(|r| parse_num(line, key, r.trim()))
                    .collect::<Result<Vec<usize>>>()?;
                m.aspp_rates = rates.try_into().map_err(|_| Error::Config {
                    line,
                    msg: format!("aspp_rates needs exactly three values, got {v:?}"),
                })?;
            }
            "inter_channels" => {
                m.inter_channels = InterChannels::parse(v).ok_or_else(|| Error::Config {
                    line,
                    msg: format!("inter_channels must be `half` or `full`, got {v:?}"),
                })?
            }
            "decoder_blocks" => m.decoder_blocks = parse_num(line, key, v)?,
            "batch_size" => self.batch_size = parse_num(line, key, v)?,
            "learning_rate" => self.learning_rate = parse_num(line, key, v)?,
            "momentum" => self.momentum = parse_num(line, key, v)?,
            "weight_decay" => self.weight_decay = parse_num(line, key, v)?,
            "epochs" => self.epochs = parse_num(line, key, v)?,
            "seed" => self.seed = parse_num(line, key, v)?,
            "w_bce" => self.w_bce = parse_num(line, key, v)?,
            "w_dice" => self.w_dice = parse_num(line, key, v)?,
            "train_dir" => self.train_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.w_bce < 0.0 || self.w_dice < 0.0 || self.w_bce + self.w_dice <= 0.0 {
            return bad("loss weights must be >= 0 and not both zero");
        }
        Ok(())
    }

    /// Canonical text form, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e: &EncoderConfig = &m.encoder;
        let r = m.aspp_rates;
        let values = [
            e.input_size.to_string(),
            e.base_channels.to_string(),
            e.patch_size.to_string(),
            e.depth.to_string(),
            e.heads.to_string(),
            e.cnn_blocks.to_string(),
            e.mlp_ratio.to_string(),
            m.se_ratio.to_string(),
            m.se_blocks.to_string(),
            format!("{},{},{}", r[0], r[1], r[2]),
            m.inter_channels.as_str().to_string(),
            m.decoder_blocks.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.learning_rate),
            format!("{:?}", self.momentum),
            format!("{:?}", self.weight_decay),
            self.epochs.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.w_bce),
            format!("{:?}", self.w_dice),
            self.train_dir.display().to_string(),
            self.checkpoint.display().to_string(),
        ];
        let mut out = String::new();
        for ((key, _), value) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 0.0);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.learning_rate = 0.05;
        c.model.aspp_rates = [1, 4, 9];
        c.model.inter_channels = InterChannels::Full;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# header\n\nepochs = 3  # short run\nseed=9\n").unwrap();
        assert_eq!((c.epochs, c.seed), (3, 9));
    }

    #[test]
    fn unknown_and_malformed_keys_rejected_with_line() {
        let err = TrainConfig::parse("epochs = 3\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("epochs = three").is_err());
        assert!(TrainConfig::parse("aspp_rates = 1,2").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let text = TrainConfig::default().to_text();
        assert_eq!(text.lines().count(), KEYS.len());
    }
}
