//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys recognized by
//! [`ModelConfig`] and [`TrainConfig`] are listed in their `KEYS` constants;
//! any other key is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Ordered key-value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    fn typed<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn reject_unknown(&self, known: &[&[&str]]) -> Result<()> {
        for k in self.0.keys() {
            if !known.iter().any(|set| set.contains(&k.as_str())) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patches: usize,
    pub channels: usize,
    pub blocks: usize,
    pub latent_dim: usize,
    pub encoder: String,
    pub decoder_embed: usize,
    pub decoder_attention: usize,
    pub decoder_hidden: usize,
    pub decoder_res_blocks: usize,
    pub frame_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            patches: 16,
            channels: 16,
            blocks: 2,
            latent_dim: 27,
            encoder: "so2-projections".into(),
            decoder_embed: 64,
            decoder_attention: 64,
            decoder_hidden: 128,
            decoder_res_blocks: 3,
            frame_hidden: 16,
        }
    }
}

pub const SUPPORTED_LATENT_DIMS: [usize; 3] = [27, 147, 300];

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "height",
        "width",
        "patches",
        "channels",
        "blocks",
        "latent_dim",
        "encoder",
        "decoder_embed",
        "decoder_attention",
        "decoder_hidden",
        "decoder_res_blocks",
        "frame_hidden",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            height: kv.typed("height", d.height)?,
            width: kv.typed("width", d.width)?,
            patches: kv.typed("patches", d.patches)?,
            channels: kv.typed("channels", d.channels)?,
            blocks: kv.typed("blocks", d.blocks)?,
            latent_dim: kv.typed("latent_dim", d.latent_dim)?,
            encoder: kv.typed("encoder", d.encoder)?,
            decoder_embed: kv.typed("decoder_embed", d.decoder_embed)?,
            decoder_attention: kv.typed("decoder_attention", d.decoder_attention)?,
            decoder_hidden: kv.typed("decoder_hidden", d.decoder_hidden)?,
            decoder_res_blocks: kv.typed("decoder_res_blocks", d.decoder_res_blocks)?,
            frame_hidden: kv.typed("frame_hidden", d.frame_hidden)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("patches", self.patches);
        kv.set("channels", self.channels);
        kv.set("blocks", self.blocks);
        kv.set("latent_dim", self.latent_dim);
        kv.set("encoder", &self.encoder);
        kv.set("decoder_embed", self.decoder_embed);
        kv.set("decoder_attention", self.decoder_attention);
        kv.set("decoder_hidden", self.decoder_hidden);
        kv.set("decoder_res_blocks", self.decoder_res_blocks);
        kv.set("frame_hidden", self.frame_hidden);
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("patches", self.patches),
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("decoder_embed", self.decoder_embed),
            ("decoder_attention", self.decoder_attention),
            ("decoder_hidden", self.decoder_hidden),
            ("frame_hidden", self.frame_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.width.is_multiple_of(self.patches) {
            return Err(Error::PatchCount {
                width: self.width,
                patches: self.patches,
            });
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            height: self.height,
            width: self.width,
            patches: self.patches,
            channels: self.channels,
            blocks: self.blocks,
            latent_dim: self.latent_dim,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            latent_dim: self.latent_dim,
            embed: self.decoder_embed,
            attention: self.decoder_attention,
            hidden: self.decoder_hidden,
            res_blocks: self.decoder_res_blocks,
            frame_hidden: self.frame_hidden,
        }
    }
}

/// One curriculum stage: a dataset directory and a step budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub dataset: PathBuf,
    pub steps: usize,
}

/// `path:steps,path:steps`
pub fn parse_stages(text: &str) -> Result<Vec<Stage>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (path, steps) = s
                .rsplit_once(':')
                .ok_or_else(|| Error::Config(format!("stage `{s}` is not `path:steps`")))?;
            let steps = steps
                .parse()
                .map_err(|_| Error::Config(format!("stage `{s}`: bad step count")))?;
            Ok(Stage {
                dataset: PathBuf::from(path),
                steps,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: String,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fit_iterations: usize,
    pub fit_learning_rate: f64,
    pub prior_weight: f64,
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "strategy",
        "learning_rate",
        "steps",
        "batch_size",
        "seed",
        "fit_iterations",
        "fit_learning_rate",
        "prior_weight",
    ];

    /// Defaults with an explicit seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            strategy: "vae".into(),
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 4,
            seed,
            fit_iterations: 800,
            fit_learning_rate: 1e-1,
            prior_weight: 0.01,
        }
    }

    /// The seed has no default: it must come from `kv` or `seed`.
    pub fn from_kv(kv: &KeyValues, seed: Option<u64>) -> Result<Self> {
        let seed = match seed {
            Some(s) => s,
            None => kv
                .get("seed")
                .ok_or_else(|| Error::Config("a seed is required".into()))?
                .parse()
                .map_err(|_| Error::Config("`seed` must be an integer".into()))?,
        };
        let d = Self::with_seed(seed);
        let cfg = Self {
            strategy: kv.typed("strategy", d.strategy)?,
            learning_rate: kv.typed("learning_rate", d.learning_rate)?,
            steps: kv.typed("steps", d.steps)?,
            batch_size: kv.typed("batch_size", d.batch_size)?,
            seed,
            fit_iterations: kv.typed("fit_iterations", d.fit_iterations)?,
            fit_learning_rate: kv.typed("fit_learning_rate", d.fit_learning_rate)?,
            prior_weight: kv.typed("prior_weight", d.prior_weight)?,
        };
        if cfg.batch_size == 0 || cfg.fit_iterations == 0 {
            return Err(Error::Config("batch_size and fit_iterations must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("strategy", &self.strategy);
        kv.set("learning_rate", self.learning_rate);
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("fit_iterations", self.fit_iterations);
        kv.set("fit_learning_rate", self.fit_learning_rate);
        kv.set("prior_weight", self.prior_weight);
    }
}

/// Parses model and training settings from one file, rejecting unknown keys.
pub fn parse_full(kv: &KeyValues, seed: Option<u64>) -> Result<(ModelConfig, TrainConfig)> {
    kv.reject_unknown(&[ModelConfig::KEYS, TrainConfig::KEYS])?;
    Ok((ModelConfig::from_kv(kv)?, TrainConfig::from_kv(kv, seed)?))
}

/// Hex SHA-256 of the canonical text of `kv`.
pub fn config_hash(kv: &KeyValues) -> String {
    let digest = Sha256::digest(kv.to_text().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# model\nlatent_dim = 147\n\nencoder=full-vn\nseed = 9\n").unwrap();
        let (m, t) = parse_full(&kv, None).unwrap();
        assert_eq!(m.latent_dim, 147);
        assert_eq!(m.encoder, "full-vn");
        assert_eq!(m.patches, 16);
        assert_eq!(t.seed, 9);
        assert_eq!(t.fit_iterations, 800);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_rejected() {
        let kv = KeyValues::parse("latent_dim = 27").unwrap();
        assert!(matches!(parse_full(&kv, None), Err(Error::Config(_))));
        assert!(parse_full(&kv, Some(3)).is_ok());
        let kv = KeyValues::parse("latnet_dim = 27").unwrap();
        assert!(parse_full(&kv, Some(3)).unwrap_err().to_string().contains("latnet_dim"));
        assert!(KeyValues::parse("no equals sign").is_err());
    }

    #[test]
    fn hash_is_canonical() {
        let a = KeyValues::parse("b = 2\na = 1").unwrap();
        let b = KeyValues::parse("a=1\n# x\nb=2").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = KeyValues::parse("a=1\nb=3").unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn stages_parse() {
        let s = parse_stages("data/street:1500, data/reni:500").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].steps, 500);
        assert!(parse_stages("data/street").is_err());
    }
}
